"""Two-channel patch discriminator written directly in numpy.

The network sees the fixed patch and the moving patch as two input channels::

    conv(3x3, stride 2) -> ReLU -> ... -> global average pool -> dense -> logit

Convolutions are valid (unpadded) and run channels-last through an im2col
matmul. Parameters are kept in float32 so the binary model file round-trips
exactly; forward passes can be evaluated in float64 when precision matters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Architecture",
    "ClassifierParams",
    "init_classifier",
    "HE_GAIN",
    "forward",
    "backward",
    "classifier_logit",
    "predict_prob",
    "sigmoid",
    "logit",
    "loss_and_grads",
    "save_classifier",
    "load_classifier",
]

MAGIC = b"DITRNET\x00"
HE_GAIN = 6.0**0.5
FORMAT_VERSION = 1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out[()] if out.ndim == 0 else out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class Architecture:
    """Layer layout of the discriminator.

    ``convs`` lists ``(out_channels, kernel, stride)`` per convolution and
    ``hidden`` the widths of optional dense layers between pooling and the
    scalar output. Channel ``c`` enters the network as
    ``(x - input_shift[c]) / input_scale[c]``; training fills these with the
    dataset statistics (see :class:`ditr.train.TrainConfig`).
    """

    patch_size: int = 17
    convs: tuple = ((8, 3, 2), (16, 3, 2))
    hidden: tuple = ()
    in_channels: int = 2
    input_shift: tuple = (0.0, 0.0)
    input_scale: tuple = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "convs", tuple(tuple(int(v) for v in c) for c in self.convs))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "input_shift", tuple(float(v) for v in self.input_shift))
        object.__setattr__(self, "input_scale", tuple(float(v) for v in self.input_scale))
        if len(self.input_shift) != self.in_channels or len(self.input_scale) != self.in_channels:
            raise ValueError("one input shift and scale per channel")
        if min(self.input_scale) <= 0:
            raise ValueError("input scales must be positive")
        if self.patch_size <= 0 or self.in_channels <= 0:
            raise ValueError("patch size and channel count must be positive")
        for c in self.convs:
            if len(c) != 3 or min(c) <= 0:
                raise ValueError(f"bad conv layer {c}")
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.feature_map_size() < 1:
            raise ValueError("patch too small for the convolution stack")

    def feature_map_size(self) -> int:
        size = self.patch_size
        for _, k, s in self.convs:
            size = (size - k) // s + 1
        return size

    def shapes(self) -> list[tuple]:
        shapes = []
        ch = self.in_channels
        for out, k, _ in self.convs:
            shapes += [(out, ch, k, k), (out,)]
            ch = out
        for width in self.hidden:
            shapes += [(width, ch), (width,)]
            ch = width
        shapes += [(1, ch), (1,)]
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes()))

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "convs": [list(c) for c in self.convs],
            "hidden": list(self.hidden),
            "in_channels": self.in_channels,
            "input_shift": list(self.input_shift),
            "input_scale": list(self.input_scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            d["patch_size"],
            tuple(tuple(c) for c in d["convs"]),
            tuple(d.get("hidden", ())),
            d.get("in_channels", 2),
            tuple(d.get("input_shift", (0.0, 0.0))),
            tuple(d.get("input_scale", (1.0, 1.0))),
        )


@dataclass
class ClassifierParams:
    arch: Architecture
    weights: list = field(default_factory=list)
    seed: int | None = None

    def __post_init__(self):
        shapes = self.arch.shapes()
        if len(self.weights) != len(shapes):
            raise ValueError("parameter list does not match the architecture")
        ws = []
        for w, s in zip(self.weights, shapes):
            w = np.asarray(w, dtype=np.float32)
            if w.shape != s:
                raise ValueError(f"parameter shape {w.shape} != expected {s}")
            if not np.isfinite(w).all():
                raise ValueError("non-finite parameter")
            ws.append(w)
        self.weights = ws

    @property
    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights))

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.arch, [w.copy() for w in self.weights], self.seed)

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().astype("<f4").tobytes()).hexdigest()


def init_classifier(arch: Architecture, seed: int = 0, gain: float = 1.0) -> ClassifierParams:
    """Fan-in scaled uniform weights ``U(-g/sqrt(fan_in), g/sqrt(fan_in))``, zero biases.

    ``gain=1`` gives weight variance ``1/(3 fan_in)``; ``gain=sqrt(6)`` is
    the He-uniform bound for ReLU stacks.
    """
    if not gain > 0:
        raise ValueError("init gain must be positive")
    rng = np.random.default_rng(seed)
    weights = []
    for shape in arch.shapes():
        if len(shape) == 1:
            weights.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = gain / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=shape).astype(np.float32))
    return ClassifierParams(arch, weights, seed)


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(B, H, W, C) -> (B, Ho, Wo, C*k*k), matching weight layout (O, C, k, k)."""
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    b, ho, wo, c = win.shape[:4]
    return win.reshape(b, ho, wo, c * k * k)


def _as_input(u, v, dtype, shift=(0.0, 0.0), scale=(1.0, 1.0)) -> np.ndarray:
    u = np.asarray(u, dtype=dtype)
    v = np.asarray(v, dtype=dtype)
    if u.shape != v.shape:
        raise ValueError(f"patch shapes differ: {u.shape} vs {v.shape}")
    if u.ndim == 2:
        u, v = u[None], v[None]
    x = np.stack([u, v], axis=-1)
    if any(shift) or any(c != 1.0 for c in scale):
        x = (x - np.asarray(shift, dtype=dtype)) / np.asarray(scale, dtype=dtype)
    return x


def forward(params: ClassifierParams, u, v, dtype=np.float64, keep: bool = False):
    """Logits for a batch of patch pairs ``u, v`` of shape ``(B, p, p)`` (or a single ``(p, p)`` pair).

    With ``keep=True`` also returns the activations needed by :func:`backward`.
    """
    arch = params.arch
    x = _as_input(u, v, dtype, arch.input_shift, arch.input_scale)
    p = arch.patch_size
    if x.shape[1:3] != (p, p):
        raise ValueError(f"expected {p}x{p} patches, got {x.shape[1]}x{x.shape[2]}")
    ws = [w.astype(dtype, copy=False) for w in params.weights]
    cache = []
    i = 0
    for out, k, s in arch.convs:
        w, b = ws[i], ws[i + 1]
        i += 2
        cols = _im2col(x, k, s)
        z = cols @ w.reshape(out, -1).T + b
        x = np.maximum(z, 0)
        cache.append((cols, z, x.shape))
    h = x.mean(axis=(1, 2))
    pooled = h
    dense = []
    for _ in arch.hidden:
        w, b = ws[i], ws[i + 1]
        i += 2
        z = h @ w.T + b
        dense.append((h, z))
        h = np.maximum(z, 0)
    w, b = ws[i], ws[i + 1]
    f = h @ w[0] + b[0]
    if keep:
        return f, {"convs": cache, "pooled": pooled, "dense": dense, "last": h, "ws": ws, "input": x.shape}
    return f


def backward(params: ClassifierParams, cache: dict, dlogits: np.ndarray) -> list:
    """Gradients of ``sum(dlogits * f)`` with respect to every parameter array."""
    arch = params.arch
    ws = cache["ws"]
    grads = [None] * len(ws)
    i = len(ws) - 2
    h = cache["last"]
    grads[i] = (dlogits @ h)[None, :]
    grads[i + 1] = np.array([dlogits.sum()])
    dh = np.outer(dlogits, ws[i][0])
    for (hin, z), _ in zip(reversed(cache["dense"]), reversed(arch.hidden)):
        i -= 2
        dz = dh * (z > 0)
        grads[i] = dz.T @ hin
        grads[i + 1] = dz.sum(axis=0)
        dh = dz @ ws[i]
    # global average pool
    cols, z, (bsz, ho, wo, out) = cache["convs"][-1]
    da = np.broadcast_to(dh[:, None, None, :] / (ho * wo), (bsz, ho, wo, out))
    for layer in range(len(arch.convs) - 1, -1, -1):
        out, k, s = arch.convs[layer]
        cols, z, _ = cache["convs"][layer]
        i -= 2
        dz = da * (z > 0)
        dz2 = dz.reshape(-1, out)
        grads[i] = (dz2.T @ cols.reshape(dz2.shape[0], -1)).reshape(ws[i].shape)
        grads[i + 1] = dz2.sum(axis=0)
        if layer == 0:
            break
        cin = ws[i].shape[1]
        dcols = (dz2 @ ws[i].reshape(out, -1)).reshape(bsz, ho, wo, cin, k, k)
        prev_shape = cache["convs"][layer - 1][2]
        dx = np.zeros(prev_shape, dtype=dz.dtype)
        for di in range(k):
            for dj in range(k):
                dx[:, di : di + s * (ho - 1) + 1 : s, dj : dj + s * (wo - 1) + 1 : s, :] += dcols[..., di, dj]
        da = dx
        _, ho, wo, _ = prev_shape
    return grads


def loss_and_grads(params: ClassifierParams, u, v, z, weight_decay: float = 0.0, dtype=np.float64):
    """Mean binary cross-entropy plus ``weight_decay * 0.5 * ||theta||^2`` and its gradient."""
    f, cache = forward(params, u, v, dtype=dtype, keep=True)
    z = np.asarray(z, dtype=dtype)
    n = f.shape[0]
    # log(1 + e^f) - z f, stable for large |f|
    ce = np.logaddexp(0, f) - z * f
    with np.errstate(over="ignore"):  # e^-f = inf gives p = 0, as it should
        p = 1.0 / (1.0 + np.exp(-f))
    grads = backward(params, cache, (p - z) / n)
    ws = cache["ws"]
    reg = 0.0
    if weight_decay:
        reg = 0.5 * weight_decay * sum(float((w.astype(np.float64) ** 2).sum()) for w in ws)
        grads = [g + weight_decay * w for g, w in zip(grads, ws)]
    return float(ce.mean()) + reg, grads


def classifier_logit(params: ClassifierParams, u, v) -> float:
    f = forward(params, u, v, dtype=np.float64)
    return float(f[0]) if np.ndim(u) == 2 else f


def predict_prob(params: ClassifierParams, u, v):
    return sigmoid(classifier_logit(params, u, v))


def save_classifier(params: ClassifierParams, path) -> None:
    """Binary model file: magic, version, JSON header length + header, little-endian float32 weights."""
    header = json.dumps({"arch": params.arch.to_dict(), "seed": params.seed}, sort_keys=True).encode()
    body = params.flat().astype("<f4").tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + body)


def load_classifier(path) -> ClassifierParams:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a classifier file")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off += 8
    header = json.loads(raw[off : off + hlen])
    off += hlen
    arch = Architecture.from_dict(header["arch"])
    flat = np.frombuffer(raw, dtype="<f4", offset=off)
    if flat.size != arch.n_params():
        raise ValueError(f"{path}: expected {arch.n_params()} parameters, found {flat.size}")
    weights = []
    pos = 0
    for shape in arch.shapes():
        n = int(np.prod(shape))
        weights.append(flat[pos : pos + n].reshape(shape).astype(np.float32))
        pos += n
    return ClassifierParams(arch, weights, header.get("seed"))


def preactivation_margin(params: ClassifierParams, u, v) -> float:
    """Smallest ``|z|`` over all ReLU pre-activations for the given inputs."""
    _, cache = forward(params, u, v, dtype=np.float64, keep=True)
    zs = [np.abs(z).min() for _, z, _ in cache["convs"]] + [np.abs(z).min() for _, z in cache["dense"]]
    return float(min(zs))


def check_gradients(params: ClassifierParams, u, v, z, h: float = 1e-3, weight_decay: float = 0.0) -> float:
    """Max relative error between backprop and central differences over every parameter.

    Perturbations are applied to a float64 copy of the parameters, so the
    comparison is free of float32 rounding. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    base = [w.astype(np.float64) for w in params.weights]
    probe = ClassifierParams.__new__(ClassifierParams)
    probe.arch, probe.seed = params.arch, params.seed
    probe.weights = base
    _, analytic = loss_and_grads(probe, u, v, z, weight_decay)
    worst = 0.0
    for k, w in enumerate(base):
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            fp, _ = loss_and_grads(probe, u, v, z, weight_decay)
            w[idx] = orig - h
            fm, _ = loss_and_grads(probe, u, v, z, weight_decay)
            w[idx] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[k][idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst
