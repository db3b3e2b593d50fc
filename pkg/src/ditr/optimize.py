"""Derivative-free optimization: Brent line search, Powell's direction set, multiscale registration."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .histogram import NoOverlapError
from .image import Image, downsample
from .transform import TransformParams, param_scales

__all__ = [
    "PowellConfig",
    "PowellResult",
    "NonFiniteObjectiveError",
    "InvalidBracketError",
    "bracket_minimum",
    "brent_line_min",
    "powell_minimize",
    "RegistrationResult",
    "register",
    "write_trace_csv",
]

GOLDEN = 0.5 * (1 + math.sqrt(5))
CGOLD = 0.3819660112501051
TINY = 1e-20


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, point, value):
        super().__init__(f"objective returned {value} at {np.asarray(point).tolist()}")
        self.point = np.asarray(point)
        self.value = value


class InvalidBracketError(ValueError):
    pass


@dataclass(frozen=True)
class PowellConfig:
    param_scales: tuple | None = None
    ftol: float = 1e-4
    max_iterations: int = 50
    bracket_step: float = 1.0
    max_step: float = 10.0
    line_tol: float = 1e-3

    def __post_init__(self):
        if not self.ftol > 0:
            raise ValueError("ftol must be positive")
        if self.param_scales is not None and min(self.param_scales) <= 0:
            raise ValueError("parameter scales must be positive")


def bracket_minimum(f1d: Callable[[float], float], a: float, b: float, fa: float | None = None, max_step: float = math.inf):
    """Expand outward from ``(a, b)`` until ``f(b) < f(a)`` and ``f(b) < f(c)``.

    Returns ``((a, b, c), (fa, fb, fc), bracketed)``. Steps never leave
    ``[a0 - max_step, a0 + max_step]``; when that wall is hit before a
    bracket forms, ``bracketed`` is False and ``b`` is the best point seen.
    """
    origin = a
    lo, hi = origin - max_step, origin + max_step
    fa = f1d(a) if fa is None else fa
    fb = f1d(b)
    if fb > fa:
        a, b, fa, fb = b, a, fb, fa
    c = min(max(b + GOLDEN * (b - a), lo), hi)
    fc = f1d(c)
    for _ in range(100):
        if fb < fc:
            return (a, b, c), (fa, fb, fc), True
        if fc == fb and fb == fa:
            # flat: nothing to bracket
            return (a, b, c), (fa, fb, fc), False
        if c in (lo, hi):
            return (b, c, c), (fb, fc, fc), False
        # parabolic extrapolation, limited to 100 golden steps
        r = (b - a) * (fb - fc)
        q = (b - c) * (fb - fa)
        denom = 2.0 * math.copysign(max(abs(q - r), TINY), q - r)
        u = b - ((b - c) * q - (b - a) * r) / denom
        ulim = b + 100.0 * (c - b)
        if (b - u) * (u - c) > 0:
            fu = f1d(u)
            if fu < fc:
                return (b, u, c), (fb, fu, fc), True
            if fu > fb:
                return (a, b, u), (fa, fb, fu), True
            u = c + GOLDEN * (c - b)
        elif (c - u) * (u - ulim) > 0:
            pass
        elif (u - ulim) * (ulim - c) >= 0:
            u = ulim
        else:
            u = c + GOLDEN * (c - b)
        u = min(max(u, lo), hi)
        fu = f1d(u)
        a, b, c = b, c, u
        fa, fb, fc = fb, fc, fu
    return (a, b, c), (fa, fb, fc), fb < fc


def brent_line_min(f1d, bracket, tol: float = 1e-8, abs_tol: float = 1e-10, max_iter: int = 200, fvals=None):
    """Brent's parabolic/golden-section minimization inside a bracket ``(a, b, c)``.

    Requires ``f(b) <= f(a)`` and ``f(b) <= f(c)``; ``fvals`` may supply the
    three known values. Returns ``(t, f(t))``.
    """
    a, b, c = bracket
    fa, fb_, fc = (f1d(a), f1d(b), f1d(c)) if fvals is None else fvals
    if not (fb_ <= fa and fb_ <= fc) or not (min(a, c) < b < max(a, c)):
        raise InvalidBracketError(f"invalid bracket ({a}, {b}, {c})")
    lo, hi = min(a, c), max(a, c)
    x = w = v = b
    fx = fw = fv = fb_
    d = e = 0.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        tol1 = tol * abs(x) + abs_tol
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (hi - lo):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0:
                p = -p
            q = abs(q)
            if abs(p) < abs(0.5 * q * e) and q * (lo - x) < p < q * (hi - x):
                e, d = d, p / q
                u = x + d
                if u - lo < tol2 or hi - u < tol2:
                    d = math.copysign(tol1, mid - x)
                use_golden = False
        if use_golden:
            e = (lo - x) if x >= mid else (hi - x)
            d = CGOLD * e
        u = x + d if abs(d) >= tol1 else x + math.copysign(tol1, d)
        fu = f1d(u)
        if fu <= fx:
            if u >= x:
                lo = x
            else:
                hi = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                lo = u
            else:
                hi = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


@dataclass
class PowellResult:
    x: np.ndarray
    fun: float
    trace: list = field(default_factory=list)
    points: list = field(default_factory=list)
    n_evals: int = 0
    iterations: int = 0


def _line_minimize(f, x, fx, direction, cfg: PowellConfig):
    norm = np.linalg.norm(direction)
    if norm == 0:
        return x, fx
    # unit direction so bracket_step and max_step are distances in scaled units
    direction = direction / norm

    def g(t):
        return f(x + t * direction)

    bracket, values, ok = bracket_minimum(g, 0.0, cfg.bracket_step, fa=fx, max_step=cfg.max_step)
    if ok:
        t, ft = brent_line_min(g, bracket, tol=cfg.line_tol, abs_tol=cfg.line_tol * 1e-2, fvals=values)
    else:
        i = int(np.argmin(values))
        t, ft = bracket[i], values[i]
    if ft < fx:
        return x + t * direction, ft
    return x, fx


def powell_minimize(f: Callable[[np.ndarray], float], x0, cfg: PowellConfig | None = None) -> PowellResult:
    """Powell's conjugate-direction method.

    ``f`` is evaluated on ``x * scales`` while the search runs on the scaled
    vector ``x``. The returned point is never worse than ``x0``. The
    direction set is reset to the coordinate basis every ``n`` iterations.
    """
    cfg = cfg or PowellConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    scales = np.ones(n) if cfg.param_scales is None else np.asarray(cfg.param_scales, dtype=np.float64)
    evals = 0

    def fs(y):
        nonlocal evals
        evals += 1
        val = f(y * scales)
        if not np.isfinite(val):
            raise NonFiniteObjectiveError(y * scales, val)
        return float(val)

    x = x0 / scales
    fx = fs(x)
    trace, points = [fx], [x * scales]
    dirs = np.eye(n)
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        x_start, f_start = x.copy(), fx
        big_drop, ibig = 0.0, 0
        for i in range(n):
            f_before = fx
            x, fx = _line_minimize(fs, x, fx, dirs[i], cfg)
            if f_before - fx > big_drop:
                big_drop, ibig = f_before - fx, i
        trace.append(fx)
        points.append(x * scales)
        if 2.0 * abs(f_start - fx) <= cfg.ftol * (abs(f_start) + abs(fx)) + TINY:
            break
        if it % n == 0:
            dirs = np.eye(n)
            continue
        step = x - x_start
        fe = fs(x + step)
        if fe < f_start:
            t = 2.0 * (f_start - 2.0 * fx + fe) * (f_start - fx - big_drop) ** 2 - big_drop * (f_start - fe) ** 2
            if t < 0:
                x, fx = _line_minimize(fs, x, fx, step, cfg)
                dirs[ibig] = dirs[-1]
                dirs[-1] = step / max(np.linalg.norm(step), TINY)
                trace[-1] = fx
                points[-1] = x * scales
    return PowellResult(x * scales, fx, trace, points, evals, it)


@dataclass
class RegistrationResult:
    beta: TransformParams
    value: float
    traces: list = field(default_factory=list)


def _level_factor(level) -> int:
    return max(int(level), 1)


def register(
    metric,
    fixed: Image,
    moving: Image,
    beta0: TransformParams,
    schedule: Sequence | None = None,
    cfg: PowellConfig | None = None,
    min_size: int = 1,
) -> RegistrationResult:
    """Maximize ``metric`` over transform parameters, coarse to fine.

    ``schedule`` is a sequence of ``(factor, objective)`` levels (objective
    ``None`` means ``metric``); factors 0 and 1 both mean full resolution.
    The default is a single full-resolution level. Translation steps are one
    pixel of the current level.
    """
    schedule = [(1, None)] if schedule is None else list(schedule)
    factors = [_level_factor(f) for f, _ in schedule]
    if any(b > a for a, b in zip(factors, factors[1:])):
        raise ValueError("schedule factors must be non-increasing")
    cfg = cfg or PowellConfig()
    beta = beta0
    traces = []
    value = math.nan
    for factor, objective in zip(factors, (o for _, o in schedule)):
        objective = metric if objective is None else objective
        fl = downsample(fixed, factor, min_size)
        ml = downsample(moving, factor, min_size)
        kind, center = beta.kind, beta.center
        scales = cfg.param_scales or tuple(param_scales(kind, fl.spacing))
        level_cfg = PowellConfig(scales, cfg.ftol, cfg.max_iterations, cfg.bracket_step, cfg.max_step, cfg.line_tol)

        def neg(vec, objective=objective, fl=fl, ml=ml):
            b = TransformParams.from_vector(kind, vec, center)
            try:
                return -objective(fl, ml, b)
            except NoOverlapError as exc:
                raise NoOverlapError(f"no overlap at level {factor}", beta=b) from exc

        res = powell_minimize(neg, beta.to_vector(), level_cfg)
        beta = TransformParams.from_vector(kind, res.x, center)
        value = -res.fun
        traces.append(res)
    return RegistrationResult(beta, value, traces)


def write_trace_csv(result: PowellResult, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"] + [f"p{i}" for i in range(len(result.x))])
        for i, (val, pt) in enumerate(zip(result.trace, result.points)):
            w.writerow([i, repr(val)] + [repr(float(c)) for c in pt])
