import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditr.histogram import NoOverlapError
from ditr.image import Image, downsample, gaussian_smooth, normalize_intensity
from ditr.metrics import MutualInformation, NegJointEntropy
from ditr.optimize import (
    InvalidBracketError,
    NonFiniteObjectiveError,
    PowellConfig,
    bracket_minimum,
    brent_line_min,
    powell_minimize,
    register,
    write_trace_csv,
)
from ditr.transform import TransformParams


def _non_increasing(trace):
    return all(b <= a for a, b in zip(trace, trace[1:]))


# -- Brent -------------------------------------------------------------------


def test_brent_examples():
    t, f = brent_line_min(lambda t: (t - 2) ** 2, (0, 1, 5))
    assert abs(t - 2) < 1e-6
    t, _ = brent_line_min(abs, (-1, -0.1, 1))
    assert abs(t) < 1e-5
    # stationary points of t^4 - t^2: 4t^3 = 2t  =>  t = 1/sqrt(2)
    t, f = brent_line_min(lambda t: t**4 - t**2, (0.2, 0.5, 2.0))
    assert abs(t - 1 / math.sqrt(2)) < 1e-6
    assert f == pytest.approx(-0.25, abs=1e-12)


def test_brent_invalid_bracket():
    with pytest.raises(InvalidBracketError):
        brent_line_min(lambda t: t, (0, 1, 2))
    with pytest.raises(InvalidBracketError):
        brent_line_min(lambda t: t * t, (0, 3, 2))


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 10))
def test_brent_parabola_anywhere(m, a):
    f = lambda t: a * (t - m) ** 2  # noqa: E731
    bracket, vals, ok = bracket_minimum(f, 0.0, 1.0)
    assert ok
    t, _ = brent_line_min(f, bracket, fvals=vals)
    assert abs(t - m) < 1e-6 * max(1, abs(m))


def test_bracket_respects_max_step():
    seen = []

    def f(t):
        seen.append(t)
        return -t  # decreasing forever

    bracket, vals, ok = bracket_minimum(f, 0.0, 1.0, max_step=10.0)
    assert not ok
    assert max(seen) <= 10.0
    assert bracket[1] == 10.0


# -- Powell ------------------------------------------------------------------


def test_powell_quadratic():
    r = powell_minimize(lambda x: (x[0] - 1) ** 2 + (x[1] - 2) ** 2, np.zeros(2))
    np.testing.assert_allclose(r.x, [1, 2], atol=1e-5)
    assert _non_increasing(r.trace)


def test_powell_constant_returns_start():
    x0 = np.array([0.3, -1.2, 4.0])
    r = powell_minimize(lambda x: 7.0, x0)
    np.testing.assert_array_equal(r.x, x0)
    assert r.iterations == 1 and r.fun == 7.0


def test_powell_ill_conditioned_4d():
    m = np.array([1.0, -2.0, 0.5, 3.0])
    d = np.array([1.0, 10.0, 100.0, 1000.0])
    r = powell_minimize(lambda x: float((d * (x - m) ** 2).sum()), np.zeros(4))
    np.testing.assert_allclose(r.x, m, atol=1e-4)
    assert _non_increasing(r.trace)


def test_powell_rosenbrock_progress():
    f = lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2  # noqa: E731
    r = powell_minimize(f, np.array([-1.2, 1.0]), PowellConfig(ftol=1e-12, max_iterations=200))
    assert _non_increasing(r.trace)
    np.testing.assert_allclose(r.x, [1, 1], atol=1e-3)


def test_powell_non_finite():
    with pytest.raises(NonFiniteObjectiveError) as err:
        powell_minimize(lambda x: math.inf if x[0] > 0.5 else (x[0] - 2) ** 2, np.zeros(1))
    assert err.value.point[0] > 0.5


def test_powell_never_worse_than_start():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.normal(size=3)
        f = lambda x: float(np.sin(3 * x @ w) + 0.1 * (x**2).sum())  # noqa: E731
        x0 = rng.normal(size=3)
        r = powell_minimize(f, x0)
        assert r.fun <= f(x0)
        assert _non_increasing(r.trace)


def test_powell_scale_consistency():
    s = np.array([2.0, 0.01, 5.0])
    m = np.array([3.0, 0.02, -10.0])
    f = lambda x: float((((x - m) / s) ** 2 * [1, 3, 7]).sum() + np.cos((x[0] - m[0]) / s[0]))  # noqa: E731
    x0 = np.array([0.5, 0.0, 1.0])
    scaled = powell_minimize(f, x0, PowellConfig(param_scales=tuple(s)))
    plain = powell_minimize(lambda y: f(y * s), x0 / s)
    np.testing.assert_allclose(scaled.x, plain.x * s, atol=1e-6)


def test_powell_config_validation():
    with pytest.raises(ValueError):
        PowellConfig(ftol=0)
    with pytest.raises(ValueError):
        PowellConfig(param_scales=(1.0, 0.0))


def test_trace_csv(tmp_path):
    r = powell_minimize(lambda x: (x[0] - 1) ** 2 + x[1] ** 2, np.array([3.0, 1.0]))
    write_trace_csv(r, tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "iteration,objective,p0,p1"
    assert len(rows) == len(r.trace) + 1


# -- register ----------------------------------------------------------------


def _shifted_pair(shift=5, w=64):
    rng = np.random.default_rng(1)
    big = normalize_intensity(gaussian_smooth(Image(rng.random((w + 20, w + 40))), 2.5)).data
    c0 = 20
    fixed = Image(big[10 : 10 + w, c0 : c0 + w])
    moving = Image(big[10 : 10 + w, c0 - shift : c0 - shift + w])
    return fixed, moving


def test_register_recovers_translation_with_mi():
    fixed, moving = _shifted_pair()
    beta0 = TransformParams.identity(center=fixed.center)
    res = register(MutualInformation(32), fixed, moving, beta0)
    assert abs(res.beta.tx - 5) < 0.5 and abs(res.beta.ty) < 0.5
    assert abs(res.beta.theta) < 0.02


def test_register_from_truth_does_not_decrease_metric():
    fixed, moving = _shifted_pair()
    beta = TransformParams.rigid(5, 0, 0, center=fixed.center)
    metric = NegJointEntropy(32)
    res = register(metric, fixed, moving, beta)
    assert res.value >= metric(fixed, moving, beta)
    for tr in res.traces:
        assert _non_increasing(tr.trace)


def test_register_schedule_equals_manual_chaining():
    fixed, moving = _shifted_pair()
    beta0 = TransformParams.rigid(2, 1, 0.02, center=fixed.center)
    metric = MutualInformation(24)
    both = register(metric, fixed, moving, beta0, schedule=[(4, None), (1, None)])
    first = register(metric, fixed, moving, beta0, schedule=[(4, None)])
    second = register(metric, fixed, moving, first.beta)
    np.testing.assert_array_equal(both.beta.to_vector(), second.beta.to_vector())
    assert both.value == second.value


def test_register_translation_steps_are_level_pixels():
    fixed, moving = _shifted_pair()
    beta0 = TransformParams.identity(center=fixed.center)
    res = register(MutualInformation(24), fixed, moving, beta0, schedule=[(2, None)])
    assert downsample(fixed, 2).spacing == 2.0
    # recovered in physical units even though the search ran on the coarse grid
    assert abs(res.beta.tx - 5) < 1.0


def test_register_rejects_increasing_schedule():
    fixed, moving = _shifted_pair()
    with pytest.raises(ValueError):
        register(MutualInformation(), fixed, moving, TransformParams.identity(), schedule=[(1, None), (2, None)])


def test_register_no_overlap_carries_beta():
    fixed, moving = _shifted_pair()
    beta0 = TransformParams.rigid(500, 0, 0, center=fixed.center)
    with pytest.raises(NoOverlapError) as err:
        register(MutualInformation(), fixed, moving, beta0)
    assert err.value.beta is not None and err.value.beta.tx == 500


def test_register_affine_runs():
    fixed, moving = _shifted_pair()
    beta0 = TransformParams.identity("affine", fixed.center)
    res = register(MutualInformation(32), fixed, moving, beta0)
    assert res.beta.kind == "affine"
    assert abs(res.beta.tx - 5) < 0.5
