import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditr.evaluate import FREReport, SweepResult, fre, fre_per_landmark, peak_analysis, perturb_along, response_sweep
from ditr.image import Image, gaussian_smooth, normalize_intensity
from ditr.metrics import DeepMetric, MutualInformation
from ditr.network import Architecture, ClassifierParams
from ditr.transform import TransformParams, compose, map_point


def _smooth_image(seed=0, n=48, sigma=2.5):
    return normalize_intensity(gaussian_smooth(Image(np.random.default_rng(seed).random((n, n))), sigma))


# -- FRE ---------------------------------------------------------------------


def test_fre_examples():
    rng = np.random.default_rng(0)
    lm = rng.uniform(0, 100, (50, 2))
    beta = TransformParams.rigid(3, -2, 0.1, center=(50, 50))
    assert fre(beta, beta, lm) == 0.0
    extra = compose(TransformParams.rigid(3, 4, 0), beta)
    assert fre(extra, beta, lm) == pytest.approx(5.0, abs=1e-12)


def test_fre_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = TransformParams.rigid(*rng.uniform(-10, 10, 2), rng.uniform(-0.3, 0.3), center=(32, 32))
        b = TransformParams.rigid(*rng.uniform(-10, 10, 2), rng.uniform(-0.3, 0.3), center=(32, 32))
        lm = rng.uniform(0, 64, (30, 2))
        total = 0.0
        for x, y in lm:
            ca, sa = math.cos(a.theta), math.sin(a.theta)
            cb, sb = math.cos(b.theta), math.sin(b.theta)
            ax = ca * (x - 32) - sa * (y - 32) + 32 + a.tx
            ay = sa * (x - 32) + ca * (y - 32) + 32 + a.ty
            bx = cb * (x - 32) - sb * (y - 32) + 32 + b.tx
            by = sb * (x - 32) + cb * (y - 32) + 32 + b.ty
            total += math.hypot(ax - bx, ay - by)
        assert fre(a, b, lm) == pytest.approx(total / len(lm), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_fre_invariant_to_landmark_order(seed):
    rng = np.random.default_rng(seed)
    lm = rng.uniform(0, 64, (25, 2))
    a = TransformParams.rigid(*rng.uniform(-5, 5, 3))
    b = TransformParams.affine(np.eye(2) + rng.uniform(-0.05, 0.05, (2, 2)), 1, 2)
    assert fre(a, b, lm[rng.permutation(25)]) == pytest.approx(fre(a, b, lm), abs=1e-12)
    assert fre(a, b, lm) >= 0


def test_fre_per_landmark_and_errors():
    lm = np.array([[0.0, 0.0], [10.0, 0.0]])
    d = fre_per_landmark(TransformParams.rigid(1, 0, 0), TransformParams.identity(), lm)
    np.testing.assert_array_equal(d, [1, 1])
    with pytest.raises(ValueError):
        fre(TransformParams.identity(), TransformParams.identity(), np.zeros((0, 2)))


def test_fre_report_summary():
    rep = FREReport("mi", [1.0, 2.0, 3.0, 4.0])
    assert rep.median == 2.5
    s = rep.summary()
    assert s["q1"] == 1.75 and s["q3"] == 3.25 and s["n"] == 4


# -- sweeps ------------------------------------------------------------------


def test_sweep_zero_classifier_is_flat():
    arch = Architecture()
    theta = ClassifierParams(arch, [np.zeros(s) for s in arch.shapes()])
    img = _smooth_image()
    sw = response_sweep(DeepMetric(theta), img, img, TransformParams.identity(center=img.center), "tx", -5, 5, 1)
    np.testing.assert_array_equal(sw.scores, 0.0)
    assert len(sw.offsets) == 11


def test_mi_sweep_peaks_at_alignment():
    img = _smooth_image(1, 64)
    beta = TransformParams.identity(center=img.center)
    metric = MutualInformation(32)
    coarse = response_sweep(metric, img, img, beta, "tx", -6, 6, 1.0)
    dense = response_sweep(metric, img, img, beta, "tx", -6, 6, 0.1)
    assert abs(coarse.offsets[np.argmax(coarse.scores)]) <= 1.0
    assert abs(dense.offsets[np.argmax(dense.scores)] - coarse.offsets[np.argmax(coarse.scores)]) <= 1.0
    assert abs(dense.offsets[np.argmax(dense.scores)]) < 0.1 + 1e-9


def test_sweep_step_halving_is_superset():
    img = _smooth_image(2)
    beta = TransformParams.rigid(0.5, -0.5, 0.02, center=img.center)
    metric = MutualInformation(16)
    a = response_sweep(metric, img, img, beta, "ty", -4, 4, 2.0)
    b = response_sweep(metric, img, img, beta, "ty", -4, 4, 1.0)
    np.testing.assert_array_equal(b.offsets[::2], a.offsets)
    np.testing.assert_array_equal(b.scores[::2], a.scores)


def test_sweep_requires_bracket_and_known_axis():
    img = _smooth_image()
    beta = TransformParams.identity(center=img.center)
    with pytest.raises(ValueError):
        response_sweep(MutualInformation(), img, img, beta, "tx", 1, 5, 1)
    with pytest.raises(ValueError):
        perturb_along(beta, "scale", 0.1)


def test_perturb_along_axes():
    beta = TransformParams.rigid(1, 2, 0.1, center=(5, 5))
    assert perturb_along(beta, "tx", 3).tx == 4
    assert perturb_along(beta, "ty", -1).ty == 1
    assert perturb_along(beta, "theta", 0.05).theta == pytest.approx(0.15)
    aff = beta.as_affine()
    p = np.array([7.0, 1.0])
    np.testing.assert_allclose(map_point(perturb_along(aff, "theta", 0.05), p), map_point(perturb_along(beta, "theta", 0.05), p), atol=1e-12)


def test_sweep_result_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        SweepResult("tx", [0, 1], [1.0])
    with pytest.raises(ValueError):
        SweepResult("tx", [0, 0, 1], [1.0, 2.0, 3.0])
    sw = SweepResult("tx", [-1, 0, 1], [0.5, 1.0, 0.25])
    sw.to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["offset,score", "-1.0,0.5", "0.0,1.0", "1.0,0.25"]


# -- peak analysis -----------------------------------------------------------


def test_peak_triangle():
    x = np.arange(-10, 11, 1.0)
    y = np.maximum(0, 1 - np.abs(x) / 4)
    st_ = peak_analysis(SweepResult("tx", x, y))
    assert st_.argmax == 0 and st_.fwhm == pytest.approx(4.0, abs=1e-12) and st_.modes == 1


def test_peak_two_triangles():
    x = np.arange(-15, 16, 1.0)
    y = np.maximum(0, 1 - np.abs(x - 6) / 4) + np.maximum(0, 1 - np.abs(x + 6) / 4)
    assert peak_analysis(SweepResult("tx", x, y)).modes == 2


def test_peak_gaussian_fwhm():
    x = np.arange(-20, 21, 1.0)
    y = np.exp(-(x**2) / (2 * 3.0**2))
    expected = 2 * 3.0 * math.sqrt(2 * math.log(2))
    assert expected == pytest.approx(7.06, abs=0.01)
    assert peak_analysis(SweepResult("tx", x, y)).fwhm == pytest.approx(expected, abs=1.0)


def test_peak_flat_and_short():
    st_ = peak_analysis(SweepResult("tx", np.arange(7.0), np.ones(7)))
    assert st_.modes == 0 and math.isnan(st_.fwhm)
    with pytest.raises(ValueError):
        peak_analysis(SweepResult("tx", np.arange(4.0), np.arange(4.0)))


def test_peak_offset_and_baseline():
    x = np.arange(-10, 11, 1.0)
    y = 5.0 + 2.0 * np.maximum(0, 1 - np.abs(x + 3) / 2)
    st_ = peak_analysis(SweepResult("tx", x, y))
    assert st_.argmax == -3 and st_.fwhm == pytest.approx(2.0, abs=1e-12) and st_.modes == 1
