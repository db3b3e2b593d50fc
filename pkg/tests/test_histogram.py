import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditr.histogram import (
    CategoricalJointModel,
    JointHistogram,
    NoOverlapError,
    bin_index,
    categorical_loglik,
    counts_loglik,
    fit_categorical,
    histogram_from_intensities,
    joint_entropy,
    joint_histogram,
    mutual_information,
    profile_loglik,
)
from ditr.image import Image
from ditr.transform import TransformParams


def _plugin_mi(counts):
    """Direct double loop over p_ij ln(p_ij / (p_i p_j))."""
    c = np.asarray(counts, dtype=float)
    n = c.sum()
    pi = c.sum(axis=1) / n
    pj = c.sum(axis=0) / n
    mi = 0.0
    for i in range(c.shape[0]):
        for j in range(c.shape[1]):
            if c[i, j] > 0:
                p = c[i, j] / n
                mi += p * math.log(p / (pi[i] * pj[j]))
    return mi


def _random_pair(seed, n=24):
    rng = np.random.default_rng(seed)
    return Image(rng.random((n, n))), Image(rng.random((n, n)))


# -- bin_index ---------------------------------------------------------------


def test_bin_index_examples():
    assert bin_index(0.0, 0.0, 75) == 0
    assert bin_index(1.0, 1.0, 75) == 5624
    assert bin_index(0.5, 0.0, 2) == 2


def test_bin_index_rejects_out_of_range():
    with pytest.raises(ValueError):
        bin_index(1.01, 0.5)
    with pytest.raises(ValueError):
        bin_index(0.5, np.nan)


# -- joint_histogram ---------------------------------------------------------


def test_histogram_constant_zero():
    z = Image(np.zeros((5, 6)))
    h = joint_histogram(z, z, TransformParams.identity(), 75)
    assert h.counts[0, 0] == 30 and h.total == 30


def test_histogram_conserves_mask_size():
    f, m = _random_pair(0)
    beta = TransformParams.rigid(3.5, -2.0, 0.1, center=f.center)
    h = joint_histogram(f, m, beta, 16)
    from ditr.transform import resample_moving

    _, mask = resample_moving(m, beta, grid=f)
    assert h.total == mask.sum()


def test_histogram_matches_tally_under_integer_shift():
    rng = np.random.default_rng(1)
    f = (rng.random((10, 12)) > 0.5).astype(float)
    m = (rng.random((10, 12)) > 0.3).astype(float)
    t = 3
    h = joint_histogram(Image(f), Image(m), TransformParams.rigid(t, 0, 0), 2)
    tally = np.zeros((2, 2), dtype=int)
    for j in range(10):
        for i in range(12):
            if i + t < 12:
                tally[int(f[j, i]), int(m[j, i + t])] += 1
    np.testing.assert_array_equal(h.counts, tally)


def test_histogram_no_overlap():
    f, m = _random_pair(2)
    with pytest.raises(NoOverlapError, match="no overlap"):
        joint_histogram(f, m, TransformParams.rigid(100, 0, 0), 8)


def test_histogram_order_invariant():
    rng = np.random.default_rng(3)
    u, v = rng.random(500), rng.random(500)
    perm = rng.permutation(500)
    a = histogram_from_intensities(u, v, 10)
    b = histogram_from_intensities(u[perm], v[perm], 10)
    np.testing.assert_array_equal(a.counts, b.counts)
    half = histogram_from_intensities(u[:250], v[:250], 10) + histogram_from_intensities(u[250:], v[250:], 10)
    np.testing.assert_array_equal(half.counts, a.counts)


def test_histogram_csv(tmp_path):
    h = JointHistogram(np.array([[1, 2], [0, 3]]))
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == ["j,count", "0,1", "1,2", "2,0", "3,3"]


# -- entropy and MI ----------------------------------------------------------


def test_joint_entropy_examples():
    assert joint_entropy(JointHistogram(np.array([[7, 0], [0, 0]]))) == 0.0
    assert joint_entropy(JointHistogram(np.ones((3, 3), dtype=int))) == pytest.approx(math.log(9), abs=1e-14)
    oracle = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert oracle == pytest.approx(0.5623, abs=1e-4)
    assert joint_entropy(JointHistogram(np.array([[3, 1], [0, 0]]))) == pytest.approx(oracle, abs=1e-14)


def test_mi_examples():
    prod = np.outer([1, 2, 3], [2, 2, 1])
    assert mutual_information(JointHistogram(prod)) == pytest.approx(0.0, abs=1e-12)
    assert mutual_information(JointHistogram(np.eye(4, dtype=int) * 5)) == pytest.approx(math.log(4), abs=1e-14)


def test_mi_two_by_two_against_loop_oracle():
    counts = np.array([[2, 1], [1, 2]])
    oracle = _plugin_mi(counts)
    # frozen value of the loop oracle: (2/3) ln(4/3) + (1/3) ln(2/3)
    assert oracle == pytest.approx(0.05663301226513209, abs=1e-15)
    assert mutual_information(JointHistogram(counts)) == pytest.approx(oracle, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([2, 5, 8]))
def test_entropy_and_mi_bounds(seed, bins):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 5, (bins, bins))
    counts[0, 0] += 1
    h = JointHistogram(counts)
    assert 0.0 <= joint_entropy(h) <= math.log(bins * bins) + 1e-12
    mi = mutual_information(h)
    assert mi >= 0.0
    assert mi == pytest.approx(_plugin_mi(counts), abs=1e-12)


# -- categorical model -------------------------------------------------------


def test_fit_categorical_examples():
    m = fit_categorical(JointHistogram(np.array([[0, 0], [4, 0]])))
    np.testing.assert_array_equal(m.theta, [0, 0, 1, 0])
    np.testing.assert_allclose(fit_categorical(JointHistogram(np.full((2, 2), 3))).theta, 0.25)
    np.testing.assert_allclose(fit_categorical(JointHistogram(np.array([[1, 2], [3, 4]]))).theta, [0.1, 0.2, 0.3, 0.4])


def test_categorical_model_validation():
    with pytest.raises(ValueError):
        CategoricalJointModel(np.array([0.5, 0.6]))


def test_fit_categorical_is_maximum():
    rng = np.random.default_rng(4)
    counts = rng.integers(1, 20, 16)
    theta = counts / counts.sum()
    best = counts_loglik(counts, theta)
    for _ in range(200):
        d = rng.standard_normal(16)
        d -= d.mean()  # stay on the simplex
        eps = rng.uniform(1e-4, 1e-2)
        t2 = theta + eps * d / np.abs(d).max()
        if (t2 <= 0).any():
            continue
        assert counts_loglik(counts, t2) <= best


def test_categorical_loglik_examples():
    f, m = _random_pair(5, 8)
    k = 4
    uniform = CategoricalJointModel(np.full(k * k, 1.0 / (k * k)))
    for beta in (TransformParams.identity(center=f.center), TransformParams.rigid(1.3, 0, 0.05, center=f.center)):
        n = joint_histogram(f, m, beta, k).total
        assert categorical_loglik(f, m, beta, uniform) == pytest.approx(-n * math.log(k * k), rel=1e-12)
    # all mass in a bin of probability one
    z = Image(np.zeros((3, 3)))
    point = CategoricalJointModel(np.array([1.0, 0.0, 0.0, 0.0]))
    assert categorical_loglik(z, z, TransformParams.identity(), point) == pytest.approx(0.0, abs=1e-6)


def test_categorical_loglik_hand_value():
    oracle = 3 * math.log(0.75) + math.log(0.25)
    assert oracle == pytest.approx(-2.249, abs=1e-3)
    assert counts_loglik(np.array([3, 1]), np.array([0.75, 0.25])) == pytest.approx(oracle, abs=1e-14)
    # the same counts through images: 3 pixels in joint bin 0, one in bin 3
    f = Image(np.array([[0.0, 0.0, 0.0, 1.0]]))
    model = CategoricalJointModel(np.array([0.75, 0.0, 0.0, 0.25]))
    # floored zero bins perturb the value by O(1e-8)
    assert categorical_loglik(f, f, TransformParams.identity(), model) == pytest.approx(oracle, abs=1e-6)


def test_categorical_loglik_unseen_bin_is_finite():
    f = Image(np.array([[0.0, 1.0]]))
    model = CategoricalJointModel(np.array([1.0, 0.0, 0.0, 0.0]))
    val = categorical_loglik(f, f, TransformParams.identity(), model)
    assert np.isfinite(val) and val < -15


# -- profile likelihood ------------------------------------------------------


def test_profile_two_valued_equal_frequencies():
    img = Image(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert profile_loglik(img, img, TransformParams.identity(), 8) == pytest.approx(-math.log(2), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([8, 75]), st.floats(-5, 5), st.floats(-5, 5), st.floats(-0.2, 0.2))
def test_profile_equals_negative_joint_entropy(seed, bins, tx, ty, th):
    f, m = _random_pair(seed, 20)
    beta = TransformParams.rigid(tx, ty, th, center=f.center)
    h = joint_histogram(f, m, beta, bins)
    assert profile_loglik(f, m, beta, bins) + joint_entropy(h) == pytest.approx(0.0, abs=1e-12)
    # closed-form maximizer evaluated independently
    c = h.counts.ravel()
    n = c.sum()
    direct = sum(cj * math.log(cj / n) for cj in c if cj > 0) / n
    assert profile_loglik(f, m, beta, bins) == pytest.approx(direct, abs=1e-12)
