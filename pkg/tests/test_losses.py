import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from oracles import si_sdr_direct, tv_direct
from sine_dae.grad import UndefinedReferenceError
from sine_dae.losses import (
    EmptyReportError,
    median_report,
    neg_snr,
    si_sdr,
    total_loss,
    tv_loss,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# --- total variation ---------------------------------------------------------


def test_tv_hand_case():
    assert tv_loss(np.array([[0.0, 1.0], [1.0, 0.0]])) == 1.0


@pytest.mark.parametrize("value", [0.0, 3.5, -2.0])
def test_tv_constant_is_zero(value):
    assert tv_loss(np.full((4, 7), value)) == 0.0


def test_tv_single_cell():
    assert tv_loss(np.array([[2.0]])) == 0.0


def test_tv_matches_double_loop(rng):
    a = rng.standard_normal((6, 9))
    assert abs(tv_loss(a) - tv_direct(a)) <= 1e-12


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_tv_nonnegative_and_zero_iff_constant(a):
    v = tv_loss(a)
    assert v >= 0
    assert (v == 0) == bool(np.all(a == a.flat[0]))


@settings(max_examples=50)
@given(st.integers(1, 6).flatmap(lambda k: arrays(np.float64, (k, k), elements=finite)))
def test_tv_transpose_symmetry(a):
    assert math.isclose(tv_loss(a), tv_loss(a.T), rel_tol=1e-12, abs_tol=1e-12)


# --- neg-SNR --------------------------------------------------------------------


def test_neg_snr_zero_estimate_is_zero_db(rng):
    x = rng.standard_normal(100)
    assert neg_snr(x, np.zeros(100)) == 0.0


def test_neg_snr_perfect_estimate_is_finite(rng):
    x = rng.standard_normal(100)
    v = neg_snr(x, x)
    assert math.isclose(v, -10 * math.log10(np.sum(x * x) / 1e-12), rel_tol=1e-12)


def test_neg_snr_monotone_example():
    assert neg_snr([1.0, 0.0], [0.9, 0.0]) < neg_snr([1.0, 0.0], [0.0, 0.0])


def test_neg_snr_decreases_towards_reference(rng):
    ref, noise = rng.standard_normal((2, 200))
    vals = [neg_snr(ref, ref + (1 - s) * noise) for s in np.linspace(0, 0.99, 20)]
    assert np.all(np.diff(vals) < 0)


def test_neg_snr_tiny_error_hits_the_floor(rng):
    x = rng.standard_normal(100)
    assert neg_snr(x, x + 1e-9) == neg_snr(x, x)


def test_neg_snr_zero_reference_raises():
    with pytest.raises(UndefinedReferenceError):
        neg_snr(np.zeros(4), np.ones(4))


# --- SI-SDR -------------------------------------------------------------------


def test_si_sdr_hand_case():
    assert si_sdr([1.0, 0.0], [1.0, 1.0]) == 0.0


def test_si_sdr_matches_direct_formula(rng):
    ref = rng.standard_normal(64)
    est = ref + 0.5 * rng.standard_normal(64)
    assert abs(si_sdr(ref, est) - si_sdr_direct(ref, est)) < 1e-9


@pytest.mark.parametrize("beta", [0.5, 1.0, 3.0])
def test_si_sdr_scaled_reference_is_pos_inf(rng, beta):
    ref = rng.standard_normal(50)
    assert si_sdr(ref, beta * ref) == math.inf


def test_si_sdr_orthogonal_is_neg_inf():
    assert si_sdr([1.0, 0.0], [0.0, 1.0]) == -math.inf
    assert si_sdr([1.0, 0.0], [0.0, 0.0]) == -math.inf


@settings(max_examples=100)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_si_sdr_scale_and_sign_invariance(seed, beta):
    r = np.random.default_rng(seed)
    ref, est = r.standard_normal((2, 64))
    base = si_sdr(ref, est)
    assert abs(si_sdr(ref, beta * est) - base) <= 1e-9
    assert abs(si_sdr(ref, -est) - base) <= 1e-9


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.integers(-20, 20))
def test_si_sdr_power_of_two_scaling_is_exact(seed, k):
    r = np.random.default_rng(seed)
    ref, est = r.standard_normal((2, 64))
    assert si_sdr(ref, 2.0 ** k * est) == si_sdr(ref, est)


# --- combined objective --------------------------------------------------------


def test_total_loss_lambda_zero(rng):
    ref, est = rng.standard_normal((2, 40))
    a = rng.uniform(0, 1, (3, 5))
    br = total_loss(ref, est, a, 0.0)
    assert br.total == br.neg_snr == neg_snr(ref, est)


def test_total_loss_constant_representation(rng):
    ref, est = rng.standard_normal((2, 40))
    br = total_loss(ref, est, np.full((3, 5), 0.7), 0.5)
    assert br.tv == 0 and br.total == br.neg_snr


def test_total_loss_decomposition(rng):
    ref, est = rng.standard_normal((2, 40))
    a = rng.uniform(0, 1, (3, 5))
    br = total_loss(ref, est, a, 0.5)
    assert_allclose(br.total, neg_snr(ref, est) + 0.5 * tv_loss(a))


# --- median reporting ---------------------------------------------------------


def test_median_odd_even():
    assert median_report([[1, 3, 2]]).median == 2
    assert median_report([[1, 2, 3, 4]]).median == 2.5


def test_median_pools_runs():
    rep = median_report([[1, 5], [3]])
    assert rep.median == 3
    assert rep.run_medians == [3.0, 3.0]


def test_median_excludes_sentinels():
    rep = median_report([[1.0, math.inf, 2.0, -math.inf, 3.0]])
    assert rep.median == 2.0 and rep.pos_inf == 1 and rep.neg_inf == 1 and rep.count == 3


def test_median_all_sentinels_raises():
    with pytest.raises(EmptyReportError):
        median_report([[math.inf, -math.inf]])
