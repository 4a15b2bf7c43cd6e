import numpy as np
import pytest

from mpsbatch import BatchPlan, BondSchedule, MpsState, product_state, random_mps, sample_batch
from mpsbatch.sampler import outcome_weights
from mpsbatch.validation import (
    MAX_STATE_SIZE,
    chi_square_gof,
    contract_full,
    correlations,
    empirical_distribution,
    encode_outcomes,
    exact_conditionals,
    exact_distribution,
    fit_slope,
    second_order,
    total_variation,
    truncation_error_trace,
)


def squeezed_pairs(squeezing, d):
    """Chain of independent two-mode squeezed pairs truncated at ``d`` photons per mode."""
    gammas, lambdas = [], []
    eye = np.eye(d)
    for r in squeezing:
        lam = np.tanh(r) ** np.arange(d)
        lam /= np.linalg.norm(lam)
        # left-canonical: the right tensor carries the Schmidt weights
        gammas += [eye[None, :, :].astype(complex), (lam[:, None] * eye)[:, None, :].astype(complex)]
        lambdas += [lam, np.ones(1)]
    return MpsState(gammas, lambdas)


def test_bell_pair_amplitudes():
    s = 1 / np.sqrt(2)
    g0 = np.zeros((1, 2, 2), complex)
    g0[0, 0, 0] = g0[0, 1, 1] = 1
    g1 = np.zeros((2, 1, 2), complex)
    g1[0, 0, 0] = g1[1, 0, 1] = s
    sv = contract_full(MpsState([g0, g1], [np.array([s, s]), np.ones(1)]))
    np.testing.assert_allclose(np.abs(sv.amplitudes), [[s, 0], [0, s]])
    assert sv.norm == pytest.approx(1.0)


def test_size_guard():
    g = np.ones((1, 1, 2), complex)
    big = MpsState([g] * 25, [np.ones(1)] * 25)
    assert 2**25 > MAX_STATE_SIZE
    with pytest.raises(ValueError):
        contract_full(big)


def test_distribution_sums_to_one(small_mps):
    p = exact_distribution(contract_full(small_mps))
    assert abs(p.sum() - 1) < 1e-12 and p.shape == (3,) * 6


def test_product_state_point_mass():
    p = exact_distribution(contract_full(product_state([[0, 1, 0], [1, 0, 0]])))
    assert p[1, 0] == 1.0 and p.sum() == 1.0


def test_sampler_conditionals_match_marginals(small_mps):
    probs = exact_distribution(contract_full(small_mps))
    batch = sample_batch(small_mps, BatchPlan.build(30), seed=0)
    worst = 0.0
    for row in batch.outcomes:
        env = np.ones((1, 1), complex)
        for i, g, lam in small_mps.iter_sites():
            temp = np.einsum("nl,lrk->nrk", env, g)
            w = outcome_weights(temp, lam)[0]
            worst = max(worst, np.abs(w / w.sum() - exact_conditionals(probs, tuple(row[:i]))).max())
            env = temp[:, :, row[i]]
    assert worst < 1e-9


def test_encoding_order():
    assert encode_outcomes(np.array([[1, 0, 2]]), 3).tolist() == [9 + 2]


def test_empirical_excludes_dead():
    x = np.array([[0, 1], [1, 1], [-1, -1]])
    emp = empirical_distribution(x, 2)
    assert emp[0, 1] == emp[1, 1] == 0.5


def test_chi_square_accepts_exact_sampler_and_rejects_wrong_reference(small_mps):
    probs = exact_distribution(contract_full(small_mps))
    batch = sample_batch(small_mps, BatchPlan.build(20000), seed=11)
    _, p_ok, dof = chi_square_gof(batch, probs)
    assert p_ok > 1e-3 and dof > 50
    wrong = exact_distribution(contract_full(random_mps(6, 8, 3, seed=4)))
    assert chi_square_gof(batch, wrong)[1] < 1e-6


def test_oracle_sampling_gives_unit_slope(small_mps):
    probs = exact_distribution(contract_full(small_mps))
    draws = np.random.default_rng(0).choice(probs.size, size=100_000, p=probs.ravel())
    oracle = np.stack(np.unravel_index(draws, probs.shape), axis=1)
    rep = correlations(oracle, probs)
    assert 0.98 <= rep.first_slope.slope <= 1.02
    assert rep.first_slope.stderr < 0.01


def test_constant_outcomes_have_zero_covariance():
    x = np.ones((50, 4), dtype=int)
    assert not second_order(x).any()


def test_degenerate_reference_slope_undefined():
    assert fit_slope(np.ones(5), np.arange(5)).slope is None
    fit = fit_slope(np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 6.0]))
    assert fit.slope == pytest.approx(2.0) and fit.stderr == pytest.approx(0.0)


def test_truncation_lowers_slope():
    full = squeezed_pairs([0.4, 0.7, 1.0], d=4)
    probs = exact_distribution(contract_full(full))
    cut = full.truncated(BondSchedule([1, 2, 1, 2, 1, 2, 1], chi_max=4))
    batch = sample_batch(cut, BatchPlan.build(100_000), seed=3)
    rep = correlations(batch, probs)
    assert rep.first_slope.slope < 1
    untouched = correlations(sample_batch(full, BatchPlan.build(100_000), seed=3), probs)
    assert abs(untouched.first_slope.slope - 1) < 0.02


def test_truncation_error_trace():
    spectra = [np.sqrt([0.5, 0.3, 0.2]), np.sqrt([0.9, 0.1])]
    eps, worst = truncation_error_trace(spectra, BondSchedule([1, 2, 1, 1], chi_max=3))
    np.testing.assert_allclose(eps, [0.2, 0.1])
    assert worst == pytest.approx(0.2)


def test_tvd_basic():
    assert total_variation([0.5, 0.5], [1.0, 0.0]) == 0.5


def test_chi_square_rejects_biased_sampler(small_mps):
    probs = exact_distribution(contract_full(small_mps))

    def favour_zero(site, temp, rows):
        temp = temp.copy()
        temp[:, :, 0] *= np.sqrt(1.1)
        return temp

    biased = sample_batch(small_mps, BatchPlan.build(20000), seed=11, site_hook=favour_zero)
    assert chi_square_gof(biased, probs)[1] < 1e-6


def test_correlation_report_is_reproducible(small_mps):
    probs = exact_distribution(contract_full(small_mps))
    a = correlations(sample_batch(small_mps, BatchPlan.build(5000), seed=8), probs).to_dict()
    b = correlations(sample_batch(small_mps, BatchPlan.build(5000, 700, 90), seed=8), probs).to_dict()
    assert a == b


def test_tvd_shrinks_with_sample_count(small_mps):
    probs = exact_distribution(contract_full(small_mps))
    tvd = [
        total_variation(empirical_distribution(sample_batch(small_mps, BatchPlan.build(n), seed=6), 3), probs)
        for n in (1000, 10_000, 100_000)
    ]
    assert tvd[0] > tvd[1] > tvd[2]


def test_truncation_trace_limits():
    spectra = [np.sqrt([0.6, 0.4]), np.sqrt([0.5, 0.3, 0.2]), np.sqrt([0.7, 0.3])]
    eps, worst = truncation_error_trace(spectra, BondSchedule([1, 2, 3, 2, 1], chi_max=3))
    assert not eps.any() and worst == 0.0
    bell = [np.full(2, np.sqrt(0.5))]
    assert truncation_error_trace(bell, BondSchedule([1, 1, 1], chi_max=2))[1] == pytest.approx(0.5)


def test_truncation_trace_peaks_at_centre():
    mps = squeezed_pairs([0.3, 0.6, 1.2, 0.6, 0.3], d=4)
    spectra = mps.lambdas[:-1]
    eps, worst = truncation_error_trace(spectra, BondSchedule([1] + [1] * 9 + [1], chi_max=4))
    assert worst == eps[4] and np.argmax(eps) == 4
