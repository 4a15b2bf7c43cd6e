import numpy as np
import pytest

from mpsbatch import BatchPlan, BondSchedule, PrecisionPolicy, attenuated_chain, product_state, random_mps, sample_batch
from mpsbatch.mpsfile import save_mps
from mpsbatch.rng import sample_uniform
from mpsbatch.sampler import DEAD, decay_probe, draw_outcomes, fit_decay_rate, measure, outcome_weights


def per_sample_oracle(mps, N, seed):
    """One sample at a time with explicit loops over outcomes."""
    out = np.empty((N, mps.M), dtype=np.int64)
    for s in range(N):
        env = np.ones(1, dtype=np.complex128)
        for i, g, lam in mps.iter_sites():
            temp = np.tensordot(env, g, axes=(0, 0))  # (chiR, d)
            w = [float(np.sum(lam**2 * np.abs(temp[:, k]) ** 2)) for k in range(mps.d)]
            u = sample_uniform(seed, s, i)
            acc, k = 0.0, 0
            total = sum(w)
            for k in range(mps.d):
                acc += w[k] / total
                if u <= acc:
                    break
            out[s, i] = k
            env = temp[:, k]
    return out


def test_matches_per_sample_oracle(small_mps):
    batch = sample_batch(small_mps, BatchPlan.build(300, 120, 50), seed=5)
    np.testing.assert_array_equal(batch.outcomes, per_sample_oracle(small_mps, 300, 5))


@pytest.mark.parametrize("N1,N2", [(300, 300), (100, 7), (37, 37), (1, 1)])
def test_batching_invariance(small_mps, N1, N2):
    ref = sample_batch(small_mps, BatchPlan.build(300), seed=1).outcomes
    np.testing.assert_array_equal(sample_batch(small_mps, BatchPlan.build(300, N1, N2), seed=1).outcomes, ref)


def test_first_index_addresses_global_samples(small_mps):
    full = sample_batch(small_mps, BatchPlan.build(500), seed=2).outcomes
    part = sample_batch(small_mps, BatchPlan.build(100), seed=2, first_index=250).outcomes
    np.testing.assert_array_equal(part, full[250:350])


def test_file_source_equals_memory(small_mps, small_mps_file):
    plan = BatchPlan.build(400, 200, 64)
    np.testing.assert_array_equal(
        sample_batch(small_mps_file, plan, seed=3).outcomes, sample_batch(small_mps, plan, seed=3).outcomes
    )


def test_f16_storage_file_equals_rounded_policy(tmp_path, small_mps):
    path = tmp_path / "h.mps"
    save_mps(small_mps, path, "F16")
    plan = BatchPlan.build(400)
    a = sample_batch(path, plan, PrecisionPolicy("F32", "F16"), seed=3).outcomes
    b = sample_batch(small_mps, plan, PrecisionPolicy("F32", "F16"), seed=3).outcomes
    np.testing.assert_array_equal(a, b)


def test_plan_validation():
    with pytest.raises(ValueError):
        BatchPlan(10, 5, 6)
    with pytest.raises(ValueError):
        BatchPlan(0, 1, 1)
    p = BatchPlan.build(10_001, 2500)
    assert (p.N1, p.N2, p.n1, p.n2) == (2500, 2500, 5, 1)
    assert [len(r) for r in p.macro_batches()] == [2500] * 4 + [1]


def test_draw_uses_strict_comparison():
    w = np.array([[0.25, 0.25, 0.5]] * 4)
    out, dead = draw_outcomes(w, np.array([0.0, 0.25, 0.2500001, 0.999]))
    assert out.tolist() == [0, 0, 1, 2] and not dead.any()


def test_zero_weights_mark_dead():
    temp = np.zeros((2, 2, 3), complex)
    temp[1, 0, 2] = 1
    out, env, dead = measure(temp, np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    assert out.tolist() == [DEAD, 2] and dead.tolist() == [True, False]
    assert not env[0].any()


def test_measure_validates_shapes():
    with pytest.raises(ValueError):
        measure(np.zeros((2, 3, 2)), np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        measure(np.ones((2, 1, 2)), np.array([-1.0]), np.zeros(2))


def test_schedule_compute_ratio_matches_counted_macs():
    m = random_mps(10, 16, 2, seed=1)
    chi = [1, 2, 4, 8, 12, 16, 12, 8, 4, 2, 1]
    sched = BondSchedule(chi, chi_max=16)
    plan = BatchPlan.build(200)
    cut = sample_batch(m, plan, seed=0, schedule=sched).stats.contraction_macs
    full = sample_batch(m, plan, seed=0, schedule=BondSchedule(m.bond_dims, 16)).stats.contraction_macs
    ratio = cut / full
    dense = sum(m.bond_dims[i] * m.bond_dims[i + 1] for i in range(10)) / (10 * 16**2)
    assert abs(ratio * dense - sched.compute_ratio) / sched.compute_ratio < 0.01


def test_site_hook_sees_rows_and_can_modify(small_mps):
    seen = []

    def hook(i, temp, rows):
        seen.append((i, rows.start, len(rows)))
        return temp

    sample_batch(small_mps, BatchPlan.build(100, 100, 40), seed=0, site_hook=hook)
    assert seen[:3] == [(0, 0, 40), (0, 40, 40), (0, 80, 20)]


def test_stats_macs(small_mps):
    stats = sample_batch(small_mps, BatchPlan.build(50), seed=0).stats
    dims = small_mps.bond_dims
    assert stats.contraction_macs == sum(50 * dims[i] * dims[i + 1] * 3 for i in range(6))
    assert stats.dead_samples == 0


def test_decay_rate_recovered_with_scaling():
    chain = attenuated_chain(30, 4, 2, decades_per_site=1.0, seed=0)
    trace = decay_probe(chain, PrecisionPolicy("F32", scaling="per-sample-max"), sample_count=200)
    k, log_mu0 = fit_decay_rate(trace, sites=range(1, 28))
    assert k == pytest.approx(1.0, abs=0.02)
    assert trace.dead_fraction.max() == 0


def test_first_site_weights_sum_to_state_norm(small_mps):
    _, g, lam = next(small_mps.iter_sites())
    w = outcome_weights(g[:1], lam)
    assert w.sum() == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("scaling", ["per-sample-max", "global-max"])
def test_scaling_does_not_change_f64_outcomes(small_mps, scaling):
    ref = sample_batch(small_mps, BatchPlan.build(400, 400, 100), seed=2).outcomes
    got = sample_batch(small_mps, BatchPlan.build(400, 400, 100), PrecisionPolicy(scaling=scaling), seed=2).outcomes
    np.testing.assert_array_equal(got, ref)


def test_doubling_chi_quadruples_contraction_macs():
    small = sample_batch(random_mps(8, 4, 2, seed=1), BatchPlan.build(50), seed=0).stats
    big = sample_batch(random_mps(8, 8, 2, seed=1), BatchPlan.build(50), seed=0).stats
    # interior bonds at chi_max dominate; compare the central site where both are saturated
    assert big.site_macs[4] == 4 * small.site_macs[4]


def test_deterministic_product_state_forces_outcomes():
    mps = product_state([[0, 1, 0], [1, 0, 0], [0, 0, 1]], phases=True)
    out = sample_batch(mps, BatchPlan.build(500, 200, 64), seed=9).outcomes
    assert np.all(out == np.array([1, 0, 2]))


def test_schedule_equals_explicit_truncation(small_mps):
    sched = BondSchedule([1, 3, 5, 4, 6, 3, 1], 8)
    a = sample_batch(small_mps, BatchPlan.build(500, 250, 100), seed=3, schedule=sched)
    b = sample_batch(small_mps.truncated(sched), BatchPlan.build(500, 250, 100), seed=3)
    np.testing.assert_array_equal(a.outcomes, b.outcomes)
    assert a.stats.contraction_macs == b.stats.contraction_macs


def test_trace_records_per_sample_data_range(small_mps):
    batch = sample_batch(small_mps, BatchPlan.build(200, 200, 50), seed=4, trace=True)
    g = small_mps.gammas[0][0]
    parts = np.abs(np.concatenate([g.real, g.imag], axis=0))  # (2 chi, d) for each first outcome
    spread = [np.log10(parts[:, k].max() / parts[:, k][parts[:, k] > 0].min()) for k in np.unique(batch.outcomes[:, 0])]
    assert batch.stats.decay.log10_range[0] == pytest.approx(max(spread), rel=1e-12)
    scaled = sample_batch(small_mps, BatchPlan.build(200, 200, 50), PrecisionPolicy(scaling="per-sample-max"), seed=4, trace=True)
    np.testing.assert_allclose(scaled.stats.decay.log10_range, batch.stats.decay.log10_range, rtol=1e-9)
    point = sample_batch(product_state([[0.5, 0.5]] * 3), BatchPlan.build(20), seed=0, trace=True)
    assert not point.stats.decay.log10_range.any()
