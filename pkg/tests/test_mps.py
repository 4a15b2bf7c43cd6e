import numpy as np
import pytest

from mpsbatch import BondSchedule, MpsState, attenuated_chain, product_state, random_mps
from mpsbatch.validation import contract_full


def test_random_mps_structure():
    m = random_mps(6, 8, 3, seed=1)
    assert m.bond_dims == [1, 3, 8, 8, 8, 3, 1]
    for lam in m.lambdas:
        assert np.isclose(np.sum(lam**2), 1.0)
        assert (np.diff(lam) <= 0).all()
    assert abs(contract_full(m).norm - 1) < 1e-10


def test_random_mps_deterministic():
    assert random_mps(5, 4, 2, seed=9) == random_mps(5, 4, 2, seed=9)
    assert not random_mps(5, 4, 2, seed=9) == random_mps(5, 4, 2, seed=10)


def test_single_site():
    m = random_mps(1, 4, 3, seed=0)
    assert m.gammas[0].shape == (1, 1, 3)
    assert np.isclose(np.sum(np.abs(m.gammas[0]) ** 2), 1.0)


def test_validation_errors():
    g = np.ones((1, 2, 2))
    with pytest.raises(ValueError, match="coefficient"):
        MpsState([g, np.ones((2, 1, 2))], [np.ones(3), np.ones(1)])
    with pytest.raises(ValueError, match="nonincreasing"):
        MpsState([g, np.ones((2, 1, 2))], [np.array([0.1, 0.9]), np.ones(1)])
    with pytest.raises(ValueError, match="left bond"):
        MpsState([g, np.ones((3, 1, 2))], [np.ones(2) / 2, np.ones(1)])
    with pytest.raises(ValueError):
        random_mps(0, 2, 2)


def test_product_state_factorizes():
    p = [[0.5, 0.5], [0.9, 0.1], [0.2, 0.8]]
    amps = contract_full(product_state(p, phases=True, seed=2)).amplitudes
    probs = np.abs(amps) ** 2
    np.testing.assert_allclose(probs, np.einsum("a,b,c->abc", *map(np.array, p)), atol=1e-15)


def test_padding_preserves_amplitudes():
    m = random_mps(5, 4, 2, seed=4)
    padded = m.padded([1, 4, 6, 6, 4, 1])
    np.testing.assert_allclose(contract_full(padded).amplitudes, contract_full(m).amplitudes, atol=1e-14)
    with pytest.raises(ValueError):
        m.padded([1, 1, 1, 1, 1, 1])


def test_schedule_ratios():
    s = BondSchedule([1, 2, 4, 2, 1], chi_max=4)
    assert s.step_ratio == pytest.approx(1 / 3)
    assert s.compute_ratio == pytest.approx((2 + 8 + 8 + 2) / (4 * 16))
    assert s.equivalent_chi == pytest.approx(np.sqrt((4 + 16 + 4) / 3))
    u = BondSchedule.uniform(4, 4)
    assert u.compute_ratio == pytest.approx((4 + 16 + 16 + 4) / 64)
    with pytest.raises(ValueError):
        BondSchedule([1, 5, 1], chi_max=4)


def test_truncation_keeps_leading_block():
    m = random_mps(6, 8, 3, seed=0)
    t = m.truncated(BondSchedule([1, 3, 4, 4, 4, 3, 1], 8))
    assert t.bond_dims == [1, 3, 4, 4, 4, 3, 1]
    np.testing.assert_array_equal(t.gammas[2], m.gammas[2][:4, :4])


def test_attenuated_chain_norm_profile():
    m = attenuated_chain(6, 4, 2, decades_per_site=2.0, seed=0)
    env = np.ones((1, 1), complex)
    norms = []
    for _, g, _ in m.iter_sites():
        env = np.einsum("nl,lr->nr", env, g[:, :, 0])
        norms.append(np.linalg.norm(env))
    ratios = np.array(norms[1:-1]) / np.array(norms[:-2])
    np.testing.assert_allclose(ratios, 1e-2, rtol=1e-10)
