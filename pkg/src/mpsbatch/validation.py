"""Brute-force oracles and statistical checks for desk-scale MPS instances."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import stats

from .mps import BondSchedule, MpsState
from .sampler import DEAD

__all__ = [
    "MAX_STATE_SIZE",
    "StateVector",
    "SlopeFit",
    "CorrelationReport",
    "contract_full",
    "exact_distribution",
    "exact_conditionals",
    "empirical_distribution",
    "total_variation",
    "chi_square_gof",
    "first_order",
    "second_order",
    "correlations",
    "truncation_error_trace",
    "encode_outcomes",
]

MAX_STATE_SIZE = 2**24


@dataclass
class StateVector:
    amplitudes: np.ndarray  # shape (d,) * M, C order: site 0 is the slowest index
    M: int
    d: int

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def flat(self) -> np.ndarray:
        return self.amplitudes.reshape(-1)


def contract_full(mps: MpsState) -> StateVector:
    """Contract the whole chain into a dense state vector.

    ``amp[k_0, ..., k_{M-1}] = prod_i gammas[i][:, :, k_i]`` as a matrix
    product; boundary bonds of dimension 1 make it a scalar.
    """
    M, d = mps.M, mps.d
    if d**M > MAX_STATE_SIZE:
        raise ValueError(f"state vector of size {d}**{M} exceeds the {MAX_STATE_SIZE} guard")
    acc = mps.gammas[0][0].T  # (d, chi_1): one row per prefix
    for g in mps.gammas[1:]:
        # acc: (prefixes, chiL); g: (chiL, chiR, d) -> (prefixes, d, chiR)
        acc = np.einsum("pa,abk->pkb", acc, g).reshape(-1, g.shape[1])
    return StateVector(acc[:, 0].reshape((d,) * M), M, d)


def exact_distribution(sv: StateVector) -> np.ndarray:
    """Born probabilities over all ``d**M`` outcome strings (same index layout)."""
    p = np.abs(sv.amplitudes) ** 2
    return p / p.sum()


def exact_conditionals(probs: np.ndarray, prefix: tuple[int, ...]) -> np.ndarray:
    """Distribution of the next outcome given an outcome prefix."""
    M = probs.ndim
    k = len(prefix)
    if k >= M:
        raise ValueError("prefix already covers every site")
    marg = probs[prefix].sum(axis=tuple(range(1, M - k))) if M - k > 1 else probs[prefix]
    total = marg.sum()
    if total <= 0:
        raise ValueError(f"prefix {prefix} has zero probability")
    return marg / total


def encode_outcomes(outcomes: np.ndarray, d: int) -> np.ndarray:
    """Flat index of every outcome row in C order (site 0 most significant)."""
    outcomes = np.asarray(outcomes, dtype=np.int64)
    weights = d ** np.arange(outcomes.shape[1] - 1, -1, -1, dtype=np.int64)
    return outcomes @ weights


def empirical_distribution(outcomes, d: int) -> np.ndarray:
    """Histogram of outcome strings normalised to frequencies; dead rows are excluded."""
    outcomes = np.asarray(getattr(outcomes, "outcomes", outcomes))
    live = outcomes[(outcomes != DEAD).all(axis=1)]
    M = outcomes.shape[1]
    counts = np.bincount(encode_outcomes(live, d), minlength=d**M).astype(np.float64)
    return (counts / max(live.shape[0], 1)).reshape((d,) * M)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p).ravel() - np.asarray(q).ravel()).sum())


def chi_square_gof(outcomes, probs: np.ndarray, min_expected: float = 5.0) -> tuple[float, float, int]:
    """Pearson goodness of fit of sampled strings against exact probabilities.

    Outcome strings whose expected count falls below ``min_expected`` are
    pooled into a single bin. Returns ``(statistic, p_value, dof)``.
    """
    outcomes = np.asarray(getattr(outcomes, "outcomes", outcomes))
    outcomes = outcomes[(outcomes != DEAD).all(axis=1)]
    d = probs.shape[0]
    n = outcomes.shape[0]
    observed = np.bincount(encode_outcomes(outcomes, d), minlength=probs.size).astype(np.float64)
    expected = probs.ravel() * n
    big = expected >= min_expected
    obs = np.append(observed[big], observed[~big].sum())
    exp = np.append(expected[big], expected[~big].sum())
    if exp[-1] < min_expected:
        obs = np.append(obs[:-2], obs[-2:].sum()) if obs.size > 2 else obs
        exp = np.append(exp[:-2], exp[-2:].sum()) if exp.size > 2 else exp
    keep = exp > 0
    obs, exp = obs[keep], exp[keep]
    stat = float(((obs - exp) ** 2 / exp).sum())
    dof = obs.size - 1
    return stat, float(stats.chi2.sf(stat, dof)), dof


def first_order(outcomes) -> np.ndarray:
    """Mean outcome (photon number) per site."""
    return np.asarray(outcomes, dtype=np.float64).mean(axis=0)


def second_order(outcomes) -> np.ndarray:
    """``<n_i n_j> - <n_i><n_j>`` for every site pair ``i < j``, in ``combinations`` order."""
    x = np.asarray(outcomes, dtype=np.float64)
    mean = x.mean(axis=0)
    cov = (x.T @ x) / x.shape[0] - np.outer(mean, mean)
    iu = np.triu_indices(x.shape[1], k=1)
    return cov[iu]


def exact_first_order(probs: np.ndarray) -> np.ndarray:
    M, d = probs.ndim, probs.shape[0]
    n = np.arange(d, dtype=np.float64)
    return np.array([probs.sum(axis=tuple(j for j in range(M) if j != i)) @ n for i in range(M)])


def exact_second_order(probs: np.ndarray) -> np.ndarray:
    M, d = probs.ndim, probs.shape[0]
    n = np.arange(d, dtype=np.float64)
    mean = exact_first_order(probs)
    out = []
    for i, j in combinations(range(M), 2):
        pij = probs.sum(axis=tuple(t for t in range(M) if t not in (i, j)))
        out.append(n @ pij @ n - mean[i] * mean[j])
    return np.array(out)


@dataclass
class SlopeFit:
    slope: float | None
    stderr: float | None

    def to_dict(self) -> dict:
        return {"slope": self.slope, "stderr": self.stderr}


def fit_slope(reference, simulated) -> SlopeFit:
    """Least-squares slope of simulated vs reference through the origin."""
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(simulated, dtype=np.float64)
    sxx = float(x @ x)
    if x.size < 2 or np.allclose(x, x[0]) or sxx == 0.0:
        return SlopeFit(None, None)
    slope = float(x @ y) / sxx
    resid = y - slope * x
    stderr = float(np.sqrt(resid @ resid / (x.size - 1) / sxx))
    return SlopeFit(slope, stderr)


@dataclass
class CorrelationReport:
    first_order: tuple[np.ndarray, np.ndarray]  # (simulated, reference)
    second_order: tuple[np.ndarray, np.ndarray]
    first_slope: SlopeFit
    second_slope: SlopeFit

    def to_dict(self) -> dict:
        return {
            "first_order": {"simulated": self.first_order[0].tolist(), "reference": self.first_order[1].tolist()},
            "second_order": {"simulated": self.second_order[0].tolist(), "reference": self.second_order[1].tolist()},
            "first_slope": self.first_slope.to_dict(),
            "second_slope": self.second_slope.to_dict(),
        }


def correlations(outcomes, reference) -> CorrelationReport:
    """First- and second-order correlations of samples against a reference.

    ``reference`` is either an exact probability table of shape ``(d,)*M``
    or a pair ``(first_order, second_order)`` of analytic values.
    """
    x = np.asarray(getattr(outcomes, "outcomes", outcomes))
    x = x[(x != DEAD).all(axis=1)]
    if isinstance(reference, np.ndarray) and reference.ndim == x.shape[1]:
        ref1, ref2 = exact_first_order(reference), exact_second_order(reference)
    else:
        ref1, ref2 = (np.asarray(r, dtype=np.float64) for r in reference)
    sim1, sim2 = first_order(x), second_order(x)
    return CorrelationReport((sim1, ref1), (sim2, ref2), fit_slope(ref1, sim1), fit_slope(ref2, sim2))


def truncation_error_trace(lambda_spectra, schedule: BondSchedule) -> tuple[np.ndarray, float]:
    """Discarded weight ``sum_{j >= chi} lam[j]**2`` per bond and its maximum.

    ``lambda_spectra[i]`` is the spectrum of bond ``i + 1`` (right of site ``i``).
    """
    eps = []
    for i, lam in enumerate(lambda_spectra):
        keep = schedule.per_site_chi[i + 1]
        eps.append(float(np.sum(np.asarray(lam, dtype=np.float64)[keep:] ** 2)))
    eps = np.asarray(eps)
    return eps, float(eps.max()) if eps.size else 0.0
