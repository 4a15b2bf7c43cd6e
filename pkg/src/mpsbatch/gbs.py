"""Displacement operators on a truncated Fock space and Λ-driven bond schedules.

The displacement ``exp(mu a^dag - mu^* a)`` is approximated as
``exp(-|mu|^2 / 2) * exp(mu a^dag) @ exp(-mu^* a)``. In the truncated space
the two factors are exactly a lower and an upper triangular matrix with
closed-form entries, so no iterative exponential is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import rng
from .mps import BondSchedule

__all__ = [
    "DisplacementBatch",
    "LadderOps",
    "ladder_ops",
    "displacement_factors",
    "expm_displacement",
    "factorized_macs",
    "apply_displacement",
    "displacement_macs",
    "displacement_hook",
    "taylor_expm",
    "ExpmCount",
    "displacement_accuracy",
    "AccuracyReport",
    "TruncationFilterConfig",
    "dynamic_bond_schedule",
    "entanglement_entropy",
]


@dataclass(frozen=True)
class DisplacementBatch:
    mu: np.ndarray
    n: int

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.complex128))
        if mu.ndim != 1:
            raise ValueError("mu must be a one-dimensional batch of amplitudes")
        if not np.isfinite(mu).all():
            raise ValueError("displacement amplitudes must be finite")
        if self.n < 1:
            raise ValueError("cutoff n must be at least 1")
        object.__setattr__(self, "mu", mu)

    def __len__(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class LadderOps:
    a: np.ndarray
    a_dag: np.ndarray

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def generator(self, mu: complex) -> np.ndarray:
        """``mu a^dag - mu^* a``: tridiagonal with a zero diagonal."""
        return mu * self.a_dag - np.conj(mu) * self.a


def ladder_ops(n: int) -> LadderOps:
    a = np.diag(np.sqrt(np.arange(1, n, dtype=np.float64)), 1).astype(np.complex128)
    return LadderOps(a, a.T.copy())


def _log_coefficients(n: int) -> np.ndarray:
    """``C[m, j] = log(sqrt(m!/j!) / (m-j)!)`` for ``m >= j``, ``-inf`` above the diagonal."""
    lf = gammaln(np.arange(n) + 1.0)
    m = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    diff = m - j
    with np.errstate(invalid="ignore"):
        c = 0.5 * (lf[m] - lf[j]) - lf[np.maximum(diff, 0)]
    return np.where(diff >= 0, c, -np.inf)


def displacement_factors(mu, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form triangular factors in batch-last layout.

    Returns ``(L, U, prefactor)`` with ``L, U`` of shape ``(n, n, B)``:
    ``L[m, j] = mu**(m-j) sqrt(m!/j!)/(m-j)!`` and
    ``U[j, m] = (-mu*)**(m-j) sqrt(m!/j!)/(m-j)!`` for ``m >= j``.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.complex128))
    coef = np.exp(_log_coefficients(n))  # zero above the diagonal
    power = np.arange(n)[:, None] - np.arange(n)[None, :]
    power = np.maximum(power, 0)
    # powers[p, b] = mu_b ** p, one running product per sample
    powers = np.ones((n, mu.shape[0]), dtype=np.complex128)
    neg = np.ones((n, mu.shape[0]), dtype=np.complex128)
    for p in range(1, n):
        powers[p] = powers[p - 1] * mu
        neg[p] = neg[p - 1] * (-np.conj(mu))
    L = coef[:, :, None] * powers[power]
    U = (coef[:, :, None] * neg[power]).transpose(1, 0, 2)
    prefactor = np.exp(-0.5 * np.abs(mu) ** 2)
    return L, U, prefactor


def _correction_diagonal(mu: np.ndarray, n: int) -> np.ndarray:
    """``exp(-[X, Y] / 2)`` for ``X = mu a^dag``, ``Y = -mu^* a`` in the truncated space.

    ``[a, a^dag]`` is ``diag(1, ..., 1, -(n-1))`` there, so the factor is a
    diagonal that replaces the scalar prefactor. Shape ``(n, B)``.
    """
    comm = np.ones(n)
    comm[-1] = -(n - 1)
    return np.exp(-0.5 * comm[:, None] * (np.abs(mu) ** 2)[None, :])


def expm_displacement(batch: DisplacementBatch, with_correction: bool = False, layout: str = "batch-first") -> np.ndarray:
    """Approximate displacement matrices for every amplitude of ``batch``.

    The factors are generated batch-last; ``layout="batch-first"`` (default)
    returns ``(B, n, n)`` ready for :func:`apply_displacement`, while
    ``layout="batch-last"`` returns the generation layout ``(n, n, B)``.
    With ``with_correction`` the scalar prefactor is replaced by the
    truncated-space commutator diagonal, applied on the right.
    """
    if layout not in ("batch-first", "batch-last"):
        raise ValueError("layout must be 'batch-first' or 'batch-last'")
    n = batch.n
    L, U, pref = displacement_factors(batch.mu, n)
    D = np.einsum("mjb,jkb->mkb", L, U)
    if with_correction:
        D = D * _correction_diagonal(batch.mu, n)[None, :, :]
    else:
        D = D * pref[None, None, :]
    return D if layout == "batch-last" else np.ascontiguousarray(D.transpose(2, 0, 1))


def factorized_macs(n: int, with_correction: bool = False) -> int:
    """Complex multiply-accumulates per matrix of the factorized construction.

    Counts the two power tables, one multiply per nonzero triangular entry,
    the triangular product (only index triples with ``l <= min(i, j)``) and
    the final scaling. The real coefficient table depends only on ``n`` and
    is shared by the whole batch.
    """
    powers = 2 * (n - 1)
    entries = n * (n + 1)  # both triangles
    product = sum((n - l) ** 2 for l in range(n))
    scale = n * n
    return powers + entries + product + scale + (n if with_correction else 0)


def apply_displacement(env: np.ndarray, ops: np.ndarray) -> np.ndarray:
    """``out[n, b, :] = ops[n] @ env[n, b, :]``."""
    env = np.asarray(env)
    ops = np.asarray(ops)
    if env.ndim != 3 or ops.ndim != 3:
        raise ValueError(f"expected env (N2, chi, d) and ops (N2, d, d), got {env.shape} and {ops.shape}")
    if ops.shape[0] != env.shape[0]:
        raise ValueError(f"{ops.shape[0]} displacement matrices for a batch of {env.shape[0]}")
    if ops.shape[1:] != (env.shape[2], env.shape[2]):
        raise ValueError(f"displacement matrices of shape {ops.shape[1:]} do not act on d={env.shape[2]}")
    return np.einsum("nij,nbj->nbi", ops, env)


def displacement_macs(batch: int, chi: int, d: int) -> int:
    return batch * chi * d * d


def displacement_hook(sigma: float, seed: int, n: int | None = None, with_correction: bool = False):
    """Site hook applying a random displacement to every sample at every site.

    ``mu`` is complex Gaussian with ``E|mu|^2 = sigma**2``, drawn from the
    counter RNG keyed by (seed, site, global sample index), so the hook is as
    layout-independent as the measurement draws. Matrices are built at
    cutoff ``n`` (default ``d``) and their leading ``d x d`` block applied.
    """

    def hook(site: int, temp: np.ndarray, rows: range) -> np.ndarray:
        d = temp.shape[2]
        cutoff = d if n is None else max(n, d)
        u1 = rng.uniforms(seed, site, 2 * rows.start, 2 * len(rows), rng.DISPLACEMENT_STREAM)
        radius = sigma * np.sqrt(-np.log1p(-u1[0::2]))
        mu = radius * np.exp(2j * np.pi * u1[1::2])
        ops = expm_displacement(DisplacementBatch(mu, cutoff), with_correction)[:, :d, :d]
        return apply_displacement(temp, ops)

    return hook


@dataclass
class ExpmCount:
    matmuls: int = 0
    n: int = 0

    @property
    def macs(self) -> int:
        return self.matmuls * self.n**3


def taylor_expm(A: np.ndarray, count: ExpmCount | None = None, tol: float = 2.0**-53) -> np.ndarray:
    """Dense ``exp(A)`` by scaling and squaring with a Taylor series.

    ``A`` is scaled by ``2**-s`` until its 1-norm is at most 1/2, the series
    is summed until the next term is below ``tol`` relative to the sum, and
    the result is squared ``s`` times. Every dense matrix product is counted
    in ``count``.
    """
    A = np.asarray(A, dtype=np.complex128)
    n = A.shape[0]
    if count is not None:
        count.n = n
    norm = np.abs(A).sum(axis=0).max() if n else 0.0
    s = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    X = A / 2.0**s
    result = np.eye(n, dtype=np.complex128)
    term = np.eye(n, dtype=np.complex128)
    for k in range(1, 64):
        term = term @ X / k
        if count is not None:
            count.matmuls += 1
        result = result + term
        if np.abs(term).max() <= tol * np.abs(result).max():
            break
    for _ in range(s):
        result = result @ result
        if count is not None:
            count.matmuls += 1
    return result


@dataclass
class AccuracyReport:
    n: int
    used_dim: int
    samples: int
    max_abs_mu: float
    max_relative_error: float
    max_relative_error_full: float
    oracle_macs_per_matrix: float
    factorized_macs_per_matrix: int
    scipy_agreement: float
    with_correction: bool

    @property
    def cost_ratio(self) -> float:
        return self.factorized_macs_per_matrix / self.oracle_macs_per_matrix

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["cost_ratio"] = self.cost_ratio
        return out


def displacement_accuracy(
    n: int = 10,
    samples: int = 1000,
    max_abs_mu: float = 1.0,
    used_dim: int = 4,
    seed: int = 0,
    with_correction: bool = False,
) -> AccuracyReport:
    """Random accuracy test of the factorized displacement against exact exponentials.

    ``mu`` is uniform on the disc of radius ``max_abs_mu``. The error is the
    largest elementwise relative error over the leading ``used_dim x used_dim``
    block (the outcomes a sampler with ``d = used_dim`` reads); the error
    over the full matrix is reported alongside. The oracle is
    :func:`taylor_expm`, itself checked against :func:`scipy.linalg.expm`.
    """
    from scipy.linalg import expm as scipy_expm

    if not 1 <= used_dim <= n:
        raise ValueError("used_dim must lie in [1, n]")
    gen = np.random.default_rng(seed)
    mu = max_abs_mu * np.sqrt(gen.uniform(size=samples)) * np.exp(2j * np.pi * gen.uniform(size=samples))
    approx = expm_displacement(DisplacementBatch(mu, n), with_correction)
    ops = ladder_ops(n)
    count = ExpmCount()
    worst = worst_full = agree = 0.0
    for b in range(samples):
        A = ops.generator(mu[b])
        exact = taylor_expm(A, count)
        agree = max(agree, float(np.abs(exact - scipy_expm(A)).max()))
        err = np.abs(approx[b] - exact)
        mag = np.abs(exact)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(mag > 0, err / mag, np.where(err > 0, np.inf, 0.0))
        worst = max(worst, float(rel[:used_dim, :used_dim].max()))
        worst_full = max(worst_full, float(rel.max()))
    return AccuracyReport(
        n=n,
        used_dim=used_dim,
        samples=samples,
        max_abs_mu=max_abs_mu,
        max_relative_error=worst,
        max_relative_error_full=worst_full,
        oracle_macs_per_matrix=count.macs / samples,
        factorized_macs_per_matrix=factorized_macs(n, with_correction),
        scipy_agreement=agree,
        with_correction=with_correction,
    )


@dataclass(frozen=True)
class TruncationFilterConfig:
    """Discarded-weight budget per bond, loosest at the chain ends.

    Bond ``b`` of an ``M``-site chain gets
    ``epsilon_center * edge_ratio ** (|b - c| / c_max)`` where ``c = M // 2``
    is the centre bond and ``c_max`` the largest distance from it, so the
    budget equals ``epsilon_center`` at the centre and grows to
    ``epsilon_center * edge_ratio`` at the outermost bond.
    """

    chi_max: int
    epsilon_center: float = 1e-10
    edge_ratio: float = 1.0

    def __post_init__(self):
        if self.chi_max < 1:
            raise ValueError("chi_max must be at least 1")
        if self.epsilon_center < 0:
            raise ValueError("epsilon_center must be nonnegative")
        if self.edge_ratio < 1:
            raise ValueError("edge_ratio must be at least 1 so the edges are never stricter than the centre")

    def budget(self, bond: int, M: int) -> float:
        center = M // 2
        span = max(center, M - center, 1)
        return self.epsilon_center * self.edge_ratio ** (abs(bond - center) / span)

    def budgets(self, M: int) -> np.ndarray:
        return np.array([self.budget(b, M) for b in range(M + 1)])


def _kept(lam: np.ndarray, eps: float, cap: int) -> int:
    w = np.asarray(lam, dtype=np.float64) ** 2
    # tail[k] = sum_{j >= k} w[j]; tail[len] = 0
    tail = np.append(np.cumsum(w[::-1])[::-1], 0.0)
    k = int(np.argmax(tail <= eps))
    return max(1, min(k, cap))


def dynamic_bond_schedule(lambda_spectra, cfg: TruncationFilterConfig) -> BondSchedule:
    """Smallest bond dimension per bond whose discarded weight fits the budget.

    ``lambda_spectra`` holds the ``M - 1`` interior spectra; entry ``i`` is
    the spectrum of bond ``i + 1``. For an :class:`MpsState` pass
    ``mps.lambdas[:-1]``.
    """
    spectra = [np.asarray(s, dtype=np.float64) for s in lambda_spectra]
    if not spectra or any(s.size == 0 for s in spectra):
        raise ValueError("every bond needs a nonempty coefficient spectrum")
    for s in spectra:
        if (np.diff(s) > 0).any() or (s < 0).any():
            raise ValueError("spectra must be nonnegative and nonincreasing")
    M = len(spectra) + 1
    chi = [1] + [_kept(spectra[b - 1], cfg.budget(b, M), cfg.chi_max) for b in range(1, M)] + [1]
    return BondSchedule(chi, cfg.chi_max)


def entanglement_entropy(lam) -> float:
    """``-sum lam**2 ln(lam**2)`` with ``0 ln 0 = 0``."""
    w = np.asarray(lam, dtype=np.float64) ** 2
    norm = float(w.sum())
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"coefficients are not normalised: sum of squares is {norm!r}")
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())
