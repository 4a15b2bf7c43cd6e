"""MPS container, per-bond dimension schedules and synthetic generators.

Conventions
-----------
``gammas[i]`` has shape ``(chi_i, chi_{i+1}, d)`` and already carries the
coefficients of the bond on its left, i.e. the chain is left-canonical:
the amplitude of an outcome string ``k_0 ... k_{M-1}`` is the matrix product
``gammas[0][:, :, k_0] @ ... @ gammas[M-1][:, :, k_{M-1}]``. ``lambdas[i]``
holds the coefficients of the bond to the right of site ``i``
(``lambdas[M-1] == [1]``). In this convention the marginal weight of a prefix
ending at site ``i`` with open bond index ``b`` is ``lambdas[i][b]**2`` times
the squared modulus of the prefix product, which is what the sampler uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .tensor_core import Precision, round_to

__all__ = ["MpsState", "BondSchedule", "random_mps", "attenuated_chain", "product_state"]


@dataclass
class MpsState:
    gammas: list[np.ndarray]
    lambdas: list[np.ndarray]

    def __post_init__(self):
        self.gammas = [np.asarray(g, dtype=np.complex128) for g in self.gammas]
        self.lambdas = [np.asarray(lam, dtype=np.float64) for lam in self.lambdas]
        self.validate()

    @property
    def M(self) -> int:
        return len(self.gammas)

    @property
    def d(self) -> int:
        return self.gammas[0].shape[2]

    @property
    def bond_dims(self) -> list[int]:
        return [self.gammas[0].shape[0]] + [g.shape[1] for g in self.gammas]

    @property
    def chi_max(self) -> int:
        return max(self.bond_dims)

    def validate(self) -> None:
        if not self.gammas:
            raise ValueError("an MPS needs at least one site")
        if len(self.lambdas) != len(self.gammas):
            raise ValueError(f"{len(self.gammas)} site tensors but {len(self.lambdas)} coefficient vectors")
        d = self.gammas[0].shape[2] if self.gammas[0].ndim == 3 else None
        for i, g in enumerate(self.gammas):
            if g.ndim != 3 or g.shape[2] != d:
                raise ValueError(f"site {i}: expected shape (chiL, chiR, {d}), got {g.shape}")
            if i > 0 and g.shape[0] != self.gammas[i - 1].shape[1]:
                raise ValueError(f"site {i}: left bond {g.shape[0]} != right bond {self.gammas[i - 1].shape[1]} of site {i - 1}")
            lam = self.lambdas[i]
            if lam.shape != (g.shape[1],):
                raise ValueError(f"site {i}: coefficient vector has shape {lam.shape}, expected ({g.shape[1]},)")
            if (lam < 0).any():
                raise ValueError(f"site {i}: coefficients must be nonnegative")
            if (np.diff(lam) > 0).any():
                raise ValueError(f"site {i}: coefficients must be sorted in nonincreasing order")
        if self.gammas[0].shape[0] != 1 or self.gammas[-1].shape[1] != 1:
            raise ValueError("boundary bonds must have dimension 1")

    def iter_sites(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        for i, (g, lam) in enumerate(zip(self.gammas, self.lambdas)):
            yield i, g, lam

    def rounded(self, storage: Precision | str) -> "MpsState":
        """Copy with site tensors rounded to a storage format; coefficients untouched."""
        return MpsState([round_to(g, storage) for g in self.gammas], [lam.copy() for lam in self.lambdas])

    def truncated(self, schedule: "BondSchedule") -> "MpsState":
        """Keep the leading ``schedule.per_site_chi`` bond indices of every bond."""
        chi = schedule.per_site_chi
        if len(chi) != self.M + 1:
            raise ValueError(f"schedule covers {len(chi) - 1} sites, MPS has {self.M}")
        gammas = [g[: chi[i], : chi[i + 1], :].copy() for i, g in enumerate(self.gammas)]
        lambdas = [lam[: chi[i + 1]].copy() for i, lam in enumerate(self.lambdas)]
        return MpsState(gammas, lambdas)

    def padded(self, bond_dims: Sequence[int]) -> "MpsState":
        """Zero-pad every bond up to ``bond_dims`` (which must not shrink any bond)."""
        if len(bond_dims) != self.M + 1:
            raise ValueError("padded bond dimensions must have length M + 1")
        gammas = []
        lambdas = []
        for i, g, lam in self.iter_sites():
            rows, cols = bond_dims[i], bond_dims[i + 1]
            if rows < g.shape[0] or cols < g.shape[1]:
                raise ValueError(f"site {i}: cannot pad {g.shape[:2]} down to {(rows, cols)}")
            pg = np.zeros((rows, cols, g.shape[2]), dtype=np.complex128)
            pg[: g.shape[0], : g.shape[1]] = g
            pl = np.zeros(cols)
            pl[: lam.shape[0]] = lam
            gammas.append(pg)
            lambdas.append(pl)
        return MpsState(gammas, lambdas)

    def nbytes(self, storage: Precision | str = Precision.F64) -> int:
        per = {Precision.F64: 16, Precision.F32: 8, Precision.F16: 4}[Precision.parse(storage)]
        return sum(g.size for g in self.gammas) * per

    def __eq__(self, other) -> bool:
        if not isinstance(other, MpsState):
            return NotImplemented
        if other.M != self.M:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.gammas, other.gammas)) and all(
            np.array_equal(a, b) for a, b in zip(self.lambdas, other.lambdas)
        )


@dataclass
class BondSchedule:
    """Effective bond dimensions, ``per_site_chi[i]`` for bond ``i`` (length M + 1)."""

    per_site_chi: list[int]
    chi_max: int
    step_ratio: float = field(init=False)
    compute_ratio: float = field(init=False)

    def __post_init__(self):
        self.per_site_chi = [int(c) for c in self.per_site_chi]
        chi = self.per_site_chi
        if len(chi) < 2 or chi[0] != 1 or chi[-1] != 1:
            raise ValueError("a schedule needs boundary bonds of dimension 1")
        if min(chi) < 1 or max(chi) > self.chi_max:
            raise ValueError(f"bond dimensions must lie in [1, {self.chi_max}]")
        m = len(chi) - 1
        interior = chi[1:-1]
        self.step_ratio = (sum(c == self.chi_max for c in interior) / len(interior)) if interior else 0.0
        self.compute_ratio = sum(chi[i] * chi[i + 1] for i in range(m)) / (m * self.chi_max**2)

    @property
    def M(self) -> int:
        return len(self.per_site_chi) - 1

    @property
    def equivalent_chi(self) -> float:
        """Root-mean-square of the interior bond dimensions."""
        interior = np.asarray(self.per_site_chi[1:-1] or self.per_site_chi, dtype=np.float64)
        return float(np.sqrt(np.mean(interior**2)))

    @classmethod
    def uniform(cls, M: int, chi_max: int, d: int | None = None) -> "BondSchedule":
        """Full bond dimension everywhere, optionally capped by the exact ``d**i`` limits."""
        chi = [1] + [chi_max] * (M - 1) + [1]
        if d is not None:
            chi = [min(d**i, d ** (M - i), chi_max) for i in range(M + 1)]
        return cls(chi, chi_max)

    def to_dict(self) -> dict:
        return {
            "per_site_chi": self.per_site_chi,
            "chi_max": self.chi_max,
            "step_ratio": self.step_ratio,
            "compute_ratio": self.compute_ratio,
            "equivalent_chi": self.equivalent_chi,
        }


def _capped_bond_dims(M: int, chi_max: int, d: int) -> list[int]:
    return [min(d**i, d ** (M - i), chi_max) for i in range(M + 1)]


def _random_isometry(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """``rows x cols`` matrix with orthonormal rows."""
    z = (rng.standard_normal((cols, rows)) + 1j * rng.standard_normal((cols, rows))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    q = q * (np.diag(r) / np.abs(np.diag(r)))
    return q.conj().T


def random_mps(M: int, chi_max: int, d: int, seed: int = 0) -> MpsState:
    """Random normalised MPS in exact mixed-canonical form.

    Right-isometric tensors are drawn first, so every right block of the
    chain is orthonormal; one left-to-right sweep of exact SVDs then yields
    left-canonical site tensors and the true Schmidt coefficients of every
    bond. Sampling from the result therefore reproduces the Born
    distribution of the state exactly.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if d < 2:
        raise ValueError("physical dimension d must be at least 2")
    if chi_max < 1:
        raise ValueError("chi_max must be at least 1")
    rng = np.random.default_rng(seed)
    dims = _capped_bond_dims(M, chi_max, d)
    right = []
    for i in range(M):
        iso = _random_isometry(rng, dims[i], dims[i + 1] * d)
        right.append(iso.reshape(dims[i], dims[i + 1], d))

    gammas: list[np.ndarray] = []
    lambdas: list[np.ndarray] = []
    carry = np.ones((1, 1), dtype=np.complex128)
    for i in range(M):
        t = np.einsum("ac,cbk->akb", carry, right[i])  # (chiL, d, chiR)
        chi_l = t.shape[0]
        u, s, vh = np.linalg.svd(t.reshape(chi_l * d, dims[i + 1]), full_matrices=False)
        rank = s.shape[0]
        gammas.append(u.reshape(chi_l, d, rank).transpose(0, 2, 1))
        lambdas.append(s)
        carry = s[:, None] * vh
    # the state is normalised, so the leftover 1x1 factor is a pure phase
    gammas[-1] = gammas[-1] * carry[0, 0] / abs(carry[0, 0])
    lambdas[-1] = np.ones(1)
    lambdas = [lam / np.sqrt(np.sum(lam**2)) for lam in lambdas]
    return MpsState(gammas, lambdas)


def product_state(site_probs: Sequence[Sequence[float]], phases: bool = False, seed: int = 0) -> MpsState:
    """Bond-dimension-1 MPS with the given per-site outcome distributions."""
    rng = np.random.default_rng(seed)
    gammas = []
    for p in site_probs:
        amp = np.sqrt(np.asarray(p, dtype=np.float64))
        if phases:
            amp = amp * np.exp(2j * np.pi * rng.uniform(size=amp.shape))
        gammas.append(amp.reshape(1, 1, -1).astype(np.complex128))
    return MpsState(gammas, [np.ones(1) for _ in gammas])


def _random_unitary(rng: np.random.Generator, n: int) -> np.ndarray:
    return _random_isometry(rng, n, n)


def attenuated_chain(
    M: int,
    chi: int,
    d: int,
    decades_per_site: float = 1.0,
    seed: int = 0,
    mixing: str = "unitary",
) -> MpsState:
    """Synthetic chain whose environment norm drops by a fixed factor per site.

    Site 0 has unit-modulus entries, so the initial mean magnitude is 1. Every
    later slice ``gammas[i][:, :, k]`` is ``10**-decades_per_site`` times a
    unitary (``mixing="unitary"``) or a diagonal phase matrix
    (``mixing="identity"``), hence ``||env_i|| = ||env_0|| * 10**(-i * rate)``
    regardless of the outcomes drawn. The chain is not a normalised state; it
    exists to exercise underflow behaviour.
    """
    if mixing not in ("unitary", "identity"):
        raise ValueError("mixing must be 'unitary' or 'identity'")
    if M < 2:
        raise ValueError("an attenuated chain needs at least two sites")
    rng = np.random.default_rng(seed)
    atten = 10.0 ** (-decades_per_site)
    first = np.exp(2j * np.pi * rng.uniform(size=(1, chi, d)))
    gammas = [first]
    for _ in range(1, M - 1):
        g = np.empty((chi, chi, d), dtype=np.complex128)
        for k in range(d):
            if mixing == "unitary":
                g[:, :, k] = atten * _random_unitary(rng, chi)
            else:
                g[:, :, k] = atten * np.diag(np.exp(2j * np.pi * rng.uniform(size=chi)))
        gammas.append(g)
    last = np.empty((chi, 1, d), dtype=np.complex128)
    for k in range(d):
        col = rng.standard_normal(chi) + 1j * rng.standard_normal(chi)
        last[:, 0, k] = atten * np.sqrt(chi) * col / np.linalg.norm(col) if mixing == "unitary" else atten
    gammas.append(last)
    profile = np.exp(-np.arange(chi) / max(chi / 2, 1))
    profile /= np.linalg.norm(profile)
    lambdas = [profile.copy() for _ in range(M - 1)] + [np.ones(1)]
    return MpsState(gammas, lambdas)
