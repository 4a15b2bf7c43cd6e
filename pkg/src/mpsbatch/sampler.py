"""Sequential site-by-site batch sampling.

For each macro batch the sites are streamed once from left to right; inside a
site every micro batch is contracted into its left environment, optionally
rescaled per sample, and measured. Random draws come from
:mod:`mpsbatch.rng`, keyed by seed, site and global sample index, so
outcomes do not depend on how samples are grouped into batches or workers.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import rng
from .mps import BondSchedule, MpsState
from .mpsfile import SiteStream
from .tensor_core import (
    Precision,
    PrecisionPolicy,
    Scaling,
    contract_site,
    contraction_macs,
    global_max_scale,
    per_sample_max_scale,
    round_to,
)

__all__ = [
    "DEAD",
    "DEFAULT_MICRO_BATCH",
    "BatchPlan",
    "SampleBatch",
    "RunStats",
    "DecayTrace",
    "outcome_weights",
    "draw_outcomes",
    "measure",
    "iter_sites",
    "sample_batch",
    "decay_probe",
    "fit_decay_rate",
]

DEAD = -1
DEFAULT_MICRO_BATCH = 5000

SiteHook = Callable[[int, np.ndarray, range], np.ndarray]


@dataclass(frozen=True)
class BatchPlan:
    """Two-level batching: ``N`` samples in macro batches of ``N1``, micro batches of ``N2``.

    The last macro and micro batches may be short; no padding samples are
    ever computed.
    """

    N: int
    N1: int
    N2: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not 1 <= self.N2 <= self.N1 <= self.N:
            raise ValueError(f"batch sizes must satisfy 1 <= N2 <= N1 <= N, got N2={self.N2}, N1={self.N1}, N={self.N}")

    @classmethod
    def build(cls, N: int, N1: int | None = None, N2: int | None = None) -> "BatchPlan":
        """Plan with defaults: ``N1 = N`` and ``N2 = min(5000, N1)``."""
        N1 = N if N1 is None else min(N1, N)
        N2 = min(DEFAULT_MICRO_BATCH if N2 is None else N2, N1)
        return cls(N, N1, N2)

    @property
    def n1(self) -> int:
        return math.ceil(self.N / self.N1)

    @property
    def n2(self) -> int:
        return math.ceil(self.N1 / self.N2)

    def macro_batches(self, offset: int = 0) -> list[range]:
        return [range(offset + s, offset + min(s + self.N1, self.N)) for s in range(0, self.N, self.N1)]

    def micro_batches(self, macro: range) -> list[range]:
        return [range(s, min(s + self.N2, macro.stop)) for s in range(macro.start, macro.stop, self.N2)]

    def to_dict(self) -> dict:
        return {"N": self.N, "N1": self.N1, "N2": self.N2, "n1": self.n1, "n2": self.n2}


@dataclass
class DecayTrace:
    """Per-site environment magnitudes.

    ``mean_abs`` is the mean of ``|env|`` over samples and bond entries as
    held in memory, i.e. before that site's rescaling. ``log10_mean`` adds
    back the scale factors removed at earlier sites, giving the magnitude the
    unscaled computation would carry. ``log10_range`` is the widest spread,
    in decades, between the largest and smallest nonzero entry of any one
    sample's environment.
    """

    mean_abs: np.ndarray
    log10_mean: np.ndarray
    dead_fraction: np.ndarray
    log10_range: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mean_abs": self.mean_abs.tolist(),
            "log10_mean": [None if not np.isfinite(v) else float(v) for v in self.log10_mean],
            "dead_fraction": self.dead_fraction.tolist(),
            "log10_range": self.log10_range.tolist(),
        }


@dataclass
class RunStats:
    contraction_macs: int = 0
    measure_macs: int = 0
    draw_ops: int = 0
    dead_samples: int = 0
    site_seconds: list[float] = field(default_factory=list)
    site_macs: list[int] = field(default_factory=list)
    decay: DecayTrace | None = None

    def merge(self, other: "RunStats") -> None:
        self.contraction_macs += other.contraction_macs
        self.measure_macs += other.measure_macs
        self.draw_ops += other.draw_ops
        self.dead_samples += other.dead_samples
        if len(self.site_seconds) < len(other.site_seconds):
            self.site_seconds += [0.0] * (len(other.site_seconds) - len(self.site_seconds))
        for i, t in enumerate(other.site_seconds):
            self.site_seconds[i] += t
        if len(self.site_macs) < len(other.site_macs):
            self.site_macs += [0] * (len(other.site_macs) - len(self.site_macs))
        for i, c in enumerate(other.site_macs):
            self.site_macs[i] += c

    def to_dict(self) -> dict:
        out = {
            "contraction_macs": self.contraction_macs,
            "measure_macs": self.measure_macs,
            "draw_ops": self.draw_ops,
            "dead_samples": self.dead_samples,
            "site_seconds": self.site_seconds,
            "site_macs": self.site_macs,
        }
        if self.decay is not None:
            out["decay"] = self.decay.to_dict()
        return out


@dataclass
class SampleBatch:
    """Outcome matrix ``(N, M)`` for global samples ``first_index .. first_index + N - 1``.

    Dead samples hold ``DEAD`` from the site where they died onwards.
    """

    outcomes: np.ndarray
    alive: np.ndarray
    seed: int
    first_index: int = 0
    stats: RunStats = field(default_factory=RunStats)

    @property
    def N(self) -> int:
        return self.outcomes.shape[0]

    @property
    def M(self) -> int:
        return self.outcomes.shape[1]

    @property
    def dead_count(self) -> int:
        return int((~self.alive).sum())

    def rng_key(self, row: int, site: int) -> tuple[int, int, int]:
        """Counter-RNG coordinates ``(seed, global sample index, site)`` of one draw."""
        return (self.seed, self.first_index + row, site)


def outcome_weights(temp: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """``w[n, k] = sum_b lam[b]**2 * |temp[n, b, k]|**2`` evaluated in float64."""
    mag2 = temp.real**2 + temp.imag**2
    return np.einsum("nbk,b->nk", mag2, np.asarray(lam, dtype=np.float64) ** 2)


def draw_outcomes(weights: np.ndarray, draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-CDF selection: count cumulative probabilities strictly below each draw.

    Returns ``(outcomes, dead)``; samples whose weights sum to zero (or are
    not finite) are dead and get ``DEAD``.
    """
    total = weights.sum(axis=1)
    dead = ~(np.isfinite(total) & (total > 0))
    safe = np.where(dead, 1.0, total)
    cdf = np.cumsum(weights / safe[:, None], axis=1)
    outcomes = np.sum(draws[:, None] > cdf, axis=1)
    # rounding can leave cdf[-1] a hair below a draw near 1
    outcomes = np.minimum(outcomes, weights.shape[1] - 1)
    outcomes = np.where(dead, DEAD, outcomes).astype(np.int64)
    return outcomes, dead


def select_environment(temp: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
    """``env[n, b] = temp[n, b, outcomes[n]]``; dead rows become zero."""
    idx = np.maximum(outcomes, 0)
    env = np.take_along_axis(temp, idx[:, None, None], axis=2)[:, :, 0]
    if (outcomes < 0).any():
        env = env.copy()
        env[outcomes < 0] = 0
    return env


def measure(temp, lam, rng_draws) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Measure one site for a micro batch.

    Parameters
    ----------
    temp : (N2, chi, d) complex
        Unmeasured left environment.
    lam : (chi,) float
        Coefficients of the bond to the right of the site.
    rng_draws : (N2,) float
        Uniforms in [0, 1).

    Returns
    -------
    outcomes, env, dead
        Outcome per sample (``DEAD`` for dead samples), the measured
        environment ``(N2, chi)`` and the dead-sample mask.
    """
    temp = np.asarray(temp)
    lam = np.asarray(lam, dtype=np.float64)
    if temp.ndim != 3 or lam.shape != (temp.shape[1],):
        raise ValueError(f"measure expects temp (N2, chi, d) and lambda (chi,), got {temp.shape} and {lam.shape}")
    if (lam < 0).any():
        raise ValueError("coefficients must be nonnegative")
    draws = np.asarray(rng_draws, dtype=np.float64)
    if draws.shape != (temp.shape[0],):
        raise ValueError(f"expected {temp.shape[0]} draws, got {draws.shape}")
    weights = outcome_weights(temp, lam)
    outcomes, dead = draw_outcomes(weights, draws)
    return outcomes, select_environment(temp, outcomes), dead


def iter_sites(source) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Normalise an MPS source to an iterator of ``(i, gamma, lambda)``.

    ``source`` may be an :class:`MpsState`, a path to an MPS file, or a
    zero-argument callable returning such an iterator.
    """
    if isinstance(source, MpsState):
        return source.iter_sites()
    if isinstance(source, (str, os.PathLike)):
        return iter(SiteStream(source))
    if callable(source):
        return iter(source())
    raise TypeError(f"cannot stream sites from {type(source).__name__}")


def _site_count(source) -> int:
    if isinstance(source, MpsState):
        return source.M
    if isinstance(source, (str, os.PathLike)):
        return SiteStream(source).header.M
    return -1


class _MicroState:
    __slots__ = ("rows", "env", "alive", "log10_scale")

    def __init__(self, rows: range):
        self.rows = rows
        self.env = np.ones((len(rows), 1), dtype=np.complex128)
        self.alive = np.ones(len(rows), dtype=bool)
        self.log10_scale = np.zeros(len(rows))


class _DecayAccumulator:
    def __init__(self, M: int):
        self.abs_sum = np.zeros(M)
        self.entries = np.zeros(M)
        self.log_sum = np.full(M, -np.inf)  # natural log of the sum of per-sample logical means
        self.samples = np.zeros(M)
        self.dead = np.zeros(M)
        self.spread = np.zeros(M)

    def ensure(self, M: int) -> None:
        grow = M - self.abs_sum.shape[0]
        if grow > 0:
            self.abs_sum = np.pad(self.abs_sum, (0, grow))
            self.entries = np.pad(self.entries, (0, grow))
            self.log_sum = np.pad(self.log_sum, (0, grow), constant_values=-np.inf)
            self.samples = np.pad(self.samples, (0, grow))
            self.dead = np.pad(self.dead, (0, grow))
            self.spread = np.pad(self.spread, (0, grow))

    def add(self, i: int, env: np.ndarray, log10_scale: np.ndarray, dead: np.ndarray) -> None:
        mag = np.abs(env)
        self.abs_sum[i] += float(mag.sum())
        self.entries[i] += mag.size
        per_sample = mag.mean(axis=1)
        with np.errstate(divide="ignore"):
            logs = np.log(per_sample) + log10_scale * np.log(10.0)
        self.log_sum[i] = np.logaddexp(self.log_sum[i], np.logaddexp.reduce(logs)) if logs.size else self.log_sum[i]
        self.samples[i] += env.shape[0]
        self.dead[i] += float(dead.sum())
        parts = np.concatenate([np.abs(env.real), np.abs(env.imag)], axis=1)
        peak = parts.max(axis=1, initial=0.0)
        low = np.where(parts > 0, parts, np.inf).min(axis=1, initial=np.inf)
        live = (peak > 0) & np.isfinite(low)
        if live.any():
            self.spread[i] = max(self.spread[i], float(np.log10(peak[live] / low[live]).max()))

    def trace(self) -> DecayTrace:
        with np.errstate(divide="ignore", invalid="ignore"):
            mean_abs = np.where(self.entries > 0, self.abs_sum / np.maximum(self.entries, 1), 0.0)
            log10_mean = (self.log_sum - np.log(np.maximum(self.samples, 1))) / np.log(10.0)
            dead = self.dead / np.maximum(self.samples, 1)
        return DecayTrace(mean_abs, log10_mean, dead, self.spread.copy())


def _scale(temp: np.ndarray, policy: PrecisionPolicy, state: _MicroState) -> tuple[np.ndarray, np.ndarray]:
    if policy.scaling is Scaling.NONE:
        return temp, np.zeros(temp.shape[0], dtype=bool)
    if policy.scaling is Scaling.PER_SAMPLE_MAX:
        scaled, scales, dead = per_sample_max_scale(temp)
        state.log10_scale += np.log10(scales)
    else:
        scaled, peak = global_max_scale(temp)
        state.log10_scale += np.log10(peak)
        dead = np.zeros(temp.shape[0], dtype=bool)
    return round_to(scaled, policy.accumulator), dead


def sample_batch(
    mps,
    plan: BatchPlan,
    policy: PrecisionPolicy | None = None,
    seed: int = 0,
    *,
    schedule: BondSchedule | None = None,
    first_index: int = 0,
    site_hook: SiteHook | None = None,
    trace: bool = False,
) -> SampleBatch:
    """Draw ``plan.N`` samples for global indices ``first_index .. first_index + N - 1``.

    ``mps`` is an :class:`MpsState`, a file path or a site-iterator factory.
    With a ``schedule`` each site tensor is cut to the scheduled bond
    dimensions before contraction. ``site_hook(i, temp, rows)`` may
    transform the unmeasured environment of every micro batch (used for
    per-sample displacements). ``trace=True`` records a decay trace.
    """
    policy = policy or PrecisionPolicy()
    stats = RunStats()
    outcome_cols: list[np.ndarray] = []
    alive = np.ones(plan.N, dtype=bool)
    decay = _DecayAccumulator(max(_site_count(mps), 0)) if trace else None
    per_site_seconds: list[float] = []
    rounded_store = isinstance(mps, MpsState) and policy.storage is not Precision.F64

    pieces: dict[int, list[tuple[range, np.ndarray]]] = {}
    for macro in plan.macro_batches(first_index):
        micro = [_MicroState(r) for r in plan.micro_batches(macro)]
        for i, gamma, lam in iter_sites(mps):
            if decay is not None:
                decay.ensure(i + 1)
            if rounded_store:
                gamma = round_to(gamma, policy.storage)
            if schedule is not None:
                gamma = gamma[: schedule.per_site_chi[i], : schedule.per_site_chi[i + 1], :]
                lam = lam[: schedule.per_site_chi[i + 1]]
            while len(per_site_seconds) <= i:
                per_site_seconds.append(0.0)
                stats.site_macs.append(0)
            t0 = time.perf_counter()
            for st in micro:
                n = len(st.rows)
                temp = contract_site(st.env, gamma, policy)
                macs = contraction_macs(n, gamma.shape[0], gamma.shape[1], gamma.shape[2])
                stats.contraction_macs += macs
                stats.site_macs[i] += macs
                if site_hook is not None:
                    temp = site_hook(i, temp, st.rows)
                temp, dead_scale = _scale(temp, policy, st)
                draws = rng.uniforms(seed, i, st.rows.start, n)
                outcomes, env, dead = measure(temp, lam, draws)
                stats.measure_macs += n * temp.shape[1] * temp.shape[2]
                stats.draw_ops += n * temp.shape[2]
                dead |= dead_scale | ~st.alive
                outcomes[dead] = DEAD
                env[dead] = 0
                st.alive &= ~dead
                st.env = round_to(env, policy.storage)
                pieces.setdefault(i, []).append((st.rows, outcomes))
                if decay is not None:
                    decay.add(i, st.env, st.log10_scale, ~st.alive)
            per_site_seconds[i] += time.perf_counter() - t0
        for st in micro:
            alive[st.rows.start - first_index : st.rows.stop - first_index] = st.alive

    M = max(pieces) + 1 if pieces else 0
    out = np.empty((plan.N, M), dtype=np.int16)
    for i in range(M):
        for rows, col in pieces[i]:
            out[rows.start - first_index : rows.stop - first_index, i] = col
    stats.dead_samples = int((~alive).sum())
    stats.site_seconds = per_site_seconds
    if decay is not None:
        stats.decay = decay.trace()
    return SampleBatch(out, alive, seed, first_index, stats)


def decay_probe(mps, policy: PrecisionPolicy | None = None, sample_count: int = 1000, seed: int = 0) -> DecayTrace:
    """Per-site mean environment magnitude for ``sample_count`` samples."""
    plan = BatchPlan.build(sample_count)
    return sample_batch(mps, plan, policy, seed, trace=True).stats.decay


def fit_decay_rate(trace: DecayTrace | np.ndarray, sites: Iterable[int] | None = None) -> tuple[float, float]:
    """Least-squares fit of ``log10 mu_i = log10 mu_0 - k * i``.

    Accepts a :class:`DecayTrace` (its logical ``log10_mean`` is used) or an
    array of per-site magnitudes. Sites with zero or non-finite magnitude are
    skipped. Returns ``(k, log10_mu0)``.
    """
    if isinstance(trace, DecayTrace):
        logs = np.asarray(trace.log10_mean, dtype=np.float64)
    else:
        with np.errstate(divide="ignore"):
            logs = np.log10(np.asarray(trace, dtype=np.float64))
    idx = np.arange(logs.shape[0]) if sites is None else np.asarray(list(sites))
    idx = idx[np.isfinite(logs[idx])]
    if idx.size < 2:
        raise ValueError("need at least two sites with finite magnitude to fit a decay rate")
    slope, intercept = np.polyfit(idx.astype(np.float64), logs[idx], 1)
    return float(-slope), float(intercept)
