"""Data-parallel and tensor-parallel sampling over the simulated fabric.

Macro batches are dealt round-robin to the ``p1`` groups (macro ``j`` goes to
group ``j % p1``); every round streams the chain once from disk. Within a
group of ``p2`` ranks the bond index is partitioned into contiguous shards,
after zero-padding every bond except the first to a multiple of ``p2``.

Measurement draws come from the same counter RNG as the serial sampler, so
at F64 every scheme produces the serial outcome matrix. Sums of split-K
partials are added in rank order; they can differ from the serial matrix
product in the last bit, which moves a cumulative probability by about
1e-16 and therefore flips an outcome only for a draw that close to a bin edge.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .. import rng
from ..mpsfile import SiteStream, decode_gamma, read_header
from ..sampler import (
    DEAD,
    BatchPlan,
    RunStats,
    SampleBatch,
    SiteHook,
    draw_outcomes,
    outcome_weights,
    sample_batch,
    select_environment,
)
from ..tensor_core import Precision, PrecisionPolicy, Scaling, contract_site, round_to
from .fabric import CollectiveGroup, CommModel, CommStats, Communicator, PlanningError

__all__ = [
    "ParallelResult",
    "ShardedGamma",
    "shard_bounds",
    "shard_gamma",
    "padded_bond_dims",
    "run_data_parallel",
    "run_tensor_parallel_single_site",
    "run_tensor_parallel_double_site",
]


@dataclass
class ParallelResult:
    batch: SampleBatch
    comm: CommStats
    scheme: str
    p1: int
    p2: int
    bond_dims: list[int] = field(default_factory=list)

    @property
    def outcomes(self) -> np.ndarray:
        return self.batch.outcomes

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "p1": self.p1,
            "p2": self.p2,
            "bond_dims": self.bond_dims,
            "stats": self.batch.stats.to_dict(),
            "dead_samples": self.batch.dead_count,
            "comm": self.comm.to_dict(),
        }


def shard_bounds(extent: int, parts: int) -> list[tuple[int, int]]:
    """Balanced contiguous partition: sizes differ by at most one, larger shards first."""
    if parts < 1:
        raise ValueError("parts must be at least 1")
    base, extra = divmod(extent, parts)
    out, start = [], 0
    for r in range(parts):
        stop = start + base + (1 if r < extra else 0)
        out.append((start, stop))
        start = stop
    return out


@dataclass(frozen=True)
class ShardedGamma:
    site_index: int
    axis: int  # 0: rows (left bond), 1: columns (right bond)
    shards: tuple[np.ndarray, ...]

    def assemble(self) -> np.ndarray:
        return np.concatenate(self.shards, axis=self.axis)


def shard_gamma(site_index: int, gamma: np.ndarray, axis: int, parts: int) -> ShardedGamma:
    if axis not in (0, 1):
        raise ValueError("site tensors are sharded along a bond axis (0 or 1)")
    bounds = shard_bounds(gamma.shape[axis], parts)
    index = [slice(None)] * gamma.ndim
    shards = []
    for lo, hi in bounds:
        index[axis] = slice(lo, hi)
        shards.append(np.ascontiguousarray(gamma[tuple(index)]))
    return ShardedGamma(site_index, axis, tuple(shards))


def padded_bond_dims(bond_dims, p2: int, pad: bool = True) -> list[int]:
    """Round every bond but the first up to a multiple of ``p2``.

    With ``pad=False`` an interior bond that does not divide raises
    :class:`PlanningError`; the trailing boundary bond is always padded.
    """
    dims = list(bond_dims)
    out = [dims[0]]
    last = len(dims) - 1
    for i, c in enumerate(dims[1:], 1):
        if c % p2:
            if not pad and i != last:
                raise PlanningError(f"bond {i} has dimension {c}, not divisible by p2={p2}")
            c = math.ceil(c / p2) * p2
        out.append(c)
    return out


def _macro_rounds(plan: BatchPlan, p1: int) -> list[list[range | None]]:
    macros = plan.macro_batches()
    rounds = []
    for start in range(0, len(macros), p1):
        chunk = list(macros[start : start + p1])
        rounds.append(chunk + [None] * (p1 - len(chunk)))
    return rounds


def _merge(pieces: list[SampleBatch], N: int, M: int, seed: int, stats: RunStats) -> SampleBatch:
    out = np.empty((N, M), dtype=np.int16)
    alive = np.ones(N, dtype=bool)
    seen = 0
    for b in pieces:
        out[b.first_index : b.first_index + b.N] = b.outcomes
        alive[b.first_index : b.first_index + b.N] = b.alive
        seen += b.N
    if seen != N:
        raise RuntimeError(f"merged {seen} samples, expected {N}")
    stats.dead_samples = int((~alive).sum())
    return SampleBatch(out, alive, seed, 0, stats)


def _check_fault(fault, rank: int, site: int) -> None:
    if fault is not None and fault == (rank, site):
        raise RuntimeError(f"injected fault at site {site}")


def run_data_parallel(
    mps_path: str | os.PathLike,
    plan: BatchPlan,
    p1: int,
    policy: PrecisionPolicy | None = None,
    seed: int = 0,
    *,
    model: CommModel | None = None,
    site_hook: SiteHook | None = None,
    fault: tuple[int, int] | None = None,
) -> ParallelResult:
    """Every group samples whole macro batches; rank 0 reads and broadcasts each site.

    Γ travels in its storage encoding (purpose ``"gamma"``), Λ separately
    (purpose ``"lambda"``). ``fault=(rank, site)`` makes that rank raise when it
    reaches that site, for failure-path testing.
    """
    policy = policy or PrecisionPolicy()
    header = read_header(mps_path)
    group = CollectiveGroup(p1, 1, model)
    rounds = _macro_rounds(plan, p1)

    def worker(rank: int) -> tuple[list[SampleBatch], RunStats]:
        comm = group.world(rank)
        done: list[SampleBatch] = []
        stats = RunStats()
        for macros in rounds:
            macro = macros[rank]

            def sites():
                stream = iter(SiteStream(mps_path, raw=True)) if rank == 0 else None
                for i in range(header.M):
                    _check_fault(fault, rank, i)
                    if rank == 0:
                        _, raw, lam, storage = next(stream)
                        gamma_msg, lam_msg = (raw, storage.value), lam
                    else:
                        gamma_msg = lam_msg = None
                    raw, tag = comm.broadcast(gamma_msg, 0, "gamma")
                    lam = comm.broadcast(lam_msg, 0, "lambda")
                    yield i, decode_gamma(raw, tag), lam
                if stream is not None:
                    for _ in stream:
                        pass

            if macro is None:
                for _ in sites():
                    pass
                continue
            sub = BatchPlan(len(macro), len(macro), min(plan.N2, len(macro)))
            b = sample_batch(sites, sub, policy, seed, first_index=macro.start, site_hook=site_hook)
            stats.merge(b.stats)
            done.append(b)
        return done, stats

    results = group.run(worker)
    total = RunStats()
    pieces = []
    for done, stats in results:
        total.merge(stats)
        pieces.extend(done)
    batch = _merge(pieces, plan.N, header.M, seed, total)
    return ParallelResult(batch, group.stats, "data", p1, 1, list(header.bond_dims))


class _Micro:
    __slots__ = ("rows", "env", "alive", "outcomes")

    def __init__(self, rows: range, M: int):
        self.rows = rows
        self.env = np.ones((len(rows), 1), dtype=np.complex128)
        self.alive = np.ones(len(rows), dtype=bool)
        self.outcomes = np.empty((len(rows), M), dtype=np.int16)


def _pad_raw(raw: np.ndarray, rows: int, cols: int) -> np.ndarray:
    if raw.shape[0] == rows and raw.shape[1] == cols:
        return raw
    out = np.zeros((rows, cols) + raw.shape[2:], dtype=raw.dtype)
    out[: raw.shape[0], : raw.shape[1]] = raw
    return out


def _pad_lambda(lam: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[: lam.shape[0]] = lam
    return out


class _TensorWorker:
    """One rank of a tensor-parallel group; drives the per-site steps."""

    def __init__(self, rank, group, header, dims, plan, policy, seed, scheme, mps_path, site_hook, fault):
        self.rank = rank
        self.g, self.r = group.coords(rank)
        self.p2 = group.p2
        self.tensor: Communicator = group.tensor(rank)
        self.column: Communicator = group.column(rank)
        self.header = header
        self.dims = dims
        self.plan = plan
        self.policy = policy
        self.seed = seed
        self.scheme = scheme
        self.path = mps_path
        self.hook = site_hook
        self.fault = fault
        self.stats = RunStats()

    def layout(self, i: int) -> int:
        """Shard axis of site ``i``: 1 for a column (right bond) split, 0 for rows."""
        if i == 0:
            return 1
        if self.scheme == "double-site" and i % 2 == 0:
            return 1
        return 0

    def bounds(self, bond: int) -> tuple[int, int]:
        return shard_bounds(self.dims[bond], self.p2)[self.r]

    def fetch(self, stream, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Shard of site ``i`` read by the group-0 rank and broadcast down the column."""
        if self.g == 0:
            _, raw, lam, storage = next(stream)
            raw = _pad_raw(raw, self.dims[i], self.dims[i + 1])
            lam = _pad_lambda(lam, self.dims[i + 1])
            axis = self.layout(i)
            lo, hi = self.bounds(i if axis == 0 else i + 1)
            piece = raw[lo:hi] if axis == 0 else raw[:, lo:hi]
            gmsg, lmsg = (np.ascontiguousarray(piece), storage.value), lam
        else:
            gmsg = lmsg = None
        piece, tag = self.column.broadcast(gmsg, 0, "gamma")
        lam = self.column.broadcast(lmsg, 0, "lambda")
        return decode_gamma(piece, tag), lam

    def run(self, rounds) -> list[SampleBatch]:
        done = []
        M = self.header.M
        for macros in rounds:
            macro = macros[self.g]
            micro = [_Micro(r, M) for r in self.plan.micro_batches(macro)] if macro is not None else []
            stream = iter(SiteStream(self.path, raw=True)) if self.g == 0 else None
            for i in range(M):
                _check_fault(self.fault, self.rank, i)
                gamma, lam = self.fetch(stream, i)
                for st in micro:
                    self.site(i, gamma, lam, st)
            if stream is not None:
                for _ in stream:
                    pass
            if macro is not None:
                outcomes = np.concatenate([st.outcomes for st in micro])
                alive = np.concatenate([st.alive for st in micro])
                done.append(SampleBatch(outcomes, alive, self.seed, macro.start))
        return done

    # one micro batch at one site

    def site(self, i: int, gamma: np.ndarray, lam: np.ndarray, st: _Micro) -> None:
        n = len(st.rows)
        acc = self.policy.accumulator
        if i == 0 or (self.scheme == "double-site" and i % 2 == 0):
            # st.env is full (or the initial ones); gamma is a column shard
            temp = contract_site(st.env, gamma, self.policy)
            self.stats.contraction_macs += n * gamma.shape[0] * gamma.shape[1] * gamma.shape[2]
            lo, hi = self.bounds(i + 1)
            self.distributed_measure(i, temp, lam[lo:hi], st)
            return
        partial = self.split_k(st.env, gamma, n)
        if self.scheme == "single-site":
            temp = self.tensor.reduce_scatter_sum(partial, axis=1, purpose="env")
            temp = round_to(temp, acc)
            lo, hi = self.bounds(i + 1)
            self.distributed_measure(i, temp, lam[lo:hi], st)
        else:
            temp = self.tensor.all_reduce_sum(partial, purpose="env")
            temp = round_to(temp, acc)
            self.redundant_measure(i, temp, lam, st)

    def split_k(self, env: np.ndarray, gamma: np.ndarray, n: int) -> np.ndarray:
        """Partial product of this rank's rows; summing over ranks gives the contraction."""
        chi_l, chi_r, d = gamma.shape
        self.stats.contraction_macs += n * chi_l * chi_r * d
        if self.policy.compute is Precision.F64:
            return (env @ gamma.reshape(chi_l, chi_r * d)).reshape(n, chi_r, d)
        a = round_to(env, self.policy.compute)
        b = round_to(gamma, self.policy.compute)
        return (a @ b.reshape(chi_l, chi_r * d)).reshape(n, chi_r, d)

    def _hook(self, i: int, temp: np.ndarray, st: _Micro) -> np.ndarray:
        return temp if self.hook is None else self.hook(i, temp, st.rows)

    def _local_max(self, temp: np.ndarray) -> np.ndarray:
        flat = temp.reshape(temp.shape[0], -1)
        if flat.shape[1] == 0:
            return np.zeros(temp.shape[0])
        return np.maximum(np.abs(flat.real), np.abs(flat.imag)).max(axis=1)

    def _scale_shard(self, temp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scale by the group-wide maximum; returns (scaled, dead-by-scale)."""
        n = temp.shape[0]
        mode = self.policy.scaling
        if mode is Scaling.NONE:
            return temp, np.zeros(n, dtype=bool)
        local = self._local_max(temp)
        if mode is Scaling.GLOBAL_MAX:
            local = np.array([local.max() if local.size else 0.0])
        peaks = self.tensor.all_gather(local, purpose="scale")
        peak = peaks[0].copy()
        for other in peaks[1:]:
            peak = np.maximum(peak, other)
        dead = ~(peak > 0)
        if mode is Scaling.GLOBAL_MAX:
            if dead[0]:
                return temp, np.zeros(n, dtype=bool)
            return round_to(temp / peak[0], self.policy.accumulator), np.zeros(n, dtype=bool)
        safe = np.where(dead, 1.0, peak)
        return round_to(temp / safe[:, None, None], self.policy.accumulator), dead

    def _finish(self, i: int, temp: np.ndarray, outcomes: np.ndarray, dead: np.ndarray, st: _Micro) -> None:
        env = select_environment(temp, outcomes)
        dead = dead | ~st.alive
        outcomes = np.where(dead, DEAD, outcomes)
        env[dead] = 0
        st.alive &= ~dead
        st.env = round_to(env, self.policy.storage)
        st.outcomes[:, i] = outcomes

    def distributed_measure(self, i: int, temp: np.ndarray, lam: np.ndarray, st: _Micro) -> None:
        """Each rank weighs its bond shard; partial weights are summed across the group."""
        temp = self._hook(i, temp, st)
        temp, dead_scale = self._scale_shard(temp)
        n, chi, d = temp.shape
        partial = outcome_weights(temp, lam)
        parts = self.tensor.all_gather(partial, purpose="weights")
        weights = parts[0].copy()
        for w in parts[1:]:
            weights += w
        self.stats.measure_macs += n * chi * d
        self.stats.draw_ops += n * d
        draws = rng.uniforms(self.seed, i, st.rows.start, n)
        outcomes, dead = draw_outcomes(weights, draws)
        self._finish(i, temp, outcomes, dead | dead_scale, st)

    def redundant_measure(self, i: int, temp: np.ndarray, lam: np.ndarray, st: _Micro) -> None:
        """Every rank holds the full tensor and measures it on its own."""
        temp = self._hook(i, temp, st)
        n, chi, d = temp.shape
        dead_scale = np.zeros(n, dtype=bool)
        if self.policy.scaling is Scaling.PER_SAMPLE_MAX:
            peak = self._local_max(temp)
            dead_scale = ~(peak > 0)
            temp = round_to(temp / np.where(dead_scale, 1.0, peak)[:, None, None], self.policy.accumulator)
        elif self.policy.scaling is Scaling.GLOBAL_MAX:
            peak = float(self._local_max(temp).max())
            if peak > 0:
                temp = round_to(temp / peak, self.policy.accumulator)
        weights = outcome_weights(temp, lam)
        self.stats.measure_macs += n * chi * d
        self.stats.draw_ops += n * d
        draws = rng.uniforms(self.seed, i, st.rows.start, n)
        outcomes, dead = draw_outcomes(weights, draws)
        # the full environment feeds the next (even, column-split) site as is
        self._finish(i, temp, outcomes, dead | dead_scale, st)


def _run_tensor_parallel(scheme, mps_path, plan, p1, p2, policy, seed, model, pad, site_hook, fault) -> ParallelResult:
    policy = policy or PrecisionPolicy()
    if p2 < 1 or p1 < 1:
        raise PlanningError("p1 and p2 must be at least 1")
    if p2 == 1:
        res = run_data_parallel(mps_path, plan, p1, policy, seed, model=model, site_hook=site_hook, fault=fault)
        res.scheme = scheme
        return res
    header = read_header(mps_path)
    dims = padded_bond_dims(header.bond_dims, p2, pad)
    group = CollectiveGroup(p1, p2, model)
    rounds = _macro_rounds(plan, p1)

    def worker(rank: int):
        w = _TensorWorker(rank, group, header, dims, plan, policy, seed, scheme, mps_path, site_hook, fault)
        return w.run(rounds), w.stats, w.r

    results = group.run(worker)
    total = RunStats()
    pieces = []
    for done, stats, r in results:
        total.merge(stats)
        if r == 0:
            pieces.extend(done)
    batch = _merge(pieces, plan.N, header.M, seed, total)
    return ParallelResult(batch, group.stats, scheme, p1, p2, dims)


def run_tensor_parallel_single_site(
    mps_path,
    plan: BatchPlan,
    p1: int,
    p2: int,
    policy: PrecisionPolicy | None = None,
    seed: int = 0,
    *,
    model: CommModel | None = None,
    pad: bool = True,
    site_hook: SiteHook | None = None,
    fault: tuple[int, int] | None = None,
) -> ParallelResult:
    """Split-K contraction on row shards, one ReduceScatter of the unmeasured tensor per site.

    Site 0 is split by columns and needs no environment exchange. From site
    1 on, each rank multiplies its environment shard by its rows of Γ, the
    partials are reduce-scattered along the right bond, and each rank weighs
    its shard; the ``N2 x d`` partial weights are summed across the group
    (purpose ``"weights"``) and every rank draws the same outcomes.
    """
    return _run_tensor_parallel("single-site", mps_path, plan, p1, p2, policy, seed, model, pad, site_hook, fault)


def run_tensor_parallel_double_site(
    mps_path,
    plan: BatchPlan,
    p1: int,
    p2: int,
    policy: PrecisionPolicy | None = None,
    seed: int = 0,
    *,
    model: CommModel | None = None,
    pad: bool = True,
    site_hook: SiteHook | None = None,
    fault: tuple[int, int] | None = None,
) -> ParallelResult:
    """Sites processed in pairs: one AllReduce of the environment per pair.

    Odd sites run a split-K contraction followed by an AllReduce, after which
    every rank holds and measures the full tensor. Even sites multiply that
    full environment by a column shard of Γ locally, with a distributed
    measurement; their output is already the row shard the next odd site needs.
    """
    return _run_tensor_parallel("double-site", mps_path, plan, p1, p2, policy, seed, model, pad, site_hook, fault)
