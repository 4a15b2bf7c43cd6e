"""In-process message passing and collectives for simulated workers.

Workers are threads. Each ordered pair of ranks in a communicator owns a
FIFO queue, so collectives issued in the same order on every member match
up without tags. Reductions always add contributions in rank order, which
makes every result bit-identical to the serial sum ``((x0 + x1) + x2) + ...``.
"""

from __future__ import annotations

import math
import queue
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "WorkerFailure",
    "PlanningError",
    "CommModel",
    "CommStats",
    "CollectiveGroup",
    "Communicator",
    "payload_nbytes",
]

_CLOSED = object()


class WorkerFailure(RuntimeError):
    """A worker raised, or a channel it needed was closed."""

    def __init__(self, rank: int, message: str = ""):
        super().__init__(f"worker {rank} failed" + (f": {message}" if message else ""))
        self.rank = rank


class PlanningError(ValueError):
    """A parallel configuration that cannot be executed."""


@dataclass(frozen=True)
class CommModel:
    """Bandwidths (bytes/s) and per-step latency (s) used for modeled times."""

    allreduce_bandwidth: float = math.inf
    reducescatter_bandwidth: float = math.inf
    broadcast_bandwidth: float = math.inf
    allgather_bandwidth: float | None = None
    latency: float = 0.0

    def bandwidth(self, op: str) -> float:
        if op == "all_reduce":
            return self.allreduce_bandwidth
        if op == "reduce_scatter":
            return self.reducescatter_bandwidth
        if op == "broadcast":
            return self.broadcast_bandwidth
        if op == "all_gather":
            return self.allreduce_bandwidth if self.allgather_bandwidth is None else self.allgather_bandwidth
        raise ValueError(f"unknown collective {op!r}")

    def to_dict(self) -> dict:
        def enc(v):
            return None if v is None or math.isinf(v) else v

        return {
            "allreduce_bandwidth": enc(self.allreduce_bandwidth),
            "reducescatter_bandwidth": enc(self.reducescatter_bandwidth),
            "broadcast_bandwidth": enc(self.broadcast_bandwidth),
            "allgather_bandwidth": enc(self.allgather_bandwidth),
            "latency": self.latency,
        }


def _model_time(op: str, p: int, payload: int, model: CommModel) -> tuple[float, int, float]:
    """``(per-rank modeled bytes, latency steps, seconds)`` under the ring model."""
    if p <= 1:
        return 0.0, 0, 0.0
    if op == "all_reduce":
        per_rank, steps = 2 * (p - 1) / p * payload, 2 * (p - 1)
    elif op == "reduce_scatter":
        per_rank, steps = (p - 1) / p * payload, p - 1
    elif op == "broadcast":
        # naive: the root sends the whole payload to every other rank
        per_rank, steps = (p - 1) * payload, p - 1
    elif op == "all_gather":
        per_rank, steps = (p - 1) * payload, p - 1
    else:
        raise ValueError(f"unknown collective {op!r}")
    bw = model.bandwidth(op)
    seconds = (0.0 if math.isinf(bw) else per_rank / bw) + model.latency * steps
    return per_rank, steps, seconds


class CommStats:
    """Collective counts, byte totals and modeled times.

    Invocation counts and modeled times are recorded once per collective (by
    the communicator's first member). Bytes are recorded per rank as they
    are actually sent and received. Aggregates are summed in a fixed order so
    identical runs produce identical stats.
    """

    def __init__(self, world_size: int):
        self.world_size = world_size
        self._lock = threading.Lock()
        self._counts: dict[tuple[str, str], int] = defaultdict(int)
        self._payload: dict[tuple[str, str], int] = defaultdict(int)
        self._modeled: dict[tuple[str, str, str], list[float]] = defaultdict(list)
        self._modeled_bytes: dict[tuple[str, str, str], list[float]] = defaultdict(list)
        self.sent = [0] * world_size
        self.received = [0] * world_size
        self._sent_by: dict[tuple[str, str], int] = defaultdict(int)
        self._received_by: dict[tuple[str, str], int] = defaultdict(int)

    def invocation(self, op: str, purpose: str, comm: str, p: int, payload: int, model: CommModel) -> None:
        per_rank, _, seconds = _model_time(op, p, payload, model)
        with self._lock:
            self._counts[(op, purpose)] += 1
            self._payload[(op, purpose)] += payload
            self._modeled[(op, purpose, comm)].append(seconds)
            self._modeled_bytes[(op, purpose, comm)].append(per_rank)

    def sent_bytes(self, rank: int, op: str, purpose: str, nbytes: int) -> None:
        with self._lock:
            self.sent[rank] += nbytes
            self._sent_by[(op, purpose)] += nbytes

    def received_bytes(self, rank: int, op: str, purpose: str, nbytes: int) -> None:
        with self._lock:
            self.received[rank] += nbytes
            self._received_by[(op, purpose)] += nbytes

    def count(self, op: str, purpose: str | None = None) -> int:
        return sum(v for (o, pu), v in self._counts.items() if o == op and (purpose is None or pu == purpose))

    def bytes_sent(self, op: str | None = None, purpose: str | None = None) -> int:
        return sum(v for (o, pu), v in self._sent_by.items() if (op is None or o == op) and (purpose is None or pu == purpose))

    def bytes_received(self, op: str | None = None, purpose: str | None = None) -> int:
        return sum(
            v for (o, pu), v in self._received_by.items() if (op is None or o == op) and (purpose is None or pu == purpose)
        )

    def modeled_seconds(self, op: str | None = None, purpose: str | None = None) -> float:
        total = 0.0
        for key in sorted(self._modeled):
            o, pu, _ = key
            if (op is None or o == op) and (purpose is None or pu == purpose):
                total += math.fsum(self._modeled[key])
        return total

    def modeled_bytes_per_rank(self, op: str, purpose: str | None = None) -> float:
        """Modeled per-rank bytes of all invocations, summed per communicator and averaged over communicators."""
        per_comm: dict[str, float] = defaultdict(float)
        for (o, pu, comm), vals in sorted(self._modeled_bytes.items()):
            if o == op and (purpose is None or pu == purpose):
                per_comm[comm] += math.fsum(vals)
        return math.fsum(per_comm.values()) / len(per_comm) if per_comm else 0.0

    def to_dict(self) -> dict:
        keys = sorted(set(self._counts) | set(self._sent_by))
        collectives = []
        for op, purpose in keys:
            collectives.append(
                {
                    "op": op,
                    "purpose": purpose,
                    "count": self._counts.get((op, purpose), 0),
                    "payload_bytes": self._payload.get((op, purpose), 0),
                    "bytes_sent": self._sent_by.get((op, purpose), 0),
                    "bytes_received": self._received_by.get((op, purpose), 0),
                    "modeled_seconds": self.modeled_seconds(op, purpose),
                }
            )
        return {
            "collectives": collectives,
            "bytes_sent_per_rank": list(self.sent),
            "bytes_received_per_rank": list(self.received),
            "modeled_seconds": self.modeled_seconds(),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, CommStats):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def payload_nbytes(obj: Any) -> int:
    """Bytes a payload occupies on the wire: array data only."""
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, (tuple, list)):
        return sum(payload_nbytes(o) for o in obj)
    return 0


def _copy(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, tuple):
        return tuple(_copy(o) for o in obj)
    if isinstance(obj, list):
        return [_copy(o) for o in obj]
    return obj


class _Fabric:
    def __init__(self, timeout: float):
        self.timeout = timeout
        self._lock = threading.Lock()
        self._queues: dict[tuple[str, int, int], queue.Queue] = {}
        self.closed = threading.Event()

    def channel(self, comm: str, src: int, dst: int) -> queue.Queue:
        key = (comm, src, dst)
        with self._lock:
            q = self._queues.get(key)
            if q is None:
                q = self._queues[key] = queue.Queue()
            return q

    def close(self) -> None:
        self.closed.set()
        with self._lock:
            for q in self._queues.values():
                q.put(_CLOSED)


class Communicator:
    """One rank's view of a set of ranks that issue collectives together."""

    def __init__(self, group: "CollectiveGroup", name: str, members: Sequence[int], rank: int):
        if rank not in members:
            raise ValueError(f"rank {rank} is not a member of {name}")
        self.group = group
        self.name = name
        self.members = list(members)
        self.rank = rank
        self.index = self.members.index(rank)

    @property
    def size(self) -> int:
        return len(self.members)

    def _send(self, dst: int, obj: Any, op: str, purpose: str) -> None:
        fabric = self.group._fabric
        if fabric.closed.is_set():
            raise WorkerFailure(self.rank, "channel closed")
        nbytes = payload_nbytes(obj)
        self.group.stats.sent_bytes(self.rank, op, purpose, nbytes)
        fabric.channel(self.name, self.rank, self.members[dst]).put((_copy(obj), nbytes, op, purpose))

    def _recv(self, src: int, op: str, purpose: str) -> Any:
        fabric = self.group._fabric
        src_rank = self.members[src]
        try:
            item = fabric.channel(self.name, src_rank, self.rank).get(timeout=fabric.timeout)
        except queue.Empty:
            raise WorkerFailure(src_rank, f"no message from rank {src_rank} within {fabric.timeout} s") from None
        if item is _CLOSED:
            raise WorkerFailure(src_rank, "channel closed")
        obj, nbytes, sop, spurpose = item
        if (sop, spurpose) != (op, purpose):
            raise WorkerFailure(src_rank, f"collective mismatch: got {sop}/{spurpose}, expected {op}/{purpose}")
        self.group.stats.received_bytes(self.rank, op, purpose, nbytes)
        return obj

    def _record(self, op: str, purpose: str, payload: int) -> None:
        if self.index == 0:
            self.group.stats.invocation(op, purpose, self.name, self.size, payload, self.group.model)

    def broadcast(self, obj: Any = None, root: int = 0, purpose: str = "data") -> Any:
        """Naive broadcast: the root sends its payload to every other member."""
        if self.index == root:
            self._record("broadcast", purpose, payload_nbytes(obj))
            for j in range(self.size):
                if j != root:
                    self._send(j, obj, "broadcast", purpose)
            return obj
        out = self._recv(root, "broadcast", purpose)
        if self.index == 0:
            self._record("broadcast", purpose, payload_nbytes(out))
        return out

    def all_gather(self, x: np.ndarray, purpose: str = "data") -> list[np.ndarray]:
        """Every member's array, in rank order."""
        x = np.asarray(x)
        self._record("all_gather", purpose, x.nbytes)
        for j in range(self.size):
            if j != self.index:
                self._send(j, x, "all_gather", purpose)
        return [x if j == self.index else self._recv(j, "all_gather", purpose) for j in range(self.size)]

    def _reduce_chunks(self, chunks: list[np.ndarray], op: str, purpose: str) -> np.ndarray:
        """Send ``chunks[j]`` to member ``j`` and sum what arrives in rank order."""
        for j in range(self.size):
            if j != self.index:
                self._send(j, chunks[j], op, purpose)
        parts = [chunks[self.index] if j == self.index else self._recv(j, op, purpose) for j in range(self.size)]
        mine = chunks[self.index]
        for j, part in enumerate(parts):
            if part.shape != mine.shape:
                raise ValueError(f"{op}: rank {self.members[j]} sent shape {part.shape}, rank {self.rank} holds {mine.shape}")
        acc = parts[0].copy()
        for part in parts[1:]:
            acc += part
        return acc

    def reduce_scatter_sum(self, x: np.ndarray, axis: int = 0, purpose: str = "data") -> np.ndarray:
        """Shard ``j`` (balanced split of ``axis``) of the elementwise sum lands on member ``j``."""
        x = np.asarray(x)
        self._record("reduce_scatter", purpose, x.nbytes)
        if self.size == 1:
            return x.copy()
        chunks = np.array_split(x, self.size, axis=axis)
        return self._reduce_chunks([np.ascontiguousarray(c) for c in chunks], "reduce_scatter", purpose)

    def all_reduce_sum(self, x: np.ndarray, purpose: str = "data") -> np.ndarray:
        """Elementwise sum on every member: reduce-scatter then all-gather of flat chunks."""
        x = np.asarray(x)
        self._record("all_reduce", purpose, x.nbytes)
        if self.size == 1:
            return x.copy()
        flat = x.reshape(-1)
        chunks = np.array_split(flat, self.size)
        head = (x.shape, x.dtype.str)
        # shapes are compared before any summing; the metadata carries no array bytes
        shapes = self._exchange_meta(head, purpose)
        if any(s != head for s in shapes):
            raise ValueError(f"all_reduce: shapes differ across ranks: {sorted(set(map(str, shapes)))}")
        mine = self._reduce_chunks([c.copy() for c in chunks], "all_reduce", purpose)
        for j in range(self.size):
            if j != self.index:
                self._send(j, mine, "all_reduce", purpose)
        parts = [mine if j == self.index else self._recv(j, "all_reduce", purpose) for j in range(self.size)]
        return np.concatenate(parts).reshape(x.shape)

    def _exchange_meta(self, meta: Any, purpose: str) -> list[Any]:
        for j in range(self.size):
            if j != self.index:
                self._send(j, meta, "all_reduce", purpose)
        return [meta if j == self.index else self._recv(j, "all_reduce", purpose) for j in range(self.size)]


class CollectiveGroup:
    """``p1`` data-parallel groups of ``p2`` tensor-parallel ranks.

    Global rank ``g * p2 + r`` is local rank ``r`` of group ``g``. Workers
    reach each other through three communicator families: ``world`` (all
    ranks), ``tensor(g)`` (one group) and ``column(r)`` (the ranks with local
    rank ``r`` across groups).
    """

    def __init__(self, p1: int, p2: int = 1, model: CommModel | None = None, timeout: float = 120.0):
        if p1 < 1 or p2 < 1:
            raise PlanningError("p1 and p2 must be at least 1")
        self.p1 = p1
        self.p2 = p2
        self.model = model or CommModel()
        self.stats = CommStats(p1 * p2)
        self._fabric = _Fabric(timeout)

    @property
    def size(self) -> int:
        return self.p1 * self.p2

    def coords(self, rank: int) -> tuple[int, int]:
        return divmod(rank, self.p2)

    def rank_of(self, group_id: int, local_rank: int) -> int:
        return group_id * self.p2 + local_rank

    def world(self, rank: int) -> Communicator:
        return Communicator(self, "world", range(self.size), rank)

    def tensor(self, rank: int) -> Communicator:
        g, _ = self.coords(rank)
        return Communicator(self, f"tensor{g}", [self.rank_of(g, r) for r in range(self.p2)], rank)

    def column(self, rank: int) -> Communicator:
        _, r = self.coords(rank)
        return Communicator(self, f"column{r}", [self.rank_of(g, r) for g in range(self.p1)], rank)

    def close(self) -> None:
        self._fabric.close()

    def run(self, fn: Callable[[int], Any]) -> list[Any]:
        """Run ``fn(rank)`` on every rank concurrently and collect the results.

        The first worker exception closes all channels; it is re-raised as a
        :class:`WorkerFailure` naming that rank.
        """
        results: list[Any] = [None] * self.size
        errors: list[tuple[int, BaseException]] = []
        lock = threading.Lock()

        def target(rank: int) -> None:
            try:
                results[rank] = fn(rank)
            except BaseException as exc:
                with lock:
                    errors.append((rank, exc))
                self.close()

        threads = [threading.Thread(target=target, args=(r,), name=f"worker-{r}", daemon=True) for r in range(self.size)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            # report the root cause, not ranks that only saw a closed channel
            primary = [e for e in errors if not isinstance(e[1], WorkerFailure)] or errors
            rank, exc = primary[0]
            if isinstance(exc, WorkerFailure):
                raise exc
            raise WorkerFailure(rank, f"{type(exc).__name__}: {exc}") from exc
        return results
