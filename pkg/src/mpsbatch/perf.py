"""Analytic time, memory and overhead models for batched MPS sampling.

All functions are pure. Times are seconds, bandwidths bytes per second.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

__all__ = [
    "PerfParams",
    "SlopeModel",
    "BYTES_PER_COMPLEX",
    "MIN_SUBNORMAL",
    "MIN_SUBNORMAL_EXP",
    "model_parallel_time",
    "data_parallel_time",
    "data_parallel_advantage",
    "memory_demand",
    "max_macro_batch",
    "ccr",
    "CcrResult",
    "tensor_parallel_overhead",
    "comm_bytes",
    "choose_scheme",
    "overlap_threshold",
    "overlap_relief",
    "slope_from_truncation",
    "predict_underflow_site",
    "load_params",
    "evaluate_all",
]

BYTES_PER_COMPLEX = {"F64": 16, "F32": 8, "TF32": 8, "F16": 4}

# binary exponent of the smallest positive subnormal of each format
MIN_SUBNORMAL_EXP = {"F64": -1074, "F32": -149, "TF32": -149, "F16": -24}
MIN_SUBNORMAL = {k: 2.0**e for k, e in MIN_SUBNORMAL_EXP.items()}


@dataclass
class PerfParams:
    N: int = 1
    M: int = 1
    chi: int = 1
    d: int = 1
    N1: int = 1
    N2: int = 1
    p: int = 1
    p1: int = 1
    p2: int = 1
    T_read: float = 0.0
    T_comm: float = 0.0
    T_measure: float = 0.0
    T_site: float | None = None
    site_times: list[float] = field(default_factory=list)
    comm_times: list[float] = field(default_factory=list)
    B: float | None = None
    B_a: float | None = None
    B_r: float | None = None
    read_bandwidth: float | None = None
    flop_rate: float | None = None
    flops_per_mac: float = 8.0
    bytes_per_element: float = 8.0
    comm_bound_threshold: float | None = None
    k: float | None = None
    mu0: float | None = None

    def __post_init__(self):
        for name in ("N", "M", "chi", "d", "N1", "N2", "p", "p1", "p2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("T_read", "T_comm", "T_measure"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if any(t < 0 for t in self.site_times) or any(t < 0 for t in self.comm_times):
            raise ValueError("per-site times must be nonnegative")

    @property
    def n1(self) -> int:
        return math.ceil(self.N / self.N1)

    def per_site(self) -> tuple[list[float], list[float]]:
        if not self.site_times:
            raise ValueError("per-site times (site_times) are required")
        comm = self.comm_times or [0.0] * len(self.site_times)
        if len(comm) != len(self.site_times):
            raise ValueError("site_times and comm_times must have the same length")
        return list(self.site_times), list(comm)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["n1"] = self.n1
        return out


def model_parallel_time(params: PerfParams) -> float:
    """One process per site, macro batches pipelined along the chain."""
    t, c = params.per_site()
    return params.T_read + params.n1 * max(t) + sum(ti + ci for ti, ci in zip(t, c))


def data_parallel_time(params: PerfParams) -> float:
    """Every process walks the whole chain for its share of macro batches."""
    if params.p < 1:
        raise ValueError("p must be at least 1")
    t, _ = params.per_site()
    return params.T_read + params.T_comm + params.n1 / params.p * sum(t)


def data_parallel_advantage(params: PerfParams) -> float:
    """Closed-form gap between the two models at ``p = M``.

    ``sum_{i>=1} (T_i + Tc_i) + T_0 + n1 (max T - mean T)``. It equals
    ``model_parallel_time - data_parallel_time`` evaluated at ``p = M``
    when the broadcast term ``T_comm`` of the data-parallel model is the
    first site's communication time.
    """
    t, c = params.per_site()
    mean = sum(t) / len(t)
    return sum(ti + ci for ti, ci in zip(t[1:], c[1:])) + t[0] + params.n1 * (max(t) - mean)


def memory_demand(params: PerfParams, precision: str = "F64", env_precision: str | None = None) -> float:
    """``(N1 chi d) * bytes(env) + (chi^2 d) * bytes(precision)``.

    ``env_precision`` stores the left environment and intermediate tensor at
    a different width (F16 storage); by default it equals ``precision``.
    """
    env_bytes = BYTES_PER_COMPLEX[(env_precision or precision).upper()]
    gamma_bytes = BYTES_PER_COMPLEX[precision.upper()]
    return params.N1 * params.chi * params.d * env_bytes + params.chi**2 * params.d * gamma_bytes


def max_macro_batch(budget: float, chi: int, d: int, precision: str = "F64", env_precision: str | None = None) -> int:
    """Largest N1 whose memory demand fits in ``budget`` bytes."""
    env_bytes = BYTES_PER_COMPLEX[(env_precision or precision).upper()]
    gamma_bytes = BYTES_PER_COMPLEX[precision.upper()]
    free = budget - chi**2 * d * gamma_bytes
    return max(0, int(free // (chi * d * env_bytes)))


@dataclass(frozen=True)
class CcrResult:
    value: float
    threshold: float | None

    @property
    def communication_bound(self) -> bool | None:
        return None if self.threshold is None else self.value < self.threshold


def ccr(chi: int, d: int, flops_per_mac: float = 8.0, bytes_per_element: float = 8.0, threshold: float | None = None) -> CcrResult:
    """Flops per communicated byte of one pipelined site step: ``chi d fpm / bpe``."""
    return CcrResult(chi * d * flops_per_mac / bytes_per_element, threshold)


def comm_bytes(params: PerfParams, scheme: str, variant: str = "literal") -> float:
    """Bytes one micro batch exchanges per site.

    ``variant="literal"`` counts the unmeasured environment
    ``N2 chi d`` elements for both schemes. ``variant="measured"`` drops
    the factor ``d`` for the single-site scheme, as if measurement happened
    before the exchange.
    """
    if variant not in ("literal", "measured"):
        raise ValueError("variant must be 'literal' or 'measured'")
    elements = params.N2 * params.chi * params.d
    if scheme == "single-site" and variant == "measured":
        elements = params.N2 * params.chi
    return elements * params.bytes_per_element


def _eta(scheme: str, p2: int) -> int:
    if scheme == "double-site":
        return 1
    if scheme == "single-site":
        return p2
    raise ValueError(f"unknown scheme {scheme!r}")


def tensor_parallel_overhead(
    params: PerfParams,
    scheme: str,
    bandwidth: float | None = None,
    comm_time: float | None = None,
    variant: str = "literal",
) -> tuple[float, bool]:
    """``(comm + eta T_measure) / T_site`` and whether it stays under 10%.

    The communication time is ``comm_time`` when given, otherwise
    :func:`comm_bytes` over ``bandwidth`` (default: ``B_a`` for double-site,
    ``B_r`` for single-site, then ``B``). An infinite bandwidth gives zero.
    """
    if params.T_site is None or params.T_site <= 0:
        raise ValueError("T_site must be a positive site time")
    eta = _eta(scheme, params.p2)
    if comm_time is None:
        bw = bandwidth
        if bw is None:
            bw = params.B_a if scheme == "double-site" else params.B_r
        if bw is None:
            bw = params.B
        if bw is None:
            raise ValueError("a bandwidth or an explicit comm_time is required")
        comm_time = 0.0 if math.isinf(bw) else comm_bytes(params, scheme, variant) / bw
    overhead = (comm_time + eta * params.T_measure) / params.T_site
    return overhead, overhead < 0.10


def choose_scheme(params: PerfParams, variant: str = "literal") -> tuple[str, dict]:
    """Pick the scheme with the lower overhead; ties go to double-site.

    Double-site exchanges through AllReduce (``B_a``), single-site through
    ReduceScatter (``B_r``).
    """
    if params.B_a is None or params.B_r is None:
        raise ValueError("choose_scheme needs both B_a and B_r")
    o_d, _ = tensor_parallel_overhead(params, "double-site", params.B_a, variant=variant)
    o_s, _ = tensor_parallel_overhead(params, "single-site", params.B_r, variant=variant)
    choice = "double-site" if o_d <= o_s else "single-site"
    return choice, {"double-site": o_d, "single-site": o_s}


def overlap_threshold(params: PerfParams, storage: str | None = None) -> int:
    """Smallest N1 for which one site's compute time covers its read time.

    Compute is ``N1 chi^2 d * fpm / flop_rate``, reading is
    ``chi^2 d * bpe / read_bandwidth``, so ``N1 >= bpe flop_rate / (fpm read_bw)``.
    ``storage`` overrides the element width of ``Γ`` on disk (F16 halves it).
    """
    if not params.flop_rate or not params.read_bandwidth:
        raise ValueError("flop_rate and read_bandwidth are required")
    bpe = BYTES_PER_COMPLEX[storage.upper()] if storage else params.bytes_per_element
    ratio = bpe * params.flop_rate / (params.flops_per_mac * params.read_bandwidth)
    # guard against ratios like 31200.000000000004
    return max(1, math.ceil(round(ratio, 9)))


def overlap_relief(env_halved: bool = True, gamma_halved: bool = True) -> float:
    """Factor by which reduced storage eases the overlap condition.

    Halving the environment doubles the affordable macro batch (compute per
    site x2) and halving ``Γ`` halves the read time, so together the
    condition ``2 T_compute > T_io / 2`` is four times easier.
    """
    return (2.0 if env_halved else 1.0) * (2.0 if gamma_halved else 1.0)


@dataclass(frozen=True)
class SlopeModel:
    """First-order marginal slope under truncation.

    ``k = 1 - (eta - eta') / (eta - 1/p0)`` with ``eta - eta' = c * epsilon``.
    When ``eta p0 < 1`` the denominator is negative, so a truncation that
    lowers the initial 0-state probability (``eta' < eta``, ``c > 0``) gives ``k > 1``.
    """

    eta0: float
    p0: float
    epsilon: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        if not 0 < self.p0 <= 1:
            raise ValueError("p0 must lie in (0, 1]")
        if self.eta0 == 1 / self.p0:
            raise ValueError("eta0 == 1/p0 makes the slope undefined")

    @property
    def k_slope(self) -> float:
        return slope_from_truncation(self)[0]


def slope_from_truncation(model: SlopeModel, delta_eta: float | None = None) -> tuple[float, float]:
    """Return ``(k, dk/d epsilon)``; ``delta_eta`` overrides ``c * epsilon``."""
    denom = model.eta0 - 1.0 / model.p0
    delta = model.c * model.epsilon if delta_eta is None else delta_eta
    return 1.0 - delta / denom, -model.c / denom


def predict_underflow_site(mu0: float, k: float, precision: str = "F32") -> int:
    """First site ``i`` at which ``mu0 10**(-i k)`` rounds to zero.

    A value rounds to zero below half the smallest subnormal. The test is
    done in log10 space so the F64 limit, itself below the double range, works.
    """
    if mu0 <= 0 or k <= 0:
        raise ValueError("mu0 and k must be positive")
    log_limit = (MIN_SUBNORMAL_EXP[precision.upper()] - 1) * math.log10(2.0)
    # smallest integer i with log10(mu0) - i k < log_limit
    return max(0, math.floor((math.log10(mu0) - log_limit) / k) + 1)


_LIST_FIELDS = {"site_times", "comm_times"}


def load_params(path: str | Path) -> PerfParams:
    """Parse a ``key=value`` file (``#`` comments, lists comma separated)."""
    types = {f.name: f.type for f in fields(PerfParams)}
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown parameter {key!r}")
        if key in _LIST_FIELDS:
            values[key] = [float(v) for v in val.split(",") if v.strip()]
        elif types[key] == "int":
            values[key] = int(float(val))
        else:
            values[key] = float(val)
    return PerfParams(**values)


def evaluate_all(params: PerfParams) -> dict:
    """Every model output computable from ``params``; missing inputs are skipped."""
    out: dict = {"params": params.to_dict()}
    c = ccr(params.chi, params.d, params.flops_per_mac, params.bytes_per_element, params.comm_bound_threshold)
    out["ccr"] = {"value": c.value, "threshold": c.threshold, "communication_bound": c.communication_bound}
    out["memory_bytes"] = {
        "F64": memory_demand(params, "F64"),
        "F32": memory_demand(params, "F32"),
        "F32_env_F16": memory_demand(params, "F32", "F16"),
    }
    if params.site_times:
        out["model_parallel_time"] = model_parallel_time(params)
        out["data_parallel_time"] = data_parallel_time(params)
        out["data_parallel_advantage"] = data_parallel_advantage(params)
    if params.T_site:
        for scheme in ("double-site", "single-site"):
            try:
                if params.T_comm:
                    o, ok = tensor_parallel_overhead(params, scheme, comm_time=params.T_comm)
                else:
                    o, ok = tensor_parallel_overhead(params, scheme)
            except ValueError:
                continue
            out.setdefault("overhead", {})[scheme] = {"ratio": o, "effective": ok}
        if params.B_a and params.B_r:
            choice, both = choose_scheme(params)
            out["choose_scheme"] = {"choice": choice, "overheads": both}
    if params.flop_rate and params.read_bandwidth:
        out["overlap_threshold"] = {
            "N1": overlap_threshold(params),
            "N1_F16": overlap_threshold(params, "F16"),
            "relief_factor": overlap_relief(),
        }
    if params.k and params.mu0:
        out["underflow_site"] = {p: predict_underflow_site(params.mu0, params.k, p) for p in ("F16", "F32", "F64")}
    return out
