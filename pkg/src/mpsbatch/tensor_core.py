"""Dense complex kernels and software emulation of reduced precision.

Tensors are plain ``numpy`` complex128 arrays throughout. A reduced precision
is represented by *values*: every real and imaginary component is rounded to
the grid of the target format, while the container stays complex128. This
keeps the kernels simple and makes every rounding step explicit and testable.

Supported formats:

======  ==================  =====================================
tag     significand bits    exponent range
======  ==================  =====================================
F64     53                  IEEE binary64 (no rounding applied)
F32     24                  IEEE binary32
TF32    11 (10 explicit)    binary32 exponent range
F16     11 (10 explicit)    IEEE binary16
======  ==================  =====================================
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Precision",
    "Scaling",
    "PrecisionPolicy",
    "DimensionError",
    "NumericError",
    "round_to",
    "round_significand",
    "contract_site",
    "per_sample_max_scale",
    "global_max_scale",
    "contraction_macs",
]


class DimensionError(ValueError):
    """Raised when tensor extents do not line up."""


class NumericError(ArithmeticError):
    """Raised when a float64 kernel receives non-finite input."""


class Precision(str, enum.Enum):
    F64 = "F64"
    F32 = "F32"
    TF32 = "TF32"
    F16 = "F16"

    @classmethod
    def parse(cls, value: "Precision | str") -> "Precision":
        if isinstance(value, Precision):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            choices = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown precision {value!r}; expected one of {choices}") from None


class Scaling(str, enum.Enum):
    NONE = "none"
    GLOBAL_MAX = "global-max"
    PER_SAMPLE_MAX = "per-sample-max"

    @classmethod
    def parse(cls, value: "Scaling | str") -> "Scaling":
        if isinstance(value, Scaling):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown scaling mode {value!r}; expected one of {choices}") from None


# (significand bits including the implicit one, minimum normal exponent, maximum exponent)
_FORMATS = {
    Precision.F32: (24, -126, 127),
    Precision.TF32: (11, -126, 127),
    Precision.F16: (11, -14, 15),
}

STORAGE_PRECISIONS = (Precision.F64, Precision.F32, Precision.F16)


@dataclass(frozen=True)
class PrecisionPolicy:
    """Precision selectors for one sampling run.

    ``compute`` controls the rounding applied around each contraction,
    ``storage`` the format of MPS tensors and of the left environment kept
    between sites, and ``scaling`` the renormalisation of the unmeasured
    environment before measurement.
    """

    compute: Precision = Precision.F64
    storage: Precision = Precision.F64
    scaling: Scaling = Scaling.NONE

    def __post_init__(self):
        object.__setattr__(self, "compute", Precision.parse(self.compute))
        object.__setattr__(self, "storage", Precision.parse(self.storage))
        object.__setattr__(self, "scaling", Scaling.parse(self.scaling))
        if self.storage not in STORAGE_PRECISIONS:
            raise ValueError(f"storage precision must be one of F64, F32, F16, got {self.storage.value}")

    @property
    def accumulator(self) -> Precision:
        """Format that contraction outputs are rounded to."""
        if self.compute in (Precision.TF32, Precision.F32):
            return Precision.F32
        return self.compute

    def to_dict(self) -> dict:
        return {"compute": self.compute.value, "storage": self.storage.value, "scaling": self.scaling.value}


def round_significand(x, bits: int, emin: int, emax: int) -> np.ndarray:
    """Round float64 values to nearest-even on a binary grid.

    The grid has ``bits`` significand bits (implicit bit included), gradual
    underflow below ``2**emin`` and overflow to infinity above the largest
    finite value ``(2 - 2**(1 - bits)) * 2**emax``.
    """
    x = np.asarray(x, dtype=np.float64)
    _, e = np.frexp(x)
    # frexp gives x = m * 2**e with 0.5 <= |m| < 1, so the leading bit sits at e - 1
    lead = np.maximum(e.astype(np.int64) - 1, emin)
    quantum = np.ldexp(1.0, lead - (bits - 1))
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.round(x / quantum) * quantum
    largest = (2.0 - 2.0 ** (1 - bits)) * 2.0**emax
    out = np.where(np.abs(out) > largest, np.copysign(np.inf, x), out)
    return np.where(np.isfinite(x), out, x)


def _round_real(x: np.ndarray, target: Precision) -> np.ndarray:
    if target is Precision.F64:
        return x
    if target is Precision.F32:
        with np.errstate(over="ignore"):
            return x.astype(np.float32).astype(np.float64)
    if target is Precision.F16:
        with np.errstate(over="ignore"):
            return x.astype(np.float16).astype(np.float64)
    bits, emin, emax = _FORMATS[target]
    return round_significand(x, bits, emin, emax)


def round_to(t, target: Precision | str) -> np.ndarray:
    """Round every real and imaginary component to ``target``.

    Real input stays real; complex input is rounded componentwise and
    returned as complex128.
    """
    target = Precision.parse(target)
    t = np.asarray(t)
    if target is Precision.F64:
        return t
    if np.iscomplexobj(t):
        t = t.astype(np.complex128, copy=False)
        out = np.empty_like(t)
        out.real = _round_real(t.real, target)
        out.imag = _round_real(t.imag, target)
        return out
    return _round_real(t.astype(np.float64, copy=False), target)


def contraction_macs(batch: int, chi_left: int, chi_right: int, d: int) -> int:
    """Complex multiply-accumulates of one site contraction."""
    return batch * chi_left * chi_right * d


def contract_site(env, gamma, policy: PrecisionPolicy | None = None) -> np.ndarray:
    """Contract a batch of left environments with one site tensor.

    ``out[n, r, k] = sum_l env[n, l] * gamma[l, r, k]``. Under reduced
    compute precisions the operands are rounded to the compute format, the
    products are accumulated in float64 and the result is rounded to the
    accumulator format (F32 for TF32 and F32, F16 for F16).
    """
    policy = policy or PrecisionPolicy()
    env = np.asarray(env)
    gamma = np.asarray(gamma)
    if env.ndim != 2 or gamma.ndim != 3:
        raise DimensionError(f"expected env (N, chi) and gamma (chiL, chiR, d), got {env.shape} and {gamma.shape}")
    n, chi_l = env.shape
    if gamma.shape[0] != chi_l:
        raise DimensionError(f"inner extent mismatch: env has {chi_l}, gamma has {gamma.shape[0]}")
    if n < 1:
        raise DimensionError("batch must contain at least one sample")
    _, chi_r, d = gamma.shape
    if policy.compute is Precision.F64:
        if not (np.isfinite(env).all() and np.isfinite(gamma).all()):
            raise NumericError("non-finite value in float64 contraction input")
        return (env @ gamma.reshape(chi_l, chi_r * d)).reshape(n, chi_r, d)
    a = round_to(env, policy.compute)
    b = round_to(gamma, policy.compute)
    with np.errstate(invalid="ignore", over="ignore"):
        out = (a @ b.reshape(chi_l, chi_r * d)).reshape(n, chi_r, d)
    return round_to(out, policy.accumulator)


def _component_max(t: np.ndarray) -> np.ndarray:
    flat = t.reshape(t.shape[0], -1)
    if np.iscomplexobj(flat):
        return np.maximum(np.abs(flat.real), np.abs(flat.imag)).max(axis=1)
    return np.abs(flat).max(axis=1)


def per_sample_max_scale(env) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Divide each sample row by its largest real or imaginary magnitude.

    Returns ``(scaled, scales, dead)``. Rows without a nonzero entry keep a
    scale of 1 and are flagged in ``dead``.
    """
    env = np.asarray(env)
    if env.ndim < 2:
        raise DimensionError(f"expected a batch on the first axis, got shape {env.shape}")
    scales = _component_max(env)
    dead = ~(scales > 0)
    scales = np.where(dead, 1.0, scales)
    shape = (-1,) + (1,) * (env.ndim - 1)
    return env / scales.reshape(shape), scales, dead


def global_max_scale(env) -> tuple[np.ndarray, float]:
    """Divide the whole batch by one shared maximum component magnitude."""
    env = np.asarray(env)
    peak = float(_component_max(env).max()) if env.size else 0.0
    if not peak > 0:
        return env, 1.0
    return env / peak, peak
