"""Batched MPS sampling with simulated data- and tensor-parallel execution."""

from .mps import BondSchedule, MpsState, attenuated_chain, product_state, random_mps
from .sampler import BatchPlan, SampleBatch, decay_probe, measure, sample_batch
from .tensor_core import Precision, PrecisionPolicy, Scaling, contract_site, per_sample_max_scale, round_to

__version__ = "0.1.0"

__all__ = [
    "BatchPlan",
    "BondSchedule",
    "MpsState",
    "Precision",
    "PrecisionPolicy",
    "SampleBatch",
    "Scaling",
    "attenuated_chain",
    "contract_site",
    "decay_probe",
    "measure",
    "per_sample_max_scale",
    "product_state",
    "random_mps",
    "round_to",
    "sample_batch",
]
