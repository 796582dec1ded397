"""Operator-norm duality maps, the Scion optimizer and tools for studying norm-based scaling rules."""

from .linalg import make_rng, rms_vector_norm, spectral_norm, svd_oracle
from .lmo import DEFAULT_NS, NewtonSchulzConfig, batched_lmo, dual, newton_schulz
from .norms import NormKind, induced_norm_bruteforce, op_norm
from .scion import LayerGroup, ParamGroup, ScheduleSpec, ScionState, lr_at, scion_step

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_NS", "LayerGroup", "NewtonSchulzConfig", "NormKind", "ParamGroup", "ScheduleSpec",
    "ScionState", "batched_lmo", "dual", "induced_norm_bruteforce", "lr_at", "make_rng",
    "newton_schulz", "op_norm", "rms_vector_norm", "scion_step", "spectral_norm", "svd_oracle",
]
