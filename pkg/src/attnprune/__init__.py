"""Data-free attention-sublayer pruning toolkit.

Scores every self-attention sublayer of a decoder-only transformer checkpoint
by the Frobenius norm of its query-key product, emits one-shot pruning plans,
and validates the underlying suppression theory on a built-in desk-scale
engine with data-driven baselines and numerical bound checks.
"""

__version__ = "0.1.0"

from .config import ModelConfig, parse_config_spec
from .errors import ContractViolation, FormatError
from .scoring import GateScore, PruningPlan, gate_matrix, gate_norm, plan_one_shot

__all__ = [
    "__version__",
    "ContractViolation",
    "FormatError",
    "ModelConfig",
    "parse_config_spec",
    "GateScore",
    "PruningPlan",
    "gate_matrix",
    "gate_norm",
    "plan_one_shot",
]
