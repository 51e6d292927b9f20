"""Toy decoder-only transformer description shared by synthesis, loading, and the engine."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import ContractViolation

NORM_KINDS = ("rmsnorm", "layernorm")
ACT_KINDS = ("gelu", "silu")


@dataclass(frozen=True)
class ModelConfig:
    layers: int          # L
    dim: int             # hidden width D
    heads: int           # attention heads H
    mlp_dim: int         # MLP hidden width F
    vocab: int           # V
    max_seq: int = 512   # longest supported sequence
    norm_kind: str = "rmsnorm"
    act_kind: str = "gelu"
    causal: bool = True
    rope: bool = False

    def __post_init__(self) -> None:
        for field in ("layers", "dim", "heads", "mlp_dim", "vocab", "max_seq"):
            value = getattr(self, field)
            if not isinstance(value, int) or value <= 0:
                raise ContractViolation(f"config {field} must be a positive integer, got {value!r}")
        if self.dim % self.heads != 0:
            raise ContractViolation(
                f"hidden dim {self.dim} not divisible by head count {self.heads}"
            )
        if self.norm_kind not in NORM_KINDS:
            raise ContractViolation(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.act_kind not in ACT_KINDS:
            raise ContractViolation(f"act_kind must be one of {ACT_KINDS}, got {self.act_kind!r}")
        if self.rope and (self.dim // self.heads) % 2 != 0:
            raise ContractViolation("rotary positions require an even per-head width")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


_SPEC_KEYS = {
    "L": "layers",
    "D": "dim",
    "H": "heads",
    "F": "mlp_dim",
    "V": "vocab",
    "S": "max_seq",
}
_BOOL_KEYS = {"causal", "rope"}


def parse_config_spec(spec: str) -> ModelConfig:
    """Build a ModelConfig from a JSON file path or an inline 'L=8,D=64,...' spec.

    Inline keys: L, D, H, F, V, S (max sequence), norm (rmsnorm|layernorm),
    act (gelu|silu), causal, rope.
    """
    spec = spec.strip()
    if "=" not in spec:
        path = Path(spec)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractViolation(f"cannot read config {spec!r}: {exc}") from exc
        return ModelConfig(**payload)

    kwargs: dict = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        key, _, value = part.partition("=")
        key = key.strip()
        value = value.strip()
        if key in _SPEC_KEYS:
            kwargs[_SPEC_KEYS[key]] = int(value)
        elif key == "norm":
            kwargs["norm_kind"] = value.lower()
        elif key == "act":
            kwargs["act_kind"] = value.lower()
        elif key in _BOOL_KEYS:
            kwargs[key] = value.lower() in ("1", "true", "yes")
        else:
            raise ContractViolation(f"unknown config key {key!r} in spec {spec!r}")
    missing = [k for k, v in _SPEC_KEYS.items() if v not in kwargs and v != "max_seq"]
    if missing:
        raise ContractViolation(f"config spec missing keys: {', '.join(missing)}")
    return ModelConfig(**kwargs)
