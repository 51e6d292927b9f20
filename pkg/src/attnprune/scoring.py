"""Weight-only attention-sublayer scoring and one-shot pruning plans.

The score of layer l is the Frobenius norm of its query-key product
(the gate matrix) Wq @ Wk^T, computed on raw weights with no data and no
forward passes. Planners turn per-layer scores (weight-based or data-driven)
into an ordered removal decision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor
from .errors import ContractViolation, FormatError

MODE_WHOLE = "whole-matrix"
MODE_PER_HEAD = "per-head"
MODES = (MODE_WHOLE, MODE_PER_HEAD)

UNIT_ATTN = "attention-sublayer"
UNIT_BLOCK = "full-block"
UNITS = (UNIT_ATTN, UNIT_BLOCK)

METHODS = ("gate-norm", "data-driven-attn", "data-driven-block", "random-attn", "random-block")

PLAN_VERSION = "plan/1"


@dataclass(frozen=True)
class GateScore:
    layer: int
    m: float
    mode: str = MODE_WHOLE


@dataclass(frozen=True)
class PruningPlan:
    method: str
    unit: str
    layer_count: int
    removed: tuple[int, ...]
    scores: tuple[float, ...] | None = None
    source_fingerprint: str | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ContractViolation(f"unknown plan method {self.method!r}")
        if self.unit not in UNITS:
            raise ContractViolation(f"unknown plan unit {self.unit!r}")
        if self.layer_count <= 0:
            raise ContractViolation("plan layer_count must be positive")
        if len(set(self.removed)) != len(self.removed):
            raise ContractViolation("plan removes a layer twice")
        for layer in self.removed:
            if not 1 <= layer <= self.layer_count:
                raise ContractViolation(
                    f"plan removes layer {layer} outside [1, {self.layer_count}]"
                )
        if self.scores is not None and len(self.scores) != self.layer_count:
            raise ContractViolation("plan scores must list one value per layer")


def plan_to_json(plan: PruningPlan) -> str:
    doc = {
        "version": PLAN_VERSION,
        "method": plan.method,
        "unit": plan.unit,
        "layer_count": plan.layer_count,
        "removed": list(plan.removed),
        "scores": list(plan.scores) if plan.scores is not None else None,
        "source_fingerprint": plan.source_fingerprint,
        "seed": plan.seed,
    }
    return json.dumps(doc, indent=2) + "\n"


def plan_from_json(text: str) -> PruningPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"plan document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != PLAN_VERSION:
        raise FormatError(f"expected a {PLAN_VERSION!r} document")
    try:
        return PruningPlan(
            method=doc["method"],
            unit=doc["unit"],
            layer_count=doc["layer_count"],
            removed=tuple(doc["removed"]),
            scores=tuple(doc["scores"]) if doc.get("scores") is not None else None,
            source_fingerprint=doc.get("source_fingerprint"),
            seed=doc.get("seed"),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"plan document missing or malformed field: {exc}") from exc


def load_plan(path: str | Path) -> PruningPlan:
    return plan_from_json(Path(path).read_text(encoding="utf-8"))


def gate_matrix(wq: np.ndarray, wk: np.ndarray) -> np.ndarray:
    """Query-key coupling matrix Wq @ Wk^T (math convention, D x D)."""
    wq = tensor.as_matrix(wq, "Wq")
    wk = tensor.as_matrix(wk, "Wk")
    if wq.shape != wk.shape or wq.shape[0] != wq.shape[1]:
        raise ContractViolation(
            f"gate matrix needs equal square inputs, got {wq.shape} and {wk.shape}"
        )
    return np.matmul(wq, wk.T)


def expand_kv_heads(wk: np.ndarray, query_dim: int, heads: int) -> np.ndarray:
    """Replicate grouped key heads so the key matrix matches the query width.

    `wk` is math-convention (D x kv_dim) with head blocks as contiguous column
    slices; query head h reuses key head h // (H / H_kv), mirroring
    inference-time KV-head expansion.
    """
    wk = tensor.as_matrix(wk, "Wk")
    kv_dim = wk.shape[1]
    if kv_dim == query_dim:
        return wk
    if heads is None:
        raise ContractViolation(
            "grouped-query key matrix needs an explicit head count to expand"
        )
    if query_dim % heads != 0:
        raise ContractViolation(f"query width {query_dim} not divisible by {heads} heads")
    head_dim = query_dim // heads
    if kv_dim % head_dim != 0:
        raise ContractViolation(
            f"key width {kv_dim} is not a multiple of the per-head width {head_dim}"
        )
    kv_heads = kv_dim // head_dim
    if heads % kv_heads != 0:
        raise ContractViolation(
            f"{heads} query heads cannot be grouped over {kv_heads} key heads"
        )
    group = heads // kv_heads
    blocks = [wk[:, (h // group) * head_dim : (h // group + 1) * head_dim] for h in range(heads)]
    return np.concatenate(blocks, axis=1)


def gate_norm(
    wq: np.ndarray,
    wk: np.ndarray,
    mode: str = MODE_WHOLE,
    heads: int | None = None,
    layer: int = 0,
) -> GateScore:
    """Gate-norm of one attention sublayer.

    Whole-matrix mode is |Wq Wk^T|_F over the full D x D product; per-head
    mode takes sqrt of the summed squared norms of the per-head products,
    with heads as contiguous column slices of width D/H.
    """
    if mode not in MODES:
        raise ContractViolation(f"unknown score mode {mode!r}")
    if mode == MODE_WHOLE:
        value = tensor.frobenius_norm(gate_matrix(wq, wk))
        return GateScore(layer=layer, m=value, mode=mode)
    if heads is None or heads <= 0:
        raise ContractViolation("per-head mode requires a positive head count")
    wq = tensor.as_matrix(wq, "Wq")
    wk = tensor.as_matrix(wk, "Wk")
    if wq.shape != wk.shape or wq.shape[0] != wq.shape[1]:
        raise ContractViolation(
            f"gate norm needs equal square inputs, got {wq.shape} and {wk.shape}"
        )
    dim = wq.shape[0]
    if dim % heads != 0:
        raise ContractViolation(f"width {dim} not divisible by head count {heads}")
    head_dim = dim // heads
    total = 0.0
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        norm = tensor.frobenius_norm(np.matmul(wq[:, cols], wk[:, cols].T))
        total += norm * norm
    return GateScore(layer=layer, m=float(np.sqrt(total)), mode=mode)


def score_checkpoint(
    source: BinaryIO,
    index: ckpt.CheckpointIndex,
    layer_map: ckpt.LayerTensorMap,
    mode: str = MODE_WHOLE,
    heads: int | None = None,
) -> list[GateScore]:
    """Score every layer of a checkpoint, streaming one layer's Q/K at a time.

    Layer l's decoded tensors are released before layer l+1 is read, keeping
    peak memory at a fixed multiple of one Q/K pair regardless of depth.
    """
    scores: list[GateScore] = []
    for layer in range(1, layer_map.layer_count + 1):
        roles = layer_map.layers[layer]
        try:
            stored_q = ckpt.read_tensor(index, roles.q, source)
            stored_k = ckpt.read_tensor(index, roles.k, source)
            wq = stored_q.T  # stored (out, in) -> math convention view
            wk = expand_kv_heads(stored_k.T, wq.shape[1], heads) if stored_k.shape[0] != stored_q.shape[0] else stored_k.T
            scores.append(gate_norm(wq, wk, mode=mode, heads=heads, layer=layer))
        except (ContractViolation, FormatError) as exc:
            raise type(exc)(f"layer {layer}: {exc}") from exc
        del stored_q, stored_k, wq, wk
    return scores


def score_checkpoint_file(
    path: str | Path,
    naming_scheme="llama",
    mode: str = MODE_WHOLE,
    heads: int | None = None,
) -> tuple[list[GateScore], str]:
    """Convenience wrapper: open, map, score, and fingerprint a checkpoint file."""
    index, handle = ckpt.open_checkpoint(path)
    with handle:
        layer_map = ckpt.enumerate_layers(index, naming_scheme)
        scores = score_checkpoint(handle, index, layer_map, mode=mode, heads=heads)
    return scores, ckpt.fingerprint_file(path)


def _ranked_layers(pairs: Sequence[tuple[int, float]]) -> list[int]:
    # ascending score, ties broken by lower layer index
    return [layer for layer, _ in sorted(pairs, key=lambda p: (p[1], p[0]))]


def plan_one_shot(
    scores: Sequence[GateScore],
    n: int,
    source_fingerprint: str | None = None,
) -> PruningPlan:
    """One-shot plan: disable the N attention sublayers with the smallest gate-norm."""
    layer_count = len(scores)
    if not 0 <= n <= layer_count:
        raise ContractViolation(f"prune count {n} outside [0, {layer_count}]")
    by_layer = sorted(scores, key=lambda s: s.layer)
    if [s.layer for s in by_layer] != list(range(1, layer_count + 1)):
        raise ContractViolation("scores must cover layers 1..L exactly once")
    ranked = _ranked_layers([(s.layer, s.m) for s in by_layer])
    return PruningPlan(
        method="gate-norm",
        unit=UNIT_ATTN,
        layer_count=layer_count,
        removed=tuple(ranked[:n]),
        scores=tuple(s.m for s in by_layer),
        source_fingerprint=source_fingerprint,
    )


def plan_random(layer_count: int, n: int, unit: str = UNIT_ATTN, seed: int = 0) -> PruningPlan:
    """Uniform random removal without replacement (numpy PCG64 seeded generator)."""
    if unit not in UNITS:
        raise ContractViolation(f"unknown plan unit {unit!r}")
    if not 0 <= n <= layer_count:
        raise ContractViolation(f"prune count {n} outside [0, {layer_count}]")
    rng = np.random.default_rng(seed)
    removed = rng.choice(layer_count, size=n, replace=False) + 1
    return PruningPlan(
        method="random-attn" if unit == UNIT_ATTN else "random-block",
        unit=unit,
        layer_count=layer_count,
        removed=tuple(int(v) for v in removed),
        seed=seed,
    )


def plan_from_importance(
    importances: Iterable[tuple[int, float]],
    n: int,
    unit: str = UNIT_ATTN,
    source_fingerprint: str | None = None,
) -> PruningPlan:
    """Data-driven plan: remove the N lowest-importance layers, ties to lower index."""
    if unit not in UNITS:
        raise ContractViolation(f"unknown plan unit {unit!r}")
    pairs = list(importances)
    layers = [layer for layer, _ in pairs]
    if len(set(layers)) != len(layers):
        raise ContractViolation("duplicate layer in importance list")
    layer_count = len(pairs)
    if sorted(layers) != list(range(1, layer_count + 1)):
        raise ContractViolation("importances must cover layers 1..L exactly once")
    if not 0 <= n <= layer_count:
        raise ContractViolation(f"prune count {n} outside [0, {layer_count}]")
    ranked = _ranked_layers(pairs)
    by_layer = dict(pairs)
    return PruningPlan(
        method="data-driven-attn" if unit == UNIT_ATTN else "data-driven-block",
        unit=unit,
        layer_count=layer_count,
        removed=tuple(ranked[:n]),
        scores=tuple(float(by_layer[l]) for l in range(1, layer_count + 1)),
        source_fingerprint=source_fingerprint,
    )
