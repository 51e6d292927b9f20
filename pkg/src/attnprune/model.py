"""Desk-scale decoder-only transformer engine with activation capture.

Weights live in the right-multiplication convention: activations are rows,
projections multiply on the right (Q = Z Wq). Heads are contiguous column
slices of width D/H; per-head outputs are multiplied by the matching row
block of Wo and summed, which equals concat-then-project. Forward passes are
pure float32 numpy; a forward optionally records every per-layer intermediate
needed by the data-driven importance measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor
from .config import ModelConfig
from .errors import ContractViolation
from .scoring import UNIT_ATTN, UNIT_BLOCK, GateScore, PruningPlan, gate_norm


@dataclass
class BlockWeights:
    wq: np.ndarray            # D x D
    wk: np.ndarray            # D x D
    wv: np.ndarray            # D x D
    wo: np.ndarray            # D x D
    w1: np.ndarray            # D x F
    w2: np.ndarray            # F x D
    attn_norm_gain: np.ndarray
    mlp_norm_gain: np.ndarray
    attn_norm_bias: np.ndarray | None = None
    mlp_norm_bias: np.ndarray | None = None


@dataclass
class Model:
    config: ModelConfig
    embedding: np.ndarray     # V x D, one row per token id
    blocks: list[BlockWeights]
    final_norm_gain: np.ndarray
    final_norm_bias: np.ndarray | None
    lm_head: np.ndarray       # D x V
    source_fingerprint: str | None = None

    def fingerprint(self) -> str:
        """Content hash: the sha256 of this model's canonical F32 serialization.

        Models loaded from a file keep that file's hash instead, so a plan
        scored from the file binds to the loaded model.
        """
        if self.source_fingerprint is not None:
            return self.source_fingerprint
        return ckpt.fingerprint_bytes(
            ckpt.serialize_checkpoint(self.to_stored_tensors(), dtype="F32")
        )

    def to_stored_tensors(self) -> dict[str, np.ndarray]:
        """Weights in on-disk (out_features, in_features) layout, canonical order."""
        scheme = ckpt.LLAMA_SCHEME
        out: dict[str, np.ndarray] = {scheme["embed"]: self.embedding}
        for i, blk in enumerate(self.blocks):
            out[scheme["q"].format(i=i)] = blk.wq.T
            out[scheme["k"].format(i=i)] = blk.wk.T
            out[scheme["v"].format(i=i)] = blk.wv.T
            out[scheme["o"].format(i=i)] = blk.wo.T
            out[scheme["mlp_up"].format(i=i)] = blk.w1.T
            out[scheme["mlp_down"].format(i=i)] = blk.w2.T
            attn_norm, mlp_norm = (p.format(i=i) for p in scheme["norms"])
            out[attn_norm] = blk.attn_norm_gain
            out[mlp_norm] = blk.mlp_norm_gain
            if blk.attn_norm_bias is not None:
                out[attn_norm.replace(".weight", ".bias")] = blk.attn_norm_bias
            if blk.mlp_norm_bias is not None:
                out[mlp_norm.replace(".weight", ".bias")] = blk.mlp_norm_bias
        out[scheme["final_norm"]] = self.final_norm_gain
        if self.final_norm_bias is not None:
            out[scheme["final_norm"].replace(".weight", ".bias")] = self.final_norm_bias
        out[scheme["lm_head"]] = self.lm_head.T
        return out

    def gate_scores(self, mode: str = "whole-matrix") -> list[GateScore]:
        """Gate-norms straight from the in-memory weights."""
        return [
            gate_norm(blk.wq, blk.wk, mode=mode, heads=self.config.heads, layer=i + 1)
            for i, blk in enumerate(self.blocks)
        ]


@dataclass(frozen=True)
class CaptureFlags:
    x: bool = True
    attn_out: bool = True
    y: bool = True
    mlp: bool = True
    logits: bool = True


CAPTURE_ALL = CaptureFlags()
CAPTURE_LOGITS = CaptureFlags(x=False, attn_out=False, y=False, mlp=False, logits=True)


@dataclass
class ForwardTrace:
    flags: CaptureFlags
    x: list[np.ndarray] | None          # L+1 entries: block inputs plus the final stream
    attn_out: list[np.ndarray] | None   # L entries
    y: list[np.ndarray] | None          # L entries
    mlp: list[np.ndarray] | None        # L entries
    logits: np.ndarray | None           # S x V


@dataclass(frozen=True)
class PlanApplication:
    plan: PruningPlan | None
    attn_disabled: tuple[bool, ...]
    block_disabled: tuple[bool, ...]


def make_application(
    plan: PruningPlan | None,
    model: Model | None = None,
    layer_count: int | None = None,
    verify_fingerprint: bool = True,
) -> PlanApplication:
    """Turn a plan into per-layer disable flags, checking it matches the target."""
    if layer_count is None:
        if model is None:
            if plan is None:
                raise ContractViolation("need a model or layer count to build an application")
            layer_count = plan.layer_count
        else:
            layer_count = model.config.layers
    if plan is None:
        off = (False,) * layer_count
        return PlanApplication(plan=None, attn_disabled=off, block_disabled=off)
    if plan.layer_count != layer_count:
        raise ContractViolation(
            f"plan covers {plan.layer_count} layers but the model has {layer_count}"
        )
    if verify_fingerprint and model is not None and plan.source_fingerprint is not None:
        actual = model.fingerprint()
        if actual != plan.source_fingerprint:
            raise ContractViolation(
                "plan was scored from different weights "
                f"(plan {plan.source_fingerprint[:23]}..., model {actual[:23]}...)"
            )
    attn = [False] * layer_count
    block = [False] * layer_count
    for layer in plan.removed:
        if plan.unit == UNIT_ATTN:
            attn[layer - 1] = True
        else:
            block[layer - 1] = True
    return PlanApplication(plan=plan, attn_disabled=tuple(attn), block_disabled=tuple(block))


def normalize_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray | None, kind: str) -> np.ndarray:
    """Row-wise pre-sublayer normalization, kind in {'rmsnorm', 'layernorm'}."""
    if kind == "rmsnorm":
        ms = np.mean(np.square(x, dtype=np.float64), axis=1, keepdims=True)
        return (x / np.sqrt(ms + 1e-6) * gain).astype(np.float32)
    mean = np.mean(x, axis=1, keepdims=True, dtype=np.float64)
    centered = x - mean
    var = np.mean(np.square(centered, dtype=np.float64), axis=1, keepdims=True)
    out = centered / np.sqrt(var + 1e-6) * gain
    if bias is not None:
        out = out + bias
    return out.astype(np.float32)


def rotary_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (S x d_h) for the rotate-half rotary transform, base 10000."""
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    emb = np.concatenate([angles, angles], axis=1)
    return np.cos(emb).astype(np.float32), np.sin(emb).astype(np.float32)


def _apply_rotary(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    rotated = np.concatenate([-x[:, half:], x[:, :half]], axis=1)
    return x * cos + rotated * sin


def attention_forward(z: np.ndarray, block: BlockWeights, config: ModelConfig) -> np.ndarray:
    """Multi-head self-attention over post-norm activations z (S x D)."""
    z = tensor.as_matrix(z, "z")
    seq_len, dim = z.shape
    if dim != config.dim:
        raise ContractViolation(f"activations are {dim}-wide, config says {config.dim}")
    if seq_len > config.max_seq:
        raise ContractViolation(f"sequence length {seq_len} exceeds max {config.max_seq}")
    head_dim = config.head_dim
    scale = 1.0 / math.sqrt(head_dim)
    mask = np.tril(np.ones((seq_len, seq_len), dtype=bool)) if config.causal else None
    if config.rope:
        cos, sin = rotary_tables(seq_len, head_dim)
    out = np.zeros((seq_len, dim), dtype=np.float32)
    for h in range(config.heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        q = z @ block.wq[:, cols]
        k = z @ block.wk[:, cols]
        v = z @ block.wv[:, cols]
        if config.rope:
            q = _apply_rotary(q, cos, sin)
            k = _apply_rotary(k, cos, sin)
        logits = (q @ k.T) * np.float32(scale)
        weights = tensor.row_softmax(logits, mask)
        out += (weights @ v) @ block.wo[cols, :]
    return out


def mlp_forward(y: np.ndarray, block: BlockWeights, config: ModelConfig) -> np.ndarray:
    """Feed-forward sublayer on post-norm activations: act(U W1) W2."""
    hidden = tensor.activation(y @ block.w1, config.act_kind)
    return hidden @ block.w2


def block_forward(
    x: np.ndarray,
    block: BlockWeights,
    config: ModelConfig,
    attn_disabled: bool = False,
    block_disabled: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One block: returns (x_next, attn_out, y, mlp_out).

    Disabling attention skips the whole sublayer (pre-norm included), which
    is arithmetically the same as adding a zero update; disabling the block
    forwards x untouched.
    """
    seq_len = x.shape[0]
    if block_disabled:
        zero = np.zeros_like(x)
        return x, zero, x, zero
    if attn_disabled:
        attn_out = np.zeros_like(x)
        y = x
    else:
        z = normalize_rows(x, block.attn_norm_gain, block.attn_norm_bias, config.norm_kind)
        attn_out = attention_forward(z, block, config)
        y = x + attn_out
    u = normalize_rows(y, block.mlp_norm_gain, block.mlp_norm_bias, config.norm_kind)
    mlp_out = mlp_forward(u, block, config)
    return y + mlp_out, attn_out, y, mlp_out


def model_forward(
    token_ids: Sequence[int] | np.ndarray,
    model: Model,
    application: PlanApplication | None = None,
    capture: CaptureFlags = CAPTURE_ALL,
) -> ForwardTrace:
    """Full forward pass: embed, L blocks honoring disable flags, final norm, head."""
    ids = np.asarray(token_ids)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractViolation("token ids must be a non-empty 1-D sequence")
    if ids.size > model.config.max_seq:
        raise ContractViolation(
            f"sequence length {ids.size} exceeds max {model.config.max_seq}"
        )
    if ids.min() < 0 or ids.max() >= model.config.vocab:
        bad = int(ids[(ids < 0) | (ids >= model.config.vocab)][0])
        raise ContractViolation(f"token id {bad} outside vocabulary of {model.config.vocab}")
    if application is None:
        application = make_application(None, model)
    elif len(application.attn_disabled) != model.config.layers:
        raise ContractViolation("plan application does not match the model depth")

    x = model.embedding[ids].astype(np.float32)
    trace = ForwardTrace(
        flags=capture,
        x=[] if capture.x else None,
        attn_out=[] if capture.attn_out else None,
        y=[] if capture.y else None,
        mlp=[] if capture.mlp else None,
        logits=None,
    )
    for i, block in enumerate(model.blocks):
        if capture.x:
            trace.x.append(x)
        x_next, attn_out, y, mlp_out = block_forward(
            x,
            block,
            model.config,
            attn_disabled=application.attn_disabled[i],
            block_disabled=application.block_disabled[i],
        )
        if capture.attn_out:
            trace.attn_out.append(attn_out)
        if capture.y:
            trace.y.append(y)
        if capture.mlp:
            trace.mlp.append(mlp_out)
        x = x_next
    if capture.x:
        trace.x.append(x)
    if capture.logits:
        final = normalize_rows(x, model.final_norm_gain, model.final_norm_bias, model.config.norm_kind)
        trace.logits = final @ model.lm_head
    return trace


def count_macs(config: ModelConfig, seq_len: int, application: PlanApplication | None = None) -> int:
    """Multiply-accumulates of one forward at the given length.

    Counts the dense projection and mixing products only (norms, rotary, and
    the embedding lookup are elementwise or free). Per enabled attention
    sublayer: 4*S*D^2 + 2*S^2*D; per enabled MLP: 2*S*D*F; head: S*D*V.
    """
    s, d, f = seq_len, config.dim, config.mlp_dim
    attn_cost = 4 * s * d * d + 2 * s * s * d
    mlp_cost = 2 * s * d * f
    if application is None:
        attn_active = mlp_active = config.layers
    else:
        attn_active = sum(
            not (a or b) for a, b in zip(application.attn_disabled, application.block_disabled)
        )
        mlp_active = sum(not b for b in application.block_disabled)
    return attn_active * attn_cost + mlp_active * mlp_cost + s * d * config.vocab


def _model_from_stored(
    config: ModelConfig,
    fetch,
    source_fingerprint: str | None = None,
) -> Model:
    """Assemble a Model from stored-layout tensors via fetch(name, rank)."""
    scheme = ckpt.LLAMA_SCHEME
    d, f, v = config.dim, config.mlp_dim, config.vocab

    def matrix(name: str, rows: int, cols: int, transpose_to_math: bool) -> np.ndarray:
        arr = fetch(name, 2)
        if arr.shape != (rows, cols):
            raise ContractViolation(
                f"tensor {name!r} has shape {arr.shape}, config expects {(rows, cols)}"
            )
        return np.ascontiguousarray(arr.T) if transpose_to_math else arr

    def gain(name: str) -> np.ndarray:
        arr = fetch(name, 1)
        if arr.shape != (d,):
            raise ContractViolation(
                f"tensor {name!r} has shape {arr.shape}, config expects {(d,)}"
            )
        return arr

    def maybe_bias(gain_name: str) -> np.ndarray | None:
        if config.norm_kind != "layernorm":
            return None
        return gain(gain_name.replace(".weight", ".bias"))

    blocks: list[BlockWeights] = []
    for i in range(config.layers):
        attn_norm, mlp_norm = (p.format(i=i) for p in scheme["norms"])
        blocks.append(
            BlockWeights(
                wq=matrix(scheme["q"].format(i=i), d, d, True),
                wk=matrix(scheme["k"].format(i=i), d, d, True),
                wv=matrix(scheme["v"].format(i=i), d, d, True),
                wo=matrix(scheme["o"].format(i=i), d, d, True),
                w1=matrix(scheme["mlp_up"].format(i=i), f, d, True),
                w2=matrix(scheme["mlp_down"].format(i=i), d, f, True),
                attn_norm_gain=gain(attn_norm),
                mlp_norm_gain=gain(mlp_norm),
                attn_norm_bias=maybe_bias(attn_norm),
                mlp_norm_bias=maybe_bias(mlp_norm),
            )
        )
    return Model(
        config=config,
        embedding=matrix(scheme["embed"], v, d, False),
        blocks=blocks,
        final_norm_gain=gain(scheme["final_norm"]),
        final_norm_bias=maybe_bias(scheme["final_norm"]),
        lm_head=matrix(scheme["lm_head"], v, d, True),
        source_fingerprint=source_fingerprint,
    )


def init_random(
    config: ModelConfig,
    seed: int,
    suppression: Iterable[tuple[int, float]] = (),
) -> Model:
    """Seeded random model; the exact in-memory twin of a synthesized checkpoint.

    Suppression entries (layer, t) scale that layer's Wq by t after all
    weights are drawn, planting a known-weak query-key coupling.
    """
    stored = ckpt.synth_weights(config, seed, suppression)

    def fetch(name: str, rank: int) -> np.ndarray:
        if name not in stored:
            raise ContractViolation(f"missing synthesized tensor {name!r}")
        arr = stored[name]
        if arr.ndim != rank:
            raise ContractViolation(f"tensor {name!r} has rank {arr.ndim}, expected {rank}")
        return arr

    return _model_from_stored(config, fetch)


def load_from_checkpoint(
    index: ckpt.CheckpointIndex,
    layer_map: ckpt.LayerTensorMap,
    config: ModelConfig,
    source: BinaryIO,
    naming_scheme="llama",
    source_fingerprint: str | None = None,
) -> Model:
    """Load a full model from a checkpoint, normalizing orientation.

    The layer map must bind every role (a scoring-only q/k map cannot feed a
    forward pass); model-level tensors are resolved from the naming scheme.
    """
    if layer_map.layer_count != config.layers:
        raise ContractViolation(
            f"checkpoint has {layer_map.layer_count} layers, config says {config.layers}"
        )
    missing: list[str] = []
    for layer in range(1, layer_map.layer_count + 1):
        roles = layer_map.layers[layer]
        for role in ("v", "o", "mlp_up", "mlp_down"):
            if getattr(roles, role) is None:
                missing.append(f"layer {layer} {role}")
        if len(roles.norms) < 2:
            missing.append(f"layer {layer} norms")
    if missing:
        raise ContractViolation("checkpoint lacks roles needed for a forward pass: " + ", ".join(missing))

    # The assembler asks for canonical names; translate them to the mapped
    # (possibly differently named) tensors of this checkpoint.
    scheme = ckpt.resolve_scheme(naming_scheme)
    canon = ckpt.LLAMA_SCHEME
    translate: dict[str, str] = {}
    for i in range(config.layers):
        roles = layer_map.layers[i + 1]
        for role in ("q", "k", "v", "o", "mlp_up", "mlp_down"):
            translate[canon[role].format(i=i)] = getattr(roles, role)
        for slot, pattern in enumerate(canon["norms"]):
            gain_name = pattern.format(i=i)
            translate[gain_name] = roles.norms[slot]
            translate[gain_name.replace(".weight", ".bias")] = roles.norms[slot].replace(
                ".weight", ".bias"
            )
    for key in ("embed", "final_norm", "lm_head"):
        if key not in scheme:
            raise ContractViolation(f"naming scheme lacks a {key!r} pattern for model loading")
        translate[canon[key]] = scheme[key]
    translate[canon["final_norm"].replace(".weight", ".bias")] = scheme["final_norm"].replace(
        ".weight", ".bias"
    )

    def fetch(name: str, rank: int) -> np.ndarray:
        actual = translate[name]
        if rank == 2:
            return ckpt.read_tensor(index, actual, source)
        return ckpt.read_vector(index, actual, source)

    return _model_from_stored(config, fetch, source_fingerprint=source_fingerprint)


def suppressed_copy(model: Model, suppression: Iterable[tuple[int, float]]) -> Model:
    """New model with the listed layers' Wq scaled; shares all other arrays."""
    blocks = list(model.blocks)
    for layer, factor in suppression:
        if not 1 <= layer <= model.config.layers:
            raise ContractViolation(f"suppression layer {layer} outside [1, {model.config.layers}]")
        if factor < 0:
            raise ContractViolation(f"suppression factor must be >= 0, got {factor}")
        blk = blocks[layer - 1]
        blocks[layer - 1] = replace(blk, wq=blk.wq * np.float32(factor))
    return Model(
        config=model.config,
        embedding=model.embedding,
        blocks=blocks,
        final_norm_gain=model.final_norm_gain,
        final_norm_bias=model.final_norm_bias,
        lm_head=model.lm_head,
    )
