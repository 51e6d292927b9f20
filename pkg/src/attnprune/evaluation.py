"""Perplexity, sublayer timing, and plan-comparison reporting at desk scale."""

from __future__ import annotations

import io
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import importance as imp_lab
from . import scoring
from .errors import ContractViolation, FormatError
from .model import (
    CAPTURE_ALL,
    CAPTURE_LOGITS,
    Model,
    PlanApplication,
    attention_forward,
    count_macs,
    make_application,
    mlp_forward,
    model_forward,
    normalize_rows,
)

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - soft dependency for timing isolation
    threadpool_limits = None

STREAM_MAGIC = b"TOKS"
STREAM_VERSION = 1

REPORT_VERSION = "report/1"
SWEEP_HEADER = "method,n,perplexity,flop_reduction"


@dataclass(frozen=True)
class TokenStream:
    vocab: int
    ids: np.ndarray       # 1-D int64
    window: int           # evaluation window length S_eval

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractViolation("token stream must be a non-empty 1-D id sequence")
        if self.window <= 0:
            raise ContractViolation("evaluation window must be positive")
        if self.vocab <= 0:
            raise ContractViolation("vocab size must be positive")
        if ids.min() < 0 or ids.max() >= self.vocab:
            raise ContractViolation(f"stream contains ids outside [0, {self.vocab})")

    def windows(self) -> list[np.ndarray]:
        ids = np.asarray(self.ids)
        return [ids[start : start + self.window] for start in range(0, ids.size, self.window)]


def synth_stream(vocab: int, count: int, seed: int, window: int) -> TokenStream:
    """Seeded uniform token stream; the toy stand-in for a tokenized corpus."""
    rng = np.random.default_rng(seed)
    return TokenStream(vocab=vocab, ids=rng.integers(0, vocab, size=count), window=window)


def save_stream(stream: TokenStream, path: str | Path) -> None:
    with open(path, "wb") as handle:
        handle.write(STREAM_MAGIC)
        handle.write(struct.pack("<III", STREAM_VERSION, stream.vocab, int(np.asarray(stream.ids).size)))
        handle.write(np.asarray(stream.ids, dtype="<u4").tobytes())


def load_stream(path: str | Path, window: int) -> TokenStream:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != STREAM_MAGIC:
        raise FormatError(f"{path}: not a token stream file (bad magic)")
    version, vocab, count = struct.unpack("<III", data[4:16])
    if version != STREAM_VERSION:
        raise FormatError(f"{path}: unsupported stream version {version}")
    expected = 16 + 4 * count
    if len(data) != expected:
        raise FormatError(f"{path}: stream is {len(data)} bytes but header describes {expected}")
    ids = np.frombuffer(data, dtype="<u4", offset=16).astype(np.int64)
    return TokenStream(vocab=vocab, ids=ids, window=window)


def perplexity(
    model: Model,
    stream: TokenStream,
    application: PlanApplication | None = None,
) -> float:
    """exp of the mean next-token negative log-likelihood over all windows.

    Windows are non-overlapping with no cross-window context; a final partial
    window still contributes its predictions.
    """
    if stream.vocab > model.config.vocab:
        raise ContractViolation(
            f"stream vocab {stream.vocab} exceeds model vocab {model.config.vocab}"
        )
    total_nll = 0.0
    predictions = 0
    for ids in stream.windows():
        if ids.size < 2:
            continue
        trace = model_forward(ids, model, application, capture=CAPTURE_LOGITS)
        logits = trace.logits[:-1].astype(np.float64)
        targets = ids[1:]
        row_max = np.max(logits, axis=1, keepdims=True)
        log_norm = row_max[:, 0] + np.log(np.sum(np.exp(logits - row_max), axis=1))
        total_nll += float(np.sum(log_norm - logits[np.arange(targets.size), targets]))
        predictions += int(targets.size)
    if predictions == 0:
        raise ContractViolation("stream yields no next-token predictions")
    return float(math.exp(total_nll / predictions))


@dataclass(frozen=True)
class TimingStat:
    kind: str            # "attention" | "mlp"
    seq_len: int
    median: float        # seconds
    minimum: float
    runs: int


@dataclass(frozen=True)
class TimingProfile:
    entries: tuple[TimingStat, ...]

    def get(self, kind: str, seq_len: int) -> TimingStat:
        for entry in self.entries:
            if entry.kind == kind and entry.seq_len == seq_len:
                return entry
        raise ContractViolation(f"no timing entry for ({kind}, {seq_len})")


def profile_sublayers(
    model: Model,
    seq_lengths: Sequence[int],
    runs: int = 5,
    warmup: int = 2,
    seed: int = 0,
) -> TimingProfile:
    """Wall time of one attention vs one MLP sublayer at each length.

    Warmup iterations are discarded; the median and min over the timed runs
    are kept. BLAS pools are pinned to one thread while timing so medians stay
    comparable run to run; at most one profile should run per process.
    """
    if runs < 5:
        raise ContractViolation("timing profiles need at least 5 runs")
    rng = np.random.default_rng(seed)
    block = model.blocks[0]
    entries: list[TimingStat] = []

    def timed(fn) -> tuple[float, float]:
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(runs):
            start = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - start)
        return float(np.median(samples)), float(min(samples))

    def run_profile() -> None:
        for seq_len in seq_lengths:
            if seq_len > model.config.max_seq:
                raise ContractViolation(
                    f"profile length {seq_len} exceeds max {model.config.max_seq}"
                )
            z = rng.standard_normal((seq_len, model.config.dim)).astype(np.float32)
            med, low = timed(lambda: attention_forward(z, block, model.config))
            entries.append(TimingStat("attention", seq_len, med, low, runs))

            def mlp_step():
                u = normalize_rows(z, block.mlp_norm_gain, block.mlp_norm_bias, model.config.norm_kind)
                mlp_forward(u, block, model.config)

            med, low = timed(mlp_step)
            entries.append(TimingStat("mlp", seq_len, med, low, runs))

    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            run_profile()
    else:
        run_profile()
    return TimingProfile(entries=tuple(entries))


@dataclass(frozen=True)
class OverlapReport:
    shared: tuple[int, ...]
    jaccard: float
    only_a: tuple[int, ...]
    only_b: tuple[int, ...]


def plan_overlap(a: scoring.PruningPlan, b: scoring.PruningPlan) -> OverlapReport:
    """Set comparison of two plans' removed layers."""
    if a.layer_count != b.layer_count:
        raise ContractViolation(
            f"plans cover different depths: {a.layer_count} vs {b.layer_count}"
        )
    if a.unit != b.unit:
        raise ContractViolation(f"plans remove different units: {a.unit} vs {b.unit}")
    set_a, set_b = set(a.removed), set(b.removed)
    union = set_a | set_b
    jaccard = 1.0 if not union else len(set_a & set_b) / len(union)
    return OverlapReport(
        shared=tuple(sorted(set_a & set_b)),
        jaccard=jaccard,
        only_a=tuple(sorted(set_a - set_b)),
        only_b=tuple(sorted(set_b - set_a)),
    )


@dataclass(frozen=True)
class SweepRow:
    method: str
    n: int
    perplexity: float
    flop_reduction: float


def sweep(
    model: Model,
    methods: Sequence[str],
    n_values: Sequence[int],
    stream: TokenStream,
    seed: int = 0,
    mode: str = scoring.MODE_WHOLE,
) -> list[SweepRow]:
    """Perplexity and FLOP savings for each (method, N) cell.

    Gate-norm scores and the data-driven baseline traces are computed once
    and reused across cells; random methods derive their draw from `seed`.
    """
    layer_count = model.config.layers
    for n in n_values:
        if not 0 <= n <= layer_count:
            raise ContractViolation(f"prune count {n} outside [0, {layer_count}]")
    gate_scores = None
    data_imps: dict[str, list[tuple[int, float]]] = {}
    needs_data = any(m.startswith("data-driven") for m in methods)
    if needs_data:
        traces = [model_forward(ids, model, capture=CAPTURE_ALL) for ids in stream.windows() if ids.size >= 2]
        attn = imp_lab.attn_importance(traces)
        block = imp_lab.block_importance(traces)
        data_imps["data-driven-attn"] = [(i + 1, float(v)) for i, v in enumerate(attn)]
        data_imps["data-driven-block"] = [(i + 1, float(v)) for i, v in enumerate(block)]

    base_macs = count_macs(model.config, stream.window)
    rows: list[SweepRow] = []
    for method in methods:
        if method not in scoring.METHODS:
            raise ContractViolation(f"unknown sweep method {method!r}")
        for n in n_values:
            if method == "gate-norm":
                if gate_scores is None:
                    gate_scores = model.gate_scores(mode)
                plan = scoring.plan_one_shot(gate_scores, n)
            elif method in ("random-attn", "random-block"):
                unit = scoring.UNIT_ATTN if method == "random-attn" else scoring.UNIT_BLOCK
                plan = scoring.plan_random(layer_count, n, unit=unit, seed=seed)
            else:
                unit = scoring.UNIT_ATTN if method == "data-driven-attn" else scoring.UNIT_BLOCK
                plan = scoring.plan_from_importance(data_imps[method], n, unit=unit)
            application = make_application(plan, model, verify_fingerprint=False)
            ppl = perplexity(model, stream, application)
            reduction = 1.0 - count_macs(model.config, stream.window, application) / base_macs
            rows.append(SweepRow(method=method, n=n, perplexity=ppl, flop_reduction=reduction))
    return rows


def sweep_to_csv(rows: Iterable[SweepRow]) -> str:
    out = io.StringIO()
    out.write(SWEEP_HEADER + "\n")
    for row in rows:
        out.write(f"{row.method},{row.n},{row.perplexity:.9g},{row.flop_reduction:.9g}\n")
    return out.getvalue()


def sweep_from_csv(text: str) -> list[SweepRow]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != SWEEP_HEADER:
        raise FormatError("sweep table missing the fixed header row")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"sweep row has {len(parts)} fields, expected 4")
        rows.append(
            SweepRow(
                method=parts[0],
                n=int(parts[1]),
                perplexity=float(parts[2]),
                flop_reduction=float(parts[3]),
            )
        )
    return rows
