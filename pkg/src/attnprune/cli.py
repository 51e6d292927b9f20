"""Command-line surface binding all modules into reproducible workflows.

Every command writes its primary output plus a `<out>.manifest.json` run
manifest (command, resolved parameters, input content hashes, tool version,
timestamp). All randomness flows through explicit --seed flags. Exit codes:
0 success, 2 usage error, 3 input-format error, 4 contract violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import tracemalloc
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import evaluation, importance, scoring
from .config import ModelConfig, parse_config_spec
from .errors import ContractViolation, FormatError
from .model import CAPTURE_ALL, init_random, make_application, model_forward

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_CONTRACT = 4

_METHOD_FLAGS = {
    "gate-norm": "gate-norm",
    "data-attn": "data-driven-attn",
    "data-block": "data-driven-block",
    "random-attn": "random-attn",
    "random-block": "random-block",
}

SCORES_VERSION = "scores/1"
VALIDATE_VERSION = "validate/1"
BENCH_VERSION = "bench/1"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_path: Path, command: str, params: dict, input_hashes: dict) -> None:
    manifest = {
        "version": "manifest/1",
        "command": command,
        "parameters": params,
        "input_hashes": input_hashes,
        "tool_version": __version__,
        "timestamp": _utc_now(),
    }
    Path(str(out_path) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )


def parse_suppression(spec: str | None) -> list[tuple[int, float]]:
    """Parse 'L:t[,L:t...]' suppression lists."""
    if not spec:
        return []
    out = []
    for part in spec.split(","):
        layer, _, factor = part.partition(":")
        try:
            out.append((int(layer), float(factor)))
        except ValueError as exc:
            raise ContractViolation(f"bad suppression entry {part!r}: {exc}") from exc
    return out


def _resolve_scheme_arg(raw: str):
    if raw in ckpt.NAMING_SCHEMES:
        return raw
    path = Path(raw)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ContractViolation(
            f"--naming-scheme must be a built-in name or a JSON file: {exc}"
        ) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"naming scheme file {raw}: {exc}") from exc


def _scores_doc(scores, mode: str, fingerprint: str) -> str:
    doc = {
        "version": SCORES_VERSION,
        "mode": mode,
        "layer_count": len(scores),
        "source_fingerprint": fingerprint,
        "scores": [{"layer": s.layer, "m": s.m} for s in scores],
    }
    return json.dumps(doc, indent=2) + "\n"


def _load_scores_doc(path: Path) -> tuple[list[scoring.GateScore], str, str]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != SCORES_VERSION:
        raise FormatError(f"{path}: expected a {SCORES_VERSION!r} document")
    scores = [
        scoring.GateScore(layer=entry["layer"], m=float(entry["m"]), mode=doc["mode"])
        for entry in doc["scores"]
    ]
    return scores, doc["mode"], doc.get("source_fingerprint")


def cmd_score(args) -> int:
    mode = scoring.MODE_WHOLE if args.mode == "whole" else scoring.MODE_PER_HEAD
    scheme = _resolve_scheme_arg(args.naming_scheme)
    scores, fingerprint = scoring.score_checkpoint_file(
        args.checkpoint, naming_scheme=scheme, mode=mode, heads=args.heads
    )
    out = Path(args.out)
    out.write_text(_scores_doc(scores, mode, fingerprint), encoding="utf-8")
    write_manifest(
        out,
        "score",
        {
            "checkpoint": str(args.checkpoint),
            "naming_scheme": args.naming_scheme,
            "mode": mode,
            "heads": args.heads,
        },
        {"checkpoint": fingerprint},
    )
    print(f"scored {len(scores)} layers -> {out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    method = _METHOD_FLAGS[args.method]
    fingerprint = None
    scores = None
    layer_count = args.layer_count

    if args.scores:
        scores, _, fingerprint = _load_scores_doc(Path(args.scores))
        layer_count = len(scores)
    elif args.checkpoint:
        mode = scoring.MODE_WHOLE if args.mode == "whole" else scoring.MODE_PER_HEAD
        scheme = _resolve_scheme_arg(args.naming_scheme)
        scores, fingerprint = scoring.score_checkpoint_file(
            args.checkpoint, naming_scheme=scheme, mode=mode, heads=args.heads
        )
        layer_count = len(scores)

    if method == "gate-norm":
        if scores is None:
            raise ContractViolation("gate-norm planning needs --scores or --checkpoint")
        plan = scoring.plan_one_shot(scores, args.n, source_fingerprint=fingerprint)
    elif method.startswith("data-driven"):
        if not args.importance:
            raise ContractViolation(f"{args.method} planning needs --importance")
        report = importance.report_from_csv(Path(args.importance).read_text(encoding="utf-8"))
        column = report.imp_attn if method == "data-driven-attn" else report.imp_block
        unit = scoring.UNIT_ATTN if method == "data-driven-attn" else scoring.UNIT_BLOCK
        plan = scoring.plan_from_importance(
            [(i + 1, v) for i, v in enumerate(column)], args.n, unit=unit
        )
    else:
        if layer_count is None:
            raise ContractViolation("random planning needs --layer-count, --scores, or --checkpoint")
        unit = scoring.UNIT_ATTN if method == "random-attn" else scoring.UNIT_BLOCK
        plan = scoring.plan_random(layer_count, args.n, unit=unit, seed=args.seed)

    out = Path(args.out)
    out.write_text(scoring.plan_to_json(plan), encoding="utf-8")
    hashes = {}
    if args.scores:
        hashes["scores"] = ckpt.fingerprint_file(args.scores)
    if args.checkpoint:
        hashes["checkpoint"] = fingerprint
    if args.importance:
        hashes["importance"] = ckpt.fingerprint_file(args.importance)
    write_manifest(
        out,
        "plan",
        {"method": args.method, "n": args.n, "seed": args.seed, "layer_count": layer_count},
        hashes,
    )
    print(f"plan removes {list(plan.removed)} -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = parse_config_spec(args.config)
    suppression = parse_suppression(args.suppress)
    data = ckpt.synth_checkpoint(
        config, args.seed, suppression, dtype=args.dtype, scoring_only=args.scoring_only
    )
    out = Path(args.out)
    out.write_bytes(data)
    write_manifest(
        out,
        "synth",
        {
            "config": args.config,
            "seed": args.seed,
            "suppress": args.suppress,
            "dtype": args.dtype,
            "scoring_only": args.scoring_only,
        },
        {},
    )
    print(f"wrote {len(data)} checkpoint bytes -> {out}")
    return EXIT_OK


def cmd_stream(args) -> int:
    stream = evaluation.synth_stream(args.vocab, args.count, args.seed, window=max(2, args.count))
    out = Path(args.out)
    evaluation.save_stream(stream, out)
    write_manifest(
        out, "stream", {"vocab": args.vocab, "count": args.count, "seed": args.seed}, {}
    )
    print(f"wrote {args.count} token ids -> {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = parse_config_spec(args.config)
    suppression = parse_suppression(args.suppress)
    model = init_random(config, args.seed, suppression)

    if args.stream:
        stream = evaluation.load_stream(args.stream, window=args.window)
    else:
        stream = evaluation.synth_stream(
            config.vocab, args.window * args.windows, args.seed + 1, window=args.window
        )

    plan = scoring.load_plan(args.plan) if args.plan else None
    application = make_application(plan, model, verify_fingerprint=not args.ignore_fingerprint)

    traces = [
        model_forward(ids, model, application, capture=CAPTURE_ALL)
        for ids in stream.windows()
        if ids.size >= 2
    ]
    mode = scoring.MODE_WHOLE if args.mode == "whole" else scoring.MODE_PER_HEAD
    report = importance.compute_report(model, traces, mode=mode, centered=args.centered)
    ppl = evaluation.perplexity(model, stream, application)

    out = Path(args.out)
    out.write_text(report.to_csv(), encoding="utf-8")
    summary = {
        "version": evaluation.REPORT_VERSION,
        "perplexity": ppl,
        "layer_count": config.layers,
        "tokens": report.tokens,
        "removed": list(plan.removed) if plan else [],
    }
    Path(str(out) + ".summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    hashes = {}
    if args.stream:
        hashes["stream"] = ckpt.fingerprint_file(args.stream)
    if args.plan:
        hashes["plan"] = ckpt.fingerprint_file(args.plan)
    write_manifest(
        out,
        "simulate",
        {
            "config": args.config,
            "seed": args.seed,
            "suppress": args.suppress,
            "plan": args.plan,
            "window": args.window,
            "windows": args.windows,
            "mode": mode,
            "centered": args.centered,
        },
        hashes,
    )
    print(f"perplexity {ppl:.6g}; report -> {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    config = parse_config_spec(args.config) if args.config else None
    softmax_fn = importance.negated_stabilizer_softmax if args.inject_bug else None
    kwargs = {"trials": args.trials, "seed": args.seed}
    if config is not None:
        kwargs["config"] = config
    if softmax_fn is not None:
        kwargs["softmax_fn"] = softmax_fn
    checks = importance.run_all_checks(**kwargs)
    doc = {
        "version": VALIDATE_VERSION,
        "trials": args.trials,
        "seed": args.seed,
        "injected_bug": "negated-softmax-stabilizer" if args.inject_bug else None,
        "checks": [asdict(c) for c in checks],
        "all_passed": all(c.passed for c in checks),
    }
    out = Path(args.out)
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    write_manifest(
        out,
        "validate",
        {"trials": args.trials, "seed": args.seed, "inject_bug": args.inject_bug, "config": args.config},
        {},
    )
    for check in checks:
        status = "pass" if check.passed else "FAIL"
        print(f"{status} {check.name}: min slack {check.min_slack:.3g} over {check.trials} trials")
    if not doc["all_passed"]:
        print("bound-check suite FAILED", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


def cmd_bench(args) -> int:
    layer_counts = [int(v) for v in args.layers.split(",")]
    pairs = dict(kv.partition("=")[::2] for kv in args.shape.split(","))
    dim = int(pairs.get("D", 2048))
    dtype = pairs.get("dtype", "F16").strip()
    heads = int(pairs.get("H", max(1, dim // 64)))

    results = []
    for layer_count in layer_counts:
        config = ModelConfig(
            layers=layer_count, dim=dim, heads=heads, mlp_dim=2 * dim, vocab=64, max_seq=64
        )
        path = Path(args.out).with_suffix(f".ckpt.L{layer_count}")
        path.write_bytes(ckpt.synth_checkpoint(config, args.seed, dtype=dtype, scoring_only=True))
        times = []
        peaks = []
        for _ in range(args.repeats):
            index, handle = ckpt.open_checkpoint(path)
            with handle:
                layer_map = ckpt.enumerate_layers(index)
                tracemalloc.start()
                before, _ = tracemalloc.get_traced_memory()
                start = time.perf_counter()
                scores = scoring.score_checkpoint(handle, index, layer_map)
                elapsed = time.perf_counter() - start
                _, peak = tracemalloc.get_traced_memory()
                tracemalloc.stop()
            times.append(elapsed)
            peaks.append(peak - before)
        pair_bytes = 2 * dim * dim * 4
        results.append(
            {
                "layers": layer_count,
                "dim": dim,
                "dtype": dtype,
                "median_seconds": float(np.median(times)),
                "min_seconds": float(min(times)),
                "peak_extra_bytes": int(max(peaks)),
                "decoded_pair_bytes": pair_bytes,
                "peak_over_pair": float(max(peaks)) / pair_bytes,
                "scores_head": [s.m for s in scores[:2]],
            }
        )
        if not args.keep_checkpoints:
            path.unlink()

    medians = np.asarray([r["median_seconds"] for r in results])
    ls = np.asarray([float(r["layers"]) for r in results])
    doc = {
        "version": BENCH_VERSION,
        "shape": args.shape,
        "repeats": args.repeats,
        "results": results,
    }
    if len(results) >= 2:
        coeffs = np.polyfit(ls, medians, 1)
        fit = np.polyval(coeffs, ls)
        ss_res = float(np.sum((medians - fit) ** 2))
        ss_tot = float(np.sum((medians - medians.mean()) ** 2))
        doc["linearity_r2"] = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    out = Path(args.out)
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    write_manifest(
        out,
        "bench",
        {"shape": args.shape, "layers": args.layers, "repeats": args.repeats, "seed": args.seed},
        {},
    )
    for r in results:
        print(
            f"L={r['layers']}: median {r['median_seconds']:.3f}s, "
            f"peak extra {r['peak_extra_bytes'] / 2**20:.1f} MiB "
            f"({r['peak_over_pair']:.2f}x one Q/K pair)"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    plans = []
    sweeps = []
    scores_docs = []
    reports = []
    for raw in args.inputs:
        path = Path(raw)
        text = path.read_text(encoding="utf-8")
        if text.startswith(evaluation.SWEEP_HEADER):
            sweeps.append((path, evaluation.sweep_from_csv(text)))
        elif text.startswith(importance.REPORT_HEADER):
            reports.append((path, importance.report_from_csv(text)))
        else:
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: unrecognized report input: {exc}") from exc
            if doc.get("version") == scoring.PLAN_VERSION:
                plans.append((path, scoring.plan_from_json(text)))
            elif doc.get("version") == SCORES_VERSION:
                scores_docs.append((path, _load_scores_doc(path)))
            else:
                raise FormatError(f"{path}: unrecognized report input version")

    layer_counts = set()
    for _, plan in plans:
        layer_counts.add(plan.layer_count)
    for _, report in reports:
        layer_counts.add(report.layer_count)
    for _, (scores, _, _) in scores_docs:
        layer_counts.add(len(scores))
    if len(layer_counts) > 1:
        raise ContractViolation(f"inputs disagree on layer count: {sorted(layer_counts)}")

    out = Path(args.out)
    sections = [f"report {evaluation.REPORT_VERSION}"]
    hashes = {str(p): ckpt.fingerprint_file(p) for p in [path for path, _ in plans + sweeps + reports] + [p for p, _ in scores_docs]}

    if sweeps:
        merged = [row for _, rows in sweeps for row in rows]
        curves_path = Path(str(out) + ".curves.csv")
        curves_path.write_text(evaluation.sweep_to_csv(merged), encoding="utf-8")
        sections.append(f"curves: {len(merged)} rows from {len(sweeps)} table(s) -> {curves_path.name}")

    if len(plans) >= 2:
        overlap_lines = []
        for (path_a, plan_a), (path_b, plan_b) in zip(plans, plans[1:]):
            ov = evaluation.plan_overlap(plan_a, plan_b)
            overlap_lines.append(
                {
                    "a": path_a.name,
                    "b": path_b.name,
                    "shared": list(ov.shared),
                    "jaccard": ov.jaccard,
                    "only_a": list(ov.only_a),
                    "only_b": list(ov.only_b),
                }
            )
        overlap_path = Path(str(out) + ".overlap.json")
        overlap_path.write_text(json.dumps(overlap_lines, indent=2) + "\n", encoding="utf-8")
        sections.append(f"overlap: {len(overlap_lines)} pair(s) -> {overlap_path.name}")

    if scores_docs and reports:
        scores, _, _ = scores_docs[0][1]
        report = reports[0][1]
        scatter_path = Path(str(out) + ".scatter.csv")
        lines = ["layer,gate_norm,imp_attn"]
        for score in sorted(scores, key=lambda s: s.layer):
            lines.append(f"{score.layer},{score.m:.9g},{report.imp_attn[score.layer - 1]:.9g}")
        scatter_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        sections.append(f"scatter: {len(scores)} layers -> {scatter_path.name}")

    out.write_text("\n".join(sections) + "\n", encoding="utf-8")
    write_manifest(out, "report", {"inputs": [str(p) for p in args.inputs]}, hashes)
    print("\n".join(sections))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnprune",
        description="Data-free attention-sublayer pruning: score, plan, simulate, validate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score a checkpoint's layers by query-key coupling")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--naming-scheme", default="llama")
    p.add_argument("--mode", choices=["whole", "per-head"], default="whole")
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("plan", help="turn scores into a one-shot removal plan")
    p.add_argument("--scores", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--naming-scheme", default="llama")
    p.add_argument("--mode", choices=["whole", "per-head"], default="whole")
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--importance", default=None, help="importance report CSV for data-driven methods")
    p.add_argument("--method", choices=sorted(_METHOD_FLAGS), default="gate-norm")
    p.add_argument("-N", "--n", dest="n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layer-count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("synth", help="synthesize a seeded random checkpoint")
    p.add_argument("--config", required=True, help="JSON file or inline 'L=8,D=64,H=4,F=256,V=512'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suppress", default=None, help="planted weak layers, 'L:t[,L:t...]'")
    p.add_argument("--dtype", choices=sorted(ckpt.DTYPE_SIZES), default="F32")
    p.add_argument("--scoring-only", action="store_true", help="emit only q/k tensors")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("stream", help="synthesize a seeded token stream file")
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("simulate", help="run the toy engine and emit an importance report")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suppress", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--stream", default=None, help="token stream file (default: synthesized)")
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--windows", type=int, default=8)
    p.add_argument("--mode", choices=["whole", "per-head"], default="whole")
    p.add_argument("--centered", action="store_true")
    p.add_argument("--ignore-fingerprint", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("validate", help="run the numerical bound-check suite")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="toy config for the importance sweep")
    p.add_argument(
        "--inject-bug",
        action="store_true",
        help="swap in a broken softmax to prove the suite detects faults",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("bench", help="time and memory-profile streaming checkpoint scoring")
    p.add_argument("--shape", default="D=2048,dtype=F16", help="e.g. 'D=2048,dtype=F16,H=32'")
    p.add_argument("--layers", default="4,8,16,32", help="comma list of depths to score")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keep-checkpoints", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("report", help="merge plans, sweeps, scores, and importance tables")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as exc:
        print(f"input format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
