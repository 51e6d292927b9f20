"""Tensor-container checkpoint I/O: parsing, streaming reads, and synthesis.

File layout (the de-facto community single-file format): an 8-byte
little-endian unsigned header length N, then N bytes of UTF-8 JSON mapping
tensor names to {"dtype", "shape", "data_offsets"}, then the flat data
region. `data_offsets` are [begin, end) offsets into the data region. An
optional "__metadata__" header entry is preserved but otherwise ignored.

Projection weights on disk follow the (out_features, in_features) convention;
loaders transpose them into the right-multiplication convention (activations
as rows) that the engine and the gate-norm definition use.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .config import ModelConfig
from .errors import ContractViolation, FormatError

DTYPE_SIZES = {"F16": 2, "BF16": 2, "F32": 4}

LLAMA_SCHEME = {
    "q": "model.layers.{i}.self_attn.q_proj.weight",
    "k": "model.layers.{i}.self_attn.k_proj.weight",
    "v": "model.layers.{i}.self_attn.v_proj.weight",
    "o": "model.layers.{i}.self_attn.o_proj.weight",
    "mlp_up": "model.layers.{i}.mlp.up_proj.weight",
    "mlp_down": "model.layers.{i}.mlp.down_proj.weight",
    "norms": [
        "model.layers.{i}.input_layernorm.weight",
        "model.layers.{i}.post_attention_layernorm.weight",
    ],
    "embed": "model.embed_tokens.weight",
    "final_norm": "model.norm.weight",
    "lm_head": "lm_head.weight",
}

NAMING_SCHEMES = {"llama": LLAMA_SCHEME}


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def element_count(self) -> int:
        count = 1
        for extent in self.shape:
            count *= extent
        return count

    @property
    def byte_length(self) -> int:
        return self.byte_range[1] - self.byte_range[0]


@dataclass(frozen=True)
class CheckpointIndex:
    header_bytes: int
    records: dict[str, TensorRecord]
    data_region_length: int
    metadata: dict | None = None

    @property
    def data_start(self) -> int:
        return 8 + self.header_bytes


@dataclass(frozen=True)
class LayerRoles:
    q: str
    k: str
    v: str | None = None
    o: str | None = None
    mlp_up: str | None = None
    mlp_down: str | None = None
    norms: tuple[str, ...] = ()


@dataclass(frozen=True)
class LayerTensorMap:
    layers: dict[int, LayerRoles] = field(default_factory=dict)

    @property
    def layer_count(self) -> int:
        return len(self.layers)


def _json_object_hook(pairs):
    keys = [k for k, _ in pairs]
    if len(keys) != len(set(keys)):
        dup = next(k for k in keys if keys.count(k) > 1)
        raise FormatError(f"duplicate header key {dup!r}")
    return dict(pairs)


def parse_header(data: bytes) -> CheckpointIndex:
    """Parse and fully validate a checkpoint header from the file's leading bytes.

    `data` must cover at least the 8-byte length prefix and the header; it may
    be the whole file. The data region length is taken as the tight bound (the
    largest record end offset); `open_checkpoint` additionally checks it
    against the real file size.
    """
    if len(data) < 8:
        raise FormatError(f"header length prefix truncated: {len(data)} bytes")
    (header_len,) = struct.unpack("<Q", data[:8])
    if header_len == 0:
        raise FormatError("header length is zero")
    if header_len > len(data) - 8:
        raise FormatError(
            f"header claims {header_len} bytes but only {len(data) - 8} available"
        )
    raw = data[8 : 8 + header_len]
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not valid UTF-8: {exc}") from exc
    try:
        table = json.loads(text, object_pairs_hook=_json_object_hook)
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(table, dict):
        raise FormatError("header must be a JSON object")

    metadata = None
    records: dict[str, TensorRecord] = {}
    for name, entry in table.items():
        if name == "__metadata__":
            if not isinstance(entry, dict):
                raise FormatError("__metadata__ must be a JSON object")
            metadata = entry
            continue
        records[name] = _parse_record(name, entry)

    _check_overlaps(records)
    region = max((r.byte_range[1] for r in records.values()), default=0)
    return CheckpointIndex(
        header_bytes=header_len,
        records=records,
        data_region_length=region,
        metadata=metadata,
    )


def _parse_record(name: str, entry) -> TensorRecord:
    if not isinstance(entry, dict):
        raise FormatError(f"record {name!r} must be a JSON object")
    for key in ("dtype", "shape", "data_offsets"):
        if key not in entry:
            raise FormatError(f"record {name!r} missing {key!r}")
    dtype = entry["dtype"]
    if dtype not in DTYPE_SIZES:
        raise FormatError(f"record {name!r} has unknown dtype {dtype!r}")
    shape = entry["shape"]
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape)
    ):
        raise FormatError(f"record {name!r} has invalid shape {shape!r}")
    offsets = entry["data_offsets"]
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
    ):
        raise FormatError(f"record {name!r} has invalid data_offsets {offsets!r}")
    begin, end = offsets
    if begin >= end:
        raise FormatError(f"record {name!r} has empty byte range [{begin}, {end})")
    count = 1
    for extent in shape:
        count *= extent
    expected = count * DTYPE_SIZES[dtype]
    if end - begin != expected:
        raise FormatError(
            f"record {name!r}: byte range holds {end - begin} bytes "
            f"but shape {shape} of {dtype} needs {expected}"
        )
    return TensorRecord(name=name, dtype=dtype, shape=tuple(shape), byte_range=(begin, end))


def _check_overlaps(records: dict[str, TensorRecord]) -> None:
    ordered = sorted(records.values(), key=lambda r: r.byte_range)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.byte_range[0] < prev.byte_range[1]:
            raise FormatError(
                f"records {prev.name!r} and {cur.name!r} have overlapping byte ranges"
            )


def open_checkpoint(path: str | Path) -> tuple[CheckpointIndex, BinaryIO]:
    """Open a checkpoint file, validate its header against the actual size.

    Returns the parsed index and a seekable binary handle positioned at 0.
    The caller owns the handle. For concurrent reads, open one handle per
    thread; `read_tensor` seeks.
    """
    path = Path(path)
    size = path.stat().st_size
    handle = path.open("rb")
    try:
        prefix = handle.read(min(size, 8))
        if len(prefix) < 8:
            raise FormatError(f"{path}: header length prefix truncated")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > size - 8:
            raise FormatError(f"{path}: header length {header_len} exceeds file size {size}")
        handle.seek(0)
        index = parse_header(handle.read(8 + header_len))
        expected = 8 + header_len + index.data_region_length
        if size != expected:
            raise FormatError(
                f"{path}: file is {size} bytes but header describes {expected}"
            )
        handle.seek(0)
        return index, handle
    except Exception:
        handle.close()
        raise


def _decode(buf: bytes, dtype: str) -> np.ndarray:
    if dtype == "F32":
        return np.frombuffer(buf, dtype="<f4").astype(np.float32)
    if dtype == "F16":
        return np.frombuffer(buf, dtype="<f2").astype(np.float32)
    if dtype == "BF16":
        # BF16 is the top half of an IEEE-754 float32
        widened = np.frombuffer(buf, dtype="<u2").astype(np.uint32) << 16
        return widened.view(np.float32).copy()
    raise FormatError(f"unknown dtype {dtype!r}")


def _encode(arr: np.ndarray, dtype: str) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if dtype == "F32":
        return arr.astype("<f4").tobytes()
    if dtype == "F16":
        return arr.astype("<f2").tobytes()
    if dtype == "BF16":
        bits = arr.view(np.uint32)
        rounding = 0x7FFF + ((bits >> 16) & 1)  # round to nearest even
        return ((bits + rounding) >> 16).astype("<u2").tobytes()
    raise ContractViolation(f"unknown dtype {dtype!r}")


def _read_raw(index: CheckpointIndex, name: str, source: BinaryIO) -> tuple[TensorRecord, np.ndarray]:
    if name not in index.records:
        raise ContractViolation(f"tensor {name!r} not present in checkpoint index")
    record = index.records[name]
    source.seek(index.data_start + record.byte_range[0])
    buf = source.read(record.byte_length)
    if len(buf) != record.byte_length:
        raise FormatError(
            f"tensor {name!r}: short read ({len(buf)} of {record.byte_length} bytes)"
        )
    return record, _decode(buf, record.dtype)


def read_tensor(index: CheckpointIndex, name: str, source: BinaryIO) -> np.ndarray:
    """Read a rank-2 tensor, widened to float32, in its stored row-major layout."""
    record, flat = _read_raw(index, name, source)
    if len(record.shape) != 2:
        raise ContractViolation(
            f"tensor {name!r} has rank {len(record.shape)}, expected 2"
        )
    return flat.reshape(record.shape)


def read_vector(index: CheckpointIndex, name: str, source: BinaryIO) -> np.ndarray:
    """Read a rank-1 tensor (norm gains and biases), widened to float32."""
    record, flat = _read_raw(index, name, source)
    if len(record.shape) != 1:
        raise ContractViolation(
            f"tensor {name!r} has rank {len(record.shape)}, expected 1"
        )
    return flat


def resolve_scheme(naming_scheme) -> dict:
    """Accept a built-in scheme name or a role->pattern mapping with {i} placeholders."""
    if isinstance(naming_scheme, str):
        try:
            return NAMING_SCHEMES[naming_scheme]
        except KeyError:
            raise ContractViolation(
                f"unknown naming scheme {naming_scheme!r}; built-ins: {sorted(NAMING_SCHEMES)}"
            ) from None
    scheme = dict(naming_scheme)
    for role in ("q", "k"):
        if role not in scheme:
            raise ContractViolation(f"naming scheme must define a {role!r} pattern")
        if "{i}" not in scheme[role]:
            raise ContractViolation(f"pattern for {role!r} lacks an {{i}} placeholder")
    return scheme


def enumerate_layers(index: CheckpointIndex, naming_scheme="llama") -> LayerTensorMap:
    """Bind checkpoint tensor names to per-layer roles.

    Disk layer numbering starts at 0; the returned map is keyed 1..L. Every
    layer must expose q and k; the remaining roles are optional so that
    scoring-only checkpoints stay valid.
    """
    scheme = resolve_scheme(naming_scheme)
    matched: dict[int, dict] = {}
    for role in ("q", "k", "v", "o", "mlp_up", "mlp_down"):
        pattern = scheme.get(role)
        if pattern is None:
            continue
        for disk_idx, name in _match_pattern(index, pattern):
            matched.setdefault(disk_idx, {})[role] = name
    norm_patterns = scheme.get("norms", [])
    for pattern in norm_patterns:
        for disk_idx, name in _match_pattern(index, pattern):
            matched.setdefault(disk_idx, {}).setdefault("norms", []).append(name)

    if not matched:
        raise ContractViolation("no layers matched the naming scheme")
    layer_count = max(matched) + 1
    layers: dict[int, LayerRoles] = {}
    for disk_idx in range(layer_count):
        roles = matched.get(disk_idx, {})
        layer = disk_idx + 1
        for required in ("q", "k"):
            if required not in roles:
                raise ContractViolation(
                    f"layer {layer} is missing its {required} tensor"
                )
        layers[layer] = LayerRoles(
            q=roles["q"],
            k=roles["k"],
            v=roles.get("v"),
            o=roles.get("o"),
            mlp_up=roles.get("mlp_up"),
            mlp_down=roles.get("mlp_down"),
            norms=tuple(roles.get("norms", ())),
        )
    return LayerTensorMap(layers=layers)


def _match_pattern(index: CheckpointIndex, pattern: str) -> Iterable[tuple[int, str]]:
    prefix, _, suffix = pattern.partition("{i}")
    for name in index.records:
        if name.startswith(prefix) and name.endswith(suffix) and len(name) > len(prefix) + len(suffix):
            middle = name[len(prefix) : len(name) - len(suffix)]
            if middle.isdigit():
                yield int(middle), name


def serialize_checkpoint(
    tensors: Mapping[str, np.ndarray],
    dtype: str = "F32",
    metadata: Mapping[str, str] | None = None,
) -> bytes:
    """Serialize named arrays (stored layout) into container bytes.

    Offsets follow the mapping's iteration order, so a fixed input order
    yields byte-identical files.
    """
    if dtype not in DTYPE_SIZES:
        raise ContractViolation(f"unknown dtype {dtype!r}")
    header: dict = {}
    if metadata is not None:
        header["__metadata__"] = dict(metadata)
    blobs: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        blob = _encode(np.asarray(arr), dtype)
        header[name] = {
            "dtype": dtype,
            "shape": list(np.asarray(arr).shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(struct.pack("<Q", len(header_bytes)))
    out.write(header_bytes)
    for blob in blobs:
        out.write(blob)
    return out.getvalue()


def synth_weights(
    config: ModelConfig,
    seed: int,
    suppression: Iterable[tuple[int, float]] = (),
    scoring_only: bool = False,
) -> dict[str, np.ndarray]:
    """Seeded random weights in stored (out_features, in_features) layout.

    Entry std is 1/sqrt(D) for every projection; norm gains are ones and
    norm biases (layernorm only) zeros. Draw order is fixed (embedding,
    then per layer q, k, v, o, mlp up, mlp down; then final norm and head)
    and suppression scaling is applied after all draws, so the same seed
    yields the same base weights regardless of the suppression list.
    """
    suppression = list(suppression)
    for layer, factor in suppression:
        if not 1 <= layer <= config.layers:
            raise ContractViolation(
                f"suppression layer {layer} outside [1, {config.layers}]"
            )
        if factor < 0:
            raise ContractViolation(f"suppression factor must be >= 0, got {factor}")

    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(config.dim)
    d, f, v = config.dim, config.mlp_dim, config.vocab

    def draw(shape):
        return (rng.standard_normal(shape, dtype=np.float32) * std).astype(np.float32)

    tensors: dict[str, np.ndarray] = {}
    if not scoring_only:
        tensors[LLAMA_SCHEME["embed"]] = draw((v, d))
    for i in range(config.layers):
        tensors[LLAMA_SCHEME["q"].format(i=i)] = draw((d, d))
        tensors[LLAMA_SCHEME["k"].format(i=i)] = draw((d, d))
        if scoring_only:
            continue
        tensors[LLAMA_SCHEME["v"].format(i=i)] = draw((d, d))
        tensors[LLAMA_SCHEME["o"].format(i=i)] = draw((d, d))
        tensors[LLAMA_SCHEME["mlp_up"].format(i=i)] = draw((f, d))
        tensors[LLAMA_SCHEME["mlp_down"].format(i=i)] = draw((d, f))
        for norm_name in LLAMA_SCHEME["norms"]:
            gain_name = norm_name.format(i=i)
            tensors[gain_name] = np.ones(d, dtype=np.float32)
            if config.norm_kind == "layernorm":
                tensors[gain_name.replace(".weight", ".bias")] = np.zeros(d, dtype=np.float32)
    if not scoring_only:
        tensors[LLAMA_SCHEME["final_norm"]] = np.ones(d, dtype=np.float32)
        if config.norm_kind == "layernorm":
            tensors[LLAMA_SCHEME["final_norm"].replace(".weight", ".bias")] = np.zeros(
                d, dtype=np.float32
            )
        tensors[LLAMA_SCHEME["lm_head"]] = draw((v, d))

    for layer, factor in suppression:
        name = LLAMA_SCHEME["q"].format(i=layer - 1)
        tensors[name] = tensors[name] * np.float32(factor)
    return tensors


def synth_checkpoint(
    config: ModelConfig,
    seed: int,
    suppression: Iterable[tuple[int, float]] = (),
    dtype: str = "F32",
    scoring_only: bool = False,
) -> bytes:
    """Serialize seeded random weights into a valid container; deterministic."""
    return serialize_checkpoint(
        synth_weights(config, seed, suppression, scoring_only=scoring_only), dtype=dtype
    )


def fingerprint_bytes(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def fingerprint_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()
