import json
import struct

import numpy as np
import pytest

from attnprune import checkpoint as ckpt
from attnprune.config import ModelConfig
from attnprune.errors import ContractViolation, FormatError
from attnprune.scoring import gate_norm


def build_file(header: dict | str, payload: bytes) -> bytes:
    raw = header if isinstance(header, str) else json.dumps(header, separators=(",", ":"))
    encoded = raw.encode("utf-8")
    return struct.pack("<Q", len(encoded)) + encoded + payload


class TestParseHeader:
    def test_hand_assembled_single_tensor(self):
        payload = np.array([[1, 2], [3, 4]], dtype="<f4").tobytes()
        data = build_file(
            {"a": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, payload
        )
        index = ckpt.parse_header(data)
        record = index.records["a"]
        assert record.byte_range == (0, 16)
        assert record.shape == (2, 2)
        assert index.data_region_length == 16

    def test_byte_length_mismatch_names_record(self):
        data = build_file(
            {"a": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 15]}}, b"\0" * 15
        )
        with pytest.raises(FormatError, match="'a'.*15.*16"):
            ckpt.parse_header(data)

    def test_empty_record_set_is_valid(self):
        index = ckpt.parse_header(build_file({}, b""))
        assert index.records == {}
        assert index.data_region_length == 0

    def test_metadata_preserved_but_ignored(self):
        data = build_file({"__metadata__": {"origin": "test"}}, b"")
        index = ckpt.parse_header(data)
        assert index.metadata == {"origin": "test"}
        assert index.records == {}

    def test_duplicate_names_rejected(self):
        entry = '{"dtype":"F32","shape":[1,1],"data_offsets":[0,4]}'
        raw = '{"a":%s,"a":%s}' % (entry, entry)
        with pytest.raises(FormatError, match="duplicate"):
            ckpt.parse_header(build_file(raw, b"\0" * 4))

    def test_overlapping_ranges_name_both_records(self):
        data = build_file(
            {
                "a": {"dtype": "F32", "shape": [1, 2], "data_offsets": [0, 8]},
                "b": {"dtype": "F32", "shape": [1, 2], "data_offsets": [4, 12]},
            },
            b"\0" * 12,
        )
        with pytest.raises(FormatError, match="'a'.*'b'"):
            ckpt.parse_header(data)

    def test_unknown_dtype_rejected(self):
        data = build_file({"a": {"dtype": "INT8", "shape": [4], "data_offsets": [0, 4]}}, b"\0" * 4)
        with pytest.raises(FormatError, match="INT8"):
            ckpt.parse_header(data)

    def test_non_utf8_header_rejected(self):
        encoded = b'{"a": \xff\xfe}'
        data = struct.pack("<Q", len(encoded)) + encoded
        with pytest.raises(FormatError, match="UTF-8"):
            ckpt.parse_header(data)

    def test_truncated_length_prefix(self):
        with pytest.raises(FormatError, match="truncated"):
            ckpt.parse_header(b"\x01\x02")

    def test_header_longer_than_data(self):
        with pytest.raises(FormatError, match="claims"):
            ckpt.parse_header(struct.pack("<Q", 1 << 40) + b"{}")

    def test_negative_shape_rejected(self):
        data = build_file({"a": {"dtype": "F32", "shape": [-2, 2], "data_offsets": [0, 16]}}, b"")
        with pytest.raises(FormatError, match="shape"):
            ckpt.parse_header(data)


class TestReadTensor:
    def test_f32_round_trip(self, write_checkpoint):
        payload = np.array([[1, 2], [3, 4]], dtype="<f4").tobytes()
        path = write_checkpoint(
            build_file({"a": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, payload)
        )
        index, handle = ckpt.open_checkpoint(path)
        with handle:
            got = ckpt.read_tensor(index, "a", handle)
        assert got.tolist() == [[1.0, 2.0], [3.0, 4.0]]
        assert got.dtype == np.float32

    def test_f16_decode_one(self, write_checkpoint):
        payload = struct.pack("<H", 0x3C00)  # IEEE-754 half 1.0
        path = write_checkpoint(
            build_file({"a": {"dtype": "F16", "shape": [1], "data_offsets": [0, 2]}}, payload)
        )
        index, handle = ckpt.open_checkpoint(path)
        with handle:
            assert ckpt.read_vector(index, "a", handle).tolist() == [1.0]

    def test_bf16_decode_minus_two(self, write_checkpoint):
        payload = struct.pack("<H", 0xC000)  # BF16 = truncated float32 -2.0
        path = write_checkpoint(
            build_file({"a": {"dtype": "BF16", "shape": [1], "data_offsets": [0, 2]}}, payload)
        )
        index, handle = ckpt.open_checkpoint(path)
        with handle:
            assert ckpt.read_vector(index, "a", handle).tolist() == [-2.0]

    def test_missing_name(self, write_checkpoint):
        path = write_checkpoint(build_file({}, b""))
        index, handle = ckpt.open_checkpoint(path)
        with handle:
            with pytest.raises(ContractViolation, match="'nope'"):
                ckpt.read_tensor(index, "nope", handle)

    def test_rank_mismatch(self, write_checkpoint):
        payload = b"\0" * 8
        path = write_checkpoint(
            build_file({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, payload)
        )
        index, handle = ckpt.open_checkpoint(path)
        with handle:
            with pytest.raises(ContractViolation, match="rank 1"):
                ckpt.read_tensor(index, "a", handle)


class TestOpenCheckpoint:
    def test_file_length_must_match_header(self, write_checkpoint):
        data = build_file(
            {"a": {"dtype": "F32", "shape": [1, 1], "data_offsets": [0, 4]}}, b"\0" * 7
        )
        path = write_checkpoint(data)
        with pytest.raises(FormatError, match="bytes"):
            ckpt.open_checkpoint(path)


class TestEnumerateLayers:
    def test_synthetic_checkpoint_binds_all_roles(self, toy_config, write_checkpoint):
        cfg = ModelConfig(**{**toy_config.__dict__, "layers": 4})
        path = write_checkpoint(ckpt.synth_checkpoint(cfg, seed=0))
        index, handle = ckpt.open_checkpoint(path)
        handle.close()
        layer_map = ckpt.enumerate_layers(index)
        assert layer_map.layer_count == 4
        for layer in range(1, 5):
            roles = layer_map.layers[layer]
            assert roles.q and roles.k and roles.v and roles.o
            assert roles.mlp_up and roles.mlp_down
            assert len(roles.norms) == 2

    def test_missing_k_names_layer(self):
        records = {}
        offset = 0
        for i in range(4):
            for role in ("q", "k"):
                if i == 2 and role == "k":
                    continue
                name = ckpt.LLAMA_SCHEME[role].format(i=i)
                records[name] = {"dtype": "F32", "shape": [2, 2], "data_offsets": [offset, offset + 16]}
                offset += 16
        index = ckpt.parse_header(build_file(records, b"\0" * offset))
        with pytest.raises(ContractViolation, match="layer 3.*k"):
            ckpt.enumerate_layers(index)

    def test_custom_pattern_zero_matches(self, write_checkpoint, small_config):
        path = write_checkpoint(ckpt.synth_checkpoint(small_config, seed=0))
        index, handle = ckpt.open_checkpoint(path)
        handle.close()
        scheme = {"q": "encoder.{i}.q", "k": "encoder.{i}.k"}
        with pytest.raises(ContractViolation, match="no layers matched"):
            ckpt.enumerate_layers(index, scheme)

    def test_custom_scheme_requires_placeholder(self):
        with pytest.raises(ContractViolation, match="placeholder"):
            ckpt.resolve_scheme({"q": "static.q", "k": "layers.{i}.k"})


class TestSynthCheckpoint:
    def test_deterministic_bytes(self, toy_config):
        a = ckpt.synth_checkpoint(toy_config, seed=3, suppression=[(2, 0.5)])
        b = ckpt.synth_checkpoint(toy_config, seed=3, suppression=[(2, 0.5)])
        assert a == b

    def test_suppression_scales_gate_norm_linearly(self, toy_config, write_checkpoint):
        def layer_norms(suppression):
            path = write_checkpoint(ckpt.synth_checkpoint(toy_config, seed=5, suppression=suppression))
            index, handle = ckpt.open_checkpoint(path)
            with handle:
                layer_map = ckpt.enumerate_layers(index)
                out = []
                for layer in range(1, toy_config.layers + 1):
                    roles = layer_map.layers[layer]
                    wq = ckpt.read_tensor(index, roles.q, handle).T
                    wk = ckpt.read_tensor(index, roles.k, handle).T
                    out.append(gate_norm(wq, wk).m)
                return out

        base = layer_norms([])
        planted = layer_norms([(5, 1e-3)])
        assert planted[4] == pytest.approx(1e-3 * base[4], rel=1e-5)
        for layer in (0, 1, 2, 3, 5, 6, 7):
            assert planted[layer] == base[layer]

    def test_unsuppressed_norms_share_order_of_magnitude(self, toy_config, write_checkpoint):
        # statistical: at a shared init scale the layer norms cluster tightly
        for seed in range(5):
            path = write_checkpoint(ckpt.synth_checkpoint(toy_config, seed=seed))
            index, handle = ckpt.open_checkpoint(path)
            with handle:
                layer_map = ckpt.enumerate_layers(index)
                norms = []
                for layer in range(1, toy_config.layers + 1):
                    roles = layer_map.layers[layer]
                    wq = ckpt.read_tensor(index, roles.q, handle).T
                    wk = ckpt.read_tensor(index, roles.k, handle).T
                    norms.append(gate_norm(wq, wk).m)
            assert max(norms) / min(norms) < 2.0

    def test_suppression_layer_out_of_range(self, toy_config):
        with pytest.raises(ContractViolation, match="outside"):
            ckpt.synth_checkpoint(toy_config, seed=0, suppression=[(9, 0.5)])

    def test_negative_suppression_factor_rejected(self, toy_config):
        with pytest.raises(ContractViolation, match=">= 0"):
            ckpt.synth_checkpoint(toy_config, seed=0, suppression=[(1, -0.5)])

    def test_scoring_only_has_just_q_and_k(self, small_config):
        data = ckpt.synth_checkpoint(small_config, seed=0, scoring_only=True)
        index = ckpt.parse_header(data)
        assert len(index.records) == 2 * small_config.layers
        assert all(".self_attn." in name for name in index.records)


class TestRoundTrip:
    def test_f32_bitwise(self, small_config, write_checkpoint):
        stored = ckpt.synth_weights(small_config, seed=1)
        path = write_checkpoint(ckpt.serialize_checkpoint(stored, dtype="F32"))
        index, handle = ckpt.open_checkpoint(path)
        with handle:
            for name, arr in stored.items():
                read = (
                    ckpt.read_tensor(index, name, handle)
                    if arr.ndim == 2
                    else ckpt.read_vector(index, name, handle)
                )
                assert np.array_equal(read, arr), name

    @pytest.mark.parametrize("dtype,rel", [("F16", 1e-3), ("BF16", 8e-3)])
    def test_half_precision_within_quantization(self, small_config, write_checkpoint, dtype, rel):
        stored = ckpt.synth_weights(small_config, seed=1)
        path = write_checkpoint(ckpt.serialize_checkpoint(stored, dtype=dtype))
        index, handle = ckpt.open_checkpoint(path)
        with handle:
            for name, arr in stored.items():
                read = (
                    ckpt.read_tensor(index, name, handle)
                    if arr.ndim == 2
                    else ckpt.read_vector(index, name, handle)
                )
                assert np.allclose(read, arr, rtol=rel, atol=1e-6), name

    def test_bf16_round_to_nearest_even(self):
        # 1 + 2^-9 is halfway between two BF16 values; RNE keeps the even one
        value = np.array([1.0 + 2.0**-9], dtype=np.float32)
        blob = ckpt._encode(value, "BF16")
        decoded = ckpt._decode(blob, "BF16")
        assert decoded[0] == 1.0


class TestHeaderFuzz:
    def test_mutations_never_crash_and_errors_are_classified(self, small_config, rng):
        base = ckpt.synth_checkpoint(small_config, seed=0)
        index = ckpt.parse_header(base)
        header_end = 8 + index.header_bytes
        for _ in range(300):
            mutated = bytearray(base)
            for _ in range(int(rng.integers(1, 4))):
                pos = int(rng.integers(0, header_end))
                mutated[pos] = int(rng.integers(0, 256))
            try:
                parsed = ckpt.parse_header(bytes(mutated))
            except FormatError:
                continue  # classified rejection
            # parse accepted the mutation: invariants must hold on the result
            ranges = sorted(r.byte_range for r in parsed.records.values())
            for (b1, e1), (b2, e2) in zip(ranges, ranges[1:]):
                assert e1 <= b2
            for record in parsed.records.values():
                assert record.byte_length == record.element_count * ckpt.DTYPE_SIZES[record.dtype]
