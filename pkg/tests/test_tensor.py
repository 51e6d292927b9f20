import math

import numpy as np
import pytest

from attnprune import tensor
from attnprune.errors import ContractViolation

import reference


class TestMatmul:
    def test_identity_left_and_right_exact(self, rng):
        a = rng.standard_normal((3, 3)).astype(np.float32)
        eye = np.eye(3, dtype=np.float32)
        assert np.array_equal(tensor.matmul(eye, a), a)
        assert np.array_equal(tensor.matmul(a, eye), a)

    def test_hand_multiplication(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        b = np.array([[0], [1]], dtype=np.float32)
        assert tensor.matmul(a, b).tolist() == [[2.0], [4.0]]

    def test_zero_annihilator(self, rng):
        a = rng.standard_normal((4, 5)).astype(np.float32)
        zero = np.zeros((5, 2), dtype=np.float32)
        assert np.array_equal(tensor.matmul(a, zero), np.zeros((4, 2), dtype=np.float32))

    def test_dimension_mismatch_names_both_shapes(self):
        a = np.ones((2, 3), dtype=np.float32)
        b = np.ones((4, 2), dtype=np.float32)
        with pytest.raises(ContractViolation, match=r"\(2, 3\).*\(4, 2\)"):
            tensor.matmul(a, b)

    def test_matches_triple_loop_oracle(self, rng):
        a = rng.standard_normal((7, 5)).astype(np.float32)
        b = rng.standard_normal((5, 6)).astype(np.float32)
        expected = np.array(reference.matmul_triple_loop(a.tolist(), b.tolist()))
        got = tensor.matmul(a, b)
        assert np.allclose(got, expected, rtol=1e-5, atol=1e-6)

    def test_rejects_non_finite(self):
        a = np.array([[1.0, np.nan]], dtype=np.float32)
        with pytest.raises(ContractViolation, match="non-finite"):
            tensor.matmul(a, np.ones((2, 1), dtype=np.float32))


class TestTranspose:
    def test_involution(self, rng):
        a = rng.standard_normal((4, 7)).astype(np.float32)
        assert np.array_equal(tensor.transpose(tensor.transpose(a)), a)

    def test_shape_case(self):
        assert tensor.transpose(np.array([[1, 2, 3]], dtype=np.float32)).tolist() == [[1], [2], [3]]

    def test_symmetric_fixed_point(self, rng):
        a = rng.standard_normal((5, 5)).astype(np.float32)
        sym = a + a.T
        assert np.array_equal(tensor.transpose(sym), sym)


class TestFrobeniusNorm:
    def test_zero_matrix(self):
        assert tensor.frobenius_norm(np.zeros((3, 4), dtype=np.float32)) == 0.0

    def test_identity_is_sqrt_dim(self):
        assert tensor.frobenius_norm(np.eye(4, dtype=np.float32)) == pytest.approx(2.0)

    def test_three_four_five(self):
        assert tensor.frobenius_norm(np.array([[3, 4]], dtype=np.float32)) == pytest.approx(5.0)

    def test_transpose_invariance(self, rng):
        a = rng.standard_normal((33, 17)).astype(np.float32)
        fa = tensor.frobenius_norm(a)
        ft = tensor.frobenius_norm(tensor.transpose(a))
        assert fa == pytest.approx(ft, rel=1e-6)

    def test_matches_fsum_oracle(self, rng):
        a = rng.standard_normal((12, 9)).astype(np.float32)
        assert tensor.frobenius_norm(a) == pytest.approx(reference.frobenius_fsum(a.tolist()), rel=1e-6)


class TestRowSoftmax:
    def test_all_zero_row_uniform(self):
        got = tensor.row_softmax(np.zeros((1, 4), dtype=np.float32))
        assert np.allclose(got, 0.25, atol=1e-7)

    def test_large_logit_stability(self):
        got = tensor.row_softmax(np.array([[1000.0, 0.0]], dtype=np.float32))
        assert np.all(np.isfinite(got))
        assert got[0, 0] == pytest.approx(1.0)
        assert got[0, 1] == pytest.approx(0.0, abs=1e-30)

    def test_closed_form_ln2(self):
        got = tensor.row_softmax(np.array([[math.log(2.0), 0.0]], dtype=np.float32))
        assert got[0].tolist() == pytest.approx([2.0 / 3.0, 1.0 / 3.0], rel=1e-6)

    def test_masked_entries_exactly_zero(self, rng):
        logits = rng.standard_normal((5, 8)).astype(np.float32)
        mask = rng.random((5, 8)) < 0.6
        mask[:, 0] = True
        got = tensor.row_softmax(logits, mask)
        assert np.all(got[~mask] == 0.0)
        sums = np.sum(got.astype(np.float64), axis=1)
        assert np.allclose(sums, 1.0, atol=1e-6)

    def test_rows_sum_to_one_property(self, rng):
        for _ in range(50):
            logits = (rng.standard_normal((6, 12)) * rng.uniform(0.1, 50)).astype(np.float32)
            got = tensor.row_softmax(logits)
            assert np.allclose(np.sum(got.astype(np.float64), axis=1), 1.0, atol=1e-6)

    def test_empty_support_row_rejected(self):
        logits = np.zeros((2, 3), dtype=np.float32)
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(ContractViolation, match="row 1"):
            tensor.row_softmax(logits, mask)

    def test_matches_fsum_oracle(self, rng):
        row = rng.standard_normal(9).astype(np.float32)
        got = tensor.row_softmax(row[None, :])[0]
        expected = reference.softmax_row(row.tolist())
        assert np.allclose(got, expected, atol=1e-6)

    @pytest.mark.parametrize("eps", [1e-3, 1e-2, 1e-1])
    def test_uniform_envelope_property(self, eps, rng):
        # with max |logit| <= eps over support size S, every weight is within
        # (e^{2 eps} - 1)/S of uniform
        for _ in range(200):
            size = int(rng.integers(2, 64))
            row = rng.uniform(-eps, eps, size).astype(np.float32)
            got = tensor.row_softmax(row[None, :])[0].astype(np.float64)
            bound = (math.exp(2 * eps) - 1.0) / size
            assert np.max(np.abs(got - 1.0 / size)) <= bound


class TestNorms:
    def test_rms_unit_vector(self):
        ones = np.ones(8, dtype=np.float32)
        got = tensor.rms_norm(ones, ones, eps=1e-12)
        assert np.allclose(got, 1.0, atol=1e-6)

    def test_rms_zero_vector_stays_zero(self):
        zeros = np.zeros(4, dtype=np.float32)
        assert np.array_equal(tensor.rms_norm(zeros, np.ones(4, dtype=np.float32)), zeros)

    def test_rms_hand_case(self):
        x = np.array([3.0, 4.0], dtype=np.float32)
        got = tensor.rms_norm(x, np.ones(2, dtype=np.float32), eps=0.0)
        assert np.allclose(got, x / math.sqrt(12.5), rtol=1e-6)

    def test_rms_length_mismatch(self):
        with pytest.raises(ContractViolation, match="mismatch"):
            tensor.rms_norm(np.ones(3, dtype=np.float32), np.ones(4, dtype=np.float32))

    def test_layer_norm_constant_vector_gives_bias(self):
        x = np.full(5, 7.0, dtype=np.float32)
        bias = np.array([1, 2, 3, 4, 5], dtype=np.float32)
        got = tensor.layer_norm(x, np.ones(5, dtype=np.float32), bias)
        assert np.allclose(got, bias, atol=1e-3)

    def test_layer_norm_already_standardized(self):
        x = np.array([1.0, -1.0], dtype=np.float32)
        got = tensor.layer_norm(x, np.ones(2, dtype=np.float32), np.zeros(2, dtype=np.float32), eps=0.0)
        assert np.allclose(got, x, rtol=1e-6)

    def test_layer_norm_matches_two_pass_oracle(self):
        x = np.array([2.0, 4.0, 6.0], dtype=np.float32)
        gain = np.array([1.5, 0.5, 2.0], dtype=np.float32)
        bias = np.array([0.1, -0.2, 0.3], dtype=np.float32)
        got = tensor.layer_norm(x, gain, bias, eps=1e-6)
        expected = reference.layer_norm_two_pass(x.tolist(), gain.tolist(), bias.tolist(), 1e-6)
        assert np.allclose(got, expected, atol=1e-6)


class TestActivations:
    def test_zero_maps_to_zero(self):
        zeros = np.zeros(3, dtype=np.float32)
        assert np.array_equal(tensor.activation(zeros, "gelu"), zeros)
        assert np.array_equal(tensor.activation(zeros, "silu"), zeros)

    def test_gelu_asymptote(self):
        x = np.array([10.0], dtype=np.float32)
        assert tensor.gelu(x)[0] == pytest.approx(10.0, abs=1e-4)

    def test_silu_closed_form(self):
        got = tensor.silu(np.array([1.0], dtype=np.float32))[0]
        assert got == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), rel=1e-6)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ContractViolation, match="relu"):
            tensor.activation(np.zeros(2, dtype=np.float32), "relu")


class TestCosine:
    def test_self_similarity(self, rng):
        a = rng.standard_normal(16).astype(np.float32)
        assert tensor.cosine(a, a) == pytest.approx(1.0)

    def test_antiparallel(self, rng):
        a = rng.standard_normal(16).astype(np.float32)
        assert tensor.cosine(a, -a) == pytest.approx(-1.0)

    def test_forty_five_degrees(self):
        got = tensor.cosine(
            np.array([1.0, 0.0], dtype=np.float32), np.array([1.0, 1.0], dtype=np.float32)
        )
        assert got == pytest.approx(1.0 / math.sqrt(2.0), rel=1e-6)

    def test_zero_norm_rejected(self):
        with pytest.raises(ContractViolation, match="zero-norm"):
            tensor.cosine(np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32))

    def test_scale_invariance_property(self, rng):
        for _ in range(50):
            a = rng.standard_normal(12).astype(np.float32)
            b = rng.standard_normal(12).astype(np.float32)
            c = float(rng.uniform(1e-3, 1e3))
            assert tensor.cosine(c * a, b) == pytest.approx(tensor.cosine(a, b), abs=1e-6)

    def test_matches_fsum_oracle(self, rng):
        a = rng.standard_normal(20).astype(np.float32)
        b = rng.standard_normal(20).astype(np.float32)
        assert tensor.cosine(a, b) == pytest.approx(reference.cosine_fsum(a.tolist(), b.tolist()), abs=1e-7)


class TestMeanCenter:
    def test_repeated_row_goes_to_zero(self):
        rows = np.tile(np.array([1.0, 2.0, 3.0], dtype=np.float32), (4, 1))
        assert np.allclose(tensor.mean_center(rows), 0.0, atol=1e-7)

    def test_single_column_symmetry(self):
        got = tensor.mean_center(np.array([[1.0], [3.0]], dtype=np.float32))
        assert got.tolist() == [[-1.0], [1.0]]

    def test_matches_column_mean_oracle(self, rng):
        rows = rng.standard_normal((4, 3)).astype(np.float32)
        means = reference.column_means(rows.tolist())
        expected = rows - np.array(means, dtype=np.float64)
        assert np.allclose(tensor.mean_center(rows), expected, atol=1e-6)

    def test_output_row_mean_is_zero(self, rng):
        rows = (rng.standard_normal((16, 8)) * 5).astype(np.float32)
        centered = tensor.mean_center(rows)
        assert np.allclose(centered.mean(axis=0), 0.0, atol=1e-6)
