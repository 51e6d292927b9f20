"""Dense float32 linear-algebra kernels used by every other module.

Matrices are 2-D row-major float32 numpy arrays, vectors are 1-D float32
arrays. All kernels are pure functions; inputs are never mutated. matmul is
delegated to the BLAS behind numpy (float32 accumulation, deterministic for a
fixed platform and thread count); reductions that feed scores accumulate in
float64 so large sums do not lose rank-deciding precision.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation

DTYPE = np.float32

# tanh-approximation GELU coefficients (the common 0.044715 cubic form)
_GELU_SCALE = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float32 array, rejecting empties and non-finite values."""
    arr = np.asarray(a, dtype=DTYPE)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be rank-2, got rank {arr.ndim}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ContractViolation(f"{name} must have positive shape, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be rank-1, got rank {arr.ndim}")
    if arr.shape[0] == 0:
        raise ContractViolation(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return np.matmul(a, b)


def transpose(a: np.ndarray) -> np.ndarray:
    """Row-major transposed copy: (i, j) -> (j, i)."""
    return np.ascontiguousarray(as_matrix(a).T)


def frobenius_norm(a: np.ndarray) -> float:
    """sqrt of the sum of squared entries, accumulated in float64.

    Row partial sums run left to right, rows are reduced top to bottom, so
    the result is reproducible run to run.
    """
    a = as_matrix(a)
    row_sq = np.einsum("ij,ij->i", a, a, dtype=np.float64)
    return float(np.sqrt(np.add.reduce(row_sq)))


def row_softmax(logits: np.ndarray, support_mask: np.ndarray | None = None) -> np.ndarray:
    """Numerically stabilized softmax over each row's unmasked support.

    Masked entries come out exactly 0; each row sums to 1 over its support.
    A row with empty support is a contract violation.
    """
    logits = as_matrix(logits, "logits")
    if support_mask is not None:
        mask = np.asarray(support_mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ContractViolation(
                f"support_mask shape {mask.shape} != logits shape {logits.shape}"
            )
        empty = ~mask.any(axis=1)
        if empty.any():
            raise ContractViolation(
                f"row {int(np.argmax(empty))} has empty softmax support"
            )
        work = np.where(mask, logits, -np.inf)
    else:
        work = logits
    shifted = work - np.max(work, axis=1, keepdims=True)
    weights = np.exp(shifted, dtype=DTYPE)  # exp(-inf) == 0 keeps masked entries exact
    totals = np.sum(weights, axis=1, keepdims=True, dtype=np.float64)
    return (weights / totals).astype(DTYPE)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Root-mean-square normalization: x * gain / sqrt(mean(x^2) + eps)."""
    x = as_vector(x, "x")
    gain = as_vector(gain, "gain")
    if x.shape != gain.shape:
        raise ContractViolation(f"rms_norm length mismatch: {x.shape} vs {gain.shape}")
    ms = float(np.mean(np.square(x, dtype=np.float64)))
    return (x * gain / np.sqrt(ms + eps)).astype(DTYPE)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Mean-and-variance normalization: (x - mean) / sqrt(var + eps) * gain + bias."""
    x = as_vector(x, "x")
    gain = as_vector(gain, "gain")
    bias = as_vector(bias, "bias")
    if x.shape != gain.shape or x.shape != bias.shape:
        raise ContractViolation(
            f"layer_norm length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mean = float(np.mean(x, dtype=np.float64))
    var = float(np.mean(np.square(x - mean, dtype=np.float64)))
    return ((x - mean) / np.sqrt(var + eps) * gain + bias).astype(DTYPE)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU via the tanh approximation 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = np.asarray(x, dtype=DTYPE)
    inner = _GELU_SCALE * (x + _GELU_CUBIC * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(DTYPE)


def silu(x: np.ndarray) -> np.ndarray:
    """SiLU / swish: x * sigmoid(x)."""
    x = np.asarray(x, dtype=DTYPE)
    return (x / (1.0 + np.exp(-x))).astype(DTYPE)


_ACTIVATIONS = {"gelu": gelu, "silu": silu}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise nonlinearity, kind in {'gelu', 'silu'}."""
    try:
        fn = _ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ContractViolation(f"unknown activation kind {kind!r}") from None
    return fn(x)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity a.b / (|a||b|), clamped to [-1, 1].

    Accumulates in float64: importance scores are differences of cosines near
    1, where float32 accumulation would drown the signal. Zero-norm inputs
    are rejected rather than given a 0/0 convention.
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ContractViolation(f"cosine length mismatch: {a.shape} vs {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = math.sqrt(float(np.dot(a64, a64)))
    nb = math.sqrt(float(np.dot(b64, b64)))
    if na == 0.0 or nb == 0.0:
        raise ContractViolation("cosine of a zero-norm vector is undefined")
    return min(1.0, max(-1.0, float(np.dot(a64, b64)) / (na * nb)))


def mean_center(rows: np.ndarray) -> np.ndarray:
    """Subtract the column-wise mean row from every row."""
    rows = as_matrix(rows, "rows")
    mean = np.mean(rows, axis=0, dtype=np.float64)
    return (rows - mean).astype(DTYPE)
