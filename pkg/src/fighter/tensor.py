"""Dense matrix kernels and the structural operators used by every model.

Matrices are plain 2-D ``float64`` numpy arrays. The helpers here add the
shape checking and the handful of structured constructions (row softmax,
block-diagonal replication, hop-concatenated powers) that the GCN, encoder
and Fighter layers are written in terms of.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument is outside the operation's domain."""


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(m: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(m).T)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _same_shape(a, b, "add")
    return a + b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _same_shape(a, b, "hadamard")
    return a * b


def scalar_mul(c: float, m: np.ndarray) -> np.ndarray:
    return float(c) * as_matrix(m)


def hconcat(blocks: Sequence[np.ndarray]) -> np.ndarray:
    if not blocks:
        raise ShapeError("hconcat needs at least one block")
    mats = [as_matrix(b, f"block {i}") for i, b in enumerate(blocks)]
    rows = {m.shape[0] for m in mats}
    if len(rows) != 1:
        raise ShapeError(f"hconcat: row counts differ {[m.shape for m in mats]}")
    return np.hstack(mats)


def take_rows(m: np.ndarray, idx) -> np.ndarray:
    return as_matrix(m)[np.asarray(idx, dtype=np.intp)]


def take_cols(m: np.ndarray, idx) -> np.ndarray:
    return as_matrix(m)[:, np.asarray(idx, dtype=np.intp)]


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def block_diag_replicate(x: np.ndarray, kappa: int) -> np.ndarray:
    """``blkdiag(x; kappa)``: kappa copies of ``x`` on the block diagonal."""
    x = as_matrix(x, "x")
    if int(kappa) != kappa or kappa < 1:
        raise DomainError(f"kappa must be a positive integer, got {kappa}")
    r, c = x.shape
    out = np.zeros((kappa * r, kappa * c))
    for i in range(kappa):
        out[i * r:(i + 1) * r, i * c:(i + 1) * c] = x
    return out


def matrix_powers(a: np.ndarray, kappa: int) -> list[np.ndarray]:
    """[I, A, ..., A^(kappa-1)] by repeated left multiplication."""
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix powers need a square matrix, got {a.shape}")
    if int(kappa) != kappa or kappa < 1:
        raise DomainError(f"kappa must be a positive integer, got {kappa}")
    powers = [np.eye(a.shape[0])]
    for _ in range(1, kappa):
        powers.append(a @ powers[-1])
    return powers


def hop_concat_powers(a: np.ndarray, kappa: int) -> np.ndarray:
    """``A^[kappa] = [I, A, ..., A^(kappa-1)]``, shape (n, kappa*n)."""
    return np.hstack(matrix_powers(a, kappa))


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(as_matrix(m), 0.0)


def relu_grad(m: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return (as_matrix(m) > 0).astype(np.float64)


def identity(m: np.ndarray) -> np.ndarray:
    return as_matrix(m).copy()


def identity_grad(m: np.ndarray) -> np.ndarray:
    return np.ones_like(as_matrix(m))


ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "identity": (identity, identity_grad),
}


def activation(name: str):
    """Return ``(sigma, sigma_dot)`` for an activation identifier."""
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise DomainError(
            f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}"
        ) from None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Symmetric uniform init with bound sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
