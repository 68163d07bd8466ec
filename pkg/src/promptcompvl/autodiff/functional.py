# Differentiable primitives over 2-D (and scalar) float64 tensors.
#
# Every function validates shapes up front, computes its result with numpy
# and hands a closure computing the input adjoints to _emit().  No
# broadcasting happens beyond what each docstring states.
#
# Tests are in tests/autodiff/test_functional.py.
from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from ..errors import AllMaskedError, ContractError, DegenerateInputError, DimensionError
from .tensor import FloatArray, Tensor, _emit


__all__ = [
    "add",
    "add_constant",
    "add_row",
    "concat_cols",
    "concat_rows",
    "cross_entropy",
    "embedding_lookup",
    "layer_norm_rows",
    "l2_normalize_rows",
    "matmul",
    "mul",
    "mul_row",
    "quick_gelu",
    "scale",
    "slice_cols",
    "softmax_rows",
    "sum",
    "transpose",
]


# Rows whose Euclidean norm falls below this cannot be normalized.
NORM_FLOOR = 1e-12


def _require_matrix(op: str, x: Tensor) -> None:
    if len(x.shape) != 2:
        raise DimensionError(op, x.shape)


def _require_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


def _indices(op: str, indices: Sequence[int], limit: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((idx < 0) | (idx >= limit))
    if bad.size:
        raise IndexError(f'{op}: index {int(idx[bad[0]])} out of range [0, {limit})')
    return idx


# ── Linear algebra ───────────────────────────────────────────────────────────


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` (m×k) and ``b`` (k×n).

    Raises:
        DimensionError: If either operand is not 2-D or the inner dimensions
            disagree; the message names both shapes.
    """
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError('matmul', a.shape, b.shape)
    av, bv = a.values, b.values

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), adjoint)


def transpose(x: Tensor) -> Tensor:
    _require_matrix('transpose', x)
    return _emit(np.ascontiguousarray(x.values.T), (x,), lambda g: (g.T,))


# ── Elementwise ──────────────────────────────────────────────────────────────


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _require_same('add', a, b)
    return _emit(a.values + b.values, (a, b), lambda g: (g, g))


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m×n matrix."""
    _require_matrix('add_row', x)
    if bias.size != x.shape[1]:
        raise DimensionError('add_row', x.shape, bias.shape)
    row = bias.values.reshape(1, -1)

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return g, g.sum(axis=0).reshape(bias.shape)

    return _emit(x.values + row, (x, bias), adjoint)


def add_constant(x: Tensor, constant: FloatArray) -> Tensor:
    """Add a non-differentiable array of the same shape (e.g. an attention mask)."""
    constant = np.asarray(constant, dtype=np.float64)
    if constant.shape != x.shape:
        raise DimensionError('add_constant', x.shape, constant.shape)
    return _emit(x.values + constant, (x,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _require_same('mul', a, b)
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def mul_row(x: Tensor, gain: Tensor) -> Tensor:
    """Multiply every row of an m×n matrix elementwise by a length-n vector."""
    _require_matrix('mul_row', x)
    if gain.size != x.shape[1]:
        raise DimensionError('mul_row', x.shape, gain.shape)
    xv = x.values
    row = gain.values.reshape(1, -1)

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (g * row,
                (g * xv).sum(axis=0).reshape(gain.shape) if gain.requires_grad else None)

    return _emit(xv * row, (x, gain), adjoint)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    return _emit(x.values * factor, (x,), lambda g: (g * factor,))


def quick_gelu(x: Tensor) -> Tensor:
    """x * sigmoid(1.702 x), the activation used by CLIP's text tower."""
    xv = x.values
    s = 1.0 / (1.0 + np.exp(-1.702 * xv))

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (g * (s + 1.702 * xv * s * (1.0 - s)),)

    return _emit(xv * s, (x,), adjoint)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of every entry, as a scalar tensor."""
    return _emit(np.asarray(x.values.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


# ── Row-wise normalisation ───────────────────────────────────────────────────


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale every row of ``x`` to unit Euclidean norm.

    Raises:
        DegenerateInputError: If a row's norm is below 1e-12; identifies the row.
    """
    _require_matrix('l2_normalize_rows', x)
    xv = x.values
    norms = np.sqrt(np.einsum('ij,ij->i', xv, xv))
    small = np.flatnonzero(norms < NORM_FLOOR)
    if small.size:
        raise DegenerateInputError(int(small[0]), float(norms[small[0]]))
    norms = norms[:, None]
    y = xv / norms

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return ((g - y * np.einsum('ij,ij->i', g, y)[:, None]) / norms,)

    return _emit(y, (x,), adjoint)


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rows (no affine part; see mul_row/add_row)."""
    _require_matrix('layer_norm_rows', x)
    xv = x.values
    centered = xv - xv.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    y = centered * inv_std

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return (inv_std * (g - gm - y * gym),)

    return _emit(y, (x,), adjoint)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's maximum.

    ``-inf`` entries are the masking sentinel and map to exactly 0.

    Raises:
        AllMaskedError: If every entry of some row is ``-inf``.
        ContractError: If an entry is NaN or ``+inf``.
    """
    _require_matrix('softmax_rows', x)
    xv = x.values
    if np.isnan(xv).any() or np.isposinf(xv).any():
        raise ContractError('softmax_rows: entries must be finite or -inf')
    row_max = xv.max(axis=1, keepdims=True)
    masked = np.flatnonzero(np.isneginf(row_max[:, 0]))
    if masked.size:
        raise AllMaskedError(int(masked[0]))
    e = np.exp(xv - row_max)
    y = e / e.sum(axis=1, keepdims=True)

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(y, (x,), adjoint)


# ── Gather / scatter and reshaping ───────────────────────────────────────────


def embedding_lookup(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of ``table`` (V×d); backward scatter-adds into those rows.

    Raises:
        IndexError: If an index lies outside [0, V); names the value.
    """
    _require_matrix('embedding_lookup', table)
    idx = _indices('embedding_lookup', indices, table.shape[0])
    if idx.size == 0:
        raise ContractError('embedding_lookup: at least one index is required')

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        out = np.zeros(table.shape, dtype=np.float64)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.values[idx], (table,), adjoint)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices with equal column counts vertically."""
    if not parts:
        raise ContractError('concat_rows: nothing to concatenate')
    for p in parts:
        _require_matrix('concat_rows', p)
        if p.shape[1] != parts[0].shape[1]:
            raise DimensionError('concat_rows', parts[0].shape, p.shape)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.values for p in parts], axis=0), tuple(parts), adjoint)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Join matrices with equal row counts side by side."""
    if not parts:
        raise ContractError('concat_cols: nothing to concatenate')
    for p in parts:
        _require_matrix('concat_cols', p)
        if p.shape[0] != parts[0].shape[0]:
            raise DimensionError('concat_cols', parts[0].shape, p.shape)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.values for p in parts], axis=1), tuple(parts), adjoint)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a matrix."""
    _require_matrix('slice_cols', x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError('slice_cols', x.shape, (start, stop))
    cols = x.shape[1]

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        out = np.zeros((g.shape[0], cols), dtype=np.float64)
        out[:, start:stop] = g
        return (out,)

    return _emit(np.ascontiguousarray(x.values[:, start:stop]), (x,), adjoint)


# ── Loss ─────────────────────────────────────────────────────────────────────


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target].

    Raises:
        DimensionError: If ``targets`` does not have one entry per row.
        IndexError: If a target lies outside [0, K).
    """
    _require_matrix('cross_entropy', logits)
    m, k = logits.shape
    idx = _indices('cross_entropy', targets, k)
    if idx.size != m:
        raise DimensionError('cross_entropy', logits.shape, (idx.size,))
    xv = logits.values
    row_max = xv.max(axis=1, keepdims=True)
    shifted = xv - row_max
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(m)
    loss = -log_probs[rows, idx].mean()

    def adjoint(g: FloatArray) -> tuple[FloatArray | None, ...]:
        grad = np.exp(log_probs)
        grad[rows, idx] -= 1.0
        return (grad * (float(g) / m),)

    return _emit(np.asarray(loss), (logits,), adjoint)
