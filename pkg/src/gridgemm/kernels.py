"""Sequential per-worker kernels.

All GEMM paths accumulate with ``k`` innermost and ascending, one rounding
per multiply and one per add, so a distributed product assembled from
these kernels is bitwise equal to the plain triple loop at the same
working precision. Half inputs are widened to single for arithmetic and
rounded back only when stored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Precision


class ShapeError(ValueError):
    pass


class PrecisionMismatchError(TypeError):
    pass


@dataclass
class ConversionReport:
    converted: int = 0
    overflowed: int = 0


def _op(x: np.ndarray, trans: bool) -> np.ndarray:
    return x.T if trans else x


def working_dtype(*arrays: np.ndarray) -> np.dtype:
    precs = {Precision.of(a.dtype) for a in arrays}
    if len(precs) != 1:
        raise PrecisionMismatchError(
            f"operands must share one precision, got {sorted(p.label for p in precs)}"
        )
    return precs.pop().compute_dtype


def gemm_accumulate(acc: np.ndarray, a: np.ndarray, b: np.ndarray,
                    trans_a: bool = False, trans_b: bool = False) -> np.ndarray:
    """``acc += op(a) @ op(b)`` in ascending-k order, in acc's dtype."""
    opa, opb = _op(a, trans_a), _op(b, trans_b)
    if opa.shape[1] != opb.shape[0] or acc.shape != (opa.shape[0], opb.shape[1]):
        raise ShapeError(f"cannot accumulate {opa.shape} x {opb.shape} into {acc.shape}")
    wa = opa.astype(acc.dtype, copy=False)
    wb = opb.astype(acc.dtype, copy=False)
    for k in range(wa.shape[1]):
        acc += wa[:, k:k + 1] * wb[k:k + 1, :]
    return acc


def gemm_finalize(alpha: float, acc: np.ndarray, beta: float, c: np.ndarray) -> None:
    """Store ``alpha*acc + beta*c`` into c, rounding to c's precision once."""
    work = acc.dtype.type
    out = work(alpha) * acc
    if beta != 0:
        out = out + work(beta) * c.astype(acc.dtype)
    c[...] = out.astype(c.dtype)


def local_gemm(alpha: float, a: np.ndarray, b: np.ndarray, beta: float, c: np.ndarray,
               trans_a: bool = False, trans_b: bool = False) -> np.ndarray:
    """C <- alpha*op(A)*op(B) + beta*C, in place. With beta == 0 C is never read."""
    work = working_dtype(a, b, c)
    opa, opb = _op(a, trans_a), _op(b, trans_b)
    if opa.shape[1] != opb.shape[0]:
        raise ShapeError(f"inner dimensions differ: {opa.shape} x {opb.shape}")
    if c.shape != (opa.shape[0], opb.shape[1]):
        raise ShapeError(f"C is {c.shape}, product is {(opa.shape[0], opb.shape[1])}")
    acc = np.zeros(c.shape, dtype=work)
    gemm_accumulate(acc, a, b, trans_a, trans_b)
    gemm_finalize(alpha, acc, beta, c)
    return c


def reference_gemm(alpha, a, b, beta, c, trans_a=False, trans_b=False) -> list[list[float]]:
    """Plain-Python triple loop at double precision; the oracle for every GEMM path."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    m = a.shape[1] if trans_a else a.shape[0]
    k_dim = a.shape[0] if trans_a else a.shape[1]
    n = b.shape[0] if trans_b else b.shape[1]
    al = a.tolist()
    bl = b.tolist()
    cl = c.tolist()
    out = []
    for i in range(m):
        row = []
        for j in range(n):
            s = 0.0
            for k in range(k_dim):
                x = al[k][i] if trans_a else al[i][k]
                y = bl[j][k] if trans_b else bl[k][j]
                s += x * y
            v = alpha * s
            if beta != 0:
                v = v + beta * cl[i][j]
            row.append(v)
        out.append(row)
    return out


def convert_precision(src: np.ndarray, precision: Precision,
                      report: ConversionReport | None = None) -> np.ndarray:
    """Round-to-nearest-even into ``precision``; overflow saturates to +-inf."""
    with np.errstate(over="ignore"):
        out = np.asarray(src).astype(precision.dtype)
    if report is not None:
        report.converted += out.size
        with np.errstate(invalid="ignore"):
            report.overflowed += int(np.count_nonzero(np.isinf(out) & np.isfinite(src)))
    return out


def local_transpose(view: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(view.T)


def local_row_col_sums(view: np.ndarray, axis: int, acc: np.ndarray | None = None) -> np.ndarray:
    """Left-to-right sums; axis=1 gives one sum per row, axis=0 one per column.

    Passing ``acc`` continues an earlier running sum instead of starting at zero.
    """
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    work = Precision.of(view.dtype).compute_dtype
    w = view.astype(work, copy=False)
    lines = [w[:, j] for j in range(w.shape[1])] if axis == 1 else [w[i, :] for i in range(w.shape[0])]
    acc = np.zeros(w.shape[1 - axis], dtype=work) if acc is None else acc.copy()
    for line in lines:
        acc += line
    return acc
