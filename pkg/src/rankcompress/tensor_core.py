"""Dense tensor algebra for Tucker-2 factorization of 4-way kernels.

Tensors are plain ``numpy.ndarray`` objects.  A kernel is a 4-way array with
dims ``(O, I, H, W)``; modes are numbered 1..4 in that order.

Unfolding convention: the mode-n fibers become the columns of a
``dims[n] x prod(other dims)`` matrix, and the remaining indices are laid out
with the earliest-listed remaining dim varying slowest (C order).  ``fold``
is its exact inverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "SvdResult",
    "TuckerFactors",
    "unfold",
    "fold",
    "mode_product",
    "svd",
    "leading_left_singular_vectors",
    "Tucker2Basis",
    "tucker2_hosvd",
    "tucker2_hooi",
    "reconstruct",
    "relative_error",
]

HOOI_MAX_ITERS = 10
HOOI_TOL = 1e-6


def _check_mode(t: np.ndarray, mode: int) -> int:
    if not isinstance(mode, (int, np.integer)) or not 1 <= mode <= t.ndim:
        raise ValueError(f"mode must be in 1..{t.ndim}, got {mode!r}")
    return int(mode) - 1


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding (1-based) of ``t``."""
    t = np.asarray(t)
    axis = _check_mode(t, mode)
    return np.moveaxis(t, axis, 0).reshape(t.shape[axis], -1)


def fold(m: np.ndarray, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of shape ``dims``."""
    dims = tuple(int(d) for d in dims)
    if not 1 <= mode <= len(dims):
        raise ValueError(f"mode must be in 1..{len(dims)}, got {mode!r}")
    axis = mode - 1
    moved = (dims[axis],) + dims[:axis] + dims[axis + 1:]
    m = np.asarray(m)
    if m.size != int(np.prod(dims)):
        raise ShapeError(f"cannot fold {m.shape} into {dims}")
    return np.moveaxis(m.reshape(moved), 0, axis)


def mode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """n-mode product ``t x_mode m``: contracts ``m``'s columns with ``t``'s mode."""
    t = np.asarray(t)
    m = np.asarray(m)
    axis = _check_mode(t, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[axis]:
        raise ShapeError(
            f"matrix {m.shape} incompatible with mode {mode} of tensor {t.shape}"
        )
    out = np.tensordot(m, t, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    def recompose(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def _fix_signs(u: np.ndarray, v: np.ndarray | None = None):
    # largest-magnitude entry of each left vector is made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    if v is not None:
        v = v * signs
    return u, v


def svd(a: np.ndarray, max_rank: int | None = None) -> SvdResult:
    """Leading ``max_rank`` singular triplets of ``a``.

    Singular values come back non-increasing; ``u`` is ``rows x r`` and ``v``
    is ``cols x r``, both with orthonormal columns.  Signs are normalized so
    the largest-magnitude entry of every left singular vector is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("svd input contains non-finite values")
    full = min(a.shape)
    if max_rank is None:
        max_rank = full
    if not 1 <= max_rank <= full:
        raise ValueError(f"max_rank must be in 1..{full}, got {max_rank}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    u, v = _fix_signs(u[:, :max_rank], vt[:max_rank].T)
    return SvdResult(u=u, singular_values=s[:max_rank], v=v)


def leading_left_singular_vectors(a: np.ndarray, rank: int | None = None) -> np.ndarray:
    """Leading ``rank`` left singular vectors of ``a`` (default: all ``rows``).

    Unlike :func:`svd`, ``rank`` may exceed ``cols`` for tall matrices; the
    extra columns complete an orthonormal basis of the row space.
    """
    a = np.asarray(a, dtype=np.float64)
    rows, cols = a.shape
    if rank is None:
        rank = rows
    if not 1 <= rank <= rows:
        raise ValueError(f"rank must be in 1..{rows}, got {rank}")
    if rank <= cols:
        return svd(a, rank).u
    if not np.all(np.isfinite(a)):
        raise NumericError("input contains non-finite values")
    u, _, _ = np.linalg.svd(a, full_matrices=True)
    return _fix_signs(u[:, :rank])[0]


@dataclass(frozen=True)
class TuckerFactors:
    """Tucker-2 factorization ``w ~= core x1 u_out x2 u_in``.

    ``core`` has dims ``(R2, R1, H, W)``; ``u_out`` is ``O x R2`` and ``u_in``
    is ``I x R1``.  ``errors`` holds the relative reconstruction error after
    initialization and after each refinement sweep (HOOI only).
    """

    core: np.ndarray
    u_out: np.ndarray
    u_in: np.ndarray
    errors: tuple = field(default=(), compare=False)

    @property
    def ranks(self) -> tuple[int, int]:
        """``(r1, r2)``: input-mode rank, output-mode rank."""
        return self.u_in.shape[1], self.u_out.shape[1]


def reconstruct(f: TuckerFactors) -> np.ndarray:
    return mode_product(mode_product(f.core, f.u_out, 1), f.u_in, 2)


def relative_error(w: np.ndarray, approx: np.ndarray) -> float:
    norm = np.linalg.norm(w)
    if norm == 0:
        return float(np.linalg.norm(approx))
    return float(np.linalg.norm(w - approx) / norm)


def _check_kernel(w: np.ndarray, r1: int, r2: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"expected a 4-way kernel, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError("kernel contains non-finite values")
    o, i = w.shape[:2]
    if not 1 <= r1 <= i:
        raise ValueError(f"r1 must be in 1..{i}, got {r1}")
    if not 1 <= r2 <= o:
        raise ValueError(f"r2 must be in 1..{o}, got {r2}")
    return w


def _core(w, u_out, u_in):
    return mode_product(mode_product(w, u_out.T, 1), u_in.T, 2)


def _tucker_error(w, core, u_out, u_in) -> float:
    approx = mode_product(mode_product(core, u_out, 1), u_in, 2)
    return relative_error(w, approx)


class Tucker2Basis:
    """Full channel-mode singular bases of one kernel.

    Truncated HOSVD at any rank pair is a column slice of these bases, so a
    nested rank grid costs two SVDs in total.
    """

    def __init__(self, w: np.ndarray):
        w = _check_kernel(w, 1, 1)
        self.w = w
        self.u_out = leading_left_singular_vectors(unfold(w, 1))
        self.u_in = leading_left_singular_vectors(unfold(w, 2))

    def factors(self, r1: int, r2: int) -> TuckerFactors:
        _check_kernel(self.w, r1, r2)
        u_out = self.u_out[:, :r2]
        u_in = self.u_in[:, :r1]
        core = _core(self.w, u_out, u_in)
        err = _tucker_error(self.w, core, u_out, u_in)
        return TuckerFactors(core=core, u_out=u_out, u_in=u_in, errors=(err,))


def tucker2_hosvd(w: np.ndarray, r1: int, r2: int) -> TuckerFactors:
    """Truncated HOSVD along the output (mode 1) and input (mode 2) channels."""
    _check_kernel(w, r1, r2)
    return Tucker2Basis(w).factors(r1, r2)


def tucker2_hooi(
    w: np.ndarray,
    r1: int,
    r2: int,
    max_iters: int = HOOI_MAX_ITERS,
    tol: float = HOOI_TOL,
) -> TuckerFactors:
    """HOSVD-initialized higher-order orthogonal iteration for Tucker-2.

    Each sweep re-solves ``u_in`` with ``u_out`` fixed, then ``u_out`` with
    ``u_in`` fixed.  Stops after ``max_iters`` sweeps or once the relative
    error changes by less than ``tol``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    init = tucker2_hosvd(w, r1, r2)
    w = np.asarray(w, dtype=np.float64)
    u_out, u_in = init.u_out, init.u_in
    errors = [init.errors[0]]
    core = init.core
    for _ in range(max_iters):
        u_in = leading_left_singular_vectors(unfold(mode_product(w, u_out.T, 1), 2), r1)
        u_out = leading_left_singular_vectors(unfold(mode_product(w, u_in.T, 2), 1), r2)
        core = _core(w, u_out, u_in)
        errors.append(_tucker_error(w, core, u_out, u_in))
        if abs(errors[-2] - errors[-1]) < tol:
            break
    return TuckerFactors(core=core, u_out=u_out, u_in=u_in, errors=tuple(errors))
