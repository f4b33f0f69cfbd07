"""Dense/sparse kernels, row-wise DFT and elementwise reductions.

Dense matrices are plain ``float64`` numpy arrays and sparse matrices are
``scipy.sparse.csr_matrix`` in canonical form (sorted, duplicate-free
indices).  The functions here add shape checking and the few conventions
the sketching code depends on; the arithmetic itself is numpy/scipy.
"""
from __future__ import annotations

import struct
import warnings
from typing import BinaryIO, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ShapeError",
    "NumericalHealthWarning",
    "as_dense",
    "as_csr",
    "spmm",
    "gemm",
    "fft_rows",
    "ifft_rows",
    "hadamard",
    "elementwise_median",
    "write_matrix",
    "read_matrix",
    "matrix_nbytes",
]

IMAG_RESIDUE_TOL = 1e-6


class ShapeError(ValueError):
    """Raised when operand shapes do not chain."""


class NumericalHealthWarning(RuntimeWarning):
    """Emitted when an inverse DFT leaves a large imaginary residue."""


def as_dense(a) -> np.ndarray:
    if sp.issparse(a):
        return np.asarray(a.toarray(), dtype=np.float64)
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {out.shape}")
    return out


def as_csr(a) -> sp.csr_matrix:
    """Return ``a`` as a canonical float64 CSR matrix."""
    m = sp.csr_matrix(a, dtype=np.float64)
    if not m.has_canonical_format:
        m = m.copy()
        m.sum_duplicates()
        m.sort_indices()
    return m


def spmm(a, b) -> np.ndarray:
    """Sparse-dense product ``a @ b``."""
    a = as_csr(a)
    b = as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"spmm: {a.shape} @ {b.shape}")
    return np.asarray(a @ b)


def gemm(a, b) -> np.ndarray:
    a = as_dense(a)
    b = as_dense(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm: {a.shape} @ {b.shape}")
    return a @ b


def fft_rows(m) -> np.ndarray:
    """Unnormalized forward DFT of every row, transform length == row length.

    numpy's pocketfft backend handles any length exactly (mixed radix with
    Bluestein for large prime factors), so no zero padding ever happens.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"fft_rows expects a matrix, got shape {m.shape}")
    return np.fft.fft(m, axis=1)


def ifft_rows(m, *, return_residue: bool = False):
    """Inverse DFT per row with ``1/c`` scaling; returns the real part.

    The largest absolute imaginary part is a health check: a real-valued
    pipeline must keep conjugate symmetry, so anything above 1e-6 triggers a
    :class:`NumericalHealthWarning`.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"ifft_rows expects a matrix, got shape {m.shape}")
    z = np.fft.ifft(m, axis=1)
    residue = float(np.max(np.abs(z.imag))) if z.size else 0.0
    if residue > IMAG_RESIDUE_TOL:
        warnings.warn(
            f"ifft_rows: imaginary residue {residue:.3g} exceeds {IMAG_RESIDUE_TOL}",
            NumericalHealthWarning,
            stacklevel=2,
        )
    if return_residue:
        return z.real.copy(), residue
    return z.real.copy()


def hadamard(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    return a * b


def elementwise_median(ms: Sequence) -> np.ndarray:
    """Entrywise median over a list of equally shaped matrices.

    Even counts take the mean of the two central values (numpy's convention).
    """
    if len(ms) == 0:
        raise ValueError("elementwise_median of an empty list")
    shape = np.shape(ms[0])
    for m in ms:
        if np.shape(m) != shape:
            raise ShapeError(f"elementwise_median: {np.shape(m)} vs {shape}")
    return np.median(np.stack([np.asarray(m, dtype=np.float64) for m in ms]), axis=0)


def matrix_nbytes(m) -> int:
    """Bytes held by a dense or CSR matrix payload."""
    if sp.issparse(m):
        m = m.tocsr()
        return int(m.data.nbytes + m.indices.nbytes + m.indptr.nbytes)
    return int(np.asarray(m).nbytes)


# Binary format: magic, u32 version, u8 kind, u64 rows, u64 cols, then
#   dense: rows*cols f64
#   csr:   u64 nnz, (rows+1) u64 offsets, nnz u64 cols, nnz f64 values
# all little-endian.
_MAGIC = b"SKGM"
_VERSION = 1
_DENSE, _CSR = 0, 1
_HEADER = struct.Struct("<4sIBQQ")


class FormatError(ValueError):
    """Unreadable or incompatible binary matrix payload."""


def write_matrix(fh: BinaryIO, m) -> None:
    if sp.issparse(m):
        m = as_csr(m)
        rows, cols = m.shape
        fh.write(_HEADER.pack(_MAGIC, _VERSION, _CSR, rows, cols))
        fh.write(struct.pack("<Q", m.nnz))
        fh.write(m.indptr.astype("<u8").tobytes())
        fh.write(m.indices.astype("<u8").tobytes())
        fh.write(m.data.astype("<f8").tobytes())
    else:
        m = as_dense(m)
        rows, cols = m.shape
        fh.write(_HEADER.pack(_MAGIC, _VERSION, _DENSE, rows, cols))
        fh.write(np.ascontiguousarray(m).astype("<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated matrix payload")
    return buf


def read_matrix(fh: BinaryIO):
    magic, version, kind, rows, cols = _HEADER.unpack(_read_exact(fh, _HEADER.size))
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported matrix format version {version}")
    if kind == _DENSE:
        data = np.frombuffer(_read_exact(fh, 8 * rows * cols), dtype="<f8")
        return data.astype(np.float64).reshape(rows, cols)
    if kind == _CSR:
        (nnz,) = struct.unpack("<Q", _read_exact(fh, 8))
        indptr = np.frombuffer(_read_exact(fh, 8 * (rows + 1)), dtype="<u8")
        indices = np.frombuffer(_read_exact(fh, 8 * nnz), dtype="<u8")
        data = np.frombuffer(_read_exact(fh, 8 * nnz), dtype="<f8")
        return sp.csr_matrix(
            (data.astype(np.float64), indices.astype(np.int64), indptr.astype(np.int64)),
            shape=(rows, cols),
        )
    raise FormatError(f"unknown matrix kind {kind}")
