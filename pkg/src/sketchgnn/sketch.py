"""Count sketch, tensor sketch and the derived graph/feature sketches.

Orientation convention: a "row sketch" of ``U`` (d x n) hashes the n columns
of ``U`` into c buckets, giving a d x c matrix whose ``b``-th column is
``sum_{j: h(j)=b} s(j) U[:, j]``.  Node-feature sketches are row sketches of
``X.T`` and the count-sketch matrix itself is never exposed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .linalg import ShapeError, as_csr, as_dense, elementwise_median, matrix_nbytes

__all__ = [
    "HashPair",
    "SketchFamily",
    "TwoSidedConvSketches",
    "BasisChange",
    "splitmix64",
    "random_hash_pair",
    "identity_hash_pair",
    "random_family",
    "identity_family",
    "count_sketch_rows",
    "count_sketch_sparse",
    "tensor_sketch_rows",
    "tensor_sketch_sparse_rows",
    "two_sided_sketch_conv",
    "basis_change_matrix",
    "ones_sketch",
    "unsketch_median",
    "unsketch_rows",
    "unsketch_node",
    "compact",
    "stack_family",
    "conv_row_deltas",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def splitmix64(x) -> np.ndarray:
    """Vectorised splitmix64 finaliser on uint64 input (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass
class HashPair:
    """Bucket table ``h: [n] -> [c]`` with Rademacher signs ``s``.

    Instances are treated as immutable except through :meth:`reassign`,
    which is only called from the rehash path while it holds the family.
    """

    h: np.ndarray
    s: np.ndarray
    c: int

    def __post_init__(self):
        self.h = np.ascontiguousarray(self.h, dtype=np.int64)
        self.s = np.ascontiguousarray(self.s, dtype=np.float64)
        if self.h.ndim != 1 or self.h.shape != self.s.shape:
            raise ValueError("h and s must be 1-d arrays of equal length")
        if self.h.size < 1 or not 1 <= self.c:
            raise ValueError(f"invalid hash pair dimensions n={self.h.size}, c={self.c}")
        if self.h.size and (self.h.min() < 0 or self.h.max() >= self.c):
            raise ValueError("bucket index out of range")
        if not np.all(np.abs(self.s) == 1.0):
            raise ValueError("signs must be +1 or -1")

    @property
    def n(self) -> int:
        return int(self.h.size)

    def matrix(self) -> sp.csr_matrix:
        """The n x c count-sketch operator ``R`` with ``R[j, h(j)] = s(j)``."""
        return sp.csr_matrix(
            (self.s, (np.arange(self.n), self.h)), shape=(self.n, self.c)
        )

    def bucket_sizes(self) -> np.ndarray:
        return np.bincount(self.h, minlength=self.c)

    def reassign(self, nodes, buckets) -> None:
        buckets = np.asarray(buckets, dtype=np.int64)
        if buckets.size and (buckets.min() < 0 or buckets.max() >= self.c):
            raise ValueError("bucket index out of range")
        self.h[np.asarray(nodes, dtype=np.int64)] = buckets

    def copy(self) -> "HashPair":
        return HashPair(self.h.copy(), self.s.copy(), self.c)


def random_hash_pair(n: int, c: int, seed: int, *, signs: bool = True) -> HashPair:
    """Seeded pair from the splitmix64 mixer; ``signs=False`` fixes s to +1."""
    if not 1 <= c:
        raise ValueError("c must be positive")
    key = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    z = splitmix64(key ^ np.arange(n, dtype=np.uint64))
    h = (z % np.uint64(c)).astype(np.int64)
    if signs:
        bit = (splitmix64(z) >> np.uint64(63)).astype(np.int64)
        s = 1.0 - 2.0 * bit
    else:
        s = np.ones(n)
    return HashPair(h, s, c)


def identity_hash_pair(n: int) -> HashPair:
    return HashPair(np.arange(n), np.ones(n), n)


@dataclass
class SketchFamily:
    """``r`` hash pairs over a common domain ``[n]`` and range ``[c]``."""

    pairs: list[HashPair]
    signs_fixed: bool = False

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise ValueError("a family needs at least one hash pair")
        n, c = self.pairs[0].n, self.pairs[0].c
        for p in self.pairs:
            if p.n != n or p.c != c:
                raise ValueError("all pairs of a family must share n and c")

    @property
    def r(self) -> int:
        return len(self.pairs)

    @property
    def n(self) -> int:
        return self.pairs[0].n

    @property
    def c(self) -> int:
        return self.pairs[0].c

    def copy(self) -> "SketchFamily":
        return SketchFamily([p.copy() for p in self.pairs], self.signs_fixed)


def random_family(n: int, c: int, r: int, seed: int, *, signs: bool = True) -> SketchFamily:
    seeds = splitmix64(np.uint64(seed) + np.arange(1, r + 1, dtype=np.uint64))
    pairs = [random_hash_pair(n, c, int(sd), signs=signs) for sd in seeds]
    return SketchFamily(pairs, signs_fixed=not signs)


def identity_family(n: int, r: int = 1) -> SketchFamily:
    return SketchFamily([identity_hash_pair(n) for _ in range(r)], signs_fixed=True)


def count_sketch_rows(u, hp: HashPair) -> np.ndarray:
    """Sketch the columns of ``u`` (d x n) into a d x c matrix."""
    u = as_dense(u)
    if u.shape[1] != hp.n:
        raise ShapeError(f"count_sketch_rows: {u.shape[1]} columns vs hash domain {hp.n}")
    return np.asarray(u @ hp.matrix())


def count_sketch_sparse(u, hp: HashPair, side: str = "cols") -> sp.csr_matrix:
    """Sparse count sketch; ``side`` names the hashed dimension of ``u``."""
    u = as_csr(u)
    if side == "cols":
        if u.shape[1] != hp.n:
            raise ShapeError(f"count_sketch_sparse: {u.shape[1]} columns vs {hp.n}")
        out = u @ hp.matrix()
    elif side == "rows":
        if u.shape[0] != hp.n:
            raise ShapeError(f"count_sketch_sparse: {u.shape[0]} rows vs {hp.n}")
        out = hp.matrix().T @ u
    else:
        raise ValueError(f"side must be 'rows' or 'cols', got {side!r}")
    out = as_csr(out)
    out.eliminate_zeros()
    return out


def _check_order(fam: SketchFamily, k: int) -> None:
    if not 1 <= k <= fam.r:
        raise ValueError(f"tensor sketch order {k} outside 1..{fam.r}")


def tensor_sketch_rows(u, fam: SketchFamily, k: int) -> np.ndarray:
    """Order-``k`` tensor sketch of each row of ``u`` via FFT of count sketches."""
    _check_order(fam, k)
    u = as_dense(u)
    if u.shape[1] != fam.n:
        raise ShapeError(f"tensor_sketch_rows: {u.shape[1]} columns vs domain {fam.n}")
    if k == 1:
        return count_sketch_rows(u, fam.pairs[0])
    spec = np.fft.fft(count_sketch_rows(u, fam.pairs[0]), axis=1)
    for p in range(1, k):
        spec = spec * np.fft.fft(count_sketch_rows(u, fam.pairs[p]), axis=1)
    return np.ascontiguousarray(np.fft.ifft(spec, axis=1).real)


def tensor_sketch_sparse_rows(
    u, fam: SketchFamily, k: int, *, chunk: int = 2048, rtol: float = 1e-11
) -> sp.csr_matrix:
    """:func:`tensor_sketch_rows` for a sparse ``u``, returned sparse.

    FFT round-off leaves ~1e-16 noise where the exact sketch is zero; entries
    below ``rtol`` times the row's largest magnitude are dropped.
    """
    _check_order(fam, k)
    u = as_csr(u)
    if u.shape[1] != fam.n:
        raise ShapeError(f"tensor_sketch_sparse_rows: {u.shape[1]} columns vs domain {fam.n}")
    if k == 1:
        return count_sketch_sparse(u, fam.pairs[0], side="cols")
    mats = [p.matrix() for p in fam.pairs[:k]]
    pieces = []
    for start in range(0, u.shape[0], chunk):
        block = u[start : start + chunk]
        spec = np.fft.fft((block @ mats[0]).toarray(), axis=1)
        for m in mats[1:]:
            spec *= np.fft.fft((block @ m).toarray(), axis=1)
        ts = np.ascontiguousarray(np.fft.ifft(spec, axis=1).real)
        scale = np.max(np.abs(ts), axis=1, keepdims=True)
        ts[np.abs(ts) <= rtol * scale] = 0.0
        pieces.append(sp.csr_matrix(ts))
    return as_csr(sp.vstack(pieces, format="csr"))


def compact(m):
    """Store ``m`` as CSR or dense, whichever needs fewer bytes."""
    if sp.issparse(m):
        m = as_csr(m)
        m.eliminate_zeros()
        if matrix_nbytes(m) > 8 * m.shape[0] * m.shape[1]:
            return m.toarray()
        return m
    m = as_dense(m)
    nnz = int(np.count_nonzero(m))
    if 12 * nnz + 8 * (m.shape[0] + 1) < m.size * 8:
        return as_csr(m)
    return m


def _densify(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


@dataclass
class TwoSidedConvSketches:
    """The r x r grid of ``CS^(k')(TS_k(C)^T)`` blocks.

    Block rows are indexed by the tensor-sketch side (columns of C), block
    columns by the output side (rows of C).  Each block is CSR or dense,
    whichever is smaller.
    """

    blocks: list[list]

    @property
    def r(self) -> int:
        return len(self.blocks)

    def dense(self, k: int, kp: int) -> np.ndarray:
        return _densify(self.blocks[k][kp])

    def nbytes(self) -> int:
        return sum(matrix_nbytes(b) for row in self.blocks for b in row)

    def copy(self) -> "TwoSidedConvSketches":
        return TwoSidedConvSketches([[b.copy() for b in row] for row in self.blocks])


def two_sided_sketch_conv(
    cmat, fam: SketchFamily, out_fam: SketchFamily | None = None
) -> TwoSidedConvSketches:
    """All r^2 two-sided sketches ``CS^(k')(TS_k(C)^T)``.

    ``fam`` hashes the columns of ``cmat`` (tensor-sketch side) and
    ``out_fam`` (default ``fam``) its rows.  A rectangular ``cmat`` is only
    meaningful with an explicit ``out_fam``.
    """
    cmat = as_csr(cmat)
    out_fam = fam if out_fam is None else out_fam
    if out_fam is fam and cmat.shape[0] != cmat.shape[1]:
        raise ShapeError(f"two_sided_sketch_conv needs a square matrix, got {cmat.shape}")
    if cmat.shape[1] != fam.n or cmat.shape[0] != out_fam.n:
        raise ShapeError("convolution matrix does not match the family domains")
    if fam.r != out_fam.r:
        raise ValueError("families must have the same order")
    out_mats = [p.matrix() for p in out_fam.pairs]
    blocks = []
    for k in range(1, fam.r + 1):
        ts_t = tensor_sketch_sparse_rows(cmat, fam, k).T.tocsr()
        blocks.append([compact(ts_t @ m) for m in out_mats])
    return TwoSidedConvSketches(blocks)


def ones_sketch(hp: HashPair) -> np.ndarray:
    """Count sketch of the all-ones vector, length c."""
    return np.bincount(hp.h, weights=hp.s, minlength=hp.c)


def _check_basis_pairs(src: HashPair, dst: HashPair) -> None:
    if src.n != dst.n or src.c != dst.c:
        raise ShapeError("basis change between pairs of different shape")


def basis_change_matrix(src: HashPair, dst: HashPair) -> sp.csr_matrix:
    """Mean-normalised translator from sketches under ``src`` to ``dst``.

    ``T[i, j] = sum_a src.s(a) dst.s(a) [src.h(a)=i][dst.h(a)=j] / |bucket_i|``;
    rows of empty source buckets are zero.
    """
    _check_basis_pairs(src, dst)
    counts = sp.csr_matrix((src.s * dst.s, (src.h, dst.h)), shape=(src.c, src.c))
    sizes = src.bucket_sizes().astype(np.float64)
    inv = np.divide(1.0, sizes, out=np.zeros_like(sizes), where=sizes > 0)
    return as_csr(sp.diags(inv) @ counts)


@dataclass
class BasisChange:
    """Per-sketch-index basis changes kept as raw counts plus source sizes.

    Keeping the unnormalised counts lets the rehash path edit O(|B|) entries
    and renormalise only the touched rows.
    """

    counts: list[sp.csr_matrix]
    sizes: list[np.ndarray]
    matrices: list[sp.csr_matrix] = field(default_factory=list)

    @classmethod
    def between(cls, src: SketchFamily, dst: SketchFamily) -> "BasisChange":
        counts, sizes = [], []
        for a, b in zip(src.pairs, dst.pairs):
            _check_basis_pairs(a, b)
            counts.append(as_csr(sp.csr_matrix((a.s * b.s, (a.h, b.h)), shape=(a.c, a.c))))
            sizes.append(a.bucket_sizes().astype(np.float64))
        bc = cls(counts, sizes)
        bc.refresh()
        return bc

    def refresh(self) -> None:
        self.matrices = []
        for cnt, size in zip(self.counts, self.sizes):
            inv = np.divide(1.0, size, out=np.zeros_like(size), where=size > 0)
            m = as_csr(sp.diags(inv) @ cnt)
            m.eliminate_zeros()
            self.matrices.append(m)

    def nbytes(self) -> int:
        return sum(matrix_nbytes(m) for m in self.matrices) + sum(s.nbytes for s in self.sizes)

    def edit(self, k: int, src_h, src_s, dst_h, dst_s, sign: float) -> None:
        """Add (``sign=+1``) or remove (``-1``) the contributions of some nodes."""
        c = self.counts[k].shape[0]
        src_h = np.asarray(src_h, dtype=np.int64)
        delta = sp.csr_matrix(
            (sign * np.asarray(src_s) * np.asarray(dst_s), (src_h, np.asarray(dst_h))),
            shape=(c, c),
        )
        cnt = as_csr(self.counts[k] + delta)
        cnt.data[np.abs(cnt.data) < 0.5] = 0.0  # counts are integers
        cnt.eliminate_zeros()
        self.counts[k] = cnt
        self.sizes[k] = self.sizes[k] + sign * np.bincount(src_h, minlength=c)
        size = self.sizes[k]
        inv = np.divide(1.0, size, out=np.zeros_like(size), where=size > 0)
        m = as_csr(sp.diags(inv) @ cnt)
        m.eliminate_zeros()
        self.matrices[k] = m

    def copy(self) -> "BasisChange":
        return BasisChange(
            [c.copy() for c in self.counts],
            [s.copy() for s in self.sizes],
            [m.copy() for m in self.matrices],
        )


def _check_sketches(sketches: Sequence, fam: SketchFamily) -> None:
    if len(sketches) != fam.r:
        raise ValueError(f"{len(sketches)} sketches for a family of order {fam.r}")
    for s in sketches:
        if np.shape(s)[1] != fam.c:
            raise ShapeError("sketch width does not match the family")


def unsketch_median(sketches: Sequence, fam: SketchFamily) -> np.ndarray:
    """Median-of-decodes estimate (n x d) from r sketches (each d x c)."""
    _check_sketches(sketches, fam)
    decodes = [
        p.s[:, None] * np.asarray(sk)[:, p.h].T for sk, p in zip(sketches, fam.pairs)
    ]
    return elementwise_median(decodes)


def unsketch_rows(nodes, sketches: Sequence, fam: SketchFamily) -> np.ndarray:
    """Rows ``nodes`` of :func:`unsketch_median` in O(r d |nodes|)."""
    _check_sketches(sketches, fam)
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= fam.n):
        raise IndexError("node index out of range")
    decodes = [
        p.s[nodes, None] * np.asarray(sk)[:, p.h[nodes]].T
        for sk, p in zip(sketches, fam.pairs)
    ]
    return np.median(np.stack(decodes), axis=0)


def unsketch_node(i: int, sketches: Sequence, fam: SketchFamily, counter=None) -> np.ndarray:
    """Decode a single node; ``counter`` (a dict) tallies column reads."""
    if not 0 <= i < fam.n:
        raise IndexError(f"node {i} outside [0, {fam.n})")
    _check_sketches(sketches, fam)
    cols = []
    for sk, p in zip(sketches, fam.pairs):
        cols.append(p.s[i] * np.asarray(sk)[:, p.h[i]])
        if counter is not None:
            counter["column_reads"] = counter.get("column_reads", 0) + 1
    return np.median(np.stack(cols), axis=0)


def stack_family(fam: SketchFamily) -> SketchFamily:
    """Family over the doubled domain ``[2n]`` with range ``[2c]``.

    Index ``j`` and ``n + j`` share node ``j``'s sign and land in buckets
    ``h(j)`` and ``h(j) + c``, so a row sketch of ``[U1 | U2]`` is
    ``[CS(U1) | CS(U2)]``.
    """
    pairs = [
        HashPair(np.concatenate([p.h, p.h + p.c]), np.concatenate([p.s, p.s]), 2 * p.c)
        for p in fam.pairs
    ]
    return SketchFamily(pairs, fam.signs_fixed)


def conv_row_deltas(cmat, rows, ts_fam: SketchFamily, out_fam: SketchFamily, which) -> dict:
    """Contributions of rows ``rows`` of ``cmat`` to selected two-sided blocks.

    ``which`` is an iterable of ``(k, k')`` block indices (0-based).  Summing
    the returned matrices over all rows of ``cmat`` reproduces
    :func:`two_sided_sketch_conv`.
    """
    rows = np.asarray(rows, dtype=np.int64)
    sub = as_csr(cmat)[rows]
    which = sorted(set(which))
    out = {}
    ts_cache = {}
    for k, kp in which:
        if k not in ts_cache:
            ts_cache[k] = tensor_sketch_sparse_rows(sub, ts_fam, k + 1).T.tocsr()
        p = out_fam.pairs[kp]
        place = sp.csr_matrix(
            (p.s[rows], (np.arange(rows.size), p.h[rows])), shape=(rows.size, p.c)
        )
        out[(k, kp)] = as_csr(ts_cache[k] @ place)
    return out
