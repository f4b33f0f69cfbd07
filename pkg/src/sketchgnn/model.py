"""Sketched GNN layers, the sketched forward pass and dense counterparts.

Layer ``l`` keeps its input representation only as ``r`` feature sketches
``S[k] = CS_k(X.T)`` (each d x c).  One layer maps them to the sketches of

    X' = c0 + sum_k c_k (C X W) ** k          (elementwise powers)

without ever forming an n-sized matrix: the k-th power of ``C X W`` is
estimated as ``TS_k((XW).T) @ TS_k(C).T``, and sketching that on the output
side with pair k' leaves ``TS_k(W.T S) @ S_C[k][k']``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tape as tp
from .linalg import ShapeError, as_csr, as_dense
from .lsh import LshDirectory, RehashTarget, SimHashProjection, random_projection
from .pts import linear_init, poly_eval, taylor_init_sigmoid
from .sketch import (
    BasisChange,
    SketchFamily,
    TwoSidedConvSketches,
    count_sketch_rows,
    ones_sketch,
    stack_family,
    two_sided_sketch_conv,
    unsketch_median,
)

__all__ = [
    "VARIANTS",
    "GnnVariant",
    "ModelParams",
    "LayerSketchState",
    "SketchSet",
    "init_params",
    "build_sketch_set",
    "sketch_gcn_layer",
    "sketch_sage_layer",
    "estimate_gat_conv_sketches",
    "forward_sketched",
    "sketched_forward_on_tape",
    "dense_forward",
    "dense_gcn_inference",
    "decode_final",
    "gat_attention_matrix",
    "row_normalize",
]

VARIANTS = ("gcn", "sage", "gat")


def row_normalize(m) -> sp.csr_matrix:
    m = as_csr(m)
    deg = np.asarray(m.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg != 0)
    return as_csr(sp.diags(inv) @ m)


@dataclass
class GnnVariant:
    """Which generalized convolution a layer applies.

    ``cmat`` is the normalised adjacency for ``gcn``, the mean aggregator
    ``D^-1 A`` for ``sage`` (the identity branch is implicit) and the
    attention mask ``A + I`` for ``gat``.
    """

    kind: str
    cmat: sp.csr_matrix

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; expected one of {VARIANTS}")
        self.cmat = as_csr(self.cmat)
        if self.cmat.shape[0] != self.cmat.shape[1]:
            raise ShapeError("convolution matrix must be square")

    @property
    def n(self) -> int:
        return self.cmat.shape[0]

    def stacked(self) -> sp.csr_matrix:
        """``[I | D^-1 A]`` for the two-branch GraphSAGE layer."""
        return as_csr(sp.hstack([sp.identity(self.n, format="csr"), self.cmat]))

    def sketch_sources(self) -> list[sp.csr_matrix]:
        """Matrices whose two-sided sketches a layer stores."""
        if self.kind == "gcn":
            return [self.cmat]
        if self.kind == "sage":
            return [self.stacked()]
        return [row_normalize(self.cmat), self.cmat]


@dataclass
class ModelParams:
    """Trainable state of an L-layer model plus its hash projections.

    ``attn[l]`` is 2 x d_{l+1}: row 0 scores the receiving node, row 1 the
    sending node.  ``coeffs[l]`` is ``[c0, c1, ..., cr]``.
    """

    variant: str
    weights: list
    coeffs: list
    weights2: list | None = None
    attn: list | None = None
    bias: bool = True
    skip: bool = True
    projections: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.weights)

    @property
    def r(self) -> int:
        return len(self.coeffs[0]) - 1

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def skip_at(self, l: int) -> bool:
        return self.skip and self.weights[l].shape[0] == self.weights[l].shape[1]

    def tensors(self) -> dict:
        out = {}
        for l in range(self.L):
            out[f"W{l}"] = self.weights[l]
            if self.weights2 is not None:
                out[f"V{l}"] = self.weights2[l]
            if self.attn is not None:
                out[f"a{l}"] = self.attn[l]
            out[f"c{l}"] = self.coeffs[l]
        return out

    def set_tensors(self, values: dict) -> None:
        for l in range(self.L):
            self.weights[l] = values[f"W{l}"]
            if self.weights2 is not None:
                self.weights2[l] = values[f"V{l}"]
            if self.attn is not None:
                self.attn[l] = values[f"a{l}"]
            self.coeffs[l] = values[f"c{l}"]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.variant,
            [w.copy() for w in self.weights],
            [c.copy() for c in self.coeffs],
            None if self.weights2 is None else [w.copy() for w in self.weights2],
            None if self.attn is None else [a.copy() for a in self.attn],
            self.bias,
            self.skip,
            [[p.copy() for p in row] for row in self.projections],
        )


def init_params(
    variant: str,
    dims,
    r: int,
    seed: int,
    *,
    bias: bool = True,
    skip: bool = True,
    c: int | None = None,
) -> ModelParams:
    """Glorot weights; hidden layers start at sigmoid's Taylor polynomial, the
    output layer at the identity polynomial.  ``c`` sizes the projections."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    rng = np.random.default_rng(seed)

    def glorot(a, b):
        lim = np.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, size=(a, b))

    L = len(dims) - 1
    weights = [glorot(dims[l], dims[l + 1]) for l in range(L)]
    weights2 = [glorot(dims[l], dims[l + 1]) for l in range(L)] if variant == "sage" else None
    attn = [rng.normal(0, 0.1, size=(2, dims[l + 1])) for l in range(L)] if variant == "gat" \
        else None
    coeffs = []
    for l in range(L):
        cf = taylor_init_sigmoid(r, bias) if l < L - 1 else linear_init(r)
        coeffs.append(cf)
    projections = []
    if c is not None:
        for l in range(L):
            projections.append([random_projection(c, dims[l], rng.integers(2**63))
                                for _ in range(r)])
    return ModelParams(variant, weights, coeffs, weights2, attn, bias, skip, projections)


@dataclass
class LayerSketchState:
    """Sketched state tied to one layer's hash family.

    ``conv`` holds the two-sided sketches of the layer's convolution (GAT:
    of the row-normalised mask), ``mask_conv`` the sketches of ``A + I``
    for GAT, ``ts_fam`` the stacked family used by GraphSAGE, and
    ``to_next`` the basis change into the next layer's family.
    """

    fam: SketchFamily
    conv: TwoSidedConvSketches
    ones: list
    directories: list
    ts_fam: SketchFamily | None = None
    mask_conv: TwoSidedConvSketches | None = None
    to_next: BasisChange | None = None

    def nbytes(self) -> int:
        total = self.conv.nbytes() + sum(o.nbytes for o in self.ones)
        if self.mask_conv is not None:
            total += self.mask_conv.nbytes()
        if self.to_next is not None:
            total += self.to_next.nbytes()
        return total


@dataclass
class SketchSet:
    """Everything the sketched forward pass reads.

    ``features`` are the input feature sketches; ``sources`` keep the n x n
    convolution matrices (row and column access) needed only to patch the
    sketches when hash tables change.
    """

    variant: GnnVariant
    layers: list
    features: list
    sources: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.layers)

    def nbytes(self) -> int:
        return sum(st.nbytes() for st in self.layers) + sum(f.nbytes for f in self.features)

    def rehash_target(self, l: int) -> RehashTarget:
        st = self.layers[l]
        conv = []
        mats = [st.conv] if st.mask_conv is None else [st.conv, st.mask_conv]
        for sk, (cmat, csc) in zip(mats, self.sources):
            stacked = st.ts_fam is not None
            conv.append((sk, cmat, csc, st.ts_fam if stacked else st.fam, stacked))
        return RehashTarget(
            fam=st.fam,
            directories=st.directories,
            ones=st.ones,
            conv=conv,
            basis_in=self.layers[l - 1].to_next if l > 0 else None,
            prev_fam=self.layers[l - 1].fam if l > 0 else None,
            basis_out=st.to_next,
            next_fam=self.layers[l + 1].fam if l + 1 < self.L else None,
            feature_sketches=self.features if l == 0 else None,
        )


def build_sketch_set(variant: GnnVariant, x, families) -> SketchSet:
    """Sketch features and convolution matrices for the given layer families."""
    x = as_dense(x)
    if x.shape[0] != variant.n:
        raise ShapeError("feature rows do not match the graph size")
    if variant.kind == "gat":
        for fam in families:
            if not all(np.all(p.s == 1.0) for p in fam.pairs):
                raise ValueError("GAT sketches need all signs fixed to +1")
    sources = [(m, m.tocsc()) for m in variant.sketch_sources()]
    layers = []
    cache = {}
    for fam in families:
        if fam.n != variant.n:
            raise ShapeError("family domain does not match the graph")
        key = tuple((p.h.tobytes(), p.s.tobytes()) for p in fam.pairs)
        ts_fam = stack_family(fam) if variant.kind == "sage" else None
        if key not in cache:
            cache[key] = [two_sided_sketch_conv(m, ts_fam or fam, fam) for m, _ in sources]
        sks = [s.copy() for s in cache[key]]
        layers.append(LayerSketchState(
            fam=fam,
            conv=sks[0],
            ones=[ones_sketch(p) for p in fam.pairs],
            directories=[LshDirectory(p.h, p.c) for p in fam.pairs],
            ts_fam=ts_fam,
            mask_conv=sks[1] if len(sks) > 1 else None,
        ))
    for l in range(len(layers) - 1):
        layers[l].to_next = BasisChange.between(layers[l].fam, layers[l + 1].fam)
    features = [count_sketch_rows(x.T, p) for p in families[0].pairs]
    return SketchSet(variant, layers, features, sources)


# ---------------------------------------------------------------------------
# sketched layers on a tape


def _tensor_sketches(ys):
    """``[TS_1, ..., TS_r]`` from the per-pair count sketches ``ys``."""
    out = [ys[0]]
    if len(ys) > 1:
        spec = tp.fft_rows(ys[0])
        for y in ys[1:]:
            spec = tp.hadamard(spec, tp.fft_rows(y))
            out.append(tp.ifft_rows(spec))
    return out


def _pts_combine(t, ts, blocks_for, coeffs, ones, bias, r):
    """``sum_k c_k TS_k @ S_C[k][k'] (+ c0 ones-sketch)`` for every k'."""
    d = ts[0].shape[0]
    outs = []
    for kp in range(r):
        terms = [tp.scale(blocks_for(k, kp, ts[k]), coeffs, k + 1) for k in range(r)]
        if bias:
            terms.append(tp.scale(t.const(np.outer(np.ones(d), ones[kp])), coeffs, 0))
        outs.append(tp.add_n(terms))
    return outs


def _check_layer(state: LayerSketchState, sketches, coeffs_len):
    r = state.fam.r
    if len(sketches) != r:
        raise ValueError(f"{len(sketches)} sketches for a family of order {r}")
    if coeffs_len != r + 1:
        raise ValueError(f"coefficient vector of length {coeffs_len} for order {r}")


def _gcn_layer(t, state, s_in, w, coeffs, bias):
    _check_layer(state, s_in, len(coeffs.value))
    wt = tp.transpose(w)
    ts = _tensor_sketches([tp.gemm(wt, s) for s in s_in])
    return _pts_combine(
        t, ts, lambda k, kp, z: tp.matmul_sparse(z, state.conv.blocks[k][kp]),
        coeffs, state.ones, bias, state.fam.r)


def _sage_layer(t, state, s_in, w1, w2, coeffs, bias):
    _check_layer(state, s_in, len(coeffs.value))
    w1t, w2t = tp.transpose(w1), tp.transpose(w2)
    ys = [tp.hconcat(tp.gemm(w1t, s), tp.gemm(w2t, s)) for s in s_in]
    ts = _tensor_sketches(ys)
    return _pts_combine(
        t, ts, lambda k, kp, z: tp.matmul_sparse(z, state.conv.blocks[k][kp]),
        coeffs, state.ones, bias, state.fam.r)


def _gat_values(t, state, ys, a, kp, report=None):
    """Differentiable nonzeros of the estimated first-order block ``(0, kp)``.

    Block rows are buckets of pair 0 (sending side), columns buckets of pair
    ``kp`` (receiving side).  Each stored mask entry is reweighted by the
    attention between the two buckets' mean representations and normalised
    per receiving bucket so that a bucket of ``m`` nodes carries mass ``m``.
    """
    mask = state.mask_conv.blocks[0][kp]
    coo = sp.coo_matrix(mask)
    rows, cols, mvals = coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data
    c = state.fam.c
    sizes = [np.bincount(p.h, minlength=c).astype(np.float64) for p in state.fam.pairs]
    empty = sizes[kp] == 0
    if report is not None:
        report["empty_buckets"] = report.get("empty_buckets", 0) + int(empty.sum())
    inv = [np.divide(1.0, s, out=np.zeros_like(s), where=s > 0) for s in sizes]
    means_ts = tp.mul(ys[0], inv[0][None, :])
    means_out = tp.mul(ys[kp], inv[kp][None, :])
    a_out = tp.take_rows(a, [0])
    a_ts = tp.take_rows(a, [1])
    score_out = tp.gemm(a_out, means_out)
    score_ts = tp.gemm(a_ts, means_ts)
    z = tp.leaky_relu(tp.add(tp.gather(score_ts, rows), tp.gather(score_out, cols)))
    shift = np.full(c, -np.inf)
    np.maximum.at(shift, cols, z.value)
    ez = tp.exp(tp.sub(z, shift[cols]))
    num = tp.mul(ez, mvals)
    den = tp.gather(tp.segment_sum(num, cols, c), cols)
    return rows, cols, tp.mul(tp.div(num, den), sizes[kp][cols])


def _gat_layer(t, state, s_in, w, a, coeffs, bias, report=None):
    _check_layer(state, s_in, len(coeffs.value))
    c = state.fam.c
    wt = tp.transpose(w)
    ys = [tp.gemm(wt, s) for s in s_in]
    ts = _tensor_sketches(ys)
    first = {}

    def blocks_for(k, kp, z):
        if k == 0:
            if kp not in first:
                first[kp] = _gat_values(t, state, ys, a, kp, report)
            rows, cols, vals = first[kp]
            return tp.matmul_pattern(z, vals, rows, cols, (c, c))
        return tp.matmul_sparse(z, state.conv.blocks[k][kp])

    return _pts_combine(t, ts, blocks_for, coeffs, state.ones, bias, state.fam.r)


def _param_vars(t, params: ModelParams):
    pv = {name: t.param(val, name) for name, val in params.tensors().items()}
    return pv


def sketched_forward_on_tape(t, params: ModelParams, sset: SketchSet, pv=None, report=None):
    """Record the sketched forward pass on tape ``t``.

    Returns ``(pv, inputs, outputs)``: parameter Vars by name, the per-layer
    input sketch Vars and the final-layer sketch Vars.
    """
    if params.L != sset.L:
        raise ValueError(f"model has {params.L} layers but the sketch set {sset.L}")
    if params.variant != sset.variant.kind:
        raise ValueError("model and sketch set use different variants")
    if pv is None:
        pv = _param_vars(t, params)
    s = [t.const(f) for f in sset.features]
    inputs = []
    for l, st in enumerate(sset.layers):
        inputs.append(s)
        coeffs = pv[f"c{l}"]
        if params.variant == "gcn":
            out = _gcn_layer(t, st, s, pv[f"W{l}"], coeffs, params.bias)
        elif params.variant == "sage":
            out = _sage_layer(t, st, s, pv[f"W{l}"], pv[f"V{l}"], coeffs, params.bias)
        else:
            out = _gat_layer(t, st, s, pv[f"W{l}"], pv[f"a{l}"], coeffs, params.bias, report)
        if params.skip_at(l):
            out = [tp.add(o, si) for o, si in zip(out, s)]
        if l + 1 < sset.L:
            out = [tp.matmul_sparse(o, st.to_next.matrices[k]) for k, o in enumerate(out)]
        s = out
    return pv, inputs, s


def sketch_gcn_layer(state: LayerSketchState, sketches, w, coeffs, *, bias: bool = True):
    """One sketched GCN layer: output sketches in the layer's own family."""
    t = tp.Tape()
    out = _gcn_layer(t, state, [t.const(np.asarray(s)) for s in sketches],
                     t.param(w), t.param(coeffs), bias)
    return [o.value for o in out]


def sketch_sage_layer(state: LayerSketchState, sketches, w1, w2, coeffs, *, bias: bool = True):
    """One sketched GraphSAGE layer over the stacked ``[I | D^-1 A]`` domain."""
    w1, w2 = np.asarray(w1, dtype=np.float64), np.asarray(w2, dtype=np.float64)
    if w1.shape != w2.shape:
        raise ShapeError(f"branch weights differ in shape: {w1.shape} vs {w2.shape}")
    t = tp.Tape()
    out = _sage_layer(t, state, [t.const(np.asarray(s)) for s in sketches],
                      t.param(w1), t.param(w2), t.param(coeffs), bias)
    return [o.value for o in out]


def estimate_gat_conv_sketches(state: LayerSketchState, sketches, w, attn, report=None,
                               counter=None):
    """Attention-weighted estimate of the first-order two-sided sketches.

    Returns a :class:`TwoSidedConvSketches` whose row 0 holds the estimated
    blocks and whose higher rows are the stored row-normalised-mask blocks.
    """
    if state.mask_conv is None:
        raise ValueError("layer state has no mask sketches (not a GAT state)")
    if not all(np.all(p.s == 1.0) for p in state.fam.pairs):
        raise ValueError("GAT estimation needs all signs fixed to +1")
    t = tp.Tape()
    wv = t.const(np.asarray(w, dtype=np.float64))
    ys = [tp.gemm(tp.transpose(wv), t.const(np.asarray(s))) for s in sketches]
    av = t.const(np.asarray(attn, dtype=np.float64))
    c = state.fam.c
    blocks = [list(row) for row in state.conv.blocks]
    for kp in range(state.fam.r):
        rows, cols, vals = _gat_values(t, state, ys, av, kp, report)
        blocks[0][kp] = sp.csr_matrix((vals.value, (rows, cols)), shape=(c, c))
        if counter is not None:
            counter["pair_scores"] = counter.get("pair_scores", 0) + int(rows.size)
    return TwoSidedConvSketches(blocks)


def forward_sketched(params: ModelParams, sset: SketchSet) -> list[np.ndarray]:
    """Final-layer sketches (in the last layer's family)."""
    t = tp.Tape()
    _, _, out = sketched_forward_on_tape(t, params, sset)
    return [o.value for o in out]


# ---------------------------------------------------------------------------
# dense models


def gat_attention_matrix(mask, h, attn, slope: float = 0.2) -> sp.csr_matrix:
    """Row-softmax attention over the nonzeros of ``mask`` for representations ``h``."""
    m = sp.coo_matrix(as_csr(mask))
    rows, cols = m.row, m.col
    e = attn[0] @ h[rows].T + attn[1] @ h[cols].T
    e = np.where(e > 0, e, slope * e)
    n = mask.shape[0]
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, rows, e)
    ez = np.exp(e - shift[rows])
    den = np.bincount(rows, weights=ez, minlength=n)
    return as_csr(sp.csr_matrix((ez / den[rows], (rows, cols)), shape=mask.shape))


def dense_forward(params: ModelParams, variant: GnnVariant, x, activation: str = "poly",
                  return_hidden: bool = False):
    """Full-graph forward pass with the model's weights.

    ``activation="poly"`` applies each layer's learned polynomial (the
    sketched network's exact counterpart); ``"standard"`` (alias
    ``"sigmoid"``) applies sigmoid on hidden layers and ``"relu"`` ReLU, both
    leaving the output layer linear.
    """
    if activation not in ("poly", "standard", "sigmoid", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    if variant.kind != params.variant:
        raise ValueError("model and graph use different variants")
    h = as_dense(x)
    if h.shape[0] != variant.n:
        raise ShapeError("feature rows do not match the graph size")
    hidden = [h]
    for l in range(params.L):
        w = params.weights[l]
        if h.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {l}: features of width {h.shape[1]} vs W {w.shape}")
        hw = h @ w
        if params.variant == "gcn":
            z = variant.cmat @ hw
        elif params.variant == "sage":
            z = hw + variant.cmat @ (h @ params.weights2[l])
        else:
            z = gat_attention_matrix(variant.cmat, hw, params.attn[l]) @ hw
        if activation == "poly":
            out = poly_eval(z, params.coeffs[l], params.bias)
        elif l < params.L - 1:
            out = np.maximum(z, 0.0) if activation == "relu" else 1.0 / (1.0 + np.exp(-z))
        else:
            out = z
        if params.skip_at(l):
            out = out + h
        h = np.asarray(out)
        hidden.append(h)
    return (h, hidden) if return_hidden else h


def dense_gcn_inference(params: ModelParams, variant: GnnVariant, x,
                        activation: str = "poly") -> np.ndarray:
    """Logits (n x classes) of the trained model on the real graph."""
    return dense_forward(params, variant, x, activation)


def decode_final(params: ModelParams, sset: SketchSet) -> np.ndarray:
    """Median-decoded final-layer output for every node (O(n); diagnostics)."""
    return unsketch_median(forward_sketched(params, sset), sset.layers[-1].fam)
