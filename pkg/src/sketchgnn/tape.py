"""A small reverse-mode differentiation tape over the ops the models use.

Every op evaluates eagerly and records a vector-Jacobian product.  Complex
intermediates carry gradients as ``dL/dRe + 1j * dL/dIm`` so that the
adjoint of an unnormalised DFT is ``c * ifft`` of the incoming gradient.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = ["Var", "Tape", "TapeError"]


class TapeError(RuntimeError):
    """Misuse of the tape: foreign variables or a non-scalar loss."""


class Var:
    __slots__ = ("value", "tape", "index", "requires_grad", "name")

    def __init__(self, value, tape: "Tape", index: int, requires_grad: bool, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def grad(self):
        return self.tape.grads.get(self.index)

    def __repr__(self):
        return f"Var({self.name or self.index}, shape={self.shape})"


class Tape:
    """Records ops in evaluation order; :meth:`backward` sweeps them in reverse."""

    def __init__(self):
        self._vars: list[Var] = []
        self._parents: list[tuple] = []
        self._vjps: list[Callable | None] = []
        self._ops: list[str] = []
        self.grads: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._vars)

    def _new(self, value, parents, vjp, op, requires_grad, name=None) -> Var:
        v = Var(value, self, len(self._vars), requires_grad, name)
        self._vars.append(v)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._ops.append(op)
        return v

    def param(self, value, name=None) -> Var:
        return self._new(np.array(value, dtype=np.float64), (), None, "param", True, name)

    def const(self, value, name=None) -> Var:
        return self._new(value, (), None, "const", False, name)

    def _own(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise TapeError(f"{x!r} was recorded on a different tape")
            return x
        return self.const(x)

    def record(self, op: str, value, parents: Sequence, vjp: Callable) -> Var:
        parents = tuple(self._own(p) for p in parents)
        req = any(p.requires_grad for p in parents)
        return self._new(value, parents, vjp if req else None, op, req)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if np.ndim(loss.value) != 0:
            raise TapeError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
        grads: dict[int, np.ndarray] = {loss.index: np.array(1.0)}
        for idx in range(loss.index, -1, -1):
            g = grads.get(idx)
            vjp = self._vjps[idx]
            if g is None or vjp is None:
                continue
            parents = self._parents[idx]
            contribs = vjp(g)
            if len(contribs) != len(parents):
                raise TapeError(f"op {self._ops[idx]} returned a malformed VJP")
            for p, gp in zip(parents, contribs):
                if gp is None or not p.requires_grad:
                    continue
                if np.isrealobj(p.value) and np.iscomplexobj(gp):
                    gp = gp.real
                if p.index in grads:
                    grads[p.index] = grads[p.index] + gp
                else:
                    grads[p.index] = gp
        self.grads = grads
        return grads

    def grad(self, v: Var):
        g = self.grads.get(v.index)
        if g is None:
            return np.zeros_like(v.value)
        return g


# ---------------------------------------------------------------------------
# ops


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a Var")


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return t.record("add", av + bv, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return t.record("sub", av - bv, (a, b),
                    lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def add_n(xs: Sequence) -> Var:
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


def mul(a, b) -> Var:
    """Elementwise product of real arrays, with broadcasting."""
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return t.record("mul", av * bv, (a, b),
                    lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def div(a, b) -> Var:
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return t.record("div", out, (a, b),
                    lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)))


def scale(a, coeffs, k: int) -> Var:
    """``a * coeffs[k]`` with a gradient for the scalar coefficient."""
    t = _tape_of(a, coeffs)
    av, cv = _val(a), _val(coeffs)

    def vjp(g):
        gc = np.zeros_like(cv)
        gc[k] = np.sum((np.conj(g) * av).real) if np.iscomplexobj(g) else np.sum(g * av)
        return g * cv[k], gc

    return t.record("scale", av * cv[k], (a, coeffs), vjp)


def gemm(a, b) -> Var:
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    return t.record("gemm", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Var:
    t = _tape_of(a)
    return t.record("transpose", _val(a).T, (a,), lambda g: (g.T,))


def matmul_sparse(a, s) -> Var:
    """``a @ S`` for a constant (sparse or dense) ``S``."""
    t = _tape_of(a)
    av = np.ascontiguousarray(_val(a))
    st = s.T.tocsr() if sp.issparse(s) else np.asarray(s).T
    out = np.asarray(av @ s) if not sp.issparse(s) else np.asarray((s.T @ av.T).T)
    return t.record("matmul_sparse", out, (a,),
                    lambda g: (np.asarray((st.T @ g.T).T) if sp.issparse(st) else g @ st,))


def sparse_lmul(s, a) -> Var:
    """``S @ a`` for a constant sparse ``S``."""
    t = _tape_of(a)
    av = np.ascontiguousarray(_val(a))
    st = s.T.tocsr() if sp.issparse(s) else np.asarray(s).T
    return t.record("sparse_lmul", np.asarray(s @ av), (a,), lambda g: (np.asarray(st @ g),))


def matmul_pattern(a, values, rows, cols, shape) -> Var:
    """``a @ S`` where ``S[rows, cols] = values`` is built from a Var."""
    t = _tape_of(a, values)
    av, vv = _val(a), _val(values)
    smat = sp.csr_matrix((vv, (rows, cols)), shape=shape)
    out = np.asarray((smat.T @ av.T).T)

    def vjp(g):
        ga = np.asarray((smat @ g.T).T)
        gv = np.einsum("de,de->e", av[:, rows], g[:, cols])
        return ga, gv

    return t.record("matmul_pattern", out, (a, values), vjp)


def hconcat(a, b) -> Var:
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    w = av.shape[1]
    return t.record("hconcat", np.concatenate([av, bv], axis=1), (a, b),
                    lambda g: (g[:, :w], g[:, w:]))


def fft_rows(a) -> Var:
    t = _tape_of(a)
    av = _val(a)
    c = av.shape[1]
    return t.record("fft", np.fft.fft(av, axis=1), (a,),
                    lambda g: (c * np.fft.ifft(g, axis=1),))


def ifft_rows(a) -> Var:
    """Real part of the row-wise inverse DFT."""
    t = _tape_of(a)
    av = _val(a)
    c = av.shape[1]
    return t.record("ifft", np.ascontiguousarray(np.fft.ifft(av, axis=1).real), (a,),
                    lambda g: (np.fft.fft(g, axis=1) / c,))


def hadamard(a, b) -> Var:
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    return t.record("hadamard", av * bv, (a, b),
                    lambda g: (g * np.conj(bv), g * np.conj(av)))


def take_rows(a, idx) -> Var:
    t = _tape_of(a)
    av = _val(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return t.record("take_rows", av[idx], (a,), vjp)


def gather(a, idx) -> Var:
    """Flat gather ``a.ravel()[idx]``."""
    t = _tape_of(a)
    av = _val(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = np.shape(av)

    def vjp(g):
        out = np.bincount(idx, weights=g, minlength=int(np.prod(shape)))
        return (out.reshape(shape),)

    return t.record("gather", np.ravel(av)[idx], (a,), vjp)


def segment_sum(values, seg, nseg: int) -> Var:
    t = _tape_of(values)
    seg = np.asarray(seg, dtype=np.int64)
    return t.record("segment_sum", np.bincount(seg, weights=_val(values), minlength=nseg),
                    (values,), lambda g: (g[seg],))


def relu(a) -> Var:
    t = _tape_of(a)
    av = _val(a)
    mask = av > 0
    return t.record("relu", av * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Var:
    t = _tape_of(a)
    av = _val(a)
    factor = np.where(av > 0, 1.0, slope)
    return t.record("leaky_relu", av * factor, (a,), lambda g: (g * factor,))


def exp(a) -> Var:
    t = _tape_of(a)
    out = np.exp(_val(a))
    return t.record("exp", out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Var:
    t = _tape_of(a)
    out = 1.0 / (1.0 + np.exp(-_val(a)))
    return t.record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def poly(z, coeffs, bias: bool = True) -> Var:
    """Elementwise ``c0 + sum_k c_k z**k``; ``c0`` ignored without bias."""
    t = _tape_of(z, coeffs)
    zv, cv = _val(z), _val(coeffs)
    r = len(cv) - 1
    powers = [np.ones_like(zv)]
    for _ in range(r):
        powers.append(powers[-1] * zv)
    out = sum(cv[k] * powers[k] for k in range(1, r + 1))
    if bias:
        out = out + cv[0]

    def vjp(g):
        gz = sum(k * cv[k] * powers[k - 1] for k in range(1, r + 1))
        gc = np.array([np.sum(g * p) for p in powers])
        if not bias:
            gc[0] = 0.0
        return g * gz, gc

    return t.record("poly", out, (z, coeffs), vjp)


def sum_squares(a, weights=None) -> Var:
    t = _tape_of(a)
    av = _val(a)
    w = np.ones_like(av) if weights is None else np.asarray(weights, dtype=np.float64)
    return t.record("sum_squares", np.sum(w * av * av), (a,), lambda g: (2.0 * g * w * av,))


def mul_scalar(a, alpha: float) -> Var:
    t = _tape_of(a)
    return t.record("mul_scalar", _val(a) * alpha, (a,), lambda g: (g * alpha,))


def softmax_xent(logits, labels) -> Var:
    """Mean softmax cross-entropy over the rows of ``logits``."""
    t = _tape_of(logits)
    z = _val(logits)
    labels = np.asarray(labels, dtype=np.int64)
    m = z.shape[0]
    if m == 0:
        raise ValueError("cross-entropy over an empty set")
    if labels.shape != (m,) or labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("label out of class range")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - shifted[np.arange(m), labels]))
    probs = np.exp(shifted - logsum[:, None])

    def vjp(g):
        d = probs.copy()
        d[np.arange(m), labels] -= 1.0
        return (g * d / m,)

    return t.record("softmax_xent", np.array(loss), (logits,), vjp)


def median_decode(sketches: Sequence, fam, nodes) -> Var:
    """Rows ``nodes`` of the median-of-decodes estimate.

    The gradient flows to the selected (median) entry; for an even number of
    sketches it is split between the two central entries.
    """
    t = _tape_of(*sketches)
    nodes = np.asarray(nodes, dtype=np.int64)
    r = len(sketches)
    if r != fam.r:
        raise ValueError(f"{r} sketches for a family of order {fam.r}")
    hs = [p.h[nodes] for p in fam.pairs]
    ss = [p.s[nodes] for p in fam.pairs]
    stack = np.stack([ss[k][:, None] * _val(sketches[k])[:, hs[k]].T for k in range(r)])
    order = np.argsort(stack, axis=0, kind="stable")
    if r % 2:
        picks = [(order[r // 2], 1.0)]
    else:
        picks = [(order[r // 2 - 1], 0.5), (order[r // 2], 0.5)]
    value = sum(w * np.take_along_axis(stack, pk[None], axis=0)[0] for pk, w in picks)

    def vjp(g):
        out = []
        for k in range(r):
            wk = sum(w * (pk == k) for pk, w in picks)
            contrib = (g * wk * ss[k][:, None]).T
            gk = np.zeros_like(_val(sketches[k]))
            np.add.at(gk.T, hs[k], contrib.T)
            out.append(gk)
        return tuple(out)

    return t.record("median_decode", value, tuple(sketches), vjp)
