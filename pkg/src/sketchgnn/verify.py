"""Self-checks runnable from the command line.

Each check has a stable id and returns ``(ok, detail)``.  ``quick`` checks
are small exact oracles; ``full`` adds the Monte-Carlo suites.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import tape as tp
from .data import normalize_adjacency, sbm_generate
from .linalg import fft_rows
from .lsh import random_projection, simhash, triplet_loss
from .model import (
    GnnVariant,
    build_sketch_set,
    decode_final,
    dense_forward,
    init_params,
    sketched_forward_on_tape,
)
from .pts import pts_dense_reference, taylor_init_sigmoid
from .sketch import (
    count_sketch_rows,
    identity_family,
    random_family,
    tensor_sketch_rows,
)


@dataclass
class Check:
    id: str
    level: str
    fn: Callable[[], tuple[bool, str]]


CHECKS: list[Check] = []


def check(id: str, level: str = "quick"):
    def deco(fn):
        CHECKS.append(Check(id, level, fn))
        return fn

    return deco


# ---------------------------------------------------------------------------
# shared oracles


def random_graph(n: int, p: float, rng) -> sp.csr_matrix:
    a = sp.random(n, n, density=p, random_state=rng, data_rvs=lambda k: np.ones(k))
    a = ((a + a.T) > 0).astype(np.float64)
    a.setdiag(0)
    a.eliminate_zeros()
    return a.tocsr()


def _variant_matrix(kind: str, a: sp.csr_matrix) -> sp.csr_matrix:
    n = a.shape[0]
    if kind == "gcn":
        at = a + sp.eye(n)
        dinv = 1.0 / np.sqrt(np.asarray(at.sum(axis=1)).ravel())
        return sp.csr_matrix(sp.diags(dinv) @ at @ sp.diags(dinv))
    if kind == "sage":
        deg = np.asarray(a.sum(axis=1)).ravel()
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return sp.csr_matrix(sp.diags(inv) @ a)
    return sp.csr_matrix(a + sp.eye(n))


def degeneracy_error(kind: str, n: int, layers: int, seed: int, *, d: int = 4,
                     hidden: int = 4, classes: int = 3) -> float:
    """Max abs gap between the sketched pass with c = n identity hashing
    (order 1) and the dense polynomial network."""
    rng = np.random.default_rng(seed)
    a = random_graph(n, min(1.0, 3.0 / n), rng)
    variant = GnnVariant(kind, _variant_matrix(kind, a))
    x = rng.normal(size=(n, d))
    dims = [d] + [hidden] * (layers - 1) + [classes]
    params = init_params(kind, dims, 1, int(rng.integers(2**31)))
    params.coeffs = [rng.normal(size=2) for _ in range(layers)]
    fams = [identity_family(n, 1) for _ in range(layers)]
    sset = build_sketch_set(variant, x, fams)
    got = decode_final(params, sset)
    want = dense_forward(params, variant, x, "poly")
    return float(np.max(np.abs(got - want)))


def tensor_sketch_bruteforce(u: np.ndarray, fam, k: int) -> np.ndarray:
    """Order-k tensor sketch by enumerating every index tuple."""
    c = fam.c
    out = np.zeros(c)
    for idx in itertools.product(range(u.size), repeat=k):
        b, w = 0, 1.0
        for p, i in enumerate(idx):
            b += fam.pairs[p].h[i]
            w *= fam.pairs[p].s[i] * u[i]
        out[b % c] += w
    return out


def fd_check(f, x: np.ndarray, grad: np.ndarray, eps: float = 1e-6) -> float:
    """Largest relative gap between ``grad`` and central differences of ``f``."""
    num = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        num[i] = (fp - fm) / (2 * eps)
    scale = max(np.max(np.abs(num)), np.max(np.abs(grad)), 1e-12)
    return float(np.max(np.abs(num - grad)) / scale)


def sketched_gcn_gradcheck(seed: int = 0, n: int = 12, c: int = 6, r: int = 3) -> dict:
    """Relative FD error of every parameter of a 2-layer sketched GCN."""
    rng = np.random.default_rng(seed)
    a = random_graph(n, 0.3, rng)
    variant = GnnVariant("gcn", _variant_matrix("gcn", a))
    x = rng.normal(size=(n, 3))
    params = init_params("gcn", [3, 4, 2], r, seed)
    fams = [random_family(n, c, r, seed + 1), random_family(n, c, r, seed + 2)]
    sset = build_sketch_set(variant, x, fams)
    nodes = np.arange(n)
    labels = rng.integers(0, 2, size=n)

    def loss_and_grads():
        t = tp.Tape()
        pv, _, out = sketched_forward_on_tape(t, params, sset)
        loss = tp.softmax_xent(tp.median_decode(out, fams[-1], nodes), labels)
        t.backward(loss)
        return float(loss.value), {k: t.grad(v) for k, v in pv.items()}

    _, grads = loss_and_grads()
    errs = {}
    for name, val in params.tensors().items():
        errs[name] = fd_check(lambda: loss_and_grads()[0], val, grads[name])
    return errs


def triplet_gradcheck(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    proj = random_projection(8, 4, seed)
    xb = rng.normal(size=(6, 4))
    xb[1] = xb[0] + 0.05 * rng.normal(size=4)
    pairs = ([(0, 1), (2, 3)], [(0, 4), (1, 5)])
    loss, grad, _ = triplet_loss(proj, xb, 0.5, 0.1, 5.0, pairs=pairs)
    return fd_check(lambda: triplet_loss(proj, xb, 0.5, 0.1, 5.0, pairs=pairs)[0], proj.p, grad)


def fft_adjoint_gap(rng, rows: int = 3, c: int = 8) -> float:
    """``|<fft(x), y> - <x, vjp(y)>|`` using the tape's recorded FFT adjoint."""
    x = rng.normal(size=(rows, c)) + 1j * rng.normal(size=(rows, c))
    y = rng.normal(size=(rows, c)) + 1j * rng.normal(size=(rows, c))
    t = tp.Tape()
    out = tp.fft_rows(t.param(x.real))
    adj = t._vjps[out.index](y)[0]
    lhs = np.vdot(y, fft_rows(x))
    rhs = np.vdot(adj, x)
    return float(abs(lhs - rhs) / max(1.0, abs(lhs)))


# ---------------------------------------------------------------------------
# checks


@check("sketch.tensor_bruteforce")
def _ts_brute():
    worst = 0.0
    rng = np.random.default_rng(1)
    for n, c, k in itertools.product(range(1, 6), range(1, 5), range(1, 4)):
        fam = random_family(n, c, 3, int(rng.integers(2**31)))
        u = rng.normal(size=n)
        got = tensor_sketch_rows(u[None, :], fam, k)[0]
        worst = max(worst, float(np.max(np.abs(got - tensor_sketch_bruteforce(u, fam, k)))))
    return worst <= 1e-10, f"max err {worst:.2e}"


@check("model.degeneracy")
def _degeneracy():
    worst = 0.0
    for kind in ("gcn", "sage", "gat"):
        for layers in (1, 2, 3):
            for seed in range(2):
                worst = max(worst, degeneracy_error(kind, 10 + 7 * seed, layers, seed))
    return worst <= 1e-8, f"max err {worst:.2e}"


@check("train.gradcheck")
def _gradcheck():
    errs = sketched_gcn_gradcheck()
    errs["triplet"] = triplet_gradcheck()
    worst = max(errs.values())
    return worst < 1e-4, f"max rel err {worst:.2e}"


@check("train.fft_adjoint")
def _fft_adjoint():
    gap = fft_adjoint_gap(np.random.default_rng(2))
    return gap <= 1e-10, f"gap {gap:.2e}"


@check("pts.reference")
def _pts_ref():
    rng = np.random.default_rng(3)
    cm, x, w = rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    coeffs = rng.normal(size=4)
    z = cm @ x @ w
    want = coeffs[0] + sum(coeffs[k] * z**k for k in range(1, 4))
    err = float(np.max(np.abs(pts_dense_reference(cm, x, w, coeffs) - want)) / np.max(np.abs(want)))
    t3 = taylor_init_sigmoid(3)
    val = t3[0] + t3[1] * 0.1 + t3[3] * 0.1**3
    ok = err <= 1e-12 and abs(val - 1 / (1 + np.exp(-0.1))) < 1e-4
    return ok, f"poly err {err:.1e}, taylor(0.1)={val:.8f}"


@check("lsh.simhash_symmetry")
def _simhash_sym():
    rng = np.random.default_rng(4)
    proj = random_projection(16, 5, 4)
    bad = 0
    for _ in range(200):
        u = rng.normal(size=5)
        a, b = simhash(proj, u), simhash(proj, -u)
        bad += b != (a + 8) % 16
        bad += simhash(proj, 3.0 * u) != a
    return bad == 0, f"{bad} violations"


@check("data.normalization")
def _norm():
    from .data import GraphDataset

    ds = GraphDataset(2, np.array([[0, 1]]), np.zeros((2, 1)), np.array([0, 1]), {})
    cm = normalize_adjacency(ds, "gcn").toarray()
    ok = np.allclose(cm, 0.5, atol=1e-15)
    ds1 = GraphDataset(1, np.zeros((0, 2), dtype=np.int64), np.zeros((1, 1)), np.array([0]), {})
    ok &= np.allclose(normalize_adjacency(ds1, "gcn").toarray(), [[1.0]])
    return bool(ok), "two-node and single-node cases"


@check("sketch.unbiased", level="full")
def _unbiased():
    rng = np.random.default_rng(5)
    n, c, trials = 40, 16, 10_000
    u, v = rng.normal(size=n), rng.normal(size=n)
    cs, ts = np.empty(trials), np.empty(trials)
    for t in range(trials):
        fam = random_family(n, c, 2, t)
        uv = np.stack([u, v])
        a = count_sketch_rows(uv, fam.pairs[0])
        b = tensor_sketch_rows(uv, fam, 2)
        cs[t] = a[0] @ a[1]
        ts[t] = b[0] @ b[1]
    z1 = abs(cs.mean() - u @ v) / (cs.std(ddof=1) / np.sqrt(trials))
    z2 = abs(ts.mean() - (u @ v) ** 2) / (ts.std(ddof=1) / np.sqrt(trials))
    return max(z1, z2) < 3.0, f"z-scores {z1:.2f}, {z2:.2f}"


@check("data.sbm_edges", level="full")
def _sbm_edges():
    got, want = [], 0.0
    for seed in range(20):
        ds = sbm_generate(3, 40, 0.2, 0.02, 3, seed)
        got.append(ds.m)
    sizes = [40] * 3
    want = 0.2 * sum(s * (s - 1) / 2 for s in sizes) + 0.02 * (40 * 40 * 3)
    rel = abs(np.mean(got) - want) / want
    return rel < 0.05, f"mean {np.mean(got):.1f} vs {want:.1f}"


def run(level: str = "quick", log=print) -> list[tuple[str, bool, str]]:
    """Run the checks at ``level`` (``full`` includes ``quick``)."""
    if level not in ("quick", "full"):
        raise ValueError(f"unknown level {level!r}")
    results = []
    for chk in CHECKS:
        if level == "quick" and chk.level != "quick":
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = chk.fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        results.append((chk.id, bool(ok), detail))
        if log is not None:
            log(f"{'PASS' if ok else 'FAIL'} {chk.id} ({dt:.2f}s) {detail}")
    return results

