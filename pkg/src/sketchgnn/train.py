"""Optimizer, subset loss and the sketched training loop.

One epoch: pick loss nodes from the class tables, run the sketched forward
pass, decode only the picked rows, back-propagate, take an Adam step on the
weights and polynomial coefficients, and on scheduled epochs refresh the
hash tables of the hidden layers.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tape as tp
from .data import GraphDataset, PreprocessConfig, Preprocessed, make_variant, preprocess, substream
from .lsh import (
    ClassLossTables,
    rehash_subset,
    select_loss_nodes,
    select_update_set,
    lsh_update_due,
    simhash_codes,
    triplet_loss,
)
from .model import (
    GnnVariant,
    ModelParams,
    dense_forward,
    init_params,
    sketched_forward_on_tape,
)
from .sketch import unsketch_median, unsketch_rows

__all__ = [
    "OptimizerState",
    "NonFiniteGradient",
    "TrainingDiverged",
    "adam_step",
    "softmax_xent_subset",
    "backward",
    "TrainConfig",
    "TrainResult",
    "train_run",
    "train_dense",
    "accuracy",
    "state_bytes",
    "write_metrics",
]


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN or inf; the optimizer step was not taken."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite or exceeded the divergence bound."""


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())


def adam_step(opt: OptimizerState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update; returns new parameter arrays by name."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} vs parameter {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}; step rejected")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    out = dict(params)
    for name, g in grads.items():
        m = opt.m.get(name, np.zeros_like(params[name]))
        v = opt.v.get(name, np.zeros_like(params[name]))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        mhat = m / (1 - b1**opt.step)
        vhat = v / (1 - b2**opt.step)
        out[name] = params[name] - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    return out


def softmax_xent_subset(logits, labels):
    """Mean cross-entropy over the given rows and its gradient w.r.t. them."""
    t = tp.Tape()
    z = t.param(logits)
    loss = tp.softmax_xent(z, labels)
    t.backward(loss)
    return float(loss.value), t.grad(z)


def backward(t: tp.Tape, loss: tp.Var, wrt: dict) -> dict:
    """Gradients of ``loss`` for the named Vars in ``wrt``."""
    t.backward(loss)
    return {name: t.grad(v) for name, v in wrt.items()}


def accuracy(logits, labels, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


@dataclass
class TrainConfig:
    variant: str = "gcn"
    layers: int = 2
    dim: int = 64
    r: int = 3
    c: int | None = None
    sketch_ratio: float | None = 0.1
    bias: bool = True
    skip: bool = True
    lam: float = 0.05
    lr: float = 1e-3
    epochs: int = 100
    seed: int = 0
    budget: int | None = None
    lsh_updates: bool = True
    hash_mode: str = "simhash"
    t_plus: float = 0.5
    t_minus: float = 0.1
    alpha: float = 0.1
    beta: float = 0.01
    pair_cap: int = 1000
    update_warmup: int = 5
    update_period: int = 10
    lsh_lr: float = 1e-2
    eval_period: int = 10
    activation: str = "poly"
    diagnostics: bool = False
    max_loss: float = 1e6

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(self.variant, self.layers, self.dim, self.r, self.c,
                                self.sketch_ratio, self.seed, self.hash_mode)


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list
    pre: Preprocessed
    counters: dict


def state_bytes(pre: Preprocessed, params: ModelParams, opt: OptimizerState) -> int:
    """Bytes of the state an epoch reads or writes: sketches, basis changes,
    bias sketches, parameters and optimizer moments.  Hash tables and the
    source graph, touched only by hash refreshes, are not counted."""
    total = pre.sset.nbytes()
    total += sum(a.nbytes for a in params.tensors().values())
    total += sum(p.p.nbytes for row in params.projections for p in row)
    return int(total + opt.nbytes())


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _refresh_tables(params, pre, cfg, inputs, grads_in, lsh_opts, rng, counters, epoch_info):
    """Triplet-loss step on each hidden layer's projections, then rehash."""
    sset = pre.sset
    n = sset.layers[0].fam.n
    for l in range(1, sset.L):
        st = sset.layers[l]
        sk = [v.value for v in inputs[l]]
        b = select_update_set(grads_in[l], st.fam, cfg.beta, st.directories)
        counters["decodes"] += int(b.size)
        moved = 0
        if b.size:
            decoded = unsketch_rows(b, sk, st.fam)
            target = sset.rehash_target(l)
            for k in range(st.fam.r):
                proj = params.projections[l][k]
                loss, grad, _ = triplet_loss(proj, decoded, cfg.t_plus, cfg.t_minus, cfg.alpha,
                                             pair_cap=cfg.pair_cap, rng=rng)
                if loss > 0:
                    key = f"P{l}_{k}"
                    proj.p = adam_step(lsh_opts[key], {key: proj.p}, {key: grad})[key]
                rep = rehash_subset(target, k, proj, decoded, b, counters)
                moved += int(rep.moved.size)
        epoch_info["hash_change"][str(l)] = moved / float(n * st.fam.r)
        epoch_info["update_set"][str(l)] = int(b.size)


def _diagnostics(params, pre, inputs, prev_truth, epoch_info):
    """Distance of each learned table to one rebuilt from fully decoded rows."""
    sset = pre.sset
    for l in range(1, sset.L):
        st = sset.layers[l]
        full = unsketch_median([v.value for v in inputs[l]], st.fam)
        truth = np.stack([simhash_codes(params.projections[l][k], full)
                          for k in range(st.fam.r)])
        learned = np.stack([p.h for p in st.fam.pairs])
        epoch_info["table_distance"][str(l)] = float(np.mean(truth != learned))
        if str(l) in prev_truth:
            epoch_info["truth_change"][str(l)] = float(np.mean(truth != prev_truth[str(l)]))
        prev_truth[str(l)] = truth


def train_run(cfg: TrainConfig, ds: GraphDataset, pre: Preprocessed | None = None,
              log=None) -> TrainResult:
    """Train on sketches; ``log`` (callable) receives each metrics record."""
    if ds.num_classes < 1:
        raise ValueError("dataset has no labels")
    train_idx = ds.splits.get("train", np.flatnonzero(ds.labels >= 0))
    if pre is None:
        pre = preprocess(ds, cfg.preprocess_config())
    sset = pre.sset
    classes = ds.num_classes
    dims = cfg.preprocess_config().dims(ds.features.shape[1], classes)
    params = init_params(cfg.variant, dims, cfg.r, np.random.default_rng(substream(cfg.seed, "init")),
                         bias=cfg.bias, skip=cfg.skip)
    params.projections = [[p.copy() for p in row] for row in pre.projections]
    budget = cfg.budget if cfg.budget is not None else max(256, 4 * classes)
    tables = ClassLossTables(ds.labels, train_idx, classes)
    rng = np.random.default_rng(substream(cfg.seed, "train"))
    opt = OptimizerState(lr=cfg.lr)
    lsh_opts = {f"P{l}_{k}": OptimizerState(lr=cfg.lsh_lr)
                for l in range(cfg.layers) for k in range(cfg.r)}
    lam_mask = np.ones(cfg.r + 1)
    if not cfg.bias:
        lam_mask[0] = 0.0
    counters = {"decodes": 0, "touched": 0, "skipped": 0}
    variant = sset.variant
    prev_truth = {}
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        dec0 = counters["decodes"]
        nodes = select_loss_nodes(tables, None, budget, rng)
        t = tp.Tape()
        pv, inputs, out = sketched_forward_on_tape(t, params, sset)
        logits = tp.median_decode(out, sset.layers[-1].fam, nodes)
        counters["decodes"] += int(nodes.size)
        loss = tp.softmax_xent(logits, ds.labels[nodes])
        if cfg.lam > 0:
            reg = [tp.sum_squares(pv[f"c{l}"], lam_mask) for l in range(params.L)]
            loss = tp.add(loss, tp.mul_scalar(tp.add_n(reg), cfg.lam))
        lval = float(loss.value)
        if not np.isfinite(lval) or abs(lval) > cfg.max_loss:
            raise TrainingDiverged(f"epoch {epoch}: loss {lval}")
        t.backward(loss)
        grads = {name: t.grad(v) for name, v in pv.items()}
        tables.update_codes(nodes, _softmax(logits.value))
        new = adam_step(opt, params.tensors(), grads)
        params.set_tensors(new)
        info = {"hash_change": {}, "update_set": {}, "table_distance": {}, "truth_change": {}}
        if cfg.lsh_updates and lsh_update_due(epoch, cfg.update_warmup, cfg.update_period):
            grads_in = [[t.grad(v) for v in layer_in] for layer_in in inputs]
            _refresh_tables(params, pre, cfg, inputs, grads_in, lsh_opts, rng, counters, info)
        if cfg.diagnostics:
            _diagnostics(params, pre, inputs, prev_truth, info)
        wall = (time.perf_counter() - t0) * 1e3
        rec = {
            "epoch": epoch,
            "loss": lval,
            "selected": int(nodes.size),
            "hash_change": info["hash_change"],
            "wall_ms": wall,
            "decode_count": counters["decodes"] - dec0,
            "sketch_bytes": state_bytes(pre, params, opt),
        }
        if info["update_set"]:
            rec["update_set"] = info["update_set"]
        if cfg.diagnostics:
            rec["table_distance"] = info["table_distance"]
            rec["truth_change"] = info["truth_change"]
        if cfg.eval_period and (epoch % cfg.eval_period == 0 or epoch == cfg.epochs):
            pred = dense_forward(params, variant, ds.features, cfg.activation)
            rec["train_acc"] = accuracy(pred, ds.labels, train_idx)
            if "val" in ds.splits:
                rec["val_acc"] = accuracy(pred, ds.labels, ds.splits["val"])
        metrics.append(rec)
        if log is not None:
            log(rec)
    return TrainResult(params, metrics, pre, counters)


def write_metrics(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _dense_logits_on_tape(t, params: ModelParams, pv, variant: GnnVariant, x, activation):
    h = t.const(x)
    for l in range(params.L):
        hw = tp.gemm(h, pv[f"W{l}"])
        if params.variant == "gcn":
            z = tp.sparse_lmul(variant.cmat, hw)
        elif params.variant == "sage":
            z = tp.add(hw, tp.sparse_lmul(variant.cmat, tp.gemm(h, pv[f"V{l}"])))
        else:
            raise NotImplementedError("dense training is available for gcn and sage")
        if activation == "poly":
            out = tp.poly(z, pv[f"c{l}"], params.bias)
        elif l < params.L - 1:
            out = tp.relu(z) if activation == "relu" else tp.sigmoid(z)
        else:
            out = z
        if params.skip_at(l):
            out = tp.add(out, h)
        h = out
    return h


def train_dense(cfg: TrainConfig, ds: GraphDataset, *, activation: str = "relu",
                weight_decay: float = 0.0, log=None):
    """Full-graph reference training (no sketches); returns ``(params, metrics)``.

    ``activation`` is ``relu`` (standard GCN), ``sigmoid`` or ``poly``.
    """
    classes = ds.num_classes
    variant = make_variant(ds, cfg.variant)
    train_idx = ds.splits.get("train", np.flatnonzero(ds.labels >= 0))
    dims = cfg.preprocess_config().dims(ds.features.shape[1], classes)
    params = init_params(cfg.variant, dims, cfg.r,
                         np.random.default_rng(substream(cfg.seed, "init")),
                         bias=cfg.bias, skip=cfg.skip)
    opt = OptimizerState(lr=cfg.lr)
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        t = tp.Tape()
        pv = {name: t.param(v, name) for name, v in params.tensors().items()}
        logits = _dense_logits_on_tape(t, params, pv, variant, ds.features, activation)
        loss = tp.softmax_xent(tp.take_rows(logits, train_idx), ds.labels[train_idx])
        if weight_decay > 0:
            loss = tp.add(loss, tp.mul_scalar(tp.sum_squares(pv["W0"]), weight_decay))
        if activation == "poly" and cfg.lam > 0:
            reg = tp.add_n([tp.sum_squares(pv[f"c{l}"]) for l in range(params.L)])
            loss = tp.add(loss, tp.mul_scalar(reg, cfg.lam))
        lval = float(loss.value)
        if not np.isfinite(lval) or abs(lval) > cfg.max_loss:
            raise TrainingDiverged(f"epoch {epoch}: loss {lval}")
        t.backward(loss)
        params.set_tensors(adam_step(opt, params.tensors(),
                                     {k: t.grad(v) for k, v in pv.items()}))
        rec = {"epoch": epoch, "loss": lval, "wall_ms": (time.perf_counter() - t0) * 1e3}
        if cfg.eval_period and (epoch % cfg.eval_period == 0 or epoch == cfg.epochs):
            pred = dense_forward(params, variant, ds.features, activation)
            rec["train_acc"] = accuracy(pred, ds.labels, train_idx)
            if "val" in ds.splits:
                rec["val_acc"] = accuracy(pred, ds.labels, ds.splits["val"])
        metrics.append(rec)
        if log is not None:
            log(rec)
    return params, metrics
