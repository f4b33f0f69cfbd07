"""Reusable experiment drivers: activation-error sweep, update ablation, scaling bench."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tape as tp
from .data import GraphDataset, make_variant, preprocess, sbm_generate, substream
from .model import ModelParams, build_sketch_set, dense_forward, sketched_forward_on_tape
from .pts import taylor_init_sigmoid
from .sketch import random_family, tensor_sketch_rows, tensor_sketch_sparse_rows
from .train import OptimizerState, TrainConfig, accuracy, adam_step, train_run

# Desk-scale community benchmark: four planted blocks of 500 nodes.
SBM_BENCHMARK = dict(blocks=4, sizes=500, p_in=0.02, p_out=0.002, d=32, noise=1.0)


def sbm_benchmark(seed: int = 0, **overrides) -> GraphDataset:
    kw = {**SBM_BENCHMARK, **overrides}
    return sbm_generate(kw["blocks"], kw["sizes"], kw["p_in"], kw["p_out"], kw["d"], seed,
                        noise=kw["noise"])


# ---------------------------------------------------------------------------
# polynomial activation error versus sketch size


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def activation_error(ds: GraphDataset, c: int, *, r: int = 5, seed: int = 0, steps: int = 500,
                     lr: float = 0.05) -> dict:
    """Relative Frobenius error of the polynomial tensor-sketch estimate
    ``c0 + sum_k c_k TS_k(C) TS_k(X^T)^T`` of ``sigmoid(C X)`` (one GCN layer,
    ``W = I``) after fitting the coefficients by Adam from the Taylor start.

    The estimate lives in node space, so no count-sketch decode is involved.
    Returns ``{"c", "taylor", "learned", "best", "coeffs"}`` where ``best``
    is the least-squares optimum over the same terms.
    """
    variant = make_variant(ds, "gcn")
    x = ds.features
    n, d = x.shape
    fam = random_family(n, c, r, int(substream(seed, "hash").generate_state(1)[0]))
    target = _sigmoid(np.asarray(variant.cmat @ x))
    terms = [np.ones((n, d))]
    for k in range(1, r + 1):
        terms.append(np.asarray(tensor_sketch_sparse_rows(variant.cmat, fam, k)
                                @ tensor_sketch_rows(x.T, fam, k).T))
    flat = np.stack([t.ravel() for t in terms])
    gram, proj, tt = flat @ flat.T, flat @ target.ravel(), float(target.ravel() @ target.ravel())

    def rel_err(cf) -> float:
        return float(np.sqrt(max(cf @ gram @ cf - 2 * proj @ cf + tt, 0.0) / tt))

    coeffs = taylor_init_sigmoid(r, True)
    taylor = rel_err(coeffs)
    opt = OptimizerState(lr=lr)
    for _ in range(steps):
        grad = 2.0 * (gram @ coeffs - proj) / tt
        coeffs = adam_step(opt, {"c": coeffs}, {"c": grad})["c"]
    best = np.linalg.lstsq(gram, proj, rcond=None)[0]
    return {"c": c, "taylor": taylor, "learned": rel_err(coeffs), "best": rel_err(best),
            "coeffs": coeffs}


def activation_error_sweep(ds: GraphDataset, ratios, **kw) -> list[dict]:
    out = []
    for ratio in ratios:
        c = max(2, int(round(ratio * ds.n)))
        rec = activation_error(ds, c, **kw)
        rec["ratio"] = float(ratio)
        out.append(rec)
    return out


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# learned versus fixed hash tables


@dataclass
class AblationPair:
    seed: int
    learned: float
    fixed: float


def ablation(cfg: TrainConfig, seeds, make_dataset=sbm_benchmark, split: str = "test",
             log=None) -> list[AblationPair]:
    """Paired runs with and without hash-table updates.

    Both arms share the dataset, the initial tables and the weight
    initialisation for a given seed; only the update switch differs.
    """
    pairs = []
    for seed in seeds:
        ds = make_dataset(seed)
        base = replace(cfg, seed=seed)
        pre = preprocess(ds, base.preprocess_config())
        accs = {}
        for arm, on in (("learned", True), ("fixed", False)):
            run_pre = _fresh(pre)
            res = train_run(replace(base, lsh_updates=on), ds, pre=run_pre)
            pred = dense_forward(res.params, res.pre.sset.variant, ds.features, cfg.activation)
            accs[arm] = accuracy(pred, ds.labels, ds.splits[split])
        pairs.append(AblationPair(seed, accs["learned"], accs["fixed"]))
        if log is not None:
            log(pairs[-1])
    return pairs


def _fresh(pre):
    """Independent copy of preprocessed state (training mutates it)."""
    return copy.deepcopy(pre)


# ---------------------------------------------------------------------------
# scaling


def bench(sizes, *, c: int = 512, dim: int = 64, r: int = 3, layers: int = 2, epochs: int = 5,
          seed: int = 0, variant: str = "gcn", hash_mode: str = "simhash",
          make_dataset=None, prep_repeats: int = 5) -> list[dict]:
    """One row per graph size: preprocessing time, median epoch time, state
    bytes and decodes per epoch, with validation and hash updates off so the
    epoch time measures the sketched step alone.  Preprocessing time is the
    fastest of ``prep_repeats`` runs."""
    rows = []
    for n in sizes:
        if make_dataset is None:
            ds = sbm_generate(4, n // 4, min(1.0, 40.0 / n), min(1.0, 4.0 / n), dim, seed)
        else:
            ds = make_dataset(n, seed)
        cfg = TrainConfig(variant=variant, layers=layers, dim=dim, r=r, c=c, sketch_ratio=None,
                          epochs=epochs, seed=seed, eval_period=0, lsh_updates=False,
                          hash_mode=hash_mode)
        prep_ms = float("inf")
        for _ in range(max(1, prep_repeats)):
            t0 = time.perf_counter()
            pre = preprocess(ds, cfg.preprocess_config())
            prep_ms = min(prep_ms, (time.perf_counter() - t0) * 1e3)
        res = train_run(cfg, ds, pre=pre)
        walls = [m["wall_ms"] for m in res.metrics]
        rows.append({
            "n": int(ds.n),
            "prep_ms": prep_ms,
            "epoch_ms": float(np.median(walls)) if walls else 0.0,
            "sketch_bytes": int(max(m["sketch_bytes"] for m in res.metrics)) if walls else 0,
            "decode_count": int(np.median([m["decode_count"] for m in res.metrics]))
            if walls else 0,
        })
    return rows


def growth(rows, key: str) -> list[float]:
    """Ratios of ``key`` between consecutive rows."""
    vals = [float(r[key]) for r in rows]
    return [b / a if a > 0 else float("inf") for a, b in zip(vals, vals[1:])]
