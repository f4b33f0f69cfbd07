"""Error of the polynomial tensor-sketch estimate of sigmoid(C X) versus sketch ratio.

Uses Cora when found (``$SKETCHGNN_CORA_DIR`` or ``./data/cora``), otherwise
the four-block planted-partition benchmark.

    python3 demos/activation_sweep.py [--features raw|row]
"""

import argparse

import numpy as np

from sketchgnn.data import find_cora, row_normalize_features
from sketchgnn.experiments import activation_error_sweep, sbm_benchmark, spearman


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--features", default="raw", choices=["raw", "row"])
    ap.add_argument("--r", type=int, default=5)
    args = ap.parse_args()

    ds = find_cora()
    name = "Cora"
    if ds is None:
        ds, name = sbm_benchmark(0), "planted-partition stand-in (Cora not found)"
    if args.features == "row":
        ds = row_normalize_features(ds)
    print(f"{name}: n={ds.n}, d={ds.features.shape[1]}, features {args.features}")
    ratios = np.linspace(0.01, 0.1, 12)
    recs = activation_error_sweep(ds, ratios, r=args.r)
    print(f"{'c/n':>6} {'c':>5} {'taylor':>10} {'learned':>10} {'least sq':>10}")
    for rec in recs:
        print(f"{rec['ratio']:>6.3f} {rec['c']:>5} {rec['taylor']:>10.3e} {rec['learned']:>10.3e}"
              f" {rec['best']:>10.3e}")
    print(f"Spearman rank correlation (ratio, learned error): "
          f"{spearman(ratios, [r['learned'] for r in recs]):.2f}")


if __name__ == "__main__":
    main()
