"""Per-epoch time, training-state bytes and preprocessing time as the graph grows.

    python3 demos/scaling.py [--sizes 1000,2000,4000,8000] [--c 512]
"""

import argparse

from sketchgnn.experiments import bench, growth


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="1000,2000,4000,8000")
    ap.add_argument("--c", type=int, default=512)
    ap.add_argument("--epochs", type=int, default=7)
    args = ap.parse_args()

    rows = bench([int(s) for s in args.sizes.split(",")], c=args.c, epochs=args.epochs)
    print(f"{'n':>6} {'prep ms':>9} {'epoch ms':>9} {'state bytes':>12} {'decodes':>8}")
    for r in rows:
        print(f"{r['n']:>6} {r['prep_ms']:>9.1f} {r['epoch_ms']:>9.1f} {r['sketch_bytes']:>12}"
              f" {r['decode_count']:>8}")
    for key in ("epoch_ms", "sketch_bytes", "prep_ms"):
        print(f"{key} growth per doubling: " + ", ".join(f"{g:.2f}" for g in growth(rows, key)))


if __name__ == "__main__":
    main()
