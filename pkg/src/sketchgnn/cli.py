"""``sketchgnn`` command-line tool.

Exit codes: 0 ok, 1 runtime failure, 2 bad input, 3 incompatible artifact.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    CacheError,
    DatasetError,
    cache_nbytes,
    make_variant,
    preprocess,
    read_cora,
    read_dataset,
    row_normalize_features,
    sbm_generate,
    write_dataset,
)
from .linalg import FormatError
from .model import dense_forward
from .train import TrainConfig, TrainingDiverged, accuracy, train_run, write_metrics

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_ARTIFACT = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# config-file keys that differ from TrainConfig field names
_ALIASES = {
    "pts.r": "r",
    "pts.lambda": "lam",
    "pts.bias": "bias",
    "optim.lr": "lr",
    "lsh.lr": "lsh_lr",
    "layers": "layers",
    "L": "layers",
    "d": "dim",
}
_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_EXTRA_KEYS = {"dataset", "out", "cache", "features"}


def _coerce(name: str, text: str):
    kind = _FIELDS[name].type
    if text.lower() in ("none", "") and "None" in str(kind):
        return None
    if "bool" in str(kind):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {text!r}")
    try:
        if "int" in str(kind) and "float" not in str(kind):
            return int(text)
        if "float" in str(kind):
            return float(text)
    except ValueError as exc:
        raise UsageError(f"{name}: {exc}") from exc
    return text


def read_config(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected key=value")
        key, val = (p.strip() for p in line.split("=", 1))
        key = _ALIASES.get(key, key.split(".", 1)[-1] if key.startswith("lsh.") else key)
        if key in _EXTRA_KEYS:
            out[key] = val
        elif key in _FIELDS:
            out[key] = _coerce(key, val)
        else:
            raise UsageError(f"{path}:{num}: unknown key {key!r}")
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # Defaults are None so config-file values survive unless a flag is given.
    p.add_argument("--config", help="key=value config file (flags override it)")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--variant", choices=["gcn", "sage", "gat"])
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--c", type=int, help="sketch dimension (instead of --sketch-ratio)")
    p.add_argument("--sketch-ratio", type=float, dest="sketch_ratio")
    p.add_argument("--hash-mode", choices=["simhash", "random"], dest="hash_mode")
    p.add_argument("--seed", type=int)
    p.add_argument("--features", choices=["raw", "row"],
                   help="use features as given (default) or L1 row-normalised")
    p.add_argument("--out", help="output directory")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--activation", choices=["poly", "standard", "sigmoid", "relu"])
    p.add_argument("--no-lsh-updates", dest="lsh_updates", action="store_const", const=False)
    p.add_argument("--skip", dest="skip", action="store_const", const=True)
    p.add_argument("--no-skip", dest="skip", action="store_const", const=False)
    p.add_argument("--no-bias", dest="bias", action="store_const", const=False)
    p.add_argument("--budget", type=int)
    p.add_argument("--eval-period", type=int, dest="eval_period")
    p.add_argument("--cache", help="preprocessing cache directory to reuse or create")


def resolve(args) -> tuple[TrainConfig, dict]:
    """Merge defaults, config file and flags into a TrainConfig plus extras."""
    merged = read_config(args.config) if getattr(args, "config", None) else {}
    flags = {k: v for k, v in vars(args).items()
             if v is not None and k not in ("cmd", "config", "func")}
    if "c" in flags or "sketch_ratio" in flags:
        # a size flag replaces whichever size the config file chose
        merged.pop("c", None)
        merged.pop("sketch_ratio", None)
    merged.update(flags)
    fields = {k: v for k, v in merged.items() if k in _FIELDS}
    if fields.get("c") is not None and fields.get("sketch_ratio") is not None:
        raise UsageError("give exactly one of c and sketch_ratio")
    if fields.get("c") is not None:
        fields["sketch_ratio"] = None
    cfg = TrainConfig(**fields)
    _validate(cfg)
    extras = {k: v for k, v in merged.items() if k in _EXTRA_KEYS}
    return cfg, extras


def _validate(cfg: TrainConfig) -> None:
    checks = [
        (cfg.variant in ("gcn", "sage", "gat"), "variant must be gcn, sage or gat"),
        (cfg.layers >= 1, "layers must be >= 1"),
        (cfg.dim >= 1, "dim must be >= 1"),
        (cfg.r >= 1, "r must be >= 1"),
        (cfg.c is None or cfg.c >= 2, "c must be >= 2"),
        (cfg.sketch_ratio is None or 0 < cfg.sketch_ratio <= 1, "sketch_ratio must be in (0, 1]"),
        ((cfg.c is None) != (cfg.sketch_ratio is None), "give exactly one of c and sketch_ratio"),
        (cfg.epochs >= 0, "epochs must be >= 0"),
        (cfg.lr >= 0, "lr must be >= 0"),
        (cfg.t_plus > cfg.t_minus, "t_plus must exceed t_minus"),
        (0 < cfg.beta <= 1, "beta must be in (0, 1]"),
        (cfg.alpha > 0, "alpha must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise UsageError(msg)


def _load_dataset(path, features=None):
    if path is None:
        raise UsageError("--dataset is required")
    if features not in (None, "raw", "row"):
        raise UsageError(f"features must be raw or row, got {features!r}")
    ds = read_dataset(path)
    return row_normalize_features(ds) if features == "row" else ds


def _require_out(extras) -> Path:
    if not extras.get("out"):
        raise UsageError("--out is required")
    return Path(extras["out"])


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    cfg, extras = resolve(args)
    ds = _load_dataset(extras.get("dataset"), extras.get("features"))
    out = _require_out(extras)
    existed = (out / "manifest.json").is_file()
    t0 = time.perf_counter()
    pre = preprocess(ds, cfg.preprocess_config(), cache_dir=out)
    secs = time.perf_counter() - t0
    status = "cache up to date" if existed else "cache written"
    print(f"{status}: {out}")
    print(f"n={ds.n} m={ds.m} c={pre.manifest['c']} r={cfg.r} "
          f"cache_bytes={cache_nbytes(out)} seconds={secs:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, extras = resolve(args)
    ds = _load_dataset(extras.get("dataset"), extras.get("features"))
    out = _require_out(extras)
    out.mkdir(parents=True, exist_ok=True)
    pre = preprocess(ds, cfg.preprocess_config(), cache_dir=extras.get("cache"))

    def log(rec):
        acc = f" train_acc={rec['train_acc']:.4f}" if "train_acc" in rec else ""
        val = f" val_acc={rec['val_acc']:.4f}" if "val_acc" in rec else ""
        print(f"epoch {rec['epoch']} loss={rec['loss']:.4f}{acc}{val}", flush=True)

    res = train_run(cfg, ds, pre=pre, log=log)
    write_metrics(out / "metrics.jsonl", res.metrics)
    save_checkpoint(out / "checkpoint", res.params,
                    extra={"dataset_checksum": ds.checksum(), "config": dataclasses.asdict(cfg),
                           "features": extras.get("features", "raw")})
    print(f"checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    features = args.features or meta.get("extra", {}).get("features")
    ds = _load_dataset(args.dataset, features)
    if params.dims[0] != ds.features.shape[1] or params.dims[-1] != max(ds.num_classes, 1):
        raise CheckpointError("checkpoint dimensions do not match the dataset")
    variant = make_variant(ds, params.variant)
    activation = args.activation or meta.get("extra", {}).get("config", {}).get("activation",
                                                                               "poly")
    logits = dense_forward(params, variant, ds.features, activation)
    report = {"activation": activation}
    splits = dict(ds.splits)
    if not splits:
        splits = {"all": np.flatnonzero(ds.labels >= 0)}
    for name, idx in sorted(splits.items()):
        report[name] = accuracy(logits, ds.labels, idx)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run

    results = run(args.level)
    failed = [cid for cid, ok, _ in results if not ok]
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


BENCH_COLUMNS = ["n", "prep_ms", "epoch_ms", "sketch_bytes", "decode_count"]


def cmd_bench(args) -> int:
    from .experiments import bench

    try:
        sizes = [int(v) for v in args.sizes.split(",")]
    except ValueError as exc:
        raise UsageError(f"--sizes: {exc}") from exc
    if min(sizes) < args.c:
        raise UsageError("every size must be at least c")
    rows = bench(sizes, c=args.c, dim=args.dim, r=args.r, layers=args.layers,
                 epochs=args.epochs, seed=args.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                        for k in BENCH_COLUMNS})
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_generate_sbm(args) -> int:
    ds = sbm_generate(args.blocks, args.size, args.p_in, args.p_out, args.d, args.seed,
                      noise=args.noise)
    write_dataset(ds, args.out)
    print(f"wrote {args.out}: n={ds.n} m={ds.m} classes={ds.num_classes}")
    return EXIT_OK


def cmd_convert(args) -> int:
    for p in (args.content, args.cites):
        if not Path(p).is_file():
            raise DatasetError(f"{p} does not exist")
    ds = read_cora(args.content, args.cites, args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {args.out}: n={ds.n} m={ds.m} classes={ds.num_classes}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sketchgnn", description="Sketch-based GNN training")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("preprocess", help="hash and sketch a dataset into a cache directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on sketches; writes checkpoint and metrics")
    _add_run_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-graph accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--activation", choices=["poly", "standard", "sigmoid", "relu"])
    p.add_argument("--features", choices=["raw", "row"],
                   help="feature preprocessing (default: as recorded at training)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the built-in oracle checks")
    p.add_argument("--level", choices=["quick", "full"], default="quick")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time preprocessing and epochs over graph sizes")
    p.add_argument("--sizes", default="1000,2000,4000,8000")
    p.add_argument("--c", type=int, default=512)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("generate-sbm", help="write a planted-partition dataset directory")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--size", type=int, default=500)
    p.add_argument("--p-in", type=float, default=0.02, dest="p_in")
    p.add_argument("--p-out", type=float, default=0.002, dest="p_out")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_sbm)

    p = sub.add_parser("convert", help="convert .content/.cites citation files")
    p.add_argument("--content", required=True)
    p.add_argument("--cites", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CheckpointError, CacheError, FormatError) as exc:
        print(f"incompatible artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
