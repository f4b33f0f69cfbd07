"""Checkpoint directories: ``checkpoint.json`` plus one binary blob of tensors."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .linalg import FormatError, read_matrix, write_matrix
from .lsh import SimHashProjection
from .model import ModelParams

FORMAT = "sketchgnn-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Missing, unreadable or incompatible checkpoint."""


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = params.tensors()
    names = sorted(tensors)
    for l, row in enumerate(params.projections):
        for k, p in enumerate(row):
            names.append(f"P{l}_{k}")
            tensors[f"P{l}_{k}"] = p.p
    with open(path / "params.bin", "wb") as fh:
        for name in names:
            a = np.asarray(tensors[name], dtype=np.float64)
            write_matrix(fh, a.reshape(1, -1) if a.ndim == 1 else a)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "variant": params.variant,
        "bias": params.bias,
        "skip": params.skip,
        "dims": params.dims,
        "r": params.r,
        "tensors": names,
        "projections": [len(row) for row in params.projections],
    }
    if extra:
        meta["extra"] = extra
    (path / "checkpoint.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Returns ``(params, metadata)``; raises :class:`CheckpointError`."""
    path = Path(path)
    try:
        meta = json.loads((path / "checkpoint.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint metadata in {path}: {exc}") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint {meta.get('format')!r} version {meta.get('version')!r}")
    tensors = {}
    try:
        with open(path / "params.bin", "rb") as fh:
            for name in meta["tensors"]:
                tensors[name] = read_matrix(fh)
    except (OSError, FormatError) as exc:
        raise CheckpointError(f"cannot read checkpoint tensors: {exc}") from exc
    L = len(meta["dims"]) - 1
    variant = meta["variant"]
    params = ModelParams(
        variant,
        [tensors[f"W{l}"] for l in range(L)],
        [tensors[f"c{l}"].ravel() for l in range(L)],
        [tensors[f"V{l}"] for l in range(L)] if variant == "sage" else None,
        [tensors[f"a{l}"] for l in range(L)] if variant == "gat" else None,
        bool(meta["bias"]),
        bool(meta["skip"]),
        [[SimHashProjection(tensors[f"P{l}_{k}"]) for k in range(cnt)]
         for l, cnt in enumerate(meta["projections"])],
    )
    return params, meta
