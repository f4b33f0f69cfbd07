"""Graph datasets, adjacency normalisation, SBM graphs and the sketch cache."""
from __future__ import annotations

import fcntl
import hashlib
import json
import math
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .linalg import as_csr, read_matrix, write_matrix
from .lsh import LshDirectory, SimHashProjection, build_hash_pair, random_projection
from .model import GnnVariant, LayerSketchState, SketchSet, build_sketch_set
from .sketch import (
    BasisChange,
    HashPair,
    SketchFamily,
    TwoSidedConvSketches,
    random_family,
    stack_family,
)

__all__ = [
    "GraphDataset",
    "DatasetError",
    "CacheError",
    "IsolatedNodeWarning",
    "substream",
    "normalize_adjacency",
    "make_variant",
    "sbm_generate",
    "write_dataset",
    "read_dataset",
    "read_cora",
    "find_cora",
    "planetoid_split",
    "PreprocessConfig",
    "Preprocessed",
    "preprocess",
    "load_cache",
    "checksum",
    "cache_nbytes",
]


class DatasetError(ValueError):
    """Malformed or missing dataset input."""


class CacheError(RuntimeError):
    """Sketch cache that cannot be used (collision, corruption, version)."""


class IsolatedNodeWarning(UserWarning):
    pass


def substream(seed: int, name: str) -> np.random.SeedSequence:
    """Independent seed sequence for a named random component."""
    tag = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag])


def checksum(*arrays) -> str:
    h = hashlib.blake2b(digest_size=8)
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class GraphDataset:
    """Undirected graph with node features, labels (-1 = unlabelled) and splits.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.n < 1:
            raise DatasetError("a graph needs at least one node")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n):
            raise DatasetError("edge endpoint outside [0, n)")
        lo = np.minimum(self.edges[:, 0], self.edges[:, 1])
        hi = np.maximum(self.edges[:, 0], self.edges[:, 1])
        keep = lo != hi
        pairs = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
        self.edges = pairs.reshape(-1, 2)
        if self.features.shape[0] != self.n or self.labels.shape != (self.n,):
            raise DatasetError("features/labels do not have one row per node")
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        names = list(self.splits)
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                if np.intersect1d(self.splits[names[a]], self.splits[names[b]]).size:
                    raise DatasetError(f"splits {names[a]} and {names[b]} overlap")

    @property
    def m(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if np.any(self.labels >= 0) else 0

    def adjacency(self) -> sp.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        a = sp.csr_matrix(
            (np.ones(2 * i.size), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n, self.n),
        )
        return as_csr(a)

    def checksum(self) -> str:
        parts = [self.edges, self.features, self.labels]
        for k in sorted(self.splits):
            parts.append(self.splits[k])
        return checksum(*parts)


def normalize_adjacency(ds: GraphDataset, variant: str) -> sp.csr_matrix:
    """GCN: ``D~^-1/2 (A+I) D~^-1/2``; SAGE: ``D^-1 A``; GAT: the mask ``A+I``."""
    a = ds.adjacency()
    eye = sp.identity(ds.n, format="csr")
    if variant == "gcn":
        at = a + eye
        dinv = 1.0 / np.sqrt(np.asarray(at.sum(axis=1)).ravel())
        return as_csr(sp.diags(dinv) @ at @ sp.diags(dinv))
    if variant == "sage":
        deg = np.asarray(a.sum(axis=1)).ravel()
        isolated = int(np.sum(deg == 0))
        if isolated:
            warnings.warn(f"{isolated} isolated node(s): their aggregation rows stay zero",
                          IsolatedNodeWarning, stacklevel=2)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return as_csr(sp.diags(inv) @ a)
    if variant == "gat":
        return as_csr(a + eye)
    raise ValueError(f"unknown variant {variant!r}")


def row_normalize_features(ds: GraphDataset) -> GraphDataset:
    """Copy of ``ds`` with each feature row scaled to unit L1 norm (zero rows kept)."""
    x = ds.features
    norms = np.abs(x).sum(axis=1, keepdims=True)
    scaled = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return GraphDataset(ds.n, ds.edges.copy(), scaled, ds.labels.copy(),
                        {k: v.copy() for k, v in ds.splits.items()})


def make_variant(ds: GraphDataset, variant: str) -> GnnVariant:
    return GnnVariant(variant, normalize_adjacency(ds, variant))


def _tri_decode(idx, s):
    """Pair ``(i, j)``, ``i < j < s``, for row-major upper-triangle indices."""
    idx = np.asarray(idx, dtype=np.int64)

    def start(i):  # pairs in rows before i
        return i * s - i * (i + 1) // 2

    disc = np.sqrt((2.0 * s - 1) ** 2 - 8.0 * idx)
    i = np.floor((2 * s - 1 - disc) / 2).astype(np.int64)
    i = np.where(start(i) > idx, i - 1, i)
    i = np.where(start(i + 1) <= idx, i + 1, i)
    return i, idx - start(i) + i + 1


def _split(n, labels, rng, fractions=(0.5, 0.25, 0.25)):
    perm = rng.permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return {"train": np.sort(perm[:a]), "val": np.sort(perm[a:b]), "test": np.sort(perm[b:])}


def sbm_generate(blocks: int, sizes, p_in: float, p_out: float, d: int, seed: int,
                 *, noise: float = 1.0) -> GraphDataset:
    """Planted-partition graph with noisy one-hot block features.

    ``sizes`` is one size for every block or a list of per-block sizes.  Edges
    are drawn per block pair: a binomial count, then that many distinct slots.
    """
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    sizes = [int(sizes)] * blocks if np.ndim(sizes) == 0 else [int(s) for s in sizes]
    if len(sizes) != blocks or min(sizes) < 1:
        raise ValueError("every block needs a positive size")
    if d < blocks:
        raise ValueError("feature dimension must be at least the block count")
    rng = np.random.default_rng(substream(seed, "sbm"))
    starts = np.concatenate([[0], np.cumsum(sizes)])
    n = int(starts[-1])
    edges = []
    for a in range(blocks):
        for b in range(a, blocks):
            sa, sb = sizes[a], sizes[b]
            p = p_in if a == b else p_out
            total = sa * (sa - 1) // 2 if a == b else sa * sb
            if total == 0 or p == 0:
                continue
            cnt = rng.binomial(total, p)
            if cnt == 0:
                continue
            slots = rng.choice(total, size=cnt, replace=False)
            if a == b:
                i, j = _tri_decode(slots, sa)
            else:
                i, j = slots // sb, slots % sb
            edges.append(np.stack([i + starts[a], j + starts[b]], axis=1))
    edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    labels = np.repeat(np.arange(blocks), sizes)
    feats = np.zeros((n, d))
    feats[np.arange(n), labels] = 1.0
    feats += noise * rng.standard_normal((n, d))
    return GraphDataset(n, edges, feats, labels, _split(n, labels, rng))


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(ds: GraphDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "edges.tsv", "w") as fh:
        for i, j in ds.edges.tolist():
            fh.write(f"{i}\t{j}\n")
    np.savetxt(path / "features.csv", ds.features, delimiter=",", fmt="%.17g")
    np.savetxt(path / "labels.csv", ds.labels, fmt="%d")
    with open(path / "splits.json", "w") as fh:
        json.dump({k: v.tolist() for k, v in ds.splits.items()}, fh)


def read_dataset(path) -> GraphDataset:
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"dataset directory {path} does not exist")
    for name in ("edges.tsv", "features.csv", "labels.csv"):
        if not (path / name).is_file():
            raise DatasetError(f"{path} is missing {name}")
    try:
        labels = np.loadtxt(path / "labels.csv", dtype=np.int64, ndmin=1)
        feats = np.loadtxt(path / "features.csv", delimiter=",", ndmin=2)
        text = (path / "edges.tsv").read_text().split()
        edges = np.array([int(t) for t in text], dtype=np.int64).reshape(-1, 2)
    except ValueError as exc:
        raise DatasetError(f"cannot parse dataset in {path}: {exc}") from exc
    splits = {}
    if (path / "splits.json").is_file():
        splits = json.loads((path / "splits.json").read_text())
    return GraphDataset(labels.size, edges, feats, labels, splits)


def planetoid_split(labels, rng, per_class: int = 20, val: int = 500, test: int = 1000):
    """Seeded split: ``per_class`` training nodes per class, then val and test."""
    labels = np.asarray(labels)
    train = []
    for y in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == y)
        train.append(rng.choice(idx, size=min(per_class, idx.size), replace=False))
    train = np.sort(np.concatenate(train))
    rest = rng.permutation(np.setdiff1d(np.flatnonzero(labels >= 0), train))
    return {"train": train, "val": np.sort(rest[:val]), "test": np.sort(rest[val:val + test])}


def read_cora(content, cites, seed: int = 0) -> GraphDataset:
    """Citation network in the ``.content`` / ``.cites`` text distribution.

    ``.content`` rows are ``id  f1 ... fd  label`` (whitespace separated);
    ``.cites`` rows are ``cited  citing``.  Citations to unknown ids are
    dropped and edges are made undirected.
    """
    ids, feats, names = [], [], []
    with open(content) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            feats.append([float(v) for v in parts[1:-1]])
            names.append(parts[-1])
    if not ids:
        raise DatasetError(f"{content} holds no nodes")
    index = {k: i for i, k in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(v) for v in names], dtype=np.int64)
    edges = []
    with open(cites) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = index.get(parts[0]), index.get(parts[1])
            if a is not None and b is not None and a != b:
                edges.append((a, b))
    rng = np.random.default_rng(substream(seed, "split"))
    return GraphDataset(len(ids), np.array(edges, dtype=np.int64), np.array(feats), labels,
                        planetoid_split(labels, rng))


def find_cora(seed: int = 0) -> GraphDataset | None:
    """Cora from ``$SKETCHGNN_CORA_DIR`` or ``./data/cora`` if present.

    The directory may hold the raw ``cora.content``/``cora.cites`` files or a
    converted dataset directory.
    """
    candidates = []
    if os.environ.get("SKETCHGNN_CORA_DIR"):
        candidates.append(Path(os.environ["SKETCHGNN_CORA_DIR"]))
    candidates += [Path("data/cora"), Path(__file__).resolve().parents[2] / "data" / "cora"]
    for c in candidates:
        if (c / "cora.content").is_file() and (c / "cora.cites").is_file():
            return read_cora(c / "cora.content", c / "cora.cites", seed)
        if (c / "edges.tsv").is_file():
            return read_dataset(c)
    return None


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessConfig:
    variant: str = "gcn"
    layers: int = 2
    dim: int = 64
    r: int = 3
    c: int | None = None
    sketch_ratio: float | None = None
    seed: int = 0
    hash_mode: str = "simhash"  # or "random"

    def resolve_c(self, n: int) -> int:
        if (self.c is None) == (self.sketch_ratio is None):
            raise ValueError("give exactly one of c and sketch_ratio")
        c = self.c if self.c is not None else max(2, int(round(self.sketch_ratio * n)))
        if self.hash_mode == "simhash" and c % 2:
            c += 1  # SimHash codes come in +/- halves
        if c > n:
            raise ValueError(f"sketch dimension {c} exceeds the node count {n}")
        return int(c)

    def dims(self, d_in: int, classes: int) -> list[int]:
        return [d_in] + [self.dim] * (self.layers - 1) + [classes]


@dataclass
class Preprocessed:
    sset: SketchSet
    projections: list
    manifest: dict
    seconds: float = 0.0


def _hash_families(ds: GraphDataset, cfg: PreprocessConfig, c: int, counter=None):
    """All layers start from the same family built on the input features."""
    gat = cfg.variant == "gat"
    dims = cfg.dims(ds.features.shape[1], max(ds.num_classes, 1))
    proj_rng = np.random.default_rng(substream(cfg.seed, "projections"))
    projections = [
        [random_projection(c, dims[l], proj_rng.integers(2**63)) for _ in range(cfg.r)]
        for l in range(cfg.layers)
    ]
    if cfg.hash_mode == "random":
        base = random_family(ds.n, c, cfg.r, int(substream(cfg.seed, "hash").generate_state(1)[0]),
                             signs=not gat)
    elif cfg.hash_mode == "simhash":
        sign_seeds = substream(cfg.seed, "signs").spawn(cfg.r)
        pairs = [build_hash_pair(projections[0][k], ds.features, sign_seeds[k], signs=not gat,
                                 counter=counter) for k in range(cfg.r)]
        base = SketchFamily(pairs, signs_fixed=gat)
    else:
        raise ValueError(f"unknown hash mode {cfg.hash_mode!r}")
    return [base.copy() for _ in range(cfg.layers)], projections


def _manifest_core(ds: GraphDataset, cfg: PreprocessConfig, c: int) -> dict:
    return {
        "format": "sketchgnn-cache",
        "version": 1,
        "n": ds.n,
        "m": ds.m,
        "c": c,
        "r": cfg.r,
        "layers": cfg.layers,
        "dim": cfg.dim,
        "variant": cfg.variant,
        "normalization": {"gcn": "sym_self_loops", "sage": "row_mean", "gat": "mask_self_loops"}[
            cfg.variant],
        "hash_mode": cfg.hash_mode,
        "seed": cfg.seed,
        "source_checksum": ds.checksum(),
    }


@contextmanager
def _locked(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    with open(path / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _blobs(pre: Preprocessed):
    """(name, matrix) pairs making up a cache."""
    ss = pre.sset
    out = []
    for k, f in enumerate(ss.features):
        out.append((f"features_{k}", f))
    for l, st in enumerate(ss.layers):
        for k, p in enumerate(st.fam.pairs):
            out.append((f"l{l}_hash_{k}", np.stack([p.h.astype(np.float64), p.s])))
            out.append((f"l{l}_ones_{k}", st.ones[k][None, :]))
            out.append((f"l{l}_proj_{k}", pre.projections[l][k].p))
        for name, conv in (("conv", st.conv), ("mask", st.mask_conv)):
            if conv is None:
                continue
            for a, row in enumerate(conv.blocks):
                for b, blk in enumerate(row):
                    out.append((f"l{l}_{name}_{a}_{b}", blk))
    return out


def _file_digest(path: Path) -> str:
    return hashlib.blake2b(path.read_bytes(), digest_size=8).hexdigest()


def preprocess(ds: GraphDataset, cfg: PreprocessConfig, cache_dir=None,
               counter=None) -> Preprocessed:
    """Hash, sketch and (optionally) cache everything training reads.

    With ``cache_dir`` an existing cache with the same manifest is loaded
    instead of rebuilt; one with a different manifest is an error.
    """
    if ds.n < 1:
        raise DatasetError("empty graph")
    c = cfg.resolve_c(ds.n)
    core = _manifest_core(ds, cfg, c)
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        mpath = cache_dir / "manifest.json"
        if mpath.is_file():
            existing = json.loads(mpath.read_text())
            if {k: existing.get(k) for k in core} != core:
                raise CacheError(f"{cache_dir} holds a cache built with different settings")
            return load_cache(cache_dir, ds)
    t0 = time.perf_counter()
    variant = make_variant(ds, cfg.variant)
    families, projections = _hash_families(ds, cfg, c, counter)
    sset = build_sketch_set(variant, ds.features, families)
    seconds = time.perf_counter() - t0
    pre = Preprocessed(sset, projections, dict(core), seconds)
    if cache_dir is not None:
        with _locked(cache_dir):
            blobs = {}
            for name, mat in _blobs(pre):
                fpath = cache_dir / f"{name}.bin"
                with open(fpath, "wb") as fh:
                    write_matrix(fh, mat)
                blobs[name] = {"file": fpath.name, "checksum": _file_digest(fpath)}
            manifest = dict(core, blobs=blobs)
            (cache_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
            pre.manifest = manifest
    return pre


def cache_nbytes(cache_dir) -> int:
    cache_dir = Path(cache_dir)
    return sum(p.stat().st_size for p in cache_dir.iterdir() if p.name != ".lock")


def load_cache(cache_dir, ds: GraphDataset) -> Preprocessed:
    """Rebuild the in-memory sketch state from a cache written by :func:`preprocess`."""
    cache_dir = Path(cache_dir)
    mpath = cache_dir / "manifest.json"
    if not mpath.is_file():
        raise CacheError(f"no cache manifest in {cache_dir}")
    man = json.loads(mpath.read_text())
    if man.get("format") != "sketchgnn-cache" or man.get("version") != 1:
        raise CacheError(f"unsupported cache format {man.get('format')} v{man.get('version')}")
    if man["source_checksum"] != ds.checksum():
        raise CacheError("cache was built from a different dataset")

    def blob(name):
        meta = man["blobs"][name]
        fpath = cache_dir / meta["file"]
        if _file_digest(fpath) != meta["checksum"]:
            raise CacheError(f"checksum mismatch for {fpath.name}")
        with open(fpath, "rb") as fh:
            return read_matrix(fh)

    r, L, c = man["r"], man["layers"], man["c"]
    variant = make_variant(ds, man["variant"])
    layers, projections = [], []
    for l in range(L):
        pairs = []
        for k in range(r):
            hs = blob(f"l{l}_hash_{k}")
            pairs.append(HashPair(hs[0].astype(np.int64), hs[1], c))
        fam = SketchFamily(pairs, signs_fixed=man["variant"] == "gat")
        convs = {}
        for name in ("conv", "mask"):
            if f"l{l}_{name}_0_0" in man["blobs"]:
                convs[name] = TwoSidedConvSketches(
                    [[blob(f"l{l}_{name}_{a}_{b}") for b in range(r)] for a in range(r)])
        layers.append(LayerSketchState(
            fam=fam,
            conv=convs["conv"],
            ones=[blob(f"l{l}_ones_{k}")[0] for k in range(r)],
            directories=[LshDirectory(p.h, p.c) for p in pairs],
            ts_fam=stack_family(fam) if man["variant"] == "sage" else None,
            mask_conv=convs.get("mask"),
        ))
        projections.append([SimHashProjection(blob(f"l{l}_proj_{k}")) for k in range(r)])
    for l in range(L - 1):
        layers[l].to_next = BasisChange.between(layers[l].fam, layers[l + 1].fam)
    features = [blob(f"features_{k}") for k in range(r)]
    sources = [(m, m.tocsc()) for m in variant.sketch_sources()]
    sset = SketchSet(variant, layers, features, sources)
    return Preprocessed(sset, projections, man, 0.0)
