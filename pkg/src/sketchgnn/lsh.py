"""SimHash, learnable hash projections and hash-table maintenance.

A :class:`SimHashProjection` maps a vector ``u`` to ``argmax [Pu | -Pu]``.
Per-layer hash tables are SimHash codes of node representations; the
projections are trained with a sampled triplet loss on soft codes and the
tables are refreshed for a small candidate set of nodes at a time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError, as_dense
from .sketch import HashPair, SketchFamily, compact, conv_row_deltas, ones_sketch

__all__ = [
    "SimHashProjection",
    "LshDirectory",
    "ClassLossTables",
    "random_projection",
    "simhash",
    "simhash_codes",
    "build_hash_pair",
    "select_update_set",
    "triplet_loss",
    "sample_pairs",
    "RehashTarget",
    "RehashReport",
    "rehash_subset",
    "select_loss_nodes",
    "lsh_update_due",
]


@dataclass
class SimHashProjection:
    """Projection ``p`` of shape (c/2) x d; codes live in ``[0, c)``."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 2 or self.p.shape[0] < 1:
            raise ShapeError(f"projection must be a non-empty matrix, got {self.p.shape}")
        if not np.all(np.isfinite(self.p)):
            raise ValueError("projection has non-finite entries")

    @property
    def c(self) -> int:
        return 2 * self.p.shape[0]

    @property
    def d(self) -> int:
        return self.p.shape[1]

    def copy(self) -> "SimHashProjection":
        return SimHashProjection(self.p.copy())


def random_projection(c: int, d: int, seed) -> SimHashProjection:
    if c < 2 or c % 2:
        raise ValueError(f"SimHash needs an even bucket count, got {c}")
    rng = np.random.default_rng(seed)
    return SimHashProjection(rng.standard_normal((c // 2, d)))


def simhash_codes(proj: SimHashProjection, x, counter: dict | None = None) -> np.ndarray:
    """Codes for every row of ``x``; ``argmax`` picks the lowest index on ties."""
    x = as_dense(x)
    if x.shape[1] != proj.d:
        raise ShapeError(f"simhash: rows of width {x.shape[1]} vs projection width {proj.d}")
    scores = x @ proj.p.T
    if counter is not None:
        counter["matvecs"] = counter.get("matvecs", 0) + x.shape[0]
    return np.argmax(np.concatenate([scores, -scores], axis=1), axis=1).astype(np.int64)


def simhash(proj: SimHashProjection, u) -> int:
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.size == 0:
        raise ValueError("simhash of an empty vector")
    return int(simhash_codes(proj, u[None, :])[0])


def build_hash_pair(
    proj: SimHashProjection, x, sign_seed, *, signs: bool = True, counter=None
) -> HashPair:
    """Data-dependent pair: ``h(i)`` is the SimHash code of row ``i`` of ``x``."""
    h = simhash_codes(proj, x, counter)
    if signs:
        rng = np.random.default_rng(sign_seed)
        s = rng.choice(np.array([-1.0, 1.0]), size=h.size)
    else:
        s = np.ones(h.size)
    return HashPair(h, s, proj.c)


class LshDirectory:
    """Bucket -> members and member -> bucket, kept mutually consistent.

    ``ids`` lists the node ids covered (default ``0..len(codes)-1``).  Member
    lists support O(1) removal by swapping with the last element.
    """

    def __init__(self, codes, c: int, ids=None):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= c):
            raise ValueError("code outside [0, c)")
        self.c = int(c)
        self.codes = codes.copy()
        if ids is None:
            self.ids = np.arange(codes.size)
            self._local = None
        else:
            self.ids = np.asarray(ids, dtype=np.int64)
            if self.ids.shape != codes.shape:
                raise ValueError("ids and codes differ in length")
            self._local = {int(g): i for i, g in enumerate(self.ids)}
        self._members: list[list[int]] = [[] for _ in range(self.c)]
        self._pos = np.empty(codes.size, dtype=np.int64)
        for i, b in enumerate(codes.tolist()):
            self._pos[i] = len(self._members[b])
            self._members[b].append(i)

    def __len__(self) -> int:
        return int(self.codes.size)

    def _loc(self, node: int) -> int:
        if self._local is None:
            if not 0 <= node < self.codes.size:
                raise KeyError(node)
            return int(node)
        return self._local[int(node)]

    def code(self, node: int) -> int:
        return int(self.codes[self._loc(node)])

    def members(self, b: int) -> np.ndarray:
        return self.ids[np.asarray(self._members[b], dtype=np.int64)]

    def size(self, b: int) -> int:
        return len(self._members[b])

    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self._members], dtype=np.int64)

    def move(self, nodes, new_codes) -> None:
        for node, nb in zip(np.atleast_1d(nodes).tolist(), np.atleast_1d(new_codes).tolist()):
            if not 0 <= nb < self.c:
                raise ValueError(f"code {nb} outside [0, {self.c})")
            i = self._loc(node)
            ob = int(self.codes[i])
            if ob == nb:
                continue
            lst = self._members[ob]
            pos = int(self._pos[i])
            last = lst[-1]
            lst[pos] = last
            self._pos[last] = pos
            lst.pop()
            self._pos[i] = len(self._members[nb])
            self._members[nb].append(i)
            self.codes[i] = nb

    def audit(self) -> None:
        """Full consistency check; raises AssertionError on any mismatch."""
        seen = np.zeros(self.codes.size, dtype=np.int64)
        for b, lst in enumerate(self._members):
            for pos, i in enumerate(lst):
                assert self.codes[i] == b, f"member {i} listed in {b} but coded {self.codes[i]}"
                assert self._pos[i] == pos, f"stale position for member {i}"
                seen[i] += 1
        assert np.all(seen == 1), "a member is missing or listed twice"


def select_update_set(
    sketch_grads, fam: SketchFamily, beta: float, directories=None
) -> np.ndarray:
    """Nodes in the ``ceil(beta * c)`` buckets with largest gradient-column norm.

    Ranking is per sketch index; ties go to the lowest bucket index.  With
    ``directories`` (one :class:`LshDirectory` per pair) the member lookup
    avoids a scan over all nodes.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    if len(sketch_grads) == 0:
        raise ValueError("no sketch gradients given")
    if len(sketch_grads) != fam.r:
        raise ValueError(f"{len(sketch_grads)} gradients for a family of order {fam.r}")
    m = math.ceil(beta * fam.c)
    chosen = []
    for k, g in enumerate(sketch_grads):
        g = np.asarray(g)
        if g.shape[1] != fam.c:
            raise ShapeError("gradient width does not match the family")
        norms = np.sqrt(np.sum(g * g, axis=0))
        top = np.lexsort((np.arange(fam.c), -norms))[:m]
        if directories is not None:
            chosen.extend(directories[k].members(int(b)) for b in top)
        else:
            chosen.append(np.flatnonzero(np.isin(fam.pairs[k].h, top)))
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(chosen)).astype(np.int64)


def _cosines(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    cos = np.divide(np.sum(a * b, axis=1), denom, out=np.zeros_like(denom), where=denom > 0)
    return cos, na, nb


def sample_pairs(xb, t_plus: float, t_minus: float, pair_cap: int = 1000, rng=None):
    """Positive and negative index pairs among the rows of ``xb``.

    Similarity is the cosine of the rows.  All pairs are enumerated when
    there are few of them; otherwise random pairs are drawn until both sets
    hold ``pair_cap`` pairs or the draw budget runs out.
    """
    if not t_plus > t_minus:
        raise ValueError("t_plus must exceed t_minus")
    xb = as_dense(xb)
    m = xb.shape[0]
    rng = np.random.default_rng(rng)
    empty = np.zeros((0, 2), dtype=np.int64)
    if m < 2:
        return empty, empty
    total = m * (m - 1) // 2
    if total <= 20 * pair_cap:
        i, j = np.triu_indices(m, k=1)
    else:
        draws = 20 * pair_cap
        i = rng.integers(0, m, size=draws)
        j = rng.integers(0, m, size=draws)
        keep = i != j
        i, j = i[keep], j[keep]
    cos, _, _ = _cosines(xb[i], xb[j])
    pos = np.flatnonzero(cos > t_plus)
    neg = np.flatnonzero(cos < t_minus)
    if pos.size > pair_cap:
        pos = np.sort(rng.choice(pos, size=pair_cap, replace=False))
    if neg.size > pair_cap:
        neg = np.sort(rng.choice(neg, size=pair_cap, replace=False))
    return np.stack([i[pos], j[pos]], axis=1), np.stack([i[neg], j[neg]], axis=1)


def _soft_cos_and_grad(p, xb, pairs):
    """Sum of cos(Pu, Pv) over pairs and its gradient w.r.t. P.

    The soft code ``[Pu | -Pu]`` has the same cosine as ``Pu``.
    """
    if pairs.shape[0] == 0:
        return 0.0, np.zeros_like(p)
    u, v = xb[pairs[:, 0]], xb[pairs[:, 1]]
    a, b = u @ p.T, v @ p.T
    cos, na, nb = _cosines(a, b)
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    da = (b / (na_s * nb_s)[:, None] - cos[:, None] * a / (na_s**2)[:, None]) * ok[:, None]
    db = (a / (na_s * nb_s)[:, None] - cos[:, None] * b / (nb_s**2)[:, None]) * ok[:, None]
    grad = da.T @ u + db.T @ v
    return float(np.sum(cos)), grad


def triplet_loss(
    proj: SimHashProjection,
    xb,
    t_plus: float,
    t_minus: float,
    alpha: float = 0.1,
    *,
    pair_cap: int = 1000,
    rng=None,
    pairs=None,
):
    """Hinge ``max(0, sum_neg cos - sum_pos cos + alpha)`` and its gradient in P.

    Returns ``(loss, grad, info)`` where ``info`` holds the pair counts.
    ``pairs`` may pass a precomputed ``(positives, negatives)`` tuple.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    xb = as_dense(xb)
    if xb.shape[1] != proj.d:
        raise ShapeError("decoded rows do not match the projection width")
    if pairs is None:
        pos, neg = sample_pairs(xb, t_plus, t_minus, pair_cap, rng)
    else:
        pos, neg = (np.asarray(q, dtype=np.int64).reshape(-1, 2) for q in pairs)
    info = {"positives": int(pos.shape[0]), "negatives": int(neg.shape[0])}
    if pos.shape[0] == 0 and neg.shape[0] == 0:
        return 0.0, np.zeros_like(proj.p), info
    s_pos, g_pos = _soft_cos_and_grad(proj.p, xb, pos)
    s_neg, g_neg = _soft_cos_and_grad(proj.p, xb, neg)
    margin = s_neg - s_pos + alpha
    if margin <= 0:
        return 0.0, np.zeros_like(proj.p), info
    return float(margin), g_neg - g_pos, info


def lsh_update_due(epoch: int, warmup: int = 5, period: int = 10) -> bool:
    """Every epoch up to ``warmup`` (1-based), then every ``period`` epochs."""
    return epoch <= warmup or (period > 0 and epoch % period == 0)


@dataclass
class RehashTarget:
    """Stored state that depends on one layer's hash family.

    ``conv`` lists ``(sketches, cmat, cmat_csc, ts_fam, stacked)`` tuples:
    two-sided sketches whose output side uses ``fam`` and whose tensor-sketch
    side uses ``ts_fam`` (``fam`` itself, or its stacked double when
    ``stacked``).  ``basis_in`` maps the previous layer into this one and
    ``basis_out`` maps this layer onward; ``prev_fam``/``next_fam`` are the
    families on their far sides.
    """

    fam: SketchFamily
    directories: list
    ones: list
    conv: list = field(default_factory=list)
    basis_in: object = None
    prev_fam: SketchFamily | None = None
    basis_out: object = None
    next_fam: SketchFamily | None = None
    feature_sketches: list | None = None


@dataclass
class RehashReport:
    moved: np.ndarray
    skipped: np.ndarray
    changed_fraction: float
    touched: int


def _edit_blocks(conv, deltas, sign):
    for (k, kp), d in deltas.items():
        blk = conv.blocks[k][kp]
        conv.blocks[k][kp] = compact(blk + sign * d) if not isinstance(blk, np.ndarray) \
            else compact(blk + sign * d.toarray())


def rehash_subset(
    target: RehashTarget, k: int, proj: SimHashProjection, decoded, nodes, counter=None
) -> RehashReport:
    """Recompute codes of pair ``k`` for ``nodes`` and patch dependent state.

    ``decoded`` holds one row per entry of ``nodes``.  Rows that are
    non-finite or all zero cannot be hashed meaningfully; those nodes keep
    their code and are reported as skipped.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    fam = target.fam
    pair = fam.pairs[k]
    if nodes.size == 0:
        return RehashReport(nodes, nodes, 0.0, 0)
    if nodes.min() < 0 or nodes.max() >= fam.n:
        raise IndexError("node outside the family domain")
    decoded = as_dense(decoded)
    if decoded.shape[0] != nodes.size:
        raise ShapeError("one decoded row per node is required")
    ok = np.all(np.isfinite(decoded), axis=1) & np.any(decoded != 0, axis=1)
    skipped = nodes[~ok]
    nodes, decoded = nodes[ok], decoded[ok]
    new = simhash_codes(proj, decoded, counter)
    old = pair.h[nodes].copy()
    moving = new != old
    mv, ob, nb = nodes[moving], old[moving], new[moving]
    touched = 0
    if mv.size:
        s = pair.s[mv]
        n = fam.n
        # two-sided convolution sketches
        conv_plans = []
        for sketches, cmat, csc, ts_fam, stacked in target.conv:
            cols = np.concatenate([mv, mv + n]) if stacked else mv
            rows = np.unique(np.concatenate([mv, csc[:, cols].indices]))
            which = [(a, b) for a in range(fam.r) for b in range(fam.r) if a >= k or b == k]
            before = conv_row_deltas(cmat, rows, ts_fam, fam, which)
            conv_plans.append((sketches, cmat, ts_fam, stacked, rows, which, before))
        # feature sketches stored for this family
        if target.feature_sketches is not None:
            sk = target.feature_sketches[k]
            np.subtract.at(sk.T, ob, s[:, None] * decoded[moving])
        if target.basis_in is not None:
            prev = target.prev_fam.pairs[k]
            target.basis_in.edit(k, prev.h[mv], prev.s[mv], ob, s, -1.0)
        if target.basis_out is not None:
            nxt = target.next_fam.pairs[k]
            target.basis_out.edit(k, ob, s, nxt.h[mv], nxt.s[mv], -1.0)
        np.subtract.at(target.ones[k], ob, s)
        # apply the move everywhere the pair is represented
        pair.reassign(mv, nb)
        target.directories[k].move(mv, nb)
        for sketches, cmat, ts_fam, stacked, rows, which, before in conv_plans:
            if stacked:
                ts_fam.pairs[k].reassign(np.concatenate([mv, mv + n]),
                                         np.concatenate([nb, nb + pair.c]))
            after = conv_row_deltas(cmat, rows, ts_fam, fam, which)
            _edit_blocks(sketches, before, -1.0)
            _edit_blocks(sketches, after, +1.0)
            touched += sum(d.nnz for d in before.values()) + sum(d.nnz for d in after.values())
        np.add.at(target.ones[k], nb, s)
        if target.basis_in is not None:
            target.basis_in.edit(k, prev.h[mv], prev.s[mv], nb, s, +1.0)
        if target.basis_out is not None:
            target.basis_out.edit(k, nb, s, nxt.h[mv], nxt.s[mv], +1.0)
        if target.feature_sketches is not None:
            np.add.at(sk.T, nb, s[:, None] * decoded[moving])
        touched += mv.size * (decoded.shape[1] + 4)
    if counter is not None:
        counter["touched"] = counter.get("touched", 0) + touched
        counter["skipped"] = counter.get("skipped", 0) + int(skipped.size)
    frac = float(mv.size) / float(max(nodes.size + skipped.size, 1))
    return RehashReport(mv, skipped, frac, touched)


class ClassLossTables:
    """One hash directory per class over the labelled training nodes.

    Codes are SimHash codes of each node's most recent decoded prediction;
    a class's prototype code is the code of that class's one-hot vector.
    With the default identity projection the code of a probability vector is
    its argmax, so "disagrees with the prototype" means "mispredicted".
    """

    def __init__(self, labels, nodes, num_classes: int, proj: SimHashProjection | None = None,
                 codes=None):
        labels = np.asarray(labels, dtype=np.int64)
        nodes = np.asarray(nodes, dtype=np.int64)
        nodes = nodes[labels[nodes] >= 0]
        if nodes.size == 0:
            raise ValueError("no labelled training nodes")
        self.num_classes = int(num_classes)
        self.proj = proj if proj is not None else SimHashProjection(np.eye(num_classes))
        if self.proj.d != num_classes:
            raise ShapeError("class projection width must equal the class count")
        self.prototypes = simhash_codes(self.proj, np.eye(num_classes))
        node_labels = labels[nodes]
        if codes is None:
            codes = self.prototypes[node_labels]
        codes = np.asarray(codes, dtype=np.int64)
        self.labels = {int(n): int(y) for n, y in zip(nodes, node_labels)}
        self.tables = []
        for y in range(num_classes):
            mask = node_labels == y
            self.tables.append(LshDirectory(codes[mask], self.proj.c, ids=nodes[mask]))

    @property
    def size(self) -> int:
        return sum(len(t) for t in self.tables)

    def update_codes(self, nodes, predictions) -> None:
        nodes = np.asarray(nodes, dtype=np.int64)
        if nodes.size == 0:
            return
        codes = simhash_codes(self.proj, predictions)
        for node, code in zip(nodes.tolist(), codes.tolist()):
            y = self.labels.get(node)
            if y is not None:
                self.tables[y].move([node], [code])

    def disagreement_counts(self) -> np.ndarray:
        out = np.zeros(self.num_classes, dtype=np.int64)
        for y, t in enumerate(self.tables):
            out[y] = len(t) - t.size(int(self.prototypes[y]))
        return out


def _draw_from_buckets(table: LshDirectory, buckets, q: int, rng) -> np.ndarray:
    """Up to ``q`` distinct members of ``buckets``, uniform over members."""
    sizes = np.array([table.size(int(b)) for b in buckets], dtype=np.int64)
    total = int(sizes.sum())
    if total == 0 or q <= 0:
        return np.zeros(0, dtype=np.int64)
    if total <= q:
        return np.concatenate([table.members(int(b)) for b in buckets])
    picks = np.sort(rng.choice(total, size=q, replace=False))
    bounds = np.cumsum(sizes)
    which = np.searchsorted(bounds, picks, side="right")
    offsets = picks - (bounds[which] - sizes[which])
    members = {int(bi): table.members(int(buckets[bi])) for bi in np.unique(which)}
    return np.array([members[bi][off] for bi, off in zip(which.tolist(), offsets.tolist())],
                    dtype=np.int64)


def select_loss_nodes(tables: ClassLossTables, decoder=None, budget: int = 256, rng=None,
                      counter=None) -> np.ndarray:
    """Labelled nodes to evaluate the loss on this step.

    The budget is split evenly over classes.  Within a class, nodes whose
    stored code differs from the class prototype come first; the remainder
    of the quota is filled uniformly at random from the rest of the class.
    Unused quota of small classes moves to the others.  If ``decoder`` is
    given, the selected nodes are decoded and their codes refreshed.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if tables.size == 0:
        raise ValueError("no labelled nodes")
    rng = np.random.default_rng(rng)
    ncls = tables.num_classes
    avail = np.array([len(t) for t in tables.tables], dtype=np.int64)
    quota = np.zeros(ncls, dtype=np.int64)
    left = min(budget, int(avail.sum()))
    while left > 0:
        open_ = np.flatnonzero(quota < avail)
        share = max(left // open_.size, 1)
        for y in open_:
            add = min(share, avail[y] - quota[y], left)
            quota[y] += add
            left -= add
            if left == 0:
                break
    picked = []
    for y, t in enumerate(tables.tables):
        if quota[y] == 0:
            continue
        proto = int(tables.prototypes[y])
        bad_buckets = [b for b in range(t.c) if b != proto and t.size(b) > 0]
        bad = _draw_from_buckets(t, bad_buckets, int(quota[y]), rng)
        rest = int(quota[y]) - bad.size
        good = _draw_from_buckets(t, [proto], rest, rng)
        picked.append(bad)
        picked.append(good)
    out = np.sort(np.concatenate(picked)).astype(np.int64)
    if decoder is not None:
        preds = decoder(out)
        if counter is not None:
            counter["decodes"] = counter.get("decodes", 0) + int(out.size)
        tables.update_codes(out, preds)
    return out
