import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchgnn.lsh import (
    ClassLossTables,
    LshDirectory,
    SimHashProjection,
    build_hash_pair,
    lsh_update_due,
    random_projection,
    rehash_subset,
    sample_pairs,
    select_loss_nodes,
    select_update_set,
    simhash,
    simhash_codes,
    triplet_loss,
)
from sketchgnn.model import build_sketch_set
from sketchgnn.sketch import random_family
from sketchgnn.verify import fd_check

from conftest import dense, small_variant


class TestSimHash:
    def test_identity_projection(self):
        assert simhash(SimHashProjection(np.eye(3)), [1.0, 0.0, 0.0]) == 0

    def test_negation_shifts_half(self, rng):
        proj = random_projection(10, 4, 1)
        for _ in range(100):
            u = rng.normal(size=4)
            assert simhash(proj, -u) == (simhash(proj, u) + 5) % 10

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, alpha):
        rng = np.random.default_rng(seed)
        proj = random_projection(8, 3, seed)
        u = rng.normal(size=3)
        assert simhash(proj, alpha * u) == simhash(proj, u)

    def test_ties_lowest_index(self):
        assert simhash(SimHashProjection(np.ones((2, 2))), [1.0, 1.0]) == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            simhash(random_projection(4, 2, 0), [])

    def test_odd_bucket_count_rejected(self):
        with pytest.raises(ValueError):
            random_projection(5, 2, 0)

    def test_locality(self):
        """Collision frequency rises with cosine similarity."""
        rng = np.random.default_rng(3)
        d, c = 16, 16
        bins = np.zeros(10)
        hits = np.zeros(10)
        for t in range(10_000):
            cos = rng.uniform(-1, 1)
            u = rng.normal(size=d)
            u /= np.linalg.norm(u)
            w = rng.normal(size=d)
            w -= (w @ u) * u
            w /= np.linalg.norm(w)
            v = cos * u + np.sqrt(1 - cos**2) * w
            proj = random_projection(c, d, t)
            b = min(int((cos + 1) / 0.2), 9)
            bins[b] += 1
            hits[b] += simhash(proj, u) == simhash(proj, v)
        freq = hits / bins
        assert all(b >= a - 1e-12 for a, b in zip(freq, freq[1:])), freq

    def test_build_pair(self, rng):
        proj = random_projection(64, 8, 2)
        x = rng.normal(size=(1000, 8))
        x[1] = x[0]
        counter = {}
        hp = build_hash_pair(proj, x, 5, counter=counter)
        assert hp.h[0] == hp.h[1]
        assert counter["matvecs"] == 1000
        sizes = hp.bucket_sizes()
        assert sizes.max() < 10 * sizes.mean()
        gat = build_hash_pair(proj, x, 5, signs=False)
        assert np.all(gat.s == 1.0)
        with pytest.raises(ValueError):
            build_hash_pair(proj, x[:, :3], 5)


class TestDirectory:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 19), st.integers(0, 5)), max_size=60))
    def test_consistency_under_moves(self, moves):
        rng = np.random.default_rng(0)
        d = LshDirectory(rng.integers(0, 6, size=20), 6)
        for node, b in moves:
            d.move([node], [b])
            assert d.code(node) == b
        d.audit()
        assert d.sizes().sum() == 20

    def test_ids(self):
        d = LshDirectory([1, 0, 1], 2, ids=[10, 20, 30])
        np.testing.assert_array_equal(np.sort(d.members(1)), [10, 30])
        d.move([30], [0])
        np.testing.assert_array_equal(np.sort(d.members(0)), [20, 30])


def brute_update_set(grads, fam, beta):
    m = int(np.ceil(beta * fam.c))
    out = set()
    for k, g in enumerate(grads):
        norms = [float(np.linalg.norm(g[:, j])) for j in range(fam.c)]
        order = sorted(range(fam.c), key=lambda j: (-norms[j], j))[:m]
        out |= {i for i in range(fam.n) if fam.pairs[k].h[i] in order}
    return np.array(sorted(out), dtype=np.int64)


class TestUpdateSet:
    def test_zero_gradients_tie_break(self):
        fam = random_family(30, 10, 2, 1)
        grads = [np.zeros((3, 10))] * 2
        b = select_update_set(grads, fam, 0.1)
        want = np.flatnonzero((fam.pairs[0].h == 0) | (fam.pairs[1].h == 0))
        np.testing.assert_array_equal(b, want)

    def test_forced_bucket(self):
        fam = random_family(30, 10, 2, 2)
        g0 = np.zeros((3, 10))
        g0[:, 7] = 1.0
        b = select_update_set([g0, np.zeros((3, 10))], fam, 1e-6)
        assert set(np.flatnonzero(fam.pairs[0].h == 7)) <= set(b.tolist())

    def test_matches_bruteforce(self, rng):
        for seed in range(10):
            fam = random_family(40, 12, 3, seed)
            grads = [rng.normal(size=(4, 12)) for _ in range(3)]
            dirs = [LshDirectory(p.h, p.c) for p in fam.pairs]
            want = brute_update_set(grads, fam, 0.2)
            np.testing.assert_array_equal(select_update_set(grads, fam, 0.2), want)
            np.testing.assert_array_equal(select_update_set(grads, fam, 0.2, dirs), want)

    def test_bad_beta(self):
        fam = random_family(5, 2, 1, 0)
        with pytest.raises(ValueError):
            select_update_set([np.zeros((1, 2))], fam, 0.0)


class TestTriplet:
    def test_inactive_hinge(self, rng):
        proj = random_projection(8, 3, 0)
        xb = np.array([[1.0, 0, 0], [1.0, 0.01, 0], [-1.0, 0, 0]])
        loss, grad, _ = triplet_loss(proj, xb, 0.5, 0.1, 0.1, pairs=([(0, 1)], [(0, 2)]))
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_no_pairs(self):
        proj = random_projection(8, 3, 0)
        loss, grad, info = triplet_loss(proj, np.ones((1, 3)), 0.5, 0.1)
        assert loss == 0.0 and not grad.any()
        assert info == {"positives": 0, "negatives": 0}

    def test_finite_differences(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            proj = random_projection(8, 4, seed)
            xb = rng.normal(size=(6, 4))
            pairs = ([(0, 1), (2, 3)], [(0, 4), (1, 5), (2, 5)])
            loss, grad, _ = triplet_loss(proj, xb, 0.5, 0.1, 10.0, pairs=pairs)
            assert loss > 0
            err = fd_check(lambda: triplet_loss(proj, xb, 0.5, 0.1, 10.0, pairs=pairs)[0],
                           proj.p, grad)
            assert err < 1e-4

    def test_descent_step(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=4)
        xb = np.vstack([a + 0.05 * rng.normal(size=(4, 4)), -a + 0.05 * rng.normal(size=(4, 4))])
        proj = random_projection(8, 4, 9)
        pos, neg = sample_pairs(xb, 0.5, 0.1)
        assert len(pos) and len(neg)
        loss, grad, _ = triplet_loss(proj, xb, 0.5, 0.1, 50.0, pairs=(pos, neg))
        assert loss > 0
        stepped = SimHashProjection(proj.p - 1e-2 * grad)
        after, _, _ = triplet_loss(stepped, xb, 0.5, 0.1, 50.0, pairs=(pos, neg))
        assert after < loss

    def test_pair_cap(self, rng):
        xb = rng.normal(size=(200, 3))
        pos, neg = sample_pairs(xb, 0.5, 0.1, pair_cap=50, rng=1)
        assert len(pos) <= 50 and len(neg) <= 50

    def test_thresholds_validated(self):
        with pytest.raises(ValueError):
            sample_pairs(np.ones((3, 2)), 0.1, 0.5)


class TestSchedule:
    def test_warmup_then_period(self):
        due = [e for e in range(1, 41) if lsh_update_due(e)]
        assert due == [1, 2, 3, 4, 5, 10, 20, 30, 40]


def _state(sset):
    out = {}
    for l, st in enumerate(sset.layers):
        for name, conv in (("conv", st.conv), ("mask", st.mask_conv)):
            if conv is None:
                continue
            for a, row in enumerate(conv.blocks):
                for b, blk in enumerate(row):
                    out[f"{l}{name}{a}{b}"] = dense(blk)
        for k, o in enumerate(st.ones):
            out[f"{l}ones{k}"] = np.asarray(o)
        if st.to_next is not None:
            for k, m in enumerate(st.to_next.matrices):
                out[f"{l}T{k}"] = m.toarray()
    for k, f in enumerate(sset.features):
        out[f"feat{k}"] = f
    return out


class TestRehash:
    @pytest.mark.parametrize("kind", ["gcn", "sage", "gat"])
    @pytest.mark.parametrize("layer", [0, 1])
    def test_incremental_equals_rebuild(self, kind, layer):
        rng = np.random.default_rng(11)
        n, c, r, d = 20, 8, 2, 3
        variant = small_variant(kind, n, rng, p=0.2)
        x = rng.normal(size=(n, d))
        signs = kind != "gat"
        fams = [random_family(n, c, r, 100 + l, signs=signs) for l in range(3)]
        sset = build_sketch_set(variant, x, [f.copy() for f in fams])
        nodes = np.array([1, 4, 9, 15])
        # layer 0 edits feature sketches with the decoded rows, so give exact rows
        decoded = x[nodes] if layer == 0 else rng.normal(size=(nodes.size, d))
        for k in range(r):
            proj = random_projection(c, d, 50 + k)
            rep = rehash_subset(sset.rehash_target(layer), k, proj, decoded, nodes)
            assert rep.moved.size > 0
        rebuilt = build_sketch_set(variant, x, [st.fam.copy() for st in sset.layers])
        got, want = _state(sset), _state(rebuilt)
        assert got.keys() == want.keys()
        for key in want:
            np.testing.assert_allclose(got[key], want[key], atol=1e-10, err_msg=key)
        for st in sset.layers:
            for dct in st.directories:
                dct.audit()

    def test_empty_set_is_noop(self):
        rng = np.random.default_rng(0)
        variant = small_variant("gcn", 12, rng)
        sset = build_sketch_set(variant, rng.normal(size=(12, 2)),
                                [random_family(12, 4, 2, l) for l in range(2)])
        before = _state(sset)
        rep = rehash_subset(sset.rehash_target(1), 0, random_projection(4, 2, 0),
                            np.zeros((0, 2)), [])
        assert rep.moved.size == 0
        for key, val in _state(sset).items():
            np.testing.assert_array_equal(val, before[key])

    def test_undecodable_rows_skipped(self):
        rng = np.random.default_rng(0)
        variant = small_variant("gcn", 12, rng)
        sset = build_sketch_set(variant, rng.normal(size=(12, 2)),
                                [random_family(12, 4, 2, l) for l in range(2)])
        decoded = np.array([[np.nan, 1.0], [0.0, 0.0]])
        rep = rehash_subset(sset.rehash_target(1), 0, random_projection(4, 2, 0), decoded, [3, 5])
        np.testing.assert_array_equal(rep.skipped, [3, 5])

    def test_touch_count_independent_of_n(self):
        touched = []
        for n in (200, 800):
            rng = np.random.default_rng(1)
            variant = small_variant("gcn", n, rng, p=4.0 / n)
            sset = build_sketch_set(variant, rng.normal(size=(n, 3)),
                                    [random_family(n, 16, 2, l) for l in range(2)])
            nodes = np.arange(10)
            counter = {}
            rehash_subset(sset.rehash_target(1), 0, random_projection(16, 3, 0),
                          rng.normal(size=(10, 3)), nodes, counter)
            touched.append(counter["touched"])
        assert touched[1] <= 2 * touched[0]


class TestLossTables:
    def _tables(self):
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, -1])
        return ClassLossTables(labels, np.arange(10), 3), labels

    def test_indexes_labelled_nodes(self):
        t, _ = self._tables()
        assert t.size == 9

    def test_perfect_predictor_random_topup(self):
        t, labels = self._tables()
        nodes = np.arange(9)
        t.update_codes(nodes, np.eye(3)[labels[nodes]])
        assert t.disagreement_counts().sum() == 0
        sel = select_loss_nodes(t, budget=6, rng=0)
        assert sel.size == 6

    def test_adversarial_predictor(self):
        t, labels = self._tables()
        nodes = np.arange(9)
        wrong = np.eye(3)[(labels[nodes] + 1) % 3]
        t.update_codes(nodes, wrong)
        sel = select_loss_nodes(t, budget=6, rng=0)
        preds = np.argmax(wrong, axis=1)
        assert np.all(preds[sel] != labels[sel])

    def test_bad_nodes_first(self):
        t, labels = self._tables()
        nodes = np.arange(9)
        preds = np.eye(3)[labels[nodes]]
        preds[4] = np.eye(3)[0]
        t.update_codes(nodes, preds)
        for seed in range(5):
            assert 4 in select_loss_nodes(t, budget=3, rng=seed)

    def test_decoder_counted(self):
        t, labels = self._tables()
        counter = {}
        sel = select_loss_nodes(t, lambda idx: np.eye(3)[labels[idx]], budget=4, rng=0,
                                counter=counter)
        assert counter["decodes"] == sel.size

    def test_errors(self):
        with pytest.raises(ValueError):
            ClassLossTables(np.array([-1, -1]), np.arange(2), 2)
        t, _ = self._tables()
        with pytest.raises(ValueError):
            select_loss_nodes(t, budget=0)
