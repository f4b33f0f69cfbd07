import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchgnn.data import (
    CacheError,
    DatasetError,
    GraphDataset,
    IsolatedNodeWarning,
    PreprocessConfig,
    cache_nbytes,
    load_cache,
    normalize_adjacency,
    preprocess,
    read_cora,
    read_dataset,
    row_normalize_features,
    sbm_generate,
    write_dataset,
)
from sketchgnn.model import build_sketch_set
from sketchgnn.data import make_variant


def _ds(n, edges, d=1):
    return GraphDataset(n, np.array(edges, dtype=np.int64).reshape(-1, 2), np.zeros((n, d)),
                        np.zeros(n, dtype=np.int64))


class TestNormalization:
    def test_single_node(self):
        np.testing.assert_array_equal(normalize_adjacency(_ds(1, []), "gcn").toarray(), [[1.0]])

    def test_two_nodes(self):
        np.testing.assert_allclose(normalize_adjacency(_ds(2, [[0, 1]]), "gcn").toarray(),
                                   np.full((2, 2), 0.5), atol=1e-15)

    def test_gcn_symmetric(self):
        ds = sbm_generate(3, 30, 0.3, 0.05, 3, 1)
        c = normalize_adjacency(ds, "gcn")
        assert abs(c - c.T).max() < 1e-12

    def test_sage_row_sums(self):
        ds = sbm_generate(2, 20, 0.3, 0.05, 2, 2)
        c = normalize_adjacency(ds, "sage")
        deg = np.asarray(ds.adjacency().sum(axis=1)).ravel()
        sums = np.asarray(c.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums[deg > 0], 1.0)
        assert c.diagonal().sum() == 0

    def test_sage_isolated_reported(self):
        with pytest.warns(IsolatedNodeWarning):
            c = normalize_adjacency(_ds(3, [[0, 1]]), "sage")
        assert c.toarray()[2].sum() == 0

    def test_gat_mask(self):
        c = normalize_adjacency(_ds(3, [[0, 1]]), "gat").toarray()
        np.testing.assert_array_equal(c, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            normalize_adjacency(_ds(2, [[0, 1]]), "gin")


class TestDataset:
    def test_edges_deduplicated(self):
        ds = _ds(3, [[1, 0], [0, 1], [2, 2], [1, 2]])
        np.testing.assert_array_equal(ds.edges, [[0, 1], [1, 2]])

    def test_bad_endpoint(self):
        with pytest.raises(DatasetError):
            _ds(2, [[0, 2]])

    def test_overlapping_splits(self):
        with pytest.raises(DatasetError):
            GraphDataset(2, np.zeros((0, 2)), np.zeros((2, 1)), np.zeros(2),
                         {"train": [0], "test": [0, 1]})

    def test_round_trip(self, tmp_path, toy_sbm):
        write_dataset(toy_sbm, tmp_path / "ds")
        back = read_dataset(tmp_path / "ds")
        np.testing.assert_array_equal(back.edges, toy_sbm.edges)
        np.testing.assert_array_equal(back.features, toy_sbm.features)
        np.testing.assert_array_equal(back.labels, toy_sbm.labels)
        for k in toy_sbm.splits:
            np.testing.assert_array_equal(back.splits[k], toy_sbm.splits[k])
        assert {p.name for p in (tmp_path / "ds").iterdir()} >= {
            "edges.tsv", "features.csv", "labels.csv", "splits.json"}

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            read_dataset(tmp_path / "absent")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**31), st.floats(0, 1))
    def test_round_trip_property(self, n, seed, p):
        import tempfile

        rng = np.random.default_rng(seed)
        iu = np.triu_indices(n, 1)
        keep = rng.random(iu[0].size) < p
        ds = GraphDataset(n, np.stack([iu[0][keep], iu[1][keep]], axis=1),
                          rng.normal(size=(n, 2)), rng.integers(-1, 3, size=n))
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(ds, tmp)
            back = read_dataset(tmp)
        assert back.checksum() == ds.checksum()


def test_row_normalized_features():
    ds = GraphDataset(3, np.zeros((0, 2)), np.array([[1.0, 3.0], [0.0, 0.0], [-2.0, 2.0]]),
                      np.zeros(3))
    out = row_normalize_features(ds)
    np.testing.assert_allclose(out.features, [[0.25, 0.75], [0, 0], [-0.5, 0.5]])
    np.testing.assert_array_equal(ds.features[0], [1.0, 3.0])


class TestSbm:
    def test_cliques(self):
        ds = sbm_generate(2, 5, 1.0, 0.0, 2, 0)
        assert ds.m == 2 * 10
        assert np.all(ds.labels[ds.edges[:, 0]] == ds.labels[ds.edges[:, 1]])

    def test_expected_edges(self):
        counts = [sbm_generate(3, 40, 0.2, 0.02, 3, s).m for s in range(20)]
        want = 0.2 * 3 * 40 * 39 / 2 + 0.02 * 3 * 40 * 40
        assert abs(np.mean(counts) - want) / want < 0.05

    def test_deterministic(self):
        a, b = sbm_generate(2, 30, 0.2, 0.02, 4, 5), sbm_generate(2, 30, 0.2, 0.02, 4, 5)
        assert a.checksum() == b.checksum()
        assert sbm_generate(2, 30, 0.2, 0.02, 4, 6).checksum() != a.checksum()

    def test_features_carry_block(self):
        ds = sbm_generate(3, 50, 0.1, 0.01, 3, 0, noise=0.1)
        np.testing.assert_array_equal(np.argmax(ds.features, axis=1), ds.labels)

    @pytest.mark.parametrize("kw", [dict(sizes=0), dict(p_in=1.5), dict(p_out=-0.1)])
    def test_rejects(self, kw):
        args = dict(blocks=2, sizes=5, p_in=0.5, p_out=0.1, d=2, seed=0)
        args.update(kw)
        with pytest.raises((DatasetError, ValueError)):
            sbm_generate(**args)


def _cfg(**kw):
    base = dict(variant="gcn", layers=2, dim=8, r=2, c=16, seed=0)
    base.update(kw)
    return PreprocessConfig(**base)


class TestPreprocess:
    def test_rerun_is_byte_identical(self, tmp_path, toy_sbm):
        preprocess(toy_sbm, _cfg(), tmp_path / "a")
        preprocess(toy_sbm, _cfg(), tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            if f.name != ".lock":
                assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    def test_existing_cache_reused(self, tmp_path, toy_sbm):
        preprocess(toy_sbm, _cfg(), tmp_path)
        before = (tmp_path / "manifest.json").stat().st_mtime_ns
        preprocess(toy_sbm, _cfg(), tmp_path)
        assert (tmp_path / "manifest.json").stat().st_mtime_ns == before

    def test_collision_rejected(self, tmp_path, toy_sbm):
        preprocess(toy_sbm, _cfg(), tmp_path)
        with pytest.raises(CacheError):
            preprocess(toy_sbm, _cfg(r=3), tmp_path)

    def test_corrupt_blob_rejected(self, tmp_path, toy_sbm):
        preprocess(toy_sbm, _cfg(), tmp_path)
        f = tmp_path / "features_0.bin"
        data = bytearray(f.read_bytes())
        data[-1] ^= 0xFF
        f.write_bytes(bytes(data))
        with pytest.raises(CacheError):
            load_cache(tmp_path, toy_sbm)

    @pytest.mark.parametrize("variant", ["gcn", "sage", "gat"])
    def test_load_matches_fresh_sketch(self, tmp_path, toy_sbm, variant):
        pre = preprocess(toy_sbm, _cfg(variant=variant), tmp_path)
        loaded = load_cache(tmp_path, toy_sbm)
        fresh = build_sketch_set(make_variant(toy_sbm, variant), toy_sbm.features,
                                 [st.fam.copy() for st in loaded.sset.layers])
        for a, b in zip(loaded.sset.features, fresh.features):
            np.testing.assert_allclose(a, b, atol=1e-12)
        for sa, sb, sp_ in zip(loaded.sset.layers, fresh.layers, pre.sset.layers):
            for k in range(2):
                for kp in range(2):
                    np.testing.assert_allclose(sa.conv.dense(k, kp), sb.conv.dense(k, kp),
                                               atol=1e-12)
                np.testing.assert_allclose(sa.ones[k], sb.ones[k], atol=1e-12)
                np.testing.assert_array_equal(sa.fam.pairs[k].h, sp_.fam.pairs[k].h)
            if sb.to_next is not None:
                for ma, mb in zip(sa.to_next.matrices, sb.to_next.matrices):
                    np.testing.assert_allclose(ma.toarray(), mb.toarray(), atol=1e-12)
        for ra, rb in zip(loaded.projections, pre.projections):
            for pa, pb in zip(ra, rb):
                np.testing.assert_array_equal(pa.p, pb.p)

    def test_initial_basis_changes_are_identity(self, toy_sbm):
        """Every layer starts from the same tables, so T is I on used buckets."""
        pre = preprocess(toy_sbm, _cfg())
        for k, m in enumerate(pre.sset.layers[0].to_next.matrices):
            used = pre.sset.layers[0].fam.pairs[k].bucket_sizes() > 0
            np.testing.assert_allclose(m.toarray()[used], np.eye(16)[used])
            assert not m.toarray()[~used].any()

    def test_c_larger_than_n(self):
        ds = sbm_generate(2, 5, 0.5, 0.1, 2, 0)
        with pytest.raises(ValueError):
            preprocess(ds, _cfg(c=20))

    def test_cache_size_independent_of_n(self, tmp_path):
        sizes = []
        for n in (1000, 4000):
            ds = sbm_generate(4, n // 4, 20.0 / n, 2.0 / n, 8, 0)
            preprocess(ds, _cfg(c=64, r=2), tmp_path / str(n))
            sizes.append(cache_nbytes(tmp_path / str(n)))
        assert max(sizes) / min(sizes) <= 2.0, sizes

    def test_manifest_records_checksum(self, tmp_path, toy_sbm):
        preprocess(toy_sbm, _cfg(), tmp_path)
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert man["source_checksum"] == toy_sbm.checksum()
        assert all(len(b["checksum"]) == 16 for b in man["blobs"].values())


class TestCora:
    def test_reads_content_and_cites(self, tmp_path):
        (tmp_path / "x.content").write_text(
            "p1 1 0 1 A\np2 0 1 0 B\np3 1 1 0 A\np4 0 0 1 C\n")
        (tmp_path / "x.cites").write_text("p1 p2\np2 p1\np3 p1\np9 p1\np4 p4\n")
        ds = read_cora(tmp_path / "x.content", tmp_path / "x.cites")
        assert ds.n == 4
        np.testing.assert_array_equal(ds.edges, [[0, 1], [0, 2]])
        np.testing.assert_array_equal(ds.labels, [0, 1, 0, 2])
        np.testing.assert_array_equal(ds.features[1], [0, 1, 0])
        assert ds.splits["train"].size == 4

    def test_empty_content(self, tmp_path):
        (tmp_path / "x.content").write_text("")
        (tmp_path / "x.cites").write_text("")
        with pytest.raises(DatasetError):
            read_cora(tmp_path / "x.content", tmp_path / "x.cites")
