import numpy as np
import pytest
import scipy.sparse as sp

from sketchgnn import tape as tp
from sketchgnn.linalg import ShapeError
from sketchgnn.model import (
    GnnVariant,
    build_sketch_set,
    decode_final,
    dense_forward,
    estimate_gat_conv_sketches,
    forward_sketched,
    init_params,
    sketch_gcn_layer,
    sketch_sage_layer,
    sketched_forward_on_tape,
)
from sketchgnn.pts import pts_dense_reference
from sketchgnn.sketch import (
    count_sketch_rows,
    identity_family,
    stack_family,
    ones_sketch,
    random_family,
    tensor_sketch_rows,
)
from sketchgnn.verify import _variant_matrix, degeneracy_error, fd_check, random_graph, \
    sketched_gcn_gradcheck

from conftest import small_variant


@pytest.mark.parametrize("kind", ["gcn", "sage", "gat"])
@pytest.mark.parametrize("layers", [1, 2, 3])
def test_identity_hashing_reproduces_dense(kind, layers):
    for seed in range(3):
        assert degeneracy_error(kind, 9 + 4 * seed, layers, seed) <= 1e-8


class TestGcnLayerComposition:
    def test_matches_literal_composition(self):
        """Sketched layer equals count-sketching the product of tensor-sketched factors."""
        rng = np.random.default_rng(0)
        n, c, r = 12, 6, 3
        variant = small_variant("gcn", n, rng, p=0.3)
        cm = variant.cmat.toarray()
        x = rng.normal(size=(n, 3))
        w = rng.normal(size=(3, 2))
        coeffs = rng.normal(size=r + 1)
        fam = random_family(n, c, r, 7)
        sset = build_sketch_set(variant, x, [fam])
        got = sketch_gcn_layer(sset.layers[0], sset.features, w, coeffs, bias=True)
        xw_t = (x @ w).T
        for kp in range(r):
            want = coeffs[0] * np.outer(np.ones(2), ones_sketch(fam.pairs[kp]))
            for k in range(1, r + 1):
                prod = tensor_sketch_rows(cm, fam, k) @ tensor_sketch_rows(xw_t, fam, k).T
                want = want + coeffs[k] * count_sketch_rows(prod.T, fam.pairs[kp])
            np.testing.assert_allclose(got[kp], want, atol=1e-10)

    def test_rejects_wrong_lengths(self):
        rng = np.random.default_rng(0)
        variant = small_variant("gcn", 8, rng)
        fam = random_family(8, 4, 2, 0)
        sset = build_sketch_set(variant, rng.normal(size=(8, 2)), [fam])
        with pytest.raises(ValueError):
            sketch_gcn_layer(sset.layers[0], sset.features, np.eye(2), np.ones(5))
        with pytest.raises(ValueError):
            sketch_gcn_layer(sset.layers[0], sset.features[:1], np.eye(2), np.ones(3))

    def test_feature_rows_checked(self):
        rng = np.random.default_rng(0)
        variant = small_variant("gcn", 8, rng)
        with pytest.raises(ShapeError):
            build_sketch_set(variant, np.ones((7, 2)), [random_family(8, 4, 2, 0)])


def _sage_setup(n, c, r, seed, fam=None):
    rng = np.random.default_rng(seed)
    variant = small_variant("sage", n, rng, p=0.3)
    x = rng.normal(size=(n, 3))
    fam = fam or random_family(n, c, r, seed + 1)
    sset = build_sketch_set(variant, x, [fam])
    return variant, x, fam, sset, rng


class TestSage:
    def test_zero_neighbour_weights_ignore_graph(self):
        rng = np.random.default_rng(1)
        n = 15
        x = rng.normal(size=(n, 3))
        params = init_params("sage", [3, 2], 2, 0)
        params.weights2[0][:] = 0.0
        fam = random_family(n, 6, 2, 3)
        outs = []
        for seed in range(2):
            variant = small_variant("sage", n, np.random.default_rng(seed), p=0.3)
            outs.append(forward_sketched(params, build_sketch_set(variant, x, [fam.copy()])))
        for a, b in zip(*outs):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_neighbour_weights_at_identity_is_self_loop_layer(self):
        n = 9
        variant, x, fam, sset, rng = _sage_setup(n, n, 1, 2, fam=identity_family(n, 1))
        w1 = rng.normal(size=(3, 2))
        coeffs = rng.normal(size=2)
        out = sketch_sage_layer(sset.layers[0], sset.features, w1, np.zeros((3, 2)), coeffs)
        want = pts_dense_reference(np.eye(n), x, w1, coeffs)
        np.testing.assert_allclose(out[0].T, want, atol=1e-10)

    def test_identity_matches_stacked_dense_form(self):
        n = 9
        variant, x, fam, sset, rng = _sage_setup(n, n, 1, 3, fam=identity_family(n, 1))
        w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        coeffs = rng.normal(size=2)
        out = sketch_sage_layer(sset.layers[0], sset.features, w1, w2, coeffs)
        stacked = variant.stacked().toarray()
        want = pts_dense_reference(stacked, np.vstack([x @ w1, x @ w2]), np.eye(2), coeffs)
        np.testing.assert_allclose(out[0].T, want, atol=1e-10)

    def test_matches_stacked_composition(self):
        n, c, r = 10, 6, 3
        variant, x, fam, sset, rng = _sage_setup(n, c, r, 4)
        w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        coeffs = rng.normal(size=r + 1)
        got = sketch_sage_layer(sset.layers[0], sset.features, w1, w2, coeffs)
        ts = stack_family(fam)
        cstack = variant.stacked().toarray()
        y_t = np.vstack([x @ w1, x @ w2]).T
        for kp in range(r):
            want = coeffs[0] * np.outer(np.ones(2), ones_sketch(fam.pairs[kp]))
            for k in range(1, r + 1):
                prod = tensor_sketch_rows(cstack, ts, k) @ tensor_sketch_rows(y_t, ts, k).T
                want = want + coeffs[k] * count_sketch_rows(prod.T, fam.pairs[kp])
            np.testing.assert_allclose(got[kp], want, atol=1e-8)

    def test_branch_shapes_checked(self):
        _, _, _, sset, _ = _sage_setup(10, 4, 2, 0)
        with pytest.raises(ShapeError):
            sketch_sage_layer(sset.layers[0], sset.features, np.ones((3, 2)), np.ones((3, 4)),
                              np.ones(3))


class TestGat:
    def test_signs_required(self):
        rng = np.random.default_rng(0)
        variant = small_variant("gat", 8, rng)
        with pytest.raises(ValueError):
            build_sketch_set(variant, np.ones((8, 2)), [random_family(8, 4, 2, 0)])

    def test_zero_attention_at_identity_is_row_normalised_mask(self):
        rng = np.random.default_rng(2)
        n = 10
        variant = small_variant("gat", n, rng, p=0.3)
        x = rng.normal(size=(n, 3))
        sset = build_sketch_set(variant, x, [identity_family(n, 1)])
        st = sset.layers[0]
        est = estimate_gat_conv_sketches(st, sset.features, np.eye(3), np.zeros((2, 3)))
        np.testing.assert_allclose(est.dense(0, 0), st.conv.dense(0, 0), atol=1e-12)
        mask = variant.cmat.toarray()
        rownorm = mask / mask.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(est.dense(0, 0), rownorm.T, atol=1e-12)

    def test_identity_matches_dense_attention(self):
        rng = np.random.default_rng(5)
        n = 8
        variant = small_variant("gat", n, rng, p=0.4)
        x = rng.normal(size=(n, 3))
        params = init_params("gat", [3, 2], 1, 0, skip=False)
        params.attn[0] = rng.normal(size=(2, 2))
        params.coeffs[0] = np.array([0.0, 1.0])
        sset = build_sketch_set(variant, x, [identity_family(n, 1)])
        hw = x @ params.weights[0]
        mask = variant.cmat.toarray()
        e = hw @ params.attn[0][0][:, None] + (hw @ params.attn[0][1])[None, :]
        e = np.where(e > 0, e, 0.2 * e)
        att = np.where(mask > 0, np.exp(e), 0.0)
        att /= att.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(decode_final(params, sset), att @ hw, atol=1e-10)

    def test_estimate_counts_pairs(self):
        rng = np.random.default_rng(3)
        variant = small_variant("gat", 20, rng)
        fam = random_family(20, 6, 2, 1, signs=False)
        sset = build_sketch_set(variant, rng.normal(size=(20, 2)), [fam])
        counter = {}
        estimate_gat_conv_sketches(sset.layers[0], sset.features, np.eye(2),
                                   rng.normal(size=(2, 2)), counter=counter)
        assert 0 < counter["pair_scores"] <= 2 * 36


class TestSkip:
    def test_only_square_layers(self):
        p = init_params("gcn", [4, 4, 3], 2, 0)
        assert p.skip_at(0) and not p.skip_at(1)
        q = init_params("gcn", [4, 4, 3], 2, 0, skip=False)
        assert not q.skip_at(0)

    def test_skip_adds_input(self):
        rng = np.random.default_rng(4)
        n = 10
        variant = small_variant("gcn", n, rng)
        x = rng.normal(size=(n, 3))
        on = init_params("gcn", [3, 3], 1, 0)
        off = init_params("gcn", [3, 3], 1, 0, skip=False)
        sset = build_sketch_set(variant, x, [identity_family(n, 1)])
        diff = decode_final(on, sset) - decode_final(off, sset)
        np.testing.assert_allclose(diff, x, atol=1e-12)
        np.testing.assert_allclose(dense_forward(on, variant, x) - dense_forward(off, variant, x),
                                   x, atol=1e-12)


def test_fidelity_improves_with_sketch_size():
    """Mean relative decode error of a 2-layer network over 20 hash seeds
    does not increase as the sketch widens."""
    rng = np.random.default_rng(5)
    n = 500
    variant = small_variant("gcn", n, rng, p=4.0 / n)
    x = rng.normal(size=(n, 4))
    params = init_params("gcn", [4, 4, 3], 3, 0)
    want = dense_forward(params, variant, x)
    errs = []
    for ratio in (0.1, 0.25, 0.5, 1.0):
        c = int(ratio * n)
        e = []
        for s in range(20):
            fams = [random_family(n, c, 3, 2 * s), random_family(n, c, 3, 2 * s + 1)]
            got = decode_final(params, build_sketch_set(variant, x, fams))
            e.append(np.linalg.norm(got - want) / np.linalg.norm(want))
        errs.append(np.mean(e))
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs


class TestGradients:
    def test_gcn_parameters(self):
        errs = sketched_gcn_gradcheck(seed=1)
        assert max(errs.values()) < 1e-5, errs

    @pytest.mark.parametrize("kind", ["sage", "gat"])
    def test_other_variants(self, kind):
        rng = np.random.default_rng(6)
        n, c, r = 12, 6, 2
        variant = GnnVariant(kind, _variant_matrix(kind, random_graph(n, 0.3, rng)))
        x = rng.normal(size=(n, 3))
        params = init_params(kind, [3, 4, 2], r, 1)
        signs = kind != "gat"
        fams = [random_family(n, c, r, 10 + l, signs=signs) for l in range(2)]
        sset = build_sketch_set(variant, x, fams)
        labels = rng.integers(0, 2, size=n)

        def run():
            t = tp.Tape()
            pv, _, out = sketched_forward_on_tape(t, params, sset)
            loss = tp.softmax_xent(tp.median_decode(out, fams[-1], np.arange(n)), labels)
            t.backward(loss)
            return float(loss.value), {k: t.grad(v) for k, v in pv.items()}

        _, grads = run()
        for name, val in params.tensors().items():
            assert fd_check(lambda: run()[0], val, grads[name]) < 1e-4, name


def test_layer_count_mismatch():
    rng = np.random.default_rng(0)
    variant = small_variant("gcn", 8, rng)
    sset = build_sketch_set(variant, rng.normal(size=(8, 2)), [random_family(8, 4, 2, 0)])
    with pytest.raises(ValueError):
        forward_sketched(init_params("gcn", [2, 2, 2], 2, 0), sset)
    with pytest.raises(ValueError):
        forward_sketched(init_params("sage", [2, 2], 2, 0), sset)
