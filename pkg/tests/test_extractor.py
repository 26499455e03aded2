import numpy as np
import pytest

from roadshot import tensornet as tn
from roadshot.extractor import (
    ModelConfig,
    build_support_graph,
    edgeconv_layer,
    gather_nodes,
    gnn_forward,
    heads_forward,
    init_params,
    knn_indices,
    load_params,
    model_forward,
    pairs_within_images,
    save_params,
    score_edges,
    select_nodes,
    stem_forward,
)
from roadshot.tensornet import Tensor

from oracles import edgeconv_loop, knn_brute

SMALL = ModelConfig(n_in=16, n_feat=8, gnn_dim=8, stem_channels=(4, 4, 8, 8))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(k=0)
    with pytest.raises(ValueError):
        ModelConfig(gnn_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(support="star")


def test_stem_shapes():
    p = init_params(SMALL, seed=0)
    assert stem_forward(np.zeros((3, 256, 256)), p).shape == (1, 16, 8, 8)
    out = stem_forward(np.random.default_rng(0).random((2, 3, 512, 512)), p)
    assert out.shape[2] * out.shape[3] == 256
    with pytest.raises(ValueError):
        stem_forward(np.zeros((3, 250, 256)), p)


def test_stem_zero_image_zero_features():
    p = init_params(SMALL, seed=1)
    assert not stem_forward(np.zeros((3, 64, 64)), p).data.any()


def test_zero_final_layers_give_neutral_heads():
    p = init_params(SMALL, seed=2)
    for b in ("junction", "offset"):
        p[f"{b}.2.w"].data[:] = 0
        p[f"{b}.2.b"].data[:] = 0
    fmap = stem_forward(np.random.default_rng(0).random((3, 64, 96)), p)
    h = heads_forward(fmap, p)
    assert np.all(h.junction.data == 0.5) and not h.offsets.data.any()
    assert h.junction.shape == (1, 2, 3)
    assert h.offsets.shape == (1, 2, 3, 2)
    assert h.node_features.shape == (1, 8, 2, 3)


def test_head_ranges_random_params():
    rng = np.random.default_rng(0)
    img = rng.random((3, 64, 64))
    for seed in range(100):
        p = init_params(SMALL, seed=seed)
        for k in ("junction.2.w", "offset.2.w"):
            p[k].data *= rng.uniform(1, 200)
        h = heads_forward(stem_forward(img, p), p)
        assert np.all((h.junction.data >= 0) & (h.junction.data <= 1))
        assert np.all(np.abs(h.offsets.data) <= 0.5)


def _heads(seed=0, size=128):
    p = init_params(SMALL, seed=seed)
    img = np.random.default_rng(seed).random((3, size, size))
    return p, heads_forward(stem_forward(img, p), p)


def test_select_nodes_thresholds():
    p, h = _heads()
    assert len(select_nodes(h, 1.0, SMALL)) == 0
    assert len(select_nodes(h, 0.0, SMALL)) == 16
    h.junction.data[:] = 0.2
    h.junction.data[0, 1, 2] = 0.9
    b = select_nodes(h, 0.5, SMALL)
    assert len(b) == 1 and b.cells.tolist() == [[1, 2]]
    # strict inequality
    h.junction.data[0, 1, 2] = 0.5
    assert len(select_nodes(h, 0.5, SMALL)) == 0


def test_node_features_and_coords():
    p, h = _heads()
    h.offsets.data[0, 2, 3] = (0.25, -0.5)
    b = gather_nodes(h, [np.array([[2, 3]])], SMALL)
    assert b.coords.tolist() == [[(0.25 + 3 + 0.5) * 32, (-0.5 + 2 + 0.5) * 32]]
    assert b.feats.shape == (1, SMALL.n_feat + 2)
    np.testing.assert_array_equal(b.feats.data[0, :8], h.node_features.data[0, :, 2, 3])
    np.testing.assert_allclose(b.feats.data[0, 8:], b.coords[0] / 128)
    raw = ModelConfig(**{**SMALL.as_dict(), "use_raw_features": True, "embed_coords": False})
    b2 = gather_nodes(h, [np.array([[2, 3]])], raw)
    np.testing.assert_array_equal(b2.feats.data[0], h.fmap.data[0, :, 2, 3])


def test_complete_support():
    src, dst = build_support_graph(5, None, "complete")
    pairs = {frozenset(e) for e in zip(src.tolist(), dst.tolist())}
    assert len(pairs) == 10 and len(src) == 20
    assert build_support_graph(1, None, "complete")[0].tolist() == [0]


def test_knn_collinear_endpoint():
    feats = np.arange(6, dtype=float)[:, None] * 2.0
    nbrs = knn_indices(feats, 4)
    assert nbrs[0].tolist() == [1, 2, 3, 4]
    assert nbrs[5].tolist() == [4, 3, 2, 1]
    # interior tie: 2 is equidistant from 1 and 3, lower index first
    assert nbrs[2].tolist()[:2] == [1, 3]


def test_knn_truncation():
    src, dst = build_support_graph(3, np.random.default_rng(0).random((3, 2)), "knn_static", 4)
    assert np.bincount(dst).tolist() == [2, 2, 2]


def test_knn_matches_brute_force():
    rng = np.random.default_rng(7)
    for n in list(range(1, 51, 7)) + [50]:
        feats = rng.normal(size=(n, 5))
        if n > 3:
            feats[1] = feats[0] * 1.0  # duplicate point: exact tie
        got = knn_indices(feats, 4)
        assert got.tolist() == knn_brute(feats.tolist(), 4)


def test_edgeconv_collapses_to_relu():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    theta = np.vstack([np.eye(3), np.zeros((3, 3))])  # phi = identity on x_i, theta = 0 on x_j - x_i
    src, dst = build_support_graph(5, None, "complete")
    out = edgeconv_layer(Tensor(x), src, dst, Tensor(theta), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.maximum(x, 0))


def test_edgeconv_loop_oracle():
    rng = np.random.default_rng(1)
    for support in ("complete", "knn_static"):
        for n in (1, 2, 7, 20):
            x = rng.normal(size=(n, 4))
            src, dst = build_support_graph(n, x, support, 4)
            theta, bias = rng.normal(size=(8, 6)), rng.normal(size=6)
            got = edgeconv_layer(Tensor(x), src, dst, Tensor(theta), Tensor(bias)).data
            assert np.abs(got - edgeconv_loop(x, src, dst, theta, bias)).max() <= 1e-9


def test_edgeconv_permutation_equivariant():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 3))
    theta, bias = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=4))
    src, dst = build_support_graph(6, None, "complete")
    out = edgeconv_layer(Tensor(x), src, dst, theta, bias).data
    perm = rng.permutation(6)
    out_p = edgeconv_layer(Tensor(x[perm]), src, dst, theta, bias).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_complete_support_every_input_matters():
    rng = np.random.default_rng(3)
    p = init_params(ModelConfig(**{**SMALL.as_dict(), "embed_coords": False}), seed=3)
    n = 5
    base = rng.normal(size=(n, 8))

    def run(feats):
        from roadshot.extractor import NodeBatch

        b = NodeBatch(np.zeros((n, 2), int), np.zeros((n, 2)), Tensor(feats), np.zeros(n, int))
        return gnn_forward(b, p, 1, mode="eval").data

    out = run(base)
    for j in range(n):
        bumped = base.copy()
        bumped[j] += rng.normal(size=8) * 3
        changed = np.abs(run(bumped) - out).max(axis=1) > 0
        assert changed.all()


def test_scorer_properties():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(6, 8)))
    pairs = np.array([(i, j) for i in range(6) for j in range(6) if i != j])
    for scorer in ("bilinear", "mlp"):
        p = init_params(ModelConfig(**{**SMALL.as_dict(), "scorer": scorer}), seed=5)
        s = score_edges(x, pairs, p)
        fwd = {tuple(q): v for q, v in zip(pairs.tolist(), s.probs)}
        for (i, j), v in fwd.items():
            assert v == fwd[(j, i)]
    p = init_params(ModelConfig(**{**SMALL.as_dict(), "scorer": "bilinear"}), seed=5)
    p["score.w"].data[:] = 0
    assert np.all(score_edges(x, pairs, p).probs == 0.5)
    p["score.w"].data[:] = np.eye(8)
    expect = 1 / (1 + np.exp(-(x.data[pairs[:, 0]] * x.data[pairs[:, 1]]).sum(axis=1)))
    np.testing.assert_allclose(score_edges(x, pairs, p).probs, expect, rtol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, seed=9)
    p.bn["gnn.0"].running_mean[:] = np.random.default_rng(0).normal(size=8)
    save_params(p, tmp_path / "a.ckpt")
    q = load_params(tmp_path / "a.ckpt")
    assert q.config == p.config
    for k in p.tensors:
        assert np.array_equal(p[k].data, q[k].data)
    np.testing.assert_array_equal(q.bn["gnn.0"].running_mean, p.bn["gnn.0"].running_mean)
    save_params(q, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_params(tmp_path / "x.ckpt")


def test_model_forward_contract():
    p = init_params(SMALL, seed=0)
    img = np.random.default_rng(0).random((3, 128, 128))
    a = model_forward(img, p, 0.0)
    b = model_forward(img, p, 0.0)
    assert np.array_equal(a.edges.probs, b.edges.probs)
    assert len(a.nodes) == 16 and len(a.edges) == 16 * 15 // 2
    assert a.edges.pairs.max() < len(a.nodes)
    assert np.all(a.edges.pairs[:, 0] < a.edges.pairs[:, 1])
    empty = model_forward(img, p, 1.0)
    assert len(empty.nodes) == 0 and len(empty.edges) == 0


def test_pairs_within_images_stay_separate():
    p, _ = _heads()
    img = np.random.default_rng(1).random((2, 3, 64, 64))
    h = heads_forward(stem_forward(img, p), p)
    b = select_nodes(h, 0.0, SMALL)
    pairs = pairs_within_images(b, 2)
    assert len(pairs) == 2 * 6
    assert np.all(b.image_index[pairs[:, 0]] == b.image_index[pairs[:, 1]])
