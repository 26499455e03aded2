import math

import numpy as np
import pytest

from roadshot import tensornet as tn
from roadshot.extractor import ModelConfig, init_params, load_params
from roadshot.geograph import RoadGraph, rasterize
from roadshot.synthgen import SceneConfig, make_dataset, make_scene
from roadshot.tensornet import Tensor
from roadshot.trainer import (
    TrainConfig,
    augment,
    crop_graph,
    flip_image_graph,
    load_dataset,
    random_crop,
    total_loss,
    train,
    train_step,
)

SMALL = ModelConfig(n_in=16, n_feat=8, gnn_dim=8, stem_channels=(4, 4, 8, 8))


def _loss_inputs(rng, h=4, w=5, e=7):
    j_gt = (rng.random((1, h, w)) < 0.4).astype(float)
    v_gt = rng.uniform(-0.5, 0.5, size=(1, h, w, 2))
    labels = (rng.random(e) < 0.5).astype(float)
    j = Tensor(rng.uniform(0.05, 0.95, size=(1, h, w)))
    v = Tensor(rng.uniform(-0.5, 0.5, size=(1, h, w, 2)))
    p = Tensor(rng.uniform(0.05, 0.95, size=e))
    return j, j_gt, v, v_gt, p, labels


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(crop=250)
    with pytest.raises(ValueError):
        TrainConfig(offset_mask="both")
    assert TrainConfig().lr == 1e-3 and TrainConfig().train_jthr == 0.5


def test_perfect_predictions_near_zero_loss():
    rng = np.random.default_rng(0)
    _, j_gt, _, v_gt, _, labels = _loss_inputs(rng)
    terms = total_loss(Tensor(j_gt), j_gt, Tensor(v_gt), v_gt, j_gt, Tensor(labels), labels)
    assert float(terms.total.data) <= 1e-5


def test_weights_select_junction_term():
    rng = np.random.default_rng(1)
    j, j_gt, v, v_gt, p, labels = _loss_inputs(rng)
    terms = total_loss(j, j_gt, v, v_gt, j_gt, p, labels, (1, 0, 0))
    assert float(terms.total.data) == float(tn.bce_loss(j, j_gt).data)


def test_additivity_against_hand_sum():
    rng = np.random.default_rng(2)
    for _ in range(20):
        j, j_gt, v, v_gt, p, labels = _loss_inputs(rng)
        wts = tuple(rng.uniform(0, 3, size=3))
        terms = total_loss(j, j_gt, v, v_gt, j_gt, p, labels, wts)
        eps = 1e-7
        jp = np.clip(j.data, eps, 1 - eps)
        bce_j = -np.mean(j_gt * np.log(jp) + (1 - j_gt) * np.log(1 - jp))
        mse = ((v.data - v_gt) ** 2).sum(axis=-1)[j_gt > 0].sum() / max(j_gt.sum(), 1)
        pp = np.clip(p.data, eps, 1 - eps)
        bce_e = -np.mean(labels * np.log(pp) + (1 - labels) * np.log(1 - pp))
        assert terms.jun == pytest.approx(bce_j, rel=1e-12)
        assert terms.off == pytest.approx(mse, rel=1e-12)
        assert terms.edge == pytest.approx(bce_e, rel=1e-12)
        assert float(terms.total.data) == pytest.approx(wts[0] * bce_j + wts[1] * mse + wts[2] * bce_e, rel=1e-12)


def test_no_edges_contribute_zero():
    rng = np.random.default_rng(3)
    j, j_gt, v, v_gt, _, _ = _loss_inputs(rng)
    assert total_loss(j, j_gt, v, v_gt, j_gt, None, np.zeros(0)).edge == 0.0


def _scene(seed=0, size=256):
    image, graph = make_scene(SceneConfig(width=size, height=size, seed=seed))
    return image.astype(np.float64), graph


def test_zero_weight_term_leaves_other_gradients():
    image, graph = _scene()
    grads = []
    for w_edge in (0.0, 5.0):
        p = init_params(SMALL, seed=0)
        train_step(p, image[None], [graph], TrainConfig(w_edge=w_edge))
        grads.append({k: p[k].grad.copy() for k in ("junction.2.w", "junction.2.b", "offset.2.w")})
    for k in grads[0]:
        np.testing.assert_array_equal(grads[0][k], grads[1][k])


def test_flip_examples():
    image, graph = _scene(1)
    for hf, vf in ((True, False), (True, True)):
        back = flip_image_graph(*flip_image_graph(image, graph, hf, vf), hf, vf)
        assert np.array_equal(back[0], image) and back[1].edges == graph.edges
        # w - 1 - (w - 1 - x) can differ from x in the last bit
        np.testing.assert_allclose(back[1].coords(), graph.coords(), rtol=0, atol=1e-12)
    g = RoadGraph([(3.0, 10.0), (200.5, 7.0)], [(0, 1)], (256, 256))
    _, f = flip_image_graph(np.zeros((3, 256, 256)), g, True, False)
    assert f.nodes == [(252.0, 10.0), (54.5, 7.0)]
    _, f = flip_image_graph(np.zeros((3, 256, 256)), g, False, True)
    assert f.nodes == [(3.0, 245.0), (200.5, 248.0)]


def test_flip_matches_rerasterization():
    rng = np.random.default_rng(0)
    for seed in range(5):
        image, graph = _scene(seed)
        hf, vf = bool(rng.random() < 0.5), True
        _, fg = flip_image_graph(image, graph, hf, vf)
        m = rasterize(graph, 256, 256, 3)
        if hf:
            m = m[:, ::-1]
        m = m[::-1, :]
        r = rasterize(fg, 256, 256, 3)
        iou = np.logical_and(m, r).sum() / np.logical_or(m, r).sum()
        assert iou >= 0.99


def test_augment_no_flip_identity():
    image, graph = _scene(2)
    out = augment(image, graph, False, np.random.default_rng(0))
    assert out[0] is image and out[1] is graph


def test_crop_graph_clips_at_border():
    g = RoadGraph([(10.0, 50.0), (90.0, 50.0), (30.0, 10.0)], [(0, 1), (0, 2)], (128, 128))
    c = crop_graph(g, 0, 32, 64)
    assert c.size == (64, 64)
    # (10, 18) kept, the right edge exits at x = 63 and the upward edge at y = 0
    assert c.nodes[0] == (10.0, 18.0)
    assert (63.0, 18.0) in c.nodes
    up = [n for n in c.nodes if n[1] == 0.0]
    assert len(up) == 1 and up[0][0] == pytest.approx(10 + 20 * 18 / 40)
    assert c.num_edges == 2
    c.validate()
    # an edge passing wholly outside is dropped
    assert crop_graph(g, 0, 64, 64).num_edges == 0


def test_random_crop_shapes():
    image, graph = _scene(3, 320)
    rng = np.random.default_rng(0)
    for _ in range(5):
        im, g = random_crop(image, graph, 256, rng)
        assert im.shape == (3, 256, 256)
        g.validate()
        c = g.coords()
        assert len(c) == 0 or (c.min() >= 0 and c.max() <= 255)
    with pytest.raises(ValueError):
        random_crop(image, graph, 384, rng)


@pytest.fixture(scope="module")
def tiny_set(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    make_dataset(SceneConfig(seed=4), 4, d)
    return d


def test_one_epoch_smoke(tiny_set, tmp_path):
    data = load_dataset(tiny_set)[:1]
    _, log = train(data, TrainConfig(epochs=1, batch_size=1), SMALL)
    assert len(log.records) == 1
    assert all(math.isfinite(v) for v in log.losses()[0])
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_jun,l_off,l_edge,l_total,seconds" and len(lines) == 2


def test_training_reduces_loss(tiny_set):
    _, log = train(tiny_set, TrainConfig(epochs=6, batch_size=2, lr=3e-3), SMALL)
    totals = [r.l_total for r in log.records]
    assert totals[-1] < totals[0]


def test_same_seed_same_log(tiny_set):
    tc = TrainConfig(epochs=2, batch_size=2, seed=5)
    p1, a = train(tiny_set, tc, SMALL)
    p2, b = train(tiny_set, tc, SMALL)
    assert a.losses() == b.losses()
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1.tensors)
    _, c = train(tiny_set, TrainConfig(epochs=2, batch_size=2, seed=6), SMALL)
    assert c.losses() != a.losses()


def test_checkpointing(tiny_set, tmp_path):
    ck = tmp_path / "m.ckpt"
    p, _ = train(tiny_set, TrainConfig(epochs=3, batch_size=4, checkpoint_every=2, checkpoint=str(ck)), SMALL)
    q = load_params(ck)
    # the last epoch always writes, so the file holds the final weights
    assert all(np.array_equal(p[k].data, q[k].data) for k in p.tensors)


def test_time_budget_stops_early(tiny_set, tmp_path):
    _, log = train(tiny_set, TrainConfig(epochs=50, batch_size=4, time_budget=0.0, checkpoint=str(tmp_path / "m.ckpt")), SMALL)
    assert len(log.records) == 1 and (tmp_path / "m.ckpt").exists()


def test_empty_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(tmp_path, TrainConfig(epochs=1), SMALL)
