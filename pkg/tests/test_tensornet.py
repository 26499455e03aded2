import math
import threading

import numpy as np
import pytest

from roadshot import tensornet as tn
from roadshot.tensornet import Tensor, parameter

from oracles import GRAD_CASES, conv2d_loop, grad_suite_errors


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_finite_differences(name):
    errs = grad_suite_errors(name, instances=20, seed=1)
    assert max(errs) < 1e-3


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5, 7))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    out = tn.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_zero_weights():
    x = Tensor(np.ones((2, 6, 6)))
    out = tn.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)), 1, 1)
    assert out.shape == (4, 6, 6) and not out.data.any()


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(15):
        k = int(rng.choice([1, 3, 5]))
        c, co = (int(v) for v in rng.integers(1, 9, size=2))
        h, w = (int(v) for v in rng.integers(k, 9, size=2))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
        x, wt, b = rng.normal(size=(c, h, w)), rng.normal(size=(co, c, k, k)), rng.normal(size=co)
        got = tn.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
        np.testing.assert_allclose(got, conv2d_loop(x, wt, b, stride, pad), atol=1e-6)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(1)
    x, wt, b = rng.normal(size=(3, 2, 8, 8)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    batched = tn.conv2d(Tensor(x), Tensor(wt), Tensor(b), 2, 1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], tn.conv2d(Tensor(x[i]), Tensor(wt), Tensor(b), 2, 1).data, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        tn.conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        tn.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 2, 2))))


def test_batchnorm_constant_input():
    x = Tensor(np.full((5, 3), 2.5))
    out = tn.batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), None, "train")
    assert np.abs(out.data).max() < 1e-6


def test_batchnorm_eval_is_affine():
    rng = np.random.default_rng(0)
    x, g, b = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=3)
    st = tn.BatchNormState.fresh(3)
    out = tn.batchnorm(Tensor(x), Tensor(g), Tensor(b), st, "eval", eps=0.0)
    np.testing.assert_allclose(out.data, g * x + b)


def test_batchnorm_train_statistics_and_running_update():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(16, 4)) * 3 + 7
    st = tn.BatchNormState.fresh(4, momentum=0.1)
    out = tn.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), st, "train")
    assert np.abs(out.data.mean(axis=0)).max() < 1e-6
    np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batchnorm_single_row_is_affine():
    out = tn.batchnorm(Tensor(np.array([[3.0, -1.0]])), Tensor(np.array([2.0, 1.0])), Tensor(np.array([1.0, 0.0])))
    np.testing.assert_allclose(out.data, [[7.0, -1.0]])


def test_sigmoid_and_bilinear_basics():
    assert tn.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]
    rng = np.random.default_rng(0)
    out = tn.bilinear_form(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros((3, 3))), Tensor(rng.normal(size=(4, 3))))
    assert not out.data.any()


def test_segment_max_tie_routes_to_first():
    v = parameter(np.array([[1.0], [1.0], [1.0], [0.5]]))
    out = tn.max_reduce_segments(v, np.array([0, 0, 0, 1]), 2)
    tn.backward(tn.sum_all(out))
    assert v.grad.ravel().tolist() == [1.0, 0.0, 0.0, 1.0]


def test_segment_max_tie_lowest_index_unsorted_ids():
    v = parameter(np.array([[2.0], [5.0], [5.0], [2.0]]))
    out = tn.max_reduce_segments(v, np.array([1, 0, 1, 0]), 2)
    assert out.data.ravel().tolist() == [5.0, 5.0]
    tn.backward(tn.sum_all(out))
    assert v.grad.ravel().tolist() == [0.0, 1.0, 1.0, 0.0]


def test_segment_max_empty_segment():
    with pytest.raises(ValueError, match="empty"):
        tn.max_reduce_segments(Tensor(np.ones((2, 1))), np.array([0, 2]), 3)


def test_bce_values():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    assert tn.bce_loss(Tensor(y.copy()), y).item() <= 1e-6
    assert tn.bce_loss(Tensor(np.full(4, 0.5)), y).item() == pytest.approx(math.log(2))


def test_bce_loop_oracle_and_permutation():
    rng = np.random.default_rng(5)
    p, y = rng.uniform(0, 1, 50), (rng.random(50) < 0.3).astype(float)
    p[:3] = [0.0, 1.0, 1e-9]
    ref = 0.0
    for pi, yi in zip(p, y):
        q = min(max(pi, 1e-7), 1 - 1e-7)
        ref -= yi * math.log(q) + (1 - yi) * math.log(1 - q)
    ref /= len(p)
    assert abs(tn.bce_loss(Tensor(p), y).item() - ref) < 1e-9
    perm = rng.permutation(50)
    assert tn.bce_loss(Tensor(p[perm]), y[perm]).item() == pytest.approx(ref, abs=1e-12)


def test_masked_mse_values():
    pred = np.zeros((2, 2, 2))
    target = np.zeros((2, 2, 2))
    target[1, 0] = (0.1, 0.2)
    mask = np.zeros((2, 2))
    assert tn.masked_mse(Tensor(pred), target, mask).item() == 0.0
    mask[1, 0] = 1
    assert tn.masked_mse(Tensor(pred), target, mask).item() == pytest.approx(0.05)
    assert tn.masked_mse(Tensor(target.copy()), target, mask).item() == 0.0


def test_backward_identity_and_square():
    x = parameter(np.array(3.0))
    tn.backward(x * 1.0)
    assert x.grad == 1.0
    x = parameter(np.array([1.0, -2.0, 0.5]))
    tn.backward(tn.sum_all(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_detached():
    x = Tensor(np.ones(3))
    with pytest.raises(tn.DetachedError):
        tn.backward(tn.sum_all(x))
    p = parameter(np.ones(3))
    with pytest.raises(tn.DetachedError):
        tn.backward(tn.sum_all(p.detach()))


def test_backward_shared_subexpression_and_broadcast():
    a = parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = parameter(np.array([10.0, 20.0]))
    s = a + b  # broadcast over rows
    tn.backward(tn.sum_all(s * s))
    np.testing.assert_allclose(a.grad, 2 * s.data)
    np.testing.assert_allclose(b.grad, 2 * s.data.sum(axis=0))


def test_tape_topological_order():
    x = parameter(np.ones(2))
    y = tn.relu(x * 2.0)
    z = tn.sum_all(y + x)
    tape = tn.Tape.record(z)
    pos = {id(t): i for i, t in enumerate(tape.nodes)}
    for t in tape.nodes:
        for p in t.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]


def test_no_grad_is_thread_local():
    x = parameter(np.ones(2))
    seen = {}

    def other():
        seen["other"] = (x * 2.0).requires_grad

    with tn.no_grad():
        inside = (x * 2.0).requires_grad
        t = threading.Thread(target=other)
        t.start()
        t.join()
    assert not inside and seen["other"]


def test_adam_first_step_is_minus_lr():
    p = {"w": parameter(np.array([0.3, -1.0]))}
    st = tn.AdamState()
    tn.adam_step(p, {"w": np.ones(2)}, st, lr=1e-3)
    np.testing.assert_allclose(p["w"].data, np.array([0.3, -1.0]) - 1e-3 / (1 + 1e-8))


def test_adam_zero_gradient_noop():
    p = {"w": parameter(np.array([0.3, -1.0]))}
    st = tn.AdamState()
    for _ in range(7):
        tn.adam_step(p, {"w": np.zeros(2)}, st)
    assert p["w"].data.tolist() == [0.3, -1.0]


def test_adam_decreases_quadratic():
    w = parameter(np.array([2.0, -3.0]))
    opt = tn.Adam({"w": w}, lr=0.1)
    f0 = float((w.data**2).sum())
    for _ in range(2):
        opt.zero_grad()
        tn.backward(tn.sum_all(w * w))
        opt.step()
    assert float((w.data**2).sum()) < f0


def test_raw_round_trip(tmp_path):
    a = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
    tn.write_raw(tmp_path / "a.img", a)
    raw = (tmp_path / "a.img").read_bytes()
    assert raw[:4] == b"ATLG" and len(raw) == 16 + a.size * 4
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [5, 4, 3]
    assert np.array_equal(tn.read_raw(tmp_path / "a.img"), a.astype(np.float64))


def test_raw_bad_file(tmp_path):
    (tmp_path / "x.img").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        tn.read_raw(tmp_path / "x.img")
