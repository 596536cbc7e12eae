import numpy as np
import pytest

from pokebnn.gradcheck import check_gradients, run_gradcheck
from pokebnn.nn import autodiff as ad
from pokebnn.nn.autodiff import Tensor


def tensor(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class TestSTEGradients:
    def test_binarize_forward_ignores_bound(self):
        x = tensor(np.random.default_rng(0).normal(size=64))
        outs = [ad.binarize(x, b).data for b in (0.5, 1.0, 3.0, 6.0)]
        for o in outs[1:]:
            assert np.array_equal(o, outs[0])

    def test_binarize_backward_is_indicator(self):
        x = tensor(np.array([-3.5, -0.3, 0.0, 2.9, 3.0, 3.5]))
        out = ad.binarize(x, 3.0)
        out.backward(np.ones_like(out.data))
        assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0, 0.0])

    def test_fake_quant_backward_is_indicator(self):
        rng = np.random.default_rng(1)
        x = tensor(rng.uniform(-2, 2, size=1000))
        out = ad.fake_quant(x, 1.0, 8)
        upstream = rng.normal(size=1000)
        out.backward(upstream)
        want = upstream * (np.abs(x.data) < 1.0)
        assert np.array_equal(x.grad, want)

    def test_zero_upstream_zero_grads(self):
        x = tensor(np.random.default_rng(2).normal(size=(2, 3, 3, 4)))
        w = tensor(np.random.default_rng(3).normal(size=(3, 3, 4, 4)))
        out = ad.conv2d(x, w)
        out.backward(np.zeros_like(out.data))
        assert np.all(x.grad == 0) and np.all(w.grad == 0)


class TestGradcheckSuite:
    """Finite-difference oracles for every smooth op (>= 20 instances each
    in the acceptance run; a lighter pass here)."""

    def test_all_ops_under_tolerance(self):
        results = run_gradcheck(seed=0, instances=4)
        assert set(results) >= {"conv2d", "depthwise_conv2d", "dense",
                                "batchnorm", "dprelu", "se_path", "avg_pool",
                                "spatial_mean", "reshape_add", "avg_channels"}
        for op, err in results.items():
            assert err < 1e-3, (op, err)


class TestOpEdgeCases:
    def test_tile_nondivisible(self):
        x = tensor(np.arange(3.0).reshape(1, 1, 1, 3))
        out = ad.tile_channels(x, 7)
        assert np.array_equal(out.data.ravel(), [0, 1, 2, 0, 1, 2, 0])
        out.backward(np.ones_like(out.data))
        assert np.array_equal(x.grad.ravel(), [3, 2, 2])

    def test_max_pool_forward_and_gradient(self):
        x = tensor(np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 2, 2, 1))
        out = ad.max_pool(x, kernel=2, stride=2, padding="same")
        assert out.data.item() == 4.0
        out.backward(np.ones_like(out.data))
        assert np.array_equal(x.grad.reshape(2, 2), [[0, 0], [1, 0]])

    def test_pad_shrink_rejected(self):
        with pytest.raises(ValueError):
            ad.pad_channels(tensor(np.zeros((1, 1, 1, 4))), 2)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ad.conv2d(tensor(np.zeros((1, 4, 4, 3))),
                      tensor(np.zeros((3, 3, 4, 8))))

    def test_broadcast_gradients_reduce(self):
        x = tensor(np.ones((2, 3, 3, 4)))
        gate = tensor(np.full((2, 1, 1, 4), 0.5))
        out = ad.mul(x, gate)
        out.backward(np.ones_like(out.data))
        assert gate.grad.shape == (2, 1, 1, 4)
        assert np.all(gate.grad == 9.0)

    def test_backward_accumulates_over_fanout(self):
        x = tensor(np.array([2.0]))
        out = ad.add(x, x)
        out.backward(np.array([1.0]))
        assert x.grad.item() == 2.0


class TestLosses:
    def test_cross_entropy_uniform(self):
        logits = tensor(np.zeros((4, 10)))
        loss = ad.cross_entropy(logits, np.zeros(4, dtype=int))
        assert loss.data == pytest.approx(np.log(10))

    def test_kl_zero_when_teacher_matches(self):
        rng = np.random.default_rng(4)
        logits_data = rng.normal(size=(3, 5))
        e = np.exp(logits_data - logits_data.max(axis=1, keepdims=True))
        teacher = e / e.sum(axis=1, keepdims=True)
        loss = ad.kl_divergence(tensor(logits_data), teacher)
        assert abs(loss.data) < 1e-12

    def test_kl_one_hot_equals_cross_entropy(self):
        rng = np.random.default_rng(5)
        logits_data = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        teacher = np.eye(4)[labels]
        kl = ad.kl_divergence(tensor(logits_data), teacher)
        ce = ad.cross_entropy(tensor(logits_data), labels)
        assert kl.data == pytest.approx(ce.data)

    def test_kl_uniform_teacher(self):
        rng = np.random.default_rng(6)
        logits_data = rng.normal(size=(2, 8))
        t = tensor(logits_data)
        loss = ad.kl_divergence(t, np.full((2, 8), 1 / 8))
        ls = logits_data - np.log(np.exp(logits_data).sum(1, keepdims=True))
        want = (-np.log(8) - ls.mean(axis=1)).mean()
        assert loss.data == pytest.approx(want)
