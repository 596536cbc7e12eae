import numpy as np
import pytest

from pokebnn import train as T
from pokebnn.builders import build_pokebnn_toy
from pokebnn.nn.model import Model


def small_model(seed=1):
    g = build_pokebnn_toy(m=0.125, groups=2, input_shape=(16, 16, 3))
    return Model(g, seed=seed, dtype=np.float32)


def small_dataset(n=64, seed=0):
    return T.make_toy_dataset(n=n, classes=10, shape=(16, 16, 3), seed=seed)


class TestLrSchedule:
    def test_default_initial_value(self):
        cfg = T.TrainConfig(total_steps=100)
        assert T.lr_at(0, cfg) == 6.4e-4

    def test_reaches_zero(self):
        cfg = T.TrainConfig(total_steps=100)
        assert T.lr_at(100, cfg) == 0.0

    def test_halfway(self):
        cfg = T.TrainConfig(total_steps=100, base_lr=1.0)
        assert T.lr_at(50, cfg) == pytest.approx(0.5)

    def test_out_of_range(self):
        cfg = T.TrainConfig(total_steps=100)
        with pytest.raises(ValueError):
            T.lr_at(101, cfg)
        with pytest.raises(ValueError):
            T.lr_at(-1, cfg)


class TestConfig:
    def test_default_switch_ratio(self):
        assert T.TrainConfig(total_steps=750).phase_switch_step == 50
        assert T.TrainConfig(total_steps=2000).phase_switch_step == 133

    def test_defaults(self):
        cfg = T.TrainConfig()
        assert cfg.beta1 == 0.9 and cfg.beta2 == 0.99
        assert cfg.weight_decay == 5e-5
        assert cfg.bn_momentum == 0.9
        assert cfg.binary_act_bound == 3.0

    def test_switch_bounds_validated(self):
        with pytest.raises(ValueError):
            T.TrainConfig(total_steps=100, phase_switch_step=100)
        with pytest.raises(ValueError):
            T.TrainConfig(total_steps=100, phase_switch_step=0)


class TestQuantSchedule:
    def test_monotone_phases(self):
        s = T.QuantSchedule(switch_step=10)
        phases = [s.phase(i) for i in range(20)]
        assert phases == sorted(phases)
        assert phases[9] == 1 and phases[10] == 2

    def test_freeze_trigger(self):
        s = T.QuantSchedule(switch_step=10)
        assert [i for i in range(20) if s.freezes_at(i)] == [10]


class TestAdam:
    def cfg(self, **kw):
        return T.TrainConfig(total_steps=10, phase_switch_step=5, **kw)

    def test_zero_gradient_no_motion(self):
        params = {"w": np.ones(4)}
        state = T.adam_init(params)
        T.adam_step(params, {"w": np.zeros(4)}, state,
                    lr=0.1, cfg=self.cfg(weight_decay=0.0))
        assert np.array_equal(params["w"], np.ones(4))

    def test_descends_quadratic(self):
        w = np.array([1.0])
        params = {"w": w}
        state = T.adam_init(params)
        for _ in range(50):
            T.adam_step(params, {"w": 2 * w}, state, lr=0.05,
                        cfg=self.cfg(weight_decay=0.0))
        assert abs(w[0]) < 1.0

    def test_first_step_magnitude_is_lr(self):
        # closed form of the bias-corrected first step: lr * g / (|g| + eps)
        cfg = self.cfg(weight_decay=0.0)
        for g in (1e-6, 0.5, 100.0):
            params = {"w": np.array([0.0])}
            state = T.adam_init(params)
            T.adam_step(params, {"w": np.array([g])}, state, lr=0.01, cfg=cfg)
            closed_form = 0.01 * g / (abs(g) + cfg.adam_eps)
            assert params["w"][0] == pytest.approx(-closed_form, rel=1e-12)
            assert abs(params["w"][0]) == pytest.approx(0.01, rel=0.02)

    def test_weight_decay_only_on_listed(self):
        params = {"w": np.array([1.0]), "bn": np.array([1.0])}
        state = T.adam_init(params)
        T.adam_step(params, {"w": np.zeros(1), "bn": np.zeros(1)}, state,
                    lr=1.0, cfg=self.cfg(weight_decay=0.1), decay_names={"w"})
        assert params["w"][0] == pytest.approx(0.9)
        assert params["bn"][0] == 1.0

    def test_nonfinite_gradient_aborts(self):
        params = {"w": np.array([1.0])}
        state = T.adam_init(params)
        with pytest.raises(T.TrainingDiverged):
            T.adam_step(params, {"w": np.array([np.nan])}, state, lr=0.1,
                        cfg=self.cfg())


class TestKLLoss:
    def test_matching_teacher_zero(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 6))
        e = np.exp(logits - logits.max(1, keepdims=True))
        teacher = e / e.sum(1, keepdims=True)
        assert abs(T.kl_distill_loss(logits, teacher).data) < 1e-12

    def test_one_hot_is_cross_entropy(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(5, 3))
        labels = rng.integers(0, 3, size=5)
        teacher = np.eye(3)[labels]
        kl = float(T.kl_distill_loss(logits, teacher).data)
        ls = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        ce = -ls[np.arange(5), labels].mean()
        assert kl == pytest.approx(ce)

    def test_invalid_rows_rejected(self):
        with pytest.raises(ValueError, match="sums to"):
            T.kl_distill_loss(np.zeros((1, 3)), np.array([[0.5, 0.2, 0.2]]))


class TestTeacherFile:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "teacher.csv"
        probs = np.array([[0.9, 0.1], [0.25, 0.75]])
        path.write_text("\n".join(",".join(str(v) for v in row) for row in probs))
        loaded = T.load_teacher_probs(path)
        assert np.allclose(loaded, probs)

    def test_class_count_checked(self, tmp_path):
        path = tmp_path / "teacher.csv"
        path.write_text("0.5,0.5\n")
        with pytest.raises(ValueError, match="columns"):
            T.load_teacher_probs(path, classes=3)


class TestToyDataset:
    def test_deterministic(self):
        a = T.make_toy_dataset(n=32, seed=5)
        b = T.make_toy_dataset(n=32, seed=5)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_balanced_labels(self):
        ds = T.make_toy_dataset(n=100, classes=10)
        assert np.bincount(ds.y, minlength=10).tolist() == [10] * 10


class TestTrainLoop:
    def test_loss_decreases(self):
        cfg = T.TrainConfig(total_steps=40, phase_switch_step=10, base_lr=2e-3,
                            seed=3, batch_size=16)
        result = T.train_loop(small_model(), small_dataset(), cfg)
        first = np.mean([r["loss"] for r in result.records[:5]])
        last = np.mean([r["loss"] for r in result.records[-5:]])
        assert last < first

    def test_same_seed_bitwise_identical(self):
        cfg = T.TrainConfig(total_steps=12, phase_switch_step=4, seed=7,
                            batch_size=16)
        r1 = T.train_loop(small_model(seed=2), small_dataset(), cfg)
        r2 = T.train_loop(small_model(seed=2), small_dataset(), cfg)
        assert [r["loss"] for r in r1.records] == [r["loss"] for r in r2.records]
        for k in r1.state:
            assert np.array_equal(r1.state[k], r2.state[k]), k

    def test_phase_and_freeze_schedule(self):
        cfg = T.TrainConfig(total_steps=12, phase_switch_step=6, seed=0,
                            batch_size=16)
        model = small_model()
        result = T.train_loop(model, small_dataset(), cfg)
        phases = [r["phase"] for r in result.records]
        assert phases == [1] * 6 + [2] * 6
        assert all(s.frozen for s in model.bounds.values())

    def test_bounds_constant_after_switch(self):
        cfg = T.TrainConfig(total_steps=10, phase_switch_step=3, seed=0,
                            batch_size=16)
        model = small_model()
        bounds_log = []
        orig_forward = model.forward

        def spy(*args, **kwargs):
            out = orig_forward(*args, **kwargs)
            bounds_log.append(model.activation_bounds())
            return out

        model.forward = spy
        T.train_loop(model, small_dataset(), cfg)
        frozen_values = bounds_log[3]
        for later in bounds_log[4:]:
            assert later == frozen_values

    def test_records_schema(self):
        cfg = T.TrainConfig(total_steps=5, phase_switch_step=2, seed=0,
                            batch_size=16)
        result = T.train_loop(small_model(), small_dataset(), cfg)
        assert set(result.records[0]) == {"step", "lr", "loss", "top1", "phase"}

    def test_metrics_file_roundtrip(self, tmp_path):
        cfg = T.TrainConfig(total_steps=5, phase_switch_step=2, seed=0,
                            batch_size=16)
        path = tmp_path / "metrics.ndjson"
        result = T.train_loop(small_model(), small_dataset(), cfg,
                              metrics_path=path)
        assert T.read_metrics(path) == result.records

    def test_dprelu_decay_opt_in(self):
        ds = small_dataset()
        base = {}
        for flag in (False, True):
            cfg = T.TrainConfig(total_steps=6, phase_switch_step=2, seed=0,
                                batch_size=16, weight_decay=0.5,
                                decay_dprelu=flag)
            model = small_model(seed=4)
            result = T.train_loop(model, ds, cfg)
            base[flag] = {k: v for k, v in result.state.items()
                          if k.endswith(".gamma")}
        assert any(not np.array_equal(base[False][k], base[True][k])
                   for k in base[False])

    def test_distillation_path(self):
        ds = small_dataset()
        rng = np.random.default_rng(0)
        raw = rng.random((len(ds.y), 10)) + 5 * np.eye(10)[ds.y]
        ds.teacher = raw / raw.sum(axis=1, keepdims=True)
        cfg = T.TrainConfig(total_steps=8, phase_switch_step=3, seed=0,
                            batch_size=16)
        result = T.train_loop(small_model(), ds, cfg)
        assert np.isfinite([r["loss"] for r in result.records]).all()


class TestClippingBoundKnob:
    def test_bound_changes_gradients_not_forward(self):
        x = np.random.default_rng(0).normal(size=(2, 16, 16, 3))
        g = build_pokebnn_toy(m=0.125, groups=2, input_shape=(16, 16, 3))
        from pokebnn.nn import autodiff as ad
        logits, grads = {}, {}
        for bound in (1.0, 3.0):
            model = Model(g, seed=5, dtype=np.float64, binary_bound=bound)
            logits[bound] = model.logits(x, training=False, phase=1)
            out = model.forward(x, training=True, phase=1)
            ad.cross_entropy(ad.reshape(out, (2, -1)),
                             np.array([0, 1])).backward()
            grads[bound] = model.params["b01_pc2_conv.w"].grad
        assert np.array_equal(logits[1.0], logits[3.0])
        assert not np.array_equal(grads[1.0], grads[3.0])


class TestAveragedTop1:
    def test_single_checkpoint(self):
        model = small_model()
        ds = small_dataset(n=32)
        cfg = T.TrainConfig(total_steps=6, phase_switch_step=2, seed=0,
                            batch_size=16)
        result = T.train_loop(model, ds, cfg, tail_checkpoints=1)
        acc = T.eval_averaged_top1(model, ds, result.checkpoints)
        model.load_state_dict(result.checkpoints[0])
        direct = T.top1_accuracy(model.logits(ds.x), ds.y)
        assert acc == direct

    def test_identical_checkpoints_average_to_same(self):
        model = small_model()
        ds = small_dataset(n=32)
        state = model.state_dict()
        acc1 = T.eval_averaged_top1(model, ds, [state])
        acc3 = T.eval_averaged_top1(model, ds, [state, state, state])
        assert acc1 == acc3

    def test_mean_of_two(self):
        model = small_model()
        ds = small_dataset(n=32)
        cfg = T.TrainConfig(total_steps=8, phase_switch_step=2, seed=0,
                            batch_size=16)
        result = T.train_loop(model, ds, cfg, tail_checkpoints=2)
        accs = []
        for state in result.checkpoints:
            model.load_state_dict(state)
            accs.append(T.top1_accuracy(model.logits(ds.x), ds.y))
        got = T.eval_averaged_top1(model, ds, result.checkpoints)
        assert got == pytest.approx(np.mean(accs))

    def test_empty_checkpoints(self):
        with pytest.raises(ValueError):
            T.eval_averaged_top1(small_model(), small_dataset(), [])
