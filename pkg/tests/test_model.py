import numpy as np
import pytest

from pokebnn.builders import build_pokebnn_toy
from pokebnn.graphir import DType
from pokebnn.nn import autodiff as ad
from pokebnn.nn import blocks
from pokebnn.nn.checkpoint import load_tensors, save_tensors
from pokebnn.nn.model import Model


@pytest.fixture(scope="module")
def toy():
    g = build_pokebnn_toy(m=0.25, groups=4, input_shape=(16, 16, 3))
    return g


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(0).normal(size=(4, 16, 16, 3))


class TestForward:
    @pytest.mark.parametrize("phase", [1, 2])
    def test_finite_logits_of_correct_length(self, toy, batch, phase):
        model = Model(toy, seed=1)
        logits = model.logits(batch, training=False, phase=phase)
        assert logits.shape == (4, 10)
        assert np.all(np.isfinite(logits))

    def test_eval_mode_deterministic(self, toy, batch):
        model = Model(toy, seed=1)
        a = model.logits(batch, training=False, phase=2)
        b = model.logits(batch, training=False, phase=2)
        assert np.array_equal(a, b)

    def test_training_updates_bn_stats_eval_does_not(self, toy, batch):
        model = Model(toy, seed=1)
        before = {k: v["mean"].copy() for k, v in model.bn_stats.items()}
        model.forward(batch, training=False, phase=1)
        assert all(np.array_equal(before[k], model.bn_stats[k]["mean"])
                   for k in before)
        model.forward(batch, training=True, phase=1)
        assert any(not np.array_equal(before[k], model.bn_stats[k]["mean"])
                   for k in before)

    def test_binary_conv_inputs_are_signs(self, toy, batch):
        model = Model(toy, seed=1)
        trace = {}
        model.forward(batch, training=False, phase=2, trace=trace)
        qbin_nodes = [n.id for n in toy.nodes if n.op == "quantize_act"
                      and n.attrs["act_bits"] is DType.BIN]
        assert qbin_nodes
        for nid in qbin_nodes:
            values = set(np.unique(trace[nid]))
            assert values <= {-1.0, 1.0}

    def test_se_gates_in_unit_interval(self, toy, batch):
        model = Model(toy, seed=1)
        trace = {}
        model.forward(batch, training=False, phase=2, trace=trace)
        gates = [nid for nid in trace if nid.endswith("se_gate")]
        assert gates
        for nid in gates:
            assert trace[nid].min() >= 0.0 and trace[nid].max() <= 1.0


def downstream_closure(graph, seeds):
    reach = set(seeds)
    changed = True
    while changed:
        changed = False
        for n in graph.nodes:
            if n.id not in reach and any(i in reach for i in n.inputs):
                reach.add(n.id)
                changed = True
    return reach


class TestPhases:
    def test_phase_diff_confined_to_quantizer_cones(self, toy, batch):
        model = Model(toy, seed=1)
        t1, t2 = {}, {}
        model.forward(batch, training=False, phase=1, trace=t1)
        model.forward(batch, training=False, phase=2, trace=t2)
        switched = [n.id for n in toy.nodes
                    if (n.op == "quantize_act" and n.attrs["act_bits"] is not DType.BIN)
                    or (n.op in ("conv2d", "depthwise_conv2d", "dense")
                        and not n.attrs["weight_bits"].is_float)]
        allowed = downstream_closure(toy, switched)
        differing = [nid for nid in t1 if not np.array_equal(t1[nid], t2[nid])]
        assert differing, "phases should not be identical"
        assert set(differing) <= allowed

    def test_freeze_flips_exactly_once(self, toy):
        model = Model(toy, seed=1)
        assert model.freeze_activation_bounds() == len(model.bounds) > 0
        assert model.freeze_activation_bounds() == 0

    def test_frozen_bounds_survive_training_forward(self, toy, batch):
        model = Model(toy, seed=1)
        model.forward(batch, training=True, phase=1)  # EMA moves bounds
        moved = model.activation_bounds()
        model.freeze_activation_bounds()
        model.forward(10 * batch, training=True, phase=2)
        assert model.activation_bounds() == moved


class TestBinaryWeightBoundOverride:
    def test_override_gates_gradients_only(self, toy, batch):
        per_channel = Model(toy, seed=5)
        fixed = Model(toy, seed=5, binary_weight_bound=0.05)
        a = per_channel.logits(batch, training=False, phase=2)
        b = fixed.logits(batch, training=False, phase=2)
        assert np.array_equal(a, b)
        for model in (per_channel, fixed):
            out = model.forward(batch, training=True, phase=2)
            out.backward(np.ones_like(out.data))
        key = "b00_pc1_conv.w"
        assert not np.array_equal(per_channel.params[key].grad,
                                  fixed.params[key].grad)


class TestCheckpoint:
    def test_roundtrip_exact(self, toy, batch, tmp_path):
        model = Model(toy, seed=1)
        model.forward(batch, training=True, phase=1)
        state = model.state_dict()
        path = tmp_path / "model.ckpt"
        save_tensors(path, state)
        restored = load_tensors(path)
        assert set(restored) == set(state)
        for k in state:
            assert np.array_equal(restored[k], state[k]), k

    def test_restored_model_evaluates_identically(self, toy, batch, tmp_path):
        model = Model(toy, seed=1)
        model.forward(batch, training=True, phase=1)
        want = model.logits(batch, training=False, phase=2)
        path = tmp_path / "model.ckpt"
        save_tensors(path, model.state_dict())
        fresh = Model(toy, seed=99)
        fresh.load_state_dict(load_tensors(path))
        assert np.array_equal(fresh.logits(batch, training=False, phase=2), want)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="magic"):
            load_tensors(path)


class TestExecutorMatchesFunctionalBlocks:
    def test_single_pokeconv_agrees(self, batch):
        """The lowered-graph executor and the functional block compute the
        same function given the same parameters."""
        g = build_pokebnn_toy(m=1, groups=2, input_shape=(16, 16, 3))
        model = Model(g, seed=3)
        p = "b00_pc1_"
        params = blocks.PokeConvParams.create(64, 64, 1, np.random.default_rng(0))
        params.w = model.params[p + "conv.w"]
        for bn, nid in ((params.bn1, p + "bn1"), (params.bn2, p + "bn2")):
            bn.scale = model.params[nid + ".scale"]
            bn.bias = model.params[nid + ".bias"]
            bn.running_mean = model.bn_stats[nid]["mean"]
            bn.running_var = model.bn_stats[nid]["var"]
        params.act.alpha = model.params[p + "act.alpha"]
        params.act.beta = model.params[p + "act.beta"]
        params.act.gamma = model.params[p + "act.gamma"]
        params.act.eta = model.params[p + "act.eta"]
        params.se.w1 = model.params[p + "se_fc1.w"]
        params.se.b1 = model.params[p + "se_fc1.bias"]
        params.se.w2 = model.params[p + "se_fc2.w"]
        params.se.b2 = model.params[p + "se_fc2.bias"]
        params.se.in1_bound = model.bounds[p + "se_q1"]
        params.se.in2_bound = model.bounds[p + "se_q2"]

        for phase in (1, 2):
            trace = {}
            model.forward(batch, training=False, phase=phase, trace=trace)
            ctx = blocks.QuantContext(training=False, phase=phase,
                                      binary_bound=model.binary_bound)
            functional = blocks.pokeconv(ad.Tensor(trace["init_act2"]), None,
                                         params, stride=1, ctx=ctx)
            assert np.allclose(functional.data, trace[p + "bn2"], atol=1e-12)
