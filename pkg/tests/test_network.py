import numpy as np
import pytest

import facegaze.network.model as model_mod
from facegaze.network import (
    ConvSpec,
    ModelConfig,
    Network,
    desk_config,
    grad_check,
    init_parameters,
    l1_loss,
    load_model,
    paper_scale_config,
    parameter_count,
    save_model,
    train,
)
from facegaze.network.gradcheck import _quadratic_loss
from facegaze.network.layers import (
    SpatialWeights,
    spatial_weights_backward,
    spatial_weights_forward,
)
from facegaze.network.training import TrainedModel, TrainingDivergedError, write_training_log


def tiny_config(**overrides):
    base = dict(
        input_size=16,
        conv=(ConvSpec(4, 3, 1, 1, 2, 2),),
        spatial_weights=(2, 2),
        fc=(8,),
        seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_sw_layer(channels, widths, params=None):
    layer = SpatialWeights("sw", channels, widths)
    if params is None:
        rng = np.random.default_rng(0)
        params = {name: rng.normal(0, 0.1, size=shape) for name, shape in layer.params.items()}
    layer.weights = params
    return layer


class TestSpatialWeightsForward:
    def test_unit_map_passthrough(self):
        layer = make_sw_layer(3, (2, 2), {
            "sw1.weight": np.zeros((2, 3)), "sw1.bias": np.zeros(2),
            "sw2.weight": np.zeros((2, 2)), "sw2.bias": np.zeros(2),
            "sw3.weight": np.zeros((1, 2)), "sw3.bias": np.ones(1),
        })
        u = np.random.default_rng(1).normal(size=(3, 4, 4))
        v, wmap = spatial_weights_forward(u, layer)
        assert np.array_equal(v, u)
        assert np.array_equal(wmap, np.ones((4, 4)))

    def test_zero_map_zeroes_output(self):
        layer = make_sw_layer(3, (2, 2), {
            "sw1.weight": np.zeros((2, 3)), "sw1.bias": np.zeros(2),
            "sw2.weight": np.zeros((2, 2)), "sw2.bias": np.zeros(2),
            "sw3.weight": np.zeros((1, 2)), "sw3.bias": -np.ones(1),
        })
        u = np.random.default_rng(2).normal(size=(3, 4, 4))
        v, wmap = spatial_weights_forward(u, layer)
        assert np.all(v == 0.0)
        assert np.all(wmap == 0.0)

    def test_hand_elementwise_product(self):
        # pass-through branch: the map equals relu of channel 0
        layer = make_sw_layer(2, (1, 1), {
            "sw1.weight": np.array([[1.0, 0.0]]), "sw1.bias": np.zeros(1),
            "sw2.weight": np.array([[1.0]]), "sw2.bias": np.zeros(1),
            "sw3.weight": np.array([[1.0]]), "sw3.bias": np.zeros(1),
        })
        u = np.array([
            [[1.0, 2.0], [0.0, 0.5]],
            [[3.0, -1.0], [2.0, 4.0]],
        ])
        v, wmap = spatial_weights_forward(u, layer)
        assert np.array_equal(wmap, [[1.0, 2.0], [0.0, 0.5]])
        assert np.array_equal(v[0], [[1.0, 4.0], [0.0, 0.25]])
        assert np.array_equal(v[1], [[3.0, -2.0], [0.0, 2.0]])

    def test_bruteforce_equivalence(self):
        rng = np.random.default_rng(3)
        layer = make_sw_layer(5, (2, 3))
        u = rng.normal(size=(2, 5, 6, 6))
        v, wmap = layer.apply(u)
        for b in range(2):
            for c in range(5):
                for i in range(6):
                    for j in range(6):
                        assert v[b, c, i, j] == wmap[b, i, j] * u[b, c, i, j]

    def test_channel_mismatch_rejected(self):
        layer = make_sw_layer(3, (2, 2))
        with pytest.raises(ValueError):
            layer.apply(np.zeros((1, 4, 2, 2)))

    def test_map_nonnegative(self):
        rng = np.random.default_rng(4)
        layer = make_sw_layer(4, (2, 2))
        for _ in range(10):
            _, wmap = layer.apply(rng.normal(size=(1, 4, 5, 5)))
            assert np.all(wmap >= 0.0)


class TestSpatialWeightsBackward:
    def test_hand_example(self):
        u = np.array([[[2.0]], [[4.0]]])
        dv = np.array([[[1.0]], [[1.0]]])
        wmap = np.array([[0.7]])
        du, dwmap = spatial_weights_backward(dv, u, wmap)
        assert np.allclose(du, [[[0.7]], [[0.7]]])
        assert dwmap[0, 0] == pytest.approx(3.0)  # (1*2 + 1*4) / 2

    def test_zero_upstream(self):
        rng = np.random.default_rng(5)
        u = rng.normal(size=(3, 4, 4))
        du, dwmap = spatial_weights_backward(np.zeros_like(u), u, np.ones((4, 4)))
        assert np.all(du == 0.0)
        assert np.all(dwmap == 0.0)

    def test_single_channel_equals_exact_chain_rule(self):
        rng = np.random.default_rng(6)
        u = rng.normal(size=(1, 3, 3))
        dv = rng.normal(size=(1, 3, 3))
        _, dwmap = spatial_weights_backward(dv, u, np.ones((3, 3)))
        assert np.allclose(dwmap, (dv * u).sum(axis=0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            spatial_weights_backward(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((4, 4)))


class TestForward:
    def test_desk_shape_contract(self):
        cfg = desk_config(seed=1)
        net = Network(cfg, init_parameters(cfg, 1))
        out = net.forward(np.random.default_rng(0).random((3, 1, 64, 64)))
        assert out.shape == (3, 2)
        assert np.all(np.isfinite(out))
        assert net.conv_activation.shape == (3, 16, 8, 8)
        assert np.all(net.weight_map >= 0.0)

    def test_zero_parameters_yield_final_bias(self):
        cfg = tiny_config()
        params = {k: np.zeros_like(v) for k, v in init_parameters(cfg, 0).items()}
        params["out.bias"] = np.array([0.3, -0.2])
        net = Network(cfg, params)
        out = net.forward(np.random.default_rng(1).random((4, 1, 16, 16)))
        assert np.allclose(out, [0.3, -0.2])

    def test_paper_scale_shape_trace(self):
        cfg = paper_scale_config()
        assert cfg.conv_output_shape() == (256, 13, 13)

    def test_input_shape_rejected(self):
        cfg = tiny_config()
        net = Network(cfg, init_parameters(cfg, 0))
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 1, 8, 8)))

    def test_parameter_set_validated(self):
        cfg = tiny_config()
        params = init_parameters(cfg, 0)
        del params["out.bias"]
        with pytest.raises(ValueError):
            Network(cfg, params)

    def test_debug_nan_check(self):
        cfg = tiny_config()
        params = init_parameters(cfg, 0)
        params["conv1.weight"][0, 0, 0, 0] = np.nan
        net = Network(cfg, params)
        old = model_mod.DEBUG_NAN_CHECKS
        model_mod.DEBUG_NAN_CHECKS = True
        try:
            with pytest.raises(FloatingPointError):
                net.forward(np.ones((1, 1, 16, 16)))
        finally:
            model_mod.DEBUG_NAN_CHECKS = old


class TestL1Loss:
    def test_zero_at_equality(self):
        p = np.array([[0.1, -0.2]])
        loss, grad = l1_loss(p, p.copy())
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_arithmetic_example(self):
        loss, _ = l1_loss(np.array([[0.3, -0.4]]), np.zeros((1, 2)))
        assert loss == pytest.approx(0.7)

    def test_subgradient_sign(self):
        pred = np.array([[1.0, -1.0], [2.0, 2.0]])
        target = np.array([[0.0, 0.0], [3.0, 2.0]])
        _, grad = l1_loss(pred, target)
        assert np.array_equal(grad, [[0.5, -0.5], [-0.5, 0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros((2, 2)), np.zeros((3, 2)))


class TestInit:
    def test_same_seed_bit_identical(self):
        cfg = desk_config()
        a = init_parameters(cfg, 42)
        b = init_parameters(cfg, 42)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_weight_map_branch_biases(self):
        cfg = desk_config()
        p = init_parameters(cfg, 0)
        assert np.all(p["sw3.bias"] == 1.0)
        assert np.all(p["sw1.bias"] == 0.1)
        assert np.all(p["sw2.bias"] == 0.1)
        assert np.all(p["conv1.bias"] == 0.0)
        assert np.all(p["out.bias"] == 0.0)

    def test_branch_weight_statistics(self):
        # wide branch so each tensor gives >= 1e5 draws of the sampler
        cfg = ModelConfig(
            input_size=16,
            conv=(ConvSpec(512, 3, 1, 1),),
            spatial_weights=(256, 512),
            fc=(4,),
            seed=0,
        )
        p = init_parameters(cfg, 1)
        early = np.concatenate([p["sw1.weight"].ravel(), p["sw2.weight"].ravel()])
        assert early.size >= 100_000
        assert abs(early.std() - 0.01) < 0.05 * 0.01
        assert abs(early.mean()) < 1e-3
        # last branch conv: variance 0.001
        draws = np.concatenate([
            init_parameters(cfg, s)["sw3.weight"].ravel() for s in range(2, 200)
        ])
        assert draws.size >= 100_000
        assert abs(draws.std() - np.sqrt(0.001)) < 0.05 * np.sqrt(0.001)

    def test_hidden_layers_fan_in_scaled(self):
        cfg = desk_config()
        p = init_parameters(cfg, 3)
        w = p["fc1.weight"]
        expected = np.sqrt(2.0 / w.shape[1])
        assert abs(w.std() - expected) < 0.05 * expected

    def test_parameter_count_matches(self):
        cfg = desk_config()
        p = init_parameters(cfg, 0)
        assert sum(v.size for v in p.values()) == parameter_count(cfg)


class TestTraining:
    def test_memorize_single_sample(self):
        cfg = tiny_config(epochs=2500, optimizer="adam", learning_rate=2e-3,
                          lr_decay=0.998, batch_size=1, seed=2)
        rng = np.random.default_rng(7)
        x = rng.random((1, 1, 16, 16))
        y = np.array([[0.25, -0.4]])
        model = train(cfg, (x, y))
        assert model.log[-1][1] < 1e-3

    def test_deterministic_loss_curve(self):
        cfg = tiny_config(epochs=5, seed=9)
        rng = np.random.default_rng(8)
        data = (rng.random((30, 1, 16, 16)), rng.normal(size=(30, 2)) * 0.1)
        m1 = train(cfg, data)
        m2 = train(cfg, data)
        assert m1.log == m2.log
        for k in m1.params:
            assert np.array_equal(m1.params[k], m2.params[k])

    def test_divergence_detected(self):
        cfg = tiny_config(epochs=2, seed=3)
        rng = np.random.default_rng(9)
        targets = rng.normal(size=(8, 2))
        targets[3, 1] = np.nan  # first non-finite loss aborts with diagnostics
        with pytest.raises(TrainingDivergedError, match="epoch 0"), np.errstate(all="ignore"):
            train(cfg, (rng.random((8, 1, 16, 16)), targets))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(tiny_config(), [])

    def test_pair_list_input(self):
        cfg = tiny_config(epochs=1)
        rng = np.random.default_rng(10)
        pairs = [(rng.random((16, 16)), rng.normal(size=2)) for _ in range(4)]
        model = train(cfg, pairs)
        assert len(model.log) == 1

    def test_validation_loss_logged(self):
        cfg = tiny_config(epochs=2)
        rng = np.random.default_rng(11)
        data = (rng.random((8, 1, 16, 16)), rng.normal(size=(8, 2)) * 0.1)
        val = (rng.random((4, 1, 16, 16)), rng.normal(size=(4, 2)) * 0.1)
        model = train(cfg, data, val=val)
        assert all(v is not None for _, _, v in model.log)

    def test_final_loss_below_initial(self):
        cfg = tiny_config(epochs=30, seed=5)
        rng = np.random.default_rng(12)
        x = rng.random((40, 1, 16, 16))
        y = np.stack([x[:, 0, 2:8, 2:8].mean(axis=(1, 2)), x[:, 0, 8:14, 8:14].mean(axis=(1, 2))], axis=1)
        model = train(cfg, (x, y))
        assert model.log[-1][1] < model.log[0][1]


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        cfg = tiny_config(epochs=1)
        rng = np.random.default_rng(13)
        model = train(cfg, (rng.random((6, 1, 16, 16)), rng.normal(size=(6, 2))))
        path = tmp_path / "model.bin"
        save_model(path, model)
        back = load_model(path)
        assert back.config == model.config
        assert back.log == model.log
        for k in model.params:
            assert np.array_equal(back.params[k], model.params[k])
        # same predictions
        x = rng.random((2, 1, 16, 16))
        assert np.array_equal(model.network().predict(x), back.network().predict(x))

    def test_checksum_detects_corruption(self, tmp_path):
        cfg = tiny_config(epochs=1)
        rng = np.random.default_rng(14)
        model = train(cfg, (rng.random((4, 1, 16, 16)), rng.normal(size=(4, 2))))
        path = tmp_path / "model.bin"
        save_model(path, model)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_model(path)

    def test_magic_check(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a model file at all")
        with pytest.raises(ValueError, match="not a model file"):
            load_model(path)

    def test_training_log_csv(self, tmp_path):
        log = [(0, 0.5, None), (1, 0.25, 0.3)]
        path = tmp_path / "log.csv"
        write_training_log(path, log)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert lines[1] == "0,0.5,"
        assert lines[2] == "1,0.25,0.3"


class TestGradCheck:
    def test_desk_model_all_groups_pass(self):
        cfg = desk_config(seed=21)
        net = Network(cfg, init_parameters(cfg, 21))
        rng = np.random.default_rng(22)
        x = rng.random((64, 64))
        pred = net.forward(x[None, None])[0]
        report = grad_check(net, (x, pred + np.array([0.3, -0.25])), rng=rng)
        assert report.max_rel_error < 1e-3
        groups = report.by_name()
        assert len(groups) == len(net.params)
        for name, g in groups.items():
            assert g.checked > 0, name

    def test_branch_scale_is_channel_count(self):
        cfg = tiny_config(seed=23)
        net = Network(cfg, init_parameters(cfg, 23))
        rng = np.random.default_rng(24)
        x = rng.random((16, 16))
        pred = net.forward(x[None, None])[0]
        report = grad_check(net, (x, pred + np.array([0.2, 0.2])), rng=rng)
        for name, g in report.by_name().items():
            expected = float(cfg.conv[-1].channels) if name.startswith("sw") else 1.0
            assert g.scale == expected

    def test_kink_guard(self):
        cfg = tiny_config(seed=25)
        net = Network(cfg, init_parameters(cfg, 25))
        x = np.random.default_rng(26).random((16, 16))
        pred = net.forward(x[None, None])[0]
        with pytest.raises(ValueError, match="kink"):
            grad_check(net, (x, pred))

    def test_quadratic_head_second_order_convergence(self):
        # directional derivative over all parameters; the weight-branch
        # contribution is rescaled by N exactly as in the per-entry check
        cfg = tiny_config(seed=0)
        params = init_parameters(cfg, 0)
        for name in params:
            if name.endswith(".weight"):
                params[name] = params[name] * 3.0  # boost curvature
        net = Network(cfg, params)
        rng = np.random.default_rng(1)
        x = rng.random((1, 1, 16, 16))
        target = np.array([[0.4, -0.3]])
        names = sorted(params)
        vecs = {n: rng.normal(size=params[n].shape) for n in names}
        n_channels = cfg.conv[-1].channels

        def loss_at(t):
            saved = {n: params[n].copy() for n in names}
            for n in names:
                params[n] += t * vecs[n]
            loss, _ = _quadratic_loss(net.forward(x), target)
            pattern = net.activation_pattern()
            for n in names:
                params[n][...] = saved[n]
            return loss, pattern

        _, dpred = _quadratic_loss(net.forward(x), target)
        grads = net.backward(dpred)
        analytic = sum(
            float((grads[n] * vecs[n]).sum()) * (n_channels if n.startswith("sw") else 1.0)
            for n in names
        )

        errors = []
        for eps in (5e-4, 2.5e-4):
            up, pat_up = loss_at(eps)
            down, pat_down = loss_at(-eps)
            assert all(np.array_equal(a, b) for a, b in zip(pat_up, pat_down))
            errors.append(abs((up - down) / (2 * eps) - analytic))
        ratio = errors[0] / errors[1]
        assert 2.5 < ratio < 6.0  # halving eps quarters the error


class TestDeterminism:
    def test_identical_predictions(self):
        cfg = desk_config(seed=31)
        p1 = init_parameters(cfg, 31)
        p2 = init_parameters(cfg, 31)
        x = np.random.default_rng(32).random((4, 1, 64, 64))
        out1 = Network(cfg, p1).forward(x)
        out2 = Network(cfg, p2).forward(x)
        assert np.array_equal(out1, out2)
