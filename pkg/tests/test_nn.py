"""MLP construction, forward semantics, dropout/batchnorm, serialization."""

import io

import numpy as np
import pytest

import cbre.autodiff as ad
from cbre.gradcheck import finite_diff_grad, rel_err
from cbre.nn import Mlp, MlpConfig, init_mlp, load_mlp, save_mlp


def _forward_values(net, x, mode="eval", rng=None):
    tape = ad.Tape()
    return net.forward(tape, tape.input(x), mode=mode, rng=rng).value


def test_single_layer_shapes_and_zero_biases():
    net = init_mlp(MlpConfig(input_dim=3, hidden_dim=16, output_dim=2, depth=1), seed=0)
    assert len(net.weights) == 1
    assert net.weights[0].shape == (2, 3)
    assert net.biases[0].size == 2
    assert np.array_equal(net.biases[0], np.zeros((1, 2)))


def test_init_is_deterministic_per_seed():
    cfg = MlpConfig(input_dim=5, hidden_dim=8, output_dim=3, depth=3)
    a, b = init_mlp(cfg, seed=123), init_mlp(cfg, seed=123)
    for wa, wb in zip(a.weights, b.weights):
        assert wa.tobytes() == wb.tobytes()
    c = init_mlp(cfg, seed=124)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_variance_tracks_fan_in():
    cfg = MlpConfig(input_dim=25, hidden_dim=200, output_dim=200, depth=5)
    target = 2.0 / 25
    variances = [np.var(init_mlp(cfg, seed=s).weights[0]) for s in range(12)]
    mean_var = float(np.mean(variances))
    assert 0.8 * target <= mean_var <= 1.2 * target


def test_zero_weight_net_outputs_bias():
    net = init_mlp(MlpConfig(input_dim=4, hidden_dim=6, output_dim=2, depth=2), seed=0)
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = [[0.7, -0.2]]
    out = _forward_values(net, np.random.default_rng(0).standard_normal((5, 4)))
    assert np.allclose(out, np.tile([[0.7, -0.2]], (5, 1)))


def test_zero_weight_sigmoid_net_outputs_sigmoid_of_bias():
    cfg = MlpConfig(input_dim=4, hidden_dim=6, output_dim=1, depth=2, final_activation="sigmoid")
    net = init_mlp(cfg, seed=0)
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = 0.0
    out = _forward_values(net, np.ones((3, 4)))
    assert np.allclose(out, 0.5)


def test_identity_single_layer_passes_through():
    net = init_mlp(MlpConfig(input_dim=2, hidden_dim=2, output_dim=2, depth=1), seed=0)
    net.weights[0][:] = np.eye(2)
    out = _forward_values(net, np.array([[1.0, -1.0]]))
    assert np.array_equal(out, [[1.0, -1.0]])


def test_train_equals_eval_without_dropout_or_batchnorm():
    net = init_mlp(MlpConfig(input_dim=3, hidden_dim=8, output_dim=2, depth=3), seed=5)
    x = np.random.default_rng(1).standard_normal((4, 3))
    assert np.array_equal(_forward_values(net, x, "train"), _forward_values(net, x, "eval"))


def test_dropout_masks_replay_per_seed_and_eval_ignores_them():
    cfg = MlpConfig(input_dim=6, hidden_dim=32, output_dim=2, depth=3, dropout_rate=0.5)
    net = init_mlp(cfg, seed=2)
    x = np.random.default_rng(3).standard_normal((8, 6))
    a = _forward_values(net, x, "train", rng=np.random.default_rng(77))
    b = _forward_values(net, x, "train", rng=np.random.default_rng(77))
    c = _forward_values(net, x, "train", rng=np.random.default_rng(78))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)

    no_dropout = init_mlp(
        MlpConfig(input_dim=6, hidden_dim=32, output_dim=2, depth=3), seed=2
    )
    assert np.array_equal(_forward_values(net, x, "eval"), _forward_values(no_dropout, x, "eval"))


def test_dropout_in_train_mode_demands_rng():
    cfg = MlpConfig(input_dim=2, hidden_dim=4, output_dim=1, depth=2, dropout_rate=0.3)
    net = init_mlp(cfg, seed=0)
    with pytest.raises(ValueError, match="rng"):
        _forward_values(net, np.zeros((2, 2)), "train")


def test_forward_rejects_wrong_input_width():
    net = init_mlp(MlpConfig(input_dim=3, hidden_dim=4, output_dim=1, depth=2), seed=0)
    with pytest.raises(ValueError, match="expected"):
        _forward_values(net, np.zeros((2, 5)))


def test_batchnorm_normalizes_hidden_activations():
    cfg = MlpConfig(input_dim=4, hidden_dim=16, output_dim=16, depth=2, use_batchnorm=True)
    net = init_mlp(cfg, seed=9)
    x = np.random.default_rng(4).standard_normal((64, 4)) * 3.0 + 1.0

    tape = ad.Tape()
    h = tape.input(x)
    w, b = net.weights[0], net.biases[0]
    pre = ad.relu(ad.add(ad.matmul(h, ad.transpose(tape.param(w))), tape.param(b)))
    normed = net._batchnorm(tape, pre, net.batchnorms[0], training=True, update_stats=False)
    vals = normed.value
    assert np.max(np.abs(vals.mean(axis=0))) < 1e-9
    assert np.max(np.abs(vals.var(axis=0) - 1.0)) < 1e-3


def test_batchnorm_eval_uses_running_statistics():
    cfg = MlpConfig(input_dim=3, hidden_dim=8, output_dim=2, depth=2, use_batchnorm=True)
    net = init_mlp(cfg, seed=1)
    x = np.random.default_rng(5).standard_normal((32, 3))
    before = _forward_values(net, x, "eval")
    _forward_values(net, x, "train")
    after = _forward_values(net, x, "eval")
    assert not np.array_equal(before, after)
    assert np.array_equal(after, _forward_values(net, x, "eval"))


def test_forward_gradients_match_finite_differences():
    cfg = MlpConfig(input_dim=3, hidden_dim=5, output_dim=2, depth=3)
    net = init_mlp(cfg, seed=11)
    x = np.random.default_rng(6).standard_normal((4, 3))
    params = net.parameters()

    def build():
        tape = ad.Tape()
        out = net.forward(tape, tape.input(x), mode="eval")
        return ad.mean(ad.square(out)), [tape.param(p) for p in params]

    out, lifted = build()
    analytic = [g.value.copy() for g in ad.grad(out, lifted)]
    fd = finite_diff_grad(lambda: build()[0].item(), params)
    assert max(rel_err(a, f) for a, f in zip(analytic, fd)) <= 1e-6


def test_batchnorm_gradients_match_finite_differences():
    cfg = MlpConfig(input_dim=3, hidden_dim=4, output_dim=2, depth=2, use_batchnorm=True)
    net = init_mlp(cfg, seed=13)
    x = np.random.default_rng(8).standard_normal((6, 3))
    params = net.parameters()

    def build():
        tape = ad.Tape()
        out = net.forward(tape, tape.input(x), mode="train", update_stats=False)
        return ad.mean(ad.square(out)), [tape.param(p) for p in params]

    out, lifted = build()
    analytic = [g.value.copy() for g in ad.grad(out, lifted)]
    fd = finite_diff_grad(lambda: build()[0].item(), params)
    assert max(rel_err(a, f) for a, f in zip(analytic, fd)) <= 1e-6


def test_parameter_block_round_trip():
    cfg = MlpConfig(input_dim=4, hidden_dim=6, output_dim=2, depth=3, use_batchnorm=True)
    net = init_mlp(cfg, seed=21)
    _forward_values(net, np.random.default_rng(9).standard_normal((10, 4)), "train")

    buf = io.BytesIO()
    save_mlp(net, buf)
    other = init_mlp(cfg, seed=99)
    buf.seek(0)
    load_mlp(other, buf)
    for a, b in zip(net.parameters(), other.parameters()):
        assert a.tobytes() == b.tobytes()
    for bn_a, bn_b in zip(net.batchnorms, other.batchnorms):
        if bn_a is not None:
            assert bn_a.running_mean.tobytes() == bn_b.running_mean.tobytes()
            assert bn_a.running_var.tobytes() == bn_b.running_var.tobytes()


def test_parameter_blocks_concatenate_on_one_stream():
    cfg_a = MlpConfig(input_dim=2, hidden_dim=3, output_dim=1, depth=2)
    cfg_b = MlpConfig(input_dim=5, hidden_dim=4, output_dim=5, depth=1)
    a, b = init_mlp(cfg_a, seed=1), init_mlp(cfg_b, seed=2)
    buf = io.BytesIO()
    save_mlp(a, buf)
    save_mlp(b, buf)
    buf.seek(0)
    a2, b2 = init_mlp(cfg_a, seed=7), init_mlp(cfg_b, seed=8)
    load_mlp(a2, buf)
    load_mlp(b2, buf)
    assert a.weights[0].tobytes() == a2.weights[0].tobytes()
    assert b.weights[0].tobytes() == b2.weights[0].tobytes()


def test_load_rejects_bad_magic_and_wrong_shape():
    cfg = MlpConfig(input_dim=2, hidden_dim=3, output_dim=1, depth=2)
    net = init_mlp(cfg, seed=1)
    with pytest.raises(ValueError, match="magic"):
        load_mlp(net, io.BytesIO(b"NOPE" + b"\x00" * 64))

    buf = io.BytesIO()
    save_mlp(net, buf)
    buf.seek(0)
    wider = init_mlp(MlpConfig(input_dim=2, hidden_dim=4, output_dim=1, depth=2), seed=1)
    with pytest.raises(ValueError, match="shape mismatch"):
        load_mlp(wider, buf)


def test_load_keeps_array_identity():
    cfg = MlpConfig(input_dim=2, hidden_dim=3, output_dim=1, depth=2)
    net = init_mlp(cfg, seed=1)
    buf = io.BytesIO()
    save_mlp(net, buf)
    buf.seek(0)
    w0 = net.weights[0]
    load_mlp(net, buf)
    assert net.weights[0] is w0


def test_config_validation():
    with pytest.raises(ValueError, match="depth"):
        MlpConfig(input_dim=2, hidden_dim=2, output_dim=1, depth=0)
    with pytest.raises(ValueError, match="dropout_rate"):
        MlpConfig(input_dim=2, hidden_dim=2, output_dim=1, depth=1, dropout_rate=1.0)
    with pytest.raises(ValueError, match="final_activation"):
        MlpConfig(input_dim=2, hidden_dim=2, output_dim=1, depth=1, final_activation="tanh")
