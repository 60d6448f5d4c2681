"""Training loop tests: weights, Adam, batching, stage isolation, stopping."""

import numpy as np
import pytest

import cbre.autodiff as ad
from cbre.model import CbreConfig, CbreModel
from cbre.trainer import (
    AdamState,
    OutcomeScaler,
    StratifiedBatcher,
    TrainConfig,
    adam_step,
    compute_weights,
    fit,
    train_step,
    validation_loss,
)


def tiny_model(seed: int = 0, **overrides) -> CbreModel:
    kw = dict(
        covariate_dim=3,
        rep_dim=2,
        noise_dim=2,
        enc_depth=2,
        enc_hidden=4,
        disc_depth=2,
        disc_hidden=4,
        dec_depth=2,
        dec_hidden=4,
        pred_depth=2,
        pred_hidden=4,
    )
    kw.update(overrides)
    return CbreModel(CbreConfig(**kw), seed=seed)


def all_params(model: CbreModel) -> list[np.ndarray]:
    out = []
    for _, net in model.networks():
        out.extend(net.parameters())
    return out


def snapshot(arrays) -> list[np.ndarray]:
    return [a.copy() for a in arrays]


def make_batch(n_t: int = 4, n_c: int = 8, p: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    n = n_t + n_c
    x = rng.standard_normal((n, p))
    t = np.array([1.0] * n_t + [0.0] * n_c)
    y = rng.standard_normal(n)
    _, w = compute_weights(t)
    return x, t, y, w


def fresh_states(model: CbreModel) -> dict:
    return {
        "critic": AdamState(model.params_critic()),
        "rec": AdamState(model.params_autoencoder()),
        "cyc": AdamState(model.params_autoencoder()),
        "pred": AdamState(model.params_predictor()),
    }


# -- sample weights -----------------------------------------------------------


def test_weights_balanced_groups_are_unit():
    u, w = compute_weights(np.array([1, 0, 0, 1]))
    assert u == 0.5
    np.testing.assert_allclose(w, np.ones(4), rtol=0, atol=0)


def test_weights_139_treated_of_747():
    t = np.array([1.0] * 139 + [0.0] * 608)
    u, w = compute_weights(t)
    assert abs(u - 139 / 747) < 1e-15
    assert abs(w[0] - 747 / 278) < 1e-12
    assert abs(w[-1] - 747 / 1216) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_weights_sum_to_n(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 500))
    t = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(float)
    if t.sum() in (0, n):
        t[0] = 1.0 - t[0]
    _, w = compute_weights(t)
    assert abs(w.sum() - n) < 1e-9


def test_weights_reject_single_group():
    with pytest.raises(ValueError, match="degenerate treatment assignment"):
        compute_weights(np.ones(5))
    with pytest.raises(ValueError, match="degenerate treatment assignment"):
        compute_weights(np.zeros(5))


def test_weights_reject_nonbinary():
    with pytest.raises(ValueError, match="binary"):
        compute_weights(np.array([0.0, 2.0, 1.0]))


# -- Adam ---------------------------------------------------------------------


def test_adam_first_step_hand_value():
    theta = np.array([0.0])
    state = AdamState([theta])
    adam_step(state, [theta], [np.array([1.0])], lr=1e-3)
    expected = -1e-3 / (1.0 + 1e-8)
    assert abs(theta[0] - expected) < 1e-15
    assert abs(theta[0] - (-0.000999999)) < 1e-8


def test_adam_matches_reference_over_steps():
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    theta = np.array([1.5, -0.5])
    state = AdamState([theta])
    ref = theta.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for step in range(1, 8):
        g = 2.0 * ref + 0.3
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        ref = ref - lr * mhat / (np.sqrt(vhat) + eps)
        adam_step(state, [theta], [2.0 * theta + 0.3], lr, beta1, beta2, eps)
    np.testing.assert_allclose(theta, ref, rtol=0, atol=1e-14)


def test_adam_updates_in_place():
    theta = np.array([1.0, 2.0])
    state = AdamState([theta])
    before = id(theta)
    adam_step(state, [theta], [np.ones(2)], lr=0.1)
    assert id(theta) == before


def test_adam_zero_lr_changes_nothing():
    theta = np.array([1.0, 2.0])
    state = AdamState([theta])
    adam_step(state, [theta], [np.ones(2)], lr=0.0)
    np.testing.assert_array_equal(theta, [1.0, 2.0])
    assert state.step == 1


def test_adam_rejects_nonfinite_gradient_with_context():
    theta = np.array([0.0])
    state = AdamState([theta])
    with pytest.raises(ValueError, match="critic loss"):
        adam_step(state, [theta], [np.array([np.nan])], lr=0.1, context="critic loss")


# -- stratified batching ------------------------------------------------------


def test_batcher_preserves_group_fraction():
    t = np.array([1.0] * 4 + [0.0] * 12)
    batcher = StratifiedBatcher(t, 8, np.random.default_rng(0))
    assert batcher.n_t == 2 and batcher.n_c == 6
    for _ in range(20):
        rows = batcher.next_batch()
        assert (t[rows] == 1).sum() == 2
        assert (t[rows] == 0).sum() == 6


def test_batcher_cycles_through_every_unit_before_repeating():
    t = np.array([1.0] * 4 + [0.0] * 12)
    batcher = StratifiedBatcher(t, 8, np.random.default_rng(1))
    rows = np.concatenate([batcher.next_batch() for _ in range(2)])
    treated = sorted(r for r in rows if t[r] == 1)
    control = sorted(r for r in rows if t[r] == 0)
    assert treated == [0, 1, 2, 3]
    assert control == list(range(4, 16))


def test_batcher_guarantees_minority_representation():
    t = np.array([1.0] + [0.0] * 99)
    batcher = StratifiedBatcher(t, 10, np.random.default_rng(0))
    assert batcher.n_t == 1
    for _ in range(5):
        assert 0 in batcher.next_batch()


def test_batcher_rejects_single_group():
    with pytest.raises(ValueError, match="both groups"):
        StratifiedBatcher(np.ones(6), 4, np.random.default_rng(0))


# -- one training step --------------------------------------------------------


def test_parameter_sets_are_disjoint_where_required():
    model = tiny_model()
    critic = {id(p) for p in model.params_critic()}
    auto = {id(p) for p in model.params_autoencoder()}
    pred = {id(p) for p in model.params_predictor()}
    dec = {id(p) for p in model.psi_t.parameters() + model.psi_c.parameters()}
    assert not critic & auto
    assert not critic & pred
    assert not dec & pred
    phi = {id(p) for p in model.phi.parameters()}
    assert phi <= auto and phi <= pred


def test_train_step_zero_lr_reports_but_does_not_move():
    model = tiny_model()
    x, t, y, w = make_batch()
    before = snapshot(all_params(model))
    config = TrainConfig(batch_size=12, learning_rate=0.0, seed=0)
    states = fresh_states(model)
    bd = train_step(model, x, t, y, w, config, states, np.random.default_rng(0))
    for a, b in zip(all_params(model), before):
        np.testing.assert_array_equal(a, b)
    for key in ("l_p", "l_d", "l_rec", "l_cyc", "l_reg", "total", "wasserstein_gap"):
        assert np.isfinite(bd.as_dict()[key])
    assert states["critic"].step == 1


def test_train_step_skips_decoder_stages_when_disabled():
    model = tiny_model(beta=0.0, gamma=0.0, alpha=0.5, lam=1e-4)
    x, t, y, w = make_batch()
    dec_before = snapshot(model.psi_t.parameters() + model.psi_c.parameters())
    critic_before = snapshot(model.params_critic())
    phi_before = snapshot(model.phi.parameters())
    config = TrainConfig(batch_size=12, learning_rate=1e-3, seed=0)
    states = fresh_states(model)
    train_step(model, x, t, y, w, config, states, np.random.default_rng(0))
    for a, b in zip(model.psi_t.parameters() + model.psi_c.parameters(), dec_before):
        np.testing.assert_array_equal(a, b)
    assert any(
        not np.array_equal(a, b) for a, b in zip(model.params_critic(), critic_before)
    )
    assert any(not np.array_equal(a, b) for a, b in zip(model.phi.parameters(), phi_before))
    assert states["rec"].step == 0 and states["cyc"].step == 0


def test_train_step_moves_decoders_when_enabled():
    model = tiny_model(alpha=0.0, lam=0.0)
    x, t, y, w = make_batch()
    dec_before = snapshot(model.psi_t.parameters())
    head_before = snapshot(model.head_t.parameters())
    config = TrainConfig(batch_size=12, learning_rate=1e-3, seed=0)
    states = fresh_states(model)
    train_step(model, x, t, y, w, config, states, np.random.default_rng(0))
    assert any(
        not np.array_equal(a, b) for a, b in zip(model.psi_t.parameters(), dec_before)
    )
    assert any(
        not np.array_equal(a, b) for a, b in zip(model.head_t.parameters(), head_before)
    )


def test_train_step_names_failing_loss_on_nonfinite():
    model = tiny_model()
    x, t, y, w = make_batch()
    x[0, 0] = np.nan
    config = TrainConfig(batch_size=12, learning_rate=1e-3, seed=0)
    with pytest.raises(ValueError, match="critic loss"):
        train_step(model, x, t, y, w, config, fresh_states(model), np.random.default_rng(0))


def test_train_step_requires_both_groups():
    model = tiny_model()
    x, t, y, w = make_batch()
    config = TrainConfig(batch_size=12, learning_rate=1e-3, seed=0)
    with pytest.raises(ValueError, match="both groups"):
        train_step(
            model, x, np.ones_like(t), y, w, config, fresh_states(model),
            np.random.default_rng(0),
        )


# -- the full loop ------------------------------------------------------------


def make_dataset(n: int = 60, p: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    t = (rng.random(n) < 0.4).astype(float)
    t[:2] = [1.0, 0.0]
    y = x @ np.array([1.0, -0.5, 0.25]) + 0.5 * t + 0.1 * rng.standard_normal(n)
    return x, t, y


def test_fit_is_deterministic():
    x, t, y = make_dataset()
    xv, tv, yv = make_dataset(n=20, seed=1)
    config = TrainConfig(batch_size=16, max_iterations=8, eval_every=4, seed=3)
    runs = []
    for _ in range(2):
        model = tiny_model(seed=7)
        log = fit(model, x, t, y, xv, tv, yv, config)
        runs.append((snapshot(all_params(model)), log.rows, log.val_curve))
    for a, b in zip(runs[0][0], runs[1][0]):
        np.testing.assert_array_equal(a, b)
    assert runs[0][1] == runs[1][1]
    assert runs[0][2] == runs[1][2]


def test_fit_zero_iterations_leaves_model_untouched():
    x, t, y = make_dataset()
    model = tiny_model(seed=2)
    before = snapshot(all_params(model))
    config = TrainConfig(batch_size=16, max_iterations=0, seed=0)
    log = fit(model, x, t, y, x, t, y, config)
    for a, b in zip(all_params(model), before):
        np.testing.assert_array_equal(a, b)
    assert log.rows == []
    assert len(log.val_curve) == 1 and log.val_curve[0][0] == 0


def test_fit_stops_after_patience_stale_evaluations():
    x, t, y = make_dataset()
    model = tiny_model(seed=2)
    config = TrainConfig(
        batch_size=16, learning_rate=0.0, max_iterations=50, eval_every=1,
        patience=3, seed=0,
    )
    log = fit(model, x, t, y, x, t, y, config)
    assert len(log.rows) == 3
    assert log.best_iteration == 0


def test_fit_restores_best_validation_parameters():
    x, t, y = make_dataset()
    xv, tv, yv = make_dataset(n=30, seed=5)
    model = tiny_model(seed=4)
    config = TrainConfig(
        batch_size=16, max_iterations=40, eval_every=5, patience=100, seed=1
    )
    log = fit(model, x, t, y, xv, tv, yv, config)
    u, _ = compute_weights(t)
    assert validation_loss(model, xv, tv, yv, u) == log.best_val_loss
    assert log.best_val_loss == min(v for _, v in log.val_curve)


def test_fit_reduces_training_loss():
    x, t, y = make_dataset(n=80, seed=3)
    model = tiny_model(seed=0)
    u, w = compute_weights(t)
    before = model.loss_factual(ad.Tape(), x, t, y, w, mode="eval").item()
    config = TrainConfig(
        batch_size=40, max_iterations=200, eval_every=50, patience=100, seed=0
    )
    fit(model, x, t, y, x, t, y, config)
    after = model.loss_factual(ad.Tape(), x, t, y, w, mode="eval").item()
    assert after < before


def test_validation_loss_uses_training_fraction():
    model = tiny_model()
    for _, net in model.networks():
        for p in net.parameters():
            p[:] = 0.0
    x_val = np.zeros((2, 3))
    t_val = np.array([1.0, 0.0])
    y_val = np.array([2.0, 1.0])
    # Predictions are zero, so the loss is mean(w * y^2) with weights from
    # the training fraction: w = [2, 2/3] at u_train = 0.25.
    got = validation_loss(model, x_val, t_val, y_val, u_train=0.25)
    assert abs(got - (2.0 * 4.0 + (2.0 / 3.0) * 1.0) / 2.0) < 1e-12


def test_trainlog_csv_format(tmp_path):
    x, t, y = make_dataset()
    model = tiny_model(seed=1)
    config = TrainConfig(batch_size=16, max_iterations=4, eval_every=2, seed=0)
    log = fit(model, x, t, y, x, t, y, config)
    path = tmp_path / "trainlog.csv"
    log.to_csv(str(path))
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "iteration,l_p,l_d,l_rec,l_cyc,l_reg,total,wasserstein_gap,val_loss"
    assert len(lines) == 5
    cells = lines[1].split(",")
    assert cells[0] == "1" and cells[-1] == ""
    eval_cells = lines[2].split(",")
    assert float(eval_cells[-1]) == log.rows[1]["val_loss"]
    assert float(cells[1]) == log.rows[0]["l_p"]


def test_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(max_iterations=-1)


def test_outcome_scaler_round_trip():
    rng = np.random.default_rng(0)
    y = rng.normal(5.0, 3.0, 100)
    scaler = OutcomeScaler.fit(y)
    z = scaler.transform(y)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1.0) < 1e-12
    np.testing.assert_allclose(scaler.inverse(z), y, rtol=0, atol=1e-12)


def test_outcome_scaler_constant_outcomes():
    scaler = OutcomeScaler.fit(np.full(5, 3.0))
    assert scaler.std == 1.0
    np.testing.assert_allclose(scaler.inverse(scaler.transform(np.full(5, 3.0))), 3.0)
