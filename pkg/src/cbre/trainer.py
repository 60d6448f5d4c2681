"""Training loop: sample weights, Adam, four sequential updates, stopping.

Each iteration performs four independent Adam updates on a stratified
minibatch, in order:

1. critic parameters on the critic loss (group gap plus gradient penalty),
   with representations entering by value;
2. encoder and both decoders on the weighted reconstruction loss;
3. the same parameter set on the weighted cycle loss;
4. encoder and predictor heads on the prediction loss plus the adversarial
   term and l2 regularization.

Every source of randomness (batch order, noise, dropout) derives from the
configured seed, so two runs with identical inputs are bit-identical.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import CbreModel, LossBreakdown


@dataclass
class TrainConfig:
    batch_size: int = 80
    learning_rate: float = 1e-3
    max_iterations: int = 3000
    patience: int = 20
    eval_every: int = 50
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    standardize_outcomes: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (one unit per group)")
        if self.max_iterations < 0 or self.patience < 1 or self.eval_every < 1:
            raise ValueError("invalid loop settings")


def compute_weights(t: np.ndarray) -> tuple[float, np.ndarray]:
    """Treated fraction u and per-unit weights t/(2u) + (1-t)/(2(1-u)).

    Computed once on the full training set, never per batch.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("treatment indicator must be binary")
    u = float(np.mean(t))
    if u <= 0.0 or u >= 1.0:
        raise ValueError("degenerate treatment assignment violates overlap")
    w = t / (2.0 * u) + (1.0 - t) / (2.0 * (1.0 - u))
    return u, w


class AdamState:
    """First/second moment accumulators, one pair per parameter array."""

    def __init__(self, params: list[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0


def adam_step(
    state: AdamState,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
    context: str = "objective",
) -> None:
    """Bias-corrected Adam update, applied to the parameter arrays in place.

    In-place mutation keeps array identities stable across iterations, which
    tape parameter caches and snapshot/restore both rely on.
    """
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in {context}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + epsilon)


class StratifiedBatcher:
    """Minibatch index sampler preserving the global treated fraction.

    Each group is an independently shuffled queue that reshuffles when
    exhausted, so every unit is visited before any repeats within a group.
    At least one unit per group is guaranteed in every batch.
    """

    def __init__(self, t: np.ndarray, batch_size: int, rng: np.random.Generator):
        t = np.asarray(t).reshape(-1)
        self.idx_t = np.flatnonzero(t == 1)
        self.idx_c = np.flatnonzero(t == 0)
        if self.idx_t.size == 0 or self.idx_c.size == 0:
            raise ValueError("stratified batching requires both groups")
        u = self.idx_t.size / t.size
        self.n_t = int(np.clip(round(batch_size * u), 1, batch_size - 1))
        self.n_c = batch_size - self.n_t
        self.rng = rng
        self._queues = {"t": [], "c": []}

    def _draw(self, key: str, pool: np.ndarray, count: int) -> list[int]:
        queue = self._queues[key]
        out: list[int] = []
        while len(out) < count:
            if not queue:
                queue.extend(self.rng.permutation(pool).tolist())
            out.append(queue.pop())
        return out

    def next_batch(self) -> np.ndarray:
        rows = self._draw("t", self.idx_t, self.n_t) + self._draw("c", self.idx_c, self.n_c)
        return np.asarray(rows, dtype=np.intp)


@dataclass
class TrainLog:
    """Per-iteration loss breakdowns plus the validation loss curve."""

    rows: list[dict] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    best_iteration: int = 0
    best_val_loss: float = float("nan")

    def append(self, iteration: int, bd: LossBreakdown, val_loss: float | None) -> None:
        row = {"iteration": iteration}
        row.update(bd.as_dict())
        row["val_loss"] = val_loss
        self.rows.append(row)

    def to_csv(self, path: str) -> None:
        cols = [
            "iteration", "l_p", "l_d", "l_rec", "l_cyc", "l_reg",
            "total", "wasserstein_gap", "val_loss",
        ]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(cols)
            for row in self.rows:
                out = []
                for c in cols:
                    v = row[c]
                    if v is None:
                        out.append("")
                    elif c == "iteration":
                        out.append(str(v))
                    else:
                        out.append(f"{v:.17g}")
                writer.writerow(out)


class OutcomeScaler:
    """Shift/scale continuous outcomes to zero mean, unit variance.

    Fitted on the training split only; predictions are mapped back before
    any metric sees them.
    """

    def __init__(self, mean: float = 0.0, std: float = 1.0):
        self.mean = float(mean)
        self.std = float(std)

    @classmethod
    def fit(cls, y: np.ndarray) -> "OutcomeScaler":
        std = float(np.std(y))
        return cls(float(np.mean(y)), std if std > 0 else 1.0)

    def transform(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.std + self.mean

    @classmethod
    def identity(cls) -> "OutcomeScaler":
        return cls(0.0, 1.0)


def _split_by_group(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t).reshape(-1)
    return np.flatnonzero(t == 1), np.flatnonzero(t == 0)


def train_step(
    model: CbreModel,
    x: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    config: TrainConfig,
    states: dict[str, AdamState],
    rng: np.random.Generator,
) -> LossBreakdown:
    """One iteration: breakdown measurement, then the four Adam updates.

    Updates whose loss coefficient is zero are skipped; their parameters
    (and Adam moments) stay untouched, matching a model without the term.
    """
    idx_t, idx_c = _split_by_group(t)
    if idx_t.size == 0 or idx_c.size == 0:
        raise ValueError("train_step requires both groups in batch")
    cfg = model.config
    lr = config.learning_rate
    adam_kw = dict(
        beta1=config.adam_beta1, beta2=config.adam_beta2, epsilon=config.adam_epsilon
    )

    # Diagnostic pass first: the reported breakdown reflects the parameters
    # this iteration started from.
    _, breakdown = model.loss_total(ad.Tape(), x, t, y, w, rng=rng, mode="train")

    def update(objective: ad.Tensor, tape: ad.Tape, params, state_key: str, context: str):
        lifted = [tape.param(p) for p in params]
        grads = [g.value for g in ad.grad(objective, lifted)]
        adam_step(states[state_key], params, grads, lr, context=context, **adam_kw)

    # 1. Critic on its own loss; representations enter by value.
    tape = ad.Tape()
    z = model.encode(tape, x, mode="train", rng=rng).value
    loss_d, _ = model.loss_discriminator(tape, z[idx_t], z[idx_c], rng=rng, mode="train")
    update(loss_d, tape, model.params_critic(), "critic", "critic loss")

    # 2. Encoder + decoders on the reconstruction term.
    if cfg.beta > 0.0:
        tape = ad.Tape()
        obj = ad.scalar_mul(cfg.beta, model.loss_rec(tape, x[idx_t], x[idx_c], "train", rng))
        update(obj, tape, model.params_autoencoder(), "rec", "reconstruction loss")

    # 3. Encoder + decoders on the cycle term.
    if cfg.gamma > 0.0:
        tape = ad.Tape()
        obj = ad.scalar_mul(cfg.gamma, model.loss_cyc(tape, x[idx_t], x[idx_c], "train", rng))
        update(obj, tape, model.params_autoencoder(), "cyc", "cycle loss")

    # 4. Encoder + heads on prediction plus adversarial and l2 terms.
    tape = ad.Tape()
    obj = model.predictor_objective(tape, x, t, y, w, rng=rng, mode="train")
    update(obj, tape, model.params_predictor(), "pred", "prediction loss")

    return breakdown


def _snapshot(model: CbreModel) -> list[np.ndarray]:
    arrays = []
    for _, net in model.networks():
        arrays.extend(p.copy() for p in net.parameters())
        for bn in net.batchnorms:
            if bn is not None:
                arrays.append(bn.running_mean.copy())
                arrays.append(bn.running_var.copy())
    return arrays


def _restore(model: CbreModel, snap: list[np.ndarray]) -> None:
    i = 0
    for _, net in model.networks():
        for p in net.parameters():
            p[:] = snap[i]
            i += 1
        for bn in net.batchnorms:
            if bn is not None:
                bn.running_mean[:] = snap[i]
                bn.running_var[:] = snap[i + 1]
                i += 2


def validation_loss(
    model: CbreModel, x: np.ndarray, t: np.ndarray, y: np.ndarray, u_train: float
) -> float:
    """Weighted factual loss in eval mode, weighted by the training-set
    treated fraction (validation has no say in the weighting)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    w = t / (2.0 * u_train) + (1.0 - t) / (2.0 * (1.0 - u_train))
    return model.loss_factual(ad.Tape(), x, t, y, w, mode="eval").item()


def fit(
    model: CbreModel,
    x: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    x_val: np.ndarray,
    t_val: np.ndarray,
    y_val: np.ndarray,
    config: TrainConfig,
) -> TrainLog:
    """Run the training loop until max_iterations or early stopping.

    Validation weighted factual loss is measured every ``eval_every``
    iterations; after ``patience`` evaluations without improvement the loop
    stops.  The parameters with the best validation loss are restored into
    the model before returning.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    u, w = compute_weights(t)

    ss = np.random.SeedSequence(config.seed)
    batch_ss, noise_ss = ss.spawn(2)
    batch_rng = np.random.default_rng(batch_ss)
    noise_rng = np.random.default_rng(noise_ss)

    batcher = StratifiedBatcher(t, min(config.batch_size, len(y)), batch_rng)
    states = {
        "critic": AdamState(model.params_critic()),
        "rec": AdamState(model.params_autoencoder()),
        "cyc": AdamState(model.params_autoencoder()),
        "pred": AdamState(model.params_predictor()),
    }

    log = TrainLog()
    best_val = validation_loss(model, x_val, t_val, y_val, u)
    best_snap = _snapshot(model)
    best_iter = 0
    log.val_curve.append((0, best_val))
    stale_evals = 0

    for iteration in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        rows = batcher.next_batch()
        bd = train_step(model, x[rows], t[rows], y[rows], w[rows], config, states, noise_rng)
        log.wall_times.append(time.perf_counter() - t0)

        val = None
        if iteration % config.eval_every == 0:
            val = validation_loss(model, x_val, t_val, y_val, u)
            log.val_curve.append((iteration, val))
            if val < best_val:
                best_val = val
                best_snap = _snapshot(model)
                best_iter = iteration
                stale_evals = 0
            else:
                stale_evals += 1
        log.append(iteration, bd, val)
        if stale_evals >= config.patience:
            break

    _restore(model, best_snap)
    log.best_iteration = best_iter
    log.best_val_loss = best_val
    return log
