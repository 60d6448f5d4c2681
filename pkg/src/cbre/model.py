"""The model: encoder, critic, decoders, outcome heads, and every loss term.

Latent representations z = phi(x) are pushed toward group balance by a
Wasserstein critic with a gradient penalty, kept informative by per-group
reconstruction decoders plus a cross-decoder cycle term, and consumed by a
weighted factual-outcome predictor.  The total objective is

    L = L_p + alpha * L_adv + beta * L_rec + gamma * L_cyc + lambda * reg

where L_adv = E_t[f_D] - E_c[f_D] is the encoder-side adversarial term (the
critic's own loss carries the opposite sign plus the penalty, which stays a
critic-only regularizer and never reaches the encoder).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .nn import Mlp, MlpConfig, init_mlp, load_mlp, save_mlp


@dataclass
class CbreConfig:
    """Loss coefficients and network shapes.

    Defaults follow the reference operating point: alpha 0.5, beta and gamma
    1.0, lambda 1e-4, penalty coefficient delta 10.0, encoder/decoder depth
    5, critic depth 3, predictor depth 3, widths 200 (100 for the
    predictor), 200-dimensional representations with matching noise.
    """

    covariate_dim: int
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 1e-4
    delta: float = 10.0
    rep_dim: int = 200
    noise_dim: int | None = None
    enc_depth: int = 5
    enc_hidden: int = 200
    disc_depth: int = 3
    disc_hidden: int = 200
    dec_depth: int = 5
    dec_hidden: int = 200
    pred_depth: int = 3
    pred_hidden: int = 100
    dropout_rate: float = 0.0
    use_batchnorm: bool = False
    outcome: str = "continuous"
    two_headed: bool = True
    squared_l2: bool = True

    def __post_init__(self):
        if self.noise_dim is None:
            self.noise_dim = self.rep_dim
        for name in ("alpha", "beta", "gamma", "lam", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("covariate_dim", "rep_dim", "noise_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.outcome not in ("continuous", "binary"):
            raise ValueError(f"outcome must be continuous or binary, got {self.outcome!r}")

    def encoder_config(self) -> MlpConfig:
        return MlpConfig(
            input_dim=self.covariate_dim,
            hidden_dim=self.enc_hidden,
            output_dim=self.rep_dim,
            depth=self.enc_depth,
            dropout_rate=self.dropout_rate,
            use_batchnorm=self.use_batchnorm,
        )

    def critic_config(self) -> MlpConfig:
        # Batch normalization is never allowed here: per-batch coupling
        # would break the per-example gradient penalty.
        return MlpConfig(
            input_dim=self.noise_dim + self.rep_dim,
            hidden_dim=self.disc_hidden,
            output_dim=1,
            depth=self.disc_depth,
            dropout_rate=self.dropout_rate,
            use_batchnorm=False,
        )

    def decoder_config(self) -> MlpConfig:
        return MlpConfig(
            input_dim=self.rep_dim,
            hidden_dim=self.dec_hidden,
            output_dim=self.covariate_dim,
            depth=self.dec_depth,
            dropout_rate=self.dropout_rate,
            use_batchnorm=self.use_batchnorm,
        )

    def head_config(self) -> MlpConfig:
        return MlpConfig(
            input_dim=self.rep_dim if self.two_headed else self.rep_dim + 1,
            hidden_dim=self.pred_hidden,
            output_dim=1,
            depth=self.pred_depth,
            dropout_rate=self.dropout_rate,
            use_batchnorm=self.use_batchnorm,
            final_activation="sigmoid" if self.outcome == "binary" else "none",
        )


@dataclass
class LossBreakdown:
    """Scalar values of every term, measured on one batch.

    ``l_d`` is the critic's full loss (group-mean difference plus penalty);
    ``wasserstein_gap`` is the diagnostic E_t[f_D] - E_c[f_D]; ``total``
    composes as l_p + alpha * wasserstein_gap + beta * l_rec + gamma * l_cyc
    + lam * l_reg, with the penalty excluded from the encoder objective.
    """

    l_p: float
    l_d: float
    l_rec: float
    l_cyc: float
    l_reg: float
    total: float
    wasserstein_gap: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _split_groups(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t).reshape(-1)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("treatment indicator must be binary")
    return np.flatnonzero(t == 1), np.flatnonzero(t == 0)


class CbreModel:
    """Parameter sets for encoder phi, critic f_D, decoders psi_t/psi_c,
    and the outcome predictor h (two heads by default, selected by t)."""

    def __init__(self, config: CbreConfig, seed: int):
        self.config = config
        seeds = np.random.SeedSequence(seed).generate_state(6)
        self.phi = init_mlp(config.encoder_config(), int(seeds[0]))
        self.f_d = init_mlp(config.critic_config(), int(seeds[1]))
        self.psi_t = init_mlp(config.decoder_config(), int(seeds[2]))
        self.psi_c = init_mlp(config.decoder_config(), int(seeds[3]))
        self.head_t = init_mlp(config.head_config(), int(seeds[4]))
        self.head_c = init_mlp(config.head_config(), int(seeds[5])) if config.two_headed else None

    # -- parameter bookkeeping ------------------------------------------------

    def networks(self) -> list[tuple[str, Mlp]]:
        nets = [("phi", self.phi), ("f_d", self.f_d), ("psi_t", self.psi_t), ("psi_c", self.psi_c)]
        nets.append(("head_t", self.head_t))
        if self.head_c is not None:
            nets.append(("head_c", self.head_c))
        return nets

    def set_mode(self, mode: str) -> None:
        for _, net in self.networks():
            net.mode = mode

    def params_critic(self) -> list[np.ndarray]:
        return self.f_d.parameters()

    def params_autoencoder(self) -> list[np.ndarray]:
        return self.phi.parameters() + self.psi_t.parameters() + self.psi_c.parameters()

    def params_predictor(self) -> list[np.ndarray]:
        out = self.phi.parameters() + self.head_t.parameters()
        if self.head_c is not None:
            out += self.head_c.parameters()
        return out

    def _regularized_weights(self) -> list[np.ndarray]:
        """Weight matrices entering the l2 term: encoder, decoders, heads.

        Biases are excluded, and so is the critic, which is regularized by
        its own gradient penalty.
        """
        mats = (
            self.phi.weight_matrices()
            + self.psi_t.weight_matrices()
            + self.psi_c.weight_matrices()
            + self.head_t.weight_matrices()
        )
        if self.head_c is not None:
            mats += self.head_c.weight_matrices()
        return mats

    # -- forward pieces --------------------------------------------------------

    def encode(
        self,
        tape: ad.Tape,
        x,
        mode: str | None = None,
        rng: np.random.Generator | None = None,
    ) -> ad.Tensor:
        xt = x if isinstance(x, ad.Tensor) else tape.input(x)
        return self.phi.forward(tape, xt, mode=mode, rng=rng)

    def discriminate(
        self,
        tape: ad.Tape,
        z,
        v,
        mode: str | None = None,
        rng: np.random.Generator | None = None,
    ) -> ad.Tensor:
        """Critic score of [noise, representation] rows (noise first)."""
        zt = z if isinstance(z, ad.Tensor) else tape.input(z)
        vt = v if isinstance(v, ad.Tensor) else tape.input(v)
        if vt.value.shape[0] != zt.value.shape[0]:
            raise ValueError(
                f"discriminate: batch mismatch, noise {vt.value.shape} vs z {zt.value.shape}"
            )
        return self.f_d.forward(tape, ad.concat_cols(vt, zt), mode=mode, rng=rng)

    def predict_outcomes(self, x: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode factual and counterfactual predictions for every unit.

        Never reads outcomes: a function of (parameters, x, t) only.
        """
        t = np.asarray(t).reshape(-1)
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("treatment indicator must be binary")
        tape = ad.Tape()
        z = self.encode(tape, np.asarray(x, dtype=np.float64), mode="eval")
        if self.config.two_headed:
            y1 = self.head_t.forward(tape, z, mode="eval").value[:, 0]
            y0 = self.head_c.forward(tape, z, mode="eval").value[:, 0]
        else:
            n = z.value.shape[0]
            ones = tape.const(np.ones((n, 1)))
            zeros = tape.const(np.zeros((n, 1)))
            y1 = self.head_t.forward(tape, ad.concat_cols(z, ones), mode="eval").value[:, 0]
            y0 = self.head_t.forward(tape, ad.concat_cols(z, zeros), mode="eval").value[:, 0]
        y_f = np.where(t == 1, y1, y0)
        y_cf = np.where(t == 1, y0, y1)
        return y_f, y_cf

    # -- loss terms -------------------------------------------------------------

    def gradient_penalty(
        self,
        tape: ad.Tape,
        z_t,
        z_c,
        v: np.ndarray,
        eps: np.ndarray,
        delta: float | None = None,
        pair_rng: np.random.Generator | None = None,
        mode: str | None = None,
        rng: np.random.Generator | None = None,
    ) -> ad.Tensor:
        """delta * mean_i (||grad_{[v_i, zhat_i]} f_D||_2 - 1)^2.

        Interpolates zhat = eps * z_t + (1 - eps) * z_c over min(Nt, Nc)
        pairs, drawing the pairing without replacement from the larger group.
        Representations enter as raw values: the penalty regularizes the
        critic only and must not backpropagate into the encoder.
        """
        z_t = z_t.value if isinstance(z_t, ad.Tensor) else np.asarray(z_t, dtype=np.float64)
        z_c = z_c.value if isinstance(z_c, ad.Tensor) else np.asarray(z_c, dtype=np.float64)
        nt, nc = z_t.shape[0], z_c.shape[0]
        if nt == 0 or nc == 0:
            raise ValueError("gradient penalty requires both groups in batch")
        m = min(nt, nc)
        if nt > m or nc > m:
            if pair_rng is None:
                raise ValueError("pairing rng required when group sizes differ")
            if nt > m:
                z_t = z_t[pair_rng.permutation(nt)[:m]]
            else:
                z_c = z_c[pair_rng.permutation(nc)[:m]]
        eps = np.asarray(eps, dtype=np.float64).reshape(m, 1)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (m, self.config.noise_dim):
            raise ValueError(f"gradient penalty noise must be ({m}, {self.config.noise_dim})")
        if delta is None:
            delta = self.config.delta

        interp = eps * z_t + (1.0 - eps) * z_c
        cat = ad.concat_cols(tape.input(v), tape.input(interp))
        scores = self.f_d.forward(tape, cat, mode=mode, rng=rng)
        # Rows are independent through the critic, so the gradient of the
        # row-sum recovers every per-example input gradient in one pass.
        (g,) = ad.grad(ad.sum(scores), [cat], create_graph=True)
        deviation = ad.sub(ad.row_l2_norm(g), tape.const(np.ones((m, 1))))
        return ad.scalar_mul(float(delta), ad.mean(ad.square(deviation)))

    def loss_discriminator(
        self,
        tape: ad.Tape,
        z_t,
        z_c,
        rng: np.random.Generator | None = None,
        mode: str | None = None,
        v_t: np.ndarray | None = None,
        v_c: np.ndarray | None = None,
        v_pen: np.ndarray | None = None,
        eps: np.ndarray | None = None,
    ) -> tuple[ad.Tensor, dict[str, float]]:
        """Critic loss: E_c[f_D] - E_t[f_D] + gradient penalty.

        Representations enter by value (the critic step never trains the
        encoder).  Noise and interpolation draws default to fresh standard
        normal / uniform samples from ``rng``; tests may inject them.
        """
        z_t = z_t.value if isinstance(z_t, ad.Tensor) else np.asarray(z_t, dtype=np.float64)
        z_c = z_c.value if isinstance(z_c, ad.Tensor) else np.asarray(z_c, dtype=np.float64)
        nt, nc = z_t.shape[0], z_c.shape[0]
        if nt == 0 or nc == 0:
            raise ValueError("critic loss requires both groups in batch")
        nd = self.config.noise_dim
        m = min(nt, nc)
        if v_t is None:
            v_t = rng.standard_normal((nt, nd))
        if v_c is None:
            v_c = rng.standard_normal((nc, nd))
        if v_pen is None:
            v_pen = rng.standard_normal((m, nd))
        if eps is None:
            eps = rng.uniform(0.0, 1.0, (m, 1))
        e_t = ad.mean(self.discriminate(tape, z_t, v_t, mode, rng))
        e_c = ad.mean(self.discriminate(tape, z_c, v_c, mode, rng))
        penalty = self.gradient_penalty(
            tape, z_t, z_c, v_pen, eps, pair_rng=rng, mode=mode, rng=rng
        )
        loss = ad.add(ad.sub(e_c, e_t), penalty)
        parts = {
            "e_treated": e_t.item(),
            "e_control": e_c.item(),
            "penalty": penalty.item(),
        }
        return loss, parts

    def _decode_sq_err(
        self,
        tape: ad.Tape,
        z_g: ad.Tensor,
        x_g: ad.Tensor,
        decoder: Mlp,
        mode: str | None,
        rng: np.random.Generator | None,
    ) -> ad.Tensor:
        recon = decoder.forward(tape, z_g, mode=mode, rng=rng)
        return ad.sum(ad.square(ad.sub(x_g, recon)))

    def _group_recon_loss(
        self,
        tape: ad.Tape,
        x_t,
        x_c,
        dec_for_t: Mlp,
        dec_for_c: Mlp,
        mode: str | None,
        rng: np.random.Generator | None,
    ) -> ad.Tensor:
        terms = []
        for x_g, dec in ((x_t, dec_for_t), (x_c, dec_for_c)):
            x_arr = np.asarray(x_g, dtype=np.float64)
            if x_arr.shape[0] == 0:
                continue
            xt = tape.input(x_arr)
            z_g = self.encode(tape, xt, mode=mode, rng=rng)
            sq = self._decode_sq_err(tape, z_g, xt, dec, mode, rng)
            terms.append(ad.scalar_mul(1.0 / x_arr.shape[0], sq))
        if not terms:
            raise ValueError("reconstruction loss requires at least one non-empty group")
        out = terms[0]
        for term in terms[1:]:
            out = ad.add(out, term)
        return out

    def loss_rec(self, tape, x_t, x_c, mode=None, rng=None) -> ad.Tensor:
        """Per-group mean squared reconstruction error, own decoders."""
        return self._group_recon_loss(tape, x_t, x_c, self.psi_t, self.psi_c, mode, rng)

    def loss_cyc(self, tape, x_t, x_c, mode=None, rng=None) -> ad.Tensor:
        """Cross-decoder consistency: each group through the other decoder."""
        return self._group_recon_loss(tape, x_t, x_c, self.psi_c, self.psi_t, mode, rng)

    def _head_sq_err(
        self,
        tape: ad.Tape,
        z: ad.Tensor,
        y_col: ad.Tensor,
        w_col: ad.Tensor,
        t: np.ndarray,
        mode: str | None,
        rng: np.random.Generator | None,
    ) -> ad.Tensor:
        """Sum_i w_i (y_i - h(z_i, t_i))^2 over a batch, head-dispatched."""
        idx_t, idx_c = _split_groups(t)
        parts = []
        if self.config.two_headed:
            for idx, head in ((idx_t, self.head_t), (idx_c, self.head_c)):
                if idx.size == 0:
                    continue
                pred = head.forward(tape, ad.gather_rows(z, idx), mode=mode, rng=rng)
                resid = ad.sub(ad.gather_rows(y_col, idx), pred)
                parts.append(ad.sum(ad.mul_elem(ad.square(resid), ad.gather_rows(w_col, idx))))
        else:
            t_col = tape.const(np.asarray(t, dtype=np.float64).reshape(-1, 1))
            pred = self.head_t.forward(tape, ad.concat_cols(z, t_col), mode=mode, rng=rng)
            resid = ad.sub(y_col, pred)
            parts.append(ad.sum(ad.mul_elem(ad.square(resid), w_col)))
        out = parts[0]
        for part in parts[1:]:
            out = ad.add(out, part)
        return out

    def loss_factual(self, tape, x, t, y, weights, mode=None, rng=None) -> ad.Tensor:
        """Weighted mean squared error of the factual prediction."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        n = x.shape[0]
        if y.shape[0] != n or w.shape[0] != n:
            raise ValueError("loss_factual: x, y, weights must agree in length")
        z = self.encode(tape, x, mode=mode, rng=rng)
        sq = self._head_sq_err(tape, z, tape.input(y), tape.const(w), t, mode, rng)
        return ad.scalar_mul(1.0 / n, sq)

    def predictor_objective(
        self,
        tape: ad.Tape,
        x,
        t,
        y,
        weights,
        rng: np.random.Generator | None = None,
        mode: str = "train",
    ) -> ad.Tensor:
        """Encoder/predictor update objective: L_p + alpha * L_adv + lam * reg.

        The adversarial term is the group-mean critic gap E_t - E_c with
        fresh noise; the critic's penalty never appears here.  Disabled
        terms (zero coefficients) are skipped entirely.
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        n = x.shape[0]
        z = self.encode(tape, x, mode=mode, rng=rng)
        sq = self._head_sq_err(tape, z, tape.input(y), tape.const(w), t, mode, rng)
        obj = ad.scalar_mul(1.0 / n, sq)
        if cfg.alpha > 0.0:
            idx_t, idx_c = _split_groups(t)
            if idx_t.size == 0 or idx_c.size == 0:
                raise ValueError("adversarial term requires both groups in batch")
            nd = cfg.noise_dim
            z_t, z_c = ad.gather_rows(z, idx_t), ad.gather_rows(z, idx_c)
            e_t = ad.mean(
                self.discriminate(tape, z_t, rng.standard_normal((idx_t.size, nd)), mode, rng)
            )
            e_c = ad.mean(
                self.discriminate(tape, z_c, rng.standard_normal((idx_c.size, nd)), mode, rng)
            )
            obj = ad.add(obj, ad.scalar_mul(cfg.alpha, ad.sub(e_t, e_c)))
        if cfg.lam > 0.0:
            obj = ad.add(obj, ad.scalar_mul(cfg.lam, self.l2_penalty(tape)))
        return obj

    def l2_penalty(self, tape: ad.Tape) -> ad.Tensor:
        """Sum of (squared) Frobenius norms of the regularized weights."""
        out = None
        for w in self._regularized_weights():
            sq = ad.sum(ad.square(tape.param(w)))
            term = sq if self.config.squared_l2 else ad.sqrt_eps(sq)
            out = term if out is None else ad.add(out, term)
        return out

    def loss_total(
        self,
        tape: ad.Tape,
        x,
        t,
        y,
        weights,
        rng: np.random.Generator,
        mode: str = "train",
    ) -> tuple[ad.Tensor, LossBreakdown]:
        """Full objective on one batch, plus the measured breakdown.

        The encoder is shared across terms through a single forward pass.
        The critic penalty is evaluated for the l_d diagnostic but excluded
        from the total: only the group-mean gap reaches the encoder.
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        idx_t, idx_c = _split_groups(t)
        if idx_t.size == 0 or idx_c.size == 0:
            raise ValueError("loss_total requires both groups in batch")
        n = x.shape[0]

        x_tensor = tape.input(x)
        z = self.encode(tape, x_tensor, mode=mode, rng=rng)
        z_t, z_c = ad.gather_rows(z, idx_t), ad.gather_rows(z, idx_c)
        x_t, x_c = ad.gather_rows(x_tensor, idx_t), ad.gather_rows(x_tensor, idx_c)

        def recon(groups) -> ad.Tensor:
            acc = None
            for z_g, x_g, dec, count in groups:
                sq = self._decode_sq_err(tape, z_g, x_g, dec, mode, rng)
                term = ad.scalar_mul(1.0 / count, sq)
                acc = term if acc is None else ad.add(acc, term)
            return acc

        l_rec = recon(
            [(z_t, x_t, self.psi_t, idx_t.size), (z_c, x_c, self.psi_c, idx_c.size)]
        )
        l_cyc = recon(
            [(z_t, x_t, self.psi_c, idx_t.size), (z_c, x_c, self.psi_t, idx_c.size)]
        )

        sq = self._head_sq_err(tape, z, tape.input(y), tape.const(w), t, mode, rng)
        l_p = ad.scalar_mul(1.0 / n, sq)

        nd = cfg.noise_dim
        e_t = ad.mean(
            self.discriminate(tape, z_t, rng.standard_normal((idx_t.size, nd)), mode, rng)
        )
        e_c = ad.mean(
            self.discriminate(tape, z_c, rng.standard_normal((idx_c.size, nd)), mode, rng)
        )
        gap = ad.sub(e_t, e_c)

        m = min(idx_t.size, idx_c.size)
        penalty = self.gradient_penalty(
            tape,
            z_t.value,
            z_c.value,
            rng.standard_normal((m, nd)),
            rng.uniform(0.0, 1.0, (m, 1)),
            pair_rng=rng,
            mode=mode,
            rng=rng,
        )

        l_reg = self.l2_penalty(tape)
        total = l_p
        total = ad.add(total, ad.scalar_mul(cfg.alpha, gap))
        total = ad.add(total, ad.scalar_mul(cfg.beta, l_rec))
        total = ad.add(total, ad.scalar_mul(cfg.gamma, l_cyc))
        total = ad.add(total, ad.scalar_mul(cfg.lam, l_reg))

        breakdown = LossBreakdown(
            l_p=l_p.item(),
            l_d=float(e_c.item() - e_t.item() + penalty.item()),
            l_rec=l_rec.item(),
            l_cyc=l_cyc.item(),
            l_reg=l_reg.item(),
            total=total.item(),
            wasserstein_gap=gap.item(),
        )
        return total, breakdown


# ---------------------------------------------------------------------------
# Checkpoints: the networks' parameter blocks concatenated in a fixed order,
# with a JSON sidecar carrying the configuration.


def save_checkpoint(model: CbreModel, path: str) -> None:
    with open(path, "wb") as f:
        for _, net in model.networks():
            save_mlp(net, f)
    sidecar = {"config": asdict(model.config), "format_version": 1}
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str) -> CbreModel:
    with open(path + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    config = CbreConfig(**sidecar["config"])
    model = CbreModel(config, seed=0)
    with open(path, "rb") as f:
        for _, net in model.networks():
            load_mlp(net, f)
    return model


def copy_parameters(src: CbreModel, dst: CbreModel) -> None:
    """Copy all parameter values from one model into another, in place."""
    for (_, a), (_, b) in zip(src.networks(), dst.networks()):
        for pa, pb in zip(a.parameters(), b.parameters()):
            pb[:] = pa
        for bn_a, bn_b in zip(a.batchnorms, b.batchnorms):
            if bn_a is not None:
                bn_b.running_mean[:] = bn_a.running_mean
                bn_b.running_var[:] = bn_a.running_var
