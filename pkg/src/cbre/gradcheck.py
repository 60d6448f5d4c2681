"""Finite-difference oracles and randomized gradient checks.

Shared by the unit tests, the acceptance suite, and the ``gradcheck``
command.  All checks compare analytic reverse-mode gradients against central
finite differences of the same scalar function, evaluated at points bounded
away from ReLU kinks (and from the smoothed |x| kink of sqrt_eps) so the
numerical derivative is trustworthy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-5


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-coordinate relative error with an absolute floor of 1.

    max_i |a_i - n_i| / max(1, |a_i|, |n_i|): relative for large entries,
    absolute for small ones, which is what a central-difference oracle with
    O(h^2) truncation error can actually resolve.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff_grad(
    f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = FD_STEP
) -> list[np.ndarray]:
    """Central-difference gradient of f with respect to every array entry.

    ``f`` must read the arrays by reference; they are perturbed in place and
    restored, so they must be float64 (no silent casting copies).
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in range(a.size):
            orig = a.flat[i]
            a.flat[i] = orig + h
            fp = f()
            a.flat[i] = orig - h
            fm = f()
            a.flat[i] = orig
            g.flat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def finite_diff_grad_sampled(
    f: Callable[[], float],
    arrays: Sequence[np.ndarray],
    rng: np.random.Generator,
    coords_per_array: int,
    h: float = FD_STEP,
) -> list[tuple[int, int, float]]:
    """Central differences at a random subset of coordinates.

    Returns (array index, flat coordinate, derivative) triples.  Keeps large
    networks checkable inside a time budget without biasing which entries
    get audited.
    """
    out = []
    for k, a in enumerate(arrays):
        n_pick = min(coords_per_array, a.size)
        picks = rng.choice(a.size, size=n_pick, replace=False)
        for i in picks:
            orig = a.flat[i]
            a.flat[i] = orig + h
            fp = f()
            a.flat[i] = orig - h
            fm = f()
            a.flat[i] = orig
            out.append((k, int(i), (fp - fm) / (2.0 * h)))
    return out


def compare_sampled(
    analytic: Sequence[np.ndarray], samples: Sequence[tuple[int, int, float]]
) -> float:
    """Worst relative error between analytic gradients and sampled FD."""
    worst = 0.0
    for k, i, fd in samples:
        a = float(analytic[k].flat[i])
        err = abs(a - fd) / max(1.0, abs(a), abs(fd))
        worst = max(worst, err)
    return worst


def kink_margin(tape: ad.Tape) -> float:
    """Distance of the recorded forward pass from non-smooth points.

    For ReLU nodes: smallest |pre-activation|.  For sqrt_eps nodes: smallest
    input value (sqrt(x + eps) has unbounded curvature as x -> 0).  Finite
    differences near either point measure the wrong slope, so randomized
    checks resample inputs until this margin clears a threshold.
    """
    margin = np.inf
    for node in tape.nodes:
        if node.op == "relu":
            x = tape.nodes[node.inputs[0]].value
            if x.size:
                margin = min(margin, float(np.min(np.abs(x))))
        elif node.op == "sqrt_eps":
            x = tape.nodes[node.inputs[0]].value
            if x.size:
                margin = min(margin, float(np.min(x)))
    return margin


# ---------------------------------------------------------------------------
# Randomized engine-level graphs: compositions of the primitive set over a
# pool of same-shape tensors, with a scalar reduction at the end.

_POOL_UNARY = ("relu", "sigmoid", "square", "scalar_mul", "smooth_abs")
_POOL_BINARY = ("add", "sub", "mul_elem", "matmul_param")


def random_graph_fn(
    rng: np.random.Generator, depth: int = 6, dim_max: int = 8
) -> tuple[Callable[[], tuple[ad.Tensor, list[ad.Tensor]]], list[np.ndarray]]:
    """Build a random scalar-valued graph over a pool of (n, m) tensors.

    Returns (builder, params).  The builder replays the same op sequence on a
    fresh tape against the current contents of ``params`` and returns the
    scalar output tensor plus the lifted parameter tensors, so one case
    serves both the analytic pass and the finite-difference oracle.
    """
    n = int(rng.integers(1, dim_max + 1))
    m = int(rng.integers(1, dim_max + 1))
    n_params = int(rng.integers(1, 4))
    params = [rng.standard_normal((n, m)) for _ in range(n_params)]
    square_mats: list[np.ndarray] = []

    ops: list[tuple] = []
    pool_size = n_params
    for _ in range(depth):
        if pool_size >= 2 and rng.random() < 0.5:
            kind = _POOL_BINARY[rng.integers(0, len(_POOL_BINARY))]
            i, j = (int(v) for v in rng.integers(0, pool_size, size=2))
            if kind == "matmul_param":
                square_mats.append(rng.standard_normal((m, m)) * 0.5)
                ops.append(("matmul_param", i, len(square_mats) - 1))
            else:
                ops.append((kind, i, j))
        else:
            kind = _POOL_UNARY[rng.integers(0, len(_POOL_UNARY))]
            i = int(rng.integers(0, pool_size))
            if kind == "scalar_mul":
                ops.append((kind, i, float(rng.uniform(-2.0, 2.0))))
            else:
                ops.append((kind, i))
        pool_size += 1
    reduce_mean = bool(rng.random() < 0.5)
    params = params + square_mats

    def build() -> tuple[ad.Tensor, list[ad.Tensor]]:
        tape = ad.Tape()
        lifted = [tape.param(p) for p in params]
        pool = list(lifted[:n_params])
        mats = lifted[n_params:]
        for op in ops:
            kind = op[0]
            if kind == "matmul_param":
                pool.append(ad.matmul(pool[op[1]], mats[op[2]]))
            elif kind in ("add", "sub", "mul_elem"):
                pool.append(getattr(ad, kind)(pool[op[1]], pool[op[2]]))
            elif kind == "scalar_mul":
                pool.append(ad.scalar_mul(op[2], pool[op[1]]))
            elif kind == "smooth_abs":
                pool.append(ad.sqrt_eps(ad.square(pool[op[1]])))
            else:
                pool.append(getattr(ad, kind)(pool[op[1]]))
        out = ad.mean(pool[-1]) if reduce_mean else ad.sum(pool[-1])
        return out, lifted

    return build, params


def check_random_graph(
    rng: np.random.Generator,
    depth: int = 6,
    dim_max: int = 8,
    margin: float = 1e-3,
    max_resample: int = 100,
) -> float:
    """First-order check of one random graph; returns worst relative error."""
    for _ in range(max_resample):
        build, params = random_graph_fn(rng, depth=depth, dim_max=dim_max)
        out, lifted = build()
        value = out.item()
        # Large outputs drown the finite difference in float64 roundoff.
        if not np.isfinite(value) or abs(value) > 1e3:
            continue
        if kink_margin(out.tape) < margin:
            continue
        analytic = [g.value.copy() for g in ad.grad(out, lifted)]
        fd = finite_diff_grad(lambda: build()[0].item(), params)
        return max(rel_err(a, f) for a, f in zip(analytic, fd))
    raise RuntimeError("could not sample a graph clear of ReLU kinks")


def _loss_tape_margin_ok(tape: ad.Tape, margin: float) -> bool:
    return kink_margin(tape) >= margin


def random_toy_setup(
    rng: np.random.Generator, dim_max: int = 8, depth_max: int = 5
) -> tuple["CbreModel", np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """A small random model plus a balanced batch with injected noise draws.

    Group sizes are equal so the penalty pairing is the identity and every
    finite-difference re-evaluation sees exactly the same sample pairing.
    Returns (model, x, t, y, w, v_pen, eps).
    """
    from .model import CbreConfig, CbreModel

    p = int(rng.integers(2, 7))
    rep = int(rng.integers(2, dim_max + 1))
    cfg = CbreConfig(
        covariate_dim=p,
        rep_dim=rep,
        noise_dim=int(rng.integers(1, dim_max + 1)),
        enc_depth=int(rng.integers(1, depth_max + 1)),
        enc_hidden=int(rng.integers(2, dim_max + 1)),
        disc_depth=int(rng.integers(1, depth_max + 1)),
        disc_hidden=int(rng.integers(2, dim_max + 1)),
        dec_depth=int(rng.integers(1, depth_max + 1)),
        dec_hidden=int(rng.integers(2, dim_max + 1)),
        pred_depth=int(rng.integers(1, depth_max + 1)),
        pred_hidden=int(rng.integers(2, dim_max + 1)),
        two_headed=bool(rng.random() < 0.8),
    )
    model = CbreModel(cfg, seed=int(rng.integers(0, 2**31)))
    half = int(rng.integers(2, 6))
    n = 2 * half
    x = rng.standard_normal((n, p))
    t = np.array([1] * half + [0] * half, dtype=np.float64)
    y = rng.standard_normal(n)
    w = rng.uniform(0.5, 2.0, n)
    v_pen = rng.standard_normal((half, cfg.noise_dim))
    eps = rng.uniform(0.1, 0.9, (half, 1))
    return model, x, t, y, w, v_pen, eps


def check_model_losses(
    rng: np.random.Generator,
    coords_per_array: int = 3,
    margin: float = 1e-3,
    max_resample: int = 60,
) -> float:
    """Gradients of the prediction, reconstruction, cycle, and critic losses
    on one random small model, against sampled central differences.

    Returns the worst relative error over all four losses.
    """
    for _ in range(max_resample):
        model, x, t, y, w, v_pen, eps = random_toy_setup(rng)
        idx_t, idx_c = np.flatnonzero(t == 1), np.flatnonzero(t == 0)
        x_t, x_c = x[idx_t], x[idx_c]
        nd = model.config.noise_dim
        v_t = rng.standard_normal((len(idx_t), nd))
        v_c = rng.standard_normal((len(idx_c), nd))

        def z_groups():
            tape = ad.Tape()
            z = model.encode(tape, x, mode="eval")
            return tape, z.value[idx_t], z.value[idx_c]

        cases = [
            (
                lambda tape: model.loss_factual(tape, x, t, y, w, mode="eval"),
                model.params_predictor(),
            ),
            (
                lambda tape: model.loss_rec(tape, x_t, x_c, mode="eval"),
                model.params_autoencoder(),
            ),
            (
                lambda tape: model.loss_cyc(tape, x_t, x_c, mode="eval"),
                model.params_autoencoder(),
            ),
            (
                lambda tape: model.loss_discriminator(
                    tape, z_groups()[1], z_groups()[2], mode="eval",
                    v_t=v_t, v_c=v_c, v_pen=v_pen, eps=eps,
                )[0],
                model.params_critic(),
            ),
        ]

        worst = 0.0
        clear_of_kinks = True
        for build, params in cases:
            tape = ad.Tape()
            out = build(tape)
            if not _loss_tape_margin_ok(tape, margin) or not np.isfinite(out.item()):
                clear_of_kinks = False
                break
            lifted = [tape.param(p) for p in params]
            analytic = [g.value.copy() for g in ad.grad(out, lifted)]
            samples = finite_diff_grad_sampled(
                lambda: build(ad.Tape()).item(), params, rng, coords_per_array
            )
            worst = max(worst, compare_sampled(analytic, samples))
        if clear_of_kinks:
            return worst
    raise RuntimeError("could not sample a model batch clear of ReLU kinks")


def check_penalty_double_backprop(
    rng: np.random.Generator,
    coords_per_array: int = 4,
    margin: float = 1e-3,
    max_resample: int = 60,
) -> float:
    """Gradient of the interpolation penalty with respect to critic
    parameters, against sampled central differences of the penalty value."""
    for _ in range(max_resample):
        model, x, t, y, w, v_pen, eps = random_toy_setup(rng)
        idx_t, idx_c = np.flatnonzero(t == 1), np.flatnonzero(t == 0)

        def z_vals():
            tape = ad.Tape()
            z = model.encode(tape, x, mode="eval")
            return z.value[idx_t], z.value[idx_c]

        def penalty(tape: ad.Tape) -> ad.Tensor:
            z_t, z_c = z_vals()
            return model.gradient_penalty(tape, z_t, z_c, v_pen, eps, mode="eval")

        params = model.params_critic()
        tape = ad.Tape()
        out = penalty(tape)
        if not _loss_tape_margin_ok(tape, margin) or not np.isfinite(out.item()):
            continue
        lifted = [tape.param(p) for p in params]
        analytic = [g.value.copy() for g in ad.grad(out, lifted)]
        samples = finite_diff_grad_sampled(
            lambda: penalty(ad.Tape()).item(), params, rng, coords_per_array
        )
        return compare_sampled(analytic, samples)
    raise RuntimeError("could not sample a penalty case clear of ReLU kinks")


def check_random_graph_second_order(
    rng: np.random.Generator,
    depth: int = 4,
    dim_max: int = 6,
    margin: float = 1e-3,
    max_resample: int = 100,
) -> float:
    """Second-order check: FD of a scalar function of the first gradient.

    s(params) = sum_k sum(square(d out / d param_k)), with the inner gradient
    recorded via create_graph; analytic ds/dparams is compared against
    central differences of s itself.
    """
    for _ in range(max_resample):
        build, params = random_graph_fn(rng, depth=depth, dim_max=dim_max)

        def s_value(build=build) -> tuple[ad.Tensor, list[ad.Tensor]]:
            out, lifted = build()
            gs = ad.grad(out, lifted, create_graph=True)
            acc = ad.sum(ad.square(gs[0]))
            for g in gs[1:]:
                acc = ad.add(acc, ad.sum(ad.square(g)))
            return acc, lifted

        out, _ = build()
        value = out.item()
        if not np.isfinite(value) or abs(value) > 1e3:
            continue
        if kink_margin(out.tape) < margin:
            continue
        acc, lifted = s_value()
        if not np.isfinite(acc.item()) or abs(acc.item()) > 1e5:
            continue
        analytic = [g.value.copy() for g in ad.grad(acc, lifted)]
        fd = finite_diff_grad(lambda: s_value()[0].item(), params)
        return max(rel_err(a, f) for a, f in zip(analytic, fd))
    raise RuntimeError("could not sample a second-order case clear of kinks")
