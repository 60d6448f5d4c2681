"""Command-line entry point: training, evaluation, ablations, simulators,
sweeps, representation export, and gradient checking.

Every run writes its full effective configuration next to its outputs, so
any artifact can be reproduced from the snapshot alone.  Replication k of a
run with master seed s derives all of its randomness (model init, batching,
splits, data generation) from (s, k), never from wall clock or order of
execution; ablation variants therefore share splits and initializations.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import gradcheck
from .data import (
    ColumnScaler,
    ObservationalDataset,
    SplitSpec,
    TwinsSimConfig,
    load_csv,
    make_synthetic,
    save_csv,
    sigmoid,
    simulate_twins_assignment,
    split as split_dataset,
    write_simulator_sidecar,
)
from .metrics import EvaluationReport, evaluate
from .model import CbreConfig, CbreModel, load_checkpoint, save_checkpoint
from .trainer import OutcomeScaler, TrainConfig, fit

VARIANTS = {
    "total": {},
    "lp_only": {"alpha": 0.0, "beta": 0.0, "gamma": 0.0},
    "lp_ld": {"beta": 0.0, "gamma": 0.0},
    "lp_rec_cyc": {"alpha": 0.0},
}

REGIMES = ("in-sample", "out-sample")


def default_config() -> dict:
    return {
        "dataset": {
            "name": "synthetic",
            "path": None,
            "metric_set": None,
            "n": 200,
            "p": 10,
            "bias_strength": 1.0,
            "outcome": "linear",
            "tau_value": 2.0,
            "noise_std": 1.0,
        },
        "model": {
            "alpha": 0.5,
            "beta": 1.0,
            "gamma": 1.0,
            "lam": 1e-4,
            "delta": 10.0,
            "rep_dim": 200,
            "noise_dim": None,
            "enc_depth": 5,
            "enc_hidden": 200,
            "disc_depth": 3,
            "disc_hidden": 200,
            "dec_depth": 5,
            "dec_hidden": 200,
            "pred_depth": 3,
            "pred_hidden": 100,
            "dropout_rate": 0.0,
            "use_batchnorm": False,
            "outcome": "continuous",
            "two_headed": True,
            "squared_l2": True,
        },
        "trainer": {
            "batch_size": 80,
            "learning_rate": 1e-3,
            "max_iterations": 3000,
            "patience": 20,
            "eval_every": 50,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_epsilon": 1e-8,
            "standardize_outcomes": True,
        },
        "split": {"fractions": [0.6, 0.3, 0.1]},
        "sweep": {
            "learning_rates": [1e-2, 1e-3, 1e-4],
            "depths": [3, 4, 5, 6],
            "dims": [50, 100, 200, 300],
            "batch_sizes": list(range(50, 201, 10)),
            "alphas": [round(0.5 + 0.1 * i, 1) for i in range(11)],
            "betas": [round(0.5 + 0.1 * i, 1) for i in range(11)],
            "gammas": [round(0.5 + 0.1 * i, 1) for i in range(11)],
            "budget": 20,
        },
        "variant": "total",
        "seed": 0,
        "reps": "0..0",
        "out": "runs/default",
        "workers": 1,
    }


# -- configuration plumbing ------------------------------------------------------


def load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(
            f"config parse error in {path} at line {exc.lineno}: {exc.msg}"
        ) from None


def merge_config(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ValueError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = merge_config(out[key], value, where)
        else:
            out[key] = value
    return out


def apply_set_overrides(config: dict, pairs: list[str]) -> dict:
    config = copy.deepcopy(config)
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ValueError(f"unknown config key {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config


def resolve_config(args) -> dict:
    config = default_config()
    if getattr(args, "config", None):
        config = merge_config(config, load_config_file(args.config))
    if getattr(args, "set", None):
        config = apply_set_overrides(config, args.set)
    for flag in ("seed", "reps", "out", "workers"):
        value = getattr(args, flag, None)
        if value is not None:
            config[flag] = value
    return config


def parse_reps(text) -> list[int]:
    text = str(text)
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
        else:
            lo = hi = int(text)
    except ValueError:
        raise ValueError(f"--reps expects k or a..b, got {text!r}") from None
    if hi < lo:
        raise ValueError(f"--reps range is empty: {text!r}")
    return list(range(lo, hi + 1))


def write_effective_config(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.effective.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- one replication --------------------------------------------------------------


def derive_seeds(master_seed: int, rep: int) -> dict[str, int]:
    state = np.random.SeedSequence(master_seed, spawn_key=(rep,)).generate_state(4)
    return {
        "model": int(state[0]),
        "trainer": int(state[1]),
        "split": int(state[2]),
        "data": int(state[3]),
    }


def load_dataset_for_rep(section: dict, rep: int, data_seed: int) -> ObservationalDataset:
    if section.get("path"):
        root = Path(section["path"])
        path = root / f"rep_{rep}.csv"
        if not path.exists():
            raise ValueError(f"missing replication file {path}")
        name = section.get("name") or root.name
        return load_csv(str(path), name=name, replication=rep)
    if section.get("name", "synthetic") == "synthetic":
        ds = make_synthetic(
            n=section["n"],
            p=section["p"],
            bias_strength=section["bias_strength"],
            outcome=section["outcome"],
            seed=data_seed,
            noise_std=section["noise_std"],
            tau_value=section["tau_value"],
        )
        ds.replication = rep
        return ds
    raise ValueError(
        f"dataset.path is required for dataset {section.get('name')!r}"
    )


def build_model_config(section: dict, covariate_dim: int, variant: str) -> CbreConfig:
    if variant not in VARIANTS:
        raise ValueError(
            f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}"
        )
    fields = dict(section)
    fields.update(VARIANTS[variant])
    return CbreConfig(covariate_dim=covariate_dim, **fields)


def run_replication(config: dict, rep: int, save_artifacts: bool = True) -> dict:
    """Train on one replication and score both regimes.

    Returns the metric rows, the best validation loss, and where the
    artifacts were written.
    """
    seeds = derive_seeds(int(config["seed"]), rep)
    ds = load_dataset_for_rep(config["dataset"], rep, seeds["data"])
    spec = SplitSpec(fractions=tuple(config["split"]["fractions"]), seed=seeds["split"])
    train, val, test = split_dataset(ds, spec)

    model_cfg = build_model_config(config["model"], ds.p, config["variant"])
    model = CbreModel(model_cfg, seed=seeds["model"])
    train_cfg = TrainConfig(seed=seeds["trainer"], **config["trainer"])

    cov_scaler = ColumnScaler.fit(train.x)
    standardize = (
        model_cfg.outcome == "continuous" and train_cfg.standardize_outcomes
    )
    out_scaler = OutcomeScaler.fit(train.yf) if standardize else None
    y_train = out_scaler.transform(train.yf) if out_scaler else train.yf
    y_val = out_scaler.transform(val.yf) if out_scaler else val.yf

    log = fit(
        model,
        cov_scaler.transform(train.x), train.t, y_train,
        cov_scaler.transform(val.x), val.t, y_val,
        train_cfg,
    )

    rep_dir = None
    if save_artifacts:
        rep_dir = Path(config["out"]) / f"rep_{rep}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, str(rep_dir / "checkpoint.bin"))
        log.to_csv(str(rep_dir / "trainlog.csv"))

    rows = {
        regime: evaluate(
            model, train, val, test, regime,
            metric_set=config["dataset"].get("metric_set"),
            covariate_scaler=cov_scaler,
            outcome_scaler=out_scaler,
        )
        for regime in REGIMES
    }
    return {
        "rep": rep,
        "rows": rows,
        "best_val_loss": log.best_val_loss,
        "iterations": len(log.rows),
        "rep_dir": str(rep_dir) if rep_dir else None,
    }


def _replication_worker(payload: tuple) -> dict:
    config, rep = payload
    return run_replication(config, rep)


def run_replications(config: dict, reps: list[int]) -> list[dict]:
    workers = min(int(config.get("workers", 1)), len(reps))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication_worker, [(config, r) for r in reps]))
    else:
        results = [run_replication(config, r) for r in reps]
    return results


def build_reports(config: dict, results: list[dict]) -> dict:
    dataset_name = config["dataset"].get("name") or "dataset"
    regimes = {}
    for regime in REGIMES:
        report = EvaluationReport(dataset=dataset_name, regime=regime)
        for result in sorted(results, key=lambda r: r["rep"]):
            report.add(result["rows"][regime])
        regimes[regime] = report.to_dict()
    return {
        "dataset": dataset_name,
        "variant": config["variant"],
        "replications": [r["rep"] for r in sorted(results, key=lambda r: r["rep"])],
        "regimes": regimes,
    }


def write_report(payload: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def print_report_summary(payload: dict) -> None:
    for regime in REGIMES:
        for metric, agg in payload["regimes"][regime]["aggregate"].items():
            print(
                f"{payload['variant']:<11} {regime:<10} {metric:<12} "
                f"{agg['mean']:.6f} +- {agg['stderr']:.6f}"
            )


# -- subcommands -------------------------------------------------------------------


def cmd_train(args) -> int:
    config = resolve_config(args)
    reps = parse_reps(config["reps"])
    out_dir = Path(config["out"])
    write_effective_config(config, out_dir)
    results = run_replications(config, reps)
    payload = build_reports(config, results)
    write_report(payload, out_dir)
    print_report_summary(payload)
    return 0


def cmd_evaluate(args) -> int:
    if args.config is None and args.out is not None:
        snapshot = Path(args.out) / "config.effective.json"
        if snapshot.exists():
            args.config = str(snapshot)
    if args.config is None:
        raise ValueError("evaluate needs --config or an --out dir with a snapshot")
    config = resolve_config(args)
    reps = parse_reps(config["reps"])
    out_dir = Path(config["out"])

    results = []
    for rep in reps:
        seeds = derive_seeds(int(config["seed"]), rep)
        ds = load_dataset_for_rep(config["dataset"], rep, seeds["data"])
        spec = SplitSpec(
            fractions=tuple(config["split"]["fractions"]), seed=seeds["split"]
        )
        train, val, test = split_dataset(ds, spec)
        checkpoint = out_dir / f"rep_{rep}" / "checkpoint.bin"
        if not checkpoint.exists():
            raise ValueError(f"missing checkpoint {checkpoint}")
        model = load_checkpoint(str(checkpoint))
        cov_scaler = ColumnScaler.fit(train.x)
        standardize = (
            model.config.outcome == "continuous"
            and config["trainer"]["standardize_outcomes"]
        )
        out_scaler = OutcomeScaler.fit(train.yf) if standardize else None
        rows = {
            regime: evaluate(
                model, train, val, test, regime,
                metric_set=config["dataset"].get("metric_set"),
                covariate_scaler=cov_scaler,
                outcome_scaler=out_scaler,
            )
            for regime in REGIMES
        }
        results.append({"rep": rep, "rows": rows})
    payload = build_reports(config, results)
    write_report(payload, out_dir)
    print_report_summary(payload)
    return 0


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if len(variants) < 2:
        raise ValueError("ablate needs at least 2 variants")
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
    reps = parse_reps(config["reps"])
    root = Path(config["out"])
    write_effective_config(config, root)

    table_rows = []
    for variant in variants:
        sub = copy.deepcopy(config)
        sub["variant"] = variant
        sub["out"] = str(root / variant)
        write_effective_config(sub, Path(sub["out"]))
        results = run_replications(sub, reps)
        payload = build_reports(sub, results)
        write_report(payload, Path(sub["out"]))
        for regime in REGIMES:
            for metric, agg in payload["regimes"][regime]["aggregate"].items():
                table_rows.append(
                    {
                        "variant": variant,
                        "regime": regime,
                        "metric": metric,
                        "mean": agg["mean"],
                        "stderr": agg["stderr"],
                    }
                )

    with open(root / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["variant", "regime", "metric", "mean", "stderr"]
        )
        writer.writeheader()
        for row in table_rows:
            writer.writerow(row)

    print(f"{'variant':<12} {'regime':<11} {'metric':<12} {'mean':>10} {'stderr':>10}")
    for row in table_rows:
        print(
            f"{row['variant']:<12} {row['regime']:<11} {row['metric']:<12} "
            f"{row['mean']:>10.6f} {row['stderr']:>10.6f}"
        )
    return 0


def _require_seed(args) -> int:
    if args.seed is None:
        raise ValueError(
            "an explicit --seed is required: generated datasets must be reproducible"
        )
    return int(args.seed)


def cmd_simulate_twins(args) -> int:
    seed = _require_seed(args)
    out_root = Path(args.out)
    reps = parse_reps(args.reps)
    n = int(args.n)
    for rep in reps:
        state = np.random.SeedSequence(seed, spawn_key=(rep,)).generate_state(3)
        rng = np.random.default_rng(int(state[0]))
        x = rng.standard_normal((n, 30))
        # Latent mortality model for the synthetic pairs: the heavier twin
        # (t=1 record) carries a survival advantage on top of a shared
        # covariate-driven risk.
        base = x @ (rng.uniform(-0.3, 0.3, 30))
        p0 = sigmoid(base + 0.3)
        p1 = sigmoid(base - 0.3)
        y0 = (rng.random(n) < p0).astype(np.float64)
        y1 = (rng.random(n) < p1).astype(np.float64)
        sim = TwinsSimConfig(noise_std=float(args.noise_std), seed=int(state[1]))
        t, _, params = simulate_twins_assignment(x, sim, with_params=True)
        ds = ObservationalDataset(
            x=x, t=t,
            yf=np.where(t == 1, y1, y0),
            ycf=np.where(t == 1, y0, y1),
            mu0=p0, mu1=p1,
            name=args.name, replication=rep,
        )
        ds.validate()
        path = out_root / args.name / f"rep_{rep}.csv"
        save_csv(ds, str(path))
        write_simulator_sidecar(str(path), params)
        print(f"wrote {path} (n={n}, treated fraction {t.mean():.3f})")
    return 0


def cmd_make_synthetic(args) -> int:
    seed = _require_seed(args)
    out_root = Path(args.out)
    reps = parse_reps(args.reps)
    outcome = "constant" if args.tau_const is not None else "linear"
    tau_value = float(args.tau_const) if args.tau_const is not None else 2.0
    for rep in reps:
        state = np.random.SeedSequence(seed, spawn_key=(rep,)).generate_state(1)
        ds = make_synthetic(
            n=int(args.n), p=int(args.p),
            bias_strength=float(args.bias),
            outcome=outcome, seed=int(state[0]),
            noise_std=float(args.noise_std), tau_value=tau_value,
        )
        ds.name, ds.replication = args.name, rep
        path = out_root / args.name / f"rep_{rep}.csv"
        save_csv(ds, str(path))
        print(f"wrote {path} (n={ds.n}, p={ds.p})")
    return 0


def cmd_export_repr(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_csv(args.data)
    if ds.p != model.config.covariate_dim:
        raise ValueError(
            f"dimension mismatch: checkpoint expects p={model.config.covariate_dim}, "
            f"dataset has p={ds.p}"
        )
    z = model.encode(ad.Tape(), ds.x, mode="eval").value
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "repr.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"z{j}" for j in range(z.shape[1])] + ["t"])
        for i in range(z.shape[0]):
            writer.writerow([f"{v:.17g}" for v in z[i]] + [str(int(ds.t[i]))])
    print(f"wrote {path} ({z.shape[0]} rows, rep_dim={z.shape[1]})")
    return 0


def _sweep_grid(section: dict) -> list[tuple]:
    axes = [
        section["learning_rates"], section["depths"], section["dims"],
        section["batch_sizes"], section["alphas"], section["betas"],
        section["gammas"],
    ]
    return axes


def _sweep_trial_config(base: dict, combo: tuple) -> dict:
    lr, depth, dim, batch, alpha, beta, gamma = combo
    trial = copy.deepcopy(base)
    trial["trainer"]["learning_rate"] = lr
    trial["trainer"]["batch_size"] = batch
    model = trial["model"]
    model["alpha"], model["beta"], model["gamma"] = alpha, beta, gamma
    for key in ("enc_depth", "disc_depth", "dec_depth", "pred_depth"):
        model[key] = depth
    model["rep_dim"] = dim
    model["noise_dim"] = None
    for key in ("enc_hidden", "disc_hidden", "dec_hidden"):
        model[key] = dim
    model["pred_hidden"] = max(1, dim // 2)
    return trial


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    out_dir = Path(config["out"])
    write_effective_config(config, out_dir)
    axes = _sweep_grid(config["sweep"])
    sizes = [len(a) for a in axes]
    total = math.prod(sizes)
    budget = min(int(config["sweep"]["budget"]), total)
    rng = np.random.default_rng(int(config["seed"]))
    picks = (
        np.arange(total)
        if budget == total
        else rng.choice(total, size=budget, replace=False)
    )
    rep = parse_reps(config["reps"])[0]

    def unrank(index: int) -> tuple:
        combo = []
        for size, axis in zip(reversed(sizes), reversed(axes)):
            index, pos = divmod(index, size)
            combo.append(axis[pos])
        return tuple(reversed(combo))

    columns = [
        "trial", "learning_rate", "depth", "dim", "batch_size",
        "alpha", "beta", "gamma", "val_loss",
    ]
    rows = []
    try:
        for trial_id, index in enumerate(picks):
            combo = unrank(int(index))
            trial_config = _sweep_trial_config(config, combo)
            result = run_replication(trial_config, rep, save_artifacts=False)
            rows.append(dict(zip(columns, [trial_id, *combo, result["best_val_loss"]])))
            print(
                f"trial {trial_id}: lr={combo[0]} depth={combo[1]} dim={combo[2]} "
                f"batch={combo[3]} abg=({combo[4]},{combo[5]},{combo[6]}) "
                f"val_loss={result['best_val_loss']:.6f}"
            )
    finally:
        rows.sort(key=lambda r: r["val_loss"])
        with open(out_dir / "leaderboard.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        if rows:
            best = rows[0]
            winner = _sweep_trial_config(
                config,
                (
                    best["learning_rate"], best["depth"], best["dim"],
                    best["batch_size"], best["alpha"], best["beta"], best["gamma"],
                ),
            )
            with open(out_dir / "config.best.json", "w", encoding="utf-8") as fh:
                json.dump(winner, fh, indent=2, sort_keys=True)
                fh.write("\n")
    if rows:
        print(f"best val_loss {rows[0]['val_loss']:.6f} (trial {rows[0]['trial']})")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(int(args.seed or 0))
    trials = int(args.trials)
    checks = [
        (
            "first-order random graphs",
            lambda: max(gradcheck.check_random_graph(rng) for _ in range(trials)),
            1e-6,
        ),
        (
            "second-order random graphs",
            lambda: max(
                gradcheck.check_random_graph_second_order(rng)
                for _ in range(max(1, trials // 2))
            ),
            1e-5,
        ),
        (
            "model loss gradients",
            lambda: max(gradcheck.check_model_losses(rng) for _ in range(3)),
            1e-5,
        ),
        (
            "penalty double backprop",
            lambda: max(gradcheck.check_penalty_double_backprop(rng) for _ in range(3)),
            1e-4,
        ),
    ]
    failed = False
    for label, runner, tol in checks:
        worst = runner()
        ok = worst <= tol
        failed = failed or not ok
        print(f"{'PASS' if ok else 'FAIL'} {label}: worst rel err {worst:.3e} (tol {tol:g})")
    return 1 if failed else 0


# -- argument parsing ---------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override a config entry by dotted path (repeatable)",
    )
    parser.add_argument("--reps", help="replication index or inclusive range a..b")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--workers", type=int, help="parallel replication workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbre",
        description="Counterfactual inference with cycle-balanced representations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train over replications and write reports")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-score saved checkpoints")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run loss-term ablation variants")
    _add_common(p)
    p.add_argument(
        "--variants", default="total,lp_only,lp_ld,lp_rec_cyc",
        help="comma-separated variant names",
    )
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("simulate-twins", help="generate twin pairs with biased selection")
    p.add_argument("--n", type=int, default=11400)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--name", default="twins")
    p.add_argument("--reps", default="0..0")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_simulate_twins)

    p = sub.add_parser("make-synthetic", help="generate a linear-effect benchmark")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--bias", type=float, default=1.0)
    p.add_argument("--tau-const", type=float, default=None)
    p.add_argument("--noise-std", type=float, default=1.0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--reps", default="0..0")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("export-repr", help="write latent representations to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_export_repr)

    p = sub.add_parser("sweep", help="hyperparameter search on validation loss")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
