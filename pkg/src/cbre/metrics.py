"""Evaluation: effect-estimation error, policy risk, AUC, replication reports.

Estimators are scored on reconstructed per-unit effects.  Which metrics apply
depends on what ground truth a dataset carries: known counterfactual surfaces
give rooted PEHE and the ATE error, a randomized subsample gives policy risk,
and recorded binary twin outcomes give AUC over both potential-outcome
predictions.  The in-sample regime evaluates on train plus validation, the
out-sample regime on the held-out test split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import ObservationalDataset


@dataclass
class IteEstimate:
    """Per-unit predicted potential outcomes and their difference."""

    y1: np.ndarray
    y0: np.ndarray

    def __post_init__(self):
        self.y1 = np.asarray(self.y1, dtype=np.float64).reshape(-1)
        self.y0 = np.asarray(self.y0, dtype=np.float64).reshape(-1)
        if self.y1.shape != self.y0.shape:
            raise ValueError("y1 and y0 must have the same length")

    @property
    def ite(self) -> np.ndarray:
        return self.y1 - self.y0

    def __len__(self) -> int:
        return self.y1.shape[0]

    @classmethod
    def from_factual(cls, yf_hat, ycf_hat, t) -> "IteEstimate":
        t = np.asarray(t).reshape(-1)
        yf_hat = np.asarray(yf_hat, dtype=np.float64).reshape(-1)
        ycf_hat = np.asarray(ycf_hat, dtype=np.float64).reshape(-1)
        return cls(
            y1=np.where(t == 1, yf_hat, ycf_hat),
            y0=np.where(t == 1, ycf_hat, yf_hat),
        )


def _as_columns(*arrays) -> list[np.ndarray]:
    out = [np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]
    if len({a.shape[0] for a in out}) != 1:
        raise ValueError("metric inputs must have equal lengths")
    return out


def pehe(y1, y0, y1_hat, y0_hat) -> float:
    """Rooted mean squared error of the per-unit effect estimate."""
    if y1 is None or y0 is None:
        raise ValueError("PEHE requires both potential outcomes")
    y1, y0, y1_hat, y0_hat = _as_columns(y1, y0, y1_hat, y0_hat)
    gap = (y1 - y0) - (y1_hat - y0_hat)
    return float(np.sqrt(np.mean(gap**2)))


def ate_error(y1, y0, y1_hat, y0_hat) -> float:
    """Absolute error of the average effect estimate."""
    if y1 is None or y0 is None:
        raise ValueError("PEHE requires both potential outcomes")
    y1, y0, y1_hat, y0_hat = _as_columns(y1, y0, y1_hat, y0_hat)
    return float(abs(np.mean(y1 - y0) - np.mean(y1_hat - y0_hat)))


def policy_risk(yf, t, ite_hat, e=None, restrict_to_randomized: bool = True) -> float:
    """1 - expected outcome of treating exactly the units with positive
    predicted effect.

    Evaluated over the randomized subsample (e=1) by default.  Conditional
    means over empty treatment/policy intersections contribute 0 with their
    probability weight.
    """
    yf, t, ite_hat = _as_columns(yf, t, ite_hat)
    if e is not None and restrict_to_randomized:
        e = np.asarray(e).reshape(-1)
        if e.shape[0] != yf.shape[0]:
            raise ValueError("metric inputs must have equal lengths")
        mask = e == 1
        if not mask.any():
            raise ValueError("policy risk requires units with e=1")
        yf, t, ite_hat = yf[mask], t[mask], ite_hat[mask]
    follow = ite_hat > 0

    def conditional_mean(mask: np.ndarray) -> float:
        return float(yf[mask].mean()) if mask.any() else 0.0

    p_treat = float(follow.mean())
    value = conditional_mean((t == 1) & follow) * p_treat
    value += conditional_mean((t == 0) & ~follow) * (1.0 - p_treat)
    return 1.0 - value


def auc(labels, scores) -> float:
    """Probability that a random positive outscores a random negative,
    ties counted one half."""
    labels, scores = _as_columns(labels, scores)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    n = labels.shape[0]
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC requires both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(n)
    sorted_scores = scores[order]
    i = 0
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- evaluation protocol --------------------------------------------------------


def concat_datasets(a: ObservationalDataset, b: ObservationalDataset) -> ObservationalDataset:
    def cat(u, v):
        if u is None and v is None:
            return None
        if u is None or v is None:
            raise ValueError("cannot concatenate datasets with mismatched columns")
        return np.concatenate([u, v])

    return ObservationalDataset(
        x=np.concatenate([a.x, b.x], axis=0),
        t=cat(a.t, b.t), yf=cat(a.yf, b.yf), ycf=cat(a.ycf, b.ycf),
        mu0=cat(a.mu0, b.mu0), mu1=cat(a.mu1, b.mu1), e=cat(a.e, b.e),
        name=a.name, replication=a.replication,
    )


def infer_metric_set(dataset: ObservationalDataset) -> str:
    """Pick a metric family from the dataset name, else from its columns."""
    name = dataset.name.lower()
    for key in ("ihdp", "jobs", "twins"):
        if key in name:
            return key
    if dataset.e is not None:
        return "jobs"
    binary = bool(np.all((dataset.yf == 0) | (dataset.yf == 1)))
    if binary and dataset.ycf is not None:
        return "twins"
    if dataset.mu0 is not None or dataset.ycf is not None:
        return "ihdp"
    raise ValueError(f"cannot infer a metric set for dataset {dataset.name!r}")


def _true_potential_outcomes(ds: ObservationalDataset) -> tuple[np.ndarray, np.ndarray]:
    if ds.mu0 is not None and ds.mu1 is not None:
        return ds.mu0, ds.mu1
    if ds.ycf is not None:
        return ds.potential_outcomes()
    raise ValueError("PEHE requires both potential outcomes")


def evaluate(
    model,
    train: ObservationalDataset,
    val: ObservationalDataset,
    test: ObservationalDataset,
    regime: str,
    metric_set: str | None = None,
    covariate_scaler=None,
    outcome_scaler=None,
    policy_all_units: bool = False,
) -> dict[str, float]:
    """Score one trained model on one replication's splits.

    Returns the metric row for the requested regime.  Covariates pass
    through the scaler the model was trained with; outcome predictions are
    mapped back to the original scale before any metric sees them.
    """
    if regime == "in-sample":
        ds = concat_datasets(train, val)
    elif regime == "out-sample":
        ds = test
    else:
        raise ValueError(f"regime must be in-sample or out-sample, got {regime!r}")
    if metric_set is None:
        metric_set = infer_metric_set(ds)

    x = covariate_scaler.transform(ds.x) if covariate_scaler is not None else ds.x
    yf_hat, ycf_hat = model.predict_outcomes(x, ds.t)
    if outcome_scaler is not None:
        yf_hat = outcome_scaler.inverse(yf_hat)
        ycf_hat = outcome_scaler.inverse(ycf_hat)
    est = IteEstimate.from_factual(yf_hat, ycf_hat, ds.t)

    if metric_set == "ihdp":
        y0, y1 = _true_potential_outcomes(ds)
        return {
            "pehe": pehe(y1, y0, est.y1, est.y0),
            "ate_error": ate_error(y1, y0, est.y1, est.y0),
        }
    if metric_set == "jobs":
        return {
            "policy_risk": policy_risk(
                ds.yf, ds.t, est.ite, ds.e,
                restrict_to_randomized=not policy_all_units,
            )
        }
    if metric_set == "twins":
        y0, y1 = ds.potential_outcomes()
        labels = np.concatenate([y1, y0])
        scores = np.concatenate([est.y1, est.y0])
        return {"auc": auc(labels, scores)}
    raise ValueError(f"unknown metric set {metric_set!r}")


@dataclass
class EvaluationReport:
    """Per-replication metric rows for one dataset and regime, plus the
    mean and standard error recomputed from those rows on demand."""

    dataset: str
    regime: str
    replications: list[dict] = field(default_factory=list)

    def add(self, row: dict) -> None:
        if self.replications and set(row) != set(self.replications[0]):
            raise ValueError("replication rows must share one metric set")
        self.replications.append(dict(row))

    def aggregate(self) -> dict[str, dict[str, float]]:
        if not self.replications:
            return {}
        out = {}
        for metric in sorted(self.replications[0]):
            values = np.asarray([row[metric] for row in self.replications])
            stderr = (
                float(values.std(ddof=1) / np.sqrt(len(values)))
                if len(values) > 1
                else 0.0
            )
            out[metric] = {"mean": float(values.mean()), "stderr": stderr}
        return out

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "regime": self.regime,
            "replications": self.replications,
            "aggregate": self.aggregate(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "EvaluationReport":
        return cls(
            dataset=payload["dataset"],
            regime=payload["regime"],
            replications=[dict(row) for row in payload["replications"]],
        )
