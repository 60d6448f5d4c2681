"""Datasets: CSV ingestion, splits, the selection-bias simulator.

The on-disk schema is a header row `x0,...,x{p-1},t,yf[,ycf][,mu0][,mu1][,e]`
followed by decimal float64 rows; t and e are 0/1.  Replication collections
live in a directory as `<name>/rep_<k>.csv`.  Loading validates everything
loudly: no NaN, binary treatment, both groups present.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWINS_COVARIATE_COUNT = 30

_OPTIONAL_COLUMNS = ("ycf", "mu0", "mu1", "e")


def sigmoid(v: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


@dataclass
class ObservationalDataset:
    """One treatment/outcome table.

    ``yf`` is the observed outcome under the observed ``t``; ``ycf`` (when
    known, e.g. simulated data) is the outcome under 1-t.  ``mu0``/``mu1``
    are noiseless potential outcomes; ``e`` flags membership in a randomized
    subsample.
    """

    x: np.ndarray
    t: np.ndarray
    yf: np.ndarray
    ycf: np.ndarray | None = None
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    e: np.ndarray | None = None
    name: str = "dataset"
    replication: int = 0

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def validate(self, require_both_groups: bool = True) -> None:
        if self.x.ndim != 2 or self.p < 1:
            raise ValueError("covariates must be a non-empty 2-d array")
        n = self.n
        for label, arr in self._columns():
            if arr is None:
                continue
            if arr.shape != (n,) and label != "x":
                raise ValueError(f"{label} must have length {n}, got {arr.shape}")
            if np.isnan(arr).any():
                raise ValueError(f"NaN in {label}")
        if not np.all((self.t == 0) | (self.t == 1)):
            raise ValueError("treatment indicator must be binary")
        if self.e is not None and not np.all((self.e == 0) | (self.e == 1)):
            raise ValueError("e must be binary")
        if (self.mu0 is None) != (self.mu1 is None):
            raise ValueError("mu0 and mu1 must appear together")
        if require_both_groups and len(np.unique(self.t)) < 2:
            raise ValueError("degenerate treatment assignment: only one group present")

    def _columns(self):
        return [
            ("x", self.x), ("t", self.t), ("yf", self.yf), ("ycf", self.ycf),
            ("mu0", self.mu0), ("mu1", self.mu1), ("e", self.e),
        ]

    def subset(self, indices: np.ndarray) -> "ObservationalDataset":
        idx = np.asarray(indices, dtype=np.intp)

        def take(arr):
            return None if arr is None else arr[idx]

        return ObservationalDataset(
            x=self.x[idx], t=self.t[idx], yf=self.yf[idx], ycf=take(self.ycf),
            mu0=take(self.mu0), mu1=take(self.mu1), e=take(self.e),
            name=self.name, replication=self.replication,
        )

    def potential_outcomes(self) -> tuple[np.ndarray, np.ndarray]:
        """(y0, y1) reconstructed from factual/counterfactual columns."""
        if self.ycf is None:
            raise ValueError("requires both potential outcomes")
        y1 = np.where(self.t == 1, self.yf, self.ycf)
        y0 = np.where(self.t == 1, self.ycf, self.yf)
        return y0, y1


# -- CSV schema ---------------------------------------------------------------


def _parse_header(header: list[str]) -> tuple[int, list[str]]:
    p = 0
    while p < len(header) and header[p] == f"x{p}":
        p += 1
    if p == 0:
        raise ValueError("missing mandatory column 'x0'")
    rest = header[p:]
    if not rest or rest[0] != "t":
        raise ValueError("missing mandatory column 't'")
    if len(rest) < 2 or rest[1] != "yf":
        raise ValueError("missing mandatory column 'yf'")
    cursor = 0
    for col in rest[2:]:
        while cursor < len(_OPTIONAL_COLUMNS) and _OPTIONAL_COLUMNS[cursor] != col:
            cursor += 1
        if cursor == len(_OPTIONAL_COLUMNS):
            raise ValueError(f"unexpected column {col!r}")
        cursor += 1
    return p, header


def load_csv(path: str, name: str | None = None, replication: int = 0) -> ObservationalDataset:
    """Parse one dataset file, naming the offending row and column on error.

    Row numbers in messages are file line numbers (the header is line 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file, header row required")
    p, header = _parse_header(rows[0])
    data = {col: [] for col in header}
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(
                f"row {line_no}: expected {len(header)} fields, got {len(row)}"
            )
        for col, cell in zip(header, row):
            try:
                value = float(cell)
            except ValueError:
                raise ValueError(
                    f"row {line_no}, column {col!r}: could not parse {cell!r}"
                ) from None
            if math.isnan(value):
                raise ValueError(f"NaN at row {line_no}, column {col!r}")
            if col in ("t", "e") and value not in (0.0, 1.0):
                raise ValueError(
                    f"row {line_no}, column {col!r}: must be 0 or 1, got {cell!r}"
                )
            data[col].append(value)
    if not data["t"]:
        raise ValueError(f"{path}: no data rows")
    x = np.column_stack([np.asarray(data[f"x{j}"]) for j in range(p)])

    def opt(col):
        return np.asarray(data[col]) if col in data else None

    ds = ObservationalDataset(
        x=x, t=np.asarray(data["t"]), yf=np.asarray(data["yf"]),
        ycf=opt("ycf"), mu0=opt("mu0"), mu1=opt("mu1"), e=opt("e"),
        name=name if name is not None else Path(path).stem,
        replication=replication,
    )
    ds.validate()
    return ds


def save_csv(dataset: ObservationalDataset, path: str) -> None:
    """Write the schema exactly; floats as %.17g so reloads are bit-exact."""
    header = [f"x{j}" for j in range(dataset.p)] + ["t", "yf"]
    optional = [
        (col, arr)
        for col, arr in (
            ("ycf", dataset.ycf), ("mu0", dataset.mu0),
            ("mu1", dataset.mu1), ("e", dataset.e),
        )
        if arr is not None
    ]
    header += [col for col, _ in optional]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [f"{v:.17g}" for v in dataset.x[i]]
            row.append(str(int(dataset.t[i])))
            row.append(f"{dataset.yf[i]:.17g}")
            for col, arr in optional:
                row.append(str(int(arr[i])) if col == "e" else f"{arr[i]:.17g}")
            writer.writerow(row)


# -- replication directories ----------------------------------------------------


def replication_path(root: str, name: str, k: int) -> Path:
    return Path(root) / name / f"rep_{k}.csv"


def save_replication(dataset: ObservationalDataset, root: str) -> Path:
    path = replication_path(root, dataset.name, dataset.replication)
    save_csv(dataset, str(path))
    return path


def load_replications(directory: str) -> list[ObservationalDataset]:
    """Load every rep_<k>.csv in a dataset directory, ordered by k."""
    root = Path(directory)
    found = []
    for path in root.glob("rep_*.csv"):
        m = re.fullmatch(r"rep_(\d+)\.csv", path.name)
        if m:
            found.append((int(m.group(1)), path))
    if not found:
        raise ValueError(f"no replication files (rep_<k>.csv) in {directory}")
    found.sort()
    return [load_csv(str(path), name=root.name, replication=k) for k, path in found]


# -- splits ---------------------------------------------------------------------


@dataclass
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.3, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValueError("fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1.0")


def _stratified_quota(size: int, m_t: int, m_c: int, n: int) -> tuple[int, int]:
    """Split ``size`` slots between groups, proportional to global counts."""
    ideal_t = size * m_t / n
    q_t, q_c = int(ideal_t), int(size * m_c / n)
    if q_t + q_c < size:
        if ideal_t - q_t >= (size * m_c / n) - q_c:
            q_t += 1
        else:
            q_c += 1
    return q_t, q_c


def split(
    dataset: ObservationalDataset, spec: SplitSpec
) -> tuple[ObservationalDataset, ObservationalDataset, ObservationalDataset]:
    """Partition into train/validation/test, stratified by treatment.

    Train and validation sizes are floor(n * fraction); the remainder is the
    test set.  Training and validation must each keep both groups (weights
    and the group-gap losses need them); a tiny test split may end up with
    one group, which evaluation tolerates.
    """
    n = dataset.n
    if n < 10:
        raise ValueError(f"split requires n >= 10, got {n}")
    f_train, f_val, _ = spec.fractions
    n_train = int(n * f_train)
    n_val = int(n * f_val)

    rng = np.random.default_rng(spec.seed)
    queue_t = list(rng.permutation(np.flatnonzero(dataset.t == 1)))
    queue_c = list(rng.permutation(np.flatnonzero(dataset.t == 0)))
    m_t, m_c = len(queue_t), len(queue_c)

    parts = []
    for label, size in (("train", n_train), ("validation", n_val)):
        q_t, q_c = _stratified_quota(size, m_t, m_c, n)
        q_t = min(q_t, len(queue_t))
        q_c = size - q_t
        if q_c > len(queue_c):
            q_t += q_c - len(queue_c)
            q_c = len(queue_c)
        if q_t == 0 or q_c == 0 or q_t > len(queue_t):
            raise ValueError(f"split leaves an empty treatment group in {label}")
        rows = [queue_t.pop() for _ in range(q_t)] + [queue_c.pop() for _ in range(q_c)]
        parts.append(np.sort(np.asarray(rows, dtype=np.intp)))
    parts.append(np.sort(np.asarray(queue_t + queue_c, dtype=np.intp)))
    return tuple(dataset.subset(idx) for idx in parts)


# -- simulators -------------------------------------------------------------------


@dataclass
class TwinsSimConfig:
    w_low: float = -0.1
    w_high: float = 0.1
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.w_low < self.w_high:
            raise ValueError("w_low must be < w_high")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def twins_selection_probabilities(
    x: np.ndarray, w: np.ndarray, noise: np.ndarray
) -> np.ndarray:
    """Per-pair probability sigmoid(w'x + noise) of observing the heavier twin."""
    return sigmoid(np.asarray(x, dtype=np.float64) @ np.asarray(w) + np.asarray(noise))


def simulate_twins_assignment(
    x: np.ndarray, config: TwinsSimConfig, with_params: bool = False
):
    """Draw which twin of each pair is observed, hiding the other.

    One weight vector w ~ Uniform(w_low, w_high)^30 is shared across pairs;
    each pair adds independent Normal(0, noise_std^2) noise to its logit.
    t=1 marks the heavier twin as observed; the returned mask flags the
    hidden record (the complement).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != TWINS_COVARIATE_COUNT:
        raise ValueError(
            f"wrong covariate count: expected {TWINS_COVARIATE_COUNT} columns, "
            f"got {x.shape[1] if x.ndim == 2 else 'non-2d input'}"
        )
    rng = np.random.default_rng(config.seed)
    w = rng.uniform(config.w_low, config.w_high, TWINS_COVARIATE_COUNT)
    noise = rng.normal(0.0, config.noise_std, x.shape[0])
    probs = twins_selection_probabilities(x, w, noise)
    t = (rng.random(x.shape[0]) < probs).astype(np.float64)
    hidden = 1.0 - t
    if with_params:
        return t, hidden, {"w": w.tolist(), "seed": config.seed, "noise_std": config.noise_std}
    return t, hidden


def write_simulator_sidecar(csv_path: str, params: dict) -> None:
    with open(str(csv_path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(params, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_simulator_sidecar(csv_path: str) -> dict:
    with open(str(csv_path) + ".json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def make_synthetic(
    n: int,
    p: int,
    bias_strength: float = 1.0,
    outcome: str = "linear",
    seed: int = 0,
    noise_std: float = 1.0,
    tau_value: float = 2.0,
) -> ObservationalDataset:
    """Ground-truth generator: Gaussian covariates, sigmoid assignment bias,
    linear outcome surface with a known treatment effect.

    ``outcome`` selects the effect shape: "constant" gives tau(x) = tau_value
    everywhere (so the true ATE is exactly tau_value); "linear" adds a
    covariate-dependent term.  y1 - y0 equals mu1 - mu0 exactly because both
    potential outcomes share one noise draw.
    """
    if n < 20:
        raise ValueError(f"n must be >= 20, got {n}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if outcome not in ("linear", "constant"):
        raise ValueError(f"outcome must be linear or constant, got {outcome!r}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    direction = rng.standard_normal(p) / np.sqrt(p)
    t = (rng.random(n) < sigmoid(bias_strength * (x @ direction))).astype(np.float64)
    c0 = rng.standard_normal(p)
    # Noiseless surfaces live on a 2^-30 binary grid so that mu1 - mu0
    # reproduces tau exactly in float arithmetic.
    grid = 2.0**30
    mu0 = np.round(x @ c0 * grid) / grid
    if outcome == "constant":
        tau = np.full(n, tau_value)
    else:
        c1 = rng.standard_normal(p) / np.sqrt(p)
        tau = np.round((x @ c1 + tau_value) * grid) / grid
    mu1 = mu0 + tau
    noise = rng.normal(0.0, noise_std, n)
    y0 = mu0 + noise
    y1 = mu1 + noise
    ds = ObservationalDataset(
        x=x, t=t,
        yf=np.where(t == 1, y1, y0),
        ycf=np.where(t == 1, y0, y1),
        mu0=mu0, mu1=mu1,
        name="synthetic", replication=0,
    )
    ds.validate()
    return ds


# -- covariate standardization ----------------------------------------------------


class ColumnScaler:
    """Per-column shift/scale from training statistics; constant columns
    pass through unscaled."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = mean
        self.std = std

    @classmethod
    def fit(cls, x: np.ndarray) -> "ColumnScaler":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std
