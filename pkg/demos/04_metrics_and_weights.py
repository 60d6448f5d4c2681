"""
Evaluation metrics and population weights
=========================================

The three effect metrics and AUC on small hand-checkable inputs, the
group-balancing sample weights, and per-replication aggregation.
"""

import numpy as np

from cbre.metrics import EvaluationReport, ate_error, auc, pehe, policy_risk
from cbre.trainer import compute_weights

# Rooted PEHE penalizes per-unit effect errors quadratically.  True
# effects [2, 0] against a do-nothing predictor give sqrt((4 + 0) / 2).
y1, y0 = np.array([2.0, 0.0]), np.zeros(2)
print("pehe:", pehe(y1, y0, np.zeros(2), np.zeros(2)))

# ATE error only sees the means: true 1.0 vs predicted 0.6.
print("ate error:", ate_error(np.array([1.5, 0.5]), np.zeros(2),
                              np.array([1.0, 0.2]), np.zeros(2)))

# Policy risk treats units with predicted-positive effect and measures the
# factual outcome of agreeing units.  Picking treatment for the group with
# mean outcome 0.8 and control for the group with mean 0.6 leaves a risk
# of 1 - (0.4 + 0.3).
yf = np.array([0.8, 0.8, 0.6, 0.6])
t = np.array([1.0, 1.0, 0.0, 0.0])
ite_hat = np.array([2.0, 0.5, -0.1, -3.0])
print("policy risk:", policy_risk(yf, t, ite_hat))

# The policy depends only on the sign of the estimate, so any positive
# rescaling leaves the risk unchanged.
print("scaled estimates give the same risk:",
      policy_risk(yf, t, 100.0 * ite_hat) == policy_risk(yf, t, ite_hat))

# AUC with ties counted one half; scores [0.1, 0.4, 0.35, 0.8] against
# labels [0, 1, 1, 0] concord on 2 of 4 positive-negative pairs.
print("auc:", auc(np.array([0, 1, 1, 0]), np.array([0.1, 0.4, 0.35, 0.8])))

# Population weights t/(2u) + (1-t)/(2(1-u)) split the prediction loss
# evenly between groups; they always sum to n.
t_imbalanced = np.concatenate([np.ones(139), np.zeros(608)])
u, w = compute_weights(t_imbalanced)
print(f"\ntreated fraction {u:.4f}")
print(f"weight per treated unit {w[0]:.4f}, per control unit {w[-1]:.4f}")
print(f"weights sum to n: {w.sum():.1f} of {len(t_imbalanced)}")
print(f"each group carries half the total: "
      f"{w[t_imbalanced == 1].sum():.1f} vs {w[t_imbalanced == 0].sum():.1f}")

# Replication-level aggregation: mean and standard error per metric.
report = EvaluationReport(dataset="toy", regime="out-sample")
for rep_pehe in (0.52, 0.61, 0.48):
    report.add({"pehe": rep_pehe, "ate_error": rep_pehe / 4})
print("\naggregate over 3 replications:")
for metric, stats in report.aggregate().items():
    print(f"  {metric}: {stats['mean']:.4f} +- {stats['stderr']:.4f}")
