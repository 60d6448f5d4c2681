"""Cycle-balanced representation learning for counterfactual inference.

A self-contained numpy implementation of adversarially balanced latent
representations with reconstruction and cycle-consistency decoders, a
weighted factual-outcome predictor, the training loop, evaluation metrics,
dataset tooling, and a command-line experiment runner.
"""

__version__ = "0.1.0"
