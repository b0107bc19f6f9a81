"""Deterministic simulator for privacy-preserving distributed training.

Compares federated learning (FedSGD / FedAVG) and split learning (vanilla and
U-shaped) against centralized and local baselines on synthetic multi-label
data, with exact-equivalence oracles and per-message communication accounting.
"""

__version__ = "0.1.0"
