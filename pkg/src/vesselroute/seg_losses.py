"""Soft Dice, Focal Tversky and their weighted main/auxiliary combination.

These are plain functions of a probability map and a binary target, usable
to supervise any external segmenter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, InvalidParameter


@dataclass(frozen=True)
class LossConfig:
    """Weights and constants for :func:`hybrid_total_loss`.

    ``omega`` orders the weights as (Dice main, Focal Tversky main, Dice
    auxiliary, Focal Tversky auxiliary).
    """

    omega: tuple[float, float, float, float] = (1.0, 0.5, 1.0, 0.5)
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 0.75
    epsilon: float = 1e-6

    def validate(self) -> "LossConfig":
        if len(self.omega) != 4 or any(w < 0 for w in self.omega):
            raise InvalidParameter("omega must be four nonnegative weights")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidParameter("alpha and beta must be nonnegative")
        if self.gamma <= 0 or self.epsilon <= 0:
            raise InvalidParameter("gamma and epsilon must be positive")
        return self


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float)
    y = np.asarray(target, dtype=float)
    if p.shape != y.shape:
        raise InvalidInput(f"prediction shape {p.shape} does not match target shape {y.shape}")
    if p.size and (np.nanmin(p) < 0 or np.nanmax(p) > 1 or np.isnan(p).any()):
        raise InvalidInput("predictions must be probabilities in [0, 1]")
    if y.size and not np.isin(y, (0.0, 1.0)).all():
        raise InvalidInput("target must be binary")
    return p, y


def dice_loss(pred, target, epsilon: float = 1e-6) -> float:
    """``1 - (2 sum(p y) + eps) / (sum(p^2) + sum(y^2) + eps)``.

    An empty target with an empty prediction gives 0, since both sides of the
    ratio reduce to ``eps``.
    """
    if epsilon <= 0:
        raise InvalidParameter("epsilon must be positive")
    p, y = _pair(pred, target)
    num = 2.0 * np.sum(p * y) + epsilon
    den = np.sum(p * p) + np.sum(y * y) + epsilon
    return float(1.0 - num / den)


def focal_tversky_loss(pred, target, alpha: float = 0.7, beta: float = 0.3, gamma: float = 0.75,
                       epsilon: float = 1e-6) -> float:
    """``(1 - (TP + eps) / (TP + alpha FP + beta FN + eps)) ** gamma`` with soft counts."""
    LossConfig(alpha=alpha, beta=beta, gamma=gamma, epsilon=epsilon).validate()
    p, y = _pair(pred, target)
    tp = np.sum(p * y)
    fp = np.sum(p * (1.0 - y))
    fn = np.sum((1.0 - p) * y)
    index = (tp + epsilon) / (tp + alpha * fp + beta * fn + epsilon)
    return float(max(1.0 - index, 0.0) ** gamma)


def hybrid_total_loss(pred_main, pred_aux, target, config: LossConfig | None = None) -> float:
    cfg = (config or LossConfig()).validate()
    w1, w2, w3, w4 = cfg.omega
    ft = dict(alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma, epsilon=cfg.epsilon)
    return float(w1 * dice_loss(pred_main, target, cfg.epsilon)
                 + w2 * focal_tversky_loss(pred_main, target, **ft)
                 + w3 * dice_loss(pred_aux, target, cfg.epsilon)
                 + w4 * focal_tversky_loss(pred_aux, target, **ft))
