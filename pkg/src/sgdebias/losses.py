"""Classification losses with hand-derived logit gradients.

Every *_and_grad function returns per-sample loss values plus the gradient of
their plain sum with respect to the logits; callers apply batch scaling. Kept
separate from the parameter backward pass so finite-difference checks can
probe each piece.
"""

from __future__ import annotations

import numpy as np

from .core import ConfigError


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, target: int) -> float:
    """Single-sample negative log-likelihood."""
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[int(target)])


def ce_and_grad(logits: np.ndarray, targets: np.ndarray,
                weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (optionally class-weighted) CE and d(sum)/dlogits."""
    b = len(targets)
    ls = log_softmax(logits)
    vals = -ls[np.arange(b), targets]
    grad = np.exp(ls)
    grad[np.arange(b), targets] -= 1.0
    if weights is not None:
        w = weights[targets]
        vals = vals * w
        grad = grad * w[:, None]
    return vals, grad


def focal_and_grad(logits: np.ndarray, targets: np.ndarray, gamma: float = 2.0,
                   alpha: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Focal reshaping of CE: -alpha * (1 - p_t)^gamma * log(p_t).

    gamma=0 and alpha=1 reduce exactly to plain CE. Gradient in logits:
    dL/dl = dL/dp_t * p_t * (onehot_t - softmax).
    """
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    b = len(targets)
    idx = np.arange(b)
    ls = log_softmax(logits)
    s = np.exp(ls)
    logp = ls[idx, targets]
    p = s[idx, targets]
    om = 1.0 - p  # 1 - p_t
    vals = -alpha * om**gamma * logp
    # dL/dp = -alpha * (-gamma * (1-p)^(gamma-1) * log p + (1-p)^gamma / p)
    if gamma == 0.0:
        dl_dp = -alpha / p
    else:
        dl_dp = -alpha * (-gamma * om ** (gamma - 1.0) * logp + om**gamma / p)
    onehot = np.zeros_like(s)
    onehot[idx, targets] = 1.0
    grad = (dl_dp * p)[:, None] * (onehot - s)
    return vals, grad


def predicate_loss_and_grad(logits: np.ndarray, targets: np.ndarray, mode: str,
                            weights: np.ndarray | None = None, gamma: float = 2.0,
                            alpha: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch for the predicate CE family used by training.

    mode "focal" reshapes the CE; mode "reweight" applies class weights; all
    other modes are plain CE.
    """
    if mode == "focal":
        return focal_and_grad(logits, targets, gamma, alpha)
    if mode == "reweight":
        if weights is None:
            raise ConfigError("reweight mode needs class weights")
        return ce_and_grad(logits, targets, weights)
    return ce_and_grad(logits, targets)
