"""Contrastive (NT-Xent) and cross-entropy losses with analytic gradients.

Both losses are *summed* over the batch, not averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    batch_pairs: int = 32

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_pairs < 1:
            raise ConfigurationError(f"batch_pairs must be >= 1, got {self.batch_pairs}")

    @property
    def total_views(self) -> int:
        return 2 * self.batch_pairs


def positive_index(n: int) -> np.ndarray:
    """Partner of each view when pairs are interleaved as (0,1), (2,3), ..."""
    return np.arange(n) ^ 1


def nt_xent(embeddings: np.ndarray, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """NT-Xent over 2|B| views ordered as interleaved positive pairs.

    Every view is an anchor once; the positive is its partner and all other
    views except itself enter the denominator. Returns the summed loss and
    its gradient with respect to ``embeddings``.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    n = z.shape[0]
    if z.ndim != 2 or n < 2 or n % 2:
        raise InputError(f"expected an even number (>= 2) of embedding rows, got shape {z.shape}")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InputError("zero-norm embedding: cosine similarity is undefined")
    u = z / norms
    s = (u @ u.T) / cfg.temperature
    np.fill_diagonal(s, -np.inf)
    pos = positive_index(n)
    rows = np.arange(n)
    smax = s.max(axis=1, keepdims=True)
    e = np.exp(s - smax)
    denom = e.sum(axis=1, keepdims=True)
    lse = smax[:, 0] + np.log(denom[:, 0])
    loss = float(np.sum(lse - s[rows, pos]))

    # dL/ds: softmax over candidates minus the positive indicator
    g = e / denom
    g[rows, pos] -= 1.0
    du = (g + g.T) @ u / cfg.temperature
    dz = (du - u * np.sum(u * du, axis=1, keepdims=True)) / norms
    return loss, dz


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """-sum log q_hat[label] over the batch; gradient is q_hat - onehot at the logits."""
    q = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, q.shape[1])
    if labels.size != q.shape[0]:
        raise InputError(f"{labels.size} labels for {q.shape[0]} rows")
    rows = np.arange(q.shape[0])
    loss = float(-np.sum(np.log(q[rows, labels])))
    grad = q.copy()
    grad[rows, labels] -= 1.0
    return loss, grad


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Numerically stable cross-entropy straight from logits.

    Returns (loss, probabilities, gradient at the logits).
    """
    ls = log_softmax(logits)
    labels = _check_labels(labels, ls.shape[1])
    rows = np.arange(ls.shape[0])
    q = np.exp(ls)
    grad = q.copy()
    grad[rows, labels] -= 1.0
    return float(-np.sum(ls[rows, labels])), q, grad


def combined_loss(embeddings, logits, labels, cfg: LossConfig = LossConfig(),
                  contrastive: bool = True):
    """L = L_cl + L_ce (unweighted).

    Returns ``(L, parts, dz, dlogits)`` where ``parts`` holds the two terms.
    The contrastive term attaches at the embeddings, the CE term at the logits.
    """
    if contrastive:
        l_cl, dz = nt_xent(embeddings, cfg)
    else:
        l_cl, dz = 0.0, np.zeros_like(np.asarray(embeddings, dtype=np.float64))
    l_ce, _, dlogits = softmax_cross_entropy(logits, labels)
    return l_cl + l_ce, {"contrastive": l_cl, "cross_entropy": l_ce}, dz, dlogits
