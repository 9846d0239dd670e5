"""Classification losses with the output nonlinearity fused in.

Softmax and the binary sigmoid are folded into their cross-entropy losses
(log-sum-exp with max subtraction, softplus via ``log1p``) so the loss and
its logit gradient stay finite for any float64 logits.
"""

from __future__ import annotations

import enum

import numpy as np

from privaudit.errors import DataError

from .layers import _sigmoid


class LossKind(str, enum.Enum):
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"
    SIGMOID_BINARY_CROSS_ENTROPY = "sigmoid_binary_cross_entropy"


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"labels must have shape ({n},), got {labels.shape}")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(
            f"label out of class range [0, {num_classes}): "
            f"min {labels.min()}, max {labels.max()}"
        )
    return labels


def per_example_loss_and_dlogits(
    logits: np.ndarray, labels: np.ndarray, kind: LossKind
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example losses ``(N,)`` and gradients of each example's own loss
    with respect to its logits (no batch reduction)."""
    n = logits.shape[0]
    if kind is LossKind.SOFTMAX_CROSS_ENTROPY:
        if logits.ndim != 2 or logits.shape[1] < 2:
            raise DataError(
                f"softmax cross-entropy needs (N, classes>=2) logits, got {logits.shape}"
            )
        k = logits.shape[1]
        labels = _check_labels(labels, n, k)
        m = logits.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        losses = lse[:, 0] - logits[np.arange(n), labels]
        dlogits = np.exp(logits - lse)
        dlogits[np.arange(n), labels] -= 1.0
        return losses, dlogits

    if kind is LossKind.SIGMOID_BINARY_CROSS_ENTROPY:
        if logits.ndim == 2 and logits.shape[1] == 1:
            z = logits[:, 0]
        elif logits.ndim == 1:
            z = logits
        else:
            raise DataError(
                f"binary cross-entropy needs (N,) or (N, 1) logits, got {logits.shape}"
            )
        labels = _check_labels(labels, n, 2)
        y = labels.astype(np.float64)
        losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        dz = _sigmoid(z) - y
        return losses, dz.reshape(logits.shape)

    raise DataError(f"unknown loss kind {kind!r}")


def predict_proba(logits: np.ndarray, kind: LossKind) -> np.ndarray:
    """Class probabilities: ``(N, K)`` softmax rows, or ``(N,)`` sigmoid
    probabilities of class 1 for the binary loss."""
    if kind is LossKind.SOFTMAX_CROSS_ENTROPY:
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        return e / e.sum(axis=1, keepdims=True)
    z = logits[:, 0] if logits.ndim == 2 else logits
    return _sigmoid(z)
