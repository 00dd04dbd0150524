"""Task losses, all composed from tensor-engine primitives.

Text loss is mean next-token cross-entropy over supervised positions:
logits at position t-1 predict the token at position t. Mask losses
combine a numerically safe per-pixel cross-entropy with a soft dice
overlap term (epsilon 1.0 in numerator and denominator).
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError


def text_loss(logits: Tensor, target_ids: np.ndarray, positions: np.ndarray) -> Tensor:
    """Mean cross-entropy of logits[t-1] against target_ids[t] over positions."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        raise ContractError("text loss needs at least one supervised position")
    if positions.min() < 1 or positions.max() >= logits.shape[0]:
        raise ContractError(f"supervised positions must lie in [1, {logits.shape[0]})")
    targets = np.asarray(target_ids, dtype=np.int64)[positions]
    if (targets < 0).any():
        raise ContractError("supervised positions must hold real token ids")
    logp = ag.log_softmax(logits, axis=-1)
    rows = ag.take_rows(logp, positions - 1)
    onehot = np.zeros((positions.size, logits.shape[1]), dtype=logits.data.dtype)
    onehot[np.arange(positions.size), targets] = 1.0
    picked = ag.sum_(ag.mul(rows, Tensor(onehot)))
    return ag.scale(picked, -1.0 / positions.size)


def _flat_target(target, n: int, dtype) -> np.ndarray:
    arr = np.asarray(target.bits if hasattr(target, "bits") else target)
    flat = arr.reshape(-1).astype(dtype)
    if flat.shape[0] != n:
        raise DimensionError(f"target has {flat.shape[0]} cells, logits have {n}")
    return flat


def mask_ce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with logits: mean(softplus(x) - x * g)."""
    g = _flat_target(target, logits.shape[0], logits.data.dtype)
    return ag.mean(ag.sub(ag.softplus(logits), ag.mul(logits, Tensor(g))))


def dice_loss(logits: Tensor, target, eps: float = 1.0) -> Tensor:
    """1 - (2 * sum(p*g) + eps) / (sum(p) + sum(g) + eps) with p = sigmoid."""
    g = _flat_target(target, logits.shape[0], logits.data.dtype)
    p = ag.sigmoid(logits)
    inter = ag.sum_(ag.mul(p, Tensor(g)))
    num = ag.add(ag.scale(inter, 2.0), eps)
    den = ag.add(ag.add(ag.sum_(p), float(g.sum())), eps)
    return ag.sub(1.0, ag.div(num, den))


def multilabel_bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over classes of binary CE; used by the decoder's attribute head."""
    g = np.asarray(target, dtype=logits.data.dtype)
    if g.shape != logits.shape:
        raise DimensionError(f"class target {g.shape} does not match logits {logits.shape}")
    return ag.mean(ag.sub(ag.softplus(logits), ag.mul(logits, Tensor(g))))
