"""Perception priors: weave decoder query content into pixel tokens.

For every token-grid cell, each query j gets weight sigmoid(M[j, cell])
scaled by its confidence S[j]; a per-cell normalization over queries
turns these into assignment weights MS [HW, N]. Pixel-centric tokens are
then MS @ Q + F, so each cell carries both its own feature and the
content of the queries that claim it. Object-centric tokens are the
confident queries themselves, ordered by score.

Normalization strategies:

- ``softmax``: per-cell softmax over query products
- ``argmax``: one-hot on the strongest query (ties to the lowest index);
  a hard assignment, deliberately not differentiable
- ``l1norm``: products divided by their per-cell sum (all-zero cells stay zero)
- ``none``: MS is zero and the pixel tokens reduce to F exactly
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .decoder import ObjectQuerySet
from .encoder import FeatureMap
from .errors import ConfigError, DimensionError

STRATEGIES = ("softmax", "argmax", "l1norm", "none")


def mask_score(mask_logits: Tensor, scores: Tensor, strategy: str) -> Tensor:
    """Per-cell query weights MS [HW, N] from mask logits [N, HW] and scores [N]."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown prior strategy {strategy!r}, expected one of {STRATEGIES}")
    n, hw = mask_logits.shape
    if scores.shape != (n,):
        raise DimensionError(f"scores shape {scores.shape} does not match {n} queries")
    if strategy == "none":
        return Tensor(np.zeros((hw, n), dtype=mask_logits.data.dtype))
    probs_t = ag.transpose(ag.sigmoid(mask_logits))  # [HW, N]
    prod = ag.mul(probs_t, scores)
    if strategy == "softmax":
        return ag.softmax(prod, axis=-1)
    if strategy == "argmax":
        arg = prod.data.argmax(axis=-1)
        onehot = np.zeros((hw, n), dtype=mask_logits.data.dtype)
        onehot[np.arange(hw), arg] = 1.0
        return Tensor(onehot)
    # l1norm: rows with an all-zero product stay all-zero
    prod_t = ag.transpose(prod)  # [N, HW]
    rowsum = ag.sum_(prod, axis=-1)  # [HW]
    guard = Tensor((rowsum.data == 0).astype(mask_logits.data.dtype))
    denom = ag.add(rowsum, guard)
    return ag.transpose(ag.div(prod_t, denom))


def embed_prior(f: FeatureMap, qs: ObjectQuerySet, strategy: str) -> Tensor:
    """Pixel-centric tokens MS @ Q + F, shape [HW, C]."""
    hw = f.h * f.w
    if qs.mask_logits.shape[1] != hw:
        raise DimensionError(f"mask logits cover {qs.mask_logits.shape[1]} cells, grid has {hw}")
    if qs.queries.shape[1] != f.c:
        raise DimensionError(f"query width {qs.queries.shape[1]} does not match feature width {f.c}")
    ms = mask_score(qs.mask_logits, qs.scores, strategy)
    return ag.add(ag.matmul(ms, qs.queries), f.data)


@dataclass
class VisualTokens:
    """Pixel-centric grid tokens plus selected object-centric query tokens."""

    pixel: Tensor  # [HW, C]
    object: Tensor  # [K, C], K possibly zero
    indices: np.ndarray  # query indices behind the object rows

    def __post_init__(self):
        if self.object.shape[0] != len(self.indices):
            raise DimensionError("one source index required per object token")

    @property
    def count(self):
        return self.pixel.shape[0] + self.object.shape[0]

    def combined(self) -> Tensor:
        if self.object.shape[0] == 0:
            return self.pixel
        return ag.concat([self.pixel, self.object], axis=0)


def assemble_visual_tokens(f: FeatureMap, qs: ObjectQuerySet, strategy: str,
                           tau: float = 0.3, cap: int = 20) -> VisualTokens:
    """Build the visual token set: all pixel tokens plus the confident queries.

    Queries with score strictly above ``tau`` are kept, ordered by
    descending score (ties to the lower query index) and truncated to
    ``cap`` rows.
    """
    pixel = embed_prior(f, qs, strategy)
    s = qs.scores.data
    keep = np.nonzero(s > tau)[0]
    if keep.size:
        order = np.lexsort((keep, -s[keep]))
        keep = keep[order][:cap]
    if keep.size:
        obj = ag.take_rows(qs.queries, keep)
    else:
        obj = Tensor(np.zeros((0, f.c), dtype=qs.queries.data.dtype))
    return VisualTokens(pixel=pixel, object=obj, indices=keep.astype(np.int64))
