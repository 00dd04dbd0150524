"""Binary mask metrics and grounded-caption matching.

Masks are boolean rasters; IoU uses vectorized bitwise ops. The
conventions for degenerate inputs are pinned here once and the tests
hold an independent per-pixel loop against them:

- IoU of two empty masks is 1.0
- cumulative IoU over a set with zero total union is 1.0
- a missing prediction is represented as an all-false mask, so an empty
  prediction set against nonempty ground truth scores 0
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class SegMask:
    """Binary raster mask at feature or image resolution."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise DimensionError(f"mask must be 2-d, got shape {self.bits.shape}")

    @classmethod
    def from_logits(cls, logits, h: int, w: int) -> "SegMask":
        arr = logits.data if hasattr(logits, "data") else np.asarray(logits)
        return cls(arr.reshape(h, w) > 0.0)  # sigmoid(x) > 0.5 iff x > 0

    @classmethod
    def empty(cls, h: int, w: int) -> "SegMask":
        return cls(np.zeros((h, w), dtype=bool))

    @property
    def h(self):
        return self.bits.shape[0]

    @property
    def w(self):
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def upsample(self, factor: int) -> "SegMask":
        return SegMask(np.repeat(np.repeat(self.bits, factor, axis=0), factor, axis=1))


def _check_pair(a: SegMask, b: SegMask):
    if a.bits.shape != b.bits.shape:
        raise DimensionError(f"mask resolutions differ: {a.bits.shape} vs {b.bits.shape}")


def intersection_union(a: SegMask, b: SegMask) -> tuple[int, int]:
    _check_pair(a, b)
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    return inter, union


def iou(a: SegMask, b: SegMask) -> float:
    inter, union = intersection_union(a, b)
    if union == 0:
        return 1.0
    return inter / union


def ciou(pairs) -> float:
    """Cumulative IoU: sum of intersections over sum of unions."""
    total_i = 0
    total_u = 0
    for a, b in pairs:
        i, u = intersection_union(a, b)
        total_i += i
        total_u += u
    if total_u == 0:
        return 1.0
    return total_i / total_u


def giou_mean(pairs) -> float:
    """Mean per-pair IoU (the 'generalized' average in referring eval)."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("giou_mean needs at least one pair")
    return float(np.mean([iou(a, b) for a, b in pairs]))


def normalize_phrase(text: str) -> str:
    return " ".join(text.lower().split())


def greedy_match(pred_masks, gt_masks):
    """One-to-one matching by descending IoU; ties break to lowest indices.

    Returns a list of (pred_idx, gt_idx, iou) triples.
    """
    if not pred_masks or not gt_masks:
        return []
    scores = np.zeros((len(pred_masks), len(gt_masks)))
    for i, p in enumerate(pred_masks):
        for j, g in enumerate(gt_masks):
            scores[i, j] = iou(p, g)
    matches = []
    used_p, used_g = set(), set()
    order = sorted(
        ((i, j) for i in range(len(pred_masks)) for j in range(len(gt_masks))),
        key=lambda ij: (-scores[ij[0], ij[1]], ij[0], ij[1]),
    )
    for i, j in order:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((i, j, float(scores[i, j])))
    return matches


def gcg_match(preds, gts, iou_thresh: float = 0.5) -> dict:
    """Score interleaved (phrase, mask) predictions against ground truth.

    A matched pair is a true positive when its IoU clears ``iou_thresh``
    and the normalized phrases are equal. ``ap50`` is precision over the
    prediction list at that threshold; ``miou`` averages matched IoU over
    the ground-truth count (unmatched ground truth counts as 0).
    """
    n_pred, n_gt = len(preds), len(gts)
    matches = greedy_match([m for _, m in preds], [m for _, m in gts])
    tp = 0
    iou_sum = 0.0
    for i, j, score in matches:
        iou_sum += score
        if score >= iou_thresh and normalize_phrase(preds[i][0]) == normalize_phrase(gts[j][0]):
            tp += 1
    if n_pred == 0:
        ap50 = 1.0 if n_gt == 0 else 0.0
    else:
        ap50 = tp / n_pred
    if n_gt == 0:
        miou = 1.0 if n_pred == 0 else 0.0
    else:
        miou = iou_sum / n_gt
    return {"ap50": ap50, "miou": miou, "tp": tp, "n_pred": n_pred, "n_gt": n_gt}


# -- evaluation report ---------------------------------------------------------


_AGG_KEYS = {
    "res": ("ciou", "giou", "seg_rate"),
    "semseg": ("ciou", "giou", "seg_rate"),
    "gcg": ("ap50", "miou"),
    "caption": ("exact_acc",),
    "conversation": ("exact_acc",),
    "region_caption": ("exact_acc",),
}


@dataclass
class EvalReport:
    """Per-sample records plus per-task aggregates derived from them."""

    rows: list = field(default_factory=list)

    def add(self, task: str, sample_id, **fields):
        row = {"task": task, "sample": sample_id}
        row.update(fields)
        self.rows.append(row)

    def tasks(self):
        return sorted({r["task"] for r in self.rows})

    def aggregate(self, task: str) -> dict:
        rows = [r for r in self.rows if r["task"] == task]
        if not rows:
            raise ContractError(f"no rows for task {task!r}")
        out = {"n": len(rows)}
        if task in ("res", "semseg"):
            ti = sum(r["inter"] for r in rows)
            tu = sum(r["union"] for r in rows)
            out["ciou"] = 1.0 if tu == 0 else ti / tu
            out["giou"] = float(np.mean([r["iou"] for r in rows]))
            out["seg_rate"] = float(np.mean([1.0 if r["n_seg"] == 1 else 0.0 for r in rows]))
        elif task == "gcg":
            out["ap50"] = float(np.mean([r["ap50"] for r in rows]))
            out["miou"] = float(np.mean([r["miou"] for r in rows]))
        else:
            out["exact_acc"] = float(np.mean([r["exact"] for r in rows]))
        return out

    def aggregates(self) -> dict:
        return {task: self.aggregate(task) for task in self.tasks()}

    def to_lines(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.rows) + "\n"

    @classmethod
    def from_lines(cls, text: str) -> "EvalReport":
        rows = []
        for ln, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                from .errors import ParseError

                raise ParseError(str(exc), line=ln) from exc
        return cls(rows=rows)

    def table(self) -> str:
        lines = [f"{'task':<16}{'n':>5}  metrics"]
        for task in self.tasks():
            agg = self.aggregate(task)
            n = agg.pop("n")
            metrics = "  ".join(f"{k}={v:.4f}" for k, v in sorted(agg.items()))
            lines.append(f"{task:<16}{n:>5}  {metrics}")
        return "\n".join(lines)
