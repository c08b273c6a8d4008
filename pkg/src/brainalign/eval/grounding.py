"""Box IoU and referring-expression grounding accuracy.

Evaluation is one prediction per queried ground-truth instance.  An instance
is correct at threshold m when the predicted label matches and IoU > m.
Scores are reported for the three leaf salience categories and the two
aggregates S = SC + SO and A = S + I.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .._kernels import paired_iou
from .taxonomy import CATEGORIES, DEFAULT_TAXONOMY, GROUPS, salience_category

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


def _check_box(box) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = (float(c) for c in box)
    if x1 >= x2 or y1 >= y2:
        raise ValueError(f"degenerate box {box}")
    return x1, y1, x2, y2


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    a, b = _check_box(a), _check_box(b)
    return float(paired_iou(np.array([a]), np.array([b]))[0])


@dataclass(frozen=True)
class CategoryScore:
    count: int
    acc: dict[float, float]
    mean_iou: float


@dataclass
class GroundingReport:
    thresholds: tuple[float, ...]
    categories: dict[str, CategoryScore] = field(default_factory=dict)
    ious: Optional[np.ndarray] = None

    def acc(self, category: str, m: float) -> float:
        return self.categories[category].acc[m]

    def rows(self) -> list[dict]:
        out = []
        for cat in CATEGORIES:
            sc = self.categories[cat]
            row = {"category": cat, "count": sc.count, "mean_iou": sc.mean_iou}
            row.update({f"acc@{m:g}": sc.acc[m] for m in self.thresholds})
            out.append(row)
        return out


def grounding_accuracy(
    preds: Sequence[Optional[tuple]],
    gts: Sequence[tuple],
    taxonomy: Optional[dict[str, str]] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> GroundingReport:
    """Score ``preds[i] = (label, box)`` against ``gts[i] = (label, box)``.

    A missing (None), degenerate or mislabeled prediction scores IoU 0.
    """
    taxonomy = DEFAULT_TAXONOMY if taxonomy is None else taxonomy
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth queries")
    n = len(gts)
    cats = np.array([salience_category(label, taxonomy) for label, _ in gts], dtype=object)
    gt_boxes = np.zeros((n, 4))
    pr_boxes = np.zeros((n, 4))
    valid = np.zeros(n, dtype=bool)
    for i, (gt, pr) in enumerate(zip(gts, preds)):
        gt_boxes[i] = _check_box(gt[1])
        if pr is None:
            continue
        x1, y1, x2, y2 = (float(c) for c in pr[1])
        if x1 >= x2 or y1 >= y2:
            continue
        pr_boxes[i] = (x1, y1, x2, y2)
        valid[i] = pr[0].strip().lower() == gt[0].strip().lower()
    ious = np.zeros(n)
    if valid.any():
        ious[valid] = paired_iou(pr_boxes[valid], gt_boxes[valid])

    thresholds = tuple(float(m) for m in thresholds)
    report = GroundingReport(thresholds=thresholds, ious=ious)
    for cat in CATEGORIES:
        mask = np.isin(cats, GROUPS[cat])
        k = int(mask.sum())
        sel = ious[mask]
        report.categories[cat] = CategoryScore(
            count=k,
            acc={m: (float(np.count_nonzero(sel > m)) / k if k else float("nan")) for m in thresholds},
            mean_iou=float(sel.mean()) if k else float("nan"),
        )
    return report
