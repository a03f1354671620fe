"""Nutrient intake accounting and evaluation metrics.

Consumed nutrients scale the recipe totals by the consumed volume ratio;
intake accuracy is reported as per-nutrient MAE/MRE and segmentation
quality as worst-class and pooled F-scores.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DataError,
    FOOD_CATEGORY_NAMES,
    MealItem,
    NUTRIENT_FIELDS,
    NutrientVector,
    PLATE_CATEGORY_NAMES,
)

# Published full-scale benchmark on the original hospital dataset (INIMD).
# Shown in evaluation reports as context only; not reproducible here.
REFERENCE_BENCHMARK = {
    "calories": (63.78, 12.71),
    "cho": (6.37, 12.08),
    "fat": (3.60, 13.78),
    "protein": (2.80, 17.19),
    "salt": (0.74, 15.89),
    "fiber": (1.06, 16.87),
    "sodium": (0.32, 16.47),
}
REFERENCE_BENCHMARK_LABEL = "paper reference (INIMD, not reproduced)"

NUTRIENT_UNITS = {
    "calories": "kcal",
    "cho": "g",
    "fat": "g",
    "protein": "g",
    "salt": "g",
    "fiber": "g",
    "sodium": "g",
}

CSV_HEADER = (
    "meal_id,item,food_category,plate_category,v_before_ml,v_after_ml,ratio,"
    "calories_kcal,cho_g,fat_g,protein_g,salt_g,fiber_g,sodium_g"
)


def consumed_nutrients(item: MealItem, v_before: float, v_after: float) -> NutrientVector:
    """Scale the item's nutrient totals by the clamped consumed-volume ratio."""
    if v_before <= 0:
        raise DataError(f"empty served item (food category {item.food_category})")
    ratio = min(max(1.0 - v_after / v_before, 0.0), 1.0)
    return item.total_nutrients.scaled(ratio)


@dataclass(frozen=True)
class IntakeItem:
    food_category: int
    plate_category: int
    v_before_ml: float
    v_after_ml: float
    ratio: float
    consumed: NutrientVector

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise DataError(f"consumed ratio {self.ratio} outside [0, 1]")


@dataclass(frozen=True)
class IntakeResult:
    meal_id: str
    items: tuple[IntakeItem, ...]
    totals: NutrientVector

    @classmethod
    def from_items(cls, meal_id: str, items) -> "IntakeResult":
        items = tuple(items)
        totals = NutrientVector()
        for it in items:
            totals = totals + it.consumed
        return cls(meal_id=meal_id, items=items, totals=totals)

    def to_payload(self) -> dict:
        return {
            "meal_id": self.meal_id,
            "items": [
                {
                    "food_category": it.food_category,
                    "plate_category": it.plate_category,
                    "v_before_ml": it.v_before_ml,
                    "v_after_ml": it.v_after_ml,
                    "ratio": it.ratio,
                    "consumed": it.consumed.to_dict(),
                }
                for it in self.items
            ],
            "totals": self.totals.to_dict(),
        }

    @classmethod
    def from_payload(cls, data: dict) -> "IntakeResult":
        items = [
            IntakeItem(
                food_category=d["food_category"],
                plate_category=d["plate_category"],
                v_before_ml=d["v_before_ml"],
                v_after_ml=d["v_after_ml"],
                ratio=d["ratio"],
                consumed=NutrientVector.from_dict(d["consumed"]),
            )
            for d in data["items"]
        ]
        return cls.from_items(str(data["meal_id"]), items)


@dataclass(frozen=True)
class EvalReport:
    mae: dict[str, float]
    mre_percent: dict[str, float]
    mre_skipped: dict[str, int]
    n_meals: int
    f_min: float | None = None
    f_sum: float | None = None


def evaluate_intake(predicted, truth) -> EvalReport:
    """Per-nutrient MAE and MRE over aligned per-meal nutrient vectors.

    MRE skips zero-truth components and counts the skips; an all-zero
    nutrient reports MRE 0 with every meal skipped.
    """
    predicted = list(predicted)
    truth = list(truth)
    if not predicted:
        raise DataError("no meals to evaluate")
    if len(predicted) != len(truth):
        raise DataError(f"length mismatch: {len(predicted)} predictions vs {len(truth)} truths")
    mae = {}
    mre = {}
    skipped = {}
    for name in NUTRIENT_FIELDS:
        p = np.array([getattr(v, name) for v in predicted], dtype=np.float64)
        t = np.array([getattr(v, name) for v in truth], dtype=np.float64)
        err = np.abs(p - t)
        mae[name] = float(err.mean())
        nonzero = t != 0
        skipped[name] = int((~nonzero).sum())
        mre[name] = float((err[nonzero] / t[nonzero]).mean() * 100.0) if nonzero.any() else 0.0
    return EvalReport(mae=mae, mre_percent=mre, mre_skipped=skipped, n_meals=len(predicted))


def segmentation_fscores(pred, gt) -> tuple[float, float]:
    """Worst-class and pooled (micro) food F-scores, in percent.

    Per-class F uses Dice overlap; F_min is the minimum over classes present
    in the ground truth, F_sum pools matched overlap across all
    non-background food pixels.
    """
    pred_labels = pred.labels if hasattr(pred, "labels") else np.asarray(pred)
    gt_labels = gt.labels if hasattr(gt, "labels") else np.asarray(gt)
    if pred_labels.shape != gt_labels.shape:
        raise DataError("prediction and ground truth dimensions differ")
    present = sorted(int(c) for c in np.unique(gt_labels) if c != 0)
    if not present:
        raise DataError("ground truth contains no food pixels")
    f_per_class = []
    matched = 0
    pred_food = int((pred_labels != 0).sum())
    gt_food = int((gt_labels != 0).sum())
    for cls in present:
        p = pred_labels == cls
        g = gt_labels == cls
        inter = int((p & g).sum())
        matched += inter
        denom = int(p.sum()) + int(g.sum())
        f_per_class.append(200.0 * inter / denom if denom else 0.0)
    # predicted classes absent from gt still count in the pooled denominator
    # through pred_food
    f_min = min(f_per_class)
    f_sum = 200.0 * matched / (pred_food + gt_food) if (pred_food + gt_food) else 0.0
    return f_min, f_sum


def _fmt(value: float, decimals: int = 3) -> str:
    return f"{value:.{decimals}f}"


def render_intake_report(result: IntakeResult, format: str = "text") -> str:
    """Deterministic per-item intake table with a totals row."""
    if format not in ("text", "csv"):
        raise DataError(f"unknown report format {format!r}")
    rows = []
    for i, it in enumerate(result.items):
        rows.append(
            [
                result.meal_id,
                str(i),
                FOOD_CATEGORY_NAMES[it.food_category],
                PLATE_CATEGORY_NAMES[it.plate_category],
                _fmt(it.v_before_ml),
                _fmt(it.v_after_ml),
                _fmt(it.ratio, 4),
            ]
            + [_fmt(getattr(it.consumed, k)) for k in NUTRIENT_FIELDS]
        )
    totals_vb = sum(it.v_before_ml for it in result.items)
    totals_va = sum(it.v_after_ml for it in result.items)
    rows.append(
        [result.meal_id, "total", "-", "-", _fmt(totals_vb), _fmt(totals_va), ""]
        + [_fmt(getattr(result.totals, k)) for k in NUTRIENT_FIELDS]
    )
    if format == "csv":
        out = io.StringIO()
        out.write(CSV_HEADER + "\r\n")
        for row in rows:
            out.write(",".join(row) + "\r\n")
        return out.getvalue()

    header = CSV_HEADER.split(",")
    widths = [max(len(header[c]), max(len(r[c]) for r in rows)) for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_eval_report(report: EvalReport) -> str:
    """Nutrient-accuracy table plus the published benchmark context row."""
    lines = [f"nutrient intake accuracy over {report.n_meals} meal(s)"]
    lines.append(f"{'nutrient':<10} {'MAE':>12} {'MRE (%)':>9} {'skipped':>8}")
    for name in NUTRIENT_FIELDS:
        unit = NUTRIENT_UNITS[name]
        lines.append(
            f"{name:<10} {report.mae[name]:>9.3f} {unit:<3}"
            f"{report.mre_percent[name]:>8.2f} {report.mre_skipped[name]:>8d}"
        )
    if report.f_min is not None and report.f_sum is not None:
        lines.append(
            f"segmentation (before-frames): F_min {report.f_min:.2f}%  "
            f"F_sum {report.f_sum:.2f}%"
        )
    lines.append("")
    lines.append(REFERENCE_BENCHMARK_LABEL + ":")
    for name in NUTRIENT_FIELDS:
        mae, mre = REFERENCE_BENCHMARK[name]
        unit = NUTRIENT_UNITS[name]
        lines.append(f"{name:<10} {mae:>9.2f} {unit:<3}{mre:>8.2f}")
    lines.append("note: per-class F uses Dice overlap; F_sum pools all food pixels")
    return "\n".join(lines) + "\n"
