"""Plate-context refinement of food segments.

Each food segment is rescored by mixing the segment's accumulated class
marginals with the conditional probability of each food class given the
plate category the segment sits on; the whole segment is relabeled to the
winning class. The conditional table is estimated from training
annotations with add-1 smoothing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import DataError, LabelMap

N_FOOD = 7  # non-background food classes
N_PLATE = 5  # non-background plate classes

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class CooccurrenceTable:
    """Row-stochastic p(food | plate) matrix plus the raw pixel counts."""

    p_food_given_plate: np.ndarray  # (5, 7)
    counts: np.ndarray  # (5, 7) ints

    def __post_init__(self):
        p = np.asarray(self.p_food_given_plate, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if p.shape != (N_PLATE, N_FOOD) or counts.shape != (N_PLATE, N_FOOD):
            raise DataError(f"co-occurrence table must be {N_PLATE}x{N_FOOD}")
        if (p <= 0).any():
            raise DataError("smoothed conditional probabilities must be positive")
        if np.abs(p.sum(axis=1) - 1.0).max() > 1e-9:
            raise DataError("each plate row must sum to 1")
        object.__setattr__(self, "p_food_given_plate", p)
        object.__setattr__(self, "counts", counts)

    def save(self, path) -> None:
        payload = {
            "p_food_given_plate": self.p_food_given_plate.tolist(),
            "counts": self.counts.tolist(),
        }
        from .dataio import write_json_atomic

        write_json_atomic(Path(path), payload)

    @classmethod
    def load(cls, path) -> "CooccurrenceTable":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"missing co-occurrence table: {path}")
        return cls(
            p_food_given_plate=np.asarray(data["p_food_given_plate"], dtype=np.float64),
            counts=np.asarray(data["counts"], dtype=np.int64),
        )


@dataclass(frozen=True)
class ContextParams:
    alpha: float = 0.5  # weight of the accumulated network marginals
    beta: float = 0.5  # weight of the plate-conditional prior
    min_region_px: int = 25  # tuned for 64x64 maps; scale with area

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise DataError("alpha and beta must be >= 0")
        if self.alpha == 0 and self.beta == 0:
            raise DataError("alpha and beta cannot both be zero")

    @classmethod
    def from_dict(cls, d: dict) -> "ContextParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def estimate_cooccurrence(annotated) -> CooccurrenceTable:
    """Count food-class pixels per plate class, then add-1 smooth each row."""
    if not annotated:
        raise DataError("need at least one annotated (food, plate) pair")
    counts = np.zeros((N_PLATE, N_FOOD), dtype=np.int64)
    for food_map, plate_map in annotated:
        food = food_map.labels if hasattr(food_map, "labels") else np.asarray(food_map)
        plate = plate_map.labels if hasattr(plate_map, "labels") else np.asarray(plate_map)
        if food.shape != plate.shape:
            raise DataError("annotation pair dimensions differ")
        on = (food > 0) & (plate > 0)
        np.add.at(counts, (plate[on].astype(np.intp) - 1, food[on].astype(np.intp) - 1), 1)
    smoothed = counts + 1.0
    p = smoothed / smoothed.sum(axis=1, keepdims=True)
    return CooccurrenceTable(p_food_given_plate=p, counts=counts)


def context_scores(prob_sums: np.ndarray, n_pixels: int, plate_row,
                   alpha: float, beta: float) -> np.ndarray:
    """Per-class segment scores mixing summed marginals with the plate prior.

    `prob_sums[k]` is the marginal mass of food class k+1 summed over the
    segment; `plate_row` is p(food | plate) for the supporting plate class,
    or None when the segment sits on plate background.
    """
    scores = alpha * np.asarray(prob_sums, dtype=np.float64)
    if plate_row is not None:
        scores = scores + beta * n_pixels * np.asarray(plate_row, dtype=np.float64)
    return scores


def refine_context(food_probs: np.ndarray, food_labels: LabelMap, plate_labels: LabelMap,
                   table: CooccurrenceTable, params: ContextParams) -> LabelMap:
    """Relabel each food segment by its context score; drop tiny segments.

    Segments are 8-connected components of each non-background food class;
    the supporting plate class is the majority plate label under the segment.
    """
    probs = np.asarray(food_probs, dtype=np.float64)
    food = food_labels.labels if hasattr(food_labels, "labels") else np.asarray(food_labels)
    plate = plate_labels.labels if hasattr(plate_labels, "labels") else np.asarray(plate_labels)
    if probs.shape[:2] != food.shape or food.shape != plate.shape:
        raise DataError("probability map and label maps must share dimensions")

    out = np.zeros_like(food)
    for cls in range(1, N_FOOD + 1):
        comp, n_comp = ndimage.label(food == cls, structure=_EIGHT_CONNECTED)
        for ci in range(1, n_comp + 1):
            mask = comp == ci
            n_px = int(mask.sum())
            if n_px < params.min_region_px:
                continue  # speckle: becomes background
            prob_sums = probs[mask][:, 1:].sum(axis=0)
            majority_plate = int(np.bincount(plate[mask], minlength=N_PLATE + 1).argmax())
            row = (
                table.p_food_given_plate[majority_plate - 1]
                if majority_plate > 0
                else None
            )
            scores = context_scores(prob_sums, n_px, row, params.alpha, params.beta)
            out[mask] = int(scores.argmax()) + 1
    return LabelMap(out, domain="food")
