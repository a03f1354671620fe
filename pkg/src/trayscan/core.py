"""Domain types shared by every stage of the tray-analysis pipeline.

All types are immutable after construction: numpy payloads are marked
read-only so instances can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FOOD_CLASSES = 8  # background + 7 hyper categories
PLATE_CLASSES = 6  # background + 5 plate categories

FOOD_CATEGORY_NAMES = {
    0: "background",
    1: "soup",
    2: "main course",
    3: "sauce",
    4: "vegetable",
    5: "side dish",
    6: "salad",
    7: "dessert",
}

PLATE_CATEGORY_NAMES = {
    0: "background",
    1: "main plate",
    2: "salad bowl",
    3: "soup bowl",
    4: "dessert bowl",
    5: "packaged container",
}

FOOD_CATEGORY_IDS = {name: idx for idx, name in FOOD_CATEGORY_NAMES.items()}
PLATE_CATEGORY_IDS = {name: idx for idx, name in PLATE_CATEGORY_NAMES.items()}

SOUP, MAIN_COURSE, SAUCE, VEGETABLE, SIDE_DISH, SALAD, DESSERT = range(1, 8)
MAIN_PLATE, SALAD_BOWL, SOUP_BOWL, DESSERT_BOWL, PACKAGED_CONTAINER = range(1, 6)

NUTRIENT_FIELDS = ("calories", "cho", "fat", "protein", "salt", "fiber", "sodium")

PROB_SUM_TOL = 1e-5


class DataError(ValueError):
    """Invalid input data or violated file contract (CLI exit code 2)."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; depth_scale converts stored depth units to meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 0.001

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.depth_scale <= 0:
            raise DataError(f"depth_scale must be positive, got {self.depth_scale}")

    def validate_for(self, width: int, height: int) -> None:
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise DataError(
                f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image"
            )


@dataclass(frozen=True)
class RgbdFrame:
    """Registered color image plus metric depth map (0 marks invalid depth)."""

    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float64 meters, 0 = invalid
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.uint8)
        depth = np.asarray(self.depth, dtype=np.float64)
        if color.ndim != 3 or color.shape[2] != 3:
            raise DataError(f"color must be HxWx3, got {color.shape}")
        if depth.shape != color.shape[:2]:
            raise DataError(
                f"depth shape {depth.shape} does not match color {color.shape[:2]}"
            )
        valid = depth > 0
        if not np.isfinite(depth).all() or (depth < 0).any():
            raise DataError("depth must be finite and non-negative")
        self.intrinsics.validate_for(color.shape[1], color.shape[0])
        object.__setattr__(self, "color", _freeze(color))
        object.__setattr__(self, "depth", _freeze(depth))
        object.__setattr__(self, "_valid", _freeze(valid))

    @property
    def width(self) -> int:
        return self.color.shape[1]

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def valid_depth(self) -> np.ndarray:
        return self._valid


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices for one task domain ("food" or "plate")."""

    labels: np.ndarray  # (H, W) uint8
    domain: str

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DataError(f"label map must be 2-D, got shape {labels.shape}")
        if self.domain not in ("food", "plate"):
            raise DataError(f"unknown label domain {self.domain!r}")
        n_classes = FOOD_CLASSES if self.domain == "food" else PLATE_CLASSES
        if labels.size and labels.max() >= n_classes:
            raise DataError(
                f"{self.domain} label {int(labels.max())} out of range 0..{n_classes - 1}"
            )
        if labels.size and labels.min() < 0:
            raise DataError(f"negative {self.domain} label")
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint8)))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class ProbabilityMaps:
    """Per-pixel class distributions for the food and plate heads."""

    food: np.ndarray  # (H, W, 8)
    plate: np.ndarray  # (H, W, 6)

    def __post_init__(self):
        food = np.asarray(self.food, dtype=np.float64)
        plate = np.asarray(self.plate, dtype=np.float64)
        if food.ndim != 3 or food.shape[2] != FOOD_CLASSES:
            raise DataError(f"food probabilities must be HxWx{FOOD_CLASSES}, got {food.shape}")
        if plate.ndim != 3 or plate.shape[2] != PLATE_CLASSES:
            raise DataError(f"plate probabilities must be HxWx{PLATE_CLASSES}, got {plate.shape}")
        if food.shape[:2] != plate.shape[:2]:
            raise DataError("food and plate maps must share dimensions")
        for name, arr in (("food", food), ("plate", plate)):
            if (arr < 0).any():
                raise DataError(f"negative probability in {name} map")
            sums = arr.sum(axis=2)
            if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
                raise DataError(f"{name} distributions do not sum to 1 within {PROB_SUM_TOL}")
        object.__setattr__(self, "food", _freeze(food))
        object.__setattr__(self, "plate", _freeze(plate))


@dataclass(frozen=True)
class NutrientVector:
    """Nutrient totals: kcal for calories, grams for everything else."""

    calories: float = 0.0
    cho: float = 0.0
    fat: float = 0.0
    protein: float = 0.0
    salt: float = 0.0
    fiber: float = 0.0
    sodium: float = 0.0

    def __post_init__(self):
        for name in NUTRIENT_FIELDS:
            if getattr(self, name) < 0:
                raise DataError(f"nutrient {name} must be non-negative")

    def scaled(self, factor: float) -> "NutrientVector":
        return NutrientVector(**{k: getattr(self, k) * factor for k in NUTRIENT_FIELDS})

    def __add__(self, other: "NutrientVector") -> "NutrientVector":
        return NutrientVector(
            **{k: getattr(self, k) + getattr(other, k) for k in NUTRIENT_FIELDS}
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in NUTRIENT_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "NutrientVector":
        missing = [k for k in NUTRIENT_FIELDS if k not in data]
        if missing:
            raise DataError(f"nutrient vector missing field(s): {', '.join(missing)}")
        return cls(**{k: float(data[k]) for k in NUTRIENT_FIELDS})


def food_category_id(value) -> int:
    if isinstance(value, str):
        if value not in FOOD_CATEGORY_IDS or value == "background":
            raise DataError(f"unknown food category name {value!r}")
        return FOOD_CATEGORY_IDS[value]
    cat = int(value)
    if not 1 <= cat <= 7:
        raise DataError(f"food category {cat} out of range 1..7")
    return cat


def plate_category_id(value) -> int:
    if isinstance(value, str):
        if value not in PLATE_CATEGORY_IDS or value == "background":
            raise DataError(f"unknown plate category name {value!r}")
        return PLATE_CATEGORY_IDS[value]
    cat = int(value)
    if not 1 <= cat <= 5:
        raise DataError(f"plate category {cat} out of range 1..5")
    return cat


@dataclass(frozen=True)
class MealItem:
    """One served item with its recipe nutrient totals."""

    food_category: int
    plate_category: int
    total_nutrients: NutrientVector
    served_weight: float  # grams

    def __post_init__(self):
        object.__setattr__(self, "food_category", food_category_id(self.food_category))
        object.__setattr__(self, "plate_category", plate_category_id(self.plate_category))
        if self.served_weight <= 0:
            raise DataError(f"served weight must be positive, got {self.served_weight}")


@dataclass(frozen=True)
class FrameRef:
    """Paths making up one captured frame of a meal directory."""

    color_path: Path
    depth_path: Path
    food_annotation: Path | None = None
    plate_annotation: Path | None = None


@dataclass(frozen=True)
class MealRecord:
    """A meal: its served items plus before/after frame references."""

    meal_id: str
    items: tuple[MealItem, ...]
    before: FrameRef | None = None
    after: FrameRef | None = None

    def __post_init__(self):
        if not self.items:
            raise DataError("meal has no items")
        object.__setattr__(self, "items", tuple(self.items))
        if self.after is not None and self.before is None:
            raise DataError(f"meal {self.meal_id}: after frame present without before frame")


@dataclass(frozen=True)
class PlateModel:
    """Surface-of-revolution radial height profile, rim plane at height 0.

    Heights are measured downward from the rim plane, so interior samples
    are <= 0; radius samples must be strictly increasing.
    """

    category: int
    rim_radius: float
    profile: np.ndarray = field(repr=False)  # (K, 2) of (radius m, height m)

    def __post_init__(self):
        object.__setattr__(self, "category", plate_category_id(self.category))
        profile = np.asarray(self.profile, dtype=np.float64)
        if profile.ndim != 2 or profile.shape[1] != 2 or profile.shape[0] < 2:
            raise DataError("plate profile needs at least 2 (radius, height) samples")
        radii, heights = profile[:, 0], profile[:, 1]
        if (np.diff(radii) <= 0).any():
            raise DataError("plate profile radii must be strictly increasing")
        if (heights > 0).any():
            raise DataError("plate profile heights must be <= 0 (below the rim plane)")
        if self.rim_radius <= 0:
            raise DataError("rim radius must be positive")
        object.__setattr__(self, "profile", _freeze(profile))

    def height_at(self, radius) -> np.ndarray:
        """Interior height (<= 0) at radial distance(s); 0 at/past the rim."""
        r = np.asarray(radius, dtype=np.float64)
        z = np.interp(r, self.profile[:, 0], self.profile[:, 1])
        return np.where(r >= self.rim_radius, 0.0, z)
