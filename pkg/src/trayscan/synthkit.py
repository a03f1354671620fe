"""Synthetic RGB-D tray scenes with analytic ground truth.

Scenes are ray-cast against closed-form surfaces: a (possibly tilted) tray
plane, recessed rotationally-symmetric plates (flat floor + conical wall),
and food shapes (spherical cap, box, cone) resting on plate floors. Every
surface has an exact intersection, so depth maps, label maps and item
volumes are analytic; sensor noise is applied only after truth extraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    CameraIntrinsics,
    DataError,
    LabelMap,
    MealItem,
    MealRecord,
    NutrientVector,
    PACKAGED_CONTAINER,
    PlateModel,
    RgbdFrame,
    SALAD,
    SAUCE,
)
from . import dataio
from .volumetry import Plane


class SceneSpecError(DataError):
    pass


FOOD_COLORS = {
    1: (235, 180, 60),   # soup
    2: (170, 75, 40),    # main course
    3: (40, 160, 60),    # sauce
    4: (90, 200, 90),    # vegetable
    5: (215, 200, 130),  # side dish
    6: (60, 220, 170),   # salad
    7: (200, 80, 160),   # dessert
}

PLATE_COLORS = {
    1: (240, 240, 240),  # main plate
    2: (200, 215, 235),  # salad bowl
    3: (225, 205, 185),  # soup bowl
    4: (235, 225, 205),  # dessert bowl
    5: (150, 160, 175),  # packaged container
}

TRAY_COLOR = (45, 45, 52)

# plate category -> (rim radius, flat floor radius, interior depth), meters
PLATE_GEOMETRY = {
    1: (0.085, 0.085, 0.0),
    2: (0.050, 0.030, 0.022),
    3: (0.055, 0.032, 0.030),
    4: (0.045, 0.028, 0.015),
    5: (0.040, 0.040, 0.0),
}


def default_plate_models() -> dict[int, PlateModel]:
    models = {}
    for cat, (rim, floor_r, depth) in PLATE_GEOMETRY.items():
        if depth == 0.0:
            profile = [[0.0, 0.0], [rim, 0.0]]
        else:
            profile = [[0.0, -depth], [floor_r, -depth], [rim, 0.0]]
        models[cat] = PlateModel(category=cat, rim_radius=rim, profile=np.asarray(profile))
    return models


@dataclass(frozen=True)
class CapShape:
    """Spherical cap standing on its base plane, dome toward the camera."""

    sphere_radius: float
    height: float

    def __post_init__(self):
        if not 0 < self.height <= self.sphere_radius * 2:
            raise SceneSpecError("cap height must be in (0, 2R]")

    def volume_m3(self) -> float:
        h, r = self.height, self.sphere_radius
        return math.pi * h * h * (3 * r - h) / 3.0

    def footprint_radius(self) -> float:
        h, r = self.height, self.sphere_radius
        return math.sqrt(max(h * (2 * r - h), 0.0))

    def shrunk(self, fraction: float) -> "CapShape | None":
        if fraction == 0.0:
            return self
        target = (1.0 - fraction) * self.volume_m3()
        if target <= 0.0:
            return None
        lo, hi = 0.0, self.height
        # bisection on the cap height; the volume is monotone in h
        for _ in range(200):
            mid = (lo + hi) / 2.0
            if math.pi * mid * mid * (3 * self.sphere_radius - mid) / 3.0 < target:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-9:
                break
        return CapShape(self.sphere_radius, (lo + hi) / 2.0)


@dataclass(frozen=True)
class BoxShape:
    """Axis-aligned slab on its base plane; eaten from the top down."""

    length_x: float
    length_y: float
    height: float

    def __post_init__(self):
        if min(self.length_x, self.length_y, self.height) <= 0:
            raise SceneSpecError("box dimensions must be positive")

    def volume_m3(self) -> float:
        return self.length_x * self.length_y * self.height

    def footprint_radius(self) -> float:
        return math.hypot(self.length_x, self.length_y) / 2.0

    def shrunk(self, fraction: float) -> "BoxShape | None":
        if fraction == 0.0:
            return self
        h = self.height * (1.0 - fraction)
        return BoxShape(self.length_x, self.length_y, h) if h > 0 else None


@dataclass(frozen=True)
class ConeShape:
    """Upright cone, apex toward the camera; shrinks self-similarly."""

    base_radius: float
    height: float

    def __post_init__(self):
        if self.base_radius <= 0 or self.height <= 0:
            raise SceneSpecError("cone dimensions must be positive")

    def volume_m3(self) -> float:
        return math.pi * self.base_radius**2 * self.height / 3.0

    def footprint_radius(self) -> float:
        return self.base_radius

    def shrunk(self, fraction: float) -> "ConeShape | None":
        if fraction == 0.0:
            return self
        if fraction >= 1.0:
            return None
        s = (1.0 - fraction) ** (1.0 / 3.0)
        return ConeShape(self.base_radius * s, self.height * s)


FoodShape = CapShape | BoxShape | ConeShape


@dataclass(frozen=True)
class PlatePlacement:
    category: int
    center: tuple[float, float]  # tray-plane coordinates, meters

    @property
    def rim_radius(self) -> float:
        return PLATE_GEOMETRY[self.category][0]

    @property
    def floor_radius(self) -> float:
        return PLATE_GEOMETRY[self.category][1]

    @property
    def depth(self) -> float:
        return PLATE_GEOMETRY[self.category][2]


@dataclass(frozen=True)
class FoodPlacement:
    shape: FoodShape
    food_category: int
    plate_index: int
    offset: tuple[float, float] = (0.0, 0.0)  # from the plate center
    color: tuple[int, int, int] | None = None

    def rgb(self) -> tuple[int, int, int]:
        return self.color if self.color is not None else FOOD_COLORS[self.food_category]


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 570.0 * width / 640.0
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 400
    height: int = 300
    intrinsics: CameraIntrinsics | None = None
    tray_depth: float = 0.4
    tilt_deg: float = 2.0
    tilt_azimuth_deg: float = 0.0
    plates: tuple[PlatePlacement, ...] = ()
    foods: tuple[FoodPlacement, ...] = ()
    noise_sigma: float = 0.001  # meters
    dropout: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "plates", tuple(self.plates))
        object.__setattr__(self, "foods", tuple(self.foods))
        if self.intrinsics is None:
            object.__setattr__(self, "intrinsics", default_intrinsics(self.width, self.height))
        if self.tray_depth <= 0:
            raise SceneSpecError("tray depth must be positive")
        if not 0 <= self.dropout < 1:
            raise SceneSpecError("dropout must be in [0, 1)")
        colors = {}
        for food in self.foods:
            if not 0 <= food.plate_index < len(self.plates):
                raise SceneSpecError(f"food refers to missing plate {food.plate_index}")
            plate = self.plates[food.plate_index]
            reach = math.hypot(*food.offset) + food.shape.footprint_radius()
            if reach > plate.floor_radius * 0.999:
                raise SceneSpecError(
                    f"shape (category {food.food_category}) does not fit within "
                    f"plate {food.plate_index} floor radius {plate.floor_radius}"
                )
            prev = colors.setdefault(food.food_category, food.rgb())
            if prev != food.rgb():
                raise SceneSpecError("inconsistent colors within one food category")
        by_color = {}
        for cat, rgb in colors.items():
            if rgb in by_color and by_color[rgb] != cat:
                raise SceneSpecError("food colors must be distinct per category")
            by_color[rgb] = cat

    def tray_plane(self) -> Plane:
        t = math.radians(self.tilt_deg)
        a = math.radians(self.tilt_azimuth_deg)
        normal = np.array([math.sin(t) * math.cos(a), math.sin(t) * math.sin(a), -math.cos(t)])
        # plane passes through (0, 0, tray_depth) on the optical axis
        offset = -float(normal @ np.array([0.0, 0.0, self.tray_depth]))
        return Plane(normal=normal / np.linalg.norm(normal), offset=offset)


@dataclass(frozen=True)
class SceneTruth:
    food_labels: LabelMap
    plate_labels: LabelMap
    item_volumes_ml: dict[int, float]  # keyed by food category
    tray: Plane
    plate_poses: tuple[tuple[int, np.ndarray], ...]  # (plate category, 3-D center)


def _cone_surface_t(g, u, plane: Plane, center2d, slope_a, intercept_b,
                    r_lo, r_hi, s_lo, s_hi):
    """Smallest positive ray parameter on the lateral surface s = a*r + b.

    The in-plane offset of a ray point from the axis is t*u - m, with u the
    in-plane ray component and m the in-plane center vector.
    """
    e1, e2 = plane.basis()
    m = center2d[0] * e1 + center2d[1] * e2
    uu = np.einsum("hwc,hwc->hw", u, u)
    um = u @ m
    mm = float(m @ m)
    d = plane.offset
    A = g * g - slope_a**2 * uu
    B = 2.0 * (g * (d - intercept_b) + slope_a**2 * um)
    C = (d - intercept_b) ** 2 - slope_a**2 * mm
    disc = B * B - 4.0 * A * C
    t_best = np.full(g.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-B + sign * sq) / (2.0 * A)
            s = g * t + d
            w = u * t[..., None] - m
            r = np.sqrt(np.einsum("hwc,hwc->hw", w, w))
            valid = (
                (disc >= 0)
                & (t > 0)
                & (r >= r_lo - 1e-12)
                & (r <= r_hi + 1e-12)
                & (s >= s_lo - 1e-12)
                & (s <= s_hi + 1e-12)
                & ((s - intercept_b) * slope_a >= -1e-12)
            )
            t_best = np.where(valid & (t < t_best), t, t_best)
    return t_best


def _sphere_t(dirs, g, plane: Plane, center3d, radius, s_min):
    d = plane.offset
    dd = np.einsum("hwc,hwc->hw", dirs, dirs)
    dc = dirs @ center3d
    cc = float(center3d @ center3d)
    disc = dc * dc - dd * (cc - radius * radius)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (dc - np.sqrt(np.maximum(disc, 0.0))) / dd  # near intersection = dome side
        s = g * t + d
        valid = (disc >= 0) & (t > 0) & (s >= s_min - 1e-12)
    return np.where(valid, t, np.inf)


def _box_t(dirs, g, plane: Plane, center2d, half_extents, s_base, height):
    e1, e2 = plane.basis()
    o = plane.origin()
    alphas = [dirs @ e1, dirs @ e2, g]
    betas = [
        -float(o @ e1) - center2d[0],
        -float(o @ e2) - center2d[1],
        plane.offset - s_base - height / 2.0,
    ]
    halves = [half_extents[0], half_extents[1], height / 2.0]
    t_lo = np.full(g.shape, -np.inf)
    t_hi = np.full(g.shape, np.inf)
    inside_always = np.ones(g.shape, dtype=bool)
    for alpha, beta, half in zip(alphas, betas, halves):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - beta) / alpha
            t2 = (half - beta) / alpha
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        parallel = alpha == 0.0
        ok_parallel = np.abs(beta) <= half
        lo = np.where(parallel, np.where(ok_parallel, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(ok_parallel, np.inf, -np.inf), hi)
        t_lo = np.maximum(t_lo, lo)
        t_hi = np.minimum(t_hi, hi)
        inside_always &= ~parallel | ok_parallel
    valid = (t_lo <= t_hi) & (t_lo > 0) & inside_always
    return np.where(valid, t_lo, np.inf)


def _check_frustum(spec: SceneSpec, plane: Plane):
    intr = spec.intrinsics
    e1, e2 = plane.basis()
    o = plane.origin()
    angles = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)
    for pi, plate in enumerate(spec.plates):
        center = o + plate.center[0] * e1 + plate.center[1] * e2
        ring = center + plate.rim_radius * (
            np.outer(np.cos(angles), e1) + np.outer(np.sin(angles), e2)
        )
        u = ring[:, 0] / ring[:, 2] * intr.fx + intr.cx
        v = ring[:, 1] / ring[:, 2] * intr.fy + intr.cy
        if (u < 0).any() or (u > spec.width - 1).any() or (v < 0).any() or (v > spec.height - 1).any():
            raise SceneSpecError(f"plate {pi} extends outside the camera frustum")


def render_scene(spec: SceneSpec) -> tuple[RgbdFrame, SceneTruth]:
    """Ray-cast the nearest surface per pixel; returns frame plus exact truth."""
    plane = spec.tray_plane()
    _check_frustum(spec, plane)
    intr = spec.intrinsics
    h, w = spec.height, spec.width
    vs, us = np.mgrid[0:h, 0:w]
    dirs = np.dstack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones((h, w))]
    )
    n = plane.normal
    g = dirs @ n
    if (g >= 0).any():
        raise SceneSpecError("tray plane is not fully visible from the camera")
    u_vec = dirs - g[..., None] * n[None, None, :]  # in-plane ray component
    e1, e2 = plane.basis()
    o = plane.origin()

    t_plane = -plane.offset / g
    hit_plane = dirs * t_plane[..., None]
    q = np.dstack([(hit_plane - o) @ e1, (hit_plane - o) @ e2])

    plate_dist = []
    for plate in spec.plates:
        plate_dist.append(
            np.hypot(q[..., 0] - plate.center[0], q[..., 1] - plate.center[1])
        )

    # the tray plane is carved away inside recessed plate rims
    t_tray = t_plane.copy()
    for plate, dist in zip(spec.plates, plate_dist):
        if plate.depth > 0:
            t_tray = np.where(dist <= plate.rim_radius, np.inf, t_tray)

    surfaces = [("tray", -1, t_tray)]
    for pi, plate in enumerate(spec.plates):
        if plate.depth == 0.0:
            continue
        t_floor = (-plate.depth - plane.offset) / g
        w_floor = u_vec * t_floor[..., None] - (
            plate.center[0] * e1 + plate.center[1] * e2
        )
        r_floor = np.sqrt(np.einsum("hwc,hwc->hw", w_floor, w_floor))
        t_floor = np.where((t_floor > 0) & (r_floor <= plate.floor_radius), t_floor, np.inf)
        surfaces.append(("plate", pi, t_floor))
        slope = plate.depth / (plate.rim_radius - plate.floor_radius)
        intercept = -slope * plate.rim_radius  # wall meets the rim at height 0
        t_wall = _cone_surface_t(
            g, u_vec, plane, np.asarray(plate.center),
            slope, intercept, plate.floor_radius, plate.rim_radius, -plate.depth, 0.0,
        )
        surfaces.append(("plate", pi, t_wall))

    for fi, food in enumerate(spec.foods):
        plate = spec.plates[food.plate_index]
        center2d = np.asarray(plate.center) + np.asarray(food.offset)
        s_base = -plate.depth
        shape = food.shape
        if isinstance(shape, CapShape):
            center3d = (
                o
                + center2d[0] * e1
                + center2d[1] * e2
                + (s_base + shape.height - shape.sphere_radius) * n
            )
            t = _sphere_t(dirs, g, plane, center3d, shape.sphere_radius, s_base)
        elif isinstance(shape, BoxShape):
            t = _box_t(
                dirs, g, plane, center2d,
                (shape.length_x / 2.0, shape.length_y / 2.0), s_base, shape.height,
            )
        elif isinstance(shape, ConeShape):
            t = _cone_surface_t(
                g, u_vec, plane, center2d,
                -shape.height / shape.base_radius, s_base + shape.height,
                0.0, shape.base_radius, s_base, s_base + shape.height,
            )
        else:
            raise SceneSpecError(f"unknown shape type {type(shape).__name__}")
        surfaces.append(("food", fi, t))

    stack = np.stack([t for _, _, t in surfaces])
    winner = stack.argmin(axis=0)
    depth = np.take_along_axis(stack, winner[None], axis=0)[0]
    if not np.isfinite(depth).all():
        raise SceneSpecError("some rays hit no surface; check scene extents")

    color = np.empty((h, w, 3), dtype=np.uint8)
    color[:] = TRAY_COLOR
    food_labels = np.zeros((h, w), dtype=np.uint8)
    plate_labels = np.zeros((h, w), dtype=np.uint8)
    # plate label maps cover the full rim footprint, food on top included
    for plate, dist in zip(spec.plates, plate_dist):
        footprint = (dist <= plate.rim_radius) & (plate_labels == 0)
        plate_labels[footprint] = plate.category
        color[footprint] = PLATE_COLORS[plate.category]
    for si, (kind, ref, _) in enumerate(surfaces):
        sel = winner == si
        if kind == "plate":
            color[sel] = PLATE_COLORS[spec.plates[ref].category]
        elif kind == "food":
            color[sel] = spec.foods[ref].rgb()
            food_labels[sel] = spec.foods[ref].food_category

    volumes: dict[int, float] = {}
    for food in spec.foods:
        volumes[food.food_category] = (
            volumes.get(food.food_category, 0.0) + food.shape.volume_m3() * 1e6
        )
    poses = tuple(
        (
            plate.category,
            o + plate.center[0] * e1 + plate.center[1] * e2,
        )
        for plate in spec.plates
    )
    truth = SceneTruth(
        food_labels=LabelMap(food_labels, domain="food"),
        plate_labels=LabelMap(plate_labels, domain="plate"),
        item_volumes_ml=volumes,
        tray=plane,
        plate_poses=poses,
    )

    rng = np.random.default_rng(spec.seed)
    noisy = depth.copy()
    if spec.noise_sigma > 0:
        noisy = noisy + rng.normal(0.0, spec.noise_sigma, size=noisy.shape)
        noisy = np.maximum(noisy, 1e-4)
    if spec.dropout > 0:
        noisy[rng.random(noisy.shape) < spec.dropout] = 0.0
    frame = RgbdFrame(color=color, depth=noisy, intrinsics=intr)
    return frame, truth


def make_eaten_scene(spec: SceneSpec, eaten_fraction: dict[int, float]) -> SceneSpec:
    """Shrink each food shape so its volume drops by the category's fraction."""
    for cat, f in eaten_fraction.items():
        if not 0.0 <= f <= 1.0:
            raise SceneSpecError(f"eaten fraction {f} for category {cat} not in [0, 1]")
    foods = []
    for food in spec.foods:
        f = eaten_fraction.get(food.food_category, 0.0)
        shape = food.shape.shrunk(f)
        if shape is not None:
            foods.append(replace(food, shape=shape))
    return replace(spec, foods=tuple(foods))


_MAIN_PLATE_SLOT_ANGLES = {2: math.pi / 2, 4: 7 * math.pi / 6, 5: 11 * math.pi / 6}
_PLATE_SLOTS = {
    1: (-0.075, 0.0),
    2: (0.085, 0.058),
    3: (0.085, -0.060),
    4: (-0.010, 0.086),
    5: (-0.075, -0.090),
}
_CANONICAL_PLATE = {1: 3, 2: 1, 3: 5, 4: 1, 5: 1, 6: 2, 7: 4}


def _random_shape(rng: np.random.Generator, fit_radius: float,
                  allow_box: bool = False) -> FoodShape:
    # boxes only on wide flat plates: their flat-top silhouette needs a
    # generous pixel footprint for stable volume ratios
    kind = int(rng.integers(0, 3 if allow_box else 2))
    m = fit_radius * 0.97
    if kind == 0:
        h = rng.uniform(0.012, min(0.028, 0.85 * m))
        # base radius stays within the plate floor and at least matches the
        # height so the cap is at most a hemisphere
        a = rng.uniform(max(0.65 * m, h * 1.05), 0.92 * m)
        r = (a * a + h * h) / (2.0 * h)
        return CapShape(sphere_radius=r, height=h)
    if kind == 1:
        return ConeShape(base_radius=m * rng.uniform(0.6, 0.9), height=rng.uniform(0.015, 0.035))
    lx = m * math.sqrt(2.0) * rng.uniform(0.75, 0.92)
    ly = m * math.sqrt(2.0) * rng.uniform(0.75, 0.92)
    return BoxShape(length_x=lx, length_y=ly, height=rng.uniform(0.015, 0.03))


def _meal_spec(rng: np.random.Generator, width: int, height: int, tray_depth: float,
               noise_sigma: float, dropout: float, seed: int) -> tuple[SceneSpec, dict[int, float]]:
    n_items = int(rng.integers(1, 5))
    cats = list(rng.choice(np.arange(1, 8), size=n_items, replace=False))
    if SAUCE in cats and SALAD not in cats:
        cats.append(SALAD)  # the container heuristic needs a salad reference

    plate_cats = sorted({_CANONICAL_PLATE[int(c)] for c in cats})
    plates = []
    plate_index = {}
    for pc in plate_cats:
        slot = np.asarray(_PLATE_SLOTS[pc])
        jitter = rng.uniform(-0.006, 0.006, size=2)
        plates.append(PlatePlacement(category=pc, center=tuple(slot + jitter)))
        plate_index[pc] = len(plates) - 1

    foods = []
    fractions = {}
    for cat in sorted(int(c) for c in cats):
        pc = _CANONICAL_PLATE[cat]
        plate = plates[plate_index[pc]]
        if cat == SAUCE and pc == PACKAGED_CONTAINER:
            shape: FoodShape = BoxShape(0.045, 0.045, 0.02)
            offset = (0.0, 0.0)
        elif pc == 1:
            ang = _MAIN_PLATE_SLOT_ANGLES.get(cat, 0.0)
            offset = (0.045 * math.cos(ang), 0.045 * math.sin(ang))
            shape = _random_shape(rng, plate.floor_radius - 0.045, allow_box=True)
        else:
            offset = (0.0, 0.0)
            shape = _random_shape(rng, plate.floor_radius)
        foods.append(
            FoodPlacement(shape=shape, food_category=cat,
                          plate_index=plate_index[pc], offset=offset)
        )
        fractions[cat] = 1.0 if rng.random() < 0.15 else float(rng.uniform(0.45, 0.9))
    if SAUCE in fractions:
        fractions[SAUCE] = fractions[SALAD]

    spec = SceneSpec(
        width=width,
        height=height,
        tray_depth=tray_depth,
        tilt_deg=float(rng.uniform(1.5, 2.5)),
        tilt_azimuth_deg=float(rng.uniform(0.0, 360.0)),
        plates=tuple(plates),
        foods=tuple(foods),
        noise_sigma=noise_sigma,
        dropout=dropout,
        seed=seed,
    )
    return spec, fractions


def _random_nutrients(rng: np.random.Generator) -> NutrientVector:
    return NutrientVector(
        calories=float(rng.uniform(80, 600)),
        cho=float(rng.uniform(5, 80)),
        fat=float(rng.uniform(2, 40)),
        protein=float(rng.uniform(3, 40)),
        salt=float(rng.uniform(0.2, 3.0)),
        fiber=0.0 if rng.random() < 0.25 else float(rng.uniform(0.5, 8.0)),
        sodium=float(rng.uniform(0.1, 2.0)),
    )


def make_dataset(n_meals: int, seed: int, out_dir, width: int = 400, height: int = 300,
                 noise_sigma: float = 0.001, dropout: float = 0.01,
                 tray_depth: float = 0.4) -> list[Path]:
    """Write n synthetic meals in the standard directory layout plus truth.

    Output tree: out/{intrinsics.json, plate_models.json, dataset.json,
    meal_XXXX/{before,after}/{color,depth,food,plate}.png + meal.json +
    truth.json}. Deterministic in the seed.
    """
    if n_meals < 3:
        raise DataError(f"need at least 3 meals for a splittable dataset, got {n_meals}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    dataio.save_intrinsics(default_intrinsics(width, height), out / "intrinsics.json")
    dataio.save_plate_models(default_plate_models(), out / "plate_models.json")

    meal_dirs = []
    for mi in range(n_meals):
        meal_seed = int(rng.integers(0, 2**31 - 1))
        meal_rng = np.random.default_rng(meal_seed)
        spec, fractions = _meal_spec(
            meal_rng, width, height, tray_depth, noise_sigma, dropout, seed=meal_seed
        )
        geometric = dict(fractions)
        for food in spec.foods:
            # sealed containers keep their lid geometry; only the truth
            # fraction reflects consumption
            if spec.plates[food.plate_index].category == PACKAGED_CONTAINER:
                geometric[food.food_category] = 0.0
        after_spec = replace(make_eaten_scene(spec, geometric), seed=meal_seed + 1)

        before_frame, before_truth = render_scene(spec)
        after_frame, after_truth = render_scene(after_spec)

        items = []
        for food in spec.foods:
            items.append(
                MealItem(
                    food_category=food.food_category,
                    plate_category=spec.plates[food.plate_index].category,
                    total_nutrients=_random_nutrients(meal_rng),
                    served_weight=float(meal_rng.uniform(50, 400)),
                )
            )
        record = MealRecord(meal_id=f"meal_{mi:04d}", items=tuple(items))

        meal_dir = out / record.meal_id
        for sub, frame, truth in (
            ("before", before_frame, before_truth),
            ("after", after_frame, after_truth),
        ):
            d = meal_dir / sub
            d.mkdir(parents=True, exist_ok=True)
            dataio.save_frame(frame, d / "color.png", d / "depth.png")
            dataio.save_label_map(truth.food_labels, d / "food.png")
            dataio.save_label_map(truth.plate_labels, d / "plate.png")
        dataio.write_json_atomic(meal_dir / "meal.json", dataio.meal_record_payload(record))

        consumed = {
            it.food_category: it.total_nutrients.scaled(fractions[it.food_category])
            for it in items
        }
        totals = NutrientVector()
        for vec in consumed.values():
            totals = totals + vec
        truth_payload = {
            "eaten_fractions": {str(c): fractions[c] for c in sorted(fractions)},
            "volumes_before_ml": {
                str(c): before_truth.item_volumes_ml[c]
                for c in sorted(before_truth.item_volumes_ml)
            },
            "volumes_after_ml": {
                str(c): after_truth.item_volumes_ml.get(c, 0.0)
                for c in sorted(before_truth.item_volumes_ml)
            },
            "consumed_nutrients": {str(c): consumed[c].to_dict() for c in sorted(consumed)},
            "consumed_totals": totals.to_dict(),
            "tray_plane": {
                "normal": before_truth.tray.normal.tolist(),
                "offset": before_truth.tray.offset,
            },
            "plate_centers": {
                str(cat): center.tolist() for cat, center in before_truth.plate_poses
            },
        }
        dataio.write_json_atomic(meal_dir / "truth.json", truth_payload)
        meal_dirs.append(meal_dir)

    dataio.write_json_atomic(
        out / "dataset.json",
        {
            "n_meals": n_meals,
            "seed": seed,
            "width": width,
            "height": height,
            "noise_sigma": noise_sigma,
            "dropout": dropout,
            "meals": [d.name for d in meal_dirs],
        },
    )
    return meal_dirs
