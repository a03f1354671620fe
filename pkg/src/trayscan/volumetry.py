"""Food volumetry from depth: point clouds, the tray plane, plate base
surfaces and prism integration over a Delaunay triangulation.

The 2-D triangulation domain is the tray plane (points projected along the
tray normal), so triangle areas are metric and prism volumes stay correct
for tilted cameras. Surface heights are measured along the tray normal and
floored at zero against the plate base surface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DataError, PACKAGED_CONTAINER, SALAD, PlateModel, RgbdFrame
from .delaunay import TriangulationError, TriMesh, triangulate_indices

log = logging.getLogger(__name__)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
MAX_PLANE_CANDIDATES = 4000
# snap grid for collapsing projected points that stack up on silhouette
# walls; a quarter pixel keeps the area distortion far below 0.1%
_SNAP_PIXEL_FRACTION = 0.25


class VolumetryError(DataError):
    pass


class InsufficientDepthError(VolumetryError):
    pass


class PlaneFitError(VolumetryError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    pixels: np.ndarray  # (N, 2) source (row, col)
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        pixels = np.asarray(self.pixels, dtype=np.int64)
        if len(points) != len(pixels):
            raise DataError("points and pixel indices must align")
        if len(points) and ((points[:, 2] <= 0).any() or not np.isfinite(points).all()):
            raise DataError("cloud points must be finite with positive depth")
        for arr in (points, pixels):
            arr.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "pixels", pixels)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Plane:
    """n . x + offset = 0 with unit normal; camera side has positive height."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise DataError("plane normal must be a unit 3-vector")
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def signed_height(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal + self.offset

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        # for a camera-facing normal this aligns e1 with +x and e2 with +y,
        # so in-plane coordinates follow the image axes
        ref = np.array([0.0, 1.0, 0.0])
        if abs(self.normal @ ref) > 0.9:
            ref = np.array([1.0, 0.0, 0.0])
        e1 = np.cross(self.normal, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(e1, self.normal)
        return e1, e2

    def origin(self) -> np.ndarray:
        return -self.offset * self.normal

    def project_2d(self, points: np.ndarray) -> np.ndarray:
        """In-plane coordinates of points projected along the normal."""
        pts = np.asarray(points, dtype=np.float64)
        heights = self.signed_height(pts)
        in_plane = pts - heights[:, None] * self.normal - self.origin()
        e1, e2 = self.basis()
        return np.column_stack([in_plane @ e1, in_plane @ e2])


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 500
    inlier_threshold: float = 0.002  # meters
    min_inliers: int | None = None  # None: 30% of candidate points
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise DataError("RANSAC iterations must be positive")
        if self.inlier_threshold <= 0:
            raise DataError("inlier threshold must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RansacParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class PlatePose:
    center: np.ndarray  # 3-D point on the tray plane
    orientation: np.ndarray  # unit normal (tray plane normal)

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        orientation = np.asarray(self.orientation, dtype=np.float64)
        if abs(np.linalg.norm(orientation) - 1.0) > 1e-9:
            raise DataError("pose orientation must be unit length")
        for arr in (center, orientation):
            arr.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "orientation", orientation)


def depth_to_cloud(frame: RgbdFrame, mask: np.ndarray | None = None) -> PointCloud:
    """Pinhole back-projection of valid depth pixels (optionally masked)."""
    intr = frame.intrinsics
    select = frame.valid_depth if mask is None else (frame.valid_depth & mask)
    rows, cols = np.nonzero(select)
    z = frame.depth[rows, cols]
    x = (cols - intr.cx) * z / intr.fx
    y = (rows - intr.cy) * z / intr.fy
    return PointCloud(
        points=np.column_stack([x, y, z]),
        pixels=np.column_stack([rows, cols]),
        valid_mask=select,
    )


def _as_points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def fit_tray_plane(cloud, params: RansacParams) -> tuple[Plane, int]:
    """RANSAC plane fit refined by least squares over the consensus set.

    The returned normal faces the camera (negative z component). Raises
    PlaneFitError when no sample reaches the minimum consensus.
    """
    points = _as_points(cloud)
    if len(points) < 3:
        raise PlaneFitError(f"need at least 3 points, got {len(points)}")
    rng = np.random.default_rng(params.seed)
    if len(points) > MAX_PLANE_CANDIDATES:
        candidates = points[rng.choice(len(points), MAX_PLANE_CANDIDATES, replace=False)]
    else:
        candidates = points
    n_cand = len(candidates)
    min_inliers = (
        params.min_inliers
        if params.min_inliers is not None
        else max(3, int(round(0.3 * n_cand)))
    )

    sample_idx = rng.integers(0, n_cand, size=(params.iterations, 3))
    p0 = candidates[sample_idx[:, 0]]
    v1 = candidates[sample_idx[:, 1]] - p0
    v2 = candidates[sample_idx[:, 2]] - p0
    normals = np.cross(v1, v2)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12 * (np.linalg.norm(v1, axis=1) * np.linalg.norm(v2, axis=1) + 1e-300)
    if not ok.any():
        raise PlaneFitError("all samples degenerate (collinear points)")
    normals[ok] /= norms[ok, None]
    offsets = -np.einsum("ij,ij->i", normals, p0)
    dists = np.abs(candidates @ normals.T + offsets[None, :])
    counts = (dists < params.inlier_threshold).sum(axis=0)
    counts[~ok] = -1
    best = int(np.argmax(counts))
    if counts[best] < min_inliers:
        raise PlaneFitError(
            f"best consensus {counts[best]} below minimum {min_inliers}"
        )

    # least-squares refinement over the inliers of the winning sample,
    # evaluated on the full point set
    inliers = points[
        np.abs(points @ normals[best] + offsets[best]) < params.inlier_threshold
    ]
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    normal = vt[2]
    offset = -float(normal @ centroid)
    if normal[2] > 0 or (normal[2] == 0 and offset < 0):
        normal = -normal
        offset = -offset
    plane = Plane(normal=normal, offset=offset)
    final_count = int((np.abs(plane.signed_height(points)) < params.inlier_threshold).sum())
    return plane, final_count


@dataclass(frozen=True)
class PlateBaseSurface:
    """Base height above the tray plane from a plate model and its pose."""

    pose: PlatePose
    model: PlateModel
    plane: Plane

    def radial_distance(self, points: np.ndarray) -> np.ndarray:
        q = self.plane.project_2d(points)
        center = self.plane.project_2d(self.pose.center[None])[0]
        return np.linalg.norm(q - center, axis=1)

    def heights(self, points: np.ndarray) -> np.ndarray:
        """Base height (<= 0) above the tray at each point's plane footprint."""
        return self.model.height_at(self.radial_distance(points))

    def fraction_beyond_rim(self, points: np.ndarray) -> float:
        if len(points) == 0:
            return 0.0
        return float((self.radial_distance(points) >= self.model.rim_radius).mean())


def plate_base_surface(plate_mask: np.ndarray, cloud: PointCloud, model: PlateModel,
                       tray: Plane) -> PlateBaseSurface:
    """Pose the rotationally-symmetric plate model on the tray plane.

    The pose center is the centroid of the plate-mask points projected onto
    the tray plane; the orientation is the tray normal.
    """
    mask = np.asarray(plate_mask, dtype=bool)
    select = mask[cloud.pixels[:, 0], cloud.pixels[:, 1]]
    points = cloud.points[select]
    if len(points) == 0:
        raise VolumetryError("plate mask has no valid-depth pixels")
    q = tray.project_2d(points)
    center2d = q.mean(axis=0)
    e1, e2 = tray.basis()
    center3d = tray.origin() + center2d[0] * e1 + center2d[1] * e2
    return PlateBaseSurface(
        pose=PlatePose(center=center3d, orientation=tray.normal),
        model=model,
        plane=tray,
    )


def prism_volume(points2d: np.ndarray, heights: np.ndarray) -> float:
    """Triangulate the 2-D domain and integrate area x mean vertex height."""
    points2d = np.asarray(points2d, dtype=np.float64)
    heights = np.asarray(heights, dtype=np.float64)
    tris = triangulate_indices(points2d)
    a, b, c = points2d[tris[:, 0]], points2d[tris[:, 1]], points2d[tris[:, 2]]
    areas = 0.5 * np.abs(
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    )
    mean_h = (heights[tris[:, 0]] + heights[tris[:, 1]] + heights[tris[:, 2]]) / 3.0
    return float((areas * mean_h).sum())


def _snap_dedupe(points2d: np.ndarray, heights: np.ndarray, grid: float):
    """Collapse near-coincident projections, keeping the highest surface point.

    Silhouette walls project onto (nearly) the same in-plane location; the
    top point is the food surface there.
    """
    keys = np.round(points2d / grid).astype(np.int64)
    best: dict[tuple[int, int], int] = {}
    for i, (kx, ky) in enumerate(map(tuple, keys)):
        j = best.get((kx, ky))
        if j is None or heights[i] > heights[j]:
            best[(kx, ky)] = i
    idx = np.fromiter(best.values(), dtype=np.int64)
    idx.sort()
    return points2d[idx], heights[idx]


def item_volume(frame: RgbdFrame, food_mask: np.ndarray, base: PlateBaseSurface,
                tray: Plane) -> float:
    """Volume (mL) between the observed food surface and the plate base.

    Each 8-connected piece of the mask is triangulated separately, so
    disjoint pieces contribute exactly the sum of their own volumes.
    """
    mask = np.asarray(food_mask, dtype=bool)
    usable = mask & frame.valid_depth
    if usable.sum() < 3:
        raise InsufficientDepthError(
            f"food mask has {int(usable.sum())} valid-depth pixels, need >= 3"
        )
    grid = _SNAP_PIXEL_FRACTION * float(np.median(frame.depth[usable])) / frame.intrinsics.fx
    comp, n_comp = ndimage.label(usable, structure=_EIGHT_CONNECTED)
    total = 0.0
    for ci in range(1, n_comp + 1):
        cloud = depth_to_cloud(frame, comp == ci)
        if len(cloud) < 3:
            continue
        surface = tray.signed_height(cloud.points)
        heights = np.maximum(surface - base.heights(cloud.points), 0.0)
        q2d, h = _snap_dedupe(tray.project_2d(cloud.points), heights, grid)
        if len(q2d) < 3:
            continue
        try:
            total += prism_volume(q2d, h)
        except TriangulationError:
            log.debug("skipping degenerate food component of %d pixels", len(q2d))
    return total * 1e6


def build_surface_mesh(frame: RgbdFrame, food_mask: np.ndarray, tray: Plane) -> TriMesh:
    """Triangulated 3-D food surface for debug dumps."""
    cloud = depth_to_cloud(frame, np.asarray(food_mask, dtype=bool))
    if len(cloud) < 3:
        raise InsufficientDepthError("not enough valid depth for a surface mesh")
    grid = _SNAP_PIXEL_FRACTION * float(np.median(cloud.points[:, 2])) / frame.intrinsics.fx
    q2d = tray.project_2d(cloud.points)
    heights = tray.signed_height(cloud.points)
    keys = np.round(q2d / grid).astype(np.int64)
    best: dict[tuple[int, int], int] = {}
    for i, key in enumerate(map(tuple, keys)):
        j = best.get(key)
        if j is None or heights[i] > heights[j]:
            best[key] = i
    idx = np.fromiter(best.values(), dtype=np.int64)
    idx.sort()
    tris = triangulate_indices(q2d[idx])
    return TriMesh(vertices=cloud.points[idx], triangles=tris)


def write_mesh_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}" for v in mesh.vertices]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    from .dataio import _write_bytes_atomic

    _write_bytes_atomic(path, ("\n".join(lines) + "\n").encode("ascii"))


@dataclass(frozen=True)
class ItemConsumption:
    consumed_ml: float
    ratio: float


def consumed_volumes(v_before: dict[int, float], v_after: dict[int, float],
                     plate_categories: dict[int, int]) -> dict[int, ItemConsumption]:
    """Consumed volume and ratio per food category, keyed by category.

    Ratios clamp to [0, 1]. Items on packaged containers carry no usable
    depth signal, so their ratio copies the salad item's ratio when a salad
    is present and falls back to 0 with a warning otherwise.
    """
    results: dict[int, ItemConsumption] = {}
    container_items = []
    for cat in sorted(v_before):
        vb = v_before[cat]
        va = v_after.get(cat, 0.0)
        if plate_categories.get(cat) == PACKAGED_CONTAINER:
            container_items.append(cat)
            continue
        if vb <= 0:
            raise VolumetryError(f"empty served item (food category {cat})")
        ratio = min(max(1.0 - va / vb, 0.0), 1.0)
        results[cat] = ItemConsumption(consumed_ml=ratio * vb, ratio=ratio)

    for cat in container_items:
        if SALAD in results:
            ratio = results[SALAD].ratio
        else:
            ratio = 0.0
            log.warning(
                "packaged-container item (food category %d) without a salad item: "
                "assuming nothing consumed", cat,
            )
        results[cat] = ItemConsumption(consumed_ml=ratio * max(v_before[cat], 0.0), ratio=ratio)
    return results
