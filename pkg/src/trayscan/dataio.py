"""File I/O for frames, annotations, meal records, plate models and splits.

File conventions:
  * color: 8-bit RGB PNG
  * depth: 16-bit single-channel PNG in millimeters (depth_scale 0.001)
  * label maps: 8-bit single-channel PNG of class indices
  * meal records / intrinsics / plate models: UTF-8 JSON
  * probability maps: dense binary, 16-byte header (magic, H, W, C) + float32

A meal directory looks like:
  meal_id/{before,after}/{color.png,depth.png,food.png,plate.png} + meal.json
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    CameraIntrinsics,
    DataError,
    FrameRef,
    LabelMap,
    MealItem,
    MealRecord,
    NutrientVector,
    PlateModel,
    RgbdFrame,
)

PROB_MAP_MAGIC = b"PMAP"

# Training/validation/test proportions follow the 232:30:60 meal allocation.
SPLIT_WEIGHTS = (232, 30, 60)


def _write_bytes_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_json_atomic(path: Path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    _write_bytes_atomic(Path(path), text.encode("utf-8"))


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except FileNotFoundError:
        raise DataError(f"missing image file: {path}")
    except Exception as exc:  # corrupt/unsupported file
        raise DataError(f"unreadable image {path}: {exc}")


def _save_png(arr: np.ndarray, path: Path) -> None:
    import io

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    _write_bytes_atomic(Path(path), buf.getvalue())


def load_frame(color_path, depth_path, intrinsics: CameraIntrinsics) -> RgbdFrame:
    """Load a registered color + depth pair; stored depth 0 stays invalid."""
    color = _read_png(Path(color_path))
    depth_raw = _read_png(Path(depth_path))
    if color.ndim != 3 or color.shape[2] < 3:
        raise DataError(f"{color_path} is not a 3-channel color image")
    color = color[:, :, :3].astype(np.uint8)
    if depth_raw.ndim != 2:
        raise DataError(f"{depth_path} is not a single-channel depth image")
    if depth_raw.shape != color.shape[:2]:
        raise DataError(
            f"dimension mismatch: color {color.shape[:2]} vs depth {depth_raw.shape}"
        )
    depth = depth_raw.astype(np.float64) * intrinsics.depth_scale
    return RgbdFrame(color=color, depth=depth, intrinsics=intrinsics)


def save_frame(frame: RgbdFrame, color_path, depth_path) -> None:
    """Write color as 8-bit PNG and depth as 16-bit integer-unit PNG."""
    _save_png(frame.color, Path(color_path))
    units = np.round(frame.depth / frame.intrinsics.depth_scale)
    if units.max(initial=0.0) > np.iinfo(np.uint16).max:
        raise DataError("depth exceeds 16-bit range at this depth_scale")
    _save_png(units.astype(np.uint16), Path(depth_path))


def load_annotation(food_path, plate_path) -> tuple[LabelMap, LabelMap]:
    food = _read_png(Path(food_path))
    plate = _read_png(Path(plate_path))
    if food.shape != plate.shape:
        raise DataError("food and plate annotations must share dimensions")
    return LabelMap(food, domain="food"), LabelMap(plate, domain="plate")


def save_label_map(label_map: LabelMap, path) -> None:
    _save_png(label_map.labels.astype(np.uint8), Path(path))


def load_intrinsics(path) -> CameraIntrinsics:
    data = _read_json(Path(path))
    try:
        return CameraIntrinsics(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            depth_scale=float(data["depth_scale"]),
        )
    except KeyError as exc:
        raise DataError(f"intrinsics file {path} missing field {exc}")


def save_intrinsics(intr: CameraIntrinsics, path) -> None:
    write_json_atomic(
        Path(path),
        {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "depth_scale": intr.depth_scale},
    )


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing file: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}")


def _frame_ref(frame_dir: Path) -> FrameRef | None:
    color = frame_dir / "color.png"
    depth = frame_dir / "depth.png"
    if not color.exists() or not depth.exists():
        return None
    food = frame_dir / "food.png"
    plate = frame_dir / "plate.png"
    return FrameRef(
        color_path=color,
        depth_path=depth,
        food_annotation=food if food.exists() else None,
        plate_annotation=plate if plate.exists() else None,
    )


def load_meal_record(path) -> MealRecord:
    """Parse meal.json (and discover sibling before/after frame dirs)."""
    path = Path(path)
    if path.is_dir():
        path = path / "meal.json"
    data = _read_json(path)
    raw_items = data.get("items", [])
    if not raw_items:
        raise DataError(f"{path}: meal has no items")
    items = []
    for i, raw in enumerate(raw_items):
        try:
            nutrients = NutrientVector.from_dict(raw["nutrients"])
            items.append(
                MealItem(
                    food_category=raw["food_category"],
                    plate_category=raw["plate_category"],
                    total_nutrients=nutrients,
                    served_weight=float(raw["served_weight_g"]),
                )
            )
        except KeyError as exc:
            raise DataError(f"{path}: item {i} missing field {exc}")
    meal_dir = path.parent
    return MealRecord(
        meal_id=str(data.get("meal_id", meal_dir.name)),
        items=tuple(items),
        before=_frame_ref(meal_dir / "before"),
        after=_frame_ref(meal_dir / "after"),
    )


def meal_record_payload(record: MealRecord) -> dict:
    return {
        "meal_id": record.meal_id,
        "items": [
            {
                "food_category": it.food_category,
                "plate_category": it.plate_category,
                "nutrients": it.total_nutrients.to_dict(),
                "served_weight_g": it.served_weight,
            }
            for it in record.items
        ],
    }


def load_plate_models(path) -> dict[int, PlateModel]:
    data = _read_json(Path(path))
    models = {}
    for key, raw in data.items():
        model = PlateModel(
            category=int(raw.get("category", key)),
            rim_radius=float(raw["rim_radius"]),
            profile=np.asarray(raw["profile"], dtype=np.float64),
        )
        models[model.category] = model
    if not models:
        raise DataError(f"{path}: no plate models")
    return models


def save_plate_models(models: dict[int, PlateModel], path) -> None:
    payload = {
        str(cat): {
            "category": m.category,
            "rim_radius": m.rim_radius,
            "profile": m.profile.tolist(),
        }
        for cat, m in sorted(models.items())
    }
    write_json_atomic(Path(path), payload)


def save_probability_map(probs: np.ndarray, path) -> None:
    """Dense binary H x W x C map: 16-byte header then float32 C-order data."""
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise DataError(f"probability map must be 3-D, got shape {probs.shape}")
    h, w, c = probs.shape
    header = PROB_MAP_MAGIC + np.asarray([h, w, c], dtype="<u4").tobytes()
    _write_bytes_atomic(Path(path), header + probs.astype("<f4").tobytes())


def load_probability_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != PROB_MAP_MAGIC:
        raise DataError(f"{path} is not a probability-map file")
    h, w, c = (int(x) for x in np.frombuffer(raw[4:16], dtype="<u4"))
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != h * w * c:
        raise DataError(f"{path}: payload does not match header {h}x{w}x{c}")
    return data.reshape(h, w, c).astype(np.float64)


def split_dataset(records: list, seed: int):
    """Deterministic shuffle + proportional split; train absorbs the remainder."""
    if len(records) < 3:
        raise DataError(f"need at least 3 records to split, got {len(records)}")
    n = len(records)
    total = sum(SPLIT_WEIGHTS)
    n_val = int(round(n * SPLIT_WEIGHTS[1] / total))
    n_test = int(round(n * SPLIT_WEIGHTS[2] / total))
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [records[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


def list_meal_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meal.json").exists())
    if not dirs:
        raise DataError(f"no meal directories under {root}")
    return dirs


def resize_nearest(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize to (height, width); keeps dtype and channels."""
    h, w = arr.shape[:2]
    out_h, out_w = size
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.intp)
    return arr[rows][:, cols]
