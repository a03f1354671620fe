"""End-to-end orchestration: segmentation, refinement, volumetry, intake.

Stages per meal: network forward on the before/after frames, CRF
refinement of the food probabilities, plate-context relabeling, per-item
volumetry against the posed plate models, and nutrient scaling by the
consumed-volume ratio. With oracle labels the geometry stages run on the
ground-truth annotations instead of network output.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataio
from .context import ContextParams, CooccurrenceTable, estimate_cooccurrence, refine_context
from .core import (
    CameraIntrinsics,
    DataError,
    LabelMap,
    MealRecord,
    NutrientVector,
    PlateModel,
    RgbdFrame,
)
from .crf import CrfParams, refine_crf
from .intake import EvalReport, IntakeItem, IntakeResult, evaluate_intake, segmentation_fscores
from .segnet import (
    MTFCNet,
    NetworkConfig,
    SegmentationData,
    TrainConfig,
    build_network,
    forward,
    frame_input,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .volumetry import (
    InsufficientDepthError,
    Plane,
    PlateBaseSurface,
    RansacParams,
    build_surface_mesh,
    consumed_volumes,
    depth_to_cloud,
    fit_tray_plane,
    item_volume,
    plate_base_surface,
    write_mesh_obj,
)

log = logging.getLogger(__name__)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)
_MIN_PLATE_COMPONENT_PX = 9


class EmptySegmentationError(RuntimeError):
    """No food found on the before frame (CLI exit code 4)."""


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset_root: str | None = None
    checkpoint: str | None = None
    cooccurrence: str | None = None
    plate_models: str | None = None
    crf: CrfParams = field(default_factory=CrfParams)
    context: ContextParams = field(default_factory=ContextParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    report_format: str = "text"
    use_gt_labels: bool = False
    dump_stages: bool = False

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        cfg = cls()
        for key in ("seed", "dataset_root", "checkpoint", "cooccurrence", "plate_models",
                    "report_format", "use_gt_labels", "dump_stages"):
            if key in data:
                setattr(cfg, key, data[key])
        paths = data.get("paths", {})
        for key in ("dataset_root", "checkpoint", "cooccurrence", "plate_models"):
            if key in paths:
                setattr(cfg, key, paths[key])
        if "crf" in data:
            cfg.crf = CrfParams.from_dict(data["crf"])
        if "context" in data:
            cfg.context = ContextParams.from_dict(data["context"])
        if "ransac" in data:
            cfg.ransac = RansacParams.from_dict(data["ransac"])
        if "train" in data:
            fields = {f.name for f in dataclasses.fields(TrainConfig)}
            cfg.train = TrainConfig(**{k: v for k, v in data["train"].items() if k in fields})
        if "network" in data:
            fields = {f.name for f in dataclasses.fields(NetworkConfig)}
            kwargs = {k: v for k, v in data["network"].items() if k in fields}
            for tup in ("input_size", "base_filters"):
                if tup in kwargs:
                    kwargs[tup] = tuple(kwargs[tup])
            cfg.network = NetworkConfig(**kwargs)
        return cfg


def dataset_intrinsics(root) -> CameraIntrinsics:
    return dataio.load_intrinsics(Path(root) / "intrinsics.json")


def dataset_plate_models(cfg: PipelineConfig, root=None) -> dict[int, PlateModel]:
    path = cfg.plate_models or (Path(root or cfg.dataset_root) / "plate_models.json")
    return dataio.load_plate_models(path)


def load_records(root) -> list[MealRecord]:
    return [dataio.load_meal_record(d) for d in dataio.list_meal_dirs(root)]


def _frame_annotation(ref, size=None) -> tuple[LabelMap, LabelMap]:
    if ref.food_annotation is None or ref.plate_annotation is None:
        raise DataError(f"missing annotations next to {ref.color_path}")
    food, plate = dataio.load_annotation(ref.food_annotation, ref.plate_annotation)
    if size is not None and (food.height, food.width) != size:
        food = LabelMap(dataio.resize_nearest(food.labels, size), domain="food")
        plate = LabelMap(dataio.resize_nearest(plate.labels, size), domain="plate")
    return food, plate


def build_training_arrays(records, intrinsics: CameraIntrinsics,
                          net_cfg: NetworkConfig) -> SegmentationData:
    """Network inputs and labels from every annotated frame of the records."""
    inputs, foods, plates = [], [], []
    for record in records:
        for ref in (record.before, record.after):
            if ref is None:
                continue
            if ref.food_annotation is None or ref.plate_annotation is None:
                raise DataError(f"meal {record.meal_id}: frame lacks annotations")
            frame = dataio.load_frame(ref.color_path, ref.depth_path, intrinsics)
            food, plate = _frame_annotation(ref, size=net_cfg.input_size)
            inputs.append(frame_input(frame, net_cfg))
            foods.append(food.labels.astype(np.int64))
            plates.append(plate.labels.astype(np.int64))
    if not inputs:
        raise DataError("no annotated frames found")
    return SegmentationData(
        inputs=np.stack(inputs),
        food_labels=np.stack(foods),
        plate_labels=np.stack(plates),
    )


def train_on_dataset(cfg: PipelineConfig, out_dir) -> dict:
    """Train the network on the dataset's train split and fit the context table.

    Writes checkpoint.npz, cooccurrence.json and history.json under out_dir.
    """
    root = cfg.dataset_root
    if root is None:
        raise DataError("dataset_root is not configured")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_records(root)
    intrinsics = dataset_intrinsics(root)
    train_recs, val_recs, _ = dataio.split_dataset(records, cfg.seed)
    if not val_recs:
        val_recs = train_recs[-1:]

    table = estimate_cooccurrence(
        [
            _frame_annotation(ref)
            for rec in train_recs
            for ref in (rec.before, rec.after)
            if ref is not None
        ]
    )
    table.save(out / "cooccurrence.json")

    net = build_network(cfg.network, cfg.seed)
    train_data = build_training_arrays(train_recs, intrinsics, cfg.network)
    val_data = build_training_arrays(val_recs, intrinsics, cfg.network)
    net, history = train(net, train_data, val_data, cfg.train, cfg.seed)
    save_checkpoint(net, cfg.seed, out / "checkpoint.npz")
    dataio.write_json_atomic(out / "history.json", history)
    return {
        "checkpoint": str(out / "checkpoint.npz"),
        "cooccurrence": str(out / "cooccurrence.json"),
        "history": history,
    }


@dataclass(frozen=True)
class SegmentedFrame:
    """Stage outputs for one frame, at network and at frame resolution."""

    food_probs: np.ndarray  # network food softmax, net resolution
    food_probs_refined: np.ndarray  # CRF-refined marginals
    food_labels: LabelMap  # context-refined labels at frame resolution
    plate_labels: LabelMap  # plate argmax at frame resolution


def segment_frame(net: MTFCNet, table: CooccurrenceTable, frame: RgbdFrame,
                  cfg: PipelineConfig) -> SegmentedFrame:
    """Forward pass, CRF refinement and context relabeling for one frame."""
    probs = forward(net, frame_input(frame, cfg.network)[None])[0]
    net_size = cfg.network.input_size
    color_small = dataio.resize_nearest(frame.color, net_size)
    refined = refine_crf(probs.food, color_small, cfg.crf)
    plate_small = LabelMap(probs.plate.argmax(axis=2).astype(np.uint8), domain="plate")
    food_small = LabelMap(refined.argmax(axis=2).astype(np.uint8), domain="food")
    food_small = refine_context(refined, food_small, plate_small, table, cfg.context)
    frame_size = (frame.height, frame.width)
    return SegmentedFrame(
        food_probs=probs.food,
        food_probs_refined=refined,
        food_labels=LabelMap(dataio.resize_nearest(food_small.labels, frame_size), domain="food"),
        plate_labels=LabelMap(dataio.resize_nearest(plate_small.labels, frame_size), domain="plate"),
    )


def _labels_for_frame(ref, frame, cfg, net, table) -> tuple[LabelMap, LabelMap, SegmentedFrame | None]:
    if cfg.use_gt_labels:
        food, plate = _frame_annotation(ref)
        return food, plate, None
    seg = segment_frame(net, table, frame, cfg)
    return seg.food_labels, seg.plate_labels, seg


def _pose_for_component(component_mask, frame, plate_labels, category, model, tray):
    own = component_mask & (plate_labels.labels == category)
    mask = own if own.any() else component_mask
    cloud = depth_to_cloud(frame, mask)
    if len(cloud) == 0:
        return None
    return plate_base_surface(mask, cloud, model, tray)


def process_meal(record: MealRecord, intrinsics: CameraIntrinsics,
                 models: dict[int, PlateModel], cfg: PipelineConfig,
                 net: MTFCNet | None = None, table: CooccurrenceTable | None = None,
                 dump_dir=None) -> IntakeResult:
    """Full intake computation for one meal (before and after frames)."""
    if record.before is None:
        raise DataError(f"meal {record.meal_id}: missing before frame")
    if record.after is None:
        raise DataError(f"meal {record.meal_id}: missing after frame")
    if not cfg.use_gt_labels and (net is None or table is None):
        raise DataError("network and co-occurrence table required without oracle labels")

    before = dataio.load_frame(record.before.color_path, record.before.depth_path, intrinsics)
    after = dataio.load_frame(record.after.color_path, record.after.depth_path, intrinsics)
    food_b, plate_b, seg_b = _labels_for_frame(record.before, before, cfg, net, table)
    food_a, plate_a, seg_a = _labels_for_frame(record.after, after, cfg, net, table)

    if not (food_b.labels != 0).any():
        raise EmptySegmentationError(f"meal {record.meal_id}: no food on the before frame")

    tray_b, _ = fit_tray_plane(depth_to_cloud(before), cfg.ransac)
    tray_a, _ = fit_tray_plane(depth_to_cloud(after), cfg.ransac)

    v_before: dict[int, float] = {}
    v_after: dict[int, float] = {}
    plate_of: dict[int, int] = {}
    meshes = {}
    for item in record.items:
        cat = item.food_category
        if cat in plate_of:
            raise DataError(f"meal {record.meal_id}: duplicate food category {cat}")
        plate_of[cat] = item.plate_category
        model = models.get(item.plate_category)
        if model is None:
            raise DataError(f"no plate model for category {item.plate_category}")
        mask_b_all = food_b.labels == cat
        if not mask_b_all.any():
            log.warning("meal %s: item category %d not found on the before frame; skipped",
                        record.meal_id, cat)
            continue
        invalid_frac = float((~before.valid_depth[mask_b_all]).mean())
        if invalid_frac > 0.5:
            log.warning("meal %s: item category %d has %.0f%% invalid depth",
                        record.meal_id, cat, 100 * invalid_frac)

        # items may span several plates of one category: handle each
        # connected plate region separately and sum the volumes
        comp, n_comp = ndimage.label(plate_b.labels == item.plate_category,
                                     structure=_EIGHT_CONNECTED)
        vb_total, va_total = 0.0, 0.0
        covered = np.zeros_like(mask_b_all)
        found = False
        for ci in range(1, n_comp + 1):
            region = comp == ci
            if int(region.sum()) < _MIN_PLATE_COMPONENT_PX:
                continue
            mask_b = mask_b_all & region
            if not mask_b.any():
                continue
            covered |= mask_b
            base_b = _pose_for_component(region, before, plate_b, item.plate_category,
                                         model, tray_b)
            if base_b is None:
                continue
            base_a = _pose_for_component(region, after, plate_a, item.plate_category,
                                         model, tray_a)
            if base_a is None:
                base_a = PlateBaseSurface(pose=base_b.pose, model=model, plane=tray_a)
            try:
                vb_total += item_volume(before, mask_b, base_b, tray_b)
                found = True
            except InsufficientDepthError:
                continue
            mask_a = (food_a.labels == cat) & region  # restricted to the plate region
            if mask_a.any():
                try:
                    va_total += item_volume(after, mask_a, base_a, tray_a)
                except InsufficientDepthError:
                    pass
            if dump_dir is not None:
                try:
                    meshes[cat] = build_surface_mesh(before, mask_b, tray_b)
                except InsufficientDepthError:
                    pass
        stray = mask_b_all & ~covered
        if stray.any():
            log.warning("meal %s: %d food pixels of category %d lie off their plate",
                        record.meal_id, int(stray.sum()), cat)
        if not found:
            log.warning("meal %s: item category %d had no measurable volume; skipped",
                        record.meal_id, cat)
            continue
        v_before[cat] = vb_total
        v_after[cat] = va_total

    if not v_before:
        raise EmptySegmentationError(f"meal {record.meal_id}: no measurable food items")

    consumption = consumed_volumes(v_before, v_after, plate_of)
    items = []
    for item in record.items:
        cat = item.food_category
        if cat not in consumption:
            continue
        cons = consumption[cat]
        items.append(
            IntakeItem(
                food_category=cat,
                plate_category=item.plate_category,
                v_before_ml=v_before[cat],
                v_after_ml=v_after.get(cat, 0.0),
                ratio=cons.ratio,
                consumed=item.total_nutrients.scaled(cons.ratio),
            )
        )
    result = IntakeResult.from_items(record.meal_id, items)

    if dump_dir is not None:
        _dump_stages(Path(dump_dir), record, seg_b, seg_a, food_b, plate_b, food_a,
                     plate_a, tray_b, tray_a, meshes, result)
    return result


def _dump_stages(out, record, seg_b, seg_a, food_b, plate_b, food_a, plate_a,
                 tray_b, tray_a, meshes, result):
    out = out / record.meal_id
    out.mkdir(parents=True, exist_ok=True)
    for name, seg in (("before", seg_b), ("after", seg_a)):
        if seg is not None:
            dataio.save_probability_map(seg.food_probs, out / f"food_probs_{name}.pmap")
            dataio.save_probability_map(
                seg.food_probs_refined, out / f"food_probs_{name}_refined.pmap"
            )
    for name, label_map in (
        ("food_before", food_b), ("plate_before", plate_b),
        ("food_after", food_a), ("plate_after", plate_a),
    ):
        dataio.save_label_map(label_map, out / f"labels_{name}.png")
    dataio.write_json_atomic(
        out / "planes.json",
        {
            "before": {"normal": tray_b.normal.tolist(), "offset": tray_b.offset},
            "after": {"normal": tray_a.normal.tolist(), "offset": tray_a.offset},
        },
    )
    for cat, mesh in sorted(meshes.items()):
        write_mesh_obj(mesh, out / f"surface_before_cat{cat}.obj")
    dataio.write_json_atomic(out / "volumes.json", result.to_payload())


def _truth_totals(meal_dir) -> NutrientVector:
    data = json.loads((Path(meal_dir) / "truth.json").read_text(encoding="utf-8"))
    return NutrientVector.from_dict(data["consumed_totals"])


def evaluate_dataset(cfg: PipelineConfig, out_dir=None,
                     net: MTFCNet | None = None,
                     table: CooccurrenceTable | None = None) -> EvalReport:
    """Aggregate intake accuracy and segmentation F-scores on the test split."""
    root = cfg.dataset_root
    if root is None:
        raise DataError("dataset_root is not configured")
    records = load_records(root)
    intrinsics = dataset_intrinsics(root)
    models = dataset_plate_models(cfg, root)
    _, _, test_recs = dataio.split_dataset(records, cfg.seed)
    if not test_recs:
        raise DataError("test split is empty")
    if not cfg.use_gt_labels:
        if net is None:
            if cfg.checkpoint is None:
                raise DataError("checkpoint required for network evaluation")
            net, _ = load_checkpoint(cfg.checkpoint)
        if table is None:
            if cfg.cooccurrence is None:
                raise DataError("co-occurrence table required for network evaluation")
            table = CooccurrenceTable.load(cfg.cooccurrence)

    predicted, truths = [], []
    f_mins, f_sums = [], []
    for record in sorted(test_recs, key=lambda r: r.meal_id):
        meal_dir = Path(root) / record.meal_id
        result = process_meal(record, intrinsics, models, cfg, net=net, table=table,
                              dump_dir=out_dir if cfg.dump_stages else None)
        predicted.append(result.totals)
        truths.append(_truth_totals(meal_dir))
        frame = dataio.load_frame(record.before.color_path, record.before.depth_path,
                                  intrinsics)
        gt_food, _ = _frame_annotation(record.before)
        pred_food, _, _ = _labels_for_frame(record.before, frame, cfg, net, table)
        f_min, f_sum = segmentation_fscores(pred_food, gt_food)
        f_mins.append(f_min)
        f_sums.append(f_sum)

    base = evaluate_intake(predicted, truths)
    report = EvalReport(
        mae=base.mae,
        mre_percent=base.mre_percent,
        mre_skipped=base.mre_skipped,
        n_meals=base.n_meals,
        f_min=float(np.mean(f_mins)),
        f_sum=float(np.mean(f_sums)),
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        from .intake import render_eval_report

        dataio.write_json_atomic(
            out / "eval.json",
            {
                "mae": report.mae,
                "mre_percent": report.mre_percent,
                "mre_skipped": report.mre_skipped,
                "n_meals": report.n_meals,
                "f_min": report.f_min,
                "f_sum": report.f_sum,
            },
        )
        (out / "eval.txt").write_text(render_eval_report(report), encoding="utf-8")
    return report
