"""RGB-D meal tray analysis.

Library for estimating nutrient intake from before/after meal RGB-D image
pairs: multi-task food/plate segmentation, dense-CRF and plate-context
refinement, plate-aware food volumetry, and recipe-based nutrient
accounting, plus a synthetic scene generator with analytic ground truth.
"""

from .context import ContextParams, CooccurrenceTable, estimate_cooccurrence, refine_context
from .core import (
    CameraIntrinsics,
    DataError,
    LabelMap,
    MealItem,
    MealRecord,
    NutrientVector,
    PlateModel,
    ProbabilityMaps,
    RgbdFrame,
)
from .crf import CrfParams, crf_energy, refine_crf
from .dataio import (
    load_annotation,
    load_frame,
    load_meal_record,
    load_plate_models,
    save_frame,
    split_dataset,
)
from .delaunay import TriMesh, delaunay_triangulate
from .intake import (
    EvalReport,
    IntakeItem,
    IntakeResult,
    consumed_nutrients,
    evaluate_intake,
    render_intake_report,
    segmentation_fscores,
)
from .pipeline import PipelineConfig, evaluate_dataset, process_meal, train_on_dataset
from .segnet import (
    MTFCNet,
    NetworkConfig,
    TrainConfig,
    build_network,
    forward,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .synthkit import SceneSpec, SceneTruth, make_dataset, make_eaten_scene, render_scene
from .volumetry import (
    Plane,
    PlatePose,
    PointCloud,
    RansacParams,
    consumed_volumes,
    depth_to_cloud,
    fit_tray_plane,
    item_volume,
    plate_base_surface,
)

__version__ = "0.1.0"
