"""Headless 3D annotation engine for IRIS-format RGBD datasets.

Loads datasets, places labeling cuboids with registration solvers,
projects them into every camera shot and exports 2D rectangle / 3D pose
annotations, behind both a CLI and a framed JSON TCP service.
"""

from .bbox import BboxConfig, accept_rect, bbox_for_shot, extract_pixels, min_rect, rpca_filter
from .camera import (
    CameraExtrinsics,
    CameraIntrinsics,
    back_project,
    decode_depth,
    decompose_trs,
    encode_depth,
    fit_aabb_cuboid,
    intrinsics_from_fov,
    project_point,
    projection_matrix,
    recompose_trs,
)
from .dataset import (
    AnnotationSet,
    Dataset,
    Rect,
    Session,
    export_annotations,
    load_dataset,
    load_session,
    save_session,
)
from .elements import LabelingElement
from .errors import Iris3dError
from .meshless import RayProblem, SolverConfig, build_system, place_box, refine_newton, solve_dogbox
from .plyio import PointCloud, TriangleMesh, parse_ply, recompute_normals, serialize_ply
from .raster import MaskImage, rasterize_masks, render_depth
from .registration import (
    AnnealingConfig,
    repair_correspondence,
    softassign_update,
    tps_fit,
    tps_kernel,
    tpsrpm,
    umeyama,
)
from .simplify import optimal_position, simplify, simplify_to_collider, vertex_quadrics
from .snapping import (
    SnapConfig,
    depth_to_points,
    fit_one_class_svm,
    l2_distance,
    reduce_points,
    snap,
    svm_to_gmm,
)

__version__ = "0.1.0"
