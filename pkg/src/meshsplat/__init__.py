"""Mesh-driven dynamic Gaussian head avatars with per-frame selective training.

The pipeline: embed Gaussian splats on the triangles of a neutral head
mesh, animate them through per-face local frames of a tracked mesh
sequence, precompute per-frame sets of trainable splats from mesh
deformation, then alternate selective and global optimization against
multi-view images.
"""

__version__ = "0.1.0"

from .avatar import (
    SplatModel,
    SplatWorld,
    densify_and_prune,
    init_splats,
    load_checkpoint,
    realize_world,
    reset_drifting_splats,
    save_checkpoint,
)
from .errors import (
    DegenerateFace,
    DimensionMismatch,
    EmptyMask,
    MeshSplatError,
    MissingAsset,
    NonFiniteLoss,
    SchemaError,
    TopologyMismatch,
)
from .geometry import (
    FrameRig,
    MeshSequence,
    TriMesh,
    build_frame_rig,
    face_frame,
    face_scale_factor,
)
from .renderer import (
    Camera,
    RenderConfig,
    eval_sh,
    rasterize,
    rasterize_backward,
    rasterize_reference,
    world_covariance,
)
from .selection import (
    SelectionConfig,
    SelectionMask,
    build_selection,
    depose_frame,
    face_center_offsets,
    select_faces,
)
