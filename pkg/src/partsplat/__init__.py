"""Part-aware rigid-motion tracking over point-splat surrogate fields."""

from .config import RunConfig, load_config
from .errors import PartSplatError
from .evaluate import TrackReport, flow_epe, image_metrics, trajectory_metrics
from .field import (
    PartField,
    PartShape,
    SceneSpec,
    SurrogateGaussian,
    center_of_mass,
    load_field,
    save_field,
    standard_scene,
    synth_scene,
)
from .geom import CameraModel, RigidMotion, kabsch_rotation, load_rig, project, ring_rig, save_rig
from .motion import (
    DEConfig,
    PartMotionState,
    build_flow_target,
    estimate_prior_motion_de,
    flow_objective,
    inertia_motion,
    iteration_budget,
)
from .observe import NoiseConfig, ObservationSet, corrupt, ground_truth_flow, render_observations
from .partition import assign_part_ids, build_part_graph, louvain_cluster, visible_set
from .refine import (
    LossWeights,
    RigidityState,
    image_loss,
    local_rigid_loss,
    part_rigid_loss,
    refine_timestamp,
    select_anchors,
    update_rigidity,
)

__version__ = "0.1.0"
