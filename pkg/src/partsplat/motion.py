"""Per-part rigid prior motion from multi-view flow.

A bounded best/1/bin differential-evolution search minimizes the mean
discrepancy between the flow a candidate 6-DoF motion would induce on the
part's rendered pixels and the observed flow.  A center-of-mass /
SVD-registration extrapolation from the two previous frames serves as a
fallback when the flow-driven estimate fails an RGB residual check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    MissingHistory,
    Unobservable,
    ValidationError,
)
from .field import PartField
from .geom import CameraModel, RigidMotion, euler_deg_to_matrix, kabsch_rotation, project_many
from .observe import RenderedView


@dataclass(frozen=True)
class DEConfig:
    """best/1/bin differential evolution settings.

    `population` is a per-dimension multiplier (6 parameters) unless
    `population_absolute` is set.  Search bounds are +-translation_bound (m)
    and +-rotation_bound_deg (deg) per axis.
    """

    strategy: str = "best1bin"
    population: int = 6
    population_absolute: bool = False
    max_iters: int = 25
    translation_bound: float = 0.2
    rotation_bound_deg: float = 20.0
    differential_weight: float = 0.5
    crossover_rate: float = 0.7
    seed: int = 0
    stall_tol: float = 1e-6
    stall_generations: int = 5

    def population_size(self) -> int:
        size = self.population if self.population_absolute else self.population * 6
        return max(4, int(size))

    def validate(self) -> None:
        if self.strategy != "best1bin":
            raise ValidationError(f"unsupported DE strategy {self.strategy!r}")
        if not 0.0 < self.crossover_rate <= 1.0:
            raise ValidationError("crossover_rate must be in (0, 1]")
        if not 0.0 < self.differential_weight < 2.0:
            raise ValidationError("differential_weight must be in (0, 2)")
        if self.max_iters < 1 or self.population_size() < 4:
            raise ValidationError("need max_iters >= 1 and population >= 4")
        if self.translation_bound <= 0 or self.rotation_bound_deg <= 0:
            raise ValidationError("search bounds must be positive")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        hi = np.array([self.translation_bound] * 3 + [self.rotation_bound_deg] * 3)
        return -hi, hi


@dataclass
class PartMotionState:
    """Chosen motion for one part at one frame plus its diagnostics."""

    part_id: int
    motion: RigidMotion
    objective: float
    source: str  # "de" | "inertia" | "identity"
    d_pixel: float
    failed: bool = False


@dataclass
class _ViewTarget:
    camera: CameraModel
    base_uv: np.ndarray  # (P, 2) projections of the unmoved part centers
    base_valid: np.ndarray  # (P,)
    owner_local: np.ndarray  # (M,) index into the part's member list per pixel
    observed: np.ndarray  # (M, 2) observed flow at the part-owned pixels


@dataclass
class PartFlowTarget:
    """Precomputed per-part data for evaluating the flow objective."""

    part_id: int
    centers: np.ndarray  # (P, 3) part centers at t-1
    pivot: np.ndarray  # center of mass at t-1
    views: list

    @property
    def pixel_count(self) -> int:
        return sum(len(v.owner_local) for v in self.views)


def build_flow_target(
    field_prev: PartField,
    part_id: int,
    prev_views: list[RenderedView],
    flows_fwd: np.ndarray,
    cameras,
) -> PartFlowTarget:
    """Collect, per view, the pixels the part owns in the t-1 rendering, the
    primitive owning each pixel and the observed forward flow there.

    prev_views must be renderings of field_prev; flows_fwd is (V, H, W, 2).
    """
    members = field_prev.part_indices(part_id)
    centers = field_prev.centers[members]
    pivot = centers.mean(axis=0)
    local_of = np.full(len(field_prev), -1, dtype=np.int64)
    local_of[members] = np.arange(len(members))

    views = []
    for cam, view, flow in zip(cameras, prev_views, flows_fwd):
        sel = view.part_mask == part_id
        owners = view.owner[sel]
        local = local_of[owners]
        if (local < 0).any():
            raise ValidationError("mask/owner mismatch: pixel owned by another part")
        observed = flow[sel].astype(float)
        uv, _, valid = project_many(cam, centers)
        views.append(_ViewTarget(cam, uv, valid, local, observed))
    return PartFlowTarget(part_id, centers, pivot, views)


def motion_from_vector(x: np.ndarray, pivot: np.ndarray) -> RigidMotion:
    return RigidMotion(x[:3], x[3:], pivot)


def rendered_flow(
    centers: np.ndarray, motion: RigidMotion, camera: CameraModel
) -> tuple[np.ndarray, np.ndarray]:
    """Per-primitive pixel displacement induced by a rigid motion.

    Returns (flow (P, 2), valid (P,)); primitives that project behind the
    camera before or after the motion are invalid and carry NaN flow.
    """
    uv0, _, ok0 = project_many(camera, centers)
    uv1, _, ok1 = project_many(camera, motion.apply(centers))
    valid = ok0 & ok1
    flow = uv1 - uv0
    flow[~valid] = np.nan
    return flow, valid


def _objective_vec(target: PartFlowTarget, x: np.ndarray) -> float:
    rot = euler_deg_to_matrix(x[3:])
    moved = (target.centers - target.pivot) @ rot.T + target.pivot + x[:3]
    total = 0.0
    count = 0
    for view in target.views:
        if len(view.owner_local) == 0:
            continue
        uv1, _, ok1 = project_many(view.camera, moved)
        flow = uv1 - view.base_uv
        good = (view.base_valid & ok1)[view.owner_local]
        if not good.any():
            continue
        diff = flow[view.owner_local[good]] - view.observed[good]
        total += np.sqrt((diff * diff).sum(axis=1)).sum()
        count += int(good.sum())
    return total / count if count else np.inf


def flow_objective(target: PartFlowTarget, motion: RigidMotion) -> float:
    """Mean L2 residual (px) between the motion-induced and observed flow over
    every part-owned pixel in every view; +inf if no view sees the part."""
    x = np.concatenate([motion.delta, motion.omega_deg])
    return _objective_vec(target, x)


def estimate_prior_motion_de(
    target: PartFlowTarget, cfg: DEConfig, seed: int | None = None
) -> tuple[RigidMotion, dict]:
    """Bounded best/1/bin DE over (delta, omega).

    The initial population is uniform in the box with member 0 forced to the
    zero motion.  Greedy selection keeps the best objective non-increasing;
    the search stops early after `stall_generations` generations improving by
    less than `stall_tol`.  Raises Unobservable when no view owns any pixel.
    """
    cfg.validate()
    if target.pixel_count == 0:
        raise Unobservable(f"part {target.part_id} has no mask pixels in any view")

    lo, hi = cfg.bounds()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    pop_size = cfg.population_size()
    pop = rng.uniform(lo, hi, (pop_size, 6))
    pop[0] = 0.0
    energy = np.array([_objective_vec(target, x) for x in pop])
    best = int(np.argmin(energy))

    f_weight = cfg.differential_weight
    stall = 0
    prev_best = energy[best]
    generations = 0
    trace = [float(energy[best])]
    for _ in range(cfg.max_iters):
        generations += 1
        for i in range(pop_size):
            r1, r2 = _pick_two(rng, pop_size, i)
            mutant = np.clip(pop[best] + f_weight * (pop[r1] - pop[r2]), lo, hi)
            cross = rng.random(6) < cfg.crossover_rate
            cross[rng.integers(6)] = True
            trial = np.where(cross, mutant, pop[i])
            e_trial = _objective_vec(target, trial)
            if e_trial <= energy[i]:
                pop[i] = trial
                energy[i] = e_trial
                if e_trial < energy[best]:
                    best = i
        trace.append(float(energy[best]))
        if prev_best - energy[best] < cfg.stall_tol:
            stall += 1
            if stall >= cfg.stall_generations:
                break
        else:
            stall = 0
        prev_best = energy[best]

    motion = motion_from_vector(pop[best], target.pivot)
    info = {"objective": float(energy[best]), "generations": generations, "trace": trace}
    return motion, info


def _pick_two(rng, size: int, exclude: int) -> tuple[int, int]:
    r1 = int(rng.integers(size - 1))
    if r1 >= exclude:
        r1 += 1
    r2 = int(rng.integers(size - 2))
    for taken in sorted((exclude, r1)):
        if r2 >= taken:
            r2 += 1
    return r1, r2


def inertia_motion(centers_prev: np.ndarray, centers_prev2: np.ndarray) -> RigidMotion:
    """Extrapolated motion: center-of-mass offset for translation, SVD
    point-set registration of centered offsets for rotation (identity for
    parts smaller than 3 or degenerate geometry).  Pivot is the t-1 center of
    mass."""
    if centers_prev is None or centers_prev2 is None:
        raise MissingHistory("need centers at both t-1 and t-2")
    c1 = np.asarray(centers_prev, dtype=float)
    c2 = np.asarray(centers_prev2, dtype=float)
    if c1.shape != c2.shape:
        raise ValidationError(f"center history shapes differ: {c1.shape} vs {c2.shape}")
    com1 = c1.mean(axis=0)
    com2 = c2.mean(axis=0)
    delta = com1 - com2
    rot = np.eye(3)
    if len(c1) >= 3:
        try:
            rot = kabsch_rotation(c2 - com2, c1 - com1)
        except DegenerateConfiguration:
            rot = np.eye(3)
    return RigidMotion.from_matrix(rot, delta, com1)


def detect_flow_failure(
    rendered_views: list[RenderedView],
    observed_color: np.ndarray,
    part_id: int,
    tau_fail: float = 0.05,
) -> tuple[bool, float]:
    """Mean absolute RGB difference over the part's rendered mask pixels
    across views; failure when it exceeds tau_fail or the mask is empty."""
    total = 0.0
    count = 0
    for v, view in enumerate(rendered_views):
        sel = view.part_mask == part_id
        if not sel.any():
            continue
        diff = np.abs(view.color[sel].astype(float) - observed_color[v][sel].astype(float))
        total += diff.sum()
        count += diff.size
    if count == 0:
        return True, np.inf
    d_part = total / count
    return d_part > tau_fail, d_part


def resolve_part_motion(
    field_prev: PartField,
    part_id: int,
    de_motion: RigidMotion | None,
    inertia: RigidMotion | None,
    target: PartFlowTarget,
    observed_color: np.ndarray,
    cameras,
    base_motions: dict,
    tau_fail: float = 0.05,
    background=(0.0, 0.0, 0.0),
) -> PartMotionState:
    """Arbitrate between the flow-driven and extrapolated candidates.

    The flow candidate is kept whenever its rendered-vs-observed RGB residual
    within the part's frame-t mask stays under tau_fail; otherwise the
    candidate with the smaller residual wins.  With no candidates at all the
    part stays put.  Candidates are rendered with every other part moved by
    `base_motions` (this part's entry is overridden).
    """
    from .field import apply_part_motions
    from .observe import render_observations

    def d_part_of(candidate: RigidMotion):
        motions = dict(base_motions)
        motions[part_id] = candidate
        moved = apply_part_motions(field_prev, motions)
        views = render_observations(moved, cameras, background)
        return detect_flow_failure(views, observed_color, part_id, tau_fail)

    candidates = []
    if de_motion is not None:
        candidates.append(("de", de_motion))
    if inertia is not None:
        candidates.append(("inertia", inertia))
    if not candidates:
        pivot = field_prev.centers[field_prev.part_indices(part_id)].mean(axis=0)
        identity = RigidMotion.identity(pivot)
        failed, d_part = d_part_of(identity)
        return PartMotionState(
            part_id, identity, flow_objective(target, identity), "identity", d_part, failed
        )

    source, motion = candidates[0]
    failed, d_part = d_part_of(motion)
    if failed and source == "de" and len(candidates) > 1:
        alt_source, alt_motion = candidates[1]
        alt_failed, alt_d = d_part_of(alt_motion)
        if alt_d < d_part:
            source, motion, failed, d_part = alt_source, alt_motion, alt_failed, alt_d
    return PartMotionState(
        part_id, motion, flow_objective(target, motion), source, d_part, failed
    )


def mean_rgb_difference(rendered_views: list[RenderedView], observed_color: np.ndarray) -> float:
    """Mean absolute RGB difference over all pixels and views (channels in
    [0, 1]); drives the adaptive iteration budget."""
    total = 0.0
    count = 0
    for v, view in enumerate(rendered_views):
        diff = np.abs(view.color.astype(float) - observed_color[v].astype(float))
        total += diff.sum()
        count += diff.size
    return total / count if count else 0.0


def iteration_budget(
    d_pixel: float, epsilon: float = 1e5, lo: int = 1500, hi: int = 2000
) -> int:
    """round(clip(epsilon * d_pixel, lo, hi)); monotone in d_pixel."""
    if d_pixel < 0:
        raise ValidationError("d_pixel must be >= 0")
    return int(round(float(np.clip(epsilon * d_pixel, lo, hi))))
