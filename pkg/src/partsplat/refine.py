"""Post-warm-start refinement of primitive centers and colors.

The descent loop combines a point-sampled photometric term with two
distance-preservation regularizers: a learnable per-anchor-pair rigidity loss
inside each part and a frozen-KNN local isometry loss.  Pixel ownership comes
from the proxy renderer and is held fixed between periodic re-renders; between
re-renders each primitive's residual samples the observed image at its owned
pixels shifted by the primitive's projected displacement, so center gradients
flow through bilinear interpolation and the projection Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, ValidationError
from .field import PartField
from .geom import CameraModel
from .imageops import ssim
from .observe import render_observations

_MIN_Z = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Loss term weights: color L1, structural dissimilarity, flow-weighted
    color, part rigidity and local (KNN) rigidity."""

    lambda_color: float = 0.8
    lambda_dssim: float = 0.2
    lambda_flow: float = 1.0
    lambda_part: float = 2.0
    lambda_local: float = 2.0

    def validate(self):
        for name in ("lambda_color", "lambda_dssim", "lambda_flow", "lambda_part", "lambda_local"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


def flow_weight_map(flow_fwd: np.ndarray | None, flow_bwd: np.ndarray | None) -> np.ndarray | None:
    """Per-pixel attention weights: summed forward/backward flow magnitudes
    max-normalized to [0, 1]; an all-zero field normalizes to zero."""
    if flow_fwd is None or flow_bwd is None:
        return None
    mag = np.linalg.norm(flow_fwd, axis=-1) + np.linalg.norm(flow_bwd, axis=-1)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(mag)
    return mag / peak


def image_loss(
    rendered: np.ndarray,
    observed: np.ndarray,
    flow_fwd: np.ndarray | None,
    flow_bwd: np.ndarray | None,
    weights: LossWeights,
) -> tuple[float, dict]:
    """Photometric loss for one view: weighted L1 + D-SSIM + flow-attention
    terms.  Returns (total, {"l1", "dssim", "lo"})."""
    a = np.asarray(rendered, dtype=float)
    b = np.asarray(observed, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    err = np.abs(a - b)
    if err.ndim == 3:
        err = err.mean(axis=-1)
    l1 = float(err.mean())
    dssim = (1.0 - ssim(a, b)) / 2.0
    w = flow_weight_map(flow_fwd, flow_bwd)
    lo = 0.0 if w is None else float((err * w).mean())
    total = weights.lambda_color * l1 + weights.lambda_dssim * dssim + weights.lambda_flow * lo
    return total, {"l1": l1, "dssim": dssim, "lo": lo}


@dataclass
class RigidityState:
    """Per-primitive anchor pairs with learnable rigidity weights.

    anchors: (N, A) member indices, -1 padding; valid: (N, A) bool;
    weights: (N, A) in [0, 1]; dist_prev: anchor distances at t-1 (None until
    two center snapshots have been seen)."""

    anchors: np.ndarray
    valid: np.ndarray
    weights: np.ndarray
    dist_prev: np.ndarray | None = None

    def pair_count(self) -> int:
        return int(self.valid.sum())


def select_anchors(field: PartField, part_id: int, count: int, seed: int) -> np.ndarray:
    """Per part member, `count` distinct uniformly drawn same-part anchors
    (all the others when the part is smaller); rows padded with -1."""
    members = field.part_indices(part_id)
    rng = np.random.default_rng(seed)
    rows = np.full((len(members), count), -1, dtype=np.int64)
    for row, j in enumerate(members):
        others = members[members != j]
        if len(others) <= count:
            rows[row, : len(others)] = others
        else:
            rows[row] = rng.choice(others, size=count, replace=False)
    return rows


def init_rigidity(
    field: PartField, anchor_count: int = 16, seed: int = 0, w_init: float = 0.5
) -> RigidityState:
    """Anchor selection over every part; weights start at w_init."""
    n = len(field)
    anchors = np.full((n, anchor_count), -1, dtype=np.int64)
    for pid in sorted(field.parts):
        members = field.part_indices(pid)
        anchors[members] = select_anchors(field, pid, anchor_count, seed + pid)
    valid = anchors >= 0
    weights = np.full((n, anchor_count), float(w_init))
    return RigidityState(anchors, valid, weights)


def _pair_distances(centers: np.ndarray, anchors: np.ndarray, valid: np.ndarray) -> np.ndarray:
    safe = np.where(valid, anchors, 0)
    diff = centers[:, None, :] - centers[safe]
    dist = np.linalg.norm(diff, axis=-1)
    dist[~valid] = 0.0
    return dist


def update_rigidity(
    state: RigidityState,
    centers_prev: np.ndarray | None,
    centers_prev2: np.ndarray | None,
    alpha: float = 0.02,
    beta: float = 0.2,
    delta: float = 1e-3,
) -> RigidityState:
    """Grow/decay rigidity weights from the anchor-distance change between the
    two previous frames: W += alpha*max(1 - dD/delta, 0) - beta*max(dD/delta - 1, 0),
    clamped to [0, 1].  With missing history the state is returned unchanged
    except that dist_prev is refreshed when centers_prev is available."""
    new = RigidityState(state.anchors, state.valid, state.weights.copy(), state.dist_prev)
    if centers_prev is not None:
        new.dist_prev = _pair_distances(np.asarray(centers_prev, float), state.anchors, state.valid)
    if centers_prev is None or centers_prev2 is None:
        return new
    d1 = new.dist_prev
    d2 = _pair_distances(np.asarray(centers_prev2, float), state.anchors, state.valid)
    ratio = np.abs(d1 - d2) / delta
    w = state.weights + alpha * np.maximum(1.0 - ratio, 0.0) - beta * np.maximum(ratio - 1.0, 0.0)
    new.weights = np.clip(w, 0.0, 1.0)
    return new


def _distance_residual_loss(
    centers: np.ndarray,
    partners: np.ndarray,
    valid: np.ndarray,
    ref_dist: np.ndarray,
    pair_weights: np.ndarray | None,
):
    """Mean weighted |current distance - reference distance| over (row,
    partner) pairs plus its analytic gradient; |.|' at 0 and coincident-point
    directions are taken as 0."""
    n = len(centers)
    count = int(valid.sum())
    grad = np.zeros_like(centers)
    if count == 0:
        return 0.0, grad
    safe = np.where(valid, partners, 0)
    diff = centers[:, None, :] - centers[safe]
    dist = np.linalg.norm(diff, axis=-1)
    res = dist - ref_dist
    w = np.ones_like(dist) if pair_weights is None else pair_weights
    contrib = np.where(valid, w * np.abs(res), 0.0)
    loss = contrib.sum() / count

    with np.errstate(invalid="ignore", divide="ignore"):
        unit = diff / dist[..., None]
    unit[~np.isfinite(unit)] = 0.0
    coeff = np.where(valid, w * np.sign(res), 0.0) / count
    pair_grad = coeff[..., None] * unit
    grad += pair_grad.sum(axis=1)
    flat = pair_grad.reshape(-1, 3)
    flat_idx = safe.reshape(-1)
    for ch in range(3):
        grad[:, ch] -= np.bincount(flat_idx, weights=flat[:, ch], minlength=n)
    return float(loss), grad


def part_rigid_loss(state: RigidityState, centers: np.ndarray) -> tuple[float, np.ndarray]:
    """Rigidity-weighted anchor-distance preservation against the cached t-1
    distances; zero (with zero gradient) until history exists."""
    if state.dist_prev is None:
        return 0.0, np.zeros_like(np.asarray(centers, dtype=float))
    return _distance_residual_loss(
        np.asarray(centers, dtype=float), state.anchors, state.valid, state.dist_prev, state.weights
    )


def build_knn(centers: np.ndarray, k: int = 20) -> np.ndarray:
    """(N, k) nearest-neighbor indices (self excluded); built once on frame-0
    centers and then frozen."""
    pts = np.asarray(centers, dtype=float)
    k_eff = min(k, len(pts) - 1)
    if k_eff <= 0:
        return np.zeros((len(pts), 0), dtype=np.int64)
    _, idx = cKDTree(pts).query(pts, k=k_eff + 1)
    return idx[:, 1:].astype(np.int64)


def local_rigid_loss(
    knn: np.ndarray, centers: np.ndarray, centers_prev: np.ndarray
) -> tuple[float, np.ndarray]:
    """Unweighted distance preservation over frozen KNN pairs between
    consecutive frames (isometry penalty)."""
    cur = np.asarray(centers, dtype=float)
    if knn.shape[1] == 0 or centers_prev is None:
        return 0.0, np.zeros_like(cur)
    valid = np.ones(knn.shape, dtype=bool)
    ref = _pair_distances(np.asarray(centers_prev, dtype=float), knn, valid)
    return _distance_residual_loss(cur, knn, valid, ref, None)


@dataclass(frozen=True)
class RefineConfig:
    lr_centers: float = 1e-4
    lr_colors: float = 1e-2
    rerender_every: int = 50


class _CameraBatch:
    """Stacked camera parameters for single-call projection of all views."""

    def __init__(self, cameras):
        self.rot = np.stack([c.extrinsics[:, :3] for c in cameras])
        self.trans = np.stack([c.extrinsics[:, 3] for c in cameras])
        self.focal = np.stack([[c.fx, c.fy] for c in cameras])
        self.pp = np.stack([c.principal_point for c in cameras])
        self.width = cameras[0].width
        self.height = cameras[0].height

    def project(self, centers):
        """(V, N, 2) pixel positions, (V, N) validity and camera-frame coords."""
        pc = np.einsum("vij,nj->vni", self.rot, centers) + self.trans[:, None, :]
        z = pc[..., 2]
        ok = z > _MIN_Z
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = pc[..., :2] * self.focal[:, None, :] / z[..., None]
        uv = uv + self.pp[:, None, :]
        return uv, ok, pc

    def jacobian(self, pc):
        """d(pixel)/d(world center), shape (V, N, 2, 3)."""
        x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
        fx = self.focal[:, None, 0]
        fy = self.focal[:, None, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            j_cam = np.stack(
                [
                    np.stack([fx / z, np.zeros_like(z), -fx * x / (z * z)], axis=-1),
                    np.stack([np.zeros_like(z), fy / z, -fy * y / (z * z)], axis=-1),
                ],
                axis=-2,
            )
        j_cam[~np.isfinite(j_cam)] = 0.0
        return np.einsum("vnij,vjk->vnik", j_cam, self.rot)


def refine_timestamp(
    fld: PartField,
    observed_color: np.ndarray,
    cameras,
    budget: int,
    weights: LossWeights,
    rigidity: RigidityState | None = None,
    knn: np.ndarray | None = None,
    flow_fwd: np.ndarray | None = None,
    flow_bwd: np.ndarray | None = None,
    cfg: RefineConfig = RefineConfig(),
    background=(0.0, 0.0, 0.0),
) -> tuple[PartField, list]:
    """Gradient descent on centers and colors for one timestamp.

    observed_color is the (V, H, W, 3) stack of real images; flow stacks feed
    the reported flow-attention loss only.  Learning rates halve at 50% and
    75% of the budget.  Returns the refined field and the re-render log rows
    (step, l1, dssim, lo, l_part, l_local, total).
    """
    weights.validate()
    out = fld.copy()
    log = []
    if budget <= 0:
        return out, log

    batch = _CameraBatch(cameras)
    obs = np.asarray(observed_color, dtype=float)
    n_views, height, width = obs.shape[:3]
    obs_flat = obs.reshape(-1, 3)
    n = len(out)

    pix_u = pix_v = own = view_id = ref_uv = None

    knn_valid = ref_local = None
    if knn is not None and knn.shape[1] > 0 and out.prev_centers is not None:
        knn_valid = np.ones(knn.shape, dtype=bool)
        ref_local = _pair_distances(out.prev_centers, knn, knn_valid)

    def rerender(step):
        nonlocal pix_u, pix_v, own, view_id, ref_uv
        views = render_observations(out, cameras, background)
        us, vs, owners, vids = [], [], [], []
        for v, view in enumerate(views):
            rows, cols = np.nonzero(view.owner >= 0)
            us.append(cols.astype(float))
            vs.append(rows.astype(float))
            owners.append(view.owner[rows, cols].astype(np.int64))
            vids.append(np.full(len(rows), v, dtype=np.int64))
        pix_u = np.concatenate(us) if us else np.zeros(0)
        pix_v = np.concatenate(vs) if vs else np.zeros(0)
        own = np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64)
        view_id = np.concatenate(vids) if vids else np.zeros(0, dtype=np.int64)
        ref_uv, _, _ = batch.project(out.centers)

        l1s, dss, los = [], [], []
        for v, view in enumerate(views):
            ff = None if flow_fwd is None else flow_fwd[v]
            fb = None if flow_bwd is None else flow_bwd[v]
            _, comps = image_loss(view.color, obs[v], ff, fb, weights)
            l1s.append(comps["l1"])
            dss.append(comps["dssim"])
            los.append(comps["lo"])
        lp, _ = part_rigid_loss(rigidity, out.centers) if rigidity else (0.0, None)
        ll = (
            _distance_residual_loss(out.centers, knn, knn_valid, ref_local, None)[0]
            if ref_local is not None
            else 0.0
        )
        l1_m, ds_m, lo_m = float(np.mean(l1s)), float(np.mean(dss)), float(np.mean(los))
        total = (
            weights.lambda_color * l1_m
            + weights.lambda_dssim * ds_m
            + weights.lambda_flow * lo_m
            + weights.lambda_part * lp
            + weights.lambda_local * ll
        )
        log.append((step, l1_m, ds_m, lo_m, lp, ll, total))

    for step in range(budget):
        if step % cfg.rerender_every == 0:
            rerender(step)
        decay = 1.0 if step < budget * 0.5 else (0.5 if step < budget * 0.75 else 0.25)
        lr_c = cfg.lr_centers * decay
        lr_col = cfg.lr_colors * decay

        grad_centers = np.zeros((n, 3))
        grad_colors = np.zeros((n, 3))
        if len(own):
            uv, ok, pc = batch.project(out.centers)
            delta_uv = uv - ref_uv
            live = ok[view_id, own] & np.isfinite(delta_uv[view_id, own]).all(axis=1)
            pos_u = pix_u + np.where(live, delta_uv[view_id, own, 0], 0.0)
            pos_v = pix_v + np.where(live, delta_uv[view_id, own, 1], 0.0)
            inside = live & (pos_u >= 0) & (pos_u <= width - 1) & (pos_v >= 0) & (pos_v <= height - 1)

            x0 = np.clip(np.floor(pos_u), 0, width - 2).astype(np.int64)
            y0 = np.clip(np.floor(pos_v), 0, height - 2).astype(np.int64)
            fx = np.clip(pos_u - x0, 0.0, 1.0)
            fy = np.clip(pos_v - y0, 0.0, 1.0)
            base = view_id * (height * width)
            i00 = base + y0 * width + x0
            c00 = obs_flat[i00]
            c01 = obs_flat[i00 + 1]
            c10 = obs_flat[i00 + width]
            c11 = obs_flat[i00 + width + 1]
            wx, wy = fx[:, None], fy[:, None]
            sample = (1 - wy) * ((1 - wx) * c00 + wx * c01) + wy * ((1 - wx) * c10 + wx * c11)

            res = out.colors[own] - sample
            res[~inside] = 0.0
            denom = res.size
            # residuals below float32 color quantization are noise, not signal
            sgn = np.where(np.abs(res) > 1e-6, np.sign(res), 0.0) / denom
            for ch in range(3):
                grad_colors[:, ch] += np.bincount(own, weights=sgn[:, ch], minlength=n)

            dc_du = (1 - wy) * (c01 - c00) + wy * (c11 - c10)
            dc_dv = (1 - wx) * (c10 - c00) + wx * (c11 - c01)
            g_u = -(sgn * dc_du).sum(axis=1)
            g_v = -(sgn * dc_dv).sum(axis=1)
            jac = batch.jacobian(pc)
            j_pix = jac[view_id, own]
            g_world = g_u[:, None] * j_pix[:, 0, :] + g_v[:, None] * j_pix[:, 1, :]
            for ch in range(3):
                grad_centers[:, ch] += np.bincount(own, weights=g_world[:, ch], minlength=n)

        grad_total = weights.lambda_color * grad_centers
        if rigidity is not None:
            _, g_part = part_rigid_loss(rigidity, out.centers)
            grad_total = grad_total + weights.lambda_part * g_part
        if ref_local is not None:
            _, g_loc = _distance_residual_loss(out.centers, knn, knn_valid, ref_local, None)
            grad_total = grad_total + weights.lambda_local * g_loc

        out.centers = out.centers - lr_c * grad_total
        out.colors = np.clip(out.colors - lr_col * weights.lambda_color * grad_colors, 0.0, 1.0)

    rerender(budget)
    return out, log
