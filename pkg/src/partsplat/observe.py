"""Oracle observation synthesis: z-buffer point splatting, ground-truth flow
and configurable corruption standing in for segmentation/flow networks.

The proxy renderer splats each primitive as a constant-depth disc of pixel
radius max(1, round(fx * radius / z)); the nearest splat wins each pixel and
writes its own depth, color, part id and primitive index.  Opacity is ignored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import FileFormatError, MissingMotion, ValidationError
from .field import PartField, apply_part_motions
from .geom import CameraModel, RigidMotion, project_many

IMAGE_MAGIC = b"PAMO"
IMAGE_VERSION = 1
FLO_MAGIC = 202021.25

_DTYPE_TAGS = {0: "<f4", 1: "<i4"}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.int32): 1}


@dataclass
class RenderedView:
    """One camera's splat rendering. depth is +inf and part_mask/owner are -1
    on uncovered pixels."""

    depth: np.ndarray
    color: np.ndarray
    part_mask: np.ndarray
    owner: np.ndarray


@dataclass
class ObservationSet:
    """Per-frame, per-view observation stack.

    depth[t]: (V, H, W) f32; color[t]: (V, H, W, 3) f32;
    part_mask[t]: (V, H, W) i32; flow_fwd[t]/flow_bwd[t]: (V, H, W, 2) f32,
    None at t = 0.  flow_fwd[t] lives on the frame t-1 pixel grid and maps
    those pixels toward frame t; flow_bwd[t] is the reverse on the frame t
    grid.
    """

    depth: list
    color: list
    part_mask: list
    flow_fwd: list
    flow_bwd: list

    @property
    def frame_count(self) -> int:
        return len(self.depth)

    @property
    def n_views(self) -> int:
        return self.depth[0].shape[0]

    def copy(self) -> "ObservationSet":
        return ObservationSet(
            [d.copy() for d in self.depth],
            [c.copy() for c in self.color],
            [m.copy() for m in self.part_mask],
            [None if f is None else f.copy() for f in self.flow_fwd],
            [None if f is None else f.copy() for f in self.flow_bwd],
        )


def _disc_offsets(radius: int):
    rng = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(rng, rng, indexing="ij")
    keep = dy * dy + dx * dx <= radius * radius
    return dy[keep], dx[keep]


def render_view(
    field: PartField, camera: CameraModel, background=(0.0, 0.0, 0.0)
) -> RenderedView:
    h, w = camera.height, camera.width
    depth = np.full((h, w), np.inf, dtype=np.float32)
    color = np.empty((h, w, 3), dtype=np.float32)
    color[:] = np.asarray(background, dtype=np.float32)
    mask = np.full((h, w), -1, dtype=np.int32)
    owner = np.full((h, w), -1, dtype=np.int32)

    uv, z, valid = project_many(camera, field.centers)
    if not valid.any():
        return RenderedView(depth, color, mask, owner)

    idx = np.flatnonzero(valid)
    cu = np.rint(uv[idx, 0]).astype(np.int64)
    cv = np.rint(uv[idx, 1]).astype(np.int64)
    zv = z[idx]
    rad = np.maximum(1, np.rint(camera.fx * field.radii[idx] / zv)).astype(np.int64)

    # cull primitives whose disc cannot touch the image
    keep = (cu + rad >= 0) & (cu - rad <= w - 1) & (cv + rad >= 0) & (cv - rad <= h - 1)
    idx, cu, cv, zv, rad = idx[keep], cu[keep], cv[keep], zv[keep], rad[keep]
    if len(idx) == 0:
        return RenderedView(depth, color, mask, owner)

    # farthest-first stamping: the last write per pixel is the nearest splat
    order = np.argsort(-zv, kind="stable")
    idx, cu, cv, zv, rad = idx[order], cu[order], cv[order], zv[order], rad[order]

    radii_values = np.unique(rad)
    tables = {int(r): _disc_offsets(int(r)) for r in radii_values}
    starts, big_dy, big_dx, counts_of = {}, [], [], {}
    pos = 0
    for r in radii_values:
        dy, dx = tables[int(r)]
        starts[int(r)] = pos
        counts_of[int(r)] = len(dy)
        big_dy.append(dy)
        big_dx.append(dx)
        pos += len(dy)
    big_dy = np.concatenate(big_dy)
    big_dx = np.concatenate(big_dx)

    counts = np.array([counts_of[int(r)] for r in rad])
    start_arr = np.array([starts[int(r)] for r in rad])
    total = int(counts.sum())
    run_start = np.cumsum(counts) - counts
    intra = np.arange(total) - np.repeat(run_start, counts)
    off = np.repeat(start_arr, counts) + intra

    rows = np.repeat(cv, counts) + big_dy[off]
    cols = np.repeat(cu, counts) + big_dx[off]
    which = np.repeat(np.arange(len(idx)), counts)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rows, cols, which = rows[inside], cols[inside], which[inside]

    lin = rows * w + cols
    depth.reshape(-1)[lin] = zv[which].astype(np.float32)
    color.reshape(-1, 3)[lin] = field.colors[idx[which]].astype(np.float32)
    mask.reshape(-1)[lin] = field.part_ids[idx[which]]
    owner.reshape(-1)[lin] = idx[which].astype(np.int32)
    return RenderedView(depth, color, mask, owner)


def render_observations(
    field: PartField, cameras, background=(0.0, 0.0, 0.0)
) -> list[RenderedView]:
    from .util import thread_map

    return thread_map(lambda cam: render_view(field, cam, background), cameras)


def ground_truth_flow(
    field_prev: PartField,
    motions: dict,
    cameras,
    views_prev: list[RenderedView] | None = None,
):
    """Forward/backward flow pairs induced by per-part rigid motions.

    Flow follows the geometry even where the target is occluded.  Covered
    pixels take the owning primitive's projected displacement; uncovered
    pixels are zero.  Raises MissingMotion when a part present in the field
    has no motion.
    """
    part_ids = set(int(p) for p in np.unique(field_prev.part_ids) if p >= 0)
    missing = part_ids - set(int(k) for k in motions)
    if missing:
        raise MissingMotion(f"no motion for parts {sorted(missing)}")

    field_curr = apply_part_motions(field_prev, motions)
    if views_prev is None:
        views_prev = render_observations(field_prev, cameras)
    views_curr = render_observations(field_curr, cameras)

    flows_fwd, flows_bwd = [], []
    for cam, vp, vc in zip(cameras, views_prev, views_curr):
        uv0, _, ok0 = project_many(cam, field_prev.centers)
        uv1, _, ok1 = project_many(cam, field_curr.centers)
        disp = np.where((ok0 & ok1)[:, None], uv1 - uv0, 0.0)

        fwd = np.zeros((cam.height, cam.width, 2), dtype=np.float32)
        own = vp.owner
        covered = own >= 0
        fwd[covered] = disp[own[covered]].astype(np.float32)

        bwd = np.zeros((cam.height, cam.width, 2), dtype=np.float32)
        own_c = vc.owner
        covered_c = own_c >= 0
        bwd[covered_c] = -disp[own_c[covered_c]].astype(np.float32)
        flows_fwd.append(fwd)
        flows_bwd.append(bwd)
    return flows_fwd, flows_bwd


@dataclass(frozen=True)
class NoiseConfig:
    """Observation corruption emulating imperfect segmentation/flow inputs."""

    flow_sigma: float = 0.0
    mask_boundary_flip: float = 0.0
    mask_oversplit: int = 0

    def validate(self):
        if not 0.0 <= self.mask_boundary_flip <= 1.0:
            raise ValidationError("mask_boundary_flip must be in [0, 1]")
        if self.flow_sigma < 0:
            raise ValidationError("flow_sigma must be >= 0")
        if self.mask_oversplit < 0:
            raise ValidationError("mask_oversplit must be >= 0")


def _flip_mask_boundaries(mask: np.ndarray, fraction: float, rng) -> np.ndarray:
    out = mask.copy()
    lmax = ndimage.maximum_filter(mask, size=5, mode="nearest")
    lmin = ndimage.minimum_filter(mask, size=5, mode="nearest")
    boundary = (lmax != lmin) & (mask >= 0)
    ys, xs = np.nonzero(boundary)
    if len(ys) == 0:
        return out
    flip = rng.random(len(ys)) < fraction
    h, w = mask.shape
    for y, x in zip(ys[flip], xs[flip]):
        window = mask[max(0, y - 2) : y + 3, max(0, x - 2) : x + 3]
        others = np.unique(window[window != mask[y, x]])
        if len(others):
            out[y, x] = others[rng.integers(len(others))]
    return out


def _oversplit_mask(mask: np.ndarray, pieces: int, rng) -> np.ndarray:
    out = np.full_like(mask, -1)
    next_label = 0
    for label in np.unique(mask):
        if label < 0:
            continue
        ys, xs = np.nonzero(mask == label)
        if len(ys) < pieces:
            out[ys, xs] = next_label
            next_label += 1
            continue
        theta = rng.uniform(0.0, np.pi)
        proj = ys * np.sin(theta) + xs * np.cos(theta)
        edges = np.quantile(proj, np.linspace(0, 1, pieces + 1)[1:-1])
        piece = np.searchsorted(edges, proj, side="right")
        for p in range(pieces):
            sel = piece == p
            if sel.any():
                out[ys[sel], xs[sel]] = next_label
                next_label += 1
    return out


def corrupt(obs: ObservationSet, noise: NoiseConfig, seed: int = 0) -> ObservationSet:
    """Apply flow noise, mask boundary flips and per-view mask over-splitting.

    All-zero noise returns a bit-identical copy.  Deterministic per seed.
    """
    noise.validate()
    out = obs.copy()
    if noise.flow_sigma == 0 and noise.mask_boundary_flip == 0 and noise.mask_oversplit <= 1:
        return out
    rng = np.random.default_rng(seed)
    for t in range(out.frame_count):
        if noise.flow_sigma > 0:
            for attr in ("flow_fwd", "flow_bwd"):
                arr = getattr(out, attr)[t]
                if arr is not None:
                    arr += rng.normal(0.0, noise.flow_sigma, arr.shape).astype(np.float32)
        if noise.mask_boundary_flip > 0 or noise.mask_oversplit > 1:
            masks = out.part_mask[t]
            for v in range(masks.shape[0]):
                m = masks[v]
                if noise.mask_boundary_flip > 0:
                    m = _flip_mask_boundaries(m, noise.mask_boundary_flip, rng)
                if noise.mask_oversplit > 1:
                    m = _oversplit_mask(m, noise.mask_oversplit, rng)
                masks[v] = m
    return out


def observations_from_views(views_per_frame, flows_per_frame) -> ObservationSet:
    """Stack per-frame RenderedView lists (and (fwd, bwd) flow lists, entry 0
    being None) into an ObservationSet."""
    depth, color, mask, ffwd, fbwd = [], [], [], [], []
    for t, views in enumerate(views_per_frame):
        depth.append(np.stack([v.depth for v in views]))
        color.append(np.stack([v.color for v in views]))
        mask.append(np.stack([v.part_mask for v in views]))
        flows = flows_per_frame[t]
        if flows is None:
            ffwd.append(None)
            fbwd.append(None)
        else:
            ffwd.append(np.stack(flows[0]))
            fbwd.append(np.stack(flows[1]))
    return ObservationSet(depth, color, mask, ffwd, fbwd)


def save_image(arr: np.ndarray, path) -> None:
    """Binary plane format: magic "PAMO", version u32, count u64 (pixels),
    then u32 height, width, channels, dtype tag (0 = f32, 1 = i32), then the
    row-major plane data, little-endian."""
    data = np.asarray(arr)
    if data.dtype == np.float64:
        data = data.astype(np.float32)
    if data.dtype == np.int64:
        data = data.astype(np.int32)
    if data.dtype not in (np.dtype(np.float32), np.dtype(np.int32)):
        raise ValidationError(f"unsupported image dtype {data.dtype}")
    if data.ndim == 2:
        h, w, c = data.shape + (1,)
    elif data.ndim == 3:
        h, w, c = data.shape
    else:
        raise ValidationError(f"image must be 2-D or 3-D, got shape {data.shape}")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<IQ", IMAGE_VERSION, h * w))
        fh.write(struct.pack("<IIII", h, w, c, _TAG_OF[data.dtype]))
        fh.write(np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<")).tobytes())


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != IMAGE_MAGIC:
            raise FileFormatError(f"{path}: bad magic")
        version, count = struct.unpack("<IQ", fh.read(12))
        if version != IMAGE_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        h, w, c, tag = struct.unpack("<IIII", fh.read(16))
        if h * w != count or tag not in _DTYPE_TAGS:
            raise FileFormatError(f"{path}: inconsistent header")
        data = np.frombuffer(fh.read(), dtype=_DTYPE_TAGS[tag])
    if data.size != h * w * c:
        raise FileFormatError(f"{path}: truncated payload")
    arr = data.reshape((h, w) if c == 1 else (h, w, c))
    return arr.copy()


def save_flo(flow: np.ndarray, path) -> None:
    """Middlebury layout: f32 magic 202021.25, i32 width, i32 height, then
    interleaved f32 (u, v) row-major."""
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValidationError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(flow.astype("<f4").tobytes())


def load_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (magic,) = struct.unpack("<f", fh.read(4))
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise FileFormatError(f"{path}: bad .flo magic {magic}")
        w, h = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w * 2:
        raise FileFormatError(f"{path}: truncated .flo payload")
    return data.reshape(h, w, 2).copy()


def save_ppm(image: np.ndarray, path) -> None:
    """8-bit binary PPM (P6) from a float color image in [0, 1]."""
    u8 = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(u8.tobytes())


def save_pgm(image: np.ndarray, path, scale: float | None = None) -> None:
    """8-bit binary PGM (P5) from a scalar image; +inf maps to 0."""
    arr = np.asarray(image, dtype=float).copy()
    finite = np.isfinite(arr)
    if scale is None:
        scale = arr[finite].max() if finite.any() else 1.0
    arr[~finite] = 0.0
    u8 = np.clip(arr / max(scale, 1e-12) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(u8.tobytes())
