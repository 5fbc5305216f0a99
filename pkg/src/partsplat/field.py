"""Point-surrogate primitive fields, synthetic rigid-part scenes and field I/O.

A field is stored struct-of-arrays: centers (N, 3), colors (N, 3), radii (N,),
opacities (N,) and integer part ids (N,), -1 meaning unassigned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FileFormatError, InvalidSpec, UnknownPart, ValidationError
from .geom import RigidMotion, euler_deg_to_matrix

MAX_RADIUS = 0.03
FIELD_MAGIC = b"PAMO"
FIELD_VERSION = 1


@dataclass(frozen=True)
class SurrogateGaussian:
    """One isotropic primitive: center (m), RGB color in [0,1], radius (m),
    opacity in [0,1] and part id (-1 = unassigned)."""

    center: np.ndarray
    color: np.ndarray
    radius: float = 0.01
    opacity: float = 1.0
    part_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float).reshape(3))
        if not 0.0 < self.radius <= MAX_RADIUS:
            raise ValidationError(f"radius {self.radius} outside (0, {MAX_RADIUS}] m")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValidationError(f"opacity {self.opacity} outside [0, 1]")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise ValidationError("color components outside [0, 1]")


@dataclass
class PartField:
    """All primitives at one timestamp plus part index and center history.

    prev_centers / prev2_centers, when present, are the per-primitive centers
    at t-1 and t-2 in the same order as `centers`.
    """

    centers: np.ndarray
    colors: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray
    part_ids: np.ndarray
    timestamp: int = 0
    prev_centers: np.ndarray | None = None
    prev2_centers: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        n = len(self.centers)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        self.radii = np.asarray(self.radii, dtype=float).reshape(n)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(n)
        self.part_ids = np.asarray(self.part_ids, dtype=np.int32).reshape(n)
        for name in ("prev_centers", "prev2_centers"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.shape != (n, 3):
                    raise ValidationError(f"{name} shape {arr.shape} != ({n}, 3)")
                setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def parts(self) -> dict[int, np.ndarray]:
        """Map part id -> member indices (unassigned primitives excluded)."""
        out = {}
        ids = self.part_ids
        for pid in np.unique(ids):
            if pid >= 0:
                out[int(pid)] = np.flatnonzero(ids == pid)
        return out

    def part_indices(self, part_id: int) -> np.ndarray:
        idx = np.flatnonzero(self.part_ids == part_id)
        if len(idx) == 0:
            raise UnknownPart(f"part {part_id} is empty or unknown")
        return idx

    def gaussian(self, index: int) -> SurrogateGaussian:
        return SurrogateGaussian(
            self.centers[index],
            self.colors[index],
            float(self.radii[index]),
            float(self.opacities[index]),
            int(self.part_ids[index]),
        )

    def copy(self) -> "PartField":
        return PartField(
            self.centers.copy(),
            self.colors.copy(),
            self.radii.copy(),
            self.opacities.copy(),
            self.part_ids.copy(),
            self.timestamp,
            None if self.prev_centers is None else self.prev_centers.copy(),
            None if self.prev2_centers is None else self.prev2_centers.copy(),
        )


def center_of_mass(field: PartField, part_id: int) -> np.ndarray:
    """Unweighted mean of the part's member centers."""
    return field.centers[field.part_indices(part_id)].mean(axis=0)


def apply_part_motions(field: PartField, motions: dict[int, RigidMotion]) -> PartField:
    """Move each part rigidly by its motion; history rolls forward one step."""
    moved = field.copy()
    moved.prev2_centers = field.prev_centers
    moved.prev_centers = field.centers.copy()
    moved.timestamp = field.timestamp + 1
    for pid, motion in motions.items():
        idx = field.part_indices(pid)
        moved.centers[idx] = motion.apply(field.centers[idx])
    return moved


@dataclass(frozen=True)
class PartShape:
    """Generator for one part's primitives at frame 0."""

    count: int
    shape: str = "box"  # box | sphere | blob
    extent: float = 0.25  # full side length / diameter (m)
    base_color: tuple = (0.8, 0.3, 0.3)
    center: tuple = (0.0, 0.0, 0.0)
    color_jitter: float = 0.25
    radius: float = 0.01


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene: part shapes plus per-part ground-truth motion per
    frame transition (frame_count - 1 entries of (delta, omega_deg) each,
    rotation pivoted at the part's live center of mass)."""

    part_shapes: tuple
    trajectories: tuple  # per part: sequence of (delta xyz, omega_deg xyz)
    frame_count: int
    rng_seed: int = 0

    def validate(self) -> None:
        if not self.part_shapes:
            raise InvalidSpec("no part shapes")
        if self.frame_count < 1:
            raise InvalidSpec(f"frame_count {self.frame_count} < 1")
        if len(self.trajectories) != len(self.part_shapes):
            raise InvalidSpec("one trajectory per part shape required")
        for shape in self.part_shapes:
            if shape.count <= 0:
                raise InvalidSpec("part with zero primitives")
            if shape.shape not in ("box", "sphere", "blob"):
                raise InvalidSpec(f"unknown shape {shape.shape!r}")
        needed = self.frame_count - 1
        for tr in self.trajectories:
            if len(tr) < needed:
                raise InvalidSpec(
                    f"trajectory has {len(tr)} steps, {needed} needed"
                )


def _sample_shape(shape: PartShape, rng: np.random.Generator) -> np.ndarray:
    half = shape.extent / 2.0
    if shape.shape == "box":
        pts = rng.uniform(-half, half, (shape.count, 3))
    elif shape.shape == "sphere":
        pts = np.empty((0, 3))
        while len(pts) < shape.count:
            cand = rng.uniform(-half, half, (2 * shape.count, 3))
            cand = cand[np.linalg.norm(cand, axis=1) <= half]
            pts = np.vstack([pts, cand])
        pts = pts[: shape.count]
    else:  # blob
        pts = rng.normal(0.0, half / 2.0, (shape.count, 3))
        pts = np.clip(pts, -half, half)
    return pts + np.asarray(shape.center, dtype=float)


def synth_scene(spec: SceneSpec) -> tuple[list[PartField], np.ndarray]:
    """Generate per-frame fields and aligned ground-truth tracks.

    Frame 0 is sampled deterministically from the shapes; every later frame
    applies each part's ground-truth rigid motion about the part's current
    center of mass.  Returns (fields, tracks) with tracks shaped
    (frame_count, N, 3).
    """
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    centers, colors, radii, pids = [], [], [], []
    for pid, shape in enumerate(spec.part_shapes):
        pts = _sample_shape(shape, rng)
        base = np.asarray(shape.base_color, dtype=float)
        jitter = rng.uniform(-shape.color_jitter, shape.color_jitter, (shape.count, 3))
        cols = np.clip(base + jitter, 0.0, 1.0)
        centers.append(pts)
        colors.append(cols)
        radii.append(np.full(shape.count, shape.radius))
        pids.append(np.full(shape.count, pid, dtype=np.int32))
    field0 = PartField(
        np.vstack(centers),
        np.vstack(colors),
        np.concatenate(radii),
        np.ones(sum(s.count for s in spec.part_shapes)),
        np.concatenate(pids),
        timestamp=0,
    )

    fields = [field0]
    tracks = [field0.centers.copy()]
    for t in range(1, spec.frame_count):
        prev = fields[-1]
        motions = {}
        for pid in range(len(spec.part_shapes)):
            delta, omega = spec.trajectories[pid][t - 1]
            pivot = center_of_mass(prev, pid)
            motions[pid] = RigidMotion(np.asarray(delta), np.asarray(omega), pivot)
        fields.append(apply_part_motions(prev, motions))
        tracks.append(fields[-1].centers.copy())
    return fields, np.stack(tracks)


def standard_scene(
    frame_count: int = 20,
    primitives_per_part: int = 300,
    rng_seed: int = 1234,
) -> SceneSpec:
    """The three-part benchmark scene: a translating box, a rotating sphere
    and a tumbling blob, with per-frame motions well inside the search box."""
    shapes = (
        PartShape(primitives_per_part, "box", 0.24, (0.85, 0.25, 0.2), (-0.35, 0.0, 0.0)),
        PartShape(primitives_per_part, "sphere", 0.26, (0.2, 0.75, 0.3), (0.35, 0.05, 0.05)),
        PartShape(primitives_per_part, "blob", 0.22, (0.25, 0.35, 0.85), (0.0, -0.32, 0.12)),
    )
    steps = frame_count - 1
    traj_box = tuple(
        ((0.03, 0.012 * np.sin(0.5 * t), 0.008), (0.0, 0.0, 2.0)) for t in range(steps)
    )
    traj_sphere = tuple(
        ((-0.02, 0.015, 0.01 * np.cos(0.4 * t)), (5.0, 0.0, -3.0)) for t in range(steps)
    )
    traj_blob = tuple(
        ((0.012, -0.025, 0.012), (2.0, 4.0, 1.5)) for t in range(steps)
    )
    return SceneSpec((shapes), (traj_box, traj_sphere, traj_blob), frame_count, rng_seed)


def save_field(fld: PartField, path) -> None:
    """Binary columnar layout, all little-endian:
    magic "PAMO", version u32, count u64, then f32 planes centers (N*3),
    colors (N*3), radii (N), opacities (N), then i32 part ids (N)."""
    n = len(fld)
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<IQ", FIELD_VERSION, n))
        fh.write(fld.centers.astype("<f4").tobytes())
        fh.write(fld.colors.astype("<f4").tobytes())
        fh.write(fld.radii.astype("<f4").tobytes())
        fh.write(fld.opacities.astype("<f4").tobytes())
        fh.write(fld.part_ids.astype("<i4").tobytes())


def load_field(path, timestamp: int = 0) -> PartField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FIELD_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != FIELD_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        data = fh.read()
    need = n * (3 + 3 + 1 + 1) * 4 + n * 4
    if len(data) != need:
        raise FileFormatError(f"{path}: payload {len(data)} bytes, expected {need}")
    off = 0

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    centers = take(n * 3, "<f4").reshape(n, 3).astype(float)
    colors = take(n * 3, "<f4").reshape(n, 3).astype(float)
    radii = take(n, "<f4").astype(float)
    opac = take(n, "<f4").astype(float)
    pids = take(n, "<i4").astype(np.int32)
    return PartField(centers, colors, radii, opac, pids, timestamp=timestamp)
