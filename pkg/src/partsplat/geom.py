"""Pinhole cameras, Euler-angle rigid motions and SVD point-set registration.

Conventions used throughout the package:
  * world and camera frames are right-handed, units are meters;
  * pixel (u, v) has u rightward, v downward, origin at the top-left corner;
  * Euler angles are intrinsic XYZ, in degrees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InvalidCamera,
    NonPositiveDepth,
    ValidationError,
)

_ORTHO_TOL = 1e-9
_MIN_DEPTH = 1e-9


def euler_deg_to_matrix(omega_deg) -> np.ndarray:
    """Rotation matrix for intrinsic XYZ Euler angles given in degrees."""
    ax, ay, az = np.deg2rad(np.asarray(omega_deg, dtype=float))
    ca, sa = np.cos(ax), np.sin(ax)
    cb, sb = np.cos(ay), np.sin(ay)
    cc, sc = np.cos(az), np.sin(az)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rz = np.array([[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def matrix_to_euler_deg(rot: np.ndarray) -> np.ndarray:
    """Intrinsic XYZ Euler angles (degrees) of a proper rotation matrix.

    For R = Rx(a) Ry(b) Rz(c): R[0, 2] = sin(b).  At the |b| = 90 deg gimbal
    singularity the x/z split is not unique; a = 0 is returned there.
    """
    r = np.asarray(rot, dtype=float)
    sb = np.clip(r[0, 2], -1.0, 1.0)
    b = np.arcsin(sb)
    if abs(sb) < 1.0 - 1e-12:
        a = np.arctan2(-r[1, 2], r[2, 2])
        c = np.arctan2(-r[0, 1], r[0, 0])
    else:
        a = 0.0
        c = np.arctan2(r[1, 0], r[1, 1])
    return np.degrees(np.array([a, b, c]))


def _check_rotation(rot: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    err = np.abs(rot @ rot.T - np.eye(3)).max()
    if err > tol or abs(np.linalg.det(rot) - 1.0) > tol:
        raise ValidationError(
            f"matrix is not a proper rotation (orthonormality error {err:.2e})"
        )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics K (3x3) and rigid world->camera extrinsics E (3x4)."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int
    name: str = "cam"

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=float)
        e = np.asarray(self.extrinsics, dtype=float)
        if k.shape != (3, 3) or e.shape != (3, 4):
            raise InvalidCamera(f"bad K/E shapes {k.shape}, {e.shape}")
        fx, fy, cx, cy = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
        if fx <= 0 or fy <= 0:
            raise InvalidCamera(f"focal lengths must be positive, got {fx}, {fy}")
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise InvalidCamera(f"principal point ({cx}, {cy}) outside image")
        try:
            _check_rotation(e[:, :3])
        except ValidationError as exc:
            raise InvalidCamera(str(exc)) from exc
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", e)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def principal_point(self) -> np.ndarray:
        return self.intrinsics[:2, 2].copy()

    def to_camera_frame(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) -> camera-frame coordinates (N, 3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.extrinsics[:, :3].T + self.extrinsics[:, 3]


def project(camera: CameraModel, point) -> tuple[np.ndarray, float]:
    """Perspective-project one world point. Returns ((u, v), depth).

    The pixel may lie outside the image; callers clip.  Raises
    NonPositiveDepth when the camera-frame z is <= 1e-9.
    """
    pc = camera.to_camera_frame(point)[0]
    if pc[2] <= _MIN_DEPTH:
        raise NonPositiveDepth(f"camera-frame z = {pc[2]:.3e}")
    u = camera.fx * pc[0] / pc[2] + camera.intrinsics[0, 2]
    v = camera.fy * pc[1] / pc[2] + camera.intrinsics[1, 2]
    return np.array([u, v]), float(pc[2])


def project_many(camera: CameraModel, points: np.ndarray):
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,), valid (N,)) where valid marks points
    with camera-frame z > 1e-9; pixels/depths of invalid points are NaN.
    """
    pc = camera.to_camera_frame(points)
    z = pc[:, 2]
    valid = z > _MIN_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = pc[:, :2] * np.array([camera.fx, camera.fy]) / z[:, None]
    uv = uv + camera.intrinsics[:2, 2]
    uv[~valid] = np.nan
    depths = np.where(valid, z, np.nan)
    return uv, depths, valid


@dataclass(frozen=True)
class RigidMotion:
    """6-DoF part motion: translation delta (m) and intrinsic XYZ Euler
    rotation omega_deg (degrees) about a pivot point (m)."""

    delta: np.ndarray
    omega_deg: np.ndarray
    pivot: np.ndarray

    def __post_init__(self):
        for name in ("delta", "omega_deg", "pivot"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(3)
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, pivot=(0.0, 0.0, 0.0)) -> "RigidMotion":
        return cls(np.zeros(3), np.zeros(3), np.asarray(pivot, dtype=float))

    @classmethod
    def from_matrix(cls, rot: np.ndarray, delta, pivot) -> "RigidMotion":
        _check_rotation(np.asarray(rot, dtype=float), tol=1e-6)
        return cls(np.asarray(delta, float), matrix_to_euler_deg(rot), pivot)

    @property
    def rotation(self) -> np.ndarray:
        return euler_deg_to_matrix(self.omega_deg)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate about the pivot, then translate: R (p - c) + c + delta.

        An exactly-zero motion returns the points unchanged (no pivot
        round-trip rounding)."""
        pts = np.asarray(points, dtype=float)
        if not self.delta.any() and not self.omega_deg.any():
            return pts.copy()
        return (pts - self.pivot) @ self.rotation.T + self.pivot + self.delta

    def inverse(self) -> "RigidMotion":
        """Exact inverse about the same pivot (inverse rotation, back-rotated
        negated delta)."""
        rot_inv = self.rotation.T
        return RigidMotion(-(rot_inv @ self.delta), matrix_to_euler_deg(rot_inv), self.pivot)


def kabsch_rotation(offsets_prev: np.ndarray, offsets_curr: np.ndarray) -> np.ndarray:
    """Best-fit proper rotation mapping centered offsets_prev onto offsets_curr.

    U S V^T = svd(offsets_prev^T offsets_curr); the rotation is U V^T with the
    sign of the last column of U flipped when det(U V^T) < 0, so a reflection
    is never returned.  Raises DegenerateConfiguration when the
    cross-covariance has rank < 2 (collinear point sets).
    """
    a = np.asarray(offsets_prev, dtype=float)
    b = np.asarray(offsets_curr, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValidationError(f"offset shapes {a.shape}, {b.shape} must match (N, 3)")
    if a.shape[0] < 3:
        raise DegenerateConfiguration(f"need >= 3 offset pairs, got {a.shape[0]}")
    cov = a.T @ b
    u, s, vt = np.linalg.svd(cov)
    scale = s[0] if s[0] > 0 else 1.0
    if s[1] / scale < 1e-12:
        raise DegenerateConfiguration("cross-covariance rank < 2")
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    # column-vector convention: curr_i ~= R @ prev_i
    return rot.T


def save_rig(cameras, path) -> None:
    """Serialize a camera list as JSON: [{name, K:[fx,fy,cx,cy], E: 12 floats
    row-major, width, height}, ...]."""
    doc = []
    for cam in cameras:
        doc.append(
            {
                "name": cam.name,
                "K": [cam.fx, cam.fy, float(cam.intrinsics[0, 2]), float(cam.intrinsics[1, 2])],
                "E": [float(x) for x in cam.extrinsics.reshape(-1)],
                "width": cam.width,
                "height": cam.height,
            }
        )
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_rig(path) -> list[CameraModel]:
    with open(path) as fh:
        doc = json.load(fh)
    cams = []
    for entry in doc:
        fx, fy, cx, cy = entry["K"]
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        e = np.asarray(entry["E"], dtype=float).reshape(3, 4)
        cams.append(
            CameraModel(k, e, int(entry["width"]), int(entry["height"]), entry.get("name", "cam"))
        )
    return cams


def look_at_extrinsics(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World->camera 3x4 extrinsics for a camera at `position` looking at
    `target` (camera z forward, y down in world-up terms)."""
    pos = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - pos
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValidationError("camera position coincides with target")
    fwd = fwd / norm
    upv = np.asarray(up, dtype=float)
    right = np.cross(fwd, upv)
    if np.linalg.norm(right) < 1e-9:
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return np.hstack([rot, (-rot @ pos)[:, None]])


def ring_rig(
    n_cameras: int,
    radius: float = 2.5,
    height: float = 0.9,
    target=(0.0, 0.0, 0.0),
    focal: float = 110.0,
    width: int = 96,
    height_px: int = 96,
) -> list[CameraModel]:
    """Evenly spaced inward-looking cameras on a circle; heights alternate
    slightly so views are not coplanar."""
    cams = []
    for i in range(n_cameras):
        ang = 2.0 * np.pi * i / n_cameras
        z = height + 0.25 * (1 if i % 2 else -1)
        pos = np.array([radius * np.cos(ang), radius * np.sin(ang), z])
        e = look_at_extrinsics(pos, target)
        k = np.array(
            [[focal, 0.0, width / 2.0], [0.0, focal, height_px / 2.0], [0.0, 0.0, 1.0]]
        )
        cams.append(CameraModel(k, e, width, height_px, name=f"cam{i:02d}"))
    return cams
