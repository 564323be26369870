"""Pinhole cameras, rays, and source-view selection.

Conventions used everywhere in this package:
  * extrinsics are world-to-camera: x_cam = R @ x_world + t
  * pixel (0, 0) is the center of the top-left pixel; u is the column
  * depth maps store camera-frame z (not distance along the ray)
"""

import math
from dataclasses import dataclass, field

import numpy as np

ROT_TOL = 1e-8


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit length
    t_near: float
    t_far: float

    def __post_init__(self):
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-10:
            raise CameraError(f"ray direction not unit length (|v| = {n})")
        if not (0 <= self.t_near < self.t_far):
            raise CameraError(f"bad ray range [{self.t_near}, {self.t_far}]")

    def point_at(self, t):
        return self.origin + t * self.direction


@dataclass(frozen=True)
class CameraView:
    """One viewpoint: intrinsics K (3x3), world-to-camera rotation R and
    translation t, the image (H, W, 3 in [0,1]), and optional ground-truth
    depth (camera z, meters) with a validity mask."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image: np.ndarray
    t_near: float = 0.1
    t_far: float = 10.0
    depth_gt: np.ndarray | None = None
    depth_mask: np.ndarray | None = None
    name: str = ""
    _center: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise CameraError(f"intrinsics/rotation must be 3x3, got {K.shape}, {R.shape}")
        if not (np.isfinite(K).all() and np.isfinite(R).all() and np.isfinite(t).all()):
            raise CameraError("camera parameters must be finite")
        if abs(np.linalg.det(R) - 1.0) > ROT_TOL or np.abs(R @ R.T - np.eye(3)).max() > ROT_TOL:
            raise CameraError("rotation is not orthonormal with determinant +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CameraError("focal lengths must be positive")
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise CameraError(f"image must be (H, W, 3), got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise CameraError("image values must lie in [0, 1]")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "_center", -R.T @ t)

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    @property
    def center(self):
        """Camera center in world coordinates."""
        return self._center

    def replace_image(self, image, depth_gt=None, depth_mask=None):
        return CameraView(
            self.intrinsics,
            self.rotation,
            self.translation,
            image,
            self.t_near,
            self.t_far,
            depth_gt,
            depth_mask,
            self.name,
        )


def project(camera, p_world):
    """Perspective-project world points (..., 3) -> (uv (..., 2), z (...)).

    z <= 0 means behind the camera; uv is still returned (from the raw
    homogeneous division) and the caller masks on z."""
    p = np.asarray(p_world, dtype=np.float64)
    pc = p @ camera.rotation.T + camera.translation
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = pc[..., 0] / z
        y = pc[..., 1] / z
    K = camera.intrinsics
    u = K[0, 0] * x + K[0, 1] * y + K[0, 2]
    v = K[1, 1] * y + K[1, 2]
    return np.stack([u, v], axis=-1), z


def emit_ray(camera, pixel):
    """Back-project one pixel (u, v) into a world-space ray."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (-0.5 <= u <= camera.width - 0.5 and -0.5 <= v <= camera.height - 0.5):
        raise CameraError(f"pixel ({u}, {v}) outside image bounds {camera.width}x{camera.height}")
    d_cam = np.linalg.solve(camera.intrinsics, np.array([u, v, 1.0]))
    d_world = camera.rotation.T @ d_cam
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(camera.center.copy(), d_world, camera.t_near, camera.t_far)


def emit_rays(camera, pixels):
    """Vectorized back-projection: pixels (..., 2) -> origins/dirs (..., 3)
    plus the per-pixel z-component of the unit direction in the camera
    frame (converts ray length t to camera depth z = t * zfac)."""
    px = np.asarray(pixels, dtype=np.float64)
    ones = np.ones(px.shape[:-1] + (1,))
    homog = np.concatenate([px, ones], axis=-1)
    d_cam = homog @ np.linalg.inv(camera.intrinsics).T
    norms = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam_unit = d_cam / norms
    d_world = d_cam_unit @ camera.rotation
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    zfac = d_cam_unit[..., 2]
    return origins, d_world, zfac


def pixel_grid(width, height):
    """All pixel centers as an (H, W, 2) array of (u, v)."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([u, v], axis=-1)


def virtual_view(camera, d):
    """Shift the camera center by `d` meters along its own x-axis; rotation
    and intrinsics are unchanged."""
    if not math.isfinite(d):
        raise CameraError("shift distance must be finite")
    x_axis_world = camera.rotation[0]  # rows of R are the camera axes in world coords
    new_center = camera.center + d * x_axis_world
    new_t = -camera.rotation @ new_center
    return CameraView(
        camera.intrinsics,
        camera.rotation,
        new_t,
        camera.image,
        camera.t_near,
        camera.t_far,
        camera.depth_gt,
        camera.depth_mask,
        camera.name,
    )


# ---------------------------------------------------------------------------
# Source-view selection: rank candidates by a piecewise-Gaussian score of the
# triangulation angle at probe points spread over the scene bounding box.

ANGLE_PEAK_DEG = 10.0
SIGMA_BELOW_DEG = 5.0
SIGMA_ABOVE_DEG = 15.0


def bbox_probe_points(bbox_min, bbox_max):
    """8 corners + 6 face centers of the bounding box."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    mid = 0.5 * (lo + hi)
    pts = []
    for cx in (lo[0], hi[0]):
        for cy in (lo[1], hi[1]):
            for cz in (lo[2], hi[2]):
                pts.append((cx, cy, cz))
    for axis in range(3):
        for val in (lo[axis], hi[axis]):
            p = mid.copy()
            p[axis] = val
            pts.append(tuple(p))
    return np.array(pts)


def _angle_score(theta_deg):
    sigma = np.where(theta_deg <= ANGLE_PEAK_DEG, SIGMA_BELOW_DEG, SIGMA_ABOVE_DEG)
    return np.exp(-((theta_deg - ANGLE_PEAK_DEG) ** 2) / (2.0 * sigma**2))


def view_selection_score(reference, candidate, probes):
    """Sum of angle-preference scores over the probe points; degenerate
    (coincident-center) candidates score 0."""
    c0 = reference.center
    c1 = candidate.center
    if np.linalg.norm(c1 - c0) < 1e-12:
        return 0.0
    a = c0 - probes
    b = c1 - probes
    cosang = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    theta = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return float(np.sum(_angle_score(theta)))


def select_source_views(reference, candidates, n, bbox_min, bbox_max):
    """Indices of the `n` best candidates, descending score, ties broken by
    ascending index."""
    if not candidates:
        raise CameraError("no candidate views")
    if n > len(candidates):
        raise CameraError(f"asked for {n} source views from {len(candidates)} candidates")
    probes = bbox_probe_points(bbox_min, bbox_max)
    scores = [view_selection_score(reference, cand, probes) for cand in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    return order[:n]


# ---------------------------------------------------------------------------
# Camera text files: "extrinsic" + 4x4 world-to-camera matrix, "intrinsic" +
# 3x3 matrix, "depth_range t_near t_far".


def save_camera_text(path, camera):
    E = np.eye(4)
    E[:3, :3] = camera.rotation
    E[:3, 3] = camera.translation
    lines = ["extrinsic"]
    for row in E:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append("intrinsic")
    for row in camera.intrinsics:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append(f"depth_range {float(camera.t_near)!r} {float(camera.t_far)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_camera_text(path):
    """Parse a camera file; returns (K, R, t, t_near, t_far)."""
    with open(path) as fh:
        tokens = [ln.strip() for ln in fh if ln.strip()]
    if tokens[0] != "extrinsic" or tokens[5] != "intrinsic":
        raise CameraError(f"malformed camera file {path}")
    E = np.array([[float(x) for x in tokens[1 + i].split()] for i in range(4)])
    K = np.array([[float(x) for x in tokens[6 + i].split()] for i in range(3)])
    parts = tokens[9].split()
    if parts[0] != "depth_range":
        raise CameraError(f"missing depth_range in {path}")
    return K, E[:3, :3], E[:3, 3], float(parts[1]), float(parts[2])
