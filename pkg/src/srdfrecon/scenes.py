"""Analytic scenes: exact signed distances, signed ray distances, ray
intersections, and ground-truth renders.

Primitives are spheres, planes, and axis-aligned boxes combined by union
(min of signed distances; exact outside, a lower bound inside overlaps, so
oracle scenes keep primitives disjoint). Sign convention: negative inside.
"""

import colorsys
from dataclasses import dataclass

import numpy as np

BACKGROUND_COLOR = np.zeros(3)
LIGHT_DIR = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
AMBIENT = 0.2
CHECKER_PERIOD = 0.3


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def normal(self, p):
        n = p - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def ray_hits(self, o, v):
        """All boundary crossings t (ascending) of rays o + t v; NaN pads."""
        oc = o - self.center
        b = np.sum(oc * v, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
        t0 = np.where(disc >= 0, -b - root, np.nan)
        t1 = np.where(disc >= 0, -b + root, np.nan)
        return np.stack([t0, t1], axis=-1)


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal_vec: np.ndarray  # unit; positive side is outside

    def sdf(self, p):
        return np.sum((p - self.point) * self.normal_vec, axis=-1)

    def normal(self, p):
        return np.broadcast_to(self.normal_vec, p.shape).copy()

    def ray_hits(self, o, v):
        denom = np.sum(v * self.normal_vec, axis=-1)
        num = -np.sum((o - self.point) * self.normal_vec, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where(np.abs(denom) > 1e-15, t, np.nan)
        return t[..., None]


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def sdf(self, p):
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = np.abs(p - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def normal(self, p):
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        shp = p.shape
        q = ((p - center) / half).reshape(-1, 3)
        axis = np.argmax(np.abs(q), axis=-1)
        rows = np.arange(q.shape[0])
        n = np.zeros_like(q)
        n[rows, axis] = np.sign(q[rows, axis])
        return n.reshape(shp)

    def ray_hits(self, o, v):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (self.lo - o) / v
            t_hi = (self.hi - o) / v
        t1 = np.minimum(t_lo, t_hi)
        t2 = np.maximum(t_lo, t_hi)
        # parallel axes: only constrain if origin is outside the slab
        par = np.abs(v) < 1e-15
        inside_slab = (o >= self.lo) & (o <= self.hi)
        t1 = np.where(par, np.where(inside_slab, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside_slab, np.inf, -np.inf), t2)
        t_enter = np.max(t1, axis=-1)
        t_exit = np.min(t2, axis=-1)
        hit = t_enter <= t_exit
        return np.stack(
            [np.where(hit, t_enter, np.nan), np.where(hit, t_exit, np.nan)], axis=-1
        )


@dataclass(frozen=True)
class SyntheticScene:
    primitives: tuple
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        if not self.primitives:
            raise SceneError("scene needs at least one primitive")
        lo = np.asarray(self.bbox_min, dtype=np.float64)
        hi = np.asarray(self.bbox_max, dtype=np.float64)
        if not np.all(hi > lo):
            raise SceneError("degenerate bounding box")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)
        for prim in self.primitives:
            if isinstance(prim, Sphere):
                if np.any(prim.center - prim.radius < lo) or np.any(prim.center + prim.radius > hi):
                    raise SceneError("sphere outside bounding box")
            elif isinstance(prim, Box):
                if np.any(prim.lo < lo) or np.any(prim.hi > hi):
                    raise SceneError("box outside bounding box")
            elif isinstance(prim, Plane):
                n = np.linalg.norm(prim.normal_vec)
                if abs(n - 1.0) > 1e-10:
                    raise SceneError("plane normal must be unit length")

    @property
    def diameter(self):
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))


def sdf(scene, p):
    """Exact signed distance (min over primitives) for points (..., 3)."""
    p = np.asarray(p, dtype=np.float64)
    values = np.stack([prim.sdf(p) for prim in scene.primitives], axis=0)
    return values.min(axis=0)


def surface_normal(scene, p):
    """Outward normal of the closest primitive at points (..., 3)."""
    p = np.asarray(p, dtype=np.float64)
    values = np.stack([prim.sdf(p) for prim in scene.primitives], axis=0)
    best = np.argmin(np.abs(values), axis=0)
    normals = np.stack([prim.normal(p) for prim in scene.primitives], axis=0)
    idx = np.indices(best.shape)
    return normals[(best, *idx)]


def _all_crossings(scene, o, v):
    """Boundary-crossing parameters for rays (..., 3); NaN-padded (..., n)."""
    hits = [prim.ray_hits(o, v) for prim in scene.primitives]
    return np.concatenate(hits, axis=-1)


def first_hit(scene, o, v, t_min=0.0, t_max=np.inf):
    """Smallest crossing parameter in (t_min, t_max]; NaN where none."""
    ts = _all_crossings(scene, o, v)
    with np.errstate(invalid="ignore"):
        ts = np.where((ts > t_min) & (ts <= t_max), ts, np.inf)
    t = ts.min(axis=-1)
    return np.where(np.isfinite(t), t, np.nan)


def srdf(scene, p, v, eps=1e-12):
    """Signed distance to the first surface crossing along the ray
    direction: (-1)^inside * t_first. Rays with no crossing ahead clamp to
    +/- scene diameter."""
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    t = first_hit(scene, p, v, t_min=eps)
    inside = sdf(scene, p) < 0
    sign = np.where(inside, -1.0, 1.0)
    dist = np.where(np.isnan(t), scene.diameter, t)
    return sign * dist


def ray_intersect(scene, ray):
    """First hit parameter within the ray's [t_near, t_far], or None."""
    t_lo = np.nextafter(ray.t_near, -np.inf)  # make t_near inclusive
    t = first_hit(scene, ray.origin, ray.direction, t_min=t_lo, t_max=ray.t_far)
    return None if np.isnan(t) else float(t)


def _hash_unit(ix, iy, iz):
    """Deterministic pseudo-random float in [0, 1) from integer cell ids."""
    h = (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791)
    h = np.abs(h).astype(np.uint64)
    h = (h * np.uint64(2654435761)) % np.uint64(2**32)
    return h.astype(np.float64) / 2.0**32


def albedo(p):
    """Procedural texture: 3-D checkerboard blended with a hue hashed from
    the cell index, so neighbouring cells differ in both value and color."""
    p = np.asarray(p, dtype=np.float64)
    cell = np.floor(p / (CHECKER_PERIOD / 2.0)).astype(np.int64)
    parity = (cell.sum(axis=-1) % 2).astype(np.float64)
    base = 0.35 + 0.45 * parity
    hue = _hash_unit(cell[..., 0], cell[..., 1], cell[..., 2])
    flat_hue = np.atleast_1d(hue).reshape(-1)
    rgb = np.array([colorsys.hsv_to_rgb(h, 0.55, 1.0) for h in flat_hue])
    rgb = rgb.reshape(hue.shape + (3,))
    return np.clip(0.5 * base[..., None] + 0.5 * rgb * base[..., None] * 1.2, 0.0, 1.0)


def shade(scene, p):
    """Lambertian shading with a fixed directional light plus ambient."""
    n = surface_normal(scene, p)
    lambert = np.maximum(0.0, np.sum(n * LIGHT_DIR, axis=-1))
    light = np.minimum(AMBIENT + lambert, 1.0)
    return np.clip(albedo(p) * light[..., None], 0.0, 1.0)


def render_ground_truth(scene, camera):
    """Exact render: per-pixel color (H, W, 3), camera-z depth (H, W), and
    hit mask (H, W). Misses get the background color and an invalid depth."""
    from .cameras import emit_rays, pixel_grid

    px = pixel_grid(camera.width, camera.height)
    origins, dirs, zfac = emit_rays(camera, px)
    t = first_hit(scene, origins, dirs, t_min=camera.t_near, t_max=camera.t_far)
    mask = ~np.isnan(t)
    t_safe = np.where(mask, t, 1.0)
    pts = origins + t_safe[..., None] * dirs
    color = shade(scene, pts)
    color = np.where(mask[..., None], color, BACKGROUND_COLOR)
    depth = np.where(mask, t_safe * zfac, 0.0)
    return color, depth, mask


# ---------------------------------------------------------------------------
# Scene description files: one record per line, '#' comments.
#   sphere cx cy cz r
#   plane  px py pz nx ny nz
#   box    x0 y0 z0 x1 y1 z1
#   bbox   x0 y0 z0 x1 y1 z1


def save_scene_text(path, scene):
    lines = []
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            vals = [*prim.center, prim.radius]
            lines.append("sphere " + " ".join(repr(float(x)) for x in vals))
        elif isinstance(prim, Plane):
            vals = [*prim.point, *prim.normal_vec]
            lines.append("plane " + " ".join(repr(float(x)) for x in vals))
        elif isinstance(prim, Box):
            vals = [*prim.lo, *prim.hi]
            lines.append("box " + " ".join(repr(float(x)) for x in vals))
    vals = [*scene.bbox_min, *scene.bbox_max]
    lines.append("bbox " + " ".join(repr(float(x)) for x in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene_text(path):
    prims = []
    bbox = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind, vals = parts[0], [float(x) for x in parts[1:]]
            if kind == "sphere" and len(vals) == 4:
                prims.append(Sphere(np.array(vals[:3]), vals[3]))
            elif kind == "plane" and len(vals) == 6:
                n = np.array(vals[3:])
                n = n / np.linalg.norm(n)
                prims.append(Plane(np.array(vals[:3]), n))
            elif kind == "box" and len(vals) == 6:
                prims.append(Box(np.array(vals[:3]), np.array(vals[3:])))
            elif kind == "bbox" and len(vals) == 6:
                bbox = (np.array(vals[:3]), np.array(vals[3:]))
            else:
                raise SceneError(f"{path}:{lineno}: bad record {line!r}")
    if bbox is None:
        raise SceneError(f"{path}: missing bbox record")
    return SyntheticScene(tuple(prims), bbox[0], bbox[1])


def sphere_plane_scene():
    """The standard smoke-test scene: a sphere resting on a ground plane."""
    prims = (
        Sphere(np.array([0.0, 0.0, 0.35]), 0.3),
        Plane(np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])),
    )
    return SyntheticScene(prims, np.array([-0.65, -0.65, -0.05]), np.array([0.65, 0.65, 0.75]))
