"""Cameras, ray generation, DDF and sphere-traced rendering, normals, shading and image IO.

Depth throughout is the projective depth ``lam`` of ``lam * [u, v, 1] = P [x; 1]``,
not the Euclidean ray length.  For a ``look_at`` camera this is the camera-frame
z coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

DEFAULT_SIGMA_THRESHOLD = 0.8
SURFACE_EPS = 5e-4
MAX_TRACE_STEPS = 50
NORMAL_STEP = 1e-3
FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera ``P = K [R | t]`` producing ``width x height`` images."""

    P: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        if self.width <= 0 or self.height <= 0:
            raise CameraError(f"bad image size {self.width}x{self.height}")
        if not np.all(np.isfinite(self.P)) or np.linalg.matrix_rank(self.P[:, :3]) < 3:
            raise CameraError("projection matrix must be finite with an invertible left 3x3 block")

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), fov_deg: float = 40.0,
                width: int = 128, height: int = 128) -> "Camera":
        """Camera at ``eye`` facing ``target``; x right, y down, z forward in camera frame."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        if np.linalg.norm(forward) < 1e-12:
            raise CameraError("eye and target coincide")
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        K = np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])
        return cls(K @ np.hstack([R, (-R @ eye)[:, None]]), width, height)

    @property
    def center(self) -> np.ndarray:
        M, p4 = self.P[:, :3], self.P[:, 3]
        return -np.linalg.solve(M, p4)

    @property
    def orientation(self) -> np.ndarray:
        """Rotation part of ``P`` (rows: camera x, y, z axes in world coordinates)."""
        q, _ = np.linalg.qr(np.flipud(self.P[:, :3]).T)
        R = np.flipud(q.T)
        signs = np.sign(np.diag(R @ self.P[:, :3].T))
        signs[signs == 0] = 1
        return R * signs[:, None]

    def depth(self, x) -> np.ndarray:
        """Projective depth ``P[2] . [x; 1]`` of world points ``x``."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.P[2, :3] + self.P[2, 3]

    def project(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Image coordinates ``(u, v)`` and depth ``lam`` of world points."""
        x = np.asarray(x, dtype=np.float64)
        h = x @ self.P[:, :3].T + self.P[:, 3]
        return h[..., :2] / h[..., 2:3], h[..., 2]

    def to_text(self) -> str:
        rows = [" ".join(repr(float(v)) for v in self.P.ravel())]
        return "\n".join([
            "# pinhole camera: P row-major (3x4), pose, resolution",
            f"P {rows[0]}",
            "position " + " ".join(repr(float(v)) for v in self.center),
            "orientation " + " ".join(repr(float(v)) for v in self.orientation.ravel()),
            f"resolution {self.width} {self.height}",
            "",
        ])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "Camera":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, *vals = line.split()
            fields[key] = vals
        try:
            P = np.array([float(v) for v in fields["P"]])
            w, h = (int(v) for v in fields["resolution"])
        except (KeyError, ValueError) as exc:
            raise CameraError(f"malformed camera file: {exc}") from exc
        if P.size != 12:
            raise CameraError("P must have 12 entries")
        return cls(P.reshape(3, 4), w, h)

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_text(Path(path).read_text())


def sphere_interval(o, r) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Roots of ``|o + t r|^2 = 1`` for unit ``r``: ``(hit, t_near, t_far)``.

    ``t_near`` is the smallest non-negative root, so a ray starting inside the
    sphere reports its exit point.  Misses carry ``nan`` for both roots.
    """
    o = np.asarray(o, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    o, r = np.broadcast_arrays(np.atleast_2d(o), np.atleast_2d(r))
    b = np.sum(o * r, axis=1)
    c = np.sum(o * o, axis=1) - 1.0
    disc = b * b - c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0, t1 = -b - root, -b + root
    hit &= t1 >= 0
    t_near = np.where(t0 >= 0, t0, t1)
    return hit, np.where(hit, t_near, np.nan), np.where(hit, t1, np.nan)


def intersect_unit_sphere(o, r) -> tuple[np.ndarray, np.ndarray]:
    """Near intersection ``p`` of rays with the unit sphere; ``p`` is ``nan`` on a miss."""
    single = np.asarray(o).ndim == 1 and np.asarray(r).ndim == 1
    hit, t, _ = sphere_interval(o, r)
    o2, r2 = np.broadcast_arrays(np.atleast_2d(o), np.atleast_2d(r))
    p = o2 + t[:, None] * r2
    if single:
        return bool(hit[0]), p[0]
    return hit, p


@dataclass
class RayBundle:
    """Per-pixel rays in row-major pixel order."""

    origin: np.ndarray      # (3,) camera center
    directions: np.ndarray  # (H*W, 3), unit
    hit: np.ndarray         # (H*W,) ray meets the unit sphere
    entry: np.ndarray       # (H*W, 3) sphere entry point (nan on miss)
    t_entry: np.ndarray     # (H*W,) ray parameter of the entry point
    t_exit: np.ndarray      # (H*W,) ray parameter of the far sphere crossing
    shape: tuple[int, int]

    @property
    def n_hit(self) -> int:
        return int(self.hit.sum())


def generate_rays(camera: Camera) -> RayBundle:
    """One unit ray per pixel center ``(j + 0.5, i + 0.5)``, cached sphere intersections."""
    w, h = camera.width, camera.height
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([jj.ravel(), ii.ravel(), np.ones(w * h)], axis=1)
    dirs = np.linalg.solve(camera.P[:, :3], pix.T).T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    o = camera.center
    hit, t0, t1 = sphere_interval(o, dirs)
    entry = o + t0[:, None] * dirs
    return RayBundle(o, dirs, hit, entry, t0, t1, (h, w))


@dataclass
class DepthImage:
    """Projective depth (0 where ``mask`` is false), mask, and optional extras."""

    depth: np.ndarray
    mask: np.ndarray
    sigma: np.ndarray | None = None
    points: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def _assemble(camera: Camera, rays: RayBundle, idx: np.ndarray, hit: np.ndarray,
              x: np.ndarray, sigma=None) -> DepthImage:
    h, w = rays.shape
    depth = np.zeros(h * w)
    mask = np.zeros(h * w, dtype=bool)
    points = np.full((h * w, 3), np.nan)
    sel = idx[hit]
    mask[sel] = True
    points[sel] = x[hit]
    depth[sel] = camera.depth(x[hit])
    sig = None
    if sigma is not None:
        sig = np.zeros(h * w)
        sig[idx] = sigma
    return DepthImage(depth.reshape(h, w), mask.reshape(h, w),
                      None if sig is None else sig.reshape(h, w), points.reshape(h, w, 3))


def render_oracle(oracle, camera: Camera, rays: RayBundle | None = None) -> DepthImage:
    """Ground-truth depth image of an analytic shape."""
    rays = rays or generate_rays(camera)
    idx = np.flatnonzero(rays.hit)
    p, r = rays.entry[idx], rays.directions[idx]
    hit, d = oracle.ray_cast(p, r) if len(idx) else (np.zeros(0, bool), np.zeros(0))
    x = p + np.where(hit, d, 0.0)[:, None] * r
    return _assemble(camera, rays, idx, np.asarray(hit, bool), x)


def render_ddf(models, z, camera: Camera, sigma_threshold: float = DEFAULT_SIGMA_THRESHOLD,
               rays: RayBundle | None = None) -> tuple[DepthImage, int]:
    """One DDF evaluation per sphere-hit pixel.  Returns the image and the evaluation count."""
    rays = rays or generate_rays(camera)
    idx = np.flatnonzero(rays.hit)
    before = models.ddf.evaluations
    if len(idx):
        p, r = rays.entry[idx], rays.directions[idx]
        d, sigma = models.ddf.evaluate(z, p, r)
        d, sigma = d.astype(np.float64), sigma.astype(np.float64)
    else:
        p = r = np.zeros((0, 3))
        d = sigma = np.zeros(0)
    x = p + d[:, None] * r
    count = models.ddf.evaluations - before
    return _assemble(camera, rays, idx, sigma >= sigma_threshold, x, sigma), count


@dataclass
class TraceResult:
    hit: np.ndarray      # (B,) bool
    t: np.ndarray        # (B,) distance from the start point (nan on miss)
    evals: np.ndarray    # (B,) SDF evaluations spent per ray
    steps: np.ndarray    # (B,) march steps taken per ray
    t_last: np.ndarray   # (B,) where the march stopped, clipped to max_t

    @property
    def total_evals(self) -> int:
        return int(self.evals.sum())


def sphere_trace(sdf: Callable[[np.ndarray], np.ndarray], p, r, max_t=None,
                 max_steps: int = MAX_TRACE_STEPS, surface_eps: float = SURFACE_EPS,
                 tau: float | None = None) -> TraceResult:
    """March ``t <- t + f(p + t r)`` from ``t = 0`` for a batch of rays.

    ``sdf`` maps ``(B, 3)`` points to ``(B,)`` values.  With ``tau`` set the
    step is clamped to ``tau`` (truncated fields).  A ray hits when
    ``|f| < surface_eps``; if the march crosses to a negative value instead, one
    secant step between the last two samples locates the surface.  ``max_t``
    defaults to the far unit-sphere crossing.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    n = len(p)
    if max_t is None:
        _, _, max_t = sphere_interval(p, r)
        max_t = np.nan_to_num(max_t, nan=0.0)
    max_t = np.broadcast_to(np.asarray(max_t, dtype=np.float64), (n,))
    t = np.zeros(n)
    t_prev = np.full(n, np.nan)
    f_prev = np.full(n, np.nan)
    hit = np.zeros(n, dtype=bool)
    evals = np.zeros(n, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)

    for _ in range(max_steps + 1):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        f = np.asarray(sdf(p[idx] + t[idx, None] * r[idx]), dtype=np.float64).reshape(-1)
        evals[idx] += 1
        close = np.abs(f) < surface_eps
        crossed = ~close & (f < 0)
        hit[idx[close]] = True
        active[idx[close]] = False

        ci = idx[crossed]
        if len(ci):
            fc = f[crossed]
            has_prev = np.isfinite(f_prev[ci])
            # started inside the shape: report the start point
            hit[ci[~has_prev]] = True
            t[ci[~has_prev]] = 0.0
            sp = ci[has_prev]
            if len(sp):
                fp, tp = f_prev[sp], t_prev[sp]
                ts = tp + (t[sp] - tp) * fp / (fp - fc[has_prev])
                evals[sp] += 1
                f_s = np.asarray(sdf(p[sp] + ts[:, None] * r[sp]), dtype=np.float64).reshape(-1)
                t[sp] = np.where(np.isfinite(f_s), ts, t[sp])
                hit[sp] = True
            active[ci] = False

        mi = idx[~close & ~crossed]
        if len(mi):
            fm = f[~close & ~crossed]
            step = fm if tau is None else np.minimum(fm, tau)
            t_prev[mi] = t[mi]
            f_prev[mi] = fm
            t[mi] += step
            steps[mi] += 1
            out = t[mi] > max_t[mi]
            active[mi[out]] = False
        active &= steps < max_steps
    return TraceResult(hit, np.where(hit, t, np.nan), evals, steps, np.minimum(t, max_t))


def model_sdf(models, z) -> Callable[[np.ndarray], np.ndarray]:
    """Batch SDF callable for a trained model at latent ``z``."""
    return lambda x: models.sdf.evaluate(z, x).astype(np.float64)


def render_sphere_traced(models, z, camera: Camera, rays: RayBundle | None = None,
                         max_steps: int = MAX_TRACE_STEPS,
                         surface_eps: float = SURFACE_EPS) -> tuple[DepthImage, TraceResult]:
    """Baseline renderer: sphere-trace the SDF from each sphere entry point."""
    rays = rays or generate_rays(camera)
    idx = np.flatnonzero(rays.hit)
    p, r = rays.entry[idx], rays.directions[idx]
    res = sphere_trace(model_sdf(models, z), p, r, max_t=rays.t_exit[idx] - rays.t_entry[idx],
                       max_steps=max_steps, surface_eps=surface_eps, tau=models.config.tau)
    x = p + np.nan_to_num(res.t)[:, None] * r
    return _assemble(camera, rays, idx, res.hit, x), res


def normals(sdf: Callable[[np.ndarray], np.ndarray], x, h: float = NORMAL_STEP
            ) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals by central differences (6 SDF evaluations per point).

    Returns ``(n, degenerate)``; degenerate points get ``(0, 0, 1)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    offsets = np.vstack([np.eye(3), -np.eye(3)]) * h
    probes = (x[:, None, :] + offsets[None]).reshape(-1, 3)
    f = np.asarray(sdf(probes), dtype=np.float64).reshape(len(x), 6)
    grad = (f[:, :3] - f[:, 3:]) / (2 * h)
    norm = np.linalg.norm(grad, axis=1)
    bad = ~(norm > 1e-12)
    n = np.where(bad[:, None], FALLBACK_NORMAL, grad / np.where(bad, 1.0, norm)[:, None])
    return n, bad


def image_normals(sdf, image: DepthImage) -> np.ndarray:
    """``(H, W, 3)`` normals at masked pixels of ``image`` (zeros elsewhere)."""
    out = np.zeros(image.shape + (3,))
    if image.mask.any():
        out[image.mask], _ = normals(sdf, image.points[image.mask])
    return out


@dataclass
class Material:
    color: tuple = (0.72, 0.78, 0.9)
    ambient: float = 0.15
    diffuse: float = 0.75
    specular: float = 0.25
    shininess: float = 32.0
    background: tuple = (1.0, 1.0, 1.0)


def shade(image: DepthImage, normal_map: np.ndarray, light, material: Material | None = None
          ) -> np.ndarray:
    """Blinn-Phong headlight shading to 8-bit RGB.

    ``light`` is the unit direction toward the light, ``(3,)`` or per pixel
    ``(H, W, 3)``; the viewer sits at the light (headlight) so the half vector
    equals the light direction.
    """
    m = material or Material()
    h, w = image.shape
    L = np.broadcast_to(np.asarray(light, dtype=np.float64), (h, w, 3))
    ndl = np.clip(np.sum(normal_map * L, axis=-1), 0.0, None)
    spec = ndl ** m.shininess
    base = np.asarray(m.color)
    rgb = (m.ambient + m.diffuse * ndl)[..., None] * base + (m.specular * spec)[..., None]
    rgb = np.where(image.mask[..., None], rgb, np.asarray(m.background))
    return np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)


def headlight(camera: Camera, rays: RayBundle | None = None) -> np.ndarray:
    rays = rays or generate_rays(camera)
    return -rays.directions.reshape(rays.shape + (3,))


def write_image(path, pixels) -> None:
    """8-bit PNG; boolean masks are written as 0/255 grayscale."""
    a = np.asarray(pixels)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.dtype != np.uint8:
        raise ValueError("image must be uint8 or bool")
    Image.fromarray(a).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def read_mask(path) -> np.ndarray:
    a = read_image(path)
    if a.ndim == 3:
        a = a[..., 0]
    return a > 127


def write_depth(path, depth) -> None:
    """Little-endian PFM: ``Pf\\n<w> <h>\\n-1.0\\n`` then float32 rows, bottom row first."""
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("depth must be 2-D")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise ValueError(f"{path}: not a grayscale PFM file")
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype, count=w * h).reshape(h, w)
    return data[::-1].astype(np.float32)
