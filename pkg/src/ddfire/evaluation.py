"""Mesh extraction, DDF surface points, Chamfer distance and the timing benchmark."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .oracle import write_obj
from .render import DEFAULT_SIGMA_THRESHOLD

CHAMFER_SCALE = 1000.0
MC_LEVEL = 0.001
MIN_ACCEPTANCE = 1e-3


class EvalError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float
    faces: np.ndarray      # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise EvalError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise EvalError("non-finite vertex")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points, triangles picked proportionally to area, uniform within each."""
        if self.empty:
            raise EvalError("cannot sample an empty mesh")
        area = self.areas()
        tri = rng.choice(len(area), size=n, p=area / area.sum())
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        a, b, c = (self.vertices[self.faces[tri, k]] for k in range(3))
        return a + u[:, None] * (b - a) + v[:, None] * (c - a)

    def write_obj(self, path) -> None:
        write_obj(path, self.vertices, self.faces)


def grid_values(sdf, resolution: int, chunk: int = 65536) -> np.ndarray:
    """SDF sampled on a ``resolution^3`` lattice spanning ``[-1, 1]^3`` (index order x, y, z)."""
    axis = np.linspace(-1.0, 1.0, resolution)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(sdf(pts[i:i + chunk]), dtype=np.float64).reshape(-1)
                           for i in range(0, len(pts), chunk)])
    return vals.reshape(resolution, resolution, resolution)


def marching_cubes(sdf, resolution: int = 128, level: float = MC_LEVEL) -> TriangleMesh:
    """Level-set mesh of a batched field ``sdf((B, 3)) -> (B,)`` over ``[-1, 1]^3``."""
    if resolution < 16:
        raise EvalError("marching cubes resolution must be at least 16")
    vol = grid_values(sdf, resolution)
    if not (vol.min() < level < vol.max()):
        warnings.warn("level set is empty; returning an empty mesh", RuntimeWarning, stacklevel=2)
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = 2.0 / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=level, spacing=(spacing,) * 3)
    return TriangleMesh(verts - 1.0, faces)


def model_mesh(models, z, resolution: int = 128, level: float = MC_LEVEL) -> TriangleMesh:
    return marching_cubes(lambda x: models.sdf.evaluate(z, x), resolution, level)


def ddf_surface_points(models, z, n: int, sigma_threshold: float = DEFAULT_SIGMA_THRESHOLD,
                       seed: int = 0, batch: int = 32768) -> np.ndarray:
    """Points ``p + d r`` from random inward rays the DDF predicts as hits.

    Raises :class:`EvalError` once the acceptance rate is measurably below 0.1%.
    """
    rng = np.random.default_rng(seed)
    kept, n_kept, n_tried = [], 0, 0
    while n_kept < n:
        p = rng.normal(size=(batch, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        r = rng.normal(size=(batch, 3))
        r /= np.linalg.norm(r, axis=1, keepdims=True)
        r = np.where(np.sum(r * p, axis=1, keepdims=True) > 0, -r, r)
        d, sigma = models.ddf.evaluate(z, p, r)
        ok = sigma >= sigma_threshold
        n_tried += batch
        x = p[ok] + d[ok, None].astype(np.float64) * r[ok]
        kept.append(x)
        n_kept += len(x)
        if n_kept / n_tried < MIN_ACCEPTANCE:
            raise EvalError(f"ray-hit acceptance {n_kept / n_tried:.2e} below {MIN_ACCEPTANCE:g}")
    return np.concatenate(kept)[:n]


def _nearest_sq(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return d * d


def chamfer(X, Y) -> float:
    """Symmetric mean squared nearest-neighbour distance (unscaled)."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(Y, dtype=np.float64).reshape(-1, 3)
    if not len(X) or not len(Y):
        raise EvalError("chamfer of an empty point set")
    return float(np.mean(_nearest_sq(X, Y))) + float(np.mean(_nearest_sq(Y, X)))


def chamfer_brute(X, Y) -> float:
    """O(N^2) reference for :func:`chamfer`."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(Y, dtype=np.float64).reshape(-1, 3)
    if not len(X) or not len(Y):
        raise EvalError("chamfer of an empty point set")
    d2 = np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1)
    return float(np.mean(d2.min(axis=1))) + float(np.mean(d2.min(axis=0)))


def mesh_chamfer(mesh: TriangleMesh, oracle, n: int = 10_000, seed: int = 0) -> float:
    """Chamfer x1000 between area-weighted mesh samples and analytic surface samples."""
    if mesh.empty:
        return float("inf")
    rng = np.random.default_rng(seed)
    return CHAMFER_SCALE * chamfer(mesh.sample(n, rng), oracle.sample_surface(n, rng))


def ddf_chamfer(models, z, oracle, n: int = 10_000, seed: int = 0) -> float:
    """Chamfer x1000 between DDF surface points and analytic surface samples."""
    pts = ddf_surface_points(models, z, n, seed=seed)
    return CHAMFER_SCALE * chamfer(pts, oracle.sample_surface(n, np.random.default_rng(seed + 1)))


# -- benchmark -------------------------------------------------------------

BENCH_FIELDS = ("method", "scene", "ms_mean", "ms_std", "evals_per_ray", "iterations", "warmup")


@dataclass
class BenchReport:
    method: str
    scene: str
    ms_mean: float
    ms_std: float
    evals_per_ray: float
    iterations: int
    warmup: int

    def as_row(self) -> dict:
        return asdict(self)


def benchmark(method: str, models, obs, iterations: int = 50, warmup: int = 10,
              scene: str = "", z_init=None) -> BenchReport:
    """Time ``iterations`` reconstruction steps after ``warmup`` discarded ones."""
    from .fire import (ReconConfig, reconstruct_from_depth,
                       reconstruct_from_depth_sphere_traced)

    runners = {"fire": reconstruct_from_depth, "sphere-traced": reconstruct_from_depth_sphere_traced}
    if method not in runners:
        raise EvalError(f"unknown method {method!r}; expected one of {sorted(runners)}")
    cfg = ReconConfig.depth_mode(iterations=warmup + iterations)
    res = runners[method](models, obs, cfg, z_init=z_init)
    ms = np.array([row["ms"] for row in res.trace[warmup:]])
    per_ray = (res.ddf_evals_per_iter + res.sdf_evals_per_iter) / max(res.n_rays, 1)
    return BenchReport(method, scene, float(ms.mean()), float(ms.std(ddof=1) if len(ms) > 1 else 0.0),
                       float(per_ray), iterations, warmup)


def write_bench_csv(path, reports: list[BenchReport]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in rep.as_row().items()})
    Path(path).write_text(buf.getvalue())


def read_bench_csv(path) -> list[BenchReport]:
    rows = csv.DictReader(io.StringIO(Path(path).read_text()))
    out = []
    for row in rows:
        out.append(BenchReport(row["method"], row["scene"], float(row["ms_mean"]),
                               float(row["ms_std"]), float(row["evals_per_ray"]),
                               int(row["iterations"]), int(row["warmup"])))
    return out


def format_table(header: list[str], rows: list[list]) -> str:
    """Aligned text table; floats printed with three decimals."""
    cells = [[f"{c:.3f}" if isinstance(c, float) else str(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines) + "\n"


def bench_table(reports: list[BenchReport]) -> str:
    return format_table(["method", "scene", "ms/iteration", "std", "evals/ray"],
                        [[r.method, r.scene, r.ms_mean, r.ms_std, r.evals_per_ray] for r in reports])
