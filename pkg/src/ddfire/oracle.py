"""Exact SDF / DDF ground truth for analytic shapes and triangle meshes.

All shapes live strictly inside the unit sphere.  Functions are vectorised:
points are ``(B, 3)`` arrays (a single ``(3,)`` point is also accepted and
returns a scalar).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

TRUNCATION = 0.1
SDF_PAD = 0.01
NOISE_SIGMAS = (0.005, 0.05)
MAX_REJECTION_ATTEMPTS = 10_000

KINDS = ("sphere", "box", "torus", "union", "mesh")


class OracleError(ValueError):
    """Invalid shape definition or query."""


class GenerationError(RuntimeError):
    """Sampling could not produce the requested samples."""


def _as_points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != 3:
        raise OracleError(f"expected points with 3 coordinates, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise OracleError("non-finite coordinates")
    return x, single


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def unit_sphere_exit(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Far intersection parameter of ``p + t r`` with the unit sphere (0 if none)."""
    b = np.sum(p * r, axis=-1)
    c = np.sum(p * p, axis=-1) - 1.0
    disc = np.maximum(b * b - c, 0.0)
    return np.maximum(-b + np.sqrt(disc), 0.0)


# ---------------------------------------------------------------------------
# Triangle meshes
# ---------------------------------------------------------------------------

def _closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to p; all arrays (M, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
    v = vb / denom
    w = vc / denom
    out = a + ab * v[:, None] + ac * w[:, None]

    def put(mask, value):
        out[mask] = value[mask]

    # edge regions (order matters: vertex regions override below)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + (c - b) * t_bc[:, None])
        t_ac = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[:, None])
        t_ab = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[:, None])
    put((d6 >= 0) & (d5 <= d6), c)
    put((d3 >= 0) & (d4 <= d3), b)
    put((d1 <= 0) & (d2 <= 0), a)
    return out


def _ray_triangles(o, r, a, e1, e2, eps=1e-12):
    """Moller-Trumbore: t for rays (B,3) against triangles (M,3); inf where no hit."""
    pvec = np.cross(r[:, None, :], e2[None, :, :])
    det = np.einsum("mk,bmk->bm", e1, pvec)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = o[:, None, :] - a[None, :, :]
    u = np.einsum("bmk,bmk->bm", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("bk,bmk->bm", r, qvec) * inv
    t = np.einsum("mk,bmk->bm", e2, qvec) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(hit, t, np.inf)


@dataclass(frozen=True)
class TriangleSoup:
    vertices: np.ndarray
    faces: np.ndarray
    tree: cKDTree = field(repr=False, compare=False)
    reach: float = 0.0

    @classmethod
    def build(cls, vertices, faces) -> "TriangleSoup":
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(faces, dtype=np.intp)
        if f.ndim != 2 or f.shape[1] != 3 or f.size == 0:
            raise OracleError("mesh needs a non-empty (M, 3) face array")
        if f.min() < 0 or f.max() >= len(v):
            raise OracleError("face index out of range")
        tri = v[f]
        centroid = tri.mean(axis=1)
        reach = float(np.max(np.linalg.norm(tri - centroid[:, None, :], axis=-1)))
        v.setflags(write=False)
        f.setflags(write=False)
        return cls(v, f, cKDTree(centroid), reach)

    @property
    def corners(self):
        tri = self.vertices[self.faces]
        return tri[:, 0], tri[:, 1], tri[:, 2]

    def unsigned_distance(self, x: np.ndarray) -> np.ndarray:
        a, b, c = self.corners
        d0, _ = self.tree.query(x)
        out = np.empty(len(x))
        for i, (q, r0) in enumerate(zip(x, d0)):
            cand = self.tree.query_ball_point(q, r0 + 2 * self.reach + 1e-12)
            cand = np.asarray(cand, dtype=np.intp)
            qq = np.broadcast_to(q, (len(cand), 3))
            cp = _closest_point_on_triangles(qq, a[cand], b[cand], c[cand])
            out[i] = np.sqrt(np.min(np.sum((cp - qq) ** 2, axis=1)))
        return out

    def ray_hits(self, o: np.ndarray, r: np.ndarray, chunk: int = 64) -> np.ndarray:
        a, b, c = self.corners
        e1, e2 = b - a, c - a
        out = np.empty(len(o))
        for s in range(0, len(o), chunk):
            t = _ray_triangles(o[s:s + chunk], r[s:s + chunk], a, e1, e2)
            out[s:s + chunk] = t.min(axis=1)
        return out

    def inside(self, x: np.ndarray, seed: int = 0) -> np.ndarray:
        """Ray-parity inside test, majority vote over three jittered directions."""
        rng = np.random.default_rng(seed)
        base = np.array([[0.5773, 0.5774, 0.5775], [-0.6, 0.64, 0.48], [0.28, -0.96, 0.05]])
        dirs = _unit(base + 1e-3 * rng.standard_normal(base.shape))
        a, b, c = self.corners
        e1, e2 = b - a, c - a
        votes = np.zeros(len(x), dtype=int)
        for d in dirs:
            r = np.broadcast_to(d, x.shape)
            crossings = np.zeros(len(x), dtype=int)
            for s in range(0, len(x), 64):
                t = _ray_triangles(x[s:s + 64], r[s:s + 64], a, e1, e2)
                crossings[s:s + 64] = np.sum(np.isfinite(t), axis=1)
            votes += crossings % 2
        return votes >= 2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        a, b, c = self.corners
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        idx = rng.choice(len(area), size=n, p=area / area.sum())
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        return a[idx] + (b[idx] - a[idx]) * u[:, None] + (c[idx] - a[idx]) * v[:, None]


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``v`` and ``f`` lines of an ASCII OBJ (polygons are fan-triangulated)."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(t.split("/")[0]) for t in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.intp)


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def icosphere(radius: float = 1.0, subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return np.array(verts) * radius, np.array(faces, dtype=np.intp)


# ---------------------------------------------------------------------------
# Shape oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeOracle:
    """Immutable analytic or mesh shape.  Build with the ``sphere``/``box``/... helpers."""

    kind: str
    params: tuple = ()
    children: tuple = ()
    mesh: TriangleSoup | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OracleError(f"unknown shape kind {self.kind!r}")
        if self.kind == "union" and len(self.children) != 2:
            raise OracleError("union needs exactly two children")
        if self.kind == "mesh" and self.mesh is None:
            raise OracleError("mesh shape needs triangles")
        extent = self.extent()
        if not extent < 1.0:
            raise OracleError(f"shape reaches radius {extent:.4g}; must stay inside the unit sphere")

    # -- constructors ---------------------------------------------------
    @classmethod
    def sphere(cls, radius: float, center=(0.0, 0.0, 0.0)) -> "ShapeOracle":
        if radius <= 0:
            raise OracleError("sphere radius must be positive")
        return cls("sphere", (float(radius), *map(float, center)))

    @classmethod
    def box(cls, half_extents, center=(0.0, 0.0, 0.0)) -> "ShapeOracle":
        h = tuple(float(v) for v in half_extents)
        if len(h) != 3 or min(h) <= 0:
            raise OracleError("box needs three positive half-extents")
        return cls("box", (*h, *map(float, center)))

    @classmethod
    def torus(cls, major: float, minor: float, center=(0.0, 0.0, 0.0)) -> "ShapeOracle":
        if not 0 < minor < major:
            raise OracleError("torus needs 0 < minor < major")
        return cls("torus", (float(major), float(minor), *map(float, center)))

    @classmethod
    def union(cls, a: "ShapeOracle", b: "ShapeOracle") -> "ShapeOracle":
        return cls("union", children=(a, b))

    @classmethod
    def from_mesh(cls, vertices, faces) -> "ShapeOracle":
        soup = TriangleSoup.build(vertices, faces)
        return cls("mesh", (), (), soup)

    @classmethod
    def from_obj(cls, path) -> "ShapeOracle":
        return cls.from_mesh(*read_obj(path))

    # -- description ----------------------------------------------------
    def extent(self) -> float:
        """Largest distance from the origin to any surface point."""
        k, p = self.kind, self.params
        if k == "sphere":
            return p[0] + float(np.linalg.norm(p[1:4]))
        if k == "box":
            return float(np.linalg.norm(p[:3])) + float(np.linalg.norm(p[3:6]))
        if k == "torus":
            return p[0] + p[1] + float(np.linalg.norm(p[2:5]))
        if k == "union":
            return max(c.extent() for c in self.children)
        return float(np.max(np.linalg.norm(self.mesh.vertices, axis=1)))

    def describe(self) -> dict:
        if self.kind == "union":
            return {"kind": "union", "children": [c.describe() for c in self.children]}
        if self.kind == "mesh":
            return {"kind": "mesh", "triangles": int(len(self.mesh.faces))}
        return {"kind": self.kind, "params": list(self.params)}

    # -- queries ----------------------------------------------------------
    def sdf(self, x) -> np.ndarray:
        pts, single = _as_points(x)
        out = self._sdf(pts)
        return out[0] if single else out

    def _sdf(self, x: np.ndarray) -> np.ndarray:
        k, p = self.kind, self.params
        if k == "sphere":
            return np.linalg.norm(x - np.asarray(p[1:4]), axis=1) - p[0]
        if k == "box":
            q = np.abs(x - np.asarray(p[3:6])) - np.asarray(p[:3])
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            return outside + np.minimum(np.max(q, axis=1), 0.0)
        if k == "torus":
            y = x - np.asarray(p[2:5])
            ring = np.hypot(y[:, 0], y[:, 1]) - p[0]
            return np.hypot(ring, y[:, 2]) - p[1]
        if k == "union":
            return np.minimum(self.children[0]._sdf(x), self.children[1]._sdf(x))
        dist = self.mesh.unsigned_distance(x)
        return np.where(self.mesh.inside(x), -dist, dist)

    def ray_cast(self, p, r) -> tuple[np.ndarray, np.ndarray]:
        """Nearest surface hit along ``p + t r`` inside the unit sphere.

        Returns ``(hit, d)``; ``d`` is ``inf`` where ``hit`` is false.
        """
        pts, single = _as_points(p)
        dirs, _ = _as_points(r)
        dirs = np.broadcast_to(dirs, pts.shape)
        n = np.linalg.norm(dirs, axis=1)
        if np.any(n < 1e-8):
            raise OracleError("degenerate ray direction")
        dirs = dirs / n[:, None]
        t = self._ray(pts, dirs)
        t_exit = unit_sphere_exit(pts, dirs)
        t = np.where(t <= t_exit + 1e-12, t, np.inf)
        hit = np.isfinite(t)
        if single:
            return bool(hit[0]), float(t[0])
        return hit, t

    def _ray(self, o: np.ndarray, r: np.ndarray) -> np.ndarray:
        k, p = self.kind, self.params
        if k == "sphere":
            oc = o - np.asarray(p[1:4])
            b = np.sum(oc * r, axis=1)
            c = np.sum(oc * oc, axis=1) - p[0] ** 2
            disc = b * b - c
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 >= 0, t0, np.where(c <= 0, 0.0, np.inf))
            return np.where((disc >= 0) & (t1 >= 0), t, np.inf)
        if k == "box":
            lo = np.asarray(p[3:6]) - np.asarray(p[:3])
            hi = np.asarray(p[3:6]) + np.asarray(p[:3])
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / r
                ta = (lo - o) * inv
                tb = (hi - o) * inv
            ta = np.where(np.isnan(ta), -np.inf, ta)
            tb = np.where(np.isnan(tb), np.inf, tb)
            tmin = np.max(np.minimum(ta, tb), axis=1)
            tmax = np.min(np.maximum(ta, tb), axis=1)
            ok = (tmax >= np.maximum(tmin, 0.0))
            return np.where(ok, np.maximum(tmin, 0.0), np.inf)
        if k == "torus":
            return self._ray_bisect(o, r)
        if k == "union":
            return np.minimum(self.children[0]._ray(o, r), self.children[1]._ray(o, r))
        return self.mesh.ray_hits(o, r)

    def _ray_bisect(self, o, r, tol: float = 1e-7, bracket: float = 1e-4) -> np.ndarray:
        """Sign-bracketing along the ray (Lipschitz-safe marching), then bisection."""
        n = len(o)
        t = np.zeros(n)
        t_exit = unit_sphere_exit(o, r)
        out = np.full(n, np.inf)
        active = np.arange(n)
        probes = np.arange(1, 41) * (bracket * 0.5)
        for _ in range(4000):
            if active.size == 0:
                break
            oa, ra, ta = o[active], r[active], t[active]
            f = self._sdf(oa + ta[:, None] * ra)
            resolved = np.zeros(active.size, dtype=bool)
            start_inside = f <= 0
            out[active[start_inside]] = ta[start_inside]
            resolved |= start_inside
            near = (f < bracket) & ~start_inside
            t[active] = ta + np.maximum(f, 0.0)
            if np.any(near):
                sel = np.flatnonzero(near)
                on, rn, tn = oa[sel], ra[sel], ta[sel]
                tt = tn[:, None] + probes[None, :]
                vals = self._sdf((on[:, None, :] + tt[..., None] * rn[:, None, :]).reshape(-1, 3))
                neg = vals.reshape(len(sel), -1) < 0
                found = neg.any(axis=1)
                first = np.argmax(neg, axis=1)
                rows = np.arange(len(sel))
                lo = np.where(first > 0, tt[rows, np.maximum(first - 1, 0)], tn)[found]
                hi = tt[rows, first][found]
                of, rf = on[found], rn[found]
                while lo.size and np.max(hi - lo) > tol:
                    mid = 0.5 * (lo + hi)
                    fm = self._sdf(of + mid[:, None] * rf)
                    lo = np.where(fm > 0, mid, lo)
                    hi = np.where(fm > 0, hi, mid)
                out[active[sel[found]]] = 0.5 * (lo + hi)
                resolved[sel[found]] = True
                # grazing approach without a crossing: step past the probe window
                t[active[sel[~found]]] = tn[~found] + probes[-1]
            resolved |= t[active] > t_exit[active]
            active = active[~resolved]
        return out

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k, p = self.kind, self.params
        if k == "sphere":
            return np.asarray(p[1:4]) + p[0] * _unit(rng.standard_normal((n, 3)))
        if k == "box":
            h = np.asarray(p[:3])
            areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
            face = rng.choice(6, size=n, p=areas / areas.sum())
            pts = (rng.random((n, 3)) * 2 - 1) * h
            axis = face % 3
            sign = np.where(face < 3, 1.0, -1.0)
            pts[np.arange(n), axis] = sign * h[axis]
            return pts + np.asarray(p[3:6])
        if k == "torus":
            R, rr = p[0], p[1]
            out = np.empty((0, 3))
            while len(out) < n:
                m = 2 * (n - len(out)) + 16
                u = rng.random(m) * 2 * np.pi
                v = rng.random(m) * 2 * np.pi
                keep = rng.random(m) * (R + rr) < R + rr * np.cos(v)
                u, v = u[keep], v[keep]
                ring = R + rr * np.cos(v)
                pts = np.stack([ring * np.cos(u), ring * np.sin(u), rr * np.sin(v)], axis=1)
                out = np.concatenate([out, pts])
            return out[:n] + np.asarray(p[2:5])
        if k == "union":
            a, b = self.children
            out = np.empty((0, 3))
            for _ in range(MAX_REJECTION_ATTEMPTS):
                m = 2 * (n - len(out)) + 16
                pa = a.sample_surface(m, rng)
                pb = b.sample_surface(m, rng)
                cand = np.concatenate([pa[b._sdf(pa) >= 0], pb[a._sdf(pb) >= 0]])
                cand = cand[rng.permutation(len(cand))]
                out = np.concatenate([out, cand])
                if len(out) >= n:
                    return out[:n]
            raise GenerationError("union surface sampling failed")
        return self.mesh.sample_surface(n, rng)


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------

SDF_RECORD = np.dtype([("x", "<f4", (3,)), ("s", "<f4")])
DDF_RECORD = np.dtype([("p", "<f4", (3,)), ("r", "<f4", (3,)), ("d", "<f4"), ("hit", "u1")])


@dataclass
class SdfSamples:
    x: np.ndarray
    s: np.ndarray

    def __len__(self) -> int:
        return len(self.s)


@dataclass
class DdfSamples:
    p: np.ndarray
    r: np.ndarray
    d: np.ndarray
    hit: np.ndarray

    def __len__(self) -> int:
        return len(self.d)


def uniform_sphere_dirs(n: int, rng: np.random.Generator) -> np.ndarray:
    return _unit(rng.standard_normal((n, 3)))


def uniform_ball(n: int, rng: np.random.Generator) -> np.ndarray:
    return uniform_sphere_dirs(n, rng) * rng.random(n)[:, None] ** (1.0 / 3.0)


def sample_sdf_points(oracle: ShapeOracle, n_surface: int, n_uniform: int,
                      noise_sigmas: Sequence[float] = NOISE_SIGMAS, seed: int = 0,
                      tau: float = TRUNCATION) -> SdfSamples:
    """Near-surface (two noise scales, split evenly) plus uniform-in-ball samples."""
    if n_surface < 0 or n_uniform < 0 or n_surface + n_uniform == 0:
        raise ValueError("sample counts must be non-negative and not both zero")
    rng = np.random.default_rng(seed)
    surf = oracle.sample_surface(n_surface, rng) if n_surface else np.empty((0, 3))
    half = n_surface // 2
    sig = np.where(np.arange(n_surface) < half, noise_sigmas[0], noise_sigmas[1])
    surf = surf + sig[:, None] * rng.standard_normal(surf.shape)
    norms = np.linalg.norm(surf, axis=1, keepdims=True)
    surf = np.where(norms > 1 + SDF_PAD, surf / norms * (1 + SDF_PAD), surf)
    x = np.concatenate([surf, uniform_ball(n_uniform, rng)])
    s = np.clip(oracle.sdf(x), -tau, tau) if len(x) else np.empty(0)
    return SdfSamples(x, s)


def sample_ddf_rays(oracle: ShapeOracle, n_hit: int, n_miss: int, seed: int = 0) -> DdfSamples:
    """Hit rays aimed at surface points plus rejection-sampled inward miss rays."""
    if n_hit < 0 or n_miss < 0:
        raise ValueError("sample counts must be non-negative")
    rng = np.random.default_rng(seed)
    ps, rs, ds = [], [], []
    have, attempts = 0, 0
    while have < n_hit:
        attempts += 1
        if attempts > MAX_REJECTION_ATTEMPTS:
            raise GenerationError("could not generate hit rays")
        m = n_hit - have
        p = uniform_sphere_dirs(m, rng)
        q = oracle.sample_surface(m, rng)
        r = _unit(q - p)
        hit, d = oracle.ray_cast(p, r)
        ps.append(p[hit]); rs.append(r[hit]); ds.append(d[hit])
        have += int(hit.sum())
    hp, hr, hd = (np.concatenate(a)[:n_hit] if a else np.empty((0, 3)) for a in (ps, rs, ds))
    mp, mr = [], []
    have, attempts = 0, 0
    while have < n_miss:
        attempts += 1
        if attempts > MAX_REJECTION_ATTEMPTS:
            raise GenerationError("could not generate miss rays")
        m = 2 * (n_miss - have) + 16
        p = uniform_sphere_dirs(m, rng)
        r = uniform_sphere_dirs(m, rng)
        r = np.where(np.sum(p * r, axis=1, keepdims=True) > 0, -r, r)
        hit, _ = oracle.ray_cast(p, r)
        mp.append(p[~hit]); mr.append(r[~hit])
        have += int((~hit).sum())
    mp = np.concatenate(mp)[:n_miss] if mp else np.empty((0, 3))
    mr = np.concatenate(mr)[:n_miss] if mr else np.empty((0, 3))
    return DdfSamples(
        p=np.concatenate([hp.reshape(-1, 3), mp.reshape(-1, 3)]),
        r=np.concatenate([hr.reshape(-1, 3), mr.reshape(-1, 3)]),
        d=np.concatenate([np.asarray(hd).reshape(-1), np.zeros(n_miss)]),
        hit=np.concatenate([np.ones(n_hit, dtype=np.uint8), np.zeros(n_miss, dtype=np.uint8)]),
    )


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"FIRD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_dataset(path, sdf: SdfSamples, ddf: DdfSamples) -> None:
    """Little-endian: magic, version u32, n_sdf u32, n_ddf u32, SDF records, DDF records."""
    srec = np.zeros(len(sdf), dtype=SDF_RECORD)
    srec["x"], srec["s"] = sdf.x, sdf.s
    drec = np.zeros(len(ddf), dtype=DDF_RECORD)
    drec["p"], drec["r"], drec["d"], drec["hit"] = ddf.p, ddf.r, ddf.d, ddf.hit
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(sdf), len(ddf)))
        fh.write(srec.tobytes())
        fh.write(drec.tobytes())


def read_dataset(path) -> tuple[SdfSamples, DdfSamples]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise OracleError(f"{path}: truncated dataset header")
    magic, version, n_sdf, n_ddf = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise OracleError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise OracleError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    expected = off + n_sdf * SDF_RECORD.itemsize + n_ddf * DDF_RECORD.itemsize
    if len(raw) != expected:
        raise OracleError(f"{path}: size {len(raw)} does not match header ({expected})")
    srec = np.frombuffer(raw, dtype=SDF_RECORD, count=n_sdf, offset=off)
    off += n_sdf * SDF_RECORD.itemsize
    drec = np.frombuffer(raw, dtype=DDF_RECORD, count=n_ddf, offset=off)
    return (SdfSamples(srec["x"].copy(), srec["s"].copy()),
            DdfSamples(drec["p"].copy(), drec["r"].copy(), drec["d"].copy(), drec["hit"].copy()))


def oracle_from_description(desc: dict) -> ShapeOracle:
    kind = desc.get("kind")
    if kind == "sphere":
        p = desc["params"]
        return ShapeOracle.sphere(p[0], p[1:4] if len(p) > 1 else (0, 0, 0))
    if kind == "box":
        p = desc["params"]
        return ShapeOracle.box(p[:3], p[3:6] if len(p) > 3 else (0, 0, 0))
    if kind == "torus":
        p = desc["params"]
        return ShapeOracle.torus(p[0], p[1], p[2:5] if len(p) > 2 else (0, 0, 0))
    if kind == "union":
        a, b = desc["children"]
        return ShapeOracle.union(oracle_from_description(a), oracle_from_description(b))
    if kind == "mesh":
        return ShapeOracle.from_obj(desc["path"])
    raise OracleError(f"unknown shape kind {kind!r}")
