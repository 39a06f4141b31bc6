"""Latent-code reconstruction from a posed depth map or a silhouette.

Each iteration of the fast loop spends one DDF and one SDF evaluation per
sphere-hit pixel: the DDF proposes the surface point ``x = p + d r``, the SDF
scores it, and the losses are backpropagated to the latent code alone.  The
sphere-traced loop is a reference baseline that marches the SDF every
iteration instead.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Adam, Graph, Node, Parameter
from .render import (Camera, DepthImage, RayBundle, generate_rays, model_sdf, sphere_trace,
                     DEFAULT_SIGMA_THRESHOLD)

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "L_rec", "L_S", "L_D", "L_l", "ms")


class ReconstructionError(ValueError):
    """The observation cannot drive a reconstruction (e.g. no pixel sees the domain)."""


class ReconstructionDiverged(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class DepthObservation:
    depth: np.ndarray
    mask: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        expect = (self.camera.height, self.camera.width)
        if self.depth.shape != expect or self.mask.shape != expect:
            raise ReconstructionError(
                f"observation shape {self.depth.shape}/{self.mask.shape} != camera {expect}")
        if np.any(self.depth[self.mask] <= 0):
            raise ReconstructionError("masked pixels must carry positive depth")

    @classmethod
    def from_image(cls, image: DepthImage, camera: Camera) -> "DepthObservation":
        return cls(image.depth, image.mask, camera)

    @classmethod
    def silhouette(cls, mask, camera: Camera) -> "DepthObservation":
        """Mask-only observation; depth is a placeholder that the silhouette loss ignores."""
        mask = np.asarray(mask, dtype=bool)
        return cls(np.where(mask, 1.0, 0.0), mask, camera)


@dataclass
class ReconConfig:
    w_S: float = 1.0
    w_D: float = 1.0
    w_l: float = 1e-4
    iterations: int = 1000
    lr: float = 1e-3
    lr_late: float = 5e-4
    lr_switch: int = 500
    sigma_threshold: float = DEFAULT_SIGMA_THRESHOLD
    log_every: int = 0

    @classmethod
    def depth_mode(cls, **kw) -> "ReconConfig":
        return cls(**kw)

    @classmethod
    def silhouette_mode(cls, **kw) -> "ReconConfig":
        return cls(**{"w_S": 1.0, "w_D": 0.0, "w_l": 0.005, **kw})

    def lr_at(self, iteration: int) -> float:
        return self.lr if iteration < self.lr_switch else self.lr_late


@dataclass
class ReconResult:
    z: np.ndarray
    trace: list = field(default_factory=list)
    ddf_evals_per_iter: int = 0
    sdf_evals_per_iter: float = 0.0
    n_rays: int = 0

    @property
    def ms_per_iter(self) -> float:
        ms = [row["ms"] for row in self.trace]
        return float(np.mean(ms)) if ms else float("nan")

    def losses(self, name: str = "L_rec") -> np.ndarray:
        return np.array([row[name] for row in self.trace])

    def write_trace(self, path) -> None:
        lines = [",".join(TRACE_COLUMNS)]
        for row in self.trace:
            lines.append(",".join(str(row[c]) if c == "iter" else f"{row[c]:.9g}"
                                  for c in TRACE_COLUMNS))
        Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        out.append({k: int(v) if k == "iter" else float(v) for k, v in zip(header, vals)})
    return out


# -- losses ----------------------------------------------------------------

def depth_loss(g: Graph, lam: Node, lam_gt, select) -> Node | None:
    """Mean ``|lam - lam_gt|`` over the selected pixels; ``None`` if none are selected."""
    idx = np.flatnonzero(np.asarray(select, dtype=bool))
    if not len(idx):
        return None
    picked = g.take(lam, idx)
    gt = np.asarray(lam_gt, dtype=lam.value.dtype).reshape(-1)[idx].reshape(picked.value.shape)
    diff = g.sub(picked, g.constant(gt))
    return g.mean(g.abs(diff))


def silhouette_terms(g: Graph, s: Node, sigma: Node | None, mask, tau: float) -> dict[str, Node]:
    """Foreground ``|s|``, background ``||s| - tau|`` and ray-hit BCE against the mask.

    Each term is a mean over its pixels; an empty pixel set drops the term.
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    out = {}
    fg, bg = np.flatnonzero(mask), np.flatnonzero(~mask)
    if len(fg):
        out["S_pos"] = g.mean(g.abs(g.take(s, fg)))
    if len(bg):
        out["S_neg"] = g.mean(g.abs(g.shift(g.abs(g.take(s, bg)), -tau)))
    if sigma is not None:
        target = mask.astype(sigma.value.dtype).reshape(sigma.value.shape)
        out["S_sigma"] = g.mean(g.bce(sigma, target))
    return out


def silhouette_loss(g: Graph, s: Node, sigma: Node | None, mask, tau: float) -> Node | None:
    terms = list(silhouette_terms(g, s, sigma, mask, tau).values())
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = g.add(total, t)
    return total


def _weighted(g: Graph, pairs) -> Node:
    total = None
    for w, node in pairs:
        if node is None or w == 0:
            continue
        term = g.scale(node, w)
        total = term if total is None else g.add(total, term)
    return total


# -- per-iteration steps ---------------------------------------------------------

@dataclass
class RayCache:
    """Sphere-hit rays of an observation, computed once per reconstruction."""

    rays: RayBundle
    idx: np.ndarray
    p: np.ndarray
    r: np.ndarray
    lam_gt: np.ndarray
    mask: np.ndarray
    ddf_input: list | None = None

    @classmethod
    def build(cls, models, obs: DepthObservation, cache_ddf: bool = True) -> "RayCache":
        rays = generate_rays(obs.camera)
        idx = np.flatnonzero(rays.hit)
        if not len(idx):
            raise ReconstructionError("no pixel ray intersects the unit sphere")
        dt = models.config.dtype
        p = rays.entry[idx].astype(dt)
        r = rays.directions[idx].astype(dt)
        proj = models.ddf.input_projections(p, r) if cache_ddf else None
        return cls(rays, idx, p, r, obs.depth.reshape(-1)[idx], obs.mask.reshape(-1)[idx], proj)


def _projective_depth(g: Graph, x: Node, camera: Camera) -> Node:
    row = camera.P[2].astype(x.value.dtype)
    return g.shift(g.matmul(x, g.constant(row[:3, None])), float(row[3]))


def fire_step(models, z: Parameter, cache: RayCache, camera: Camera, config: ReconConfig
              ) -> tuple[Graph, Node, dict[str, float]]:
    """Build one iteration's loss graph: DDF at the cached rays, SDF at ``p + d r``.

    Weights and planes enter frozen, so only ``z`` receives gradient.
    Returns ``(graph, L_rec, term values)``.
    """
    g = Graph()
    zn = g.param(z)
    p, r = g.constant(cache.p), g.constant(cache.r)
    d, sigma = models.ddf.forward(g, zn, p, r, frozen=True, cached_input=cache.ddf_input)
    x = g.add(p, g.mul(d, r))
    s = models.sdf.forward(g, zn, x, frozen=True)
    lam = _projective_depth(g, x, camera)

    L_D = None
    if config.w_D:
        select = cache.mask & (sigma.value[:, 0] >= config.sigma_threshold)
        L_D = depth_loss(g, lam, cache.lam_gt, select)
    L_S = silhouette_loss(g, s, sigma, cache.mask, models.config.tau)
    L_l = g.mean(g.norm(zn, axis=-1))
    total = _weighted(g, [(config.w_S, L_S), (config.w_D, L_D), (config.w_l, L_l)])
    terms = {"L_S": _val(L_S), "L_D": _val(L_D), "L_l": _val(L_l)}
    return g, total, terms


def _val(node: Node | None) -> float:
    return 0.0 if node is None else float(node.value)


def traced_step(models, z: Parameter, cache: RayCache, camera: Camera, config: ReconConfig,
                max_steps: int = 50) -> tuple[Graph, Node, dict[str, float], int]:
    """Baseline iteration: sphere-trace the SDF, then differentiate the depth implicitly.

    At the traced point ``t*`` the depth is written as ``t = t* - s(z) / f_t`` with
    ``f_t`` (the SDF slope along the ray, by central differences) held constant,
    so ``dt/dz = -(ds/dz) / f_t``.  Returns the SDF evaluation count as well.
    """
    tau = models.config.tau
    zv = z.value
    sdf_fn = model_sdf(models, zv)
    max_t = cache.rays.t_exit[cache.idx] - cache.rays.t_entry[cache.idx]
    res = sphere_trace(sdf_fn, cache.p, cache.r, max_t=max_t, max_steps=max_steps, tau=tau)
    t_star = np.where(res.hit, res.t, res.t_last)
    evals = res.total_evals

    hi = np.flatnonzero(res.hit)
    h = 1e-3
    slope = np.zeros(len(t_star))
    if len(hi):
        ph, rh, th = cache.p[hi], cache.r[hi], t_star[hi]
        probes = np.vstack([ph + (th + h)[:, None] * rh, ph + (th - h)[:, None] * rh])
        f = sdf_fn(probes)
        evals += len(probes)
        slope[hi] = (f[:len(hi)] - f[len(hi):]) / (2 * h)
    # grazing hits would blow the implicit step up; keep the slope clearly negative
    slope = np.minimum(slope, -0.05)

    g = Graph()
    zn = g.param(z)
    dt = models.config.dtype
    x0 = g.constant((cache.p + t_star[:, None] * cache.r).astype(dt))
    s = models.sdf.forward(g, zn, x0, frozen=True)
    evals += len(t_star)
    t = g.add(g.constant(t_star[:, None].astype(dt)),
              g.mul(s, g.constant((-1.0 / slope)[:, None].astype(dt))))
    t = g.sub(t, g.constant((s.value * (-1.0 / slope)[:, None]).astype(dt)))
    x = g.add(g.constant(cache.p), g.mul(t, g.constant(cache.r)))
    lam = _projective_depth(g, x, camera)

    L_D = depth_loss(g, lam, cache.lam_gt, cache.mask & res.hit) if config.w_D else None
    L_S = silhouette_loss(g, s, None, cache.mask, tau)
    L_l = g.mean(g.norm(zn, axis=-1))
    total = _weighted(g, [(config.w_S, L_S), (config.w_D, L_D), (config.w_l, L_l)])
    return g, total, {"L_S": _val(L_S), "L_D": _val(L_D), "L_l": _val(L_l)}, evals


# -- optimization loops ----------------------------------------------------

def _optimize(models, obs: DepthObservation, config: ReconConfig, step_fn, z_init=None,
              cache_ddf: bool = True) -> ReconResult:
    cache = RayCache.build(models, obs, cache_ddf=cache_ddf)
    if not obs.mask.any():
        warnings.warn("empty foreground mask: the optimizer can only push predictions to miss",
                      RuntimeWarning, stacklevel=3)
    L = models.config.latent_dim
    z0 = np.zeros((1, L)) if z_init is None else np.asarray(z_init).reshape(1, L)
    z = Parameter(z0.astype(models.config.dtype), name="z")
    opt = Adam([([z], config.lr)])
    result = ReconResult(z=z.value, n_rays=len(cache.idx))
    sdf_total = ddf_total = 0
    for it in range(config.iterations):
        opt.set_lr(0, config.lr_at(it))
        t0 = time.perf_counter()
        ddf_before, sdf_before = models.ddf.evaluations, models.sdf.evaluations
        out = step_fn(models, z, cache, obs.camera, config)
        g, total, terms = out[:3]
        loss = float(total.value)
        if not np.isfinite(loss):
            raise ReconstructionDiverged(f"non-finite loss at iteration {it}: {terms}", result.trace)
        opt.zero_grad()
        g.backward(total)
        opt.step()
        ms = (time.perf_counter() - t0) * 1000.0
        ddf_total += models.ddf.evaluations - ddf_before
        sdf_total += out[3] if len(out) > 3 else models.sdf.evaluations - sdf_before
        result.trace.append({"iter": it, "L_rec": loss, **terms, "ms": ms})
        if config.log_every and it % config.log_every == 0:
            log.info("recon iter %d L_rec %.5f L_D %.5f L_S %.5f", it, loss, terms["L_D"], terms["L_S"])
    n = max(config.iterations, 1)
    result.z = z.value.copy()
    result.ddf_evals_per_iter = ddf_total // n
    result.sdf_evals_per_iter = sdf_total / n
    return result


def reconstruct_from_depth(models, obs: DepthObservation, config: ReconConfig | None = None,
                           z_init=None) -> ReconResult:
    """Optimize a latent code so the DDF/SDF pair explains the depth map."""
    return _optimize(models, obs, config or ReconConfig.depth_mode(), fire_step, z_init)


def reconstruct_from_silhouette(models, mask, camera: Camera, config: ReconConfig | None = None,
                                z_init=None) -> ReconResult:
    """Mask-only reconstruction (no depth term)."""
    obs = DepthObservation.silhouette(mask, camera)
    return _optimize(models, obs, config or ReconConfig.silhouette_mode(), fire_step, z_init)


def reconstruct_from_depth_sphere_traced(models, obs: DepthObservation,
                                         config: ReconConfig | None = None,
                                         z_init=None) -> ReconResult:
    """Reference loop that sphere-traces the SDF each iteration."""
    return _optimize(models, obs, config or ReconConfig.depth_mode(), traced_step, z_init,
                     cache_ddf=False)


def masked_depth_l1(image: DepthImage, obs: DepthObservation) -> float:
    """Mean ``|lam - lam_gt|`` over pixels in both the observed and predicted masks."""
    both = image.mask & obs.mask
    if not both.any():
        return float("inf")
    return float(np.mean(np.abs(image.depth[both] - obs.depth[both])))


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.sum(a | b)
    return 1.0 if union == 0 else float(np.sum(a & b) / union)
