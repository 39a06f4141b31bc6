"""Autodecoder training of the SDF/DDF pair: losses, schedule, checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import configio
from .diffcore import Adam, AdamState, Graph, Node
from .fields import FieldConfig, FieldModels
from .oracle import DdfSamples, SdfSamples

log = logging.getLogger(__name__)

LOSS_NAMES = ("L_s", "L_d", "L_sigma", "L_tv", "L_ts", "L_l")


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite."""


@dataclass
class TrainConfig:
    w_s: float = 1.0
    w_d: float = 1.0
    w_sigma: float = 1.0
    w_tv: float = 100.0
    w_ts: float = 0.1
    w_l: float = 0.0001
    lr_model: float = 0.0005
    lr_latent: float = 0.001
    iterations: int = 2000
    halving_interval: int = 0
    shapes_per_batch: int = 64
    samples_per_shape: int = 1024
    tv_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        for name in ("w_s", "w_d", "w_sigma", "w_tv", "w_ts", "w_l"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def weights(self) -> dict[str, float]:
        return {"L_s": self.w_s, "L_d": self.w_d, "L_sigma": self.w_sigma,
                "L_tv": self.w_tv, "L_ts": self.w_ts, "L_l": self.w_l}

    @property
    def halve_every(self) -> int:
        return self.halving_interval or max(1, self.iterations // 4)


# ---------------------------------------------------------------------------
# Loss terms (graph level)
# ---------------------------------------------------------------------------

def _zero(g: Graph, like: Node) -> Node:
    return g.constant(np.zeros((), dtype=like.value.dtype))


def loss_sdf(g: Graph, s: Node, s_gt) -> Node:
    """Mean absolute SDF error."""
    return g.mean(g.abs(g.sub(s, g.constant(np.asarray(s_gt, s.value.dtype).reshape(s.value.shape)))))


def loss_ddf(g: Graph, d: Node, d_gt, hit) -> Node:
    """Mean absolute distance error over hit rays; 0 when there are none."""
    idx = np.flatnonzero(np.asarray(hit).reshape(-1))
    if idx.size == 0:
        return _zero(g, d)
    d_gt = np.asarray(d_gt, d.value.dtype).reshape(-1)[idx].reshape(-1, 1)
    return g.mean(g.abs(g.sub(g.take(d, idx), g.constant(d_gt))))


def loss_rayhit(g: Graph, sigma: Node, sigma_gt) -> Node:
    """Mean binary cross entropy of the hit probability."""
    y = np.asarray(sigma_gt, sigma.value.dtype).reshape(sigma.value.shape)
    return g.mean(g.bce(sigma, y))


def loss_tv(g: Graph, planes: Sequence[Node], reduction: str = "mean") -> Node:
    """Total variation of feature planes.

    ``planes`` holds ``(N, N, K)`` planes or ``(P, N, N, K)`` stacks.  Each
    forward difference along either plane axis is a ``K``-vector whose L2 norm
    is taken per texel.  ``reduction="sum"`` sums those norms; ``"mean"``
    averages them per plane and axis.  Both then sum over planes and axes.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = None
    for p in planes:
        nd = p.value.ndim
        count = p.value.shape[0] if nd == 4 else 1
        for axis in (nd - 3, nd - 2):
            norms = g.norm(g.forward_diff(p, axis), axis=-1)
            term = g.sum(norms)
            if reduction == "mean":
                term = g.scale(term, count / norms.value.size)
            total = term if total is None else g.add(total, term)
    return total


def loss_track_sdf(g: Graph, p: Node, r: Node, d: Node, sdf_model, z) -> Node:
    """Mean ``|f_s(p + d r)|`` with the SDF weights and planes held fixed."""
    if p.value.shape[0] == 0:
        return _zero(g, d)
    x = g.add(p, g.mul(d, r))
    s = sdf_model.forward(g, z, x, frozen=True)
    return g.mean(g.abs(s))


def loss_latent(g: Graph, z: Node) -> Node:
    """Mean over shapes of the (unsquared) code norm."""
    return g.mean(g.norm(z, axis=-1))


def total_loss(g: Graph, terms: dict[str, Node], weights: dict[str, float]) -> Node:
    total = None
    for name, node in terms.items():
        w = weights.get(name, 0.0)
        part = g.scale(node, w)
        total = part if total is None else g.add(total, part)
    return total


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class ShapeData:
    sdf: SdfSamples
    ddf: DdfSamples

    def __post_init__(self):
        hit = self.ddf.hit.astype(bool)
        self.hit_idx = np.flatnonzero(hit)
        self.miss_idx = np.flatnonzero(~hit)


def _batch(data: list[ShapeData], shapes: np.ndarray, per_shape: int, rng, dtype):
    n_sdf = per_shape // 2
    n_hit = per_shape // 4
    n_miss = per_shape - n_sdf - n_hit
    xs, ss, sid = [], [], []
    ps, rs, ds, hs, rid = [], [], [], [], []
    for j in shapes:
        sd = data[j]
        i = rng.integers(0, len(sd.sdf), n_sdf)
        xs.append(sd.sdf.x[i]); ss.append(sd.sdf.s[i]); sid.append(np.full(n_sdf, j))
        picks = []
        if len(sd.hit_idx):
            picks.append(sd.hit_idx[rng.integers(0, len(sd.hit_idx), n_hit)])
        if len(sd.miss_idx):
            picks.append(sd.miss_idx[rng.integers(0, len(sd.miss_idx), n_miss)])
        k = np.concatenate(picks)
        ps.append(sd.ddf.p[k]); rs.append(sd.ddf.r[k]); ds.append(sd.ddf.d[k])
        hs.append(sd.ddf.hit[k]); rid.append(np.full(len(k), j))
    cat = lambda a: np.concatenate(a).astype(dtype)  # noqa: E731
    return (cat(xs), cat(ss), np.concatenate(sid),
            cat(ps), cat(rs), cat(ds), np.concatenate(hs).astype(bool), np.concatenate(rid))


def training_step(models: FieldModels, batch, config: TrainConfig) -> tuple[Graph, Node, dict[str, float]]:
    """Build the full loss graph for one batch; caller runs backward."""
    x, s_gt, sid, p, r, d_gt, hit, rid = batch
    g = Graph()
    zt = g.param(models.latents)
    s = models.sdf.forward(g, g.take(zt, sid), g.constant(x))
    pn, rn = g.constant(p), g.constant(r)
    z_rays = g.take(zt, rid)
    d, sigma = models.ddf.forward(g, z_rays, pn, rn)
    hidx = np.flatnonzero(hit)
    terms = {
        "L_s": loss_sdf(g, s, s_gt),
        "L_d": loss_ddf(g, d, d_gt, hit),
        "L_sigma": loss_rayhit(g, sigma, hit),
        "L_tv": loss_tv(g, [g.param(models.sdf.planes), g.param(models.ddf.planes)],
                        config.tv_reduction),
        "L_ts": loss_track_sdf(g, g.constant(p[hidx]), g.constant(r[hidx]), g.take(d, hidx),
                               models.sdf, g.take(z_rays, hidx)),
        "L_l": loss_latent(g, g.take(zt, np.unique(sid))),
    }
    total = total_loss(g, terms, config.weights)
    return g, total, {k: float(v.value) for k, v in terms.items()}


def train(models: FieldModels, data: list[ShapeData], config: TrainConfig,
          log_path=None, resume: "Checkpoint | None" = None,
          until: int | None = None) -> "Checkpoint":
    """Adam over weights/planes (``lr_model``) and latents (``lr_latent``).

    With ``resume`` (a checkpoint whose ``models`` is ``models``) the loop picks
    up at its iteration with the saved optimizer moments and batch RNG, so a
    split run matches an uninterrupted one bit for bit.  ``until`` stops early
    while keeping the schedule of the full ``config.iterations``.
    """
    if not data:
        raise ValueError("need at least one shape")
    if len(data) != models.n_shapes:
        raise ValueError(f"{len(data)} datasets for {models.n_shapes} latent codes")
    rng = np.random.default_rng(config.seed)
    weights = [p for k, p in models.named_parameters().items() if k != "latents"]
    opt = Adam([(weights, config.lr_model), ([models.latents], config.lr_latent)])
    named = models.named_parameters()
    start_iteration = 0
    if resume is not None:
        start_iteration = resume.iteration
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        for name, st in (resume.optimizer or {}).items():
            opt.state[id(named[name])] = AdamState(st.m.copy(), st.v.copy(), st.step)
    dtype = models.latents.value.dtype
    fh = open(log_path, "a") if log_path else None
    history = []
    try:
        end = config.iterations if until is None else min(until, config.iterations)
        for it in range(start_iteration, end):
            factor = 0.5 ** (it // config.halve_every)
            opt.set_lr(0, config.lr_model * factor)
            opt.set_lr(1, config.lr_latent * factor)
            k = min(config.shapes_per_batch, len(data))
            shapes = np.sort(rng.choice(len(data), size=k, replace=False))
            batch = _batch(data, shapes, config.samples_per_shape, rng, dtype)
            opt.zero_grad()
            g, total, terms = training_step(models, batch, config)
            loss = float(total.value)
            if not math.isfinite(loss) or not all(map(math.isfinite, terms.values())):
                detail = " ".join(f"{k}={v:.6g}" for k, v in terms.items())
                raise TrainingDiverged(f"non-finite loss at iteration {it}: total={loss} {detail}")
            g.backward(total)
            opt.step()
            history.append((loss, *terms.values()))
            if fh:
                vals = " ".join(f"{terms[n]:.8g}" for n in LOSS_NAMES)
                fh.write(f"{it} {loss:.8g} {vals} {config.lr_model * factor:.8g}\n")
            if it % 500 == 0:
                log.info("iter %d loss %.5f %s", it, loss,
                         " ".join(f"{k}={v:.4f}" for k, v in terms.items()))
    finally:
        if fh:
            fh.close()
    optimizer = {name: opt.state[id(p)] for name, p in named.items() if id(p) in opt.state}
    return Checkpoint(models, config, max(end, start_iteration),
                      np.asarray(history).reshape(-1, 7), optimizer, rng.bit_generator.state)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FIRC"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    models: FieldModels
    config: TrainConfig
    iteration: int
    history: np.ndarray = dataclasses.field(default_factory=lambda: np.empty((0, 7)))
    optimizer: dict | None = None      # parameter name -> AdamState
    rng_state: dict | None = None      # batch sampler state (numpy bit generator)

    def config_text(self) -> str:
        sections = {
            "fields": self.models.config.as_dict(),
            "train": dataclasses.asdict(self.config),
            "shapes": {"count": self.models.n_shapes},
        }
        if self.rng_state is not None:
            st = self.rng_state
            sections["resume"] = {"bit_generator": st["bit_generator"],
                                  "state": st["state"]["state"], "inc": st["state"]["inc"],
                                  "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}
        if self.optimizer:
            sections.setdefault("resume", {})["adam_step"] = next(iter(self.optimizer.values())).step
        return configio.dumps(sections)

    def _blobs(self):
        for name, p in self.models.named_parameters().items():
            yield name, p.value
        for name, st in (self.optimizer or {}).items():
            yield f"adam.m.{name}", st.m
            yield f"adam.v.{name}", st.v

    def save(self, path) -> None:
        """``FIRC``, version, iteration, config text, then named parameter blobs (little-endian)."""
        cfg = self.config_text().encode()
        blobs = list(self._blobs())
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.iteration, len(cfg)))
            fh.write(cfg)
            fh.write(struct.pack("<I", len(blobs)))
            for name, arr in blobs:
                raw = name.encode()
                fh.write(struct.pack("<H", len(raw)) + raw)
                fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        magic, version, iteration, n_cfg = struct.unpack_from("<4sIII", raw)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        sections = configio.loads(raw[off:off + n_cfg].decode())
        off += n_cfg
        fcfg = configio.apply(FieldConfig(), sections["fields"])
        tcfg = configio.apply(TrainConfig(), sections["train"])
        models = FieldModels(fcfg, int(sections["shapes"]["count"]))
        params = models.named_parameters()
        moments = {}
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + n].decode()
            off += n
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape)) * dt.itemsize
            arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
            off += size
            if name.startswith("adam."):
                moments[name] = arr.copy()
                continue
            if name not in params:
                raise ValueError(f"{path}: unexpected parameter {name!r}")
            if params[name].value.shape != arr.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            params[name].value[...] = arr
        resume = sections.get("resume", {})
        rng_state = None
        if "state" in resume:
            rng_state = {"bit_generator": resume["bit_generator"],
                         "state": {"state": int(resume["state"]), "inc": int(resume["inc"])},
                         "has_uint32": int(resume["has_uint32"]), "uinteger": int(resume["uinteger"])}
        optimizer = None
        if moments:
            step = int(resume.get("adam_step", 0))
            optimizer = {name: AdamState(moments[f"adam.m.{name}"], moments[f"adam.v.{name}"], step)
                         for name in params if f"adam.m.{name}" in moments}
        return cls(models, tcfg, iteration, optimizer=optimizer, rng_state=rng_state)
