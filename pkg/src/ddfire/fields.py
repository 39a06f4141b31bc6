"""Latent-conditioned SDF and DDF networks over factorized 2D feature planes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import Graph, Node, Parameter

# Coordinate pairs sampled from the feature planes.  SDF: xy, yz, zx.
SDF_PAIRS = ((0, 1), (1, 2), (2, 0))
SDF_PAIR_NAMES = ("xy", "yz", "zx")

# DDF over (p_x, p_y, p_z, r_x, r_y, r_z): the p-triplane, the nine p/r
# cross pairs in row-major order, then the r-triplane.
DDF_PAIRS = (
    (0, 1), (1, 2), (2, 0),
    (0, 3), (0, 4), (0, 5),
    (1, 3), (1, 4), (1, 5),
    (2, 3), (2, 4), (2, 5),
    (3, 4), (4, 5), (5, 3),
)
_AXES = ("px", "py", "pz", "rx", "ry", "rz")
DDF_PAIR_NAMES = tuple(_AXES[i] + _AXES[j] for i, j in DDF_PAIRS)


@dataclass
class FieldConfig:
    resolution: int = 64
    features: int = 8
    latent_dim: int = 64
    sdf_hidden: int = 128
    ddf_hidden: int = 128
    n_freq: int = 3
    tau: float = 0.1
    plane_init_std: float = 0.01
    dtype: str = "float32"

    def as_dict(self) -> dict:
        return asdict(self)


def positional_encode(v, n_freq: int = 3) -> np.ndarray:
    """Raw coordinates followed by ``sin(2^k pi t), cos(2^k pi t)`` per coordinate."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    arg = v[:, :, None] * freqs
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(len(v), -1)
    out = np.concatenate([v, enc], axis=1)
    return out[0] if single else out


def encode(g: Graph, v: Node, n_freq: int) -> Node:
    """Graph version of :func:`positional_encode`."""
    b, d = v.value.shape
    freqs = ((2.0 ** np.arange(n_freq)) * np.pi).astype(v.value.dtype)
    arg = g.mul(g.reshape(v, (b, d, 1)), g.constant(freqs.reshape(1, 1, -1)))
    s = g.reshape(g.sin(arg), (b, d, n_freq, 1))
    c = g.reshape(g.cos(arg), (b, d, n_freq, 1))
    enc = g.reshape(g.concat([s, c], axis=-1), (b, d * n_freq * 2))
    return g.concat([v, enc], axis=1)


def _selector(n_in: int, pairs, dtype) -> np.ndarray:
    sel = np.zeros((n_in, 2 * len(pairs)), dtype=dtype)
    for k, (i, j) in enumerate(pairs):
        sel[i, 2 * k] = 1
        sel[j, 2 * k + 1] = 1
    return sel


def plane_features(g: Graph, planes: Node, coords: Node, pairs) -> Node:
    """Sample plane ``k`` at coordinate pair ``pairs[k]``; concatenate in pair order."""
    b, n_in = coords.value.shape
    sel = g.constant(_selector(n_in, pairs, coords.value.dtype))
    uv = g.reshape(g.matmul(coords, sel), (b, len(pairs), 2))
    feats = g.bilinear_sample(planes, uv)
    return g.reshape(feats, (b, -1))


def sdf_features(planes, x) -> np.ndarray:
    """``(B, 3K)`` features of points ``x`` from a ``(3, N, N, K)`` plane stack."""
    g = Graph()
    x = np.atleast_2d(np.asarray(x, dtype=np.asarray(planes).dtype))
    return plane_features(g, g.constant(planes), g.constant(x), SDF_PAIRS).value


def ddf_features(planes, p, r) -> np.ndarray:
    """``(B, 15K)`` features of rays ``(p, r)`` from a ``(15, N, N, K)`` plane stack."""
    g = Graph()
    dt = np.asarray(planes).dtype
    pr = np.concatenate([np.atleast_2d(np.asarray(p, dt)), np.atleast_2d(np.asarray(r, dt))], axis=1)
    return plane_features(g, g.constant(planes), g.constant(pr), DDF_PAIRS).value


def _kaiming(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Field:
    """Shared plumbing: parameter registry, latent handling, evaluation counter."""

    pairs: tuple = ()
    pair_names: tuple = ()
    n_in: int = 0

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, Parameter] = {}
        self.evaluations = 0
        n, k = config.resolution, config.features
        self.planes = self._add("planes", rng.normal(0.0, config.plane_init_std,
                                                     (len(self.pairs), n, n, k)))

    def _add(self, name: str, value) -> Parameter:
        p = Parameter(np.asarray(value, dtype=self.dtype), name=name)
        self.params[name] = p
        return p

    @property
    def input_width(self) -> int:
        c = self.config
        return self.n_in * (1 + 2 * c.n_freq) + len(self.pairs) * c.features

    def mlp_parameters(self) -> list[Parameter]:
        return [p for name, p in self.params.items() if name != "planes"]

    def plane(self, name: str) -> np.ndarray:
        """View of one named plane, e.g. ``"xy"`` or ``"rzrx"``."""
        return self.planes.value[self.pair_names.index(name)]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _inputs(self, g: Graph, coords: Node, frozen: bool) -> Node:
        enc = encode(g, coords, self.config.n_freq)
        feats = plane_features(g, g.param(self.planes, frozen), coords, self.pairs)
        return g.concat([enc, feats], axis=1)

    def _latent(self, g: Graph, z) -> Node:
        if not isinstance(z, Node):
            z = g.constant(np.atleast_2d(np.asarray(z, dtype=self.dtype)))
        return z

    def _first(self, g: Graph, prefix: str, inp: Node, z: Node, frozen: bool) -> Node:
        p = lambda name: g.param(self.params[f"{prefix}.{name}"], frozen)  # noqa: E731
        return g.add(g.add(g.matmul(inp, p("w_in")), g.matmul(z, p("w_z"))), p("b"))


class SdfModel(_Field):
    """``s = f_s(x, z, planes(x))``, truncated to ``[-tau, tau]``."""

    pairs = SDF_PAIRS
    pair_names = SDF_PAIR_NAMES
    n_in = 3

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        h, dt, width, lat = config.sdf_hidden, self.dtype, self.input_width, config.latent_dim
        fan0 = width + lat
        self._add("l0.w_in", _kaiming(rng, fan0, (width, h), dt))
        self._add("l0.w_z", _kaiming(rng, fan0, (lat, h), dt))
        self._add("l0.b", np.zeros(h))
        self._add("l1.w", _kaiming(rng, h, (h, h), dt))
        self._add("l1.b", np.zeros(h))
        self._add("out.w", 0.1 * _kaiming(rng, h, (h, 1), dt))
        self._add("out.b", np.zeros(1))

    def forward(self, g: Graph, z, x: Node, frozen: bool = False, clamp: bool = True) -> Node:
        """Returns a ``(B, 1)`` node; ``frozen`` severs gradients to weights and planes."""
        self.evaluations += x.value.shape[0]
        p = lambda name: g.param(self.params[name], frozen)  # noqa: E731
        z = self._latent(g, z)
        h = g.relu(self._first(g, "l0", self._inputs(g, x, frozen), z, frozen))
        h = g.relu(g.linear(h, p("l1.w"), p("l1.b")))
        s = g.linear(h, p("out.w"), p("out.b"))
        if clamp:
            s = g.softclamp(s, -self.config.tau, self.config.tau)
        return s

    def evaluate(self, z, x, chunk: int = 65536) -> np.ndarray:
        """Gradient-free batch evaluation; returns ``(B,)`` signed distances."""
        x = np.asarray(x, dtype=self.dtype).reshape(-1, 3)
        out = np.empty(len(x), dtype=self.dtype)
        for s in range(0, len(x), chunk):
            g = Graph()
            out[s:s + chunk] = self.forward(g, z, g.constant(x[s:s + chunk]), frozen=True).value[:, 0]
        return out


class DdfModel(_Field):
    """``(d, sigma) = f_d((p, r), z, planes(p, r))`` with input skips into each block."""

    pairs = DDF_PAIRS
    pair_names = DDF_PAIR_NAMES
    n_in = 6
    n_blocks = 3

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        h, dt, width, lat = config.ddf_hidden, self.dtype, self.input_width, config.latent_dim
        for k in range(self.n_blocks):
            fan = width + lat + (h if k else 0)
            self._add(f"b{k}.w_in", _kaiming(rng, fan, (width, h), dt))
            self._add(f"b{k}.w_z", _kaiming(rng, fan, (lat, h), dt))
            if k:
                self._add(f"b{k}.w_prev", _kaiming(rng, fan, (h, h), dt))
            self._add(f"b{k}.b", np.zeros(h))
            self._add(f"b{k}.w2", _kaiming(rng, h, (h, h), dt))
            self._add(f"b{k}.b2", np.zeros(h))
        self._add("out.w", 0.1 * _kaiming(rng, h, (h, 2), dt))
        self._add("out.b", np.zeros(2))

    def forward(self, g: Graph, z, p: Node, r: Node, frozen: bool = False,
                cached_input=None) -> tuple[Node, Node]:
        """Returns ``(d, sigma)`` nodes, each ``(B, 1)``.

        ``cached_input`` may carry the precomputed per-block input projections
        (see :meth:`input_projections`) when ``(p, r)`` stay fixed.
        """
        b = p.value.shape[0]
        self.evaluations += b
        prm = lambda name: g.param(self.params[name], frozen)  # noqa: E731
        z = self._latent(g, z)
        if cached_input is None:
            inp = self._inputs(g, g.concat([p, r], axis=1), frozen)
            proj = [g.matmul(inp, prm(f"b{k}.w_in")) for k in range(self.n_blocks)]
        else:
            proj = [g.constant(c) for c in cached_input]
        h = None
        for k in range(self.n_blocks):
            pre = g.add(proj[k], g.matmul(z, prm(f"b{k}.w_z")))
            if cached_input is None:
                pre = g.add(pre, prm(f"b{k}.b"))
            if h is not None:
                pre = g.add(pre, g.matmul(h, prm(f"b{k}.w_prev")))
            h = g.relu(pre)
            h = g.relu(g.linear(h, prm(f"b{k}.w2"), prm(f"b{k}.b2")))
        out = g.linear(h, prm("out.w"), prm("out.b"))
        d = g.slice(out, 0, 1, axis=1)
        sigma = g.sigmoid(g.slice(out, 1, 2, axis=1))
        return d, sigma

    def input_projections(self, p, r) -> list[np.ndarray]:
        """Latent-independent block input terms (bias included) for fixed rays and frozen weights."""
        g = Graph()
        pr = g.constant(np.concatenate([np.asarray(p, self.dtype), np.asarray(r, self.dtype)], axis=1))
        inp = self._inputs(g, pr, frozen=True)
        return [inp.value @ self.params[f"b{k}.w_in"].value + self.params[f"b{k}.b"].value
                for k in range(self.n_blocks)]

    def evaluate(self, z, p, r, chunk: int = 65536) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(p, dtype=self.dtype).reshape(-1, 3)
        r = np.asarray(r, dtype=self.dtype).reshape(-1, 3)
        d = np.empty(len(p), dtype=self.dtype)
        s = np.empty(len(p), dtype=self.dtype)
        for i in range(0, len(p), chunk):
            g = Graph()
            dn, sn = self.forward(g, z, g.constant(p[i:i + chunk]), g.constant(r[i:i + chunk]), frozen=True)
            d[i:i + chunk] = dn.value[:, 0]
            s[i:i + chunk] = sn.value[:, 0]
        return d, s


class FieldModels:
    """SDF + DDF pair sharing one latent table ``Z`` (one row per training shape)."""

    def __init__(self, config: FieldConfig, n_shapes: int, seed: int = 0, latent_std: float = 0.01):
        self.config = config
        rng = np.random.default_rng(seed)
        self.sdf = SdfModel(config, rng)
        self.ddf = DdfModel(config, rng)
        self.latents = Parameter(
            rng.normal(0.0, latent_std, (n_shapes, config.latent_dim)).astype(config.dtype),
            name="latents")

    @property
    def n_shapes(self) -> int:
        return self.latents.value.shape[0]

    def named_parameters(self) -> dict[str, Parameter]:
        out = {f"sdf.{k}": v for k, v in self.sdf.params.items()}
        out.update({f"ddf.{k}": v for k, v in self.ddf.params.items()})
        out["latents"] = self.latents
        return out

    def plane_values(self) -> int:
        """Number of stored feature-plane scalars (3 + 15 planes)."""
        return self.sdf.planes.value.size + self.ddf.planes.value.size

    def latent(self, index: int) -> np.ndarray:
        if not 0 <= index < self.n_shapes:
            raise IndexError(f"shape index {index} out of range [0, {self.n_shapes})")
        return self.latents.value[index:index + 1].copy()

    def freeze(self) -> None:
        for p in self.named_parameters().values():
            p.trainable = False
