import hashlib
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from ddfire.fields import FieldConfig, FieldModels
from ddfire.oracle import ShapeOracle, sample_ddf_rays, sample_sdf_points
from ddfire.train import Checkpoint, ShapeData, TrainConfig, train


def tiny_config(**kw) -> FieldConfig:
    base = dict(resolution=4, features=2, latent_dim=4, sdf_hidden=8, ddf_hidden=8, dtype="float64")
    base.update(kw)
    return FieldConfig(**base)


@pytest.fixture
def tiny_models():
    models = FieldModels(tiny_config(), n_shapes=3, seed=7, latent_std=0.3)
    rng = np.random.default_rng(11)
    # larger plane values so the plane path carries visible gradient
    models.sdf.planes.value[...] = rng.normal(0, 0.3, models.sdf.planes.value.shape)
    models.ddf.planes.value[...] = rng.normal(0, 0.3, models.ddf.planes.value.shape)
    return models


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def param_grad_error(param, build, h=1e-6, max_coords=40, seed=0, floor=1e-8):
    """Worst relative error between backprop and central differences on ``param``.

    ``build()`` returns ``(graph, scalar_node)`` evaluated at the current values.
    Only a random subset of coordinates is probed to keep the check fast.
    ``floor`` bounds the denominator so round-off on near-zero entries is ignored.
    """
    param.zero_grad()
    g, root = build()
    g.backward(root)
    analytic = param.grad.copy()
    rng = np.random.default_rng(seed)
    flat = param.value.reshape(-1)
    coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
    worst = 0.0
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = float(build()[1].value)
        flat[i] = old - h
        fm = float(build()[1].value)
        flat[i] = old
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


# criterion number -> one-line verdict, filled in by the acceptance tests
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


# -- the toy model shared by the acceptance and trained-model tests ---------------
#
# Trained once and cached under ``.acceptance/`` (override with
# ``DDFIRE_ACCEPTANCE_CACHE``), keyed by the training configuration and the
# source of the modules that produce it, so reruns only retrain when
# something relevant changed.

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("DDFIRE_ACCEPTANCE_CACHE", ROOT / ".acceptance"))
TRAIN_STEPS = int(os.environ.get("DDFIRE_ACCEPTANCE_STEPS", "12000"))
TRAIN_BUDGET_S = 30 * 60

TOY_SHAPES = {
    "sphere-0.4": ShapeOracle.sphere(0.4),
    "sphere-0.6": ShapeOracle.sphere(0.6),
    "box": ShapeOracle.box((0.35, 0.3, 0.25)),
    "torus": ShapeOracle.torus(0.45, 0.15),
}
HELD_OUT = ShapeOracle.sphere(0.5)
VIEW = dict(eye=(1.2, 0.9, 1.3), width=128, height=128)


@dataclass
class ToyRun:
    models: FieldModels
    seconds: float
    steps: int
    history: np.ndarray     # per-iteration (total, L_s, L_d, L_sigma, L_tv, L_ts, L_l)


def _toy_data():
    return [ShapeData(sample_sdf_points(o, 40_000, 10_000, seed=2 * i),
                      sample_ddf_rays(o, 40_000, 20_000, seed=2 * i + 1))
            for i, o in enumerate(TOY_SHAPES.values())]


def _cache_key(fcfg: FieldConfig, tcfg: TrainConfig) -> str:
    h = hashlib.sha256(repr((fcfg, tcfg)).encode())
    for name in ("diffcore", "fields", "train", "oracle"):
        h.update((ROOT / "src" / "ddfire" / f"{name}.py").read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def toy() -> ToyRun:
    fcfg = FieldConfig()
    tcfg = TrainConfig(iterations=TRAIN_STEPS, samples_per_shape=1024)
    key = _cache_key(fcfg, tcfg)
    ck_path, meta_path = CACHE / f"toy-{key}.fic", CACHE / f"toy-{key}.seconds"
    hist_path = CACHE / f"toy-{key}.history.npy"
    if ck_path.is_file() and meta_path.is_file() and hist_path.is_file():
        return ToyRun(Checkpoint.load(ck_path).models, float(meta_path.read_text()), TRAIN_STEPS,
                      np.load(hist_path))
    CACHE.mkdir(parents=True, exist_ok=True)
    data = _toy_data()
    models = FieldModels(fcfg, len(TOY_SHAPES), seed=0)
    t0 = time.perf_counter()
    ck = train(models, data, tcfg)
    seconds = time.perf_counter() - t0
    ck.save(ck_path)
    np.save(hist_path, ck.history)
    meta_path.write_text(f"{seconds:.1f}\n")
    return ToyRun(models, seconds, TRAIN_STEPS, ck.history)


def trailing_mean_drops(losses, window: int = 100) -> tuple[float, float]:
    """Trailing-``window`` mean at the end of the first quartile and at the end of the run."""
    losses = np.asarray(losses, dtype=np.float64)
    q = len(losses) // 4
    w = min(window, q)
    return float(losses[q - w:q].mean()), float(losses[-w:].mean())




@pytest.fixture(scope="session")
def toy_memo():
    """Session memo for expensive results on the toy model (e.g. reconstructions)."""
    store = {}

    def get(key, compute):
        if key not in store:
            store[key] = compute()
        return store[key]

    return get
