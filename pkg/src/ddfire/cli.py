"""Command-line entry point: gen-data, train, render, reconstruct, eval, bench.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, configio
from .oracle import (GenerationError, OracleError, ShapeOracle, oracle_from_description,
                     read_dataset, sample_ddf_rays, sample_sdf_points, write_dataset)

log = logging.getLogger("ddfire")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT_NAME = "checkpoint.fic"
MANIFEST_NAME = "manifest.txt"


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


class NumericError(Exception):
    """Non-finite values or a degenerate numerical outcome; exit code 3."""


@dataclasses.dataclass
class DataConfig:
    n_surface: int = 40_000
    n_uniform: int = 10_000
    n_hit: int = 40_000
    n_miss: int = 20_000


@dataclasses.dataclass
class ViewConfig:
    eye_x: float = 1.2
    eye_y: float = 0.9
    eye_z: float = 1.3
    fov_deg: float = 40.0
    width: int = 128
    height: int = 128

    def camera(self):
        from .render import Camera

        return Camera.look_at((self.eye_x, self.eye_y, self.eye_z), fov_deg=self.fov_deg,
                              width=self.width, height=self.height)


# -- shape specs ------------------------------------------------------------

def parse_shape_spec(spec: str) -> list[ShapeOracle]:
    """Shapes from ``kind:a,b,c`` items separated by ``;`` or newlines, or a file of them.

    ``sphere:r[,cx,cy,cz]``, ``box:hx,hy,hz[,cx,cy,cz]``, ``torus:R,r[,cx,cy,cz]``,
    ``mesh:path.obj``.
    """
    path = Path(spec)
    if "\n" not in spec and ":" not in spec and path.is_file():
        spec = path.read_text()
    items = [s.strip() for chunk in spec.splitlines() for s in chunk.split(";")]
    items = [s for s in items if s and not s.startswith("#")]
    if not items:
        raise InputError("empty shape spec")
    shapes = []
    for item in items:
        kind, _, rest = item.partition(":")
        kind = kind.strip().lower()
        try:
            if kind == "mesh":
                shapes.append(ShapeOracle.from_obj(rest.strip()))
                continue
            params = [float(v) for v in rest.split(",") if v.strip()]
            shapes.append(oracle_from_description({"kind": kind, "params": params}))
        except (ValueError, IndexError, OracleError, OSError) as exc:
            raise InputError(f"bad shape {item!r}: {exc}") from exc
    return shapes


def _shape_text(o: ShapeOracle) -> dict:
    desc = o.describe()
    if desc["kind"] in ("sphere", "box", "torus"):
        return {"kind": desc["kind"], "params": " ".join(repr(float(v)) for v in desc["params"])}
    raise InputError(f"shape kind {desc['kind']!r} cannot be listed in a manifest")


def _shape_from_section(sec: dict) -> ShapeOracle:
    return oracle_from_description({"kind": sec["kind"],
                                    "params": [float(v) for v in sec["params"].split()]})


def read_manifest(data_dir: Path) -> tuple[list[ShapeOracle], list[Path]]:
    path = data_dir / MANIFEST_NAME
    if not path.is_file():
        raise InputError(f"{path} not found")
    sections = configio.load(path)
    keys = sorted((k for k in sections if k.startswith("shape.")), key=lambda k: int(k.split(".")[1]))
    if not keys:
        raise InputError(f"{path}: no shapes listed")
    return ([_shape_from_section(sections[k]) for k in keys],
            [data_dir / sections[k]["file"] for k in keys])


# -- output helpers ---------------------------------------------------------

def _prepare_out(args, sections: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"run": {"command": args.command, "seed": args.seed, "threads": args.threads,
                    "version": __version__}}
    echo["args"] = {k: v for k, v in sorted(vars(args).items())
                    if k not in ("func", "command", "config") and v is not None}
    echo.update(sections)
    (out / "config.txt").write_text(configio.dumps(echo))
    (out / "VERSION").write_text(f"ddfire {__version__}\n")
    return out


def _load_sections(args) -> dict[str, dict[str, str]]:
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise InputError(f"config file {path} not found")
    try:
        return configio.load(path)
    except Exception as exc:  # configparser raises several unrelated types
        raise InputError(f"bad config file {path}: {exc}") from exc


def _section(sections: dict, name: str, obj):
    try:
        return configio.apply(obj, sections.get(name, {}))
    except (KeyError, ValueError) as exc:
        raise InputError(f"[{name}] {exc}") from exc


def _load_checkpoint(path):
    from .train import Checkpoint

    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    if not p.is_file():
        raise InputError(f"checkpoint {p} not found")
    try:
        return Checkpoint.load(p)
    except (ValueError, KeyError) as exc:
        raise InputError(f"cannot read checkpoint {p}: {exc}") from exc


def _latent(models, args):
    if getattr(args, "z", None):
        path = Path(args.z)
        if not path.is_file():
            raise InputError(f"latent file {path} not found")
        z = read_latent(path)
        if z.size != models.config.latent_dim:
            raise InputError(f"latent file has {z.size} values, expected {models.config.latent_dim}")
        return z.reshape(1, -1).astype(models.config.dtype)
    try:
        return models.latent(args.shape)
    except IndexError as exc:
        raise InputError(str(exc)) from exc


def write_latent(path, z) -> None:
    Path(path).write_text("\n".join(repr(float(v)) for v in np.ravel(z)) + "\n")


def read_latent(path) -> np.ndarray:
    return np.array([float(v) for v in Path(path).read_text().split()])


def _camera(args, sections):
    from .render import Camera, CameraError

    if getattr(args, "camera", None):
        path = Path(args.camera)
        if not path.is_file():
            raise InputError(f"camera file {path} not found")
        try:
            return Camera.load(path)
        except CameraError as exc:
            raise InputError(str(exc)) from exc
    return _section(sections, "view", ViewConfig()).camera()


def _write_renders(out: Path, prefix: str, models, z, image, camera) -> None:
    from .render import headlight, image_normals, model_sdf, shade, write_depth, write_image

    write_depth(out / f"{prefix}depth.pfm", image.depth)
    write_image(out / f"{prefix}mask.png", image.mask)
    n = image_normals(model_sdf(models, z), image)
    write_image(out / f"{prefix}shaded.png", shade(image, n, headlight(camera)))


# -- commands ------------------------------------------------------------

def cmd_gen_data(args, sections) -> int:
    cfg = _section(sections, "data", DataConfig())
    shapes = parse_shape_spec(args.shapes)
    out = _prepare_out(args, {"data": dataclasses.asdict(cfg)})
    manifest = {}
    for i, shape in enumerate(shapes):
        name = f"shape_{i:03d}.fird"
        try:
            sdf = sample_sdf_points(shape, cfg.n_surface, cfg.n_uniform, seed=args.seed * 1000 + 2 * i)
            ddf = sample_ddf_rays(shape, cfg.n_hit, cfg.n_miss, seed=args.seed * 1000 + 2 * i + 1)
        except GenerationError as exc:
            raise NumericError(str(exc)) from exc
        write_dataset(out / name, sdf, ddf)
        manifest[f"shape.{i}"] = {**_shape_text(shape), "file": name}
        log.info("wrote %s (%s)", name, shape.kind)
    (out / MANIFEST_NAME).write_text(configio.dumps(manifest))
    return EXIT_OK


def cmd_train(args, sections) -> int:
    from .fields import FieldConfig, FieldModels
    from .train import ShapeData, TrainConfig, TrainingDiverged, train

    shapes, files = read_manifest(Path(args.data))
    fcfg = _section(sections, "fields", FieldConfig())
    resume = _load_checkpoint(args.resume) if args.resume else None
    # a resumed run continues the checkpoint's schedule unless the config overrides it
    tcfg = _section(sections, "train", resume.config if resume else TrainConfig(seed=args.seed))
    if args.iterations is not None:
        tcfg = dataclasses.replace(tcfg, iterations=args.iterations)
    if resume is not None:
        models, fcfg = resume.models, resume.models.config
        if models.n_shapes != len(shapes):
            raise InputError("resume checkpoint and dataset disagree on the shape count")
    else:
        models = FieldModels(fcfg, len(shapes), seed=tcfg.seed)
    out = _prepare_out(args, {"fields": fcfg.as_dict(), "train": dataclasses.asdict(tcfg)})
    data = []
    for f in files:
        try:
            sdf, ddf = read_dataset(f)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read dataset {f}: {exc}") from exc
        data.append(ShapeData(sdf, ddf))
    log_path = out / "train.log"
    log_path.write_text("")
    try:
        ck = train(models, data, tcfg, log_path=log_path, resume=resume, until=args.until)
    except TrainingDiverged as exc:
        raise NumericError(str(exc)) from exc
    ck.save(out / CHECKPOINT_NAME)
    if len(ck.history) and not np.all(np.isfinite(ck.history[-1])):
        raise NumericError("final loss is not finite")
    return EXIT_OK


def cmd_render(args, sections) -> int:
    from .render import generate_rays, render_ddf, render_sphere_traced

    ck = _load_checkpoint(args.checkpoint)
    models = ck.models
    z = _latent(models, args)
    camera = _camera(args, sections)
    out = _prepare_out(args, {})
    camera.save(out / "camera.txt")
    rays = generate_rays(camera)
    image, evals = render_ddf(models, z, camera, rays=rays)
    _write_renders(out, "", models, z, image, camera)
    lines = [f"ddf_evaluations {evals}", f"sphere_hit_rays {rays.n_hit}"]
    if args.trace:
        traced, res = render_sphere_traced(models, z, camera, rays=rays)
        _write_renders(out, "traced_", models, z, traced, camera)
        lines.append(f"sdf_evaluations_traced {res.total_evals}")
    (out / "stats.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_reconstruct(args, sections) -> int:
    from .evaluation import CHAMFER_SCALE, EvalError, chamfer, ddf_surface_points, model_mesh
    from .fire import (DepthObservation, ReconConfig, ReconstructionDiverged,
                       ReconstructionError, reconstruct_from_depth, reconstruct_from_silhouette)
    from .render import read_depth, read_mask, render_ddf

    ck = _load_checkpoint(args.checkpoint)
    models = ck.models
    camera = _camera(args, sections)
    if not Path(args.mask).is_file():
        raise InputError(f"mask file {args.mask} not found")
    mask = read_mask(args.mask)
    if args.mode == "depth":
        if not args.depth or not Path(args.depth).is_file():
            raise InputError("depth mode needs an existing --depth file")
        base = ReconConfig.depth_mode()
    else:
        base = ReconConfig.silhouette_mode()
    cfg = _section(sections, "reconstruct", base)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    out = _prepare_out(args, {"reconstruct": dataclasses.asdict(cfg)})
    try:
        if args.mode == "depth":
            obs = DepthObservation(read_depth(args.depth), mask, camera)
            res = reconstruct_from_depth(models, obs, cfg)
        else:
            res = reconstruct_from_silhouette(models, mask, camera, cfg)
    except ReconstructionError as exc:
        raise InputError(str(exc)) from exc
    except ReconstructionDiverged as exc:
        raise NumericError(str(exc)) from exc
    write_latent(out / "z.txt", res.z)
    res.write_trace(out / "trace.csv")
    image, _ = render_ddf(models, res.z, camera)
    _write_renders(out, "result_", models, res.z, image, camera)
    mesh = model_mesh(models, res.z, resolution=args.resolution)
    mesh.write_obj(out / "mesh.obj")
    report = [f"ms_per_iteration {res.ms_per_iter:.3f}", f"final_loss {res.trace[-1]['L_rec']:.6g}"]
    if args.target:
        target = parse_shape_spec(args.target)[0]
        rng = np.random.default_rng(args.seed)
        truth = target.sample_surface(10_000, rng)
        cd_sdf = CHAMFER_SCALE * chamfer(mesh.sample(10_000, rng), truth) if not mesh.empty else float("inf")
        try:
            pts = ddf_surface_points(models, res.z, 10_000, seed=args.seed)
            cd_ddf = CHAMFER_SCALE * chamfer(pts, truth)
        except EvalError:
            cd_ddf = float("inf")
        report += [f"chamfer_sdf_x1000 {cd_sdf:.6f}", f"chamfer_ddf_x1000 {cd_ddf:.6f}"]
    (out / "report.txt").write_text("\n".join(report) + "\n")
    return EXIT_OK


def cmd_eval(args, sections) -> int:
    from .evaluation import EvalError, ddf_chamfer, format_table, mesh_chamfer, model_mesh

    ck = _load_checkpoint(args.checkpoint)
    models = ck.models
    targets = parse_shape_spec(args.targets) if args.targets.strip() else []
    if not targets:
        raise InputError("no evaluation targets")
    if len(targets) > models.n_shapes:
        raise InputError(f"{len(targets)} targets but the checkpoint holds {models.n_shapes} shapes")
    out = _prepare_out(args, {})
    rows = []
    for i, target in enumerate(targets):
        z = models.latent(i)
        cd_sdf = mesh_chamfer(model_mesh(models, z, resolution=args.resolution), target, seed=args.seed)
        try:
            cd_ddf = ddf_chamfer(models, z, target, seed=args.seed)
        except EvalError:
            cd_ddf = float("inf")
        rows.append([i, target.kind, cd_sdf, cd_ddf])
    header = ["shape", "kind", "Ours SDF", "Ours DDF"]
    (out / "chamfer.txt").write_text(format_table(header, rows))
    lines = [",".join(header)] + [f"{r[0]},{r[1]},{r[2]:.6f},{r[3]:.6f}" for r in rows]
    (out / "chamfer.csv").write_text("\n".join(lines) + "\n")
    sys.stdout.write(format_table(header, rows))
    return EXIT_OK


def cmd_bench(args, sections) -> int:
    from .evaluation import bench_table, benchmark, write_bench_csv
    from .fire import DepthObservation
    from .render import read_depth, read_mask, render_oracle

    ck = _load_checkpoint(args.checkpoint)
    models = ck.models
    camera = _camera(args, sections)
    if args.depth:
        for path in (args.depth, args.mask):
            if not path or not Path(path).is_file():
                raise InputError(f"observation file {path} not found")
        obs = DepthObservation(read_depth(args.depth), read_mask(args.mask), camera)
        scene = Path(args.depth).stem
    elif args.scene:
        target = parse_shape_spec(args.scene)[0]
        obs = DepthObservation.from_image(render_oracle(target, camera), camera)
        scene = args.scene
    else:
        raise InputError("bench needs --scene or --depth/--mask")
    out = _prepare_out(args, {})
    reports = [benchmark(m, models, obs, iterations=args.iterations, warmup=args.warmup, scene=scene)
               for m in ("fire", "sphere-traced")]
    write_bench_csv(out / "bench.csv", reports)
    (out / "bench.txt").write_text(bench_table(reports))
    sys.stdout.write(bench_table(reports))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with [sections]")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ddfire", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ddfire {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="sample SDF points and DDF rays")
    p.add_argument("--shapes", required=True, help="shape spec string or file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the SDF/DDF pair")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until", type=int, help="stop at this iteration, keeping the full schedule")
    p.set_defaults(func=cmd_train)

    def model_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--camera", help="camera text file (default: [view] section)")

    p = sub.add_parser("render", parents=[common], help="render a shape with the DDF")
    model_args(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--shape", type=int, default=0, help="training shape index")
    g.add_argument("--z", help="latent code file")
    p.add_argument("--trace", action="store_true", help="also sphere-trace the SDF")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("reconstruct", parents=[common], help="fit a latent code to an observation")
    model_args(p)
    p.add_argument("--mode", choices=("depth", "silhouette"), default="depth")
    p.add_argument("--depth", help="PFM depth map (depth mode)")
    p.add_argument("--mask", required=True, help="PNG object mask")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resolution", type=int, default=128, help="marching-cubes grid")
    p.add_argument("--target", help="shape spec of the true object, for Chamfer")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", parents=[common], help="Chamfer of training shapes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", required=True, help="shape spec, one per latent code in order")
    p.add_argument("--resolution", type=int, default=128)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time FIRe against sphere tracing")
    model_args(p)
    p.add_argument("--scene", help="shape spec rendered as the observation")
    p.add_argument("--depth")
    p.add_argument("--mask")
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_bench)
    return parser


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads(args.threads)
    try:
        sections = _load_sections(args)
        return args.func(args, sections)
    except InputError as exc:
        print(f"ddfire {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"ddfire {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
