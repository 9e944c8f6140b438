"""``eva-splat`` command line: gen, render, fit, bench, eval.

Settings resolve as CLI flag > ``--config`` JSON file > built-in default.
Failures print ``{"error": CODE, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EvaSplatError, FormatError, BundleNotFound
from .losses import LossWeights, mse, psnr, ssim

# one-time input problems get exit code 2, runtime failures 1
_USAGE_ERRORS = (BundleNotFound, ConfigError, FormatError)

COMMON_DEFAULTS = {"seed": 0, "deterministic": False, "threads": None, "out": "out", "weights": None}
DEFAULTS = {
    "gen": {"views": 2, "delta_deg": 45.0, "size": 64, "gaussians": 200},
    "render": {"bundle": None, "view": None, "target_deg": None, "source_views": None,
               "scale_factor": 0.5, "oracle": False},
    "fit": {"bundle": None, "iters": 2000, "experiment": "attributes", "perturb": 1.0},
    "bench": {"shapes": None, "window": None, "repeats": 3, "budget_gb": 2.0},
    "eval": {"pred": None, "gt": None},
}


def _add_common(p):
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="random seed (default 0)")
    p.add_argument("--deterministic", action="store_true", default=S,
                   help="null wall-clock timings so outputs are byte-identical")
    p.add_argument("--threads", type=int, default=S, help="kernel worker cap (fallback: EVA_SPLAT_THREADS)")
    p.add_argument("--out", default=S, help="output directory (default ./out)")
    p.add_argument("--config", default=S, help="JSON file of settings; CLI flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="eva-splat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"eva-splat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic ring-scene bundle")
    _add_common(p)
    p.add_argument("--views", type=int, default=S)
    p.add_argument("--delta-deg", type=float, default=S, help="angle between adjacent cameras")
    p.add_argument("--size", type=int, default=S, help="square image side in pixels")
    p.add_argument("--gaussians", type=int, default=S, help="ground-truth Gaussian count")

    p = sub.add_parser("render", help="lift bundle views to Gaussians and render")
    _add_common(p)
    p.add_argument("--bundle", default=S)
    p.add_argument("--view", type=int, default=S, help="render at this bundle camera")
    p.add_argument("--target-deg", type=float, default=S, help="render at a ring camera at this azimuth")
    p.add_argument("--source-views", default=S,
                   help="comma list of views to lift (default: --view itself, or all views)")
    p.add_argument("--scale-factor", type=float, default=S, help="lifted scale in pixel footprints")
    p.add_argument("--oracle", action="store_true", default=S,
                   help="render with the brute-force oracle and report its deviation from the tiled path")

    p = sub.add_parser("fit", help="analysis-by-synthesis fit against bundle images")
    _add_common(p)
    p.add_argument("--bundle", default=S)
    p.add_argument("--iters", type=int, default=S)
    p.add_argument("--experiment", choices=("attributes", "anchor"), default=S)
    p.add_argument("--perturb", type=float, default=S, help="init perturbation strength")

    p = sub.add_parser("bench", help="attention cost benchmark, CSV output")
    _add_common(p)
    p.add_argument("--shapes", default=S, help="comma list of VxCxHxW (default: reference sizes)")
    p.add_argument("--window", type=int, choices=(16, 32, 64), default=S,
                   help="only this EVA window plus full attention")
    p.add_argument("--repeats", type=int, default=S)
    p.add_argument("--budget-gb", type=float, default=S)

    p = sub.add_parser("eval", help="PSNR / SSIM / MSE between two images")
    _add_common(p)
    p.add_argument("--pred", default=S)
    p.add_argument("--gt", default=S)
    return parser


def resolve_config(command: str, cli: dict) -> dict:
    allowed = {**COMMON_DEFAULTS, **DEFAULTS[command]}
    cfg = dict(allowed)
    path = cli.pop("config", None)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items()}
        if data.pop("command", command) != command:
            raise ConfigError("config is for another subcommand")
        unknown = sorted(set(data) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg.update(data)
    cfg.update(cli)
    try:
        cfg["weights"] = LossWeights.from_dict(cfg["weights"] or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg["command"] = command
    return cfg


def _echo(cfg: dict) -> dict:
    out = {}
    for k, v in sorted(cfg.items()):
        if isinstance(v, LossWeights):
            v = {f: getattr(v, f) for f in v.__dataclass_fields__}
        out[k] = v
    return out


def _versions() -> dict:
    import numba
    import scipy

    return {"eva_splat": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


class _Run:
    """Tracks timings and written files for the manifest."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.timings = {}
        self.files = []

    def timed(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        result = fn(*args, **kwargs)
        self.timings[name] = None if self.cfg["deterministic"] else (time.perf_counter() - t0) * 1e3
        return result

    def path(self, rel) -> Path:
        self.files.append(rel)
        return self.out / rel

    def write_json(self, rel, obj):
        from .io import write_json

        write_json(self.path(rel), obj)

    def manifest(self):
        from .io import write_json

        write_json(self.out / "manifest.json", {
            "command": self.cfg["command"], "config": _echo(self.cfg), "versions": _versions(),
            "timings_ms": self.timings, "outputs": sorted(self.files),
        })


# -- subcommands -------------------------------------------------------------------


def cmd_gen(cfg) -> int:
    from .bundle import save_bundle
    from .pipeline import generate_scene

    run = _Run(cfg)
    scene = run.timed("generate", generate_scene, cfg["seed"], cfg["views"], cfg["delta_deg"],
                      cfg["gaussians"], cfg["size"])
    run.files += run.timed("write", save_bundle, scene, run.out)
    run.manifest()
    return 0


def _parse_views(text, n):
    if text is None:
        return None
    views = tuple(int(x) for x in str(text).split(",") if x.strip())
    if not views or any(v < 0 or v >= n for v in views):
        raise ConfigError(f"source views {text!r} out of range for {n} views")
    return views


def cmd_render(cfg) -> int:
    from .bundle import load_bundle
    from .io import write_feature_plane, write_png
    from .pipeline import ConstantAttributes, PipelineConfig, forward_pipeline, ring_camera
    from .rasterizer import oracle_render

    if cfg["bundle"] is None:
        raise ConfigError("render needs --bundle")
    run = _Run(cfg)
    scene = load_bundle(cfg["bundle"])
    sources = _parse_views(cfg["source_views"], scene.n_views)
    reference = None
    if cfg["target_deg"] is not None:
        target = ring_camera(cfg["target_deg"], scene.cameras[0].width)
        if scene.gaussians is not None:
            reference = oracle_render(scene.gaussians, target).color
    else:
        view = 0 if cfg["view"] is None else int(cfg["view"])
        if not 0 <= view < scene.n_views:
            raise ConfigError(f"view {view} out of range")
        target = scene.cameras[view]
        reference = scene.images[view]
        sources = sources or (view,)
    pc = PipelineConfig(target=target, source_views=sources,
                        attributes=ConstantAttributes(scale_factor=cfg["scale_factor"]))
    out = run.timed("render", forward_pipeline, scene, pc)
    image = out.image
    stats = {"gaussian_count": len(out.gaussians),
             "source_views": list(sources if sources is not None else range(scene.n_views)),
             "render_ms": run.timings["render"]}
    if cfg["oracle"]:
        pc.oracle = True
        ref_out = run.timed("oracle_render", forward_pipeline, scene, pc)
        dev = float(np.max(np.abs(ref_out.target.color - out.target.color)))
        dev_feat = float(np.max(np.abs(ref_out.target.feature - out.target.feature)))
        stats["oracle"] = {"max_abs_diff_color": dev, "max_abs_diff_feature": dev_feat,
                           "within_1e-5": bool(max(dev, dev_feat) <= 1e-5)}
        image = ref_out.image
    if reference is not None:
        stats["psnr_db"] = psnr(image, reference)
        stats["ssim"] = ssim(image, reference)
    write_png(run.path("render.png"), image)
    write_feature_plane(run.path("render.evfp"), image)
    write_feature_plane(run.path("feature.evfp"), out.feature)
    run.write_json("stats.json", stats)
    run.manifest()
    return 0


def cmd_fit(cfg) -> int:
    from .bundle import load_bundle
    from .io import atomic_open, write_gaussians
    from .pipeline import anchor_experiment, fit_gaussians, fit_psnr, perturb_gaussians

    if cfg["bundle"] is None:
        raise ConfigError("fit needs --bundle")
    run = _Run(cfg)
    scene = load_bundle(cfg["bundle"])
    if cfg["experiment"] == "anchor":
        report = run.timed("fit", anchor_experiment, scene, iterations=cfg["iters"], weights=cfg["weights"])
        report["fit_ms"] = run.timings["fit"]
        run.write_json("stats.json", report)
        run.manifest()
        return 0
    if scene.gaussians is None:
        raise FormatError("bundle has no gaussians.evgs to initialize from")
    k = cfg["perturb"]
    init = perturb_gaussians(scene.gaussians, cfg["seed"], position=0.05 * k, log_scale=0.3 * k,
                             opacity=0.2 * k, color=0.2 * k, rotation=0.3 * k)
    res = run.timed("fit", fit_gaussians, scene.images, scene.cameras, init, cfg["weights"], cfg["iters"])
    values = fit_psnr(res, scene.images, scene.cameras)
    with atomic_open(run.path("loss_trace.csv"), "w") as fh:
        fh.write("iteration,loss,best_loss\n")
        for i, (a, b) in enumerate(zip(res.loss_trace, res.best_trace)):
            fh.write(f"{i},{a:.10e},{b:.10e}\n")
    write_gaussians(run.path("fitted.evgs"), res.gaussians)
    run.write_json("stats.json", {
        "psnr_db": values, "min_psnr_db": min(values), "iterations": len(res.loss_trace),
        "best_loss": res.best_loss, "initial_loss": res.loss_trace[0], "final_step": res.step,
        "gaussian_count": len(res.gaussians), "fit_ms": run.timings["fit"],
    })
    run.manifest()
    return 0


def _parse_shapes(text):
    from .bench import DEFAULT_SHAPES

    if text is None:
        return DEFAULT_SHAPES
    try:
        shapes = [tuple(int(x) for x in s.lower().split("x")) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad shape list {text!r}") from exc
    if not shapes or any(len(s) != 4 or min(s) < 1 for s in shapes):
        raise ConfigError(f"shapes must be VxCxHxW, got {text!r}")
    return shapes


def cmd_bench(cfg) -> int:
    from .bench import VARIANTS, bench_attention, write_csv

    run = _Run(cfg)
    shapes = _parse_shapes(cfg["shapes"])
    variants = list(VARIANTS)
    if cfg["window"] is not None:
        variants = [f"eva_w{int(cfg['window'])}", "full_cross_view"]
    budget = int(cfg["budget_gb"] * 1024**3)
    t0 = time.perf_counter()
    reports = [bench_attention(s, v, cfg["repeats"], seed=cfg["seed"], budget_bytes=budget,
                               timing=not cfg["deterministic"]) for s in shapes for v in variants]
    run.timings["bench"] = None if cfg["deterministic"] else (time.perf_counter() - t0) * 1e3
    write_csv(reports, run.path("attention_cost.csv"))
    run.write_json("bench.json", [r.as_dict() for r in reports])
    run.manifest()
    return 0


def cmd_eval(cfg) -> int:
    from .io import read_image

    if cfg["pred"] is None or cfg["gt"] is None:
        raise ConfigError("eval needs --pred and --gt")
    for p in (cfg["pred"], cfg["gt"]):
        if not Path(p).exists():
            raise FormatError(f"no image at {p}")
    pred, gt = read_image(cfg["pred"]), read_image(cfg["gt"])
    if pred.shape != gt.shape:
        raise FormatError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    result = {"psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt), "mse": mse(pred, gt)}
    run = _Run(cfg)
    run.write_json("eval.json", result)
    run.manifest()
    print(json.dumps(result, sort_keys=True))
    return 0


COMMANDS = {"gen": cmd_gen, "render": cmd_render, "fit": cmd_fit, "bench": cmd_bench, "eval": cmd_eval}


def _fail(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        from .rasterizer import set_threads

        set_threads(cfg["threads"])
        return COMMANDS[command](cfg)
    except _USAGE_ERRORS as exc:
        return _fail(exc.code, str(exc), 2)
    except EvaSplatError as exc:
        return _fail(exc.code, str(exc), 1)
    except Exception as exc:  # keep the stderr contract for unexpected failures
        return _fail("InternalError", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
