"""Command line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("gsedit")

HELP_WIDTH = 100
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=36)


def _opt(p, flag, typ, default, text, **kw):
    tname = getattr(typ, "__name__", str(typ))
    shown = "none" if default is None else default
    p.add_argument(flag, type=typ, default=default, help=f"{text} [{tname}, default: {shown}]", **kw)


def _req(p, flag, typ, text):
    p.add_argument(flag, type=typ, required=True, help=f"{text} [{typ.__name__}, required]")


def _int_list(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {s!r}") from None


_int_list.__name__ = "int-list"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    _opt(g, "--seed", int, 0, "seed for every random draw")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity [str, default: WARNING]")
    _opt(g, "--out", str, None, "output file or directory")

    parser = _Parser(prog="gsedit", description="Gaussian splat editing toolkit.", formatter_class=_formatter)
    parser.add_argument("--version", action="version", version=f"gsedit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def cmd(name, text):
        return sub.add_parser(name, parents=[common], help=text, description=text, formatter_class=_formatter)

    p = cmd("gen-scene", "Generate a synthetic Gaussian scene and orbit cameras.")
    _opt(p, "--n", int, 200, "number of gaussians")
    p.add_argument("--layout", default="cluster", choices=["cluster", "shell", "boxes"],
                   help="spatial layout [str, default: cluster]")
    _opt(p, "--views", int, 4, "number of orbit cameras")
    _opt(p, "--width", int, 32, "image width")
    _opt(p, "--height", int, 32, "image height")

    p = cmd("render", "Render RGB (PNG) and depth (.rten) for every camera.")
    _req(p, "--scene", str, "scene JSON")
    _req(p, "--cameras", str, "camera list JSON")

    p = cmd("train-cimln", "Self-supervised training of the depth enhancement network.")
    _req(p, "--renders", str, "directory of rgb_NNN.png / depth_NNN.rten pairs")
    _opt(p, "--steps", int, 200, "optimisation steps")
    _opt(p, "--factor", int, 2, "downsampling factor for degraded inputs")
    _opt(p, "--lambda", float, 1.0, "weight of the squared error term", dest="lam", metavar="LAMBDA")
    _opt(p, "--gamma", float, 0.1, "weight of the boundary term")
    _opt(p, "--lr", float, 1e-3, "Adam learning rate")
    _opt(p, "--features", int, 16, "feature width")

    p = cmd("enhance-depth", "Refine a depth map with a trained checkpoint.")
    _req(p, "--ckpt", str, "checkpoint directory")
    _req(p, "--depth", str, "depth .rten (1 x H x W)")
    _req(p, "--rgb", str, "guide image (PNG or .rten)")

    p = cmd("dwt", "Single-level Haar transform of a C x H x W tensor.")
    _req(p, "--in", str, "input .rten")
    _opt(p, "--out-prefix", str, None, "prefix for PREFIX.LL.rten .. PREFIX.HH.rten")

    p = cmd("idwt", "Inverse Haar transform from four band files.")
    _req(p, "--in-prefix", str, "prefix of the band files")

    p = cmd("edit", "Run the full edit pipeline from a job file or flags.")
    _opt(p, "--job", str, None, "job JSON; other job flags are ignored when given")
    _opt(p, "--scene", str, None, "scene JSON")
    _opt(p, "--cameras", str, None, "camera list JSON")
    _opt(p, "--edit", str, "identity", "edit as KIND[:STRENGTH], KIND in identity/hue_shift/darken/sharpen")
    _opt(p, "--refs", _int_list, "0", "reference view ids, e.g. 0,3")
    _opt(p, "--lambda", float, 0.5, "self-attention share in the blend", dest="lam", metavar="LAMBDA")
    _opt(p, "--steps", int, 50, "diffusion steps T")
    _opt(p, "--beta-start", float, 1e-4, "first beta of the linear schedule")
    _opt(p, "--beta-end", float, 0.02, "last beta of the linear schedule")
    _opt(p, "--ckpt", str, None, "depth enhancement checkpoint")
    _opt(p, "--refit-steps", int, 300, "scene refit steps")
    _opt(p, "--refit-lr", float, 0.02, "scene refit learning rate")

    p = cmd("metrics", "Compare images: psnr, rmse, or cross-view consistency.")
    p.add_argument("--metric", default="psnr", choices=["psnr", "rmse", "consistency"],
                   help="metric to compute [str, default: psnr]")
    _opt(p, "--a", str, None, "first image (PNG or .rten)")
    _opt(p, "--b", str, None, "second image (PNG or .rten)")
    _opt(p, "--peak", float, 1.0, "peak value for psnr")
    p.add_argument("--views", nargs="+", default=None, help="images for consistency [str list, default: none]")

    p = cmd("gradcheck", "Finite-difference check of the depth network and its loss.")
    _opt(p, "--features", int, 4, "feature width of the checked model")
    _opt(p, "--size", int, 8, "input height and width")
    _opt(p, "--h", float, 1e-3, "finite-difference step")
    _opt(p, "--tol", float, 1e-3, "maximum accepted relative error")
    return parser


# -- handlers --------------------------------------------------------------

def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} requires --out")
    return Path(args.out)


def _cmd_gen_scene(args):
    from .splat import SyntheticConfig, make_synthetic_scene, save_cameras, save_scene

    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SyntheticConfig(n_views=args.views, width=args.width, height=args.height)
    res = make_synthetic_scene(args.seed, args.n, args.layout, cfg)
    save_scene(out / "scene.json", res["scene"])
    save_cameras(out / "cameras.json", res["orbit_cameras"])
    print(json.dumps({"scene": str(out / "scene.json"), "cameras": str(out / "cameras.json"),
                      "gaussians": res["scene"].count}))


def _cmd_render(args):
    from .numerics import save_rten
    from .pipeline import save_png
    from .splat import load_cameras, load_scene, render

    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    scene, cams = load_scene(args.scene), load_cameras(args.cameras)
    for i, cam in enumerate(cams):
        r = render(scene, cam)
        save_png(out / f"rgb_{i:03}.png", r["rgb"])
        save_rten(out / f"depth_{i:03}.rten", r["depth"])
        save_rten(out / f"alpha_{i:03}.rten", r["alpha"])
    print(json.dumps({"views": len(cams), "out": str(out)}))


def _cmd_train(args):
    from .cimln import CimlnConfig, TrainConfig, save_checkpoint, train_self_supervised
    from .numerics import load_rten
    from .pipeline import load_png

    out = _need_out(args)
    src = Path(args.renders)
    depths = sorted(src.glob("depth_*.rten"))
    if not depths:
        raise FileNotFoundError(f"no depth_*.rten files in {src}")
    renders = []
    for d in depths:
        rgb = src / d.name.replace("depth_", "rgb_").replace(".rten", ".png")
        renders.append({"depth": load_rten(d), "rgb": load_png(rgb)})
    cfg = TrainConfig(args.steps, args.lr, args.lam, args.gamma, args.factor, args.seed)
    hist: list[float] = []
    model = train_self_supervised(renders, cfg, CimlnConfig(features=args.features), history=hist)
    save_checkpoint(model, out)
    print(json.dumps({"pairs": len(renders), "initial_loss": hist[0], "best_loss": min(hist)}))


def _cmd_enhance(args):
    from .cimln import enhance_depth, load_checkpoint
    from .numerics import load_rten, save_rten
    from .pipeline import load_image

    out = _need_out(args)
    res = enhance_depth(load_checkpoint(args.ckpt), load_rten(args.depth), load_image(args.rgb))
    save_rten(out, res)
    print(json.dumps({"out": str(out), "shape": list(res.shape)}))


def _cmd_dwt(args):
    from .numerics import load_rten, save_rten
    from .wavelet import BANDS, dwt2

    prefix = args.out_prefix or args.out
    if not prefix:
        raise UsageError("dwt requires --out-prefix")
    pyr = dwt2(load_rten(getattr(args, "in")))
    for name in BANDS:
        save_rten(f"{prefix}.{name}.rten", getattr(pyr, name))
    print(json.dumps({"bands": [f"{prefix}.{b}.rten" for b in BANDS]}))


def _cmd_idwt(args):
    from .numerics import load_rten, save_rten
    from .wavelet import BANDS, WaveletPyramid, idwt2

    out = _need_out(args)
    bands = [load_rten(f"{args.in_prefix}.{b}.rten") for b in BANDS]
    c, h, w = bands[0].shape
    res = idwt2(WaveletPyramid(*bands, source_shape=(c, 2 * h, 2 * w)))
    save_rten(out, res)
    print(json.dumps({"out": str(out), "shape": list(res.shape)}))


def _cmd_edit(args):
    from .diffusion import DiffusionConfig
    from .pipeline import EditJob, edit_scene

    if args.job:
        job = EditJob.load(args.job)
        if args.out:
            job.out_dir = args.out
    else:
        if not (args.scene and args.cameras):
            raise UsageError("edit needs --job or both --scene and --cameras")
        job = EditJob(args.scene, args.cameras, args.edit, args.refs, args.lam,
                      DiffusionConfig(args.steps, args.beta_start, args.beta_end), args.ckpt,
                      str(_need_out(args)), args.seed, args.refit_steps, args.refit_lr)
    res = edit_scene(job)
    r = res.report
    print(json.dumps({"out": job.out_dir, "psnr_db": r.psnr_db, "rmse": r.rmse, "cross_view_std": r.cross_view_std}))


def _cmd_metrics(args):
    from .pipeline import compute_psnr, compute_rmse, cross_view_consistency, load_image

    if args.metric == "consistency":
        if not args.views or len(args.views) < 2:
            raise UsageError("consistency needs --views with at least two images")
        value = cross_view_consistency([load_image(v) for v in args.views])
    else:
        if not (args.a and args.b):
            raise UsageError(f"{args.metric} needs --a and --b")
        a, b = load_image(args.a), load_image(args.b)
        value = compute_psnr(a, b, args.peak) if args.metric == "psnr" else compute_rmse(a, b)
    print(repr(float(value)))


def _cmd_gradcheck(args):
    from .cimln import CimlnConfig, CimlnModel, forward, init_model, loss_total
    from .numerics import DTensor, grad_check

    rng = np.random.default_rng(args.seed)
    model = init_model(CimlnConfig(features=args.features), args.seed, zero_head=False)
    s = args.size
    depth = DTensor(rng.uniform(0.5, 1.0, (1, s, s)))
    rgb = DTensor(rng.uniform(0.0, 1.0, (3, s, s)))
    target = DTensor(rng.uniform(0.5, 1.0, (1, s, s)))
    names = list(model.params)

    def f_params(ps):
        return loss_total(forward(CimlnModel(model.config, dict(zip(names, ps))), depth, rgb), target)

    def f_inputs(xs):
        return loss_total(forward(model, xs[0], xs[1]), target)

    results = {
        "forward_loss_wrt_inputs": grad_check(f_inputs, [depth, rgb], args.h),
        "forward_loss_wrt_parameters": grad_check(f_params, [model.params[n] for n in names], args.h),
    }
    for k, v in results.items():
        print(f"{k} {v:.3e}")
    worst = max(results.values())
    if worst > args.tol:
        raise RuntimeError(f"max relative error {worst:.3e} exceeds {args.tol:g}")


HANDLERS = {
    "gen-scene": _cmd_gen_scene,
    "render": _cmd_render,
    "train-cimln": _cmd_train,
    "enhance-depth": _cmd_enhance,
    "dwt": _cmd_dwt,
    "idwt": _cmd_idwt,
    "edit": _cmd_edit,
    "metrics": _cmd_metrics,
    "gradcheck": _cmd_gradcheck,
}


def _fail(stage: str, message: str, code: int) -> int:
    msg = " ".join(str(message).split())
    print(f"ERROR {stage}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import PipelineError

    try:
        HANDLERS[args.command](args)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except PipelineError as e:
        return _fail(e.stage, str(e), EXIT_RUNTIME)
    except Exception as e:  # noqa: BLE001 - every failure becomes one machine-readable line
        log.debug("failure", exc_info=True)
        return _fail(args.command, str(e) or type(e).__name__, EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
