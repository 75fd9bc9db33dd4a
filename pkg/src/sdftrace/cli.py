"""``sdftrace`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _pair(kind):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse {text!r}") from None
    return parse


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdftrace", description="Sphere-traced SDF rendering with interval volume rendering.")
    p.add_argument("--version", action="version", version=f"sdftrace {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    r = sub.add_parser("render", help="render one view of a scene")
    r.add_argument("--scene", required=True, type=Path)
    r.add_argument("--camera", type=_pair(float), help="yaw,pitch in degrees (default: first scene camera)")
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--threads", type=_positive_int)

    f = sub.add_parser("fit-sdf", help="fit a neural SDF to an occupancy oracle")
    f.add_argument("--oracle", required=True,
                   help="sphere (unit), box, capsule, a scene file, or an occupancy grid file")
    f.add_argument("--out", required=True, type=Path, help="weights file to write (.mlpw)")
    f.add_argument("--report", type=Path, help="JSON report with per-step losses")
    f.add_argument("--steps", type=_positive_int, default=1600)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--tau", type=float, default=0.05, help="soft occupancy width for analytic shapes (0: hard)")
    f.add_argument("--init-radius", type=float, default=0.5)
    f.add_argument("--threads", type=_positive_int)

    e = sub.add_parser("eval-losses", help="evaluate geometry and consistency losses for a scene")
    e.add_argument("--scene", required=True, type=Path)
    e.add_argument("--json", action="store_true", help="single-line JSON instead of key=value lines")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=_positive_int)

    t = sub.add_parser("trace-probe", help="print the (t, s) sequence of one traced ray")
    t.add_argument("--scene", required=True, type=Path)
    t.add_argument("--camera", type=_pair(float), help="yaw,pitch in degrees")
    t.add_argument("--pixel", required=True, type=_pair(int), help="col,row")

    g = sub.add_parser("gen-fixtures", help="write the standard fixture set")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    return p


def _camera_spec(cfg, angles):
    if angles is None:
        return cfg.cameras[0]
    return replace(cfg.frontal, yaw=angles[0], pitch=angles[1])


def cmd_render(args) -> int:
    from .renderer import render_view
    from .scene import parse_scene

    cfg = parse_scene(args.scene)
    settings = replace(cfg.render, threads=args.threads)
    cam = _camera_spec(cfg, args.camera).camera(settings.width, settings.height)
    prod = render_view(cfg.scene(), cam, settings)
    for name in prod.write(args.out):
        print(args.out / name)
    return 0


def _oracle_from_arg(text: str, tau: float):
    from .fields import Box, Capsule, GridOccupancy, SdfOccupancy, Sphere
    from .neural import PositionalFeatures, PriorOracle

    shapes = {"sphere": Sphere(1.0), "unit-sphere": Sphere(1.0), "box": Box((0.4, 0.6, 0.3)),
              "capsule": Capsule((0.0, -0.5, 0.0), (0.0, 0.5, 0.0), 0.3)}
    if text in shapes:
        occ = SdfOccupancy(shapes[text], tau if tau > 0 else None)
    elif text.endswith((".yaml", ".yml")):
        from .scene import parse_scene

        return parse_scene(text).oracle
    else:
        occ = GridOccupancy.load(text)
    return PriorOracle(PositionalFeatures(occ), occ)


def cmd_fit(args) -> int:
    from .fields import NeuralSdf, geometric_init
    from .fitting import FitConfig, fit_sdf
    from .losses import GeoLossWeights
    from .neural import save_weights

    oracle = _oracle_from_arg(args.oracle, args.tau)
    weights = geometric_init(np.random.default_rng(args.seed), radius=args.init_radius).astype(np.float32)
    field = NeuralSdf(weights, oracle)
    config = FitConfig(steps=args.steps, seed=args.seed)

    def progress(step, comps):
        if step % 100 == 0 or step == config.steps - 1:
            print(f"step {step}: " + " ".join(f"{k}={v:.6g}" for k, v in comps.items() if k != "step"),
                  file=sys.stderr)

    report = fit_sdf(field, oracle, config, GeoLossWeights(), progress=progress)
    save_weights(field.weights, args.out)
    if args.report:
        args.report.write_text(report.to_json(), encoding="utf-8")
    summary = {k: getattr(report, k) for k in ("surface_abs_mean", "eik_abs_mean", "mask_iou", "alpha",
                                               "wall_time")}
    print(json.dumps(summary))
    return 0


def cmd_eval_losses(args) -> int:
    from .losses import CsLossWeights, GeoLossWeights, loss_back_cs, loss_front_cs, loss_geo, random_view_sampler
    from .scene import parse_scene

    cfg = parse_scene(args.scene)
    settings = replace(cfg.render, threads=args.threads)
    scene = cfg.scene()
    report: dict[str, float] = {}
    if cfg.oracle.occupancy is not None:
        total, comps = loss_geo(cfg.field, cfg.oracle, random_view_sampler(64, 128), GeoLossWeights(),
                                seed=args.seed, density=cfg.density, trace=cfg.trace)
        report.update({f"geo.{k}": v for k, v in comps.items()})
        report["geo.total"] = total
    cs = CsLossWeights()
    if cfg.anchor is not None:
        frontal = cfg.frontal_camera()
        total, comps = loss_front_cs(scene, cfg.anchor, frontal, cs, settings)
        report.update({f"front.{k}": v for k, v in comps.items()})
        report["front.total"] = total
    if cfg.oracle.color_fn is not None:
        report["back.total"] = loss_back_cs(scene, cfg.frontal_camera(), cs, args.seed, settings)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        for k in sorted(report):
            print(f"{k}={report[k]!r}")
    return 0


def cmd_trace_probe(args) -> int:
    from .core import camera_ray
    from .scene import parse_scene
    from .tracer import sphere_trace

    cfg = parse_scene(args.scene)
    cam = _camera_spec(cfg, args.camera).camera(cfg.render.width, cfg.render.height)
    ray = camera_ray(cam, args.pixel)
    record: list[tuple[float, float]] = []
    res = sphere_trace(cfg.field, ray, settings=cfg.trace, oracle=cfg.oracle, record=record)
    for t, s in record:
        print(f"{t!r}\t{s!r}")
    print(f"status={res.status_name()} iterations={int(res.iterations)}", file=sys.stderr)
    return 0


def cmd_gen_fixtures(args) -> int:
    from .fixtures import gen_fixtures

    manifest = gen_fixtures(args.out, args.seed)
    for name, digest in sorted(manifest.items()):
        print(f"{digest}  {name}")
    return 0


COMMANDS = {
    "render": cmd_render,
    "fit-sdf": cmd_fit,
    "eval-losses": cmd_eval_losses,
    "trace-probe": cmd_trace_probe,
    "gen-fixtures": cmd_gen_fixtures,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # every failure becomes a diagnostic and exit code 2
        print(f"sdftrace {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
