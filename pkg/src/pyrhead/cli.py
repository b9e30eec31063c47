"""Command-line interface: grid generation, operator evaluation, gradient
checks, toy training, sparsity statistics, and microbenchmarks.

Exit codes: 0 success, 1 check failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import Value
from .geometry import Box3D, GridSpec, PyramidConfig, PyramidLevelConfig, pyramid_grid_points
from .gradcheck import format_report, run_gradcheck
from .head import CONFIG_SCHEMA_VERSION, HeadConfig, init_head_params, run_head
from .nn import init_mlp
from .operators import (GateOverride, NeighborBundle, attention_feature,
                        graph_feature, init_attention_params,
                        point_transformer_feature, pool_feature,
                        roi_grid_attention, roi_grid_attention_darp)
from .spatial import PointSet, ball_query, build_index
from .synth import SceneConfig, generate_scenes, sparsity_stats, train_toy

USAGE_ERROR = 2
CHECK_FAILURE = 1


class CliError(Exception):
    """Invalid invocation or configuration; maps to exit code 2."""


def _parse_floats(text: str, n: int, what: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != n:
        raise CliError(f"{what} expects {n} comma-separated values, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise CliError(f"bad {what}: {exc}") from None


def _load_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from None


def _write_out(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("PYRHEAD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"PYRHEAD_THREADS must be an integer, got {env!r}")
    return 1


def _fixture_scene(seed: int, n: int = 64, feat_width: int = 8) -> PointSet:
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-2.0, 2.0, size=(n, 3))
    feats = rng.normal(size=(n, feat_width))
    return PointSet(coords, feats)


# -- subcommands -------------------------------------------------------------

def cmd_gridgen(args) -> int:
    box_vals = _parse_floats(args.box, 7, "--box")
    box = Box3D(box_vals[0:3], box_vals[3:6], box_vals[6])
    if args.config:
        pyramid = PyramidConfig.from_json(json.dumps(_load_json(args.config)))
        levels = pyramid.levels
    else:
        grid = [int(v) for v in _parse_floats(args.grid, 3, "--grid")]
        ratios = _parse_floats(args.ratios, 3, "--ratios")
        levels = [PyramidLevelConfig(GridSpec(tuple(grid)), tuple(ratios),
                                     anchor_mode=args.anchor)]
    per_level = [pyramid_grid_points(box, lv).tolist() for lv in levels]
    if args.format == "csv":
        lines = ["level,x,y,z"]
        for li, pts in enumerate(per_level):
            lines.extend(f"{li},{p[0]!r},{p[1]!r},{p[2]!r}" for p in pts)
        _write_out(args, "\n".join(lines) + "\n")
    else:
        _write_out(args, json.dumps({"levels": per_level}, indent=2) + "\n")
    return 0


def cmd_attend(args) -> int:
    seed = args.seed
    rng = np.random.default_rng(seed)
    if args.scene:
        path = Path(args.scene)
        ps = PointSet.from_json(path.read_text()) if path.suffix == ".json" \
            else PointSet.load(path)
    else:
        ps = _fixture_scene(seed)
    idx = build_index(ps, cell=max(args.radius, 0.5))
    gp = _parse_floats(args.grid_point, 3, "--grid-point")
    gates = None
    if args.gates:
        gates = GateOverride.from_tuple(_parse_floats(args.gates, 4, "--gates"))
    params = init_attention_params(rng, ps.feat_width, args.d_model, args.heads)
    if args.op == "darp":
        nb = NeighborBundle.gather_extended(ps, idx, gp, args.radius, args.tau,
                                            args.max_k)
        out = roi_grid_attention_darp(nb, params, Value(args.radius), args.tau,
                                      gates)
    else:
        nb = NeighborBundle.gather(ps, idx, gp, args.radius, args.max_k)
        if args.op == "pool":
            mlp = init_mlp(rng, [ps.feat_width + 3, 64, args.d_model])
            out = pool_feature(nb, mlp)
        elif args.op == "graph":
            out = graph_feature(nb, params)
        elif args.op == "attention":
            out = attention_feature(nb, params)
        elif args.op == "transformer":
            out = point_transformer_feature(nb, params)
        else:  # unified
            out = roi_grid_attention(nb, params, gates)
    doc = {"op": args.op, "neighbors": len(nb), "f_grid": out.data.tolist()}
    if args.format == "csv":
        _write_out(args, "\n".join(repr(v) for v in out.data.tolist()) + "\n")
    else:
        _write_out(args, json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed)
    report = format_report(results)
    ok = all(r.passed for r in results)
    if args.format == "json":
        doc = {"seed": args.seed,
               "groups": [{"group": r.group, "max_rel_err": r.max_rel_err,
                           "tolerance": r.tolerance, "passed": r.passed}
                          for r in results],
               "passed": ok}
        _write_out(args, json.dumps(doc, indent=2) + "\n")
    else:
        _write_out(args, report)
    if args.out:
        sys.stdout.write("PASS\n" if ok else "FAIL\n")
    return 0 if ok else CHECK_FAILURE


def _head_config(args) -> HeadConfig:
    if args.config:
        return HeadConfig.from_json(json.dumps(_load_json(args.config)))
    return HeadConfig()


def cmd_train_toy(args) -> int:
    head_cfg = _head_config(args)
    scene_cfg = SceneConfig()
    result = train_toy(head_cfg, scene_cfg, steps=args.steps, lr=args.lr,
                       seed=args.seed, n_scenes=args.scenes,
                       momentum=args.momentum, threads=_threads(args))
    text = result.to_csv() if args.format == "csv" else result.to_json() + "\n"
    _write_out(args, text)
    if args.out:
        summary = {"initial_loss": result.initial_loss,
                   "final_loss": result.final_loss,
                   "max_radius_shift": result.max_radius_shift()}
        sys.stdout.write(json.dumps(summary) + "\n")
    return 0


def cmd_stats(args) -> int:
    scene_cfg = SceneConfig(seed=args.seed)
    scenes = generate_scenes(scene_cfg, args.scenes, threads=_threads(args))
    table = sparsity_stats(scenes)
    _write_out(args, table.to_csv())
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    n, q = args.points, args.queries
    side = (n / args.density) ** (1.0 / 3.0)
    coords = rng.uniform(0.0, side, size=(n, 3))
    ps = PointSet(coords, np.zeros((n, 1)))
    t0 = time.perf_counter()
    idx = build_index(ps, cell=args.radius)
    build_s = time.perf_counter() - t0
    queries = rng.uniform(0.0, side, size=(q, 3))
    t0 = time.perf_counter()
    hits = 0
    for c in queries:
        hits += ball_query(idx, c, args.radius, max_k=64).size
    query_s = time.perf_counter() - t0
    head_cfg = HeadConfig()
    params = init_head_params(head_cfg, args.seed)
    fx_cfg = SceneConfig(seed=args.seed, n_objects=2)
    scene = generate_scenes(fx_cfg, 1)[0]
    sidx = build_index(scene.ps, 2.4)
    t0 = time.perf_counter()
    run_head(head_cfg, params, scene.ps, sidx, scene.proposals,
             head_cfg.tau_end)
    head_s = time.perf_counter() - t0
    doc = {
        "points": n, "queries": q, "radius": args.radius,
        "index_build_s": build_s,
        "ball_query_total_s": query_s,
        "ball_query_per_query_us": 1e6 * query_s / max(1, q),
        "mean_hits": hits / max(1, q),
        "head_forward_s": head_s,
        "head_rois": len(scene.proposals),
    }
    _write_out(args, json.dumps(doc, indent=2) + "\n")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = f"Config schema version: {CONFIG_SCHEMA_VERSION}"
    parser = argparse.ArgumentParser(
        prog="pyrhead",
        description="Pyramid RoI head toolbox: grids, point attention, "
                    "learnable radii.",
        epilog=epilog,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--seed", type=int, default=0, help="rng seed")
        p.add_argument("--out", help="output file (stdout if omitted)")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (PYRHEAD_THREADS as fallback)")

    p = sub.add_parser("gridgen", help="print RoI grid points for a box",
                       epilog=epilog)
    common(p)
    p.add_argument("--box", required=True,
                   help="corner_x,corner_y,corner_z,W,L,H,yaw")
    p.add_argument("--grid", default="2,2,2", help="points per axis, e.g. 6,6,6")
    p.add_argument("--ratios", default="1,1,1", help="enlarging ratios")
    p.add_argument("--anchor", choices=("center", "corner"), default="center")
    p.set_defaults(fn=cmd_gridgen)

    p = sub.add_parser("attend", help="run one aggregation operator on a scene",
                       epilog=epilog)
    common(p)
    p.add_argument("--op", required=True,
                   choices=("pool", "graph", "attention", "transformer",
                            "unified", "darp"))
    p.add_argument("--scene", help="PSET or JSON point-set fixture")
    p.add_argument("--grid-point", default="0,0,0")
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--max-k", type=int, default=16)
    p.add_argument("--gates", help="fixed gates pos,key,cross,value")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.set_defaults(fn=cmd_attend)

    p = sub.add_parser("gradcheck",
                       help="compare tape gradients with finite differences",
                       epilog=epilog)
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train the head on synthetic scenes",
                       epilog=epilog)
    common(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.0075)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--momentum", type=float, default=0.9)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("stats", help="sparsity histograms as CSV",
                       epilog=epilog)
    common(p)
    p.add_argument("--scenes", type=int, default=20)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("bench", help="time ball queries and a head forward",
                       epilog=epilog)
    common(p)
    p.add_argument("--points", type=int, default=100_000)
    p.add_argument("--queries", type=int, default=4096)
    p.add_argument("--radius", type=float, default=2.4)
    p.add_argument("--density", type=float, default=1.0,
                   help="points per cubic meter of the benchmark scene")
    p.set_defaults(fn=cmd_bench)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return args.fn(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return USAGE_ERROR
    except (ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return USAGE_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
