"""Command-line entry point: ``gpwarp {noise,flow,video,eval,bench,check}``.

Exit codes: 0 success, 1 failed check, 2 usage or input error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

NOISE_RANGE = (-3.0, 3.0)
FRAME_RANGE = (-2.5, 2.5)

METRIC_FIELDS = ("frame_index", "seed", "scheme", "lambda", "err_first", "err_prev", "mse")
LOG_FIELDS = ("seed", "frame", "step", "t", "e_t", "grad_norm", "skipped")

# every parameter of a video run; the manifest is this dict after merging
VIDEO_DEFAULTS = dict(
    resolution=64, frames=16, shift_x=1.0, shift_y=0.0, scheme="gp", guidance=1.0, reduction="sum",
    eps_g=1e-12, steps=50, tau=10.0, schedule_scale=1.0, task="mask", data="mixture", data_length=0.1,
    mixture_offset=0.75, noise_length=None, truncation=2.0, features=3000, sigma_y=0.05, hole=0.75,
    hole_motion="scene", factor=4, perturb=0.2, gain_cycles=1, seed=0, samples=1, truth_seed=0,
    noise_base="rff", flows=None,
)


class UsageError(Exception):
    pass


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _print_csv(fields, rows, stream=None):
    w = csv.DictWriter(stream or sys.stdout, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def _fmt(x) -> str:
    return f"{x:.10g}"


# -- noise ------------------------------------------------------------------

def cmd_noise(args) -> int:
    from .grid import Field, Grid, field_to_image, tensor_write
    from .kernels import KernelSpec, rff_eval_grid, rff_sample, rff_write
    from .warp import WhiteSampler
    from . import plotting

    grid = Grid(args.resolution, args.resolution)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "gp":
        spec = KernelSpec(args.length_scale, args.truncation)
        rf = rff_sample(spec, args.features, args.seed)
        field = rff_eval_grid(rf, grid, args.threads)
        rff_write(out.with_suffix(".wdrf"), rf)
    else:
        field = WhiteSampler().draw(grid, args.seed)
    tensor_write(out.with_suffix(".wdtn"), field)
    field_to_image(field, *NOISE_RANGE, out.with_suffix(".pgm"))
    v = field.values[..., 0]
    plotting.noise_panel([v], [f"{args.mode} noise, seed {args.seed}"], out.with_suffix(".png"), *NOISE_RANGE)
    print(f"wrote {out.with_suffix('.wdtn')} mean={v.mean():.4f} var={v.var():.4f}")
    return EXIT_OK


# -- flow -------------------------------------------------------------------

def cmd_flow(args) -> int:
    from . import flow as fl
    from .grid import Grid, tensor_read

    if args.kind == "estimate":
        a, b = tensor_read(args.prev), tensor_read(args.next)
        f = fl.flow_estimate_hs(a, b, args.alpha, args.iters)
    elif args.kind == "compose":
        f = fl.flow_compose(fl.flow_read(args.first), fl.flow_read(args.second))
    elif args.kind == "invert":
        f = fl.flow_read(args.flow).inverted()
    else:
        grid = Grid(args.resolution, args.resolution)
        if args.kind == "translate":
            f = fl.flow_translate_pixels(grid, args.dx, args.dy)
        elif args.kind == "rotate":
            f = fl.flow_rotate(grid, np.deg2rad(args.angle), (args.cx, args.cy))
        else:
            f = fl.flow_swirl(grid, args.strength, args.radius, (args.cx, args.cy))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fl.flow_write(args.out, f)
    mag = np.hypot(*np.moveaxis(f.forward, -1, 0)) * f.grid.width
    print(f"wrote {args.out} max|forward|={mag.max():.4f}px in-frame={f.forward_mask.mean():.4f} "
          f"fold={fl.fold_density(f):.4f}")
    return EXIT_OK


def _read_flows(path):
    from .flow import FlowSequence, flow_read

    p = Path(path)
    files = sorted(p.glob("*.wdfl")) if p.is_dir() else [p]
    if not files:
        raise UsageError(f"no .wdfl files in {p}")
    return FlowSequence([flow_read(f) for f in files])


# -- video ------------------------------------------------------------------

def video_params(args) -> dict:
    from .config import merge, read_config

    file_values = read_config(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in VIDEO_DEFAULTS}
    if args.no_warp:
        flags["scheme"] = "resample"
    try:
        params = merge(VIDEO_DEFAULTS, file_values, flags)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    from .diffusion import Schedule
    from .guidance import REDUCTIONS
    from .scenarios import DATA, TASKS
    from .warp import SCHEMES

    for key, allowed in (("scheme", SCHEMES), ("task", TASKS), ("data", DATA), ("reduction", REDUCTIONS),
                         ("noise_base", ("rff", "white")), ("hole_motion", ("scene", "fixed"))):
        if params[key] not in allowed:
            raise UsageError(f"{key} must be one of {', '.join(allowed)}")
    if params["guidance"] < 0:
        raise UsageError("guidance strength must be non-negative")
    if params["scheme"] == "gp" and params["noise_base"] != "rff":
        raise UsageError("the gp scheme needs rff base noise")
    if params["frames"] < 1 or params["samples"] < 1 or params["steps"] < 1:
        raise UsageError("frames, samples and steps must be positive")
    Schedule(params["tau"], params["steps"], params["schedule_scale"])
    return params


def run_video_params(params: dict, out_dir: Path, figures: bool = True) -> dict:
    from .config import write_manifest
    from .diffusion import Schedule
    from .grid import Field, field_to_image, tensor_write
    from .scenarios import build_setup, evaluate_frames, run_noise, run_video
    from . import plotting

    flows = _read_flows(params["flows"]) if params["flows"] else None
    if flows is not None and len(flows) != params["frames"] - 1:
        raise UsageError(f"{params['frames']} frames need {params['frames'] - 1} flows, found {len(flows)}")
    setup = build_setup(
        resolution=params["resolution"], n_frames=params["frames"], shift_px=(params["shift_x"], params["shift_y"]),
        data=params["data"], task=params["task"], data_length=params["data_length"],
        noise_length=params["noise_length"], truncation=params["truncation"], sigma_y=params["sigma_y"],
        hole=params["hole"], factor=params["factor"], hole_motion=params["hole_motion"],
        perturb=params["perturb"], gain_cycles=params["gain_cycles"], n_features=params["features"],
        truth_seed=params["truth_seed"], offset=params["mixture_offset"], flows=flows)
    seeds = [params["seed"] + b for b in range(params["samples"])]
    schedule = Schedule(params["tau"], params["steps"], params["schedule_scale"])
    noise = run_noise(setup, params["scheme"], seeds, base=params["noise_base"])
    frames, run = run_video(setup, noise, params["guidance"], schedule, params["reduction"], params["eps_g"])
    metrics = evaluate_frames(setup, frames)

    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "manifest.ini", params)
    rows = []
    for b, s in enumerate(seeds):
        d = out_dir / "frames" / f"seed{s}"
        d.mkdir(parents=True, exist_ok=True)
        for j in range(len(frames)):
            f = Field.from_flat(setup.grid, frames[j, b])
            tensor_write(d / f"frame_{j:03d}.wdtn", f)
            field_to_image(f, *FRAME_RANGE, d / f"frame_{j:03d}.pgm")
            rows.append({"frame_index": j, "seed": s, "scheme": params["scheme"], "lambda": _fmt(params["guidance"]),
                         **{k: _fmt(metrics[k][j, b]) for k in ("err_first", "err_prev", "mse")}})
    _write_csv(out_dir / "metrics.csv", METRIC_FIELDS, rows)
    log = [dict(r, seed=seeds[r["sample"]], skipped=int(r["skipped"])) for r in run.log]
    _write_csv(out_dir / "guidance_log.csv", LOG_FIELDS, log)
    if figures:
        plotting.frame_strip(frames[:, 0], setup.grid.shape, out_dir / "frames.png",
                             every=max(1, len(frames) // 8), title=f"{params['scheme']}, lambda={params['guidance']:g}")
        plotting.frame_strip(setup.truth, setup.grid.shape, out_dir / "truth.png", every=max(1, len(frames) // 8))
        plotting.error_curves({k: metrics[k].mean(1) for k in ("err_first", "err_prev", "mse")},
                              out_dir / "errors.png", ylabel="mean over seeds")
        if run.log:
            plotting.guidance_trace(run.log, out_dir / "guidance.png")
    return dict(frames=frames, metrics=metrics, setup=setup)


def cmd_video(args) -> int:
    params = video_params(args)
    out = Path(args.out_dir)
    t0 = time.perf_counter()
    res = run_video_params(params, out, figures=not args.no_figures)
    m = res["metrics"]
    print(f"wrote {out} in {time.perf_counter() - t0:.1f}s: mean err_first={m['err_first'][1:].mean():.6g} "
          f"err_prev={m['err_prev'][1:].mean():.6g} mse={m['mse'].mean():.6g}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .grid import tensor_read
    from .metrics import warping_error

    files = sorted(Path(args.frames_dir).glob("*.wdtn"))
    if not files:
        raise UsageError(f"no .wdtn frames in {args.frames_dir}")
    flows = _read_flows(args.flows)
    frames = [tensor_read(f) for f in files]
    if len(frames) != len(flows) + 1:
        raise UsageError(f"{len(frames)} frames need {len(frames) - 1} flows, found {len(flows)}")
    errs = warping_error(frames, flows, args.reference)
    rows = [{"frame_index": j, "reference": args.reference, "warping_error": _fmt(e)} for j, e in enumerate(errs)]
    fields = ("frame_index", "reference", "warping_error")
    if args.out:
        _write_csv(args.out, fields, rows)
    _print_csv(fields, rows)
    return EXIT_OK


# -- bench ------------------------------------------------------------------

def bench_rows(resolution: int, features: int, threads: list[int], repeats: int, seed: int = 0):
    """Median timings of ``rff_eval_grid`` and ``warp_gp`` per thread count.

    ``max_abs_diff`` compares each output with the single-threaded one.
    """
    from .flow import flow_compose, flow_swirl, flow_translate_pixels
    from .grid import Grid
    from .kernels import KernelSpec, default_length_scale, rff_eval_grid, rff_sample
    from .warp import warp_gp

    grid = Grid(resolution, resolution)
    rf = rff_sample(KernelSpec(default_length_scale(resolution), 2.0), features, seed)
    cum = flow_compose(flow_translate_pixels(grid, 3.5, -1.25), flow_swirl(grid, 0.3))
    ops = {"rff_eval_grid": lambda n: rff_eval_grid(rf, grid, n).values,
           "warp_gp": lambda n: warp_gp(rf, cum, grid, n)[0].values}
    rows = []
    for name, fn in ops.items():
        fn(threads[0])  # compile and warm caches
        ref, base = None, None
        for n in threads:
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                out = fn(n)
                times.append(time.perf_counter() - t0)
            med = float(np.median(times))
            if ref is None:
                ref, base = out, med
            rows.append({"op": name, "resolution": resolution, "features": features, "threads": n,
                         "median_s": med, "speedup": base / med,
                         "max_abs_diff": float(np.abs(out - ref).max())})
    return rows


def cmd_bench(args) -> int:
    import os

    from . import plotting

    threads = [int(t) for t in str(args.threads).split(",")]
    if any(t < 1 for t in threads):
        raise UsageError("thread counts must be positive")
    rows = bench_rows(args.resolution, args.features, threads, args.repeats, args.seed)
    fields = ("op", "resolution", "features", "threads", "median_s", "speedup", "max_abs_diff")
    out_rows = [{k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows]
    _print_csv(fields, out_rows)
    cores = os.cpu_count() or 1
    for op in ("rff_eval_grid", "warp_gp"):
        sub = [r for r in rows if r["op"] == op and r["threads"] <= cores]
        if any(b["speedup"] < a["speedup"] * 0.95 for a, b in zip(sub, sub[1:])):
            print(f"warning: {op} throughput not monotone in threads ({cores} cores available)", file=sys.stderr)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "bench.csv", fields, out_rows)
        sub = [r for r in rows if r["op"] == "rff_eval_grid"]
        plotting.thread_scaling([r["threads"] for r in sub], [r["median_s"] for r in sub], out / "bench.png")
    return EXIT_OK


# -- check ------------------------------------------------------------------

def cmd_check(args) -> int:
    from .equivariance import run_checks

    results = run_checks(args.resolution, args.steps, args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_CHECK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .kernels import DEFAULT_FEATURES, DEFAULT_LENGTH_SCALE, DEFAULT_TRUNCATION
    from .scenarios import DATA, TASKS
    from .warp import SCHEMES

    p = argparse.ArgumentParser(prog="gpwarp", description="GP noise warping and equivariance-guided video sampling.")
    sub = p.add_subparsers(dest="command", required=True)

    n = sub.add_parser("noise", help="draw one noise field")
    n.add_argument("--resolution", type=int, default=128)
    n.add_argument("--length-scale", type=float, default=DEFAULT_LENGTH_SCALE)
    n.add_argument("--features", type=int, default=DEFAULT_FEATURES)
    n.add_argument("--truncation", type=float, default=DEFAULT_TRUNCATION)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--mode", choices=("gp", "white"), default="gp")
    n.add_argument("--threads", type=int, default=1)
    n.add_argument("--out", default="noise", help="output path prefix")
    n.set_defaults(func=cmd_noise)

    f = sub.add_parser("flow", help="generate, estimate or compose flows (WDFL)")
    fs = f.add_subparsers(dest="kind", required=True)
    for kind in ("translate", "rotate", "swirl"):
        g = fs.add_parser(kind)
        g.add_argument("--resolution", type=int, default=64)
        g.add_argument("--out", required=True)
        if kind == "translate":
            g.add_argument("--dx", type=float, default=0.0, help="pixels")
            g.add_argument("--dy", type=float, default=0.0, help="pixels")
        else:
            g.add_argument("--cx", type=float, default=0.5)
            g.add_argument("--cy", type=float, default=0.5)
        if kind == "rotate":
            g.add_argument("--angle", type=float, default=5.0, help="degrees")
        if kind == "swirl":
            g.add_argument("--strength", type=float, default=0.3)
            g.add_argument("--radius", type=float, default=0.25)
    g = fs.add_parser("estimate")
    g.add_argument("--prev", required=True)
    g.add_argument("--next", required=True)
    g.add_argument("--alpha", type=float, default=0.1)
    g.add_argument("--iters", type=int, default=500)
    g.add_argument("--out", required=True)
    g = fs.add_parser("compose")
    g.add_argument("--first", required=True)
    g.add_argument("--second", required=True)
    g.add_argument("--out", required=True)
    g = fs.add_parser("invert")
    g.add_argument("--flow", required=True)
    g.add_argument("--out", required=True)
    f.set_defaults(func=cmd_flow)

    v = sub.add_parser("video", help="sample a guided video and write frames, metrics and figures")
    v.add_argument("--scheme", choices=SCHEMES)
    v.add_argument("--guidance", type=float, help="guidance strength lambda")
    v.add_argument("--steps", type=int)
    v.add_argument("--frames", type=int)
    v.add_argument("--task", choices=TASKS)
    v.add_argument("--data", choices=DATA)
    v.add_argument("--reduction", choices=("mean", "sum"))
    v.add_argument("--resolution", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--samples", type=int, help="number of seeds, starting at --seed")
    v.add_argument("--flows", help="WDFL file or directory of WDFL files")
    v.add_argument("--no-warp", action="store_true", help="fresh noise per frame, guidance still on")
    v.add_argument("--config", help="flat key = value file; flags override it")
    v.add_argument("--out-dir", default="video_out")
    v.add_argument("--no-figures", action="store_true")
    v.set_defaults(func=cmd_video)

    e = sub.add_parser("eval", help="warping error of a frame directory")
    e.add_argument("--frames-dir", required=True)
    e.add_argument("--flows", required=True, help="WDFL file or directory")
    e.add_argument("--reference", choices=("first", "prev"), default="first")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time RFF grid evaluation and GP warping")
    b.add_argument("--resolution", type=int, default=256)
    b.add_argument("--features", type=int, default=DEFAULT_FEATURES)
    b.add_argument("--threads", default="1,2,4", help="comma-separated thread counts")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out-dir")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("check", help="equivariance checks table")
    c.add_argument("--resolution", type=int, default=32)
    c.add_argument("--steps", type=int, default=25)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    from .diffusion import NumericalError
    from .grid import FormatError
    from .kernels import FactorizationError

    args = build_parser().parse_args(argv)  # exits with 2 on bad usage
    try:
        return args.func(args)
    except (UsageError, FormatError, ValueError, FileNotFoundError) as exc:
        print(f"gpwarp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FactorizationError, FloatingPointError) as exc:
        print(f"gpwarp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
