"""Command line entry point: ``pointnav {train-dune,run,bench,tune,verify}``.

Exit codes: 0 success, 1 verification mismatch, 2 config error, 3 training
divergence, 4 episode failure under ``--strict``.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, dump_config, load_config
from .dune import encode, train_encoder
from .errors import ConfigError, TrainingDiverged
from .geometry import build_point_flow
from .kinematics import ACKERMANN
from .lon import RecordingPlanner, tune
from .pan import NominalPath, Planner, plan_once
from .simulator import Trajectory, metrics_from_trajectory, run_episode

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_DIVERGED, EXIT_STRICT = 0, 1, 2, 3, 4


def parse_seeds(text):
    """``"A..B"`` (inclusive) or a single integer."""
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ConfigError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


def _write_text(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(data):
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


# Episodes and their artifacts


def build_planner(config, scenario, recording=False):
    shape = config.shape()
    model = config.model()
    path = NominalPath(scenario.start, scenario.goal, scenario.desired_speed, model.dt)
    cls = RecordingPlanner if recording else Planner
    return cls(
        path, config.encoder(shape), config.params(), model, shape, config.pan(),
        max_radius=config.data["encoder"]["max_radius_m"],
    )


def trajectory_csv(metrics, model_kind, config_hash):
    """CSV text with one row per state; the control columns of the last row are empty."""
    traj = metrics.trajectory
    turn = "psi" if model_kind == ACKERMANN else "omega"
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "x", "y", "theta", "v", turn, "min_clearance"])
    n = traj.controls.shape[0]
    for k in range(traj.states.shape[0]):
        u = [repr(float(c)) for c in traj.controls[k]] if k < n else ["", ""]
        row = [repr(float(traj.t[k]))] + [repr(float(s)) for s in traj.states[k]] + u
        writer.writerow(row + [repr(float(traj.clearance[k]))])
    return buf.getvalue()


def read_trajectory_csv(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))[1:]
    t = np.array([float(r[0]) for r in rows])
    states = np.array([[float(v) for v in r[1:4]] for r in rows])
    controls = np.array([[float(v) for v in r[4:6]] for r in rows if r[4] != ""]).reshape(-1, 2)
    gaps = np.array([float(r[6]) for r in rows])
    return Trajectory(t=t, states=states, controls=controls, clearance=gaps)


def trajectory_svg(scenario, metrics, scale=20.0):
    """Top-down drawing: obstacles, nominal straight path, executed trajectory."""
    xmin, ymin, xmax, ymax = scenario.bounds
    w, h = (xmax - xmin) * scale, (ymax - ymin) * scale

    def pt(p):
        return f"{(p[0] - xmin) * scale:.2f},{(ymax - p[1]) * scale:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
           f'viewBox="0 0 {w:.2f} {h:.2f}">',
           f'<rect width="{w:.2f}" height="{h:.2f}" fill="white" stroke="black"/>']
    for ob in scenario.obstacles:
        if ob.is_circle:
            c = pt(ob.center).split(",")
            out.append(f'<circle cx="{c[0]}" cy="{c[1]}" r="{ob.radius * scale:.2f}" fill="#888"/>')
        else:
            for part in ob.parts:
                out.append(f'<polygon points="{" ".join(pt(p) for p in part)}" fill="#888"/>')
    out.append(f'<polyline points="{pt(scenario.start)} {pt(scenario.goal)}" fill="none" '
               f'stroke="#4a90d9" stroke-dasharray="6,4"/>')
    g = pt(scenario.goal).split(",")
    out.append(f'<circle cx="{g[0]}" cy="{g[1]}" r="{scenario.goal_radius * scale:.2f}" '
               f'fill="none" stroke="green"/>')
    path = " ".join(pt(s) for s in metrics.trajectory.states)
    color = "green" if metrics.success else "red"
    out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def metrics_record(metrics, scenario, config_hash):
    rec = metrics.to_dict()
    rec.update(config_hash=config_hash, scenario=scenario.name, seed=int(scenario.seed), detail=metrics.detail)
    return rec


def run_one(config, seed, out_dir):
    """Run one episode and write metrics.json, trajectory.csv and trajectory.svg."""
    scenario = config.scenario(seed)
    planner = build_planner(config, scenario)
    metrics = run_episode(scenario, planner, config.lidar())
    out_dir = Path(out_dir)
    rec = metrics_record(metrics, scenario, config.hash)
    _write_text(out_dir / "metrics.json", _dump_json(rec))
    _write_text(out_dir / "trajectory.csv", trajectory_csv(metrics, planner.model.kind, config.hash))
    _write_text(out_dir / "trajectory.svg", trajectory_svg(scenario, metrics))
    return rec


def _run_job(args):
    config_data, base_dir, seed, out_dir = args
    return run_one(RunConfig(config_data, Path(base_dir)), seed, out_dir)


def cmd_run(config, seeds, out, strict=False, workers=1):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.yaml", dump_config(config))
    if len(seeds) == 1:
        rec = run_one(config, seeds[0], out)
        print(f"seed {seeds[0]}: {'success' if rec['success'] else rec['failure']} "
              f"time={rec['navigation_time_s']:.2f}s speed={rec['average_speed_mps']:.2f}m/s")
        return EXIT_STRICT if strict and not rec["success"] else EXIT_OK

    jobs = [(config.data, str(config.base_dir), s, str(out / f"seed_{s}")) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_job, jobs))
    else:
        records = [_run_job(j) for j in jobs]
    for rec in records:
        print(f"seed {rec['seed']}: {'success' if rec['success'] else rec['failure']}")
    rate = float(np.mean([r["success"] for r in records]))
    ok_times = [r["navigation_time_s"] for r in records if r["success"]]
    summary = {
        "config_hash": config.hash,
        "seeds": [int(s) for s in seeds],
        "episodes": len(records),
        "success_rate": rate,
        "failures": {k: sum(r["failure"] == k for r in records) for k in ("collision", "timeout", "planner_error")},
        "mean_navigation_time_s": float(np.mean(ok_times)) if ok_times else None,
    }
    _write_text(out / "summary.json", _dump_json(summary))
    buf = io.StringIO()
    buf.write(f"# config_hash={config.hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    cols = ["seed", "success", "failure", "navigation_time_s", "average_speed_mps", "path_length_m",
            "min_clearance_m"]
    writer.writerow(cols)
    for rec in records:
        writer.writerow([rec[c] for c in cols])
    writer.writerow(["all", rate, "", summary["mean_navigation_time_s"] or "", "", "", ""])
    _write_text(out / "summary.csv", buf.getvalue())
    print(f"success rate {rate:.3f} over {len(records)} episodes")
    return EXIT_STRICT if strict and rate < 1.0 else EXIT_OK


def cmd_verify(run_dir):
    """Recompute the metrics of a run directory from its CSV and compare them."""
    run_dir = Path(run_dir)
    try:
        stored = json.loads((run_dir / "metrics.json").read_text())
        text = (run_dir / "trajectory.csv").read_text()
    except OSError as err:
        raise ConfigError(f"cannot read run directory {str(run_dir)!r}: {err.strerror}") from err
    header = text.splitlines()[0]
    if header != f"# config_hash={stored['config_hash']}":
        print("config hash mismatch between CSV and metrics")
        return EXIT_MISMATCH
    traj = read_trajectory_csv(text)
    again = metrics_from_trajectory(traj, stored["success"], stored["failure"], stored.get("detail", ""))
    fresh = again.to_dict()
    bad = [k for k, v in fresh.items() if stored.get(k) != v]
    if bad:
        for k in bad:
            print(f"mismatch {k}: stored {stored.get(k)!r} recomputed {fresh[k]!r}")
        return EXIT_MISMATCH
    print(f"verified {len(fresh)} metrics from {traj.states.shape[0]} rows")
    return EXIT_OK


# Training


def cmd_train_dune(config, out):
    shape = config.shape()
    tcfg = config.training()
    out = Path(out)
    weights = out if out.suffix == ".dunew" else out / "encoder.dunew"
    start = time.perf_counter()
    try:
        net, history, errors = train_encoder(shape, tcfg)
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    elapsed = time.perf_counter() - start
    weights.parent.mkdir(parents=True, exist_ok=True)
    net.save(weights)
    digest = hashlib.sha256(weights.read_bytes()).hexdigest()
    report = {
        "config_hash": config.hash,
        "weights_sha256": digest,
        "samples": tcfg.n_samples,
        "epochs": tcfg.epochs,
        "final_loss": float(history[-1]) if history else None,
        "heldout_mean_abs_error_m": float(errors.mean()) if errors.size else None,
        "heldout_p99_abs_error_m": float(np.percentile(errors, 99)) if errors.size else None,
        "heldout_max_abs_error_m": float(errors.max()) if errors.size else None,
        "train_seconds": round(elapsed, 3),
    }
    report_path = weights.with_suffix(".report.txt")
    _write_text(report_path, "".join(f"{k}: {v}\n" for k, v in report.items()))
    print(f"wrote {weights} ({digest[:12]}) and {report_path}")
    return EXIT_OK


# Benchmarks


def linear_fit_r2(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = ((y - y.mean()) ** 2).sum()
    return float(slope), float(intercept), float(1.0 - (resid**2).sum() / total) if total > 0 else 1.0


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_distance_scaling(config, sizes=(1_000, 10_000, 100_000), repeats=5):
    """Encoder wall time against the number of points (single state)."""
    shape = config.shape()
    net = config.encoder(shape)
    rng = np.random.default_rng(config.seed)
    plan = np.zeros((1, 3))
    rows = []
    for m in sizes:
        flow = build_point_flow(rng.uniform(-8, 8, (m, 2)), None, plan, 0.1)
        encode(net, flow, plan, shape)  # warm-up
        rows.append((m, _median_time(lambda: encode(net, flow, plan, shape), repeats)))
    return rows


def bench_pan_latency(config, sizes=(100, 1_000, 10_000), repeats=3):
    """Time of one alternating iteration against the number of scan points."""
    shape = config.shape()
    model = config.model()
    net = config.encoder(shape)
    params = config.params()
    pan = replace(config.pan(), k_max=1)
    rng = np.random.default_rng(config.seed)
    path = NominalPath((0.0, 0.0), (50.0, 0.0), 2.0, model.dt)
    nominal = path.reference(np.zeros(3), params.horizon)
    rows = []
    for m in sizes:
        pts = np.column_stack([rng.uniform(2.0, 9.0, m), rng.uniform(-4.0, 4.0, m)])

        def once():
            plan_once(np.zeros(3), pts, None, nominal, net, params, model, shape, pan,
                      max_radius=config.data["encoder"]["max_radius_m"])

        once()
        rows.append((m, _median_time(once, repeats)))
    return rows


def cmd_bench(config, mode, out=None):
    if mode == "distance-scaling":
        rows = bench_distance_scaling(config)
    elif mode == "pan-latency":
        rows = bench_pan_latency(config)
    else:
        raise ConfigError(f"unknown bench mode {mode!r}")
    slope, intercept, r2 = linear_fit_r2([r[0] for r in rows], [r[1] for r in rows])
    lines = [f"{'M':>8}  {'seconds':>10}"] + [f"{m:>8}  {t:>10.5f}" for m, t in rows]
    lines.append(f"linear fit: {slope * 1e6:.4f} us/point + {intercept * 1e3:.3f} ms, R^2 = {r2:.4f}")
    print("\n".join(lines))
    if out is not None:
        out = Path(out)
        text = f"# config_hash={config.hash}\nM,seconds\n" + "".join(f"{m},{t!r}\n" for m, t in rows)
        _write_text(out / f"bench_{mode}.csv", text)
    return EXIT_OK


# Tuning


def cmd_tune(config, out, episodes=None, seed=None):
    """LON cycles on the configured scenario; resumable from ``out/params.yaml``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = config.data["tune"]
    total = int(tcfg["episodes"] if episodes is None else episodes)
    scenario = config.scenario(seed)
    planner = build_planner(config, scenario, recording=True)
    state_path = out / "params.yaml"
    curve_path = out / "loss_curve.csv"
    start, weights = 0, None
    if state_path.exists():
        saved = yaml.safe_load(state_path.read_text())
        if saved.get("config_hash") != config.hash:
            raise ConfigError("params.yaml in the output directory belongs to a different config")
        planner.params = planner.params.with_learnable(saved["learnable"])
        start = int(saved["next_episode"])
        weights = tuple(saved["weights"]) if saved.get("weights") else None
        print(f"resuming at episode {start}")
    else:
        _write_text(curve_path, f"# config_hash={config.hash}\nepisode,loss,success,failure,"
                                "q,p,d_min,d_max,eta\n")
        _persist(state_path, config.hash, planner.params, 0, None, done=False)

    lidar = config.lidar()
    done = False
    for ep in range(start, total):
        records, params = tune(
            scenario, planner, lambda sc, pl: run_episode(sc, pl, lidar), episodes=1,
            lr=float(tcfg["lr"]), clip=float(tcfg["clip"]), rel_step=float(tcfg["rel_step"]),
            window=int(tcfg["window"]), weights=weights,
        )
        rec = records[0]
        weights = rec.weights
        v = rec.values
        with curve_path.open("a") as fh:
            fh.write(f"{ep},{rec.loss!r},{int(rec.success)},{rec.failure},"
                     f"{' '.join(map(repr, np.ravel(v['q']).tolist()))},"
                     f"{' '.join(map(repr, np.ravel(v['p']).tolist()))},"
                     f"{float(np.ravel(v['d_min'])[0])!r},{float(np.ravel(v['d_max'])[0])!r},"
                     f"{float(np.ravel(v['eta'])[0])!r}\n")
        print(f"episode {ep}: loss={rec.loss:.4f} {'success' if rec.success else rec.failure}")
        done = rec.success
        _persist(state_path, config.hash, params, ep + 1, weights, done)
        if done:
            break
    return EXIT_OK


def _persist(path, config_hash, params, next_episode, weights, done):
    learn = {k: np.ravel(v).tolist() for k, v in params.learnable().items()}
    learn = {k: (v if k in ("q", "p") else v[0]) for k, v in learn.items()}
    data = {
        "config_hash": config_hash,
        "next_episode": int(next_episode),
        "weights": list(weights) if weights else None,
        "succeeded": bool(done),
        "learnable": learn,
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(yaml.safe_dump(data, sort_keys=True))
    tmp.replace(path)


# Argument parsing


def _parser():
    parser = argparse.ArgumentParser(prog="pointnav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="out"):
        p.add_argument("--config", type=Path, default=None, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--out", type=Path, default=None if out_default is None else Path(out_default))
        return p

    p = common(sub.add_parser("train-dune", help="train the distance encoder"), "encoder.dunew")
    p = common(sub.add_parser("run", help="run one episode or a seed sweep"))
    p.add_argument("--seeds", default=None, help="inclusive range A..B")
    p.add_argument("--strict", action="store_true", help="exit 4 unless every episode succeeds")
    p.add_argument("--workers", type=int, default=1)
    p = common(sub.add_parser("bench", help="timing tables"), None)
    p.add_argument("--mode", choices=["distance-scaling", "pan-latency"], default="distance-scaling")
    p = common(sub.add_parser("tune", help="fine-tune planner weights on one scenario"), "tune")
    p.add_argument("--episodes", type=int, default=None)
    p = sub.add_parser("verify", help="recompute metrics from a run's CSV")
    p.add_argument("run_dir", type=Path)
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args.run_dir)
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_overrides(seed=args.seed)
        if args.command == "train-dune":
            if args.seed is not None:
                config = config.with_overrides(training={"seed": args.seed})
            return cmd_train_dune(config, args.out)
        if args.command == "run":
            seeds = parse_seeds(args.seeds) if args.seeds else [config.seed]
            return cmd_run(config, seeds, args.out, strict=args.strict, workers=max(1, args.workers))
        if args.command == "bench":
            return cmd_bench(config, args.mode, args.out)
        if args.command == "tune":
            return cmd_tune(config, args.out, episodes=args.episodes)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
