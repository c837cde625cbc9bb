"""Command-line entry points: simulate, infer, bench, physio and replay.

Every command writes ``manifest.json`` into its output directory before
anything else; ``replay`` re-runs a manifest into a new directory.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 internal error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__, env, pfilter, physio, policy, predict
from .core import (THETA_BOUNDS, THETA_NAMES, CognitiveParams, TrajectoryError,
                   atomic_write_text, derive_rng, read_trajectory, write_trajectory)

log = logging.getLogger("takeover_cog")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3
STREAM_THETA = 5
STREAM_INFER = 7
STREAM_BENCH = 9
FRAMES_PER_STEP = 6  # 60 Hz gaze against 10 Hz decisions
METHOD_ALIASES = {"adaptive": "adaptive", "cv": "cv", "off": "cognition_off"}
THETA_HEADER = ("t",) + THETA_NAMES


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    """Scenario, controller and filter settings read from one YAML file.

    The file either holds scenario keys at the top level or the sections
    ``scenario``, ``gains``, ``control``, ``filter`` and ``steps``.
    """

    scenario: env.ScenarioConfig = field(default_factory=env.ScenarioConfig)
    gains: policy.ControllerGains = policy.CALIBRATED_GAINS
    control: policy.ControllerConfig = policy.DEFAULT_CONTROL
    filter: pfilter.FilterConfig = field(default_factory=pfilter.FilterConfig)
    steps: int = 200

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {"scenario", "gains", "control", "filter", "steps"}
        if not set(data) & sections:
            data = {"scenario": data}
        unknown = set(data) - sections
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        out = cls(scenario=env.ScenarioConfig.from_dict(data.get("scenario") or {}))
        if "gains" in data:
            out.gains = replace(policy.CALIBRATED_GAINS, **_floats(data["gains"], policy.GAIN_NAMES))
        if "control" in data:
            names = tuple(f.name for f in fields(policy.ControllerConfig))
            out.control = policy.ControllerConfig(**_floats(data["control"], names))
        if "filter" in data:
            try:
                out.filter = pfilter.FilterConfig(**(data["filter"] or {}))
            except TypeError as exc:
                raise ValidationError(f"filter: {exc}") from None
        if "steps" in data:
            out.steps = int(data["steps"])
            if out.steps < 1:
                raise ValidationError("steps must be positive")
        return out


def _floats(section, names) -> dict:
    section = section or {}
    if not isinstance(section, dict):
        raise ValidationError(f"expected a mapping, got {section!r}")
    unknown = set(section) - set(names)
    if unknown:
        raise ValidationError(f"unknown keys: {sorted(unknown)}")
    return {k: float(v) for k, v in section.items()}


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a key/value mapping")
    return RunConfig.from_dict(data)


# ------------------------------------------------------------------ helpers

def _threads() -> int:
    raw = os.environ.get("TC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"TC_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, items) -> list:
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def write_manifest(out: Path, command: str, args: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": args.get("config"), "seed": args.get("seed"),
                "out": str(out), "version": __version__,
                "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "args": args}
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def theta_csv_text(thetas) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(THETA_HEADER)
    for t, th in enumerate(thetas):
        w.writerow([t, *(repr(float(v)) for v in th)])
    return buf.getvalue()


def read_theta_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != THETA_HEADER:
        raise ValidationError(f"{path}: expected header {','.join(THETA_HEADER)}")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:] if r], dtype=float).reshape(-1, 4)


def _parse_floats(text: str, n: int = None, name: str = "value") -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ValidationError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals


def _episode_dirs(corpus: Path) -> list:
    if not corpus.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus}")
    return sorted(p for p in corpus.iterdir() if p.is_dir() and (p / "frames.csv").exists())


def _scenario_for(episode_dir: Path, fallback: env.ScenarioConfig) -> env.ScenarioConfig:
    p = episode_dir / "scenario.yaml"
    return env.load_config(p) if p.exists() else fallback


# ---------------------------------------------------------------- simulate

def simulate_episode(cfg: RunConfig, seed: int, fixed: CognitiveParams = None):
    """One episode for scenario seed ``seed``; θ drifts unless ``fixed`` is given."""
    scenario = replace(cfg.scenario, seed=seed)
    thetas = policy.theta_schedule(cfg.steps, derive_rng(seed, STREAM_THETA), fixed)
    world = env.make_scenario(scenario)
    ep = policy.run_episode(world, thetas, cfg.gains, derive_rng(seed, policy.STREAM_EPISODE),
                            cfg.control)
    return scenario, ep


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    if args.count < 0:
        raise ValidationError("--count must be non-negative")
    fixed = None
    if args.fixed_theta is not None:
        fixed = CognitiveParams.from_array(_parse_floats(args.fixed_theta, 4, "--fixed-theta"))
    out = Path(args.out)
    write_manifest(out, "simulate", _manifest_args(args))
    for i in range(args.count):
        scenario, ep = simulate_episode(cfg, args.seed + i, fixed)
        d = out / f"episode_{i:04d}"
        d.mkdir(exist_ok=True)
        write_trajectory(ep.frames, d / "frames.csv")
        atomic_write_text(d / "theta.csv", theta_csv_text(ep.thetas))
        atomic_write_text(d / "scenario.yaml", env.dump_config(scenario))
        log.info("episode %d: %d frames, %s", i, len(ep.frames), ep.terminated.value)
    return EXIT_OK


# ------------------------------------------------------------------- infer

def recovery_rows(summaries, thetas) -> list:
    """Absolute error of the final posterior mean and of the prior mean, per dimension."""
    if not summaries or len(thetas) == 0:
        return []
    last = summaries[-1]
    truth = thetas[min(last.t, len(thetas) - 1)]
    prior = THETA_BOUNDS.mean(axis=1)
    post = last.mean.as_array()
    return [(name, last.t, repr(float(truth[j])), repr(float(post[j])),
             repr(float(abs(post[j] - truth[j]))), repr(float(abs(prior[j] - truth[j]))))
            for j, name in enumerate(THETA_NAMES)]


def cmd_infer(args) -> int:
    cfg = load_run_config(args.config)
    src = Path(args.trajectory)
    frames_path = src / "frames.csv" if src.is_dir() else src
    if not frames_path.exists():
        raise FileNotFoundError(f"trajectory not found: {frames_path}")
    fc = cfg.filter if args.window is None else replace(cfg.filter, L=args.window)
    if args.particles is not None:
        fc = replace(fc, N=args.particles)
    scenario = _scenario_for(frames_path.parent, cfg.scenario)
    frames = read_trajectory(frames_path)
    out = Path(args.out)
    write_manifest(out, "infer", _manifest_args(args))
    summaries = pfilter.run_filter(frames, scenario, fc, derive_rng(args.seed, STREAM_INFER),
                                   cfg.gains, cfg.control)
    atomic_write_text(out / "posterior.csv", pfilter.trace_csv_text(summaries))
    theta_path = frames_path.parent / "theta.csv"
    if theta_path.exists():
        rows = recovery_rows(summaries, read_theta_csv(theta_path))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("parameter", "t", "true", "posterior_mean", "abs_error", "prior_abs_error"))
        w.writerows(rows)
        atomic_write_text(out / "recovery.csv", buf.getvalue())
    return EXIT_OK


# ------------------------------------------------------------------- bench

def _bench_one(job):
    idx, name, frames_path, scenario, method, cfg, H, seed = job
    frames = read_trajectory(frames_path)
    if len(frames) < cfg.filter.L + 1:
        return None
    ev = predict.rolling_evaluate(frames, method, cfg.filter, cfg.gains, H,
                                  derive_rng(seed, STREAM_BENCH, idx), scenario, cfg.control)
    return name, ev


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config)
    if args.window is not None:
        cfg.filter = replace(cfg.filter, L=args.window)
    thresholds = (_parse_floats(args.thresholds, name="--thresholds") if args.thresholds
                  else predict.DEFAULT_THRESHOLDS)
    if any(t < 0 for t in thresholds):
        raise ValidationError("--thresholds must be non-negative")
    if args.horizon < 1:
        raise ValidationError("--horizon must be at least 1")
    methods = [METHOD_ALIASES[m] for m in (args.method or ["adaptive", "cv", "off"])]
    corpus = Path(args.corpus)
    dirs = _episode_dirs(corpus)
    out = Path(args.out)
    write_manifest(out, "bench", _manifest_args(args))
    if not dirs:
        log.warning("corpus %s holds no episodes; writing an empty report", corpus)

    jobs = [(i, d.name, d / "frames.csv", _scenario_for(d, cfg.scenario), m, cfg, args.horizon,
             args.seed) for i, d in enumerate(dirs) for m in methods]
    results = [r for r in _map(_bench_one, jobs) if r is not None]

    rows = [predict.report_rows(name, ev, thresholds) for name, ev in results]
    atomic_write_text(out / "report.csv", predict.report_csv_text(rows, thresholds))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "threshold", "coverage", "n_collision", "false_flag_rate"))
    rbuf = io.StringIO()
    rw = csv.writer(rbuf, lineterminator="\n")
    rw.writerow(("method", "mean_rmse_pos", "mean_rmse_vel", "mean_rmse_weighted", "n_steps"))
    for m in methods:
        evs = [ev for _, ev in results if ev.method == m]
        if not evs:
            continue
        cov = predict.lead_time_coverage(evs, thresholds)
        n_col = sum(ev.t_col is not None for ev in evs)
        ffr = predict.false_flag_rate(evs)
        for t in thresholds:
            w.writerow((m, f"{t:g}", repr(cov[float(t)]), n_col, repr(ffr)))
        parts = [np.column_stack([ev.rmse_pos, ev.rmse_vel, ev.rmse_weighted])
                 for ev in evs if ev.rmse_pos is not None and len(ev.rmse_pos)]
        if parts:
            a = np.concatenate(parts)
            a = a[np.isfinite(a).all(axis=1)]
            means = a.mean(axis=0) if len(a) else np.full(3, np.nan)
            rw.writerow((m, *(repr(float(v)) for v in means), len(a)))
    atomic_write_text(out / "coverage.csv", buf.getvalue())
    atomic_write_text(out / "rmse.csv", rbuf.getvalue())
    return EXIT_OK


# ------------------------------------------------------------------ physio

def trace_to_frames(values, n_frames: int, frames_per_step: int = FRAMES_PER_STEP) -> np.ndarray:
    """Hold each per-step value over its gaze frames; steps past the trace repeat the last."""
    values = np.asarray(values)
    idx = np.minimum(np.arange(n_frames) // frames_per_step, len(values) - 1)
    return values[idx]


def physio_analysis(samples, trace, bounds, f_s: float = physio.FS_DEFAULT,
                    frames_per_step: int = FRAMES_PER_STEP, window: int = physio.ENTROPY_WINDOW,
                    N: int = 20, amplitude: float = 0.5) -> dict:
    """Match cognitive against physiological segments for both dimensions.

    Perception pairs σ0/σmax anomalies with dispersion and fixation anomalies;
    looming pairs c anomalies with saccade and pupil anomalies.
    """
    n = len(samples)
    params = np.array([[r["mean_sigma0"], r["mean_sigmax"], r["mean_c"]] for r in trace])
    if n == 0 or len(params) == 0:
        raise ValidationError("physio analysis needs a non-empty gaze series and trace")
    cog_step = physio.cognitive_anomalies(params)
    cog = {"perception": trace_to_frames(cog_step[:, 0] | cog_step[:, 1], n, frames_per_step),
           "looming": trace_to_frames(cog_step[:, 2], n, frames_per_step)}
    hs, ht = physio.windowed_entropies(samples, bounds, window)
    phys = {"perception": physio.perception_anomalies(hs, ht, samples, f_s=f_s),
            "looming": physio.looming_anomalies(samples, f_s)}
    out = {}
    for dim in ("perception", "looming"):
        cs = physio.smooth_and_segment(cog[dim], N, amplitude, source=f"cognitive_{dim}")
        ps = physio.smooth_and_segment(phys[dim], N, amplitude, source=f"physio_{dim}")
        out[dim] = (physio.match_segments(cs, ps), cs, ps)
    return out


def cmd_physio(args) -> int:
    bounds = _parse_floats(args.screen, 2, "--screen")
    if args.groups is None and (args.gaze is None or args.trace is None):
        raise ValidationError("physio needs GAZE and TRACE, or --groups")
    for p in (args.gaze, args.trace, args.groups):
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")
    out = Path(args.out)
    write_manifest(out, "physio", _manifest_args(args))
    if args.gaze is not None and args.trace is not None:
        samples = physio.read_gaze(args.gaze)
        trace = pfilter.read_trace(args.trace)
        res = physio_analysis(samples, trace, bounds, args.fs,
                              window=args.window or physio.ENTROPY_WINDOW)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("dimension", "match_rate", "miss_rate", "match_defined", "n_cog", "n_phys"))
        segs = []
        for dim, (rep, cs, ps) in res.items():
            if not rep.match_defined:
                log.warning("%s: no cognitive segments, match rate undefined", dim)
            w.writerow((dim, repr(rep.match_rate), repr(rep.miss_rate), int(rep.match_defined),
                        len(cs), len(ps)))
            segs += cs + ps
        atomic_write_text(out / "match.csv", buf.getvalue())
        atomic_write_text(out / "segments.csv", physio.segments_csv_text(segs))
    if args.groups is not None:
        with open(args.groups, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"dimension", "level", "parameter", "value"}
            if not need <= set(reader.fieldnames or ()):
                raise ValidationError(f"{args.groups}: expected columns {sorted(need)}")
            rows = [(r["dimension"], r["level"], r["parameter"], float(r["value"]))
                    for r in reader]
        atomic_write_text(out / "anova.csv", physio.report_csv_text(physio.grouped_report(rows)))
    return EXIT_OK


# ------------------------------------------------------------------ replay

def cmd_replay(args) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    recorded = manifest.get("args")
    if not isinstance(recorded, dict) or manifest.get("command") not in COMMANDS:
        raise ValidationError(f"{args.manifest}: not a run manifest")
    ns = argparse.Namespace(**recorded)
    ns.out = args.out
    return COMMANDS[manifest["command"]](ns)


# --------------------------------------------------------------------- main

COMMANDS = {"simulate": cmd_simulate, "infer": cmd_infer, "bench": cmd_bench,
            "physio": cmd_physio}


def _manifest_args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="takeover-cog", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run config YAML")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("simulate", help="simulate an episode corpus")
    common(s)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--fixed-theta", help="sigma0,sigma_max,c,d held for the whole episode")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("infer", help="posterior trace for one trajectory")
    s.add_argument("trajectory", help="frames.csv or an episode directory")
    common(s)
    s.add_argument("--window", type=int, help="window length L")
    s.add_argument("--particles", type=int, help="particle count N")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", help="rolling prediction coverage over a corpus")
    s.add_argument("corpus", help="directory of episode_XXXX folders")
    common(s)
    s.add_argument("--method", action="append", choices=sorted(METHOD_ALIASES))
    s.add_argument("--thresholds", help="comma-separated lead times in seconds")
    s.add_argument("--horizon", type=int, default=30, help="rollout horizon H in steps")
    s.add_argument("--window", type=int, help="window length L")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("physio", help="cognitive/physiological segment agreement")
    s.add_argument("gaze", nargs="?", help="gaze CSV")
    s.add_argument("trace", nargs="?", help="posterior trace CSV")
    common(s, seed=False)
    s.add_argument("--groups", help="CSV of dimension,level,parameter,value for ANOVA rows")
    s.add_argument("--screen", default="1920,1080", help="screen width,height in px")
    s.add_argument("--fs", type=float, default=physio.FS_DEFAULT, help="gaze rate in Hz")
    s.add_argument("--window", type=int, help="entropy window in frames")
    s.set_defaults(func=cmd_physio)

    s = sub.add_parser("replay", help="re-run a manifest into a new directory")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        return args.func(args)
    except (ValidationError, env.ConfigError, TrajectoryError, physio.PhysioError,
            pfilter.FilterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
