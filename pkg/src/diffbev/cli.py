"""Command-line entry point: ``diffbev <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from diffbev import __version__
from diffbev.dynamics import simulate_full
from diffbev.events import EventLog
from diffbev.executor import ExecutionError, UnknownBody, execute_program, load_program
from diffbev.gradients import ParamVector, finite_diff_grad, grad_loss
from diffbev.identification import (
    STAGES, FitSchedule, Globals, InsufficientFrames, InsufficientPreCollisionFrames, identify, make_template,
)
from diffbev.optim import LineSearchFailed, NonFiniteObjective
from diffbev.scene import (
    InvalidScene, SceneConfig, Trajectory, load_json, load_trajectory, save_json, save_scene, save_trajectory,
    scene_from_dict, scene_to_dict,
)
from diffbev.synth import GenerationExhausted, GeneratorSpec, billiards_truth, generate_scene, observe

log = logging.getLogger("diffbev")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "frames": 128,
    "noise_sigma": 0.0,
    "bodies": "2,3",
    "stages": None,
    "schedule": "exhaustive",
    "jobs": 1,
    "horizon": 20,
    "every": 4,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_json(obj, path)


def _load_scene_any(path: str) -> SceneConfig:
    """Scene JSON, or a fit report / truth sidecar that embeds one under "scene"."""
    d = load_json(path)
    if isinstance(d, dict) and "scene" in d and "bodies" not in d:
        d = d["scene"]
    return scene_from_dict(d)


def _schedule(value: str | None, n_frames: int | None) -> FitSchedule:
    if value in (None, "standard"):
        sched = FitSchedule()
    elif value == "exhaustive":
        sched = FitSchedule().without_thresholds()
    else:
        sched = FitSchedule.from_dict(load_json(value))
    if n_frames is not None and n_frames != sched.windows[-1][1]:
        sched = sched.scaled(n_frames)
    return sched


def _mse(a: Trajectory, b: Trajectory) -> float:
    d = a.pos - b.pos
    return float(np.mean(np.sum(d * d, axis=-1)))


# ---------------------------------------------------------------------------
# commands; each returns the list of primary output paths


def cmd_gen(a) -> list[Path]:
    out = Path(a.out)
    if a.billiards:
        gt = billiards_truth(a.seed, a.frames)
        spec = replace(gt.spec, noise_sigma=a.noise_sigma)
    else:
        lo, hi = (int(x) for x in str(a.bodies).split(","))
        spec = GeneratorSpec(seed=a.seed, n_bodies=(lo, hi), n_frames=a.frames, noise_sigma=a.noise_sigma)
        gt = generate_scene(spec)
    obs = observe(gt.scene, gt.trajectory, spec)
    template = make_template(gt.scene)
    paths = [out / "scene.json", out / "obs.json", out / "truth.json", out / "globals.json"]
    save_scene(template, _mk(paths[0]))
    save_trajectory(obs, paths[1])
    _dump({"scene": scene_to_dict(gt.scene), "events": gt.events.to_list(),
           "trajectory": gt.trajectory.to_records(), "seed": a.seed, "noise_sigma": a.noise_sigma}, paths[2])
    _dump(Globals.from_physics(gt.scene).to_dict(), paths[3])
    return paths


def _mk(p: Path) -> Path:
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_simulate(a) -> list[Path]:
    scene = _load_scene_any(a.scene)
    traj, events, _ = simulate_full(scene, a.frames)
    out = Path(a.out)
    paths = [out / "trajectory.json", out / "events.json"]
    save_trajectory(traj, _mk(paths[0]))
    _dump(events.to_list(), paths[1])
    return paths


def _identify_one(job) -> dict:
    obs_path, scene_path, globals_path, stages, schedule = job
    obs = load_trajectory(obs_path)
    template = _load_scene_any(scene_path)
    g = Globals.from_dict(load_json(globals_path)) if globals_path else None
    report = identify(obs, template, g, schedule, stages)
    return report.to_dict(timings=False)


def cmd_identify(a) -> list[Path]:
    obs_paths = list(a.obs)
    scenes = list(a.scene)
    if len(scenes) == 1:
        scenes = scenes * len(obs_paths)
    if len(scenes) != len(obs_paths):
        raise UsageError("give one --scene, or one per --obs")
    if a.stages:
        stages = tuple(s.strip() for s in a.stages.split(",") if s.strip())
    else:
        stages = ("initial", "collision") if a.globals else ("global", "initial", "collision")
    if set(stages) - set(STAGES):
        raise UsageError(f"unknown stage(s) {sorted(set(stages) - set(STAGES))}; choose from {list(STAGES)}")
    jobs = []
    for o, s in zip(obs_paths, scenes):
        n = load_trajectory(o).n_frames
        jobs.append((o, s, a.globals, stages, _schedule(a.schedule, n)))
    if a.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=a.jobs) as pool:
            reports = list(pool.map(_identify_one, jobs))
    else:
        reports = [_identify_one(j) for j in jobs]
    out = Path(a.out)
    paths = []
    for o, rep in zip(obs_paths, reports):
        p = out / ("fit_report.json" if len(obs_paths) == 1 else f"fit_{Path(o).stem}.json")
        _dump(rep, p)
        paths.append(p)
    return paths


def cmd_predict(a) -> list[Path]:
    scene = _load_scene_any(a.scene)
    T = a.horizon
    traj, events, _ = simulate_full(scene, 2 * T)
    s1, s2 = traj.frame_slice(0, T), traj.frame_slice(T, 2 * T)
    result = {"T": T, "start_frame": scene.start_frame, "s1": s1.to_records(), "s2": s2.to_records(),
              "events": events.to_list()}
    if a.truth:
        truth = _load_scene_any(a.truth)
        truth_traj, _, _ = simulate_full(truth, scene.start_frame - truth.start_frame + 2 * T)
        k0 = scene.start_frame - truth.start_frame
        ref = truth_traj.select(scene.ids)
        result["error"] = {"s1": _mse(s1, ref.frame_slice(k0, k0 + T)),
                           "s2": _mse(s2, ref.frame_slice(k0 + T, k0 + 2 * T))}
    p = Path(a.out) / "prediction.json"
    _dump(result, p)
    return [p]


def cmd_query(a) -> list[Path]:
    scene = _load_scene_any(a.scene)
    program = load_program(Path(a.program).read_text())
    if a.obs:
        traj = load_trajectory(a.obs)
        events = EventLog.from_list(load_json(a.events)) if a.events else simulate_full(scene, traj.n_frames)[1]
    else:
        traj, events, _ = simulate_full(scene, a.frames)
        if a.events:
            events = EventLog.from_list(load_json(a.events))
    answer = execute_program(program, scene, traj, events)
    text = json.dumps(answer.to_json(), sort_keys=True, separators=(",", ":"))
    print(text)
    p = Path(a.out) / "answer.json"
    _mk(p).write_text(text + "\n")
    return [p]


def cmd_gradcheck(a) -> list[Path]:
    scene = _load_scene_any(a.scene)
    traj, _, ro = simulate_full(scene, a.frames)
    rng = np.random.default_rng(a.seed)
    names = []
    for b in scene.bodies:
        names += [f"b{b.id}.v0x", f"b{b.id}.v0y", f"b{b.id}.l0x", f"b{b.id}.l0y"]
        if any(c.j >= 0 for c in ro.contacts):
            names += [f"b{b.id}.m", f"b{b.id}.r"]
    names += ["g.lam1", "g.lam2", "g.lam3"]
    theta0 = ParamVector.from_scene(scene, names)
    theta = theta0.with_u(theta0.u + rng.normal(0.0, 1e-3, size=len(theta0)))
    loss, g = grad_loss(scene, theta, traj)
    fd = finite_diff_grad(scene, theta, traj, h=1e-6)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(fd))):
        raise FloatingPointError("non-finite gradient")
    denom = max(float(np.linalg.norm(fd)), 1e-300)
    rel = float(np.linalg.norm(g - fd) / denom)
    rows = [{"param": n, "analytic": float(x), "finite_difference": float(y),
             "relative_error": abs(float(x) - float(y)) / max(abs(float(y)), 1e-300)} for n, x, y in zip(names, g, fd)]
    p = Path(a.out) / "gradcheck.json"
    _dump({"loss": loss, "relative_error": rel, "params": rows}, p)
    lines = ["param\tanalytic\tfinite_difference\trelative_error"]
    lines += [f"{r['param']}\t{r['analytic']:.12e}\t{r['finite_difference']:.12e}\t{r['relative_error']:.3e}"
              for r in rows]
    tsv = Path(a.out) / "gradcheck.tsv"
    tsv.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"relative error {rel:.3e} over {len(names)} parameters")
    return [p, tsv]


_PALETTE = {"gray": "#808080", "red": "#d62728", "blue": "#1f77b4", "green": "#2ca02c", "brown": "#8c564b",
            "purple": "#9467bd", "cyan": "#17becf", "yellow": "#bcbd22", "white": "#999999"}


def render_svg(traj: Trajectory, scene: SceneConfig | None = None, every: int = 4, size: int = 600) -> str:
    """Stroboscopic overlay: every ``every``-th frame drawn with rising opacity."""
    pts = traj.pos[np.isfinite(traj.pos).all(axis=-1)]
    if pts.size == 0:
        raise ValueError("trajectory has no finite positions")
    lo, hi = pts.min(axis=0) - 0.6, pts.max(axis=0) + 0.6
    span = float(max(hi - lo))
    sc = size / span

    def xy(p):
        return (p[0] - lo[0]) * sc, size - (p[1] - lo[1]) * sc

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    if scene is not None:
        for w in scene.walls:
            (x1, y1), (x2, y2) = xy(w.a), xy(w.b)
            out.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="black" '
                       f'stroke-width="2"/>')
    ks = list(range(0, traj.n_frames, max(1, every)))
    if ks[-1] != traj.n_frames - 1:
        ks.append(traj.n_frames - 1)
    for c, bid in enumerate(traj.ids):
        color, r = "#444444", 0.1
        if scene is not None and bid in scene.ids:
            b = scene.body(bid)
            color = _PALETTE.get(b.params.attributes.get("color", ""), color)
            r = b.params.radius
        for n, k in enumerate(ks):
            p = traj.pos[k, c]
            if not np.all(np.isfinite(p)):
                continue
            x, y = xy(p)
            op = 0.15 + 0.85 * n / max(1, len(ks) - 1)
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r * sc:.2f}" fill="{color}" '
                       f'fill-opacity="{op:.3f}" stroke="none"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(a) -> list[Path]:
    scene = _load_scene_any(a.scene) if a.scene else None
    if a.obs:
        traj = load_trajectory(a.obs)
    elif scene is not None:
        traj = simulate_full(scene, a.frames)[0]
    else:
        raise UsageError("plot needs --obs or --scene")
    p = Path(a.out) / "plot.svg"
    _mk(p).write_text(render_svg(traj, scene, a.every))
    return [p]


COMMANDS = {"gen": cmd_gen, "simulate": cmd_simulate, "identify": cmd_identify, "predict": cmd_predict,
            "query": cmd_query, "gradcheck": cmd_gradcheck, "plot": cmd_plot}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffbev", description="Differentiable BEV physics: simulate, identify, reason.")
    p.add_argument("--version", action="version", version=f"diffbev {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, scene=True, many=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="JSON file of flag defaults")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--frames", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        if scene:
            sp.add_argument("--scene", nargs="+" if many else None)

    sp = sub.add_parser("gen", help="generate a synthetic scene with observation and truth sidecar")
    common(sp, scene=False)
    sp.add_argument("--noise-sigma", type=float)
    sp.add_argument("--bodies", help="body count range lo,hi")
    sp.add_argument("--billiards", action="store_true")

    sp = sub.add_parser("simulate", help="scene -> trajectory + events")
    common(sp)

    sp = sub.add_parser("identify", help="observation -> fit report")
    sp.add_argument("--obs", nargs="+", required=True)
    common(sp, many=True)
    sp.add_argument("--globals", help="globals JSON; skips the global stage")
    sp.add_argument("--stages", help=f"comma list from {','.join(STAGES)}")
    sp.add_argument("--schedule", help="'standard', 'exhaustive' or a schedule JSON file")
    sp.add_argument("--jobs", type=int)

    sp = sub.add_parser("predict", help="fitted scene -> S1/S2 rollouts")
    common(sp)
    sp.add_argument("--horizon", type=int, help="T; S1 = [0,T), S2 = [T,2T)")
    sp.add_argument("--truth", help="truth sidecar or scene for error reporting")

    sp = sub.add_parser("query", help="program + fitted scene -> answer")
    common(sp)
    sp.add_argument("--program", required=True)
    sp.add_argument("--obs", help="trajectory the program refers to (default: simulate the scene)")
    sp.add_argument("--events", help="event log JSON (default: from simulation)")

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    common(sp)

    sp = sub.add_parser("plot", help="trajectory -> stroboscopic SVG")
    common(sp)
    sp.add_argument("--obs")
    sp.add_argument("--every", type=int)
    return p


def _resolve_config(a) -> None:
    """Fill unset flags from --config, then from DEFAULTS."""
    cfg = {}
    if getattr(a, "config", None):
        cfg = load_json(a.config)
        if not isinstance(cfg, dict):
            raise ValueError("config file must hold a JSON object")
    for key in set(DEFAULTS) | set(cfg):
        k = key.replace("-", "_")
        if hasattr(a, k) and getattr(a, k) is None:
            setattr(a, k, cfg.get(key, cfg.get(k, DEFAULTS.get(k))))
    if a.command in ("simulate", "gradcheck") and not a.scene:
        raise UsageError(f"{a.command} needs --scene")
    if a.command in ("identify", "predict", "query") and not a.scene:
        raise UsageError(f"{a.command} needs --scene")


def _manifest(a, argv, outputs, seconds) -> dict:
    import numba
    import scipy

    cfg = {k: v for k, v in sorted(vars(a).items()) if k not in ("verbose",)}
    ins = {k: v for k, v in cfg.items() if k in ("scene", "obs", "program", "events", "truth", "globals", "config")
           and v}
    return {
        "command": a.command,
        "argv": list(argv),
        "config": cfg,
        "seed": a.seed,
        "inputs": ins,
        "outputs": [str(p) for p in outputs],
        "versions": {"diffbev": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__, "python": platform.python_version()},
        "wall_clock_s": seconds,
    }


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if not a.command:
            raise UsageError(parser.format_help())
        _resolve_config(a)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        outputs = COMMANDS[a.command](a)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, OverflowError, NonFiniteObjective, LineSearchFailed, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, InvalidScene, ExecutionError, UnknownBody,
            GenerationExhausted, InsufficientFrames, InsufficientPreCollisionFrames) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    _dump(_manifest(a, argv, outputs, round(time.perf_counter() - t0, 3)), Path(a.out) / "manifest.json")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
