"""Command-line entry point: ``profiscan {train,plan,evaluate,info}``."""
import argparse
import hashlib
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .env import BadStartError, write_trace_csv
from .evaluation import (
    EmptyMapError,
    ProvenanceError,
    compare,
    export_pointcloud,
    format_comparison,
    render_error_map,
    replay,
    spec_digest,
    summarize,
    write_comparison_csv,
)
from .mesh import MeshError, load_mesh
from .planner import (
    PassCycleEnv,
    TrajectoryError,
    assemble,
    export_trajectory,
    load_trajectory,
    make_static_baseline,
    plan_boustrophedon,
    plan_single_pass,
    rollout_policy,
)
from .plyio import PlyError, read_ply
from .policy import (
    POLICY_FORMAT,
    PolicyDigestWarning,
    PolicyFormatError,
    TrainingAborted,
    evaluate_policy,
    read_policy_file,
    save_policy,
    train,
    write_metrics_csv,
)
from .raycast import build_accel
from .sensor import NoSurfaceError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PROVENANCE = 0, 2, 3, 4
OUT_ENV = "PROFISCAN_OUT"
SMOOTH_WINDOW = 10


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def smoothed(values, window=SMOOTH_WINDOW):
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def policy_digest(cfg):
    """Digest of the sections that define what a policy was trained for."""
    d = {k: cfg.to_dict()[k] for k in ("sensor", "episode", "ppo")}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def resolve_out_dir(cfg, out_dir=None):
    if out_dir is not None:
        return Path(out_dir)
    p = Path(cfg.output_dir)
    if not p.is_absolute() and os.environ.get(OUT_ENV):
        p = Path(os.environ[OUT_ENV]) / p
    return p


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out, command, cfg, files, extra=None):
    doc = {
        "command": command,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "outputs": {Path(f).name: _sha(f) for f in files},
    }
    doc.update(extra or {})
    path = out / f"{command}_manifest.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def _provenance(cfg, **kw):
    d = {"config_digest": cfg.digest(), "seed": cfg.seed}
    d.update(kw)
    return d


def _plot_training(history, path_reward, path_components, meta):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [m.steps for m in history]
    norm = [m.normalized_reward for m in history]
    info = {"Description": json.dumps(meta, sort_keys=True)}
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.plot(steps, norm, color="0.7", lw=1, label="per iteration")
    ax.plot(steps, smoothed(norm), color="C0", lw=2, label=f"trailing mean ({SMOOTH_WINDOW})")
    ax.set_xlabel("environment steps")
    ax.set_ylabel("normalized reward")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path_reward, format="png", metadata=info)
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for attr, label in (("mean_R_D", "distance"), ("mean_R_alpha", "orientation"), ("mean_R_ds", "spacing")):
        ax.plot(steps, smoothed([getattr(m, attr) for m in history]), lw=1.5, label=label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean reward component")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path_components, format="png", metadata=info)
    plt.close(fig)


def make_plan(cfg, mesh, spec, accel):
    pl = cfg.planner
    if pl.start_xy is not None:
        return plan_single_pass(mesh, spec, pl.start_xy, pl.end_xy, accel=accel)
    return plan_boustrophedon(mesh, spec, pl.advance_dir, pl.pass_width, pl.overlap, pl.edge_margin, accel=accel)


def run_train(cfg, out_dir, log=None):
    """Train on the configured mesh; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = cfg.build_mesh()
    spec = cfg.sensor_spec()
    accel = build_accel(mesh)
    plan = make_plan(cfg, mesh, spec, accel)
    defaults = cfg.episode_defaults()
    episodes = [p.episode(defaults) for p in plan.passes]
    ppo = cfg.ppo_config()
    prov = _provenance(cfg, mesh_digest=mesh.digest(), policy_digest=policy_digest(cfg))

    def cb(m, _):
        if log is not None:
            log(f"iter {m.iteration:4d}  steps {m.steps:7d}  normalized_reward {m.normalized_reward:+.4f}")

    policy_path = out / "policy.json"
    params, history = train(lambda s: PassCycleEnv(accel, spec, episodes, seed=s), ppo, callback=cb,
                            checkpoint_path=out / "policy_best.json", checkpoint_meta=prov,
                            checkpoint_digest=policy_digest(cfg))
    ev_env = PassCycleEnv(accel, spec, episodes, seed=cfg.seed)
    evals = evaluate_policy(ev_env, params, cfg.ppo.eval_episodes, seed=cfg.seed + 1_000_003)
    norm = [m.normalized_reward for m in history]
    sm = smoothed(norm)
    summary = {
        "first_normalized_reward": norm[0],
        "final_smoothed_normalized_reward": float(sm[-1]),
        "eval_mean_normalized_reward": float(np.mean([e[0] for e in evals])),
        "eval_episodes": len(evals),
        "iterations": len(history),
        "steps": history[-1].steps,
    }
    meta = dict(prov, training=summary)
    save_policy(params, policy_path, ppo, digest=policy_digest(cfg), meta=meta)
    metrics = write_metrics_csv(history, out / "metrics.csv", meta=prov)
    eval_csv = out / "eval.csv"
    with open(eval_csv, "w") as fh:
        fh.write("# " + json.dumps(prov, sort_keys=True) + "\n")
        fh.write("episode,normalized_reward,length,end_reason\n")
        for k, (r, n, reason) in enumerate(evals):
            fh.write(f"{k},{float(r)!r},{n},{reason}\n")
    curve = out / "reward_curve.png"
    comps = out / "reward_components.png"
    _plot_training(history, curve, comps, prov)
    files = [policy_path, out / "policy_best.json", metrics, eval_csv, curve, comps]
    (out / "config.yaml").write_text(cfg.to_yaml())
    files.append(out / "config.yaml")
    _write_manifest(out, "train", cfg, files, {"training": summary, "mesh_digest": mesh.digest()})
    return {"policy": policy_path, "metrics": metrics, "eval": eval_csv, "summary": summary, "params": params,
            "history": history}


def _load_policy_checked(path, cfg, override):
    try:
        params, doc = read_policy_file(path)
    except PolicyFormatError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    want = policy_digest(cfg)
    if doc.get("config_digest") != want:
        msg = f"policy digest {doc.get('config_digest')} does not match configuration ({want})"
        if not override:
            raise CliError(msg, EXIT_PROVENANCE)
        warnings.warn(msg, PolicyDigestWarning, stacklevel=2)
    return params, doc


def _mesh_from(cfg, mesh_path):
    if mesh_path is None:
        return cfg.build_mesh()
    try:
        return load_mesh(mesh_path)
    except (OSError, MeshError, PlyError) as exc:
        raise CliError(f"cannot load mesh {mesh_path}: {exc}", EXIT_CONFIG) from exc


def run_plan(cfg, out_dir, policy_path, mesh_path=None, override=False, log=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, pdoc = _load_policy_checked(policy_path, cfg, override)
    mesh = _mesh_from(cfg, mesh_path)
    spec = cfg.sensor_spec()
    accel = build_accel(mesh)
    plan = make_plan(cfg, mesh, spec, accel)
    defaults = cfg.episode_defaults()
    if log is not None:
        log(plan.summary_table())
    base_meta = _provenance(cfg, mesh_digest=mesh.digest(), sensor_digest=spec_digest(spec),
                            policy_checksum=pdoc["checksum"][:16])
    (out / "plan.txt").write_text("# " + json.dumps(base_meta, sort_keys=True) + "\n" + plan.summary_table() + "\n")
    segs, base = [], []
    files = [out / "plan.txt"]
    for p in plan.passes:
        seg, trace = rollout_policy(accel, spec, params, p, defaults, seed=cfg.seed + p.pass_id,
                                    noise=cfg.evaluation.noise)
        segs.append(seg)
        files.append(write_trace_csv(trace, out / f"trace_pass{p.pass_id}.csv", meta=base_meta))
        step = cfg.planner.baseline_step or defaults.ds_opt
        base.append(make_static_baseline(p, spec, step))
    rl = assemble(plan, segs, cfg.planner.clearance, meta=dict(base_meta, kind="rl"))
    bl = assemble(plan, base, cfg.planner.clearance, meta=dict(base_meta, kind="baseline"))
    for name, traj in (("trajectory_rl", rl), ("trajectory_baseline", bl)):
        files.append(export_trajectory(traj, out / f"{name}.csv"))
        files.append(export_trajectory(traj, out / f"{name}.json"))
    _write_manifest(out, "plan", cfg, files, {"mesh_digest": mesh.digest(), "passes": len(plan.passes)})
    return {"plan": plan, "rl": rl, "baseline": bl, "files": files}


def _check_traj(traj, mesh, spec, override):
    for key, have in (("mesh_digest", mesh.digest()), ("sensor_digest", spec_digest(spec))):
        got = traj.meta.get(key)
        if got != have:
            msg = f"trajectory {key} {got} does not match {have}"
            if not override:
                raise CliError(msg, EXIT_PROVENANCE)
            warnings.warn(msg, stacklevel=2)


def _evaluate_one(cfg, accel, spec, traj, out, tag, files):
    emap = replay(accel, spec, traj, seed=cfg.seed, noise=cfg.evaluation.noise)
    if emap.n_profiles == 0:
        raise CliError(f"{tag}: trajectory has no capture records", EXIT_RUNTIME)
    rep = summarize(emap, spec, cfg.episode.ds_opt)
    ext = "csv" if cfg.evaluation.pointcloud_format == "csv" else "ply"
    files.append(export_pointcloud(emap, out / f"cloud_{tag}.{ext}", cfg.evaluation.pointcloud_format))
    size = (cfg.evaluation.image_width, cfg.evaluation.image_height)
    if emap.n_points:
        files.append(render_error_map(emap, out / f"error_distance_{tag}.png", "distance",
                                      cfg.evaluation.distance_limit, size, spec))
        files.append(render_error_map(emap, out / f"error_orientation_{tag}.png", "orientation",
                                      cfg.evaluation.orientation_limit, size, spec, cfg.episode.alpha_max))
    p = out / f"metrics_{tag}.json"
    p.write_text(rep.to_json())
    files.append(p)
    return rep


def run_evaluate(cfg, out_dir, traj_path, baseline_path=None, mesh_path=None, override=False, log=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = _mesh_from(cfg, mesh_path)
    spec = cfg.sensor_spec()
    accel = build_accel(mesh)
    files = []
    try:
        traj = load_trajectory(traj_path)
        base = load_trajectory(baseline_path) if baseline_path else None
    except (OSError, TrajectoryError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    for t in (traj, base):
        if t is not None:
            _check_traj(t, mesh, spec, override)
    if traj.capture_count == 0:
        raise CliError("trajectory has no capture records", EXIT_RUNTIME)
    tag = traj.meta.get("kind", "trajectory")
    rep = _evaluate_one(cfg, accel, spec, traj, out, tag, files)
    result = {"report": rep, "files": files}
    if base is not None:
        btag = base.meta.get("kind", "baseline")
        if btag == tag:
            btag += "_ref"
        brep = _evaluate_one(cfg, accel, spec, base, out, btag, files)
        rows = compare(rep, brep, override=override)
        prov = _provenance(cfg, mesh_digest=mesh.digest())
        files.append(write_comparison_csv(rows, out / "comparison.csv", meta=prov))
        if log is not None:
            log(format_comparison(rows))
        result.update(baseline_report=brep, comparison=rows)
    elif log is not None:
        log(rep.to_json())
    _write_manifest(out, "evaluate", cfg, files, {"mesh_digest": mesh.digest()})
    return result


def run_info(path):
    path = Path(path)
    if not path.is_file():
        raise CliError(f"no such file: {path}", EXIT_CONFIG)
    suf = path.suffix.lower()
    lines = []
    if suf == ".json":
        try:
            doc = json.loads(path.read_text())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CliError(f"unknown file type: {path} ({exc})", EXIT_CONFIG) from exc
        if isinstance(doc, dict) and doc.get("format") == POLICY_FORMAT:
            params, doc = read_policy_file(path)
            lines.append("type: policy")
            for k, s in params.shapes.items():
                lines.append(f"  {k}: {tuple(s)}")
            lines.append(f"config_digest: {doc.get('config_digest')}")
            lines.append(f"checksum: {doc['checksum'][:16]}")
            for k in ("seed", "mesh_digest"):
                if k in doc.get("meta", {}):
                    lines.append(f"{k}: {doc['meta'][k]}")
            return "\n".join(lines)
        if isinstance(doc, dict) and "records" in doc:
            return _traj_info(load_trajectory(path))
        raise CliError(f"unknown file type: {path}", EXIT_CONFIG)
    if suf == ".csv":
        try:
            return _traj_info(load_trajectory(path))
        except TrajectoryError as exc:
            raise CliError(f"unknown file type: {path} ({exc})", EXIT_CONFIG) from exc
    if suf == ".ply":
        try:
            data, comments = read_ply(path)
        except PlyError as exc:
            raise CliError(f"unknown file type: {path} ({exc})", EXIT_CONFIG) from exc
        if "face" not in data:
            v = data.get("vertex", {})
            n = len(next(iter(v.values()))) if v else 0
            lines = ["type: point cloud", f"points: {n}", "properties: " + ", ".join(v)]
            lines += [f"comment: {c}" for c in comments]
            return "\n".join(lines)
    if suf in (".stl", ".obj", ".ply"):
        try:
            mesh = load_mesh(path)
        except (MeshError, PlyError, ValueError) as exc:
            raise CliError(f"unknown file type: {path} ({exc})", EXIT_CONFIG) from exc
        lo, hi = mesh.bounds
        return "\n".join([
            "type: mesh",
            f"triangles: {mesh.n_triangles}",
            f"vertices: {mesh.n_vertices}",
            f"bounds min: {lo.tolist()}",
            f"bounds max: {hi.tolist()}",
            f"digest: {mesh.digest()}",
        ])
    raise CliError(f"unknown file type: {path}", EXIT_CONFIG)


def _traj_info(traj):
    lines = [
        "type: trajectory",
        f"records: {len(traj)}",
        f"passes: {len(traj.pass_ids)}",
        f"capture records: {traj.capture_count}",
    ]
    for k in ("kind", "seed", "config_digest", "mesh_digest"):
        if k in traj.meta:
            lines.append(f"{k}: {traj.meta[k]}")
    return "\n".join(lines)


def build_parser():
    ap = argparse.ArgumentParser(prog="profiscan", description="Profile-scan trajectory training and planning.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, help="ray-casting threads (default: all cores)")
    common.add_argument("--out-dir", help=f"output directory (default: config output_dir under ${OUT_ENV})")
    common.add_argument("--override-provenance", action="store_true", help="warn instead of failing on digest mismatch")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a policy")
    p = sub.add_parser("plan", parents=[common], help="plan passes and roll out a policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--mesh")
    e = sub.add_parser("evaluate", parents=[common], help="replay trajectories and report errors")
    e.add_argument("--trajectory", required=True)
    e.add_argument("--baseline")
    e.add_argument("--mesh")
    i = sub.add_parser("info", help="summarize a mesh, policy, trajectory or point cloud")
    i.add_argument("path")
    return ap


def _say(msg):
    print(msg, flush=True)


def _err(msg):
    print(msg, file=sys.stderr, flush=True)


def main(argv=None):
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "info":
            _say(run_info(args.path))
            return EXIT_OK
        if args.threads is not None:
            import numba

            if args.threads < 1:
                raise CliError("--threads must be positive", EXIT_CONFIG)
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = resolve_out_dir(cfg, args.out_dir)
        if args.command == "train":
            res = run_train(cfg, out, log=_err)
            _say(json.dumps(res["summary"], sort_keys=True, indent=1))
        elif args.command == "plan":
            run_plan(cfg, out, args.policy, args.mesh, args.override_provenance, log=_say)
        else:
            run_evaluate(cfg, out, args.trajectory, args.baseline, args.mesh, args.override_provenance, log=_say)
        return EXIT_OK
    except CliError as exc:
        _err(f"error: {exc}")
        return exc.code
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except ProvenanceError as exc:
        _err(f"provenance error: {exc}")
        return EXIT_PROVENANCE
    except (TrainingAborted, BadStartError, NoSurfaceError, EmptyMapError, MeshError) as exc:
        _err(f"runtime error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
