"""Operator surface: generate worlds, train, dispatch, evaluate, report.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
4 missing input artifact.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .clustering import BlockPartition, PartitionError
from .config import RunConfig, RunConfigError
from .dispatch import (
    DispatchError,
    baseline_dispatch,
    build_dispatch_plan,
    compute_cp,
    evaluate_metrics,
    evaluate_objective,
    evaluate_plan_objective,
    write_plan_csv,
    write_report_json,
)
from .numerics import NumericsError, load_checkpoint, save_checkpoint
from .policy import accumulate_by_cluster, policy_forward_many
from .temporal import ConfigError, peak_indices
from .training import (
    DivergenceError,
    Sample,
    predict_clusters,
    run_async,
    run_interleaved,
    write_trace_csv,
)
from .worldgen import (
    WorldError,
    cluster_quality_report,
    generate_world,
    load_world,
    rank_frequency,
    save_world,
    stationarity_report,
)

CONFIG_ERRORS = (RunConfigError, WorldError, ConfigError, PartitionError, DispatchError, NumericsError, ValueError)


class MissingArtifact(FileNotFoundError):
    pass


def _require_out_dir(out: str) -> str:
    if not os.path.isdir(out):
        raise RunConfigError(f"output directory does not exist: {out}")
    return out


def _build_samples(world):
    d = world.cfg.days - 2
    tensors = world.tensors(0, d + 1)
    return [
        Sample(video_id=vid, tensor=tensors[i], upload_day=world.uploads[vid])
        for i, vid in enumerate(world.video_ids)
    ]


def cmd_gen(cfg: RunConfig, out: str) -> int:
    _require_out_dir(out)
    world = generate_world(cfg.world_config())
    save_world(out, world)
    cfg.echo(os.path.join(out, "config_gen.txt"))
    print(f"generated world: {len(world.video_ids)} videos, "
          f"{int(world.counts.sum())} requests -> {out}")
    return 0


def _load_world_or_die(out: str):
    try:
        return load_world(out)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from exc


def cmd_train(cfg: RunConfig, out: str, mode: str) -> int:
    _require_out_dir(out)
    world = _load_world_or_die(out)
    samples = _build_samples(world)
    tcfg = cfg.temporal_config()
    train_cfg = cfg.train_config()
    initial = None
    if cfg["train.resume"]:
        paths = {f: os.path.join(out, f"{f}.ckpt") for f in ("temporal", "clustering", "policy")}
        if all(os.path.exists(p) for p in paths.values()):
            initial = {f: load_checkpoint(p) for f, p in paths.items()}
        else:
            raise MissingArtifact("resume requested but checkpoints are missing")
    runner = run_async if mode == "async" else run_interleaved
    result = runner(samples, tcfg, train_cfg, world.cfg.peak_window, initial=initial)
    save_checkpoint(os.path.join(out, "temporal.ckpt"), result.temporal)
    save_checkpoint(os.path.join(out, "clustering.ckpt"), result.clustering)
    save_checkpoint(os.path.join(out, "policy.ckpt"), result.policy)
    write_trace_csv(os.path.join(out, "policy_trace.csv"), result.policy_trace)
    write_trace_csv(os.path.join(out, "cluster_trace.csv"), result.cluster_trace)
    cfg.echo(os.path.join(out, "config_train.txt"))
    last_p = result.policy_trace[-1]["loss"] if result.policy_trace else float("nan")
    last_c = result.cluster_trace[-1]["loss"] if result.cluster_trace else float("nan")
    print(f"trained ({mode}): final loss_p={last_p:.6f} loss_c={last_c:.6f} -> {out}")
    return 0


def _load_models(out: str):
    paths = {f: os.path.join(out, f"{f}.ckpt") for f in ("temporal", "clustering", "policy")}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise MissingArtifact(f"missing checkpoints: {missing}")
    models = {f: load_checkpoint(p) for f, p in paths.items()}
    partition = BlockPartition.from_params(models["clustering"].params)
    return models, partition


def _learned_prediction(cfg: RunConfig, world, models, partition):
    """Cluster assignments, populated-cluster UP matrix, and CP."""
    tcfg = cfg.temporal_config()
    d = tcfg.days
    eval_day = world.cfg.days - 1
    tensors = world.tensors(eval_day - d, eval_day)
    peak_idx = peak_indices(tensors.sum(axis=0), tcfg.k)
    clusters, embeddings = predict_clusters(
        tensors, tcfg, models["temporal"], models["clustering"], partition, peak_idx
    )
    assignment = {vid: int(c) for vid, c in zip(world.video_ids, clusters)}
    xa = accumulate_by_cluster(
        [(vid, tensors[i]) for i, vid in enumerate(world.video_ids)], assignment
    )
    populated = sorted(xa)
    xs = np.stack([xa[c] for c in populated])
    up, _ = policy_forward_many(xs, tcfg, models["temporal"], models["policy"])
    cp = compute_cp(up, world.topology)
    return assignment, populated, up, cp, embeddings


def cmd_dispatch(cfg: RunConfig, out: str) -> int:
    _require_out_dir(out)
    world = _load_world_or_die(out)
    topology = world.topology
    eval_day = world.cfg.days - 1
    budgets = {c: cfg["dispatch.n_per_cdn"] for c in topology.cdns}
    peak_window = world.cfg.peak_window
    reports = {}

    baseline_plan = baseline_dispatch(
        world.day_stream(eval_day), cfg["dispatch.h"], cfg["dispatch.p"], topology, budgets
    )
    if baseline_plan.total_dispatched():
        reports["baseline"] = evaluate_metrics(
            baseline_plan, world.day_log(eval_day), peak_window, topology
        )
    write_plan_csv(os.path.join(out, "plan_baseline.csv"), baseline_plan, {}, topology)

    if cfg["dispatch.policy"] == "learned":
        models, partition = _load_models(out)
        assignment, populated, up, cp, _ = _learned_prediction(cfg, world, models, partition)
        upload_times = {vid: float(world.uploads[vid]) for vid in world.video_ids}
        plan = build_dispatch_plan(cp, assignment, upload_times, topology, budgets, populated)
        objective = evaluate_objective(
            assignment, cp, world.peak_requests(eval_day), topology, populated
        )
        reports["learned"] = evaluate_metrics(
            plan, world.day_log(eval_day), peak_window, topology, objective, assignment
        )
        plan_objective = evaluate_plan_objective(
            plan, assignment, cp, world.peak_requests(eval_day), topology, populated
        )
        write_plan_csv(os.path.join(out, "plan_learned.csv"), plan, assignment, topology)
        extra = {"learned_plan_objective": plan_objective}
    else:
        extra = {}

    cfg.echo(os.path.join(out, "config_dispatch.txt"))
    payload = {k: r.to_json() for k, r in reports.items()}
    payload.update(extra)
    with open(os.path.join(out, "dispatch_report.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    for name, report in reports.items():
        print(f"{name}: accuracy={report.accuracy:.4f} r_whole={report.r_whole:.4f} "
              f"dispatched={report.dispatched}")
    return 0


def cmd_report(cfg: RunConfig, out: str) -> int:
    _require_out_dir(out)
    world = _load_world_or_die(out)
    models, partition = _load_models(out)

    stationarity = stationarity_report(world, max_series=cfg["report.max_series"])

    ranks = rank_frequency(world)
    total = sum(freq for _r, freq in ranks) or 1
    top = max(1, len(ranks) // 100)
    longtail = {
        "videos": len(ranks),
        "total_requests": total,
        "top_1pct_share": sum(freq for _r, freq in ranks[:top]) / total,
    }
    with open(os.path.join(out, "rank_frequency.csv"), "w") as fh:
        fh.write("rank,frequency\n")
        for rank, freq in ranks:
            fh.write(f"{rank},{freq}\n")

    assignment, _populated, _up, _cp, embeddings = _learned_prediction(cfg, world, models, partition)
    d = cfg.temporal_config().days
    eval_day = world.cfg.days - 1
    tensors = world.tensors(eval_day - d, eval_day)
    vectors = {vid: tensors[i].reshape(-1) for i, vid in enumerate(world.video_ids)}
    emb_map = {vid: embeddings[i] for i, vid in enumerate(world.video_ids)}
    quality = cluster_quality_report(assignment, vectors, emb_map, partition)
    quality["table2_direction"] = bool(quality["intra_mean"] > quality["inter_mean"])

    analysis = {
        "stationarity": stationarity,
        "longtail": longtail,
        "cluster_quality": quality,
    }
    with open(os.path.join(out, "analysis.json"), "w") as fh:
        json.dump(analysis, fh, indent=2, sort_keys=True)
    cfg.echo(os.path.join(out, "config_report.txt"))
    print(f"report: dom_raw={stationarity['dom_raw']:.6f} dom_diff={stationarity['dom_diff']:.6f} "
          f"intra={quality['intra_mean']:.3f} inter={quality['inter_mean']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voddispatch")
    parser.add_argument("command", choices=["gen", "train", "dispatch", "report"])
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--out", required=True, help="run directory for artifacts")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--mode", choices=["async", "interleaved"], default=None)
    parser.add_argument("-o", "--override", action="append", default=[],
                        help="config override key=value (repeatable)")
    parser.add_argument("--policy", choices=["learned", "threshold"], default=None)
    parser.add_argument("--h", dest="h", type=float, default=None, help="baseline threshold")
    parser.add_argument("--p", dest="p", type=int, default=None, help="baseline period")
    parser.add_argument("--no-shuffle", action="store_true",
                        help="train on date-ordered halves (no experience-replay shuffle)")
    parser.add_argument("--resume", action="store_true", help="continue from checkpoints")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.mode is not None:
        overrides.append(f"mode={args.mode}")
    if args.policy is not None:
        overrides.append(f"dispatch.policy={args.policy}")
    if args.h is not None:
        overrides.append(f"dispatch.h={args.h}")
    if args.p is not None:
        overrides.append(f"dispatch.p={args.p}")
    if args.no_shuffle:
        overrides.append("train.shuffle=false")
        overrides.append("train.halves=true")
    if args.resume:
        overrides.append("train.resume=true")
    try:
        cfg = RunConfig.from_file(args.config, overrides)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, cfg["mode"])
        if args.command == "dispatch":
            return cmd_dispatch(cfg, args.out)
        return cmd_report(cfg, args.out)
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 3
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
