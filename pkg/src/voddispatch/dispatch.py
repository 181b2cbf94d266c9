"""Dispatch post-processing and evaluation: cluster-to-CDN probabilities,
plan construction, the reactive threshold baseline, the placement objective,
and the requested/dispatched ratio metrics.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import Array, NumericsError


class DispatchError(ValueError):
    """Invalid dispatch input (topology, plan, or request data)."""


@dataclass(frozen=True)
class Topology:
    """Users, CDNs, the serving map, and the column-stochastic mix matrix.

    ``uc[u, i]`` is uniform over the users served by CDN i, so CP = UP @ UC
    stays a convex combination of per-user probabilities.
    """

    users: tuple[str, ...]
    cdns: tuple[str, ...]
    serving: dict[str, tuple[str, ...]]  # user -> CDNs serving that user
    cpt: dict[str, float]
    uc: Array

    @classmethod
    def build(cls, users, cdns, serving, cpt=None) -> "Topology":
        users = tuple(users)
        cdns = tuple(cdns)
        serving = {u: tuple(serving[u]) for u in users}
        for u in users:
            if not serving[u]:
                raise DispatchError(f"user '{u}' is not served by any CDN")
            for c in serving[u]:
                if c not in cdns:
                    raise DispatchError(f"unknown CDN '{c}' in serving map for '{u}'")
        uc = np.zeros((len(users), len(cdns)))
        for ui, u in enumerate(users):
            for c in serving[u]:
                uc[ui, cdns.index(c)] = 1.0
        col_sums = uc.sum(axis=0)
        if np.any(col_sums == 0):
            empty = [cdns[i] for i in np.flatnonzero(col_sums == 0)]
            raise DispatchError(f"CDNs serving no user: {empty}")
        uc /= col_sums
        if cpt is None:
            cpt = {c: float("inf") for c in cdns}
        return cls(users=users, cdns=cdns, serving=serving, cpt=dict(cpt), uc=uc)

    def served_users(self, cdn: str) -> tuple[str, ...]:
        return tuple(u for u in self.users if cdn in self.serving[u])

    def to_json(self) -> dict:
        return {
            "users": list(self.users),
            "cdns": list(self.cdns),
            "serving": {u: list(v) for u, v in self.serving.items()},
            "cpt": {c: self.cpt[c] for c in self.cdns},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Topology":
        return cls.build(obj["users"], obj["cdns"], obj["serving"], obj.get("cpt"))


@dataclass
class DispatchPlan:
    """Per-CDN ordered video lists plus the cluster probability matrix."""

    per_cdn: dict[str, list[str]]
    cp: Array
    cluster_ids: list[int] = field(default_factory=list)
    dispatch_times: dict[tuple[str, str], int] = field(default_factory=dict)

    def total_dispatched(self) -> int:
        return sum(len(v) for v in self.per_cdn.values())


@dataclass
class EvalReport:
    r_whole: float
    r_peak: float
    accuracy: float
    objective: float
    dispatched: int
    whole_hits: int
    peak_hits: int
    cpt_load: dict[str, float] = field(default_factory=dict)
    cpt_warnings: list[str] = field(default_factory=list)
    mean_dispatch_interval: float | None = None

    def to_json(self) -> dict:
        return {
            "r_whole": self.r_whole,
            "r_peak": self.r_peak,
            "accuracy": self.accuracy,
            "objective": self.objective,
            "dispatched": self.dispatched,
            "whole_hits": self.whole_hits,
            "peak_hits": self.peak_hits,
            "cpt_load": self.cpt_load,
            "cpt_warnings": self.cpt_warnings,
            "mean_dispatch_interval": self.mean_dispatch_interval,
        }


def compute_cp(up: Array, topology: Topology) -> Array:
    """CP = UP @ UC; rows are clusters, columns CDNs, entries in [0, 1]."""
    up = np.asarray(up, dtype=np.float64)
    if up.ndim != 2 or up.shape[1] != len(topology.users):
        raise NumericsError(
            f"UP must be [clusters, {len(topology.users)}], got {up.shape}"
        )
    return up @ topology.uc


def build_dispatch_plan(
    cp: Array,
    assignment: dict[str, int],
    upload_times: dict[str, float],
    topology: Topology,
    budgets: dict[str, int],
    cluster_ids=None,
) -> DispatchPlan:
    """Rank candidates per CDN by cluster probability, then recency, then id.

    ``cp`` rows follow ``cluster_ids`` when given, else raw cluster indices.
    """
    cp = np.asarray(cp, dtype=np.float64)
    if cluster_ids is None:
        cluster_ids = list(range(cp.shape[0]))
    row_of = {c: i for i, c in enumerate(cluster_ids)}
    videos = sorted(assignment)
    for v in videos:
        if assignment[v] not in row_of:
            raise DispatchError(f"no CP row for cluster {assignment[v]} of video '{v}'")
        if v not in upload_times:
            raise DispatchError(f"missing upload time for video '{v}'")
    per_cdn: dict[str, list[str]] = {}
    for ci, cdn in enumerate(topology.cdns):
        n = budgets[cdn]
        if n <= 0:
            raise DispatchError(f"dispatch budget for '{cdn}' must be positive")
        ranked = sorted(
            videos,
            key=lambda v: (-cp[row_of[assignment[v]], ci], -upload_times[v], v),
        )
        per_cdn[cdn] = ranked[:n]
    return DispatchPlan(per_cdn=per_cdn, cp=cp, cluster_ids=list(cluster_ids))


def baseline_dispatch(stream, h: float, p: int, topology: Topology, budgets: dict[str, int]) -> DispatchPlan:
    """Reactive threshold baseline over one day's interval-ordered stream.

    ``stream`` yields (interval, video_id, user_id, count) sorted by
    interval. A (video, CDN) pair dispatches once its served-user request
    sum exceeds ``h`` for ``p`` consecutive intervals, until the budget
    fills.
    """
    if h < 0:
        raise DispatchError("threshold h must be nonnegative")
    if p < 1:
        raise DispatchError("period p must be at least 1")
    per_interval: dict[int, dict[tuple[str, str], float]] = {}
    for interval, video, user, count in stream:
        sums = per_interval.setdefault(int(interval), {})
        for cdn in topology.serving[user]:
            key = (video, cdn)
            sums[key] = sums.get(key, 0.0) + float(count)
    per_cdn: dict[str, list[str]] = {c: [] for c in topology.cdns}
    dispatch_times: dict[tuple[str, str], int] = {}
    runs: dict[tuple[str, str], int] = {}
    for interval in sorted(per_interval):
        sums = per_interval[interval]
        new_runs: dict[tuple[str, str], int] = {}
        for key in sorted(sums):
            if sums[key] > h:
                new_runs[key] = runs.get(key, 0) + 1
        runs = new_runs
        for (video, cdn), run in sorted(runs.items()):
            if run == p and (cdn, video) not in dispatch_times and len(per_cdn[cdn]) < budgets[cdn]:
                per_cdn[cdn].append(video)
                dispatch_times[(cdn, video)] = interval
    cp = np.zeros((0, len(topology.cdns)))
    return DispatchPlan(per_cdn=per_cdn, cp=cp, dispatch_times=dispatch_times)


def evaluate_objective(
    assignment: dict[str, int],
    cp: Array,
    peak_requests: dict[str, dict[str, float]],
    topology: Topology,
    cluster_ids=None,
) -> float:
    """Expected uncovered peak demand: sum of count * prod(1 - CP) per request."""
    cp = np.asarray(cp, dtype=np.float64)
    if cluster_ids is None:
        cluster_ids = list(range(cp.shape[0]))
    row_of = {c: i for i, c in enumerate(cluster_ids)}
    missing = sorted(
        {v for reqs in peak_requests.values() for v in reqs if v not in assignment}
    )
    if missing:
        raise DispatchError(f"requested videos without cluster assignment: {missing}")
    total = 0.0
    for user, reqs in peak_requests.items():
        cdn_cols = [topology.cdns.index(c) for c in topology.serving[user]]
        for video, count in reqs.items():
            row = row_of[assignment[video]]
            miss = 1.0
            for col in cdn_cols:
                miss *= 1.0 - cp[row, col]
            total += count * miss
    return total


def evaluate_plan_objective(
    plan: DispatchPlan,
    assignment: dict[str, int],
    cp: Array,
    peak_requests: dict[str, dict[str, float]],
    topology: Topology,
    cluster_ids=None,
) -> float:
    """Objective of a concrete plan: CP applies only where a video was dispatched."""
    cp = np.asarray(cp, dtype=np.float64)
    if cluster_ids is None:
        cluster_ids = list(range(cp.shape[0]))
    row_of = {c: i for i, c in enumerate(cluster_ids)}
    dispatched = {
        (cdn, video) for cdn, videos in plan.per_cdn.items() for video in videos
    }
    total = 0.0
    for user, reqs in peak_requests.items():
        for video, count in reqs.items():
            row = row_of[assignment[video]]
            miss = 1.0
            for cdn in topology.serving[user]:
                if (cdn, video) in dispatched:
                    miss *= 1.0 - cp[row, topology.cdns.index(cdn)]
            total += count * miss
    return total


def evaluate_metrics(
    plan: DispatchPlan,
    day_log,
    peak_window,
    topology: Topology,
    objective: float = 0.0,
    assignment: dict[str, int] | None = None,
) -> EvalReport:
    """Requested/dispatched ratios over (CDN, video) pairs for one day.

    A dispatched pair scores when the video was requested by a user the CDN
    serves strictly after the dispatch happened: anywhere in the day for
    r_whole, inside the peak window for r_peak and accuracy. Plans without
    dispatch times (the learned path) were placed ahead of the day, so every
    interval counts; the reactive baseline earns nothing for copies that
    arrive after the demand they chased.
    """
    dispatched = [(cdn, video) for cdn, videos in plan.per_cdn.items() for video in videos]
    if not dispatched:
        raise DispatchError("empty dispatch plan")
    window = set(int(t) for t in peak_window)
    req_intervals: dict[tuple[str, str], set[int]] = {}
    for _day, interval, video, user, count in day_log:
        if count <= 0:
            continue
        for cdn in topology.serving[user]:
            req_intervals.setdefault((cdn, video), set()).add(int(interval))
    whole_hits = 0
    peak_hits = 0
    for cdn, video in dispatched:
        after = plan.dispatch_times.get((cdn, video), -1)
        intervals = req_intervals.get((cdn, video), ())
        if any(t > after for t in intervals):
            whole_hits += 1
        if any(t > after and t in window for t in intervals):
            peak_hits += 1
    n = len(dispatched)

    # soft CPT check: sum of CP over the distinct clusters dispatched per CDN
    cpt_load: dict[str, float] = {}
    cpt_warnings: list[str] = []
    if plan.cp.size and plan.cluster_ids and assignment is not None:
        row_of = {c: i for i, c in enumerate(plan.cluster_ids)}
        for ci, cdn in enumerate(topology.cdns):
            clusters = {assignment[v] for v in plan.per_cdn.get(cdn, []) if v in assignment}
            load = float(sum(plan.cp[row_of[c], ci] for c in clusters if c in row_of))
            cpt_load[cdn] = load
            if load > topology.cpt.get(cdn, float("inf")):
                cpt_warnings.append(
                    f"sum of cluster probabilities {load:.3f} exceeds CPT for '{cdn}'"
                )
    mean_time = None
    if plan.dispatch_times:
        mean_time = float(np.mean(list(plan.dispatch_times.values())))
    return EvalReport(
        r_whole=whole_hits / n,
        r_peak=peak_hits / n,
        accuracy=peak_hits / n,
        objective=objective,
        dispatched=n,
        whole_hits=whole_hits,
        peak_hits=peak_hits,
        cpt_load=cpt_load,
        cpt_warnings=cpt_warnings,
        mean_dispatch_interval=mean_time,
    )


def write_plan_csv(path, plan: DispatchPlan, assignment: dict[str, int], topology: Topology) -> None:
    row_of = {c: i for i, c in enumerate(plan.cluster_ids)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cdn_id", "rank", "video_id", "cluster", "cp"])
        for ci, cdn in enumerate(topology.cdns):
            for rank, video in enumerate(plan.per_cdn.get(cdn, [])):
                cluster = assignment.get(video, -1)
                prob = (
                    plan.cp[row_of[cluster], ci]
                    if plan.cp.size and cluster in row_of
                    else ""
                )
                writer.writerow([cdn, rank, video, cluster, prob])


def write_report_json(path, reports: dict[str, EvalReport]) -> None:
    with open(path, "w") as fh:
        json.dump({k: r.to_json() for k, r in reports.items()}, fh, indent=2, sort_keys=True)
