"""Synthetic VOD workload generator plus the statistical analyzers.

Request intensities are multiplicative: Zipf popularity x latent-profile
user affinity x per-profile diurnal curve x post-upload decay, emitted as
Poisson counts with per-video derived seeds. Profiles split into
evening-heavy and daytime-heavy groups so peak and off-peak preferences
genuinely differ, and the upload burst decay makes request series
nonstationary day over day.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .dispatch import Topology
from .numerics import Array, named_rng


class WorldError(ValueError):
    """Invalid world configuration or analyzer input."""


@dataclass(frozen=True)
class WorldConfig:
    users: int = 8
    cdns: int = 3
    videos: int = 500
    days: int = 9
    t: int = 24
    k: int = 6
    peak_start: int = 17
    zipf_exponent: float = 1.0
    daily_uploads: int = 62
    profiles: int = 4
    peak_ratio: float = 7.0
    profile_contrast: float = 4.0
    pref_mix: float = 0.4
    upload_decay: float = 0.45
    burstiness: float = 0.8
    requests_per_user_day: float = 300.0
    cpt: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.peak_start < 0 or self.peak_start + self.k > self.t:
            raise WorldError("peak window must fit inside [0, T)")
        if self.zipf_exponent < 0:
            raise WorldError("Zipf exponent must be nonnegative")
        if self.days < 2 or self.videos < 1 or self.users < 1 or self.cdns < 1:
            raise WorldError("need at least 2 days and positive counts")
        if self.profiles < 2 or self.profiles % 2 != 0:
            raise WorldError("profile count must be even and at least 2")
        if not 0.0 < self.upload_decay <= 1.0:
            raise WorldError("upload decay must lie in (0, 1]")
        if self.burstiness < 0.0:
            raise WorldError("burstiness must be nonnegative")

    @property
    def peak_window(self) -> tuple[int, ...]:
        return tuple(range(self.peak_start, self.peak_start + self.k))


@dataclass
class World:
    cfg: WorldConfig
    video_ids: list[str]
    user_ids: list[str]
    counts: Array  # [V, U, days, T] nonnegative integers
    uploads: dict[str, int]
    topology: Topology
    popularity: Array = field(repr=False, default=None)
    profile_of: Array = field(repr=False, default=None)

    def tensor(self, video_id: str, day_lo: int, day_hi: int) -> Array:
        vi = self.video_ids.index(video_id)
        return self.counts[vi, :, day_lo:day_hi, :].astype(np.float64)

    def tensors(self, day_lo: int, day_hi: int) -> Array:
        return self.counts[:, :, day_lo:day_hi, :].astype(np.float64)

    def day_log(self, day: int):
        """Rows (day, interval, video_id, user_id, count) for one day."""
        vs, us, ts = np.nonzero(self.counts[:, :, day, :])
        rows = []
        for v, u, t in zip(vs, us, ts):
            rows.append((day, int(t), self.video_ids[v], self.user_ids[u], int(self.counts[v, u, day, t])))
        rows.sort(key=lambda r: (r[1], r[2], r[3]))
        return rows

    def day_stream(self, day: int):
        """Interval-ordered (interval, video_id, user_id, count) rows."""
        return [(t, v, u, c) for _d, t, v, u, c in self.day_log(day)]

    def peak_requests(self, day: int) -> dict[str, dict[str, float]]:
        window = list(self.cfg.peak_window)
        sums = self.counts[:, :, day, :][:, :, window].sum(axis=2)
        out: dict[str, dict[str, float]] = {}
        for ui, user in enumerate(self.user_ids):
            per_user = {
                self.video_ids[vi]: float(sums[vi, ui])
                for vi in np.flatnonzero(sums[:, ui] > 0)
            }
            out[user] = per_user
        return out


def _profile_curves(cfg: WorldConfig, mass_evening: float, mass_daytime: float) -> Array:
    """Per-profile diurnal levels calibrated so the aggregate peak/off-peak
    intensity ratio matches the configured value exactly in expectation."""
    gamma = cfg.profile_contrast
    b_e = 1.0 / np.sqrt(gamma)
    b_d = np.sqrt(gamma)
    # solve evening/daytime peak levels with contrast gamma and global ratio
    denom = mass_evening * gamma + mass_daytime
    off_mean = mass_evening * b_e + mass_daytime * b_d
    a_d = cfg.peak_ratio * off_mean / denom
    a_e = gamma * a_d
    curves = np.ones((cfg.profiles, cfg.t))
    window = list(cfg.peak_window)
    half = cfg.profiles // 2
    for p in range(cfg.profiles):
        evening = p < half
        curves[p, :] = b_e if evening else b_d
        curves[p, window] = a_e if evening else a_d
    return curves


def generate_world(cfg: WorldConfig) -> World:
    """Build the full synthetic world: counts, uploads, and CDN topology."""
    rng = named_rng(cfg.seed, "world")
    video_ids = [f"v{idx:0{len(str(cfg.videos - 1))}d}" for idx in range(cfg.videos)]
    user_ids = [f"u{idx}" for idx in range(cfg.users)]

    rank_of = rng.permutation(cfg.videos)
    popularity = (1.0 / (rank_of + 1.0) ** cfg.zipf_exponent)
    popularity /= popularity.sum()

    half = cfg.profiles // 2
    # alternate evening/daytime in pairs down the popularity ranking so the
    # two groups carry comparable request mass
    pattern = [p for pair in zip(range(half), range(half, cfg.profiles)) for p in pair]
    profile_of = np.array([pattern[rank_of[v] % len(pattern)] for v in range(cfg.videos)])

    upload_days_available = cfg.days - 1
    spread = min(cfg.daily_uploads * (upload_days_available - 1), cfg.videos)
    day0 = cfg.videos - spread
    upload_schedule = np.concatenate(
        [
            np.zeros(day0, dtype=np.int64),
            np.repeat(np.arange(1, upload_days_available), cfg.daily_uploads)[:spread],
        ]
    )
    upload_of = upload_schedule[rng.permutation(cfg.videos)]
    uploads = {video_ids[v]: int(upload_of[v]) for v in range(cfg.videos)}

    ages = np.arange(cfg.days)[None, :] - upload_of[:, None]
    life = np.where(ages >= 0, cfg.upload_decay ** np.maximum(ages, 0), 0.0)

    weight = popularity * life.sum(axis=1)
    evening_mask = profile_of < half
    mass_evening = float(weight[evening_mask].sum())
    mass_daytime = float(weight[~evening_mask].sum())
    curves = _profile_curves(cfg, mass_evening, mass_daytime)

    dominant = np.arange(cfg.users) % cfg.profiles
    prefs = np.full((cfg.users, cfg.profiles), cfg.pref_mix)
    prefs[np.arange(cfg.users), dominant] += (1.0 - cfg.pref_mix) * cfg.profiles

    lam = (
        popularity[:, None, None, None]
        * prefs[:, profile_of].T[:, :, None, None]
        * life[:, None, :, None]
        * curves[profile_of][:, None, None, :]
    )
    target_total = cfg.requests_per_user_day * cfg.users * cfg.days
    lam *= target_total / lam.sum()

    window = np.array(cfg.peak_window)
    off_window = np.array([t for t in range(cfg.t) if t not in set(cfg.peak_window)])
    counts = np.zeros(lam.shape, dtype=np.int64)
    for v, vid in enumerate(video_ids):
        vrng = named_rng(cfg.seed, f"video.{vid}")
        rates = lam[v]
        if cfg.burstiness > 0:
            # erratic within-day timing: a gamma envelope shared by all users,
            # mean-one separately inside the peak and off-peak segments so the
            # configured peak/off-peak split is preserved per realization
            shape = 1.0 / cfg.burstiness
            envelope = vrng.gamma(shape, cfg.burstiness, size=(cfg.days, cfg.t))
            for seg in (window, off_window):
                if seg.size:
                    seg_mean = envelope[:, seg].mean(axis=1, keepdims=True)
                    envelope[:, seg] /= np.maximum(seg_mean, 1e-12)
            rates = rates * envelope[None, :, :]
        counts[v] = vrng.poisson(rates)

    serving_rng = named_rng(cfg.seed, "topology")
    cdns = [f"cdn{idx}" for idx in range(cfg.cdns)]
    serving = {}
    for ui, user in enumerate(user_ids):
        primary = cdns[ui % cfg.cdns]
        extra = []
        if cfg.cdns > 1 and serving_rng.random() < 0.5:
            others = [c for c in cdns if c != primary]
            extra = [others[serving_rng.integers(len(others))]]
        serving[user] = [primary] + extra
    topology = Topology.build(user_ids, cdns, serving, {c: cfg.cpt for c in cdns})

    return World(
        cfg=cfg,
        video_ids=video_ids,
        user_ids=user_ids,
        counts=counts,
        uploads=uploads,
        topology=topology,
        popularity=popularity,
        profile_of=profile_of,
    )


def save_world(out_dir, world: World) -> None:
    out_dir = str(out_dir)
    with open(f"{out_dir}/requests.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "user_id", "day", "interval", "count"])
        vs, us, ds, ts = np.nonzero(world.counts)
        for v, u, d, t in zip(vs, us, ds, ts):
            writer.writerow(
                [world.video_ids[v], world.user_ids[u], int(d), int(t), int(world.counts[v, u, d, t])]
            )
    with open(f"{out_dir}/uploads.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "upload_day"])
        for vid in world.video_ids:
            writer.writerow([vid, world.uploads[vid]])
    with open(f"{out_dir}/topology.json", "w") as fh:
        json.dump(world.topology.to_json(), fh, indent=2, sort_keys=True)
    with open(f"{out_dir}/world.json", "w") as fh:
        json.dump(
            {
                "config": asdict(world.cfg),
                "video_ids": world.video_ids,
                "user_ids": world.user_ids,
            },
            fh,
            indent=2,
            sort_keys=True,
        )


def load_world(out_dir) -> World:
    out_dir = str(out_dir)
    try:
        with open(f"{out_dir}/world.json") as fh:
            meta = json.load(fh)
        with open(f"{out_dir}/topology.json") as fh:
            topo = Topology.from_json(json.load(fh))
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"world files missing in '{out_dir}': {exc}") from exc
    cfg = WorldConfig(**meta["config"])
    video_ids = meta["video_ids"]
    user_ids = meta["user_ids"]
    v_index = {v: i for i, v in enumerate(video_ids)}
    u_index = {u: i for i, u in enumerate(user_ids)}
    counts = np.zeros((len(video_ids), len(user_ids), cfg.days, cfg.t), dtype=np.int64)
    with open(f"{out_dir}/requests.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            counts[
                v_index[row["video_id"]],
                u_index[row["user_id"]],
                int(row["day"]),
                int(row["interval"]),
            ] = int(row["count"])
    uploads = {}
    with open(f"{out_dir}/uploads.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            uploads[row["video_id"]] = int(row["upload_day"])
    return World(
        cfg=cfg,
        video_ids=video_ids,
        user_ids=user_ids,
        counts=counts,
        uploads=uploads,
        topology=topo,
    )


def _window_mean_statistic(series: Array, window: int, stride: int | None = None) -> float:
    """Mean absolute difference between consecutive window means.

    The window advances by its own length by default, so with a one-day
    window this measures day-over-day shifts of the mean level.
    """
    stride = window if stride is None else int(stride)
    if series.shape[0] < window + stride:
        raise WorldError("series too short for the sliding window")
    n = (series.shape[0] - window) // stride + 1
    means = np.array([series[i * stride : i * stride + window].mean() for i in range(n)])
    return float(np.mean(np.abs(np.diff(means))))


def stationarity_report(world: World, window: int | None = None, max_series: int = 400) -> dict:
    """Difference-of-window-means statistic, raw vs first-differenced.

    Uses the most active (video, user) series; one-day window by default.
    """
    if world.cfg.days < 2:
        raise WorldError("need at least 2 days of data")
    window = world.cfg.t if window is None else int(window)
    totals = world.counts.sum(axis=(2, 3))
    flat_order = np.argsort(-totals, axis=None, kind="stable")
    raw_stats = []
    diff_stats = []
    for flat in flat_order[:max_series]:
        v, u = divmod(int(flat), world.counts.shape[1])
        if totals[v, u] <= 0:
            break
        series = world.counts[v, u].reshape(-1).astype(np.float64)
        raw_stats.append(_window_mean_statistic(series, window))
        diff_stats.append(_window_mean_statistic(np.diff(series), window))
    if not raw_stats:
        raise WorldError("no active series to sample")
    return {
        "dom_raw": float(np.mean(raw_stats)),
        "dom_diff": float(np.mean(diff_stats)),
        "series_sampled": len(raw_stats),
        "window": window,
    }


def pearson(xs, ys) -> float:
    """Product-moment correlation coefficient."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.shape[0] < 2:
        raise WorldError("pearson needs two equal-length series of length >= 2")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = float(np.sqrt(np.sum(dx * dx)))
    sy = float(np.sqrt(np.sum(dy * dy)))
    if sx == 0.0 or sy == 0.0:
        raise WorldError("pearson undefined for zero-variance input")
    return float(np.sum(dx * dy) / (sx * sy))


def _cv(values: Array) -> float | None:
    mean = float(np.mean(values))
    if mean == 0.0:
        return None
    return float(np.std(values) / abs(mean))


def cluster_quality_report(assignments, vectors, embeddings, partition) -> dict:
    """Cluster assessment: inner products, request densities, NV correlations.

    ``assignments``/``vectors``/``embeddings`` map video id to cluster index,
    flattened request vector, and 2-D encoder output respectively.
    """
    videos = sorted(assignments)
    clusters = np.array([assignments[v] for v in videos])
    populated = sorted(set(int(c) for c in clusters))
    if len(populated) < 2:
        raise WorldError("need at least 2 populated clusters")
    x = np.stack([np.asarray(vectors[v], dtype=np.float64).reshape(-1) for v in videos])
    e = np.stack([np.asarray(embeddings[v], dtype=np.float64).reshape(-1) for v in videos])

    gram = x @ x.T
    same = clusters[:, None] == clusters[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    intra = gram[same & upper]
    inter = gram[~same & upper]

    ns = np.mean(x != 0, axis=1)
    l1 = np.abs(x).sum(axis=1)
    l2 = np.sqrt((x * x).sum(axis=1))
    density_rows = []
    nv, area, ad = [], [], []
    for c in populated:
        members = clusters == c
        density_rows.append(
            {
                "cluster": int(c),
                "count": int(members.sum()),
                "ns_mean": float(ns[members].mean()),
                "ns_cv": _cv(ns[members]),
                "l1_mean": float(l1[members].mean()),
                "l1_cv": _cv(l1[members]),
                "l2_mean": float(l2[members].mean()),
                "l2_cv": _cv(l2[members]),
            }
        )
        nv.append(int(members.sum()))
        area.append(float(partition.block_area(np.array([c]))[0]))
        center = partition.block_center(np.array([c]))[0]
        ad.append(float(np.linalg.norm(e[members] - center[None, :], axis=1).mean()))

    def _corr(xs, ys):
        try:
            return pearson(xs, ys)
        except WorldError:
            return None  # undefined when one side has zero variance

    report = {
        "intra_mean": float(intra.mean()) if intra.size else 0.0,
        "inter_mean": float(inter.mean()) if inter.size else 0.0,
        "intra_cv": _cv(intra) if intra.size else None,
        "inter_cv": _cv(inter) if inter.size else None,
        "corr_nv_area": _corr(nv, area),
        "corr_nv_ad": _corr(nv, ad),
        "populated_clusters": len(populated),
        "densities": density_rows,
    }
    return report


def rank_frequency(world: World, peak_only: bool = False) -> list[tuple[int, int]]:
    """(rank, request count) rows sorted by descending frequency."""
    if peak_only:
        window = list(world.cfg.peak_window)
        totals = world.counts[:, :, :, window].sum(axis=(1, 2, 3))
    else:
        totals = world.counts.sum(axis=(1, 2, 3))
    ordered = np.sort(totals)[::-1]
    return [(rank, int(freq)) for rank, freq in enumerate(ordered)]
