"""Shared temporal layers: per-day CNN (peak + mean branches with three 2D
pools) feeding a GRU over days, one hidden state per user.

Forward passes retain every intermediate needed by the matching hand-written
backward pass; top-K interval selection and pool argmax positions carry no
gradient (subgradient convention, ties resolved to the first occurrence).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array, NumericsError, ParamSet, named_rng, relu, sigmoid, xavier_init


class ConfigError(ValueError):
    """Invalid temporal layer geometry."""


# known (T, K) -> reshape geometry; row/column/block factorizations must hit
# the identities checked in TemporalConfig
_KNOWN_DIMS = {
    (24, 6): dict(r_row=6, r_col=4, c_row=4, c_col=6, b_row1=3, b_row2=2, b_col1=2, b_col2=2),
    (8, 2): dict(r_row=2, r_col=4, c_row=4, c_col=2, b_row1=2, b_row2=2, b_col1=1, b_col2=2),
    (288, 24): dict(
        r_row=24, r_col=12, c_row=12, c_col=24, b_row1=6, b_row2=4, b_col1=4, b_col2=3
    ),
}


@dataclass(frozen=True)
class TemporalConfig:
    """Geometry of the temporal layers for one entity (video or cluster)."""

    t: int
    k: int
    days: int
    hidden: int
    conv_width: int
    r_row: int
    r_col: int
    c_row: int
    c_col: int
    b_row1: int
    b_row2: int
    b_col1: int
    b_col2: int

    def __post_init__(self):
        if self.conv_width < 1 or self.conv_width % 2 == 0:
            raise ConfigError("conv width must be odd and positive")
        if not 0 < self.k <= self.t:
            raise ConfigError("need 0 < K <= T")
        if self.days < 1 or self.hidden < 1:
            raise ConfigError("days and hidden size must be positive")
        block_rows = self.b_row1 * self.b_row2
        block_cols = self.b_col1 * self.b_col2
        if not (self.t == self.r_row * self.r_col == self.c_row * self.c_col == block_rows * block_cols):
            raise ConfigError("reshape dims must each cover T")
        if not (self.k == self.r_row == self.c_col == self.b_row1 * self.b_col1):
            raise ConfigError("pool output dims must each equal K")

    @classmethod
    def make(cls, t: int, k: int, days: int, hidden: int, conv_width: int = 3, **dims) -> "TemporalConfig":
        if not dims:
            try:
                dims = _KNOWN_DIMS[(t, k)]
            except KeyError:
                raise ConfigError(
                    f"no default reshape geometry for T={t}, K={k}; pass explicit dims"
                ) from None
        return cls(t=t, k=k, days=days, hidden=hidden, conv_width=conv_width, **dims)


GRU_GATES = ("z", "r", "h")


def init_temporal_params(cfg: TemporalConfig, seed: int) -> ParamSet:
    """Xavier weights, zero biases, under the ``temporal.*`` namespace."""
    w = cfg.conv_width
    h = cfg.hidden
    d_in = 2 * cfg.k
    params = {
        "temporal.peak_conv.w": xavier_init((w,), w, 1, named_rng(seed, "temporal.peak_conv.w")),
        "temporal.peak_conv.b": np.zeros(1),
        "temporal.mean_conv.w": xavier_init((w,), w, 1, named_rng(seed, "temporal.mean_conv.w")),
        "temporal.mean_conv.b": np.zeros(1),
        "temporal.mix.w_row": xavier_init((1,), 1, 1, named_rng(seed, "temporal.mix.w_row")),
        "temporal.mix.w_col": xavier_init((1,), 1, 1, named_rng(seed, "temporal.mix.w_col")),
        "temporal.mix.w_block": xavier_init((1,), 1, 1, named_rng(seed, "temporal.mix.w_block")),
    }
    for gate in GRU_GATES:
        params[f"temporal.gru.w_{gate}"] = xavier_init(
            (h, d_in), d_in, h, named_rng(seed, f"temporal.gru.w_{gate}")
        )
        params[f"temporal.gru.u_{gate}"] = xavier_init(
            (h, h), h, h, named_rng(seed, f"temporal.gru.u_{gate}")
        )
        params[f"temporal.gru.b_{gate}"] = np.zeros(h)
    return ParamSet(params)


def top_k_pool(batch_total: Array, x: Array, k: int) -> tuple[Array, Array]:
    """Select the K intervals with the largest batch totals.

    Ties prefer the smaller index; the selected indices come back in
    chronological order together with the matching slice of ``x``.
    """
    batch_total = np.asarray(batch_total, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if k > batch_total.shape[-1]:
        raise ConfigError(f"K={k} exceeds T={batch_total.shape[-1]}")
    order = np.argsort(-batch_total, kind="stable")[:k]
    idx = np.sort(order)
    return idx, x[idx]


def peak_indices(batch_totals: Array, k: int) -> Array:
    """Per-(user, day) top-K interval indices for a [U, D, T] totals tensor."""
    totals = np.asarray(batch_totals, dtype=np.float64)
    if k > totals.shape[-1]:
        raise ConfigError(f"K={k} exceeds T={totals.shape[-1]}")
    order = np.argsort(-totals, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def conv1d_same(x: Array, w: Array) -> Array:
    """Zero-padded stride-1 correlation along the last axis, single channel."""
    width = w.shape[0]
    pad = width // 2
    length = x.shape[-1]
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    out = np.zeros_like(x, dtype=np.float64)
    for j in range(width):
        out += w[j] * padded[..., j : j + length]
    return out


def conv1d_same_backward(x: Array, w: Array, d_out: Array) -> tuple[Array, Array]:
    """Gradients of conv1d_same w.r.t. the input and the kernel."""
    width = w.shape[0]
    pad = width // 2
    length = x.shape[-1]
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    d_padded = np.zeros_like(padded)
    d_w = np.zeros_like(w)
    for j in range(width):
        d_padded[..., j : j + length] += w[j] * d_out
        d_w[j] = np.sum(d_out * padded[..., j : j + length])
    d_x = d_padded[..., pad : pad + length]
    return d_x, d_w


def peak_conv(xk: Array, params: ParamSet) -> Array:
    """ReLU of the peak-branch convolution over a length-K series."""
    w = params.params["temporal.peak_conv.w"]
    b = params.params["temporal.peak_conv.b"][0]
    return relu(conv1d_same(np.asarray(xk, dtype=np.float64), w) + b)


def mean_conv(x: Array, params: ParamSet) -> Array:
    """ReLU of the mean-branch convolution over a length-T series."""
    w = params.params["temporal.mean_conv.w"]
    b = params.params["temporal.mean_conv.b"][0]
    return relu(conv1d_same(np.asarray(x, dtype=np.float64), w) + b)


def _pools_forward(ymc: Array, cfg: TemporalConfig):
    """Row/column/block max pools over the reshaped [N, T] activations."""
    n = ymc.shape[0]
    row = ymc.reshape(n, cfg.r_row, cfg.r_col)
    yr = row.max(axis=2)
    am_row = row.argmax(axis=2)

    col = ymc.reshape(n, cfg.c_row, cfg.c_col)
    yc = col.max(axis=1)
    am_col = col.argmax(axis=1)

    tiles = (
        ymc.reshape(n, cfg.b_row1, cfg.b_row2, cfg.b_col1, cfg.b_col2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(n, cfg.b_row1, cfg.b_col1, cfg.b_row2 * cfg.b_col2)
    )
    yb = tiles.max(axis=3).reshape(n, cfg.k)
    am_block = tiles.argmax(axis=3).reshape(n, cfg.k)
    return yr, yc, yb, (am_row, am_col, am_block)


def _pools_backward(d_yr, d_yc, d_yb, argmaxes, cfg: TemporalConfig) -> Array:
    """Route pooled gradients back to their argmax positions in [N, T]."""
    am_row, am_col, am_block = argmaxes
    n = d_yr.shape[0]
    d_ymc = np.zeros((n, cfg.t))
    rows = np.arange(n)[:, None]

    ks = np.arange(cfg.k)[None, :]
    np.add.at(d_ymc, (rows, ks * cfg.r_col + am_row), d_yr)
    np.add.at(d_ymc, (rows, am_col * cfg.c_col + ks), d_yc)

    tile_i = (ks // cfg.b_col1).astype(np.int64)
    tile_j = (ks % cfg.b_col1).astype(np.int64)
    within_r = am_block // cfg.b_col2
    within_c = am_block % cfg.b_col2
    flat = (tile_i * cfg.b_row2 + within_r) * (cfg.b_col1 * cfg.b_col2) + tile_j * cfg.b_col2 + within_c
    np.add.at(d_ymc, (rows, flat), d_yb)
    return d_ymc


def pool_mix(ymc: Array, cfg: TemporalConfig, w_row: float, w_col: float, w_block: float) -> Array:
    """Weighted sum of the three max pools for one length-T activation."""
    ymc = np.asarray(ymc, dtype=np.float64).reshape(1, cfg.t)
    yr, yc, yb, _ = _pools_forward(ymc, cfg)
    return (w_row * yr + w_col * yc + w_block * yb)[0]


def gru_step(c: Array, r_prev: Array, params: ParamSet) -> Array:
    """Single GRU update: next state from the concat(YP, YM) day input."""
    out, _ = _gru_forward(
        np.asarray(c, dtype=np.float64).reshape(1, -1),
        np.asarray(r_prev, dtype=np.float64).reshape(1, -1),
        params.params,
    )
    return out[0]


def _gru_forward(c: Array, r_prev: Array, p: dict[str, Array]):
    z = sigmoid(c @ p["temporal.gru.w_z"].T + r_prev @ p["temporal.gru.u_z"].T + p["temporal.gru.b_z"])
    r = sigmoid(c @ p["temporal.gru.w_r"].T + r_prev @ p["temporal.gru.u_r"].T + p["temporal.gru.b_r"])
    cand = np.tanh(
        c @ p["temporal.gru.w_h"].T + (r * r_prev) @ p["temporal.gru.u_h"].T + p["temporal.gru.b_h"]
    )
    # convex combination keeps (1 - z) on the carried state
    r_next = (1.0 - z) * r_prev + z * cand
    return r_next, (c, r_prev, z, r, cand)


def _gru_backward(d_next: Array, cache, p: dict[str, Array], grads: dict[str, Array]):
    c, r_prev, z, r, cand = cache
    d_z = d_next * (cand - r_prev)
    d_cand = d_next * z
    d_r_prev = d_next * (1.0 - z)

    d_ah = d_cand * (1.0 - cand * cand)
    grads["temporal.gru.w_h"] += d_ah.T @ c
    grads["temporal.gru.u_h"] += d_ah.T @ (r * r_prev)
    grads["temporal.gru.b_h"] += d_ah.sum(axis=0)
    d_c = d_ah @ p["temporal.gru.w_h"]
    d_rr = d_ah @ p["temporal.gru.u_h"]
    d_r = d_rr * r_prev
    d_r_prev += d_rr * r

    d_ar = d_r * r * (1.0 - r)
    grads["temporal.gru.w_r"] += d_ar.T @ c
    grads["temporal.gru.u_r"] += d_ar.T @ r_prev
    grads["temporal.gru.b_r"] += d_ar.sum(axis=0)
    d_c += d_ar @ p["temporal.gru.w_r"]
    d_r_prev += d_ar @ p["temporal.gru.u_r"]

    d_az = d_z * z * (1.0 - z)
    grads["temporal.gru.w_z"] += d_az.T @ c
    grads["temporal.gru.u_z"] += d_az.T @ r_prev
    grads["temporal.gru.b_z"] += d_az.sum(axis=0)
    d_c += d_az @ p["temporal.gru.w_z"]
    d_r_prev += d_az @ p["temporal.gru.u_z"]
    return d_c, d_r_prev


def temporal_forward_many(xs: Array, cfg: TemporalConfig, params: ParamSet, peak_idx: Array):
    """Run a [B, U, D, T] batch through the temporal layers.

    ``peak_idx`` holds the per-(user, day) top-K interval indices shared by
    every entity in the batch. Returns [B, U, H] final states plus the cache
    consumed by :func:`temporal_backward_many`.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 4:
        raise NumericsError(f"expected [B, U, D, T] input, got shape {xs.shape}")
    b, u, d, t = xs.shape
    if (u, d, t) != (peak_idx.shape[0], peak_idx.shape[1], cfg.t) or d != cfg.days:
        raise NumericsError("input shape disagrees with config/peak indices")
    p = params.params
    n = b * u
    rows = xs.reshape(n, d, t)
    idx_rows = np.broadcast_to(peak_idx, (b, u, d, cfg.k)).reshape(n, d, cfg.k)

    state = np.zeros((n, cfg.hidden))
    day_caches = []
    for day in range(d):
        xd = rows[:, day, :]
        xk = np.take_along_axis(xd, idx_rows[:, day, :], axis=1)
        yp = relu(conv1d_same(xk, p["temporal.peak_conv.w"]) + p["temporal.peak_conv.b"][0])
        ymc = relu(conv1d_same(xd, p["temporal.mean_conv.w"]) + p["temporal.mean_conv.b"][0])
        yr, yc, yb, argmaxes = _pools_forward(ymc, cfg)
        ym = (
            p["temporal.mix.w_row"][0] * yr
            + p["temporal.mix.w_col"][0] * yc
            + p["temporal.mix.w_block"][0] * yb
        )
        c = np.concatenate([yp, ym], axis=1)
        state, gru_cache = _gru_forward(c, state, p)
        day_caches.append(
            dict(xd=xd, xk=xk, yp=yp, ymc=ymc, yr=yr, yc=yc, yb=yb, argmaxes=argmaxes, gru=gru_cache)
        )
    cache = dict(cfg=cfg, params=params, shape=(b, u, d, t), idx_rows=idx_rows, days=day_caches)
    return state.reshape(b, u, cfg.hidden), cache


def temporal_backward_many(cache, d_out: Array):
    """Gradients of the batched temporal forward pass.

    Returns (parameter gradients, gradient w.r.t. the [B, U, D, T] inputs).
    The top-K selection is treated as constant.
    """
    cfg: TemporalConfig = cache["cfg"]
    p = cache["params"].params
    b, u, d, t = cache["shape"]
    n = b * u
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    d_rows = np.zeros((n, d, t))
    d_state = np.asarray(d_out, dtype=np.float64).reshape(n, cfg.hidden).copy()

    for day in reversed(range(d)):
        day_cache = cache["days"][day]
        d_c, d_state = _gru_backward(d_state, day_cache["gru"], p, grads)
        d_yp = d_c[:, : cfg.k]
        d_ym = d_c[:, cfg.k :]

        yr, yc, yb = day_cache["yr"], day_cache["yc"], day_cache["yb"]
        grads["temporal.mix.w_row"][0] += np.sum(d_ym * yr)
        grads["temporal.mix.w_col"][0] += np.sum(d_ym * yc)
        grads["temporal.mix.w_block"][0] += np.sum(d_ym * yb)
        d_ymc = _pools_backward(
            p["temporal.mix.w_row"][0] * d_ym,
            p["temporal.mix.w_col"][0] * d_ym,
            p["temporal.mix.w_block"][0] * d_ym,
            day_cache["argmaxes"],
            cfg,
        )

        d_ymc_pre = d_ymc * (day_cache["ymc"] > 0)
        d_xd, d_wm = conv1d_same_backward(day_cache["xd"], p["temporal.mean_conv.w"], d_ymc_pre)
        grads["temporal.mean_conv.w"] += d_wm
        grads["temporal.mean_conv.b"][0] += d_ymc_pre.sum()

        d_yp_pre = d_yp * (day_cache["yp"] > 0)
        d_xk, d_wp = conv1d_same_backward(day_cache["xk"], p["temporal.peak_conv.w"], d_yp_pre)
        grads["temporal.peak_conv.w"] += d_wp
        grads["temporal.peak_conv.b"][0] += d_yp_pre.sum()

        d_rows[:, day, :] += d_xd
        np.add.at(d_rows[:, day, :], (np.arange(n)[:, None], cache["idx_rows"][:, day, :]), d_xk)

    return grads, d_rows.reshape(b, u, d, t)


def temporal_forward(x: Array, cfg: TemporalConfig, params: ParamSet, batch_totals: Array):
    """Single-entity forward: [U, D, T] requests -> [U, H] final GRU states."""
    x = np.asarray(x, dtype=np.float64)
    idx = peak_indices(np.asarray(batch_totals, dtype=np.float64), cfg.k)
    out, cache = temporal_forward_many(x[None, ...], cfg, params, idx)
    return out[0], cache


def temporal_backward(cache, d_out: Array):
    """Single-entity backward matching :func:`temporal_forward`."""
    grads, d_x = temporal_backward_many(cache, np.asarray(d_out, dtype=np.float64)[None, ...])
    return grads, d_x[0]
