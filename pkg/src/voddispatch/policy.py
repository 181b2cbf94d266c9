"""Policy network: cluster-level accumulation of request tensors, the
fully connected head mapping temporal embeddings to per-user dispatch
probabilities, and the pointwise squared-error ranking loss.
"""
from __future__ import annotations

import numpy as np

from .numerics import (
    Array,
    NumericsError,
    ParamSet,
    l2_normalize,
    l2_normalize_backward,
    named_rng,
    relu,
    sigmoid,
    xavier_init,
)
from .temporal import TemporalConfig, peak_indices, temporal_backward_many, temporal_forward_many


class EmptyTrainingSignal(ValueError):
    """No cluster has both a prediction and a usable target."""


def accumulate_by_cluster(videos, assignment) -> dict[int, Array]:
    """Elementwise-sum request tensors of videos sharing a cluster index."""
    out: dict[int, Array] = {}
    shape = None
    for video_id, tensor in videos:
        tensor = np.asarray(tensor, dtype=np.float64)
        if shape is None:
            shape = tensor.shape
        elif tensor.shape != shape:
            raise NumericsError(
                f"request tensor shape mismatch for '{video_id}': {tensor.shape} vs {shape}"
            )
        cluster = assignment[video_id]
        if cluster in out:
            out[cluster] = out[cluster] + tensor
        else:
            out[cluster] = tensor.copy()
    return out


def init_policy_head(users: int, hidden: int, seed: int, hidden_sizes=()) -> ParamSet:
    """Sigmoid-output head from the flattened [U, H] embedding to U probabilities."""
    dims = [users * hidden] + list(hidden_sizes) + [users]
    params: dict[str, Array] = {}
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        params[f"policy.{i}.w"] = xavier_init(
            (fan_out, fan_in), fan_in, fan_out, named_rng(seed, f"policy.{i}.w")
        )
        params[f"policy.{i}.b"] = np.zeros(fan_out)
    return ParamSet(params)


def _head_layers(params: dict[str, Array]) -> list[str]:
    idx = sorted(
        int(name.split(".")[1]) for name in params if name.startswith("policy.") and name.endswith(".w")
    )
    return [f"policy.{i}" for i in idx]


def policy_head_forward(t_c: Array, params: ParamSet):
    """Flattened embeddings [B, U, H] -> dispatch probabilities [B, U] in (0, 1)."""
    p = params.params
    b = t_c.shape[0]
    h = t_c.reshape(b, -1)
    layers = _head_layers(p)
    inputs = [h]
    acts = []
    for li, name in enumerate(layers):
        a = h @ p[f"{name}.w"].T + p[f"{name}.b"]
        h = sigmoid(a) if li == len(layers) - 1 else relu(a)
        acts.append(h)
        inputs.append(h)
    cache = dict(params=params, inputs=inputs, acts=acts, emb_shape=t_c.shape)
    return h, cache


def policy_head_backward(cache, d_up: Array):
    p = cache["params"].params
    layers = _head_layers(p)
    grads = {}
    d_h = np.asarray(d_up, dtype=np.float64)
    for li in reversed(range(len(layers))):
        name = layers[li]
        out = cache["acts"][li]
        if li == len(layers) - 1:
            d_a = d_h * out * (1.0 - out)
        else:
            d_a = d_h * (out > 0)
        grads[f"{name}.w"] = d_a.T @ cache["inputs"][li]
        grads[f"{name}.b"] = d_a.sum(axis=0)
        d_h = d_a @ p[f"{name}.w"]
    return grads, d_h.reshape(cache["emb_shape"])


def policy_forward_many(
    xas: Array,
    cfg: TemporalConfig,
    temporal_params: ParamSet,
    policy_params: ParamSet,
    peak_idx: Array | None = None,
):
    """Normalize accumulated tensors, run temporal layers, apply the head.

    ``xas`` is [B, U, D, T] (one row per cluster). When ``peak_idx`` is not
    supplied, the top-K intervals are derived from the normalized batch sums.
    """
    xas = np.asarray(xas, dtype=np.float64)
    b = xas.shape[0]
    flat = xas.reshape(b, -1)
    nxa = np.stack([l2_normalize(row) for row in flat]).reshape(xas.shape)
    if peak_idx is None:
        peak_idx = peak_indices(nxa.sum(axis=0), cfg.k)
    t_c, temporal_cache = temporal_forward_many(nxa, cfg, temporal_params, peak_idx)
    up, head_cache = policy_head_forward(t_c, policy_params)
    cache = dict(temporal=temporal_cache, head=head_cache, xas=xas, flat=flat)
    return up, cache


def policy_backward_many(cache, d_up: Array):
    """Gradients for the head and temporal params, plus d(loss)/d(raw inputs)."""
    head_grads, d_t_c = policy_head_backward(cache["head"], d_up)
    temporal_grads, d_nxa = temporal_backward_many(cache["temporal"], d_t_c)
    b = d_nxa.shape[0]
    d_flat = d_nxa.reshape(b, -1)
    d_xas = np.stack(
        [l2_normalize_backward(row, g) for row, g in zip(cache["flat"], d_flat)]
    ).reshape(cache["xas"].shape)
    grads = dict(temporal_grads)
    grads.update(head_grads)
    return grads, d_xas


def policy_forward(
    xa: Array,
    cfg: TemporalConfig,
    temporal_params: ParamSet,
    policy_params: ParamSet,
    batch_totals: Array | None = None,
):
    """Single-cluster forward: [U, D, T] accumulated requests -> UP in (0, 1)^U."""
    xa = np.asarray(xa, dtype=np.float64)
    peak_idx = None
    if batch_totals is not None:
        peak_idx = peak_indices(np.asarray(batch_totals, dtype=np.float64), cfg.k)
    up, cache = policy_forward_many(xa[None, ...], cfg, temporal_params, policy_params, peak_idx)
    return up[0], cache


def make_policy_target(day_slice: Array, peak_window) -> Array | None:
    """Per-user share of day-(D+1) requests inside the peak window.

    Returns None when the peak-window totals are all zero (the cluster is
    excluded from the loss).
    """
    day_slice = np.asarray(day_slice, dtype=np.float64)
    window = np.asarray(peak_window, dtype=np.int64)
    totals = day_slice[:, window].sum(axis=1)
    total = totals.sum()
    if total <= 0:
        return None
    return totals / total


def policy_loss(up: dict[int, Array], targets: dict[int, Array]):
    """Pointwise loss: half squared error per scored cluster.

    Returns (loss, per-cluster gradient w.r.t. UP). Clusters lacking a
    target are skipped; an empty overlap is an error.
    """
    common = sorted(set(up) & set(targets))
    if not common:
        raise EmptyTrainingSignal("empty training signal: no scored clusters")
    loss = 0.0
    grads: dict[int, Array] = {}
    for c in common:
        diff = np.asarray(up[c], dtype=np.float64) - np.asarray(targets[c], dtype=np.float64)
        loss += 0.5 * float(np.sum(diff * diff))
        grads[c] = diff
    return loss, grads
