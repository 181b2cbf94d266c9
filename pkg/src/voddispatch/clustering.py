"""Clustering network tail: L2 normalization, a 2-D autoencoder, and a
hierarchical block partition of the encoding square with stable indices.

The partition is a pure function of its construction arguments, so a video's
cluster depends only on its own encoder output -- never on batch mates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Array,
    NumericsError,
    ParamSet,
    l2_normalize,
    l2_normalize_backward,
    named_rng,
    relu,
    xavier_init,
)


class PartitionError(ValueError):
    """Invalid partition construction or assignment request."""


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Hierarchical intervals over (-1, 1) and their Cartesian block grid.

    Intervals are sorted by left endpoint and treated as half-open [left,
    right) during assignment; blocks are indexed row-major over x then y.
    """

    lefts: Array
    rights: Array
    ndh: int
    budget: int

    @property
    def n_intervals(self) -> int:
        return self.lefts.shape[0]

    @property
    def cluster_count(self) -> int:
        return self.n_intervals**2

    @property
    def centers_1d(self) -> Array:
        return (self.lefts + self.rights) / 2.0

    @property
    def widths_1d(self) -> Array:
        return self.rights - self.lefts

    def interval_index(self, coords: Array) -> Array:
        coords = np.asarray(coords, dtype=np.float64)
        if np.any(coords <= -1.0) or np.any(coords >= 1.0):
            raise PartitionError("coordinate outside the open square (-1, 1)^2")
        return np.searchsorted(self.lefts, coords, side="right") - 1

    def assign_points(self, points: Array) -> Array:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        ix = self.interval_index(points[:, 0])
        iy = self.interval_index(points[:, 1])
        return ix * self.n_intervals + iy

    def block_center(self, cluster: Array) -> Array:
        cluster = np.asarray(cluster)
        centers = self.centers_1d
        return np.stack(
            [centers[cluster // self.n_intervals], centers[cluster % self.n_intervals]], axis=-1
        )

    def block_area(self, cluster: Array) -> Array:
        cluster = np.asarray(cluster)
        widths = self.widths_1d
        return widths[cluster // self.n_intervals] * widths[cluster % self.n_intervals]

    def nearest_center(self, points: Array) -> tuple[Array, Array]:
        """Nearest block center per point (ties to the lowest block index)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        centers = self.centers_1d
        # squared distance separates per axis, so per-axis argmin suffices
        ix = np.abs(points[:, 0:1] - centers[None, :]).argmin(axis=1)
        iy = np.abs(points[:, 1:2] - centers[None, :]).argmin(axis=1)
        idx = ix * self.n_intervals + iy
        return idx, self.block_center(idx)

    def to_params(self) -> dict[str, Array]:
        return {
            "cluster.partition.lefts": self.lefts.copy(),
            "cluster.partition.rights": self.rights.copy(),
            "cluster.partition.meta": np.array([float(self.ndh), float(self.budget)]),
        }

    @classmethod
    def from_params(cls, params: dict[str, Array]) -> "BlockPartition":
        meta = params["cluster.partition.meta"].reshape(-1)
        return cls(
            lefts=np.asarray(params["cluster.partition.lefts"], dtype=np.float64).copy(),
            rights=np.asarray(params["cluster.partition.rights"], dtype=np.float64).copy(),
            ndh=int(meta[0]),
            budget=int(meta[1]),
        )


def build_block_partition(ndh: int, budget: int) -> BlockPartition:
    """Recursive right-side interval construction, mirrored onto (-1, 0).

    Starting from (0, 1), each round splits the current leftmost interval
    into NDH equal open pieces, keeps the piece nearest zero for the next
    round and adds the rest, until enough right-side intervals exist to
    cover the requested cluster budget after mirroring.
    """
    if budget < 4:
        raise PartitionError("cluster budget must be at least 4")
    if ndh < 2:
        raise PartitionError("NDH must be at least 2")
    target = 0.5 * budget**0.5
    right: list[tuple[float, float]] = []
    lo, hi = 0.0, 1.0
    while len(right) < target:
        width = (hi - lo) / ndh
        right.extend((lo + j * width, lo + (j + 1) * width) for j in range(1, ndh))
        hi = lo + width
    intervals = [(lo, hi)] + right
    intervals.extend((-r, -l) for l, r in list(intervals))
    intervals.sort(key=lambda iv: iv[0])
    lefts = np.array([iv[0] for iv in intervals])
    rights = np.array([iv[1] for iv in intervals])
    return BlockPartition(lefts=lefts, rights=rights, ndh=ndh, budget=budget)


def assign_cluster(point, partition: BlockPartition) -> int:
    """Block index of a single encoder output in (-1, 1)^2."""
    return int(partition.assign_points(np.asarray(point, dtype=np.float64).reshape(1, 2))[0])


def init_autoencoder(input_dim: int, hidden_sizes, seed: int, output_gain: float = 6.0) -> ParamSet:
    """Encoder input->hidden->2 (tanh head) and mirrored linear-output decoder.

    The final encoder layer is scaled by ``output_gain`` so initial encodings
    spread across the block hierarchy; started inside the finest central
    blocks, the quantization pull would freeze every video there.
    """
    hidden_sizes = list(hidden_sizes)
    enc_dims = [input_dim] + hidden_sizes + [2]
    dec_dims = [2] + hidden_sizes[::-1] + [input_dim]
    params: dict[str, Array] = {}
    for side, dims in (("enc", enc_dims), ("dec", dec_dims)):
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = xavier_init(
                (fan_out, fan_in), fan_in, fan_out, named_rng(seed, f"cluster.{side}.{i}.w")
            )
            if side == "enc" and i == len(dims) - 2:
                w = w * output_gain
            params[f"cluster.{side}.{i}.w"] = w
            params[f"cluster.{side}.{i}.b"] = np.zeros(fan_out)
    return ParamSet(params)


def _layer_names(params: dict[str, Array], side: str) -> list[str]:
    idx = sorted(
        int(name.split(".")[2])
        for name in params
        if name.startswith(f"cluster.{side}.") and name.endswith(".w")
    )
    return [f"cluster.{side}.{i}" for i in idx]


def autoencoder_forward(nt: Array, params: ParamSet):
    """Encode [B, F] rows to [B, 2] and decode back; returns (E, D_out, cache)."""
    p = params.params
    acts = {"enc": [], "dec": []}
    h = np.asarray(nt, dtype=np.float64)
    inputs = {"enc": [h], "dec": None}
    enc_layers = _layer_names(p, "enc")
    one = 1.0 - 1e-9  # keep saturated tanh outputs strictly inside the open square
    for li, name in enumerate(enc_layers):
        a = h @ p[f"{name}.w"].T + p[f"{name}.b"]
        h = np.clip(np.tanh(a), -one, one) if li == len(enc_layers) - 1 else relu(a)
        acts["enc"].append(h)
        inputs["enc"].append(h)
    e = h
    dec_layers = _layer_names(p, "dec")
    inputs["dec"] = [h]
    for li, name in enumerate(dec_layers):
        a = h @ p[f"{name}.w"].T + p[f"{name}.b"]
        h = a if li == len(dec_layers) - 1 else relu(a)
        acts["dec"].append(h)
        inputs["dec"].append(h)
    d_out = h
    cache = dict(params=params, inputs=inputs, acts=acts)
    return e, d_out, cache


def autoencoder_backward(cache, d_e_extra: Array, d_out_grad: Array):
    """Backprop through decoder then encoder.

    ``d_e_extra`` enters at the encoding (quantization-loss path) and
    ``d_out_grad`` at the reconstruction; returns (grads, d_nt).
    """
    p = cache["params"].params
    grads = {}
    dec_layers = _layer_names(p, "dec")
    enc_layers = _layer_names(p, "enc")

    d_h = np.asarray(d_out_grad, dtype=np.float64)
    for li in reversed(range(len(dec_layers))):
        name = dec_layers[li]
        out = cache["acts"]["dec"][li]
        d_a = d_h if li == len(dec_layers) - 1 else d_h * (out > 0)
        x_in = cache["inputs"]["dec"][li]
        grads[f"{name}.w"] = d_a.T @ x_in
        grads[f"{name}.b"] = d_a.sum(axis=0)
        d_h = d_a @ p[f"{name}.w"]

    d_h = d_h + np.asarray(d_e_extra, dtype=np.float64)
    for li in reversed(range(len(enc_layers))):
        name = enc_layers[li]
        out = cache["acts"]["enc"][li]
        d_a = d_h * (1.0 - out * out) if li == len(enc_layers) - 1 else d_h * (out > 0)
        x_in = cache["inputs"]["enc"][li]
        grads[f"{name}.w"] = d_a.T @ x_in
        grads[f"{name}.b"] = d_a.sum(axis=0)
        d_h = d_a @ p[f"{name}.w"]
    return grads, d_h


def cluster_forward(t_v: Array, params: ParamSet, partition: BlockPartition, omega: float):
    """Normalize temporal outputs, encode, decode, quantize, and assign.

    Accepts one [U, H] entity or a [B, U, H] batch. The per-video loss is
    half the squared reconstruction error plus ``omega`` times the squared
    distance to the nearest block center.
    """
    if omega < 0:
        raise NumericsError("omega must be nonnegative")
    t_v = np.asarray(t_v, dtype=np.float64)
    single = t_v.ndim == 2
    batch = t_v[None, ...] if single else t_v
    b = batch.shape[0]
    flat = batch.reshape(b, -1)
    nt = np.stack([l2_normalize(row) for row in flat])
    e, d_out, ae_cache = autoencoder_forward(nt, params)
    clusters = partition.assign_points(e)
    near_idx, near_centers = partition.nearest_center(e)
    recon = 0.5 * np.sum((nt - d_out) ** 2, axis=1)
    quant = omega * np.sum((e - near_centers) ** 2, axis=1)
    losses = recon + quant
    cache = dict(
        ae=ae_cache,
        flat=flat,
        nt=nt,
        e=e,
        d_out=d_out,
        near_centers=near_centers,
        omega=omega,
        shape=batch.shape,
        single=single,
    )
    result = dict(
        nt=nt,
        e=e,
        d_out=d_out,
        clusters=clusters,
        nearest=near_idx,
        losses=losses,
        loss=float(losses.sum()),
    )
    if single:
        result = dict(
            nt=nt[0],
            e=e[0],
            d_out=d_out[0],
            clusters=int(clusters[0]),
            nearest=int(near_idx[0]),
            losses=losses,
            loss=float(losses[0]),
        )
    return result, cache


def cluster_backward(cache, scale: float = 1.0):
    """Gradients of the summed per-video loss, scaled by ``scale``.

    The min-over-blocks term sends its gradient to the nearest center only.
    Returns (autoencoder grads, gradient w.r.t. the [.., U, H] input).
    """
    nt, e, d_out = cache["nt"], cache["e"], cache["d_out"]
    omega = cache["omega"]
    d_dout = scale * (d_out - nt)
    d_nt_direct = scale * (nt - d_out)
    d_e_quant = scale * 2.0 * omega * (e - cache["near_centers"])
    grads, d_nt_enc = autoencoder_backward(cache["ae"], d_e_quant, d_dout)
    d_nt = d_nt_direct + d_nt_enc
    d_flat = np.stack(
        [l2_normalize_backward(row, g) for row, g in zip(cache["flat"], d_nt)]
    )
    d_t = d_flat.reshape(cache["shape"])
    return grads, (d_t[0] if cache["single"] else d_t)
