"""Dense float64 primitives shared by every network module.

Activations, L2 normalization, Xavier initialization, the decayed MBGD step,
named parameter sets with checkpoint serialization, and a finite-difference
harness used to verify each hand-written backward pass.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

NORM_EPS = 1e-12
CHECKPOINT_FORMAT_VERSION = 1
_META_VERSION_KEY = "meta.version"


class NumericsError(ValueError):
    """Shape or usage violation in a numeric kernel."""


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def sigmoid(x: Array) -> Array:
    # split by sign to avoid overflow in exp for large |x|
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": np.tanh}


def apply_activation(x: Array, kind: str) -> Array:
    """Elementwise rectifier / sigmoid / hyperbolic tangent."""
    x = np.asarray(x, dtype=np.float64)
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise NumericsError(f"unknown activation '{kind}'") from None
    return fn(x)


def l2_normalize(v: Array) -> Array:
    """Scale by the global L2 norm; the zero tensor passes through unchanged."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.sum(v * v)))
    if norm <= NORM_EPS:
        return np.zeros_like(v)
    return v / norm


def l2_normalize_backward(v: Array, grad_out: Array) -> Array:
    """Gradient of l2_normalize; zero input propagates a zero gradient."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.sum(v * v)))
    if norm <= NORM_EPS:
        return np.zeros_like(v)
    y = v / norm
    return (grad_out - y * float(np.sum(grad_out * y))) / norm


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from a master seed and a stream name."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int.from_bytes(digest, "little")])
    )


def xavier_init(shape, fan_in: int, fan_out: int, rng) -> Array:
    """Uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise NumericsError("degenerate layer shape: fans must be positive")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float64)


@dataclass
class ParamSet:
    """Named map of parameter tensors; version bumps on every committed update."""

    params: dict[str, Array] = field(default_factory=dict)
    version: int = 0

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.params.items()}, self.version)

    def frozen(self) -> "ParamSet":
        out = self.copy()
        for v in out.params.values():
            v.setflags(write=False)
        return out

    def subset(self, prefix: str) -> "ParamSet":
        sub = {k: v for k, v in self.params.items() if k.startswith(prefix)}
        return ParamSet(sub, self.version)

    def merged_with(self, other: "ParamSet") -> "ParamSet":
        merged = dict(self.params)
        merged.update(other.params)
        return ParamSet(merged, max(self.version, other.version))


@dataclass
class OptimizerState:
    """Layer-wise learning rates with shared geometric decay per step."""

    rates: dict[str, float]
    decay: float = 1.0
    step: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise NumericsError("decay must lie in (0, 1]")
        for prefix, rate in self.rates.items():
            if rate <= 0.0:
                raise NumericsError(f"learning rate for '{prefix}' must be positive")

    def rate_for(self, name: str) -> float:
        best = None
        for prefix in self.rates:
            if name.startswith(prefix) and (best is None or len(prefix) > len(best)):
                best = prefix
        if best is None:
            raise NumericsError(f"no learning rate configured for parameter '{name}'")
        return self.rates[best] * self.decay**self.step


def mbgd_step(params: ParamSet, grads: dict[str, Array], opt: OptimizerState) -> ParamSet:
    """One decayed gradient-descent step; returns a new ParamSet, bumps opt.step."""
    unknown = set(grads) - set(params.params)
    if unknown:
        raise NumericsError(f"gradients for unknown parameters: {sorted(unknown)}")
    new = {}
    for name, value in params.params.items():
        g = grads.get(name)
        if g is None:
            new[name] = value.copy()
            continue
        if g.shape != value.shape:
            raise NumericsError(
                f"shape mismatch for '{name}': param {value.shape} vs grad {g.shape}"
            )
        new[name] = value - opt.rate_for(name) * g
        if not np.all(np.isfinite(new[name])):
            raise NumericsError(f"non-finite values in parameter '{name}' after step")
    opt.step += 1
    return ParamSet(new, params.version + 1)


def finite_difference_check(
    loss_grad_fn,
    params: ParamSet,
    h: float = 1e-5,
    max_coords_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_grad_fn(params) -> (loss, grads)`` must be pure and deterministic.
    Coordinates are subsampled per parameter when tensors are large.
    """
    loss0, grads = loss_grad_fn(params)
    if not np.isfinite(loss0):
        raise NumericsError("loss is non-finite at the evaluation point")
    rng = np.random.default_rng(seed)
    work = params.copy()
    worst = 0.0
    for name in sorted(grads):
        grad = np.asarray(grads[name], dtype=np.float64)
        flat_param = work.params[name].reshape(-1)
        n = flat_param.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for i in coords:
            orig = flat_param[i]
            flat_param[i] = orig + h
            lp, _ = loss_grad_fn(work)
            flat_param[i] = orig - h
            lm, _ = loss_grad_fn(work)
            flat_param[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericsError(f"non-finite loss while perturbing '{name}'")
            numeric = (lp - lm) / (2.0 * h)
            analytic = grad.reshape(-1)[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def checkpoint_bytes(params: ParamSet) -> bytes:
    """Serialize to the checkpoint wire format (little-endian, bit-exact)."""
    entries = dict(params.params)
    entries[_META_VERSION_KEY] = np.array([float(params.version)], dtype=np.float64)
    chunks = [struct.pack("<QQ", CHECKPOINT_FORMAT_VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params: ParamSet) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise NumericsError("truncated checkpoint file")
        out = data[offset : offset + n]
        offset += n
        return out

    fmt, count = struct.unpack("<QQ", take(16))
    if fmt != CHECKPOINT_FORMAT_VERSION:
        raise NumericsError(f"unsupported checkpoint format version {fmt}")
    entries: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        entries[name] = arr.reshape(dims) if dims else arr.reshape(())
    if offset != len(data):
        raise NumericsError("trailing bytes in checkpoint file")
    version_arr = entries.pop(_META_VERSION_KEY, None)
    version = int(version_arr.reshape(-1)[0]) if version_arr is not None else 0
    return ParamSet(entries, version)


def param_checksum(params: ParamSet) -> int:
    """CRC32 over the serialized form; embedded in published snapshots."""
    return zlib.crc32(checkpoint_bytes(params))
