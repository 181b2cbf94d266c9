"""Flat key=value run configuration: file plus command-line overrides.

Unknown keys are rejected; the fully resolved configuration is echoed into
the output directory for provenance.
"""
from __future__ import annotations

from .temporal import TemporalConfig
from .training import TrainConfig
from .worldgen import WorldConfig


class RunConfigError(ValueError):
    """Bad key, bad value, or unusable configuration."""


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "mode": "interleaved",
    "world.users": 8,
    "world.cdns": 3,
    "world.videos": 500,
    "world.days": 9,
    "world.t": 24,
    "world.k": 6,
    "world.peak_start": 17,
    "world.zipf_exponent": 1.0,
    "world.daily_uploads": 62,
    "world.profiles": 4,
    "world.peak_ratio": 7.0,
    "world.profile_contrast": 4.0,
    "world.pref_mix": 0.4,
    "world.upload_decay": 0.45,
    "world.requests_per_user_day": 300.0,
    "world.burstiness": 0.8,
    "world.cpt": 20.0,
    "temporal.hidden": 16,
    "temporal.conv_width": 3,
    "cluster.ndh": 2,
    "cluster.budget": 16,
    "cluster.omega": 0.1,
    "cluster.hidden": "64,16",
    "cluster.enc_gain": 6.0,
    "policy.hidden": "",
    "train.batch_size": 32,
    "train.policy_iters": 5000,
    "train.cluster_iters": 10000,
    "train.fetch_period": 200,
    "train.warmup": 200,
    "train.lr_temporal": 0.02,
    "train.lr_policy": 0.05,
    "train.lr_cluster": 0.05,
    "train.decay": 0.9999,
    "train.shuffle": True,
    "train.halves": False,
    "train.half_period": 200,
    "train.resume": False,
    "dispatch.n_per_cdn": 20,
    "dispatch.h": 2.0,
    "dispatch.p": 2,
    "dispatch.policy": "learned",
    "report.max_series": 400,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise RunConfigError(f"cannot parse value '{raw}' for key '{key}'") from None


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise RunConfigError(f"unknown configuration key '{key}'")
            self.values[key] = value

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise RunConfigError(f"unknown configuration key '{key}'")
        return self.values[key]

    def set_raw(self, key: str, raw: str) -> None:
        if key not in DEFAULTS:
            raise RunConfigError(f"unknown configuration key '{key}'")
        self.values[key] = _parse_value(key, raw)

    def int_list(self, key: str) -> tuple[int, ...]:
        raw = str(self[key]).strip()
        if not raw:
            return ()
        try:
            return tuple(int(part) for part in raw.split(","))
        except ValueError:
            raise RunConfigError(f"cannot parse integer list '{raw}' for '{key}'") from None

    @classmethod
    def from_file(cls, path: str | None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                with open(path) as fh:
                    lines = fh.readlines()
            except FileNotFoundError:
                raise RunConfigError(f"config file not found: {path}") from None
            for lineno, line in enumerate(lines, 1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise RunConfigError(f"{path}:{lineno}: expected key=value")
                key, _, raw = stripped.partition("=")
                cfg.set_raw(key.strip(), raw)
        for item in overrides:
            if "=" not in item:
                raise RunConfigError(f"override '{item}' must be key=value")
            key, _, raw = item.partition("=")
            cfg.set_raw(key.strip(), raw)
        return cfg

    def echo(self, path) -> None:
        with open(path, "w") as fh:
            for key in sorted(self.values):
                fh.write(f"{key}={self.values[key]}\n")

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            users=self["world.users"],
            cdns=self["world.cdns"],
            videos=self["world.videos"],
            days=self["world.days"],
            t=self["world.t"],
            k=self["world.k"],
            peak_start=self["world.peak_start"],
            zipf_exponent=self["world.zipf_exponent"],
            daily_uploads=self["world.daily_uploads"],
            profiles=self["world.profiles"],
            peak_ratio=self["world.peak_ratio"],
            profile_contrast=self["world.profile_contrast"],
            pref_mix=self["world.pref_mix"],
            upload_decay=self["world.upload_decay"],
            burstiness=self["world.burstiness"],
            requests_per_user_day=self["world.requests_per_user_day"],
            cpt=self["world.cpt"],
            seed=self["seed"],
        )

    def temporal_config(self) -> TemporalConfig:
        world = self.world_config()
        return TemporalConfig.make(
            t=world.t,
            k=world.k,
            days=world.days - 2,
            hidden=self["temporal.hidden"],
            conv_width=self["temporal.conv_width"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self["train.batch_size"],
            policy_iters=self["train.policy_iters"],
            cluster_iters=self["train.cluster_iters"],
            fetch_period=self["train.fetch_period"],
            warmup=self["train.warmup"],
            lr_temporal=self["train.lr_temporal"],
            lr_policy=self["train.lr_policy"],
            lr_cluster=self["train.lr_cluster"],
            decay=self["train.decay"],
            omega=self["cluster.omega"],
            cluster_budget=self["cluster.budget"],
            ndh=self["cluster.ndh"],
            shuffle=self["train.shuffle"],
            halves=self["train.halves"],
            half_period=self["train.half_period"],
            ae_hidden=self.int_list("cluster.hidden"),
            enc_gain=self["cluster.enc_gain"],
            head_hidden=self.int_list("policy.hidden"),
            seed=self["seed"],
        )
