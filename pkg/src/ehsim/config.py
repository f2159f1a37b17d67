"""Single-document JSON configuration with explicit defaults.

Sections: ``sim``, ``fit``, ``pae_weights``, ``flow`` and ``noise``.
``pae_weights.w_pat``, ``flow.lambda_e``/``lambda_p``, ``flow.K`` and
``flow.tau`` have no published values; their defaults are local choices.
``default_config()`` spells out every default so a dumped config is
self-documenting; ``load_config`` overlays a partial document on it.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

from .dataio import NoiseConfig
from .exceptions import ConfigError
from .fit import FitConfig
from .flow import DEFAULT_K, DEFAULT_LAMBDA_E, DEFAULT_LAMBDA_P
from .integrate import DEFAULT_FINE_FS, DEFAULT_WARMUP, ECG_FS, PPG_FS, WINDOW_SECONDS
from .latentlosses import PaeWeights
from .metrics import AMP_FRAC, DERIV_FRAC


@dataclass(frozen=True)
class SimSection:
    duration: float = WINDOW_SECONDS
    warmup: float = DEFAULT_WARMUP
    fine_fs: int = DEFAULT_FINE_FS
    ecg_fs: int = ECG_FS
    ppg_fs: int = PPG_FS
    hr_range: tuple = (55.0, 95.0)

    @property
    def ecg_len(self):
        return int(round(self.duration * self.ecg_fs))

    @property
    def ppg_len(self):
        return int(round(self.duration * self.ppg_fs))


@dataclass(frozen=True)
class FlowSection:
    down_factor: int = 20
    ppg_down_factor: int = 10
    kind: str = "affine"
    degree: int | None = None
    time_degree: int = 1
    inverse_time: bool = False
    ridge: float = 1e-3
    time_samples: int = 4
    seed: int = 0
    n_steps: int = DEFAULT_K
    K: int = DEFAULT_K
    lambda_e: float = DEFAULT_LAMBDA_E
    lambda_p: float = DEFAULT_LAMBDA_P
    mapper_ridge: float = 1e-3
    crop_pre: float = 0.20
    crop_post: float = 0.60
    tau: float = 0.1
    phase_temperature: float = 0.05
    deriv_frac: float = DERIV_FRAC
    amp_frac: float = AMP_FRAC


@dataclass(frozen=True)
class Config:
    sim: SimSection = field(default_factory=SimSection)
    fit: FitConfig = field(default_factory=FitConfig)
    pae_weights: PaeWeights = field(default_factory=PaeWeights)
    flow: FlowSection = field(default_factory=FlowSection)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        base = default_config().to_dict()
        unknown = set(doc) - set(base)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        merged = copy.deepcopy(base)
        for sec, vals in doc.items():
            if not isinstance(vals, dict):
                raise ConfigError(f"section {sec!r} must be an object")
            bad = set(vals) - set(base[sec])
            if bad:
                raise ConfigError(f"unknown keys in {sec!r}: {sorted(bad)}")
            for k, v in vals.items():
                if isinstance(v, dict) and isinstance(merged[sec].get(k), dict):
                    merged[sec][k].update(v)
                else:
                    merged[sec][k] = v
        try:
            sim = dict(merged["sim"])
            sim["hr_range"] = tuple(sim["hr_range"])
            return cls(
                sim=SimSection(**sim),
                fit=FitConfig.from_dict(merged["fit"]),
                pae_weights=PaeWeights(**merged["pae_weights"]),
                flow=FlowSection(**merged["flow"]),
                noise=NoiseConfig(**merged["noise"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def default_config() -> Config:
    return Config()


def load_config(path=None) -> Config:
    if path is None:
        return default_config()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return Config.from_dict(doc)
