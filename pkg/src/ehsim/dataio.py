"""Synthetic paired datasets and their on-disk format.

A dataset directory holds ``records.jsonl`` (a header line followed by one
record per line) and ``meta.json`` (sampling rates, generation settings,
group parameters).  Floats are written with 9 significant digits and the
writer is byte-deterministic.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import DomainError, EhsimError, ParseError, ShapeError
from .fit import TargetPair, zscore
from .integrate import (
    DEFAULT_FINE_FS,
    DEFAULT_WARMUP,
    ECG_FS,
    PPG_FS,
    WINDOW_SECONDS,
    Waveform,
    sample_modalities,
    simulate,
)
from .simcore import EcgParams, GaussianComponent, PhaseState, PpgParams, SimParams

log = logging.getLogger(__name__)

FORMAT = "ehsim-dataset"
VERSION = 1
RECORDS_FILE = "records.jsonl"
META_FILE = "meta.json"
ZSCORE_TOL = 1e-6


@dataclass(frozen=True)
class NoiseConfig:
    """Per-record perturbations.

    ``white_*`` and ``wander_amp`` are in units of the clean window's
    standard deviation; ``amp_jitter`` is the relative sd of each component
    amplitude; ``random_phase`` starts every record at a uniform phase.
    """

    white_ecg: float = 0.02
    white_ppg: float = 0.02
    wander_amp: float = 0.05
    wander_freq: float = 0.2
    amp_jitter: float = 0.05
    random_phase: bool = True

    def __post_init__(self):
        vals = [v for k, v in asdict(self).items() if k != "random_phase"]
        if min(vals) < 0:
            raise DomainError("noise settings must be non-negative")

    @classmethod
    def off(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, False)


@dataclass(frozen=True)
class DatasetRecord:
    group_id: str
    seed: int
    ppg: np.ndarray
    ecg: np.ndarray

    def validate(self, ecg_len=None, ppg_len=None):
        for name, x, n in (("ecg", self.ecg, ecg_len), ("ppg", self.ppg, ppg_len)):
            if n is not None and len(x) != n:
                raise ShapeError(f"{name} has {len(x)} samples, expected {n}")
            if not np.all(np.isfinite(x)):
                raise DomainError(f"{name} contains non-finite values")
            if abs(x.mean()) > ZSCORE_TOL or abs(x.std() - 1.0) > ZSCORE_TOL:
                raise DomainError(f"{name} is not z-scored")

    def target(self, ecg_fs=ECG_FS, ppg_fs=PPG_FS):
        return TargetPair(Waveform(self.ecg, ecg_fs), Waveform(self.ppg, ppg_fs), self.group_id)


@dataclass
class Dataset:
    records: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def ecg_fs(self):
        return self.meta.get("ecg_fs", ECG_FS)

    @property
    def ppg_fs(self):
        return self.meta.get("ppg_fs", PPG_FS)

    def targets(self):
        return [r.target(self.ecg_fs, self.ppg_fs) for r in self.records]

    def groups(self):
        return sorted({r.group_id for r in self.records})


def record_seed(master_seed, group_index, record_index):
    ss = np.random.SeedSequence([int(master_seed), int(group_index), int(record_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _jitter(params: SimParams, rng, sd):
    if sd == 0:
        return params

    def scale(comps):
        return {k: GaussianComponent(c.center, c.amplitude * (1 + sd * rng.standard_normal()), c.width)
                for k, c in comps.items()}

    ecg = EcgParams(scale(params.ecg.components), params.ecg.baseline, params.ecg.wander)
    ppg = PpgParams(scale(params.ppg.components), params.ppg.delta_pat, params.ppg.lambda_p,
                    params.ppg.baseline, params.ppg.wander)
    return SimParams(params.omega, ecg, ppg)


def _perturb(x, fs, rng, white, wander_amp, wander_freq):
    x = np.array(x, dtype=float)
    sd = x.std()
    if wander_amp:
        t = np.arange(len(x)) / fs
        x += wander_amp * sd * np.sin(2 * np.pi * wander_freq * t + rng.uniform(0, 2 * np.pi))
    if white:
        x += white * sd * rng.standard_normal(len(x))
    return x


def make_record(params: SimParams, group_id, seed, noise: NoiseConfig, duration=WINDOW_SECONDS,
                warmup=DEFAULT_WARMUP, fine_fs=DEFAULT_FINE_FS, ecg_fs=ECG_FS, ppg_fs=PPG_FS):
    rng = np.random.default_rng(seed)
    p = _jitter(params, rng, noise.amp_jitter)
    init = None
    if noise.random_phase:
        phi = rng.uniform(-np.pi, np.pi)
        init = (PhaseState(np.cos(phi), np.sin(phi)), p.ecg.baseline, p.ppg.baseline)
    traj = simulate(p, warmup + duration, fine_fs, init)
    e, g = sample_modalities(traj[int(round(warmup * fine_fs)):], ecg_fs, ppg_fs)
    ecg = _perturb(e.samples, ecg_fs, rng, noise.white_ecg, noise.wander_amp, noise.wander_freq)
    ppg = _perturb(g.samples, ppg_fs, rng, noise.white_ppg, noise.wander_amp, noise.wander_freq)
    return DatasetRecord(str(group_id), int(seed), zscore(ppg), zscore(ecg))


def gen_dataset(groups: Mapping[str, SimParams], n_per_group, noise: NoiseConfig | None = None,
                master_seed=0, duration=WINDOW_SECONDS, warmup=DEFAULT_WARMUP,
                fine_fs=DEFAULT_FINE_FS, ecg_fs=ECG_FS, ppg_fs=PPG_FS) -> Dataset:
    """Simulate ``n_per_group`` records per group; failed records are skipped and counted."""
    if not groups:
        raise DomainError("at least one group is required")
    if n_per_group < 1:
        raise DomainError("n_per_group must be >= 1")
    noise = noise or NoiseConfig()
    records, skipped = [], []
    for gi, (gid, params) in enumerate(groups.items()):
        for ri in range(n_per_group):
            seed = record_seed(master_seed, gi, ri)
            try:
                records.append(make_record(params, gid, seed, noise, duration, warmup,
                                           fine_fs, ecg_fs, ppg_fs))
            except EhsimError as exc:
                log.warning("record %s/%d skipped: %s", gid, ri, exc)
                skipped.append({"group_id": gid, "index": ri, "reason": str(exc)})
    meta = {
        "ecg_fs": ecg_fs, "ppg_fs": ppg_fs, "duration": duration, "warmup": warmup,
        "fine_fs": fine_fs, "master_seed": master_seed, "n_per_group": n_per_group,
        "noise": asdict(noise), "groups": {g: p.to_dict() for g, p in groups.items()},
        "skipped": skipped,
    }
    return Dataset(records, meta)


# -- serialization -------------------------------------------------------------

def _fmt(x):
    return "[" + ",".join(format(float(v), ".9g") for v in x) + "]"


def _record_line(r: DatasetRecord):
    return (f'{{"group_id":{json.dumps(r.group_id)},"seed":{r.seed},'
            f'"ppg":{_fmt(r.ppg)},"ecg":{_fmt(r.ecg)}}}')


def _header(n, ecg_fs, ppg_fs):
    return json.dumps({"format": FORMAT, "version": VERSION, "n_records": n,
                       "ecg_fs": ecg_fs, "ppg_fs": ppg_fs}, sort_keys=True)


def save_dataset(ds: Dataset, path):
    """Write ``records.jsonl`` and ``meta.json`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [_header(len(ds), ds.ecg_fs, ds.ppg_fs)] + [_record_line(r) for r in ds.records]
    (path / RECORDS_FILE).write_text("\n".join(lines) + "\n")
    meta = dict(ds.meta, n_records=len(ds))
    (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path, validate=True) -> Dataset:
    path = Path(path)
    meta_path = path / META_FILE
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    text = (path / RECORDS_FILE).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", line=1) from exc
    if header.get("format") != FORMAT:
        raise ParseError("not a dataset file", line=1)
    n = header.get("n_records")
    ecg_fs, ppg_fs = header.get("ecg_fs", ECG_FS), header.get("ppg_fs", PPG_FS)
    dur = meta.get("duration", WINDOW_SECONDS)
    ecg_len, ppg_len = int(round(dur * ecg_fs)), int(round(dur * ppg_fs))
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            doc = json.loads(line)
            rec = DatasetRecord(str(doc["group_id"]), int(doc["seed"]),
                                np.asarray(doc["ppg"], dtype=float), np.asarray(doc["ecg"], dtype=float))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"record {lineno - 1} is malformed ({exc})", line=lineno) from exc
        if validate:
            try:
                rec.validate(ecg_len, ppg_len)
            except (ShapeError, DomainError) as exc:
                raise ParseError(f"record {lineno - 1}: {exc}", line=lineno) from exc
        records.append(rec)
    if n is not None and len(records) != n:
        raise ParseError(f"expected {n} records, found {len(records)} (truncated?)",
                         line=len(records) + 2)
    meta.setdefault("ecg_fs", ecg_fs)
    meta.setdefault("ppg_fs", ppg_fs)
    return Dataset(records, meta)


def write_waveform_csv(path, samples):
    """One ``value`` column with shortest round-trip float text, so residual checks see exact samples."""
    with open(path, "w") as fh:
        fh.write("value\n")
        for v in samples:
            fh.write(repr(float(v)) + "\n")


def read_waveform_csv(path):
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError("empty waveform file", line=1)
    start = 1 if lines[0].strip().lower() == "value" else 0
    out = []
    for i, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        try:
            out.append(float(line.split(",")[-1]))
        except ValueError as exc:
            raise ParseError(f"not a number: {line!r}", line=i) from exc
    return np.asarray(out)
