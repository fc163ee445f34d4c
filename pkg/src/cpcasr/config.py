"""Flat ``key = value`` run configuration.

Blank lines and lines starting with ``#`` are ignored.  Every key has a
default; unknown keys and out-of-range values are collected and reported
together.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .corpus import SynthSpec
from .cpc import CpcConfig
from .errors import ConfigError, IoError
from .features import MfccConfig
from .probe import TrainRegime


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA = {
    "experiment": (str, "run"),
    "out_dir": (str, "runs/run"),
    "seed": (int, 42),
    "sample_rate_hz": (int, 16000),
    # corpus
    "corpus_dir": (str, ""),
    "corpus_name": (str, "synth"),
    "train_manifest": (str, ""),
    "dev_manifest": (str, ""),
    "test_manifest": (str, ""),
    "train_limit": (int, 0),
    "train_frac": (float, 0.6),
    "dev_frac": (float, 0.1),
    # synthetic corpus
    "n_phones": (int, 3),
    "n_utterances": (int, 200),
    "phones_per_utt_min": (int, 3),
    "phones_per_utt_max": (int, 6),
    "phone_dur_ms_min": (int, 40),
    "phone_dur_ms_max": (int, 120),
    "noise_std": (float, 0.02),
    "n_speakers": (int, 4),
    # MFCC
    "frame_ms": (float, 25.0),
    "hop_ms": (float, 10.0),
    "n_fft": (int, 512),
    "n_mels": (int, 40),
    "n_ceps": (int, 13),
    "fmin_hz": (float, 0.0),
    "fmax_hz": (str, "nyquist"),
    "log_floor": (float, 1e-10),
    # CPC
    "enc_channels": (_ints, (64, 64, 64)),
    "enc_kernels": (_ints, (10, 8, 4)),
    "enc_strides": (_ints, (5, 4, 2)),
    "latent_dim": (int, 64),
    "context_dim": (int, 128),
    "K": (int, 12),
    "n_negatives": (int, 10),
    "epochs": (int, 200),
    "batch_utts": (int, 8),
    "window_samples": (int, 8000),
    "lr": (float, 1e-3),
    "init": (str, ""),
    # probe
    "features": (str, "mfcc"),
    "regime": (str, "frozen"),
    "probe_epochs": (int, 30),
    "probe_lr": (float, 1e-3),
    "stack_width": (int, 8),
    "stack_stride": (int, 8),
    "backbone": (str, ""),
    "probe": (str, ""),
    # report labels
    "model_name": (str, ""),
    "pretrain_desc": (str, ""),
    "budget_desc": (str, ""),
    "layout": (str, "table1"),
}

FEATURES = {"mfcc": "mfcc", "cpc": "cpc_context", "cpc_context": "cpc_context"}


def parse_config_text(text: str) -> dict[str, str]:
    raw, problems = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (p.strip() for p in s.split("=", 1))
        if key in raw:
            problems.append(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    if problems:
        raise ConfigError(problems)
    return raw


def read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc
    return parse_config_text(text)


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    @property
    def feature_kind(self) -> str:
        return FEATURES[self.values["features"]]

    def synth_spec(self) -> SynthSpec:
        v = self.values
        return SynthSpec(
            n_phones=v["n_phones"],
            n_utterances=v["n_utterances"],
            phones_per_utt=(v["phones_per_utt_min"], v["phones_per_utt_max"]),
            phone_dur_ms=(v["phone_dur_ms_min"], v["phone_dur_ms_max"]),
            sample_rate_hz=v["sample_rate_hz"],
            noise_std=v["noise_std"],
            n_speakers=v["n_speakers"],
            seed=v["seed"],
        )

    def mfcc_config(self) -> MfccConfig:
        v = self.values
        fmax = None if v["fmax_hz"] == "nyquist" else float(v["fmax_hz"])
        return MfccConfig(v["frame_ms"], v["hop_ms"], v["n_fft"], v["n_mels"], v["n_ceps"], v["fmin_hz"], fmax, v["log_floor"])

    def cpc_config(self) -> CpcConfig:
        v = self.values
        return CpcConfig(
            enc_channels=v["enc_channels"],
            enc_kernels=v["enc_kernels"],
            enc_strides=v["enc_strides"],
            latent_dim=v["latent_dim"],
            context_dim=v["context_dim"],
            K=v["K"],
            n_negatives=v["n_negatives"],
            epochs=v["epochs"],
            batch_utts=v["batch_utts"],
            window_samples=v["window_samples"],
            lr=v["lr"],
            seed=v["seed"],
            sample_rate_hz=v["sample_rate_hz"],
        )

    def regime(self) -> TrainRegime:
        v = self.values
        return TrainRegime(v["regime"], v["probe_epochs"], v["probe_lr"], v["seed"])

    def render(self) -> str:
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(map(str, val))
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def resolve(file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults, file values and overrides; validate everything in one pass."""
    raw = dict(file_values or {})
    raw.update(overrides or {})
    problems = [f"unknown key {k!r}" for k in raw if k not in SCHEMA]
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key not in raw:
            values[key] = default
            continue
        try:
            values[key] = parse(str(raw[key]))
        except ValueError as exc:
            problems.append(f"{key}: cannot parse {raw[key]!r} ({exc})")
            values[key] = default
    problems += _check_ranges(values)
    if problems:
        raise ConfigError(problems)
    return RunConfig(values)


def _check_ranges(v) -> list[str]:
    problems = []
    if v["sample_rate_hz"] <= 0:
        problems.append("sample_rate_hz must be positive")
    if not (0 < v["train_frac"] and 0 < v["dev_frac"] and v["train_frac"] + v["dev_frac"] < 1):
        problems.append("need 0 < train_frac, dev_frac and train_frac + dev_frac < 1")
    if v["train_limit"] < 0:
        problems.append("train_limit must be >= 0")
    if v["features"] not in FEATURES:
        problems.append(f"features must be one of mfcc, cpc (got {v['features']!r})")
    if v["regime"] not in ("frozen", "finetune"):
        problems.append(f"regime must be frozen or finetune (got {v['regime']!r})")
    if v["layout"] not in ("table1", "table2"):
        problems.append(f"layout must be table1 or table2 (got {v['layout']!r})")
    if v["probe_epochs"] < 0 or v["probe_lr"] <= 0:
        problems.append("probe_epochs must be >= 0 and probe_lr > 0")
    if v["stack_width"] < 1 or v["stack_stride"] < 1:
        problems.append("stack_width and stack_stride must be >= 1")
    if v["fmax_hz"] != "nyquist":
        try:
            float(v["fmax_hz"])
        except ValueError:
            problems.append("fmax_hz must be a number or 'nyquist'")
            return problems
    cfg = RunConfig(v)
    try:
        cfg.synth_spec()
    except ValueError as exc:
        problems.append(f"synthetic corpus: {exc}")
    problems += [f"mfcc: {p}" for p in cfg.mfcc_config().validate(v["sample_rate_hz"])]
    problems += [f"cpc: {p}" for p in cfg.cpc_config().validate()]
    return problems
