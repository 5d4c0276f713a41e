"""Experiment configuration as flat ``section.key = value`` text.

Each section is one module's dataclass. Unknown sections or keys are
rejected. The config hash is the SHA-256 of the canonical serialisation
(every key, sorted, defaults included), so two configs that differ only in
layout or omitted defaults hash the same.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..asv import AsvConfig
from ..dsp import ASV_DSP, DspConfig
from ..feedback import FeedbackConfig
from ..ppg import PpgConfig
from ..vcnet import VcNetConfig
from .corpus import ToyCorpusSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    enroll_utterances: int = 10
    bins: int = 30


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # relative paths resolve against the run directory
    manifest: str = "corpus/manifest.tsv"


@dataclass(frozen=True)
class ExperimentConfig:
    dsp: DspConfig = DspConfig()
    asv_dsp: DspConfig = ASV_DSP
    asv: AsvConfig = AsvConfig()
    ppg: PpgConfig = PpgConfig()
    vcnet: VcNetConfig = VcNetConfig()
    # only the static log-mel block reaches the vocoder, so only it is probed
    feedback: FeedbackConfig = FeedbackConfig(probe_dims=80)
    eval: EvalConfig = EvalConfig()
    corpus: ToyCorpusSpec = ToyCorpusSpec()
    run: RunConfig = RunConfig()

    @property
    def asv_full(self) -> AsvConfig:
        """Verifier config with its own front end attached."""
        return replace(self.asv, dsp=self.asv_dsp)

    def items(self):
        for section in fields(self):
            obj = getattr(self, section.name)
            for f in fields(obj):
                if section.name == "asv" and f.name == "dsp":
                    continue
                yield f"{section.name}.{f.name}", getattr(obj, f.name)

    def dumps(self) -> str:
        return "".join(f"{key} = {_format(value)}\n" for key, value in sorted(self.items()))

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        sections = {s.name: {} for s in fields(self)}
        for key, raw in overrides.items():
            section, _, name = key.partition(".")
            if section not in sections:
                raise ConfigError(f"unknown config section {section!r} in {key!r}")
            current = getattr(self, section)
            valid = {f.name: f for f in fields(current)}
            if section == "asv":
                valid.pop("dsp")
            if name not in valid:
                raise ConfigError(f"unknown config key {key!r}")
            sections[section][name] = _coerce(raw, getattr(current, name), key)
        try:
            return replace(self, **{s: replace(getattr(self, s), **kv) for s, kv in sections.items() if kv})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw, default, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key = key.strip()
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = value
    return (base or ExperimentConfig()).with_overrides(overrides)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
