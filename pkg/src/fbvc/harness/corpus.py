"""Synthetic multi-speaker corpus from a seeded source-filter model.

Every speaker shares one phone inventory (formant targets for vowel-like
phones, band-limited noise for fricatives). Speakers differ in pitch,
vocal-tract length (a formant scale factor), formant bandwidths, spectral
tilt, a fixed extra resonance and breathiness, which is what a verifier can
latch onto.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from ..dsp import Waveform, write_wav
from .manifest import Manifest, ManifestRow

# formant targets (Hz) for a reference vocal tract
VOWELS = {
    "aa": (730, 1090, 2440), "iy": (270, 2290, 3010), "uw": (300, 870, 2240),
    "eh": (530, 1840, 2480), "ao": (570, 840, 2410), "ae": (660, 1720, 2410),
    "er": (490, 1350, 1690), "ah": (520, 1190, 2390), "m": (250, 1200, 2300),
}
FRICATIVES = {"s": (4200, 7200), "sh": (2400, 5200)}
PHONES = list(VOWELS) + list(FRICATIVES)


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_male_targets: int = 3
    n_female_targets: int = 3
    train_per_target: int = 100
    validation_per_target: int = 20
    n_imposters: int = 10
    utterances_per_imposter: int = 10
    n_background: int = 8
    utterances_per_background: int = 10
    duration: float = 1.0
    sample_rate: int = 16000
    seed: int = 0

    @property
    def n_targets(self) -> int:
        return self.n_male_targets + self.n_female_targets


@dataclass(frozen=True)
class SpeakerParams:
    speaker_id: str
    sex: str
    f0: float
    tract_scale: float
    bandwidth_scale: float
    tilt: float
    extra_formant: float
    extra_gain: float
    breathiness: float


def draw_speaker(speaker_id: str, sex: str, rng: np.random.Generator) -> SpeakerParams:
    if sex == "m":
        f0, scale = rng.uniform(90, 140), rng.uniform(0.86, 1.0)
    else:
        f0, scale = rng.uniform(175, 245), rng.uniform(1.08, 1.24)
    return SpeakerParams(
        speaker_id, sex, f0, scale,
        bandwidth_scale=rng.uniform(0.7, 1.5),
        tilt=rng.uniform(0.55, 0.92),
        extra_formant=rng.uniform(2600, 3900),
        extra_gain=rng.uniform(0.0, 1.0),
        breathiness=rng.uniform(0.01, 0.12),
    )


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def _bandpass_noise(n: int, lo: float, hi: float, sr: int, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > min(hi, sr / 2 - 1))] = 0
    out = np.fft.irfft(spec, n)
    return out / (np.std(out) + 1e-12)


def synthesize_utterance(spk: SpeakerParams, duration: float, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration * sr))
    edge = int(0.04 * sr)
    body = n - 2 * edge

    # glottal source: impulse train on a slowly varying pitch contour
    t = np.arange(body) / sr
    contour = spk.f0 * (1 + 0.06 * np.sin(2 * np.pi * rng.uniform(1.5, 4) * t + rng.uniform(0, 2 * np.pi))
                        - 0.08 * t / max(duration, 1e-3))
    contour *= 1 + 0.01 * rng.standard_normal(body)
    phase = np.cumsum(contour) / sr
    pulses = np.diff(np.floor(phase), prepend=0.0)
    voiced_src = lfilter([1.0], [1.0, -1.8, 0.81], pulses)  # glottal pulse shaping
    voiced_src /= np.std(voiced_src) + 1e-12
    voiced_src += spk.breathiness * 4.0 * rng.standard_normal(body)

    out = np.zeros(body)
    pos = 0
    fade = int(0.01 * sr)
    while pos < body:
        seg_len = min(int(rng.uniform(0.07, 0.16) * sr), body - pos)
        phone = PHONES[rng.integers(len(PHONES))]
        seg_end = min(body, pos + seg_len + fade)
        if phone in VOWELS:
            seg = voiced_src[pos:seg_end]
            for k, formant in enumerate(VOWELS[phone]):
                bw = (60 + 30 * k) * spk.bandwidth_scale
                seg = _resonator(seg, formant * spk.tract_scale, bw, sr) * (1.0 if k == 0 else 0.7)
            seg = seg * (0.5 if phone == "m" else 1.0)
        else:
            lo, hi = FRICATIVES[phone]
            seg = 0.3 * _bandpass_noise(seg_end - pos, lo * spk.tract_scale, hi * spk.tract_scale, sr, rng)
        win = np.ones(seg_end - pos)
        ramp = min(fade, len(win) // 2)
        if ramp:
            win[:ramp] = np.linspace(0, 1, ramp, endpoint=False)
            win[-ramp:] = np.linspace(1, 0, ramp, endpoint=False)
        seg = seg / (np.std(seg) + 1e-12)
        out[pos:seg_end] += seg * win
        pos += seg_len

    # speaker colouring: extra resonance and spectral tilt
    out = out + spk.extra_gain * _resonator(out, spk.extra_formant, 150.0, sr) * 3.0
    out = lfilter([1.0 - spk.tilt], [1.0, -spk.tilt], out)
    out /= np.std(out) + 1e-12
    out *= 0.1 * 10 ** (rng.uniform(-3, 3) / 20)

    full = 1e-4 * rng.standard_normal(n)
    full[edge : edge + body] += out
    return np.clip(full, -0.99, 0.99)


def speaker_roster(spec: ToyCorpusSpec, rng: np.random.Generator) -> dict:
    roles = {}
    for i in range(spec.n_male_targets):
        roles[f"tgt_m{i + 1:02d}"] = ("target", "m")
    for i in range(spec.n_female_targets):
        roles[f"tgt_f{i + 1:02d}"] = ("target", "f")
    for i in range(spec.n_imposters):
        roles[f"imp{i + 1:02d}"] = ("imposter", "m" if i % 2 == 0 else "f")
    for i in range(spec.n_background):
        roles[f"bg{i + 1:02d}"] = ("background", "m" if i % 2 == 0 else "f")
    return {spk: (role, draw_speaker(spk, sex, rng)) for spk, (role, sex) in roles.items()}


def generate_toy_corpus(spec: ToyCorpusSpec, out_dir) -> Manifest:
    """Write ``audio/*.wav`` and ``manifest.tsv`` under ``out_dir``.

    Targets get ``train``/``validation`` utterances, imposters ``trial``
    utterances, background speakers ``train`` utterances only.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(spec.seed)
    roster = speaker_roster(spec, master)
    rows = []
    for spk, (role, params) in roster.items():
        if role == "target":
            splits = ["train"] * spec.train_per_target + ["validation"] * spec.validation_per_target
        elif role == "imposter":
            splits = ["trial"] * spec.utterances_per_imposter
        else:
            splits = ["train"] * spec.utterances_per_background
        spk_rng = np.random.default_rng([spec.seed, sum(map(ord, spk)), len(rows)])
        for k, split in enumerate(splits):
            utt_id = f"{spk}_{k + 1:03d}"
            samples = synthesize_utterance(params, spec.duration, spec.sample_rate, spk_rng)
            path = audio_dir / f"{utt_id}.wav"
            write_wav(path, Waveform(samples, spec.sample_rate))
            rows.append(ManifestRow(utt_id, spk, params.sex, f"audio/{utt_id}.wav", split))
    manifest = Manifest(rows, base_dir=out_dir)
    manifest.write(out_dir / "manifest.tsv")
    return manifest
