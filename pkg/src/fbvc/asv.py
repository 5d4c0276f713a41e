"""GMM-UBM supervector speaker verifier with cosine scoring.

Utterances are resampled to 8 kHz, turned into MFCCs (c0 dropped), filtered
by energy VAD, MAP-adapted against a universal background model, projected
onto the leading principal directions of training supervectors and
length-normalised. Attack code only ever sees :class:`ScoreOracle`, which
maps ``(waveform, speaker_id)`` to a cosine score.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dsp import ASV_DSP, DspConfig, Waveform, cepstra, energy_vad, log_mel, resample
from .gmm import DiagonalGmm, fit_gmm
from .textio import read_arrays, write_arrays

log = logging.getLogger(__name__)


class AsvError(ValueError):
    pass


class NoVoicedFrames(AsvError):
    def __init__(self, what="utterance"):
        super().__init__(f"no voiced frames in {what}")


class UnknownSpeaker(AsvError, KeyError):
    def __str__(self):
        return f"speaker {self.args[0]!r} is not enrolled"


@dataclass(frozen=True)
class AsvConfig:
    n_components: int = 64
    embedding_dim: int = 40
    relevance: float = 4.0
    n_iter: int = 20
    variance_floor: float = 1e-4
    use_vad: bool = True
    dsp: DspConfig = ASV_DSP


Ubm = DiagonalGmm


def train_ubm(frames, n_components: int = 64, seed: int = 0, n_iter: int = 20,
              variance_floor: float = 1e-4) -> Ubm:
    pool = np.vstack(frames) if isinstance(frames, (list, tuple)) else np.asarray(frames, dtype=np.float64)
    return fit_gmm(pool, n_components, seed=seed, n_iter=n_iter, variance_floor=variance_floor,
                   min_frames_per_component=20)


def adapted_means(ubm: Ubm, frames: np.ndarray, relevance: float = 4.0) -> np.ndarray:
    """MAP (means-only) adaptation: ``(F_k + r mu_k) / (n_k + r)``."""
    resp, _ = ubm.posteriors(frames)
    occ = resp.sum(axis=0)
    first = resp.T @ frames
    return (first + relevance * ubm.means) / (occ + relevance)[:, None]


def supervector(ubm: Ubm, frames, relevance: float = 4.0) -> np.ndarray:
    """UBM-centred adapted means, scaled by ``sqrt(w_k) / sigma_k``, flattened component-major."""
    frames = getattr(frames, "frames", frames)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) == 0:
        raise NoVoicedFrames()
    shift = adapted_means(ubm, frames, relevance) - ubm.means
    scaled = shift * np.sqrt(ubm.weights)[:, None] / np.sqrt(ubm.variances)
    return scaled.reshape(-1)


@dataclass
class Projection:
    matrix: np.ndarray  # (d, S), orthonormal rows
    mean: np.ndarray  # (S,)

    def __call__(self, sv: np.ndarray) -> np.ndarray:
        return self.matrix @ (sv - self.mean)


def fit_projection(supervectors: np.ndarray, d: int) -> Projection:
    """Top-``d`` principal directions of the centred supervector matrix."""
    X = np.asarray(supervectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < d:
        raise AsvError(f"need at least d={d} supervectors, got {X.shape[0] if X.ndim == 2 else 0}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(X.shape) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
    if d > rank:
        raise AsvError(f"projection dim {d} exceeds the rank {rank} of the training supervectors")
    return Projection(vt[:d].copy(), mean)


@dataclass
class BlackBoxVerifier:
    ubm: Ubm
    projection: Projection
    cfg: AsvConfig = field(default_factory=AsvConfig)
    enrolled: dict = field(default_factory=dict)

    def frames(self, w: Waveform) -> np.ndarray:
        w8 = resample(w, self.cfg.dsp.sample_rate)
        lm = log_mel(w8, self.cfg.dsp)
        feats = cepstra(lm.frames, self.cfg.dsp)
        if self.cfg.use_vad:
            feats = feats[energy_vad(w8, self.cfg.dsp)]
        if len(feats) == 0:
            raise NoVoicedFrames()
        return feats

    def embed(self, w: Waveform) -> np.ndarray:
        v = self.projection(supervector(self.ubm, self.frames(w), self.cfg.relevance))
        norm = np.linalg.norm(v)
        if not norm > 0:
            raise AsvError("degenerate embedding (zero norm)")
        return v / norm

    def enroll(self, speaker_id: str, utterances) -> "BlackBoxVerifier":
        """Enrol (or re-enrol, replacing any previous model) a speaker."""
        if not utterances:
            raise AsvError(f"no enrolment utterances for {speaker_id!r}")
        mean = np.mean([self.embed(u) for u in utterances], axis=0)
        self.enrolled[speaker_id] = mean / np.linalg.norm(mean)
        return self

    def blackbox_score(self, w: Waveform, speaker_id: str) -> float:
        model = self.enrolled.get(speaker_id)
        if model is None:
            raise UnknownSpeaker(speaker_id)
        return float(np.clip(self.embed(w) @ model, -1.0, 1.0))

    def oracle(self, log_path=None) -> "ScoreOracle":
        return ScoreOracle(self.blackbox_score, log_path)


class ScoreOracle:
    """Opaque ``(waveform, speaker_id) -> score`` callable.

    Optionally appends ``trial_id speaker_id score`` lines to an audit log.
    """

    __slots__ = ("_score", "_log_path", "_count")

    def __init__(self, score_fn, log_path=None):
        self._score = score_fn
        self._log_path = None if log_path is None else Path(log_path)
        self._count = 0

    def __call__(self, w: Waveform, speaker_id: str, trial_id: str | None = None) -> float:
        score = self._score(w, speaker_id)
        self._count += 1
        if self._log_path is not None:
            with open(self._log_path, "a") as fh:
                fh.write(f"{trial_id or f'q{self._count:08d}'} {speaker_id} {score:.10f}\n")
        return score


def train_verifier(utterances, cfg: AsvConfig = AsvConfig(), seed: int = 0) -> BlackBoxVerifier:
    """Fit UBM and projection on a list of background waveforms."""
    probe = BlackBoxVerifier(None, None, cfg)
    frame_sets = [probe.frames(w) for w in utterances]
    ubm = train_ubm(frame_sets, cfg.n_components, seed, cfg.n_iter, cfg.variance_floor)
    svs = np.array([supervector(ubm, f, cfg.relevance) for f in frame_sets])
    return BlackBoxVerifier(ubm, fit_projection(svs, cfg.embedding_dim), cfg)


# ---------------------------------------------------------------- checkpoint

def _config_meta(cfg: AsvConfig) -> dict:
    meta = {f.name: repr(getattr(cfg, f.name)) for f in fields(cfg) if f.name != "dsp"}
    meta.update({f"dsp.{f.name}": repr(getattr(cfg.dsp, f.name)) for f in fields(cfg.dsp)})
    return meta


def _parse(value: str):
    if value in ("True", "False"):
        return value == "True"
    if value == "None":
        return None
    if value.startswith("'"):
        return value.strip("'")
    return float(value) if any(c in value for c in ".e") or "inf" in value else int(value)


def save_verifier(path, v: BlackBoxVerifier) -> None:
    arrays = {"ubm_weights": v.ubm.weights, "ubm_means": v.ubm.means, "ubm_variances": v.ubm.variances,
              "projection": v.projection.matrix, "projection_mean": v.projection.mean}
    meta = _config_meta(v.cfg)
    meta["speakers"] = ",".join(sorted(v.enrolled)) or "-"
    for spk in sorted(v.enrolled):
        if not spk or any(c.isspace() or c == "," for c in spk):
            raise AsvError(f"speaker id {spk!r} cannot be stored")
        arrays[f"enrolled:{spk}"] = v.enrolled[spk]
    write_arrays(path, "verifier", 1, meta, arrays)


def load_verifier(path) -> BlackBoxVerifier:
    meta, arr = read_arrays(path, "verifier", 1)
    dsp_kwargs = {k[4:]: _parse(v) for k, v in meta.items() if k.startswith("dsp.")}
    kwargs = {k: _parse(v) for k, v in meta.items() if not k.startswith("dsp.") and k != "speakers"}
    cfg = replace(AsvConfig(**kwargs), dsp=DspConfig(**dsp_kwargs))
    ubm = DiagonalGmm(arr["ubm_weights"], arr["ubm_means"], arr["ubm_variances"], cfg.variance_floor)
    speakers = [] if meta["speakers"] == "-" else meta["speakers"].split(",")
    enrolled = {spk: arr[f"enrolled:{spk}"] for spk in speakers}
    return BlackBoxVerifier(ubm, Projection(arr["projection"], arr["projection_mean"]), cfg, enrolled)
