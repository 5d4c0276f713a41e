"""Posteriorgram features from a diagonal GMM over MFCC frames.

The mixture components play the role of phonetic classes; a frame's
posteriorgram is its vector of component responsibilities. Externally computed
posteriorgrams can be imported from the plain-text matrix format instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import DspConfig, FeatureSequence, Waveform, mfcc
from .gmm import DiagonalGmm, fit_gmm
from .textio import read_arrays, write_arrays


class PpgError(ValueError):
    pass


@dataclass(frozen=True)
class PpgConfig:
    n_components: int = 42
    n_iter: int = 20
    variance_floor: float = 1e-4
    # per-utterance cepstral mean normalisation before the mixture
    cmn: bool = True


PosteriorModel = DiagonalGmm


def ppg_input_features(w: Waveform, dsp_cfg: DspConfig = DspConfig(), cfg: PpgConfig = PpgConfig()) -> FeatureSequence:
    """13-dim MFCCs on the 16 kHz conversion framing, optionally mean-normalised."""
    feats = mfcc(w, dsp_cfg)
    if cfg.cmn:
        return FeatureSequence(feats.frames - feats.frames.mean(axis=0), "mfcc", feats.frame_rate)
    return feats


def fit_posterior_model(frames, n_components: int = 42, seed: int = 0, n_iter: int = 20,
                        variance_floor: float = 1e-4) -> PosteriorModel:
    """Fit the posteriorgram mixture on a pool of frames.

    ``frames`` may be a single matrix, a FeatureSequence, or a list of either.
    """
    if isinstance(frames, FeatureSequence):
        pool = frames.frames
    elif isinstance(frames, (list, tuple)):
        pool = np.vstack([f.frames if isinstance(f, FeatureSequence) else np.asarray(f) for f in frames])
    else:
        pool = np.asarray(frames, dtype=np.float64)
    return fit_gmm(pool, n_components, seed=seed, n_iter=n_iter, variance_floor=variance_floor,
                   min_frames_per_component=10)


def extract_ppg(f: FeatureSequence, model: PosteriorModel) -> FeatureSequence:
    if f.dim != model.dim:
        raise PpgError(f"feature dim {f.dim} does not match posterior model dim {model.dim}")
    resp, _ = model.posteriors(f.frames)
    return FeatureSequence(resp, "ppg", f.frame_rate)


def check_simplex(frames: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Validate posteriorgram rows; renormalise rows within ``tol`` of unit sum."""
    if np.any(frames < 0):
        row = int(np.flatnonzero(np.any(frames < 0, axis=1))[0])
        raise PpgError(f"row {row} has negative entries")
    sums = frames.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if len(bad):
        raise PpgError(f"row {int(bad[0])} sums to {sums[bad[0]]:.6g}, not a probability simplex")
    return frames / sums[:, None]


def save_matrix(path, f: FeatureSequence, tag: str | None = None) -> None:
    """Write ``<tag> <N> <D>`` followed by N whitespace-separated rows."""
    tag = tag or ("ppg" if f.kind == "ppg" else "mel")
    n, d = f.frames.shape
    rows = [" ".join(f"{v:.17g}" for v in row) for row in f.frames]
    Path(path).write_text(f"{tag} {n} {d}\n" + "\n".join(rows) + "\n")


def load_matrix(path, frame_rate: float = 16000 / 256) -> FeatureSequence:
    lines = Path(path).read_text().split("\n")
    head = lines[0].split()
    if len(head) != 3 or head[0] not in ("ppg", "mel"):
        raise PpgError(f"{path}: header must be 'ppg <N> <D>' or 'mel <N> <D>'")
    try:
        n, d = int(head[1]), int(head[2])
        body = [line for line in lines[1:] if line.strip()]
        frames = np.array([[float(v) for v in line.split()] for line in body], dtype=np.float64)
    except ValueError as exc:
        raise PpgError(f"{path}: malformed matrix: {exc}") from None
    if frames.shape != (n, d):
        raise PpgError(f"{path}: header says {n}x{d}, body is {frames.shape}")
    if head[0] == "ppg":
        return FeatureSequence(check_simplex(frames), "ppg", frame_rate)
    return FeatureSequence(frames, "mel", frame_rate)


def load_ppg(path, frame_rate: float = 16000 / 256) -> FeatureSequence:
    seq = load_matrix(path, frame_rate)
    if seq.kind != "ppg":
        raise PpgError(f"{path}: not a ppg matrix")
    return seq


def save_posterior_model(path, model: PosteriorModel) -> None:
    write_arrays(path, "ppg-model", 1, {"variance_floor": repr(model.variance_floor)},
                 {"weights": model.weights, "means": model.means, "variances": model.variances})


def load_posterior_model(path) -> PosteriorModel:
    meta, arr = read_arrays(path, "ppg-model", 1)
    return DiagonalGmm(arr["weights"], arr["means"], arr["variances"], float(meta["variance_floor"]))
