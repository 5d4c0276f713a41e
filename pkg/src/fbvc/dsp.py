"""Signal-processing kernels: framing, STFT/ISTFT, mel features, MFCC, deltas,
Griffin-Lim, energy VAD, resampling and PCM16 WAV I/O.

Framing never pads: a signal of ``L`` samples yields
``floor((L - frame_length) / hop) + 1`` frames.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from math import gcd

import numpy as np
from scipy.signal import resample_poly


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DspError("waveform must be one-dimensional")
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise DspError("waveform contains NaN or Inf")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Frame-major STFT, shape ``(n_frames, n_fft // 2 + 1)``."""

    frames: np.ndarray
    frame_length: int
    hop_length: int
    window: str = "hann"

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.frames)

    def magnitude(self) -> "Spectrogram":
        return Spectrogram(np.abs(self.frames), self.frame_length, self.hop_length, self.window)


FEATURE_KINDS = ("mel", "mfcc", "ppg", "mel+deltas")


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    kind: str
    frame_rate: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise DspError("feature frames must be a 2-D (N, D) matrix")
        if frames.shape[0] < 1:
            raise DspError("feature sequence needs at least one frame")
        if self.kind not in FEATURE_KINDS:
            raise DspError(f"unknown feature kind {self.kind!r}")
        if not np.all(np.isfinite(frames)):
            raise DspError("feature sequence contains NaN or Inf")
        object.__setattr__(self, "frames", frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class DspConfig:
    """Analysis settings for one signal path.

    The defaults are the 16 kHz conversion path (513-bin spectrum, 80 mel bands).
    """

    sample_rate: int = 16000
    n_fft: int = 1024
    hop_length: int = 256
    window: str = "hann"
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-10
    n_ceps: int = 13
    include_c0: bool = True
    delta_window: int = 2
    vad_offset: float = 0.0
    gl_iters: int = 60

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    @property
    def upper_freq(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max


# 8 kHz verifier front end: 32 ms frames, 10 ms hop, c1..c13.
ASV_DSP = DspConfig(
    sample_rate=8000, n_fft=256, hop_length=80, n_mels=24, n_ceps=13, include_c0=False
)


def get_window(name: str, length: int) -> np.ndarray:
    if name == "hann":
        # periodic Hann: constant overlap-add at hop = length / 4
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(length) / length)
    if name in ("rect", "boxcar"):
        return np.ones(length)
    raise DspError(f"unsupported window {name!r}")


def frame_count(n_samples: int, frame_length: int, hop: int) -> int:
    if n_samples < frame_length:
        return 0
    return (n_samples - frame_length) // hop + 1


def frame_signal(x: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    n = frame_count(len(x), frame_length, hop)
    if n == 0:
        raise DspError("input too short")
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft(w: Waveform, frame_length: int = 1024, hop: int = 256, window: str = "hann") -> Spectrogram:
    if hop < 1:
        raise DspError("hop must be >= 1")
    frames = frame_signal(w.samples, frame_length, hop)
    spec = np.fft.rfft(frames * get_window(window, frame_length), axis=1)
    return Spectrogram(spec, frame_length, hop, window)


def _overlap_add(frames: np.ndarray, win: np.ndarray, hop: int) -> np.ndarray:
    """Windowed least-squares overlap-add of (..., n_frames, frame_length) frames."""
    n_frames, flen = frames.shape[-2:]
    total = (n_frames - 1) * hop + flen
    frames = frames * win
    if flen % hop == 0:
        # hop-sized blocks: overlap-add as flen/hop shifted block sums
        r = flen // hop
        out = np.zeros(frames.shape[:-2] + (n_frames - 1 + r, hop))
        blocks = frames.reshape(frames.shape[:-1] + (r, hop))
        for j in range(r):
            out[..., j : j + n_frames, :] += blocks[..., j, :]
        out = out.reshape(frames.shape[:-2] + (total,))
    else:
        out = np.zeros(frames.shape[:-2] + (total,))
        for t in range(n_frames):
            out[..., t * hop : t * hop + flen] += frames[..., t, :]
    out *= _inverse_window_sum(win.tobytes(), flen, hop, n_frames)
    return out


@lru_cache(maxsize=64)
def _inverse_window_sum(win_bytes, flen, hop, n_frames):
    win = np.frombuffer(win_bytes)
    norm = np.zeros((n_frames - 1) * hop + flen)
    for t in range(n_frames):
        norm[t * hop : t * hop + flen] += win * win
    inv = np.zeros_like(norm)
    nz = norm > 1e-10
    inv[nz] = 1.0 / norm[nz]
    inv.setflags(write=False)
    return inv


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`.

    Samples covered by no nonzero window weight come back as zero.
    """
    win = get_window(spec.window, spec.frame_length)
    frames = np.fft.irfft(spec.frames, n=spec.frame_length, axis=-1)
    out = _overlap_add(frames, win, spec.hop_length)
    if length is not None:
        if length <= len(out):
            out = out[:length]
        else:
            out = np.concatenate([out, np.zeros(length - len(out))])
    return out


def hz_to_mel(f):
    return 2595.0 / np.log(10.0) * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) * np.log(10.0) / 2595.0)


@lru_cache(maxsize=32)
def _mel_filterbank(n_fft, n_mels, sample_rate, f_min, f_max):
    if n_mels < 1:
        raise DspError("n_mels must be >= 1")
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise DspError(f"need 0 <= f_min < f_max <= sample_rate/2, got {f_min}, {f_max}")
    n_bins = n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, centre, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - lo) / (centre - lo)
        falling = (hi - bin_freqs) / (hi - centre)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
        if not np.any(fb[m] > 0):
            raise DspError(f"mel filter {m} has zero width ({lo:.1f}-{hi:.1f} Hz covers no FFT bin)")
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int, f_min: float = 0.0,
                   f_max: float | None = None) -> np.ndarray:
    """Triangular filters on the 2595*log10(1 + f/700) mel scale, ``(n_mels, n_fft/2+1)``."""
    f_max = sample_rate / 2 if f_max is None else f_max
    return _mel_filterbank(int(n_fft), int(n_mels), int(sample_rate), float(f_min), float(f_max))


def _filterbank_for(cfg: DspConfig) -> np.ndarray:
    return mel_filterbank(cfg.n_fft, cfg.n_mels, cfg.sample_rate, cfg.f_min, cfg.upper_freq)


def _check_rate(w: Waveform, cfg: DspConfig):
    if w.sample_rate != cfg.sample_rate:
        raise DspError(f"waveform is {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")


def power_spectrogram(w: Waveform, cfg: DspConfig) -> np.ndarray:
    _check_rate(w, cfg)
    spec = stft(w, cfg.n_fft, cfg.hop_length, cfg.window)
    return spec.frames.real ** 2 + spec.frames.imag ** 2


def log_mel(w: Waveform, cfg: DspConfig = DspConfig()) -> FeatureSequence:
    power = power_spectrogram(w, cfg)
    mel = power @ _filterbank_for(cfg).T
    return FeatureSequence(np.log(mel + cfg.log_floor), "mel", cfg.frame_rate)


@lru_cache(maxsize=32)
def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II basis, ``(n_out, n_in)``."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    basis = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    basis[0] /= np.sqrt(2.0)
    basis.setflags(write=False)
    return basis


def cepstra(logmel: np.ndarray, cfg: DspConfig) -> np.ndarray:
    first = 0 if cfg.include_c0 else 1
    n_total = cfg.n_ceps + first
    if n_total > cfg.n_mels:
        raise DspError(f"n_ceps={cfg.n_ceps} exceeds n_mels={cfg.n_mels}")
    return logmel @ dct_matrix(n_total, cfg.n_mels)[first:].T


def mfcc(w: Waveform, cfg: DspConfig = DspConfig()) -> FeatureSequence:
    """DCT-II of log-mel energies; ``cfg.n_ceps`` coefficients, c0 kept only if ``include_c0``."""
    first = 0 if cfg.include_c0 else 1
    if cfg.n_ceps + first > cfg.n_mels:
        raise DspError(f"n_ceps={cfg.n_ceps} exceeds n_mels={cfg.n_mels}")
    lm = log_mel(w, cfg)
    return FeatureSequence(cepstra(lm.frames, cfg), "mfcc", cfg.frame_rate)


def _deltas(x: np.ndarray, window: int) -> np.ndarray:
    n = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], window, axis=0), x, np.repeat(x[-1:], window, axis=0)])
    denom = 2 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(x)
    for k in range(1, window + 1):
        out += k * (padded[window + k : window + k + n] - padded[window - k : window - k + n])
    return out / denom


def delta_features(f: FeatureSequence, window: int = 2) -> FeatureSequence:
    """Append regression deltas and delta-deltas: ``[static | d | dd]``."""
    if window < 1:
        raise DspError("delta window must be >= 1")
    d1 = _deltas(f.frames, window)
    d2 = _deltas(d1, window)
    return FeatureSequence(np.hstack([f.frames, d1, d2]), "mel+deltas", f.frame_rate)


def _frames_batch(x: np.ndarray, flen: int, hop: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, flen, axis=-1)[..., ::hop, :]


def griffin_lim_batch(mags: np.ndarray, frame_length: int, hop: int, window: str = "hann",
                      n_iters: int = 60, seed: int | None = None, errors: list | None = None) -> np.ndarray:
    """Griffin-Lim on a stack of magnitudes ``(..., n_frames, bins)``; returns ``(..., n_samples)``.

    Phase starts at zero unless ``seed`` is given (uniform random phase).
    If ``errors`` is a list, the magnitude error ``|| |STFT(x_k)| - A ||`` after
    every iteration ``k`` is appended to it.
    """
    A = np.asarray(mags, dtype=np.float64)
    if np.iscomplexobj(A) or np.any(A < 0):
        raise DspError("griffin_lim expects a nonnegative magnitude spectrogram")
    if n_iters < 1:
        raise DspError("n_iters must be >= 1")
    win = get_window(window, frame_length)
    if seed is None:
        spec = A.astype(np.complex128)
    else:
        rng = np.random.default_rng(seed)
        spec = A * np.exp(2j * np.pi * rng.random(A.shape))
    x = _overlap_add(np.fft.irfft(spec, n=frame_length, axis=-1), win, hop)
    for k in range(n_iters):
        spec = np.fft.rfft(_frames_batch(x, frame_length, hop) * win, axis=-1)
        mag = np.abs(spec)
        if errors is not None and k > 0:
            errors.append(float(np.linalg.norm(mag - A)))
        silent = mag == 0
        spec *= A / np.where(silent, 1.0, mag)
        if silent.any():
            spec[silent] = A[silent]  # undefined phase: take zero
        x = _overlap_add(np.fft.irfft(spec, n=frame_length, axis=-1), win, hop)
    if errors is not None:
        spec = np.fft.rfft(_frames_batch(x, frame_length, hop) * win, axis=-1)
        errors.append(float(np.linalg.norm(np.abs(spec) - A)))
    return x


def griffin_lim(mag: Spectrogram, n_iters: int = 60, seed: int | None = None,
                sample_rate: int = 16000, return_errors: bool = False):
    """Recover a waveform whose STFT magnitude approximates ``mag``.

    An all-zero magnitude gives an all-zero waveform. With ``return_errors``
    the per-iteration magnitude errors are returned too.
    """
    errors = [] if return_errors else None
    x = griffin_lim_batch(mag.frames, mag.frame_length, mag.hop_length, mag.window, n_iters, seed, errors)
    out = Waveform(x, sample_rate)
    return (out, errors) if return_errors else out


def frame_log_energy(w: Waveform, cfg: DspConfig) -> np.ndarray:
    frames = frame_signal(w.samples, cfg.n_fft, cfg.hop_length)
    return np.log(np.sum(frames * frames, axis=1) + cfg.log_floor)


def energy_vad(w: Waveform, cfg: DspConfig = ASV_DSP) -> np.ndarray:
    """Keep frames whose log energy exceeds the utterance mean plus ``cfg.vad_offset``.

    If every frame has the same energy all frames are kept.
    """
    energy = frame_log_energy(w, cfg)
    if np.ptp(energy) <= 1e-12 * max(1.0, abs(float(energy[0]))):
        return np.ones(len(energy), dtype=bool)
    return energy > energy.mean() + cfg.vad_offset


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise DspError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = gcd(int(target_rate), w.sample_rate)
    up, down = int(target_rate) // g, w.sample_rate // g
    # the polyphase Kaiser filter cuts at min(rates) / 2
    return Waveform(resample_poly(w.samples, up, down), target_rate)


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise DspError(f"{path}: only PCM16 is supported")
        if fh.getnchannels() != 1:
            raise DspError(f"{path}: only mono is supported")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(data.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
