"""Bidirectional LSTM conversion network, trained by minibatch SGD with momentum.

Forward and backward passes are written out by hand (backpropagation through
time). Sequences of equal length are stacked and run as one batch; a
minibatch with mixed lengths is split into equal-length groups, and the group
gradients are summed in a fixed order so training stays deterministic.

The network works in a standardised target space: ``normalize`` maps raw
acoustic features (log-mel plus deltas) to zero mean / unit variance using
statistics stored on the net, ``denormalize`` maps predictions back.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .dsp import (DspConfig, FeatureSequence, Waveform, delta_features, griffin_lim_batch,
                  log_mel, mel_filterbank)
from .textio import FormatError, read_arrays, write_arrays

log = logging.getLogger(__name__)

GATES = 4  # input, forget, cell candidate, output


class VcNetError(ValueError):
    pass


@dataclass(frozen=True)
class VcNetConfig:
    hidden_dim: int = 32
    n_layers: int = 2
    init_scale: float = 0.08
    learning_rate: float = 0.002
    momentum: float = 0.9
    minibatch_size: int = 5
    epochs: int = 50
    # "frame": squared error summed over dimensions, averaged over frames;
    # "element": averaged over frames and dimensions
    loss_reduction: str = "frame"
    mel_inversion: str = "pinv"

    def optimizer(self) -> "OptimizerState":
        return OptimizerState(self.momentum, self.learning_rate, self.minibatch_size)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class RecurrentConversionNet:
    input_dim: int
    hidden_dim: int
    output_dim: int
    n_layers: int
    params: dict
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None

    def param_names(self):
        return list(self.params)

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else 2 * self.hidden_dim

    def set_target_stats(self, frames: np.ndarray, min_std: float = 1e-3) -> None:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[1] != self.output_dim:
            raise VcNetError(f"target dim {frames.shape[1]} != net output dim {self.output_dim}")
        self.target_mean = frames.mean(axis=0)
        self.target_std = np.maximum(frames.std(axis=0), min_std)

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        if self.target_mean is None:
            return np.asarray(frames, dtype=np.float64)
        return (frames - self.target_mean) / self.target_std

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        if self.target_mean is None:
            return np.asarray(frames, dtype=np.float64)
        return frames * self.target_std + self.target_mean

    def copy(self) -> "RecurrentConversionNet":
        return RecurrentConversionNet(
            self.input_dim, self.hidden_dim, self.output_dim, self.n_layers,
            {k: v.copy() for k, v in self.params.items()},
            None if self.target_mean is None else self.target_mean.copy(),
            None if self.target_std is None else self.target_std.copy(),
        )


def init_net(input_dim: int = 42, hidden_dim: int = 32, output_dim: int = 240, n_layers: int = 2,
             seed: int = 0, scale: float = 0.08) -> RecurrentConversionNet:
    """Parameters drawn uniformly from ``[-scale, scale]``."""
    rng = np.random.default_rng(seed)
    params = {}
    H = hidden_dim
    for layer in range(n_layers):
        d_in = input_dim if layer == 0 else 2 * H
        for direction in ("fwd", "bwd"):
            params[f"W{layer}_{direction}"] = rng.uniform(-scale, scale, (GATES * H, d_in))
            params[f"U{layer}_{direction}"] = rng.uniform(-scale, scale, (GATES * H, H))
            params[f"b{layer}_{direction}"] = rng.uniform(-scale, scale, GATES * H)
    params["V"] = rng.uniform(-scale, scale, (output_dim, 2 * H))
    params["c"] = rng.uniform(-scale, scale, output_dim)
    return RecurrentConversionNet(input_dim, hidden_dim, output_dim, n_layers, params)


# ---------------------------------------------------------------- recurrence

def _lstm_forward(X, W, U, b):
    """One direction over batch ``X`` of shape (B, N, D_in); returns h (B, N, H) and cache."""
    B, N, _ = X.shape
    H = U.shape[1]
    Z_in = X @ W.T + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    gates = np.empty((B, N, GATES * H))
    cs = np.empty((B, N, H))
    tcs = np.empty((B, N, H))
    hs = np.empty((B, N, H))
    for t in range(N):
        z = Z_in[:, t] + h @ U.T
        g = np.empty_like(z)
        g[:, : 2 * H] = _sigmoid(z[:, : 2 * H])
        g[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        g[:, 3 * H :] = _sigmoid(z[:, 3 * H :])
        c = g[:, H : 2 * H] * c + g[:, :H] * g[:, 2 * H : 3 * H]
        tc = np.tanh(c)
        h = g[:, 3 * H :] * tc
        gates[:, t], cs[:, t], tcs[:, t], hs[:, t] = g, c, tc, h
    return hs, (X, gates, cs, tcs, hs)


def _lstm_backward(dHs, cache, W, U):
    X, gates, cs, tcs, hs = cache
    B, N, H = hs.shape
    dZ = np.empty((B, N, GATES * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(N - 1, -1, -1):
        g = gates[:, t]
        i, f, cand, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
        tc = tcs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else zeros
        dh = dHs[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dZ[:, t]
        dz[:, :H] = dc * cand * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - cand * cand)
        dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ U
    h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
    flat_dz = dZ.reshape(-1, GATES * H)
    dW = flat_dz.T @ X.reshape(-1, X.shape[2])
    dU = flat_dz.T @ h_prev.reshape(-1, H)
    db = flat_dz.sum(axis=0)
    dX = dZ @ W
    return dX, dW, dU, db


def forward_frames(net: RecurrentConversionNet, X: np.ndarray):
    """Batched forward pass on (B, N, D_in); returns outputs (B, N, D_out) and the cache."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != net.input_dim:
        raise VcNetError(f"expected input (B, N, {net.input_dim}), got {X.shape}")
    p = net.params
    caches = []
    inp = X
    for layer in range(net.n_layers):
        hf, cf = _lstm_forward(inp, p[f"W{layer}_fwd"], p[f"U{layer}_fwd"], p[f"b{layer}_fwd"])
        hb_rev, cb = _lstm_forward(inp[:, ::-1], p[f"W{layer}_bwd"], p[f"U{layer}_bwd"], p[f"b{layer}_bwd"])
        caches.append((cf, cb))
        inp = np.concatenate([hf, hb_rev[:, ::-1]], axis=2)
    Y = inp @ p["V"].T + p["c"]
    return Y, (caches, inp)


def backward_frames(net: RecurrentConversionNet, cache, dY: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given ``dLoss/dY`` of shape (B, N, D_out)."""
    p = net.params
    caches, top = cache
    H = net.hidden_dim
    grads = {}
    grads["V"] = dY.reshape(-1, net.output_dim).T @ top.reshape(-1, 2 * H)
    grads["c"] = dY.reshape(-1, net.output_dim).sum(axis=0)
    d_in = dY @ p["V"]
    for layer in range(net.n_layers - 1, -1, -1):
        cf, cb = caches[layer]
        dXf, grads[f"W{layer}_fwd"], grads[f"U{layer}_fwd"], grads[f"b{layer}_fwd"] = _lstm_backward(
            d_in[:, :, :H], cf, p[f"W{layer}_fwd"], p[f"U{layer}_fwd"])
        dXb, grads[f"W{layer}_bwd"], grads[f"U{layer}_bwd"], grads[f"b{layer}_bwd"] = _lstm_backward(
            d_in[:, ::-1, H:], cb, p[f"W{layer}_bwd"], p[f"U{layer}_bwd"])
        d_in = dXf + dXb[:, ::-1]
    return {name: grads[name] for name in p}


def forward(net: RecurrentConversionNet, x: FeatureSequence) -> FeatureSequence:
    """Map one posteriorgram sequence to (standardised) acoustic features."""
    if x.dim != net.input_dim:
        raise VcNetError(f"input dim {x.dim} does not match net input dim {net.input_dim}")
    Y, _ = forward_frames(net, x.frames[None])
    return FeatureSequence(Y[0], "mel+deltas", x.frame_rate)


# ---------------------------------------------------------------- losses

def loss_vc(y, yhat, reduction: str = "element") -> float:
    """Squared error between aligned feature matrices.

    ``"element"`` averages over every frame and dimension; ``"frame"`` sums
    over dimensions and averages over frames (the training objective).
    """
    a = y.frames if isinstance(y, FeatureSequence) else np.asarray(y, dtype=np.float64)
    b = yhat.frames if isinstance(yhat, FeatureSequence) else np.asarray(yhat, dtype=np.float64)
    if a.shape != b.shape:
        raise VcNetError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sum(diff * diff) / _denominator(diff.shape, reduction))


def _denominator(shape, reduction: str) -> int:
    if reduction == "frame":
        return int(np.prod(shape[:-1]))
    if reduction == "element":
        return int(np.prod(shape))
    raise VcNetError(f"unknown loss reduction {reduction!r}")


def _length_groups(lengths):
    groups = {}
    for idx, n in enumerate(lengths):
        groups.setdefault(n, []).append(idx)
    return [groups[n] for n in sorted(groups)]


@dataclass
class MinibatchPass:
    """Forward results for a minibatch, kept so gradients can be taken later."""

    predictions: list
    targets: list
    caches: list
    groups: list
    reduction: str = "frame"

    @property
    def denominator(self) -> int:
        return sum(_denominator(p.shape, self.reduction) for p in self.predictions)

    def loss(self) -> float:
        total = sum(float(np.sum((p - t) ** 2)) for p, t in zip(self.predictions, self.targets))
        return total / self.denominator

    def loss_gradient(self) -> list:
        """``dLoss_VC/dY_hat`` per utterance."""
        scale = 2.0 / self.denominator
        return [scale * (p - t) for p, t in zip(self.predictions, self.targets)]


def forward_minibatch(net, inputs, targets, reduction: str = "frame") -> MinibatchPass:
    """``inputs``/``targets`` are lists of (N_u, D) matrices; targets already standardised."""
    _denominator((1, 1), reduction)
    for u, (x, y) in enumerate(zip(inputs, targets)):
        if x.shape[0] != y.shape[0]:
            raise VcNetError(f"item {u}: {x.shape[0]} input frames vs {y.shape[0]} target frames")
    groups = _length_groups([x.shape[0] for x in inputs])
    preds = [None] * len(inputs)
    caches = []
    for group in groups:
        Y, cache = forward_frames(net, np.stack([inputs[u] for u in group]))
        caches.append(cache)
        for k, u in enumerate(group):
            preds[u] = Y[k]
    return MinibatchPass(preds, list(targets), caches, groups, reduction)


def backward_minibatch(net, mb: MinibatchPass, dY: list) -> dict:
    grads = None
    for group, cache in zip(mb.groups, mb.caches):
        g = backward_frames(net, cache, np.stack([dY[u] for u in group]))
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] = grads[k] + g[k]
    return grads


def backward(net: RecurrentConversionNet, x, y, reduction: str = "frame"):
    """Loss_VC and its parameter gradients for one aligned (input, target) pair.

    ``y`` is compared with the raw network output, i.e. it must already be in
    the net's standardised space.
    """
    xf = x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)
    yf = y.frames if isinstance(y, FeatureSequence) else np.asarray(y, dtype=np.float64)
    mb = forward_minibatch(net, [xf], [yf], reduction)
    return mb.loss(), backward_minibatch(net, mb, mb.loss_gradient())


def grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


# ---------------------------------------------------------------- optimiser

@dataclass
class OptimizerState:
    momentum: float = 0.9
    learning_rate: float = 0.002
    minibatch_size: int = 5
    velocity: dict = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.momentum, self.learning_rate, self.minibatch_size,
                              {k: v.copy() for k, v in self.velocity.items()})


def sgd_step(net: RecurrentConversionNet, grads: dict, opt: OptimizerState):
    """``v <- momentum * v - lr * g; p <- p + v``, in place. Returns ``(net, opt)``."""
    for name, param in net.params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise VcNetError(f"gradient for {name} has shape {g.shape}, parameter {param.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(param)
        v = opt.momentum * v - opt.learning_rate * g
        opt.velocity[name] = v
        net.params[name] = param + v
    return net, opt


@dataclass
class TrainingStepReport:
    step_index: int
    loss_vc: float
    combined_loss: float
    grad_norm: float
    loss_sv: float | None = None


@dataclass
class TrainingItem:
    utt_id: str
    ppg: FeatureSequence
    target: FeatureSequence


def check_dataset(dataset) -> None:
    if not dataset:
        raise VcNetError("training dataset is empty")
    for item in dataset:
        if len(item.ppg) != len(item.target):
            raise VcNetError(f"utterance {item.utt_id}: {len(item.ppg)} ppg frames vs "
                             f"{len(item.target)} acoustic frames")


def minibatches(n_items: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


def training_streams(seed: int):
    """Independent generators for minibatch shuffling and feedback probing."""
    shuffle_ss, probe_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(probe_ss)


def train_vc(net: RecurrentConversionNet, dataset, opt: OptimizerState, epochs: int, seed: int = 0,
             reduction: str = "frame"):
    """Plain conversion training on the MSE loss. Returns ``(net, reports)``."""
    check_dataset(dataset)
    shuffle_rng, _ = training_streams(seed)
    inputs = [item.ppg.frames for item in dataset]
    targets = [net.normalize(item.target.frames) for item in dataset]
    reports = []
    for _ in range(epochs):
        for batch in minibatches(len(dataset), opt.minibatch_size, shuffle_rng):
            mb = forward_minibatch(net, [inputs[u] for u in batch], [targets[u] for u in batch], reduction)
            grads = backward_minibatch(net, mb, mb.loss_gradient())
            loss = mb.loss()
            reports.append(TrainingStepReport(len(reports), loss, loss, grad_norm(grads)))
            sgd_step(net, grads, opt)
    return net, reports


# ---------------------------------------------------------------- synthesis

def mel_to_magnitude(logmel: np.ndarray, cfg: DspConfig, method: str = "pinv") -> np.ndarray:
    """Invert log-mel energies to a linear STFT magnitude (frames x bins)."""
    mel = np.maximum(np.exp(logmel) - cfg.log_floor, 0.0)
    key = (cfg.n_fft, cfg.n_mels, cfg.sample_rate, float(cfg.f_min), float(cfg.upper_freq))
    if method == "pinv":
        power = mel @ _filterbank_pinv(*key).T
    elif method == "nnls":
        from scipy.optimize import nnls
        fb = mel_filterbank(*key)
        flat = mel.reshape(-1, mel.shape[-1])
        power = np.array([nnls(fb, row)[0] for row in flat]).reshape(mel.shape[:-1] + (fb.shape[1],))
    else:
        raise VcNetError(f"unknown mel inversion method {method!r}")
    return np.sqrt(np.maximum(power, 0.0))


@lru_cache(maxsize=8)
def _filterbank_pinv(n_fft, n_mels, sample_rate, f_min, f_max):
    return np.linalg.pinv(mel_filterbank(n_fft, n_mels, sample_rate, f_min, f_max))


def synthesize(net: RecurrentConversionNet, predictions, cfg: DspConfig = DspConfig(),
               n_iters: int | None = None, method: str = "pinv") -> list:
    """Vocode standardised network outputs to waveforms.

    Only the static log-mel block is used; delta blocks are ignored.
    """
    n_iters = cfg.gl_iters if n_iters is None else n_iters
    single = isinstance(predictions, np.ndarray) and predictions.ndim == 2
    preds = [predictions] if single else list(predictions)
    mags = [mel_to_magnitude(net.denormalize(p)[:, : cfg.n_mels], cfg, method) for p in preds]
    out = [None] * len(mags)
    for group in _length_groups([m.shape[0] for m in mags]):
        waves = griffin_lim_batch(np.stack([mags[u] for u in group]), cfg.n_fft, cfg.hop_length,
                                  cfg.window, n_iters)
        for k, u in enumerate(group):
            out[u] = Waveform(waves[k], cfg.sample_rate)
    return out[0] if single else out


def acoustic_targets(w: Waveform, cfg: DspConfig = DspConfig()) -> FeatureSequence:
    """Log-mel with deltas and delta-deltas: the conversion network's target."""
    return delta_features(log_mel(w, cfg), cfg.delta_window)


def convert(net: RecurrentConversionNet, w_source: Waveform, ppg_model, dsp_cfg: DspConfig = DspConfig(),
            ppg_cfg=None, method: str = "pinv") -> Waveform:
    """Source waveform -> posteriorgram -> network -> static log-mel -> Griffin-Lim."""
    from .ppg import PpgConfig, extract_ppg, ppg_input_features

    feats = ppg_input_features(w_source, dsp_cfg, ppg_cfg or PpgConfig())
    pred = forward(net, extract_ppg(feats, ppg_model))
    return synthesize(net, pred.frames, dsp_cfg, method=method)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_net(path, net: RecurrentConversionNet) -> None:
    """Text checkpoint: header, dims as meta lines, then each tensor row-major.

    Tensor order: for each layer and direction ``W``, ``U``, ``b``; then the
    output projection ``V`` and bias ``c``; then the target statistics.
    """
    meta = {"input_dim": net.input_dim, "hidden_dim": net.hidden_dim,
            "output_dim": net.output_dim, "n_layers": net.n_layers}
    arrays = dict(net.params)
    if net.target_mean is not None:
        arrays["target_mean"] = net.target_mean
        arrays["target_std"] = net.target_std
    write_arrays(path, "vcnet", CHECKPOINT_VERSION, meta, arrays)


def load_net(path, expect: dict | None = None) -> RecurrentConversionNet:
    meta, arrays = read_arrays(path, "vcnet", CHECKPOINT_VERSION)
    dims = {k: int(meta[k]) for k in ("input_dim", "hidden_dim", "output_dim", "n_layers")}
    for key, value in (expect or {}).items():
        if dims[key] != value:
            raise FormatError(f"{path}: checkpoint {key}={dims[key]}, expected {value}")
    reference = init_net(**dims)
    params = {}
    for name, ref in reference.params.items():
        if name not in arrays:
            raise FormatError(f"{path}: missing tensor {name}")
        if arrays[name].shape != ref.shape:
            raise FormatError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {ref.shape}")
        params[name] = arrays[name]
    return RecurrentConversionNet(**dims, params=params, target_mean=arrays.get("target_mean"),
                                  target_std=arrays.get("target_std"))
