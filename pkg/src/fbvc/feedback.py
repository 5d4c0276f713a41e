"""Score-feedback training for the conversion network.

The verifier is reached only through a score callable ``score_fn(waveform,
speaker_id) -> float``. Its score is mapped to ``[0, 1]``, turned into a
loss, mixed with the conversion MSE as ``(1 - alpha) * mse + alpha * sv``,
and its gradient with respect to the predicted features is estimated by
antithetic simultaneous perturbation (SPSA) before being chained through the
network's analytic Jacobian.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from . import vcnet

log = logging.getLogger(__name__)


class FeedbackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeedbackConfig:
    alpha: float = 0.7
    probes: int = 8
    probe_scale: float = 0.05
    score_floor: float = -1.0
    score_ceiling: float = 1.0
    probe_gl_iters: int = 8
    # "linear": 1 - s_norm; "neglog": -log(s_norm)
    loss_transform: str = "linear"
    # "element": independent sign per feature element; "tied": one sign per
    # feature dimension shared by every frame of every utterance in the batch
    perturbation: str = "tied"
    # perturb only the leading probe_dims feature dimensions (None: all)
    probe_dims: int | None = None
    # feedback passes over the data, continuing from a pretrained net
    epochs: int = 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise FeedbackConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.probes < 1:
            raise FeedbackConfigError("probes must be >= 1")
        if not self.probe_scale > 0:
            raise FeedbackConfigError("probe_scale must be positive")
        if self.score_ceiling == self.score_floor:
            raise FeedbackConfigError("score_floor and score_ceiling must differ")
        if self.loss_transform not in ("linear", "neglog"):
            raise FeedbackConfigError(f"unknown loss_transform {self.loss_transform!r}")
        if self.perturbation not in ("element", "tied"):
            raise FeedbackConfigError(f"unknown perturbation {self.perturbation!r}")
        if self.probe_dims is not None and self.probe_dims < 1:
            raise FeedbackConfigError("probe_dims must be >= 1")
        if self.epochs < 0:
            raise FeedbackConfigError("epochs must be >= 0")


def normalize_score(s: float, cfg: FeedbackConfig = FeedbackConfig()) -> float:
    if not math.isfinite(s):
        raise ValueError(f"score must be finite, got {s}")
    if cfg.score_ceiling == cfg.score_floor:
        raise FeedbackConfigError("score_floor and score_ceiling must differ")
    value = (s - cfg.score_floor) / (cfg.score_ceiling - cfg.score_floor)
    return min(1.0, max(0.0, value))


def loss_sv(normalized: float, transform: str = "linear") -> float:
    if transform == "neglog":
        return -math.log(max(normalized, 1e-12))
    return 1.0 - normalized


def combined_loss(loss_vc: float, loss_sv: float, alpha: float) -> float:
    """``(1 - alpha) * loss_vc + alpha * loss_sv``.

    Evaluated in decimal on the inputs' shortest representations so that
    decimal inputs combine without binary rounding drift.
    """
    a, vc, sv = Decimal(repr(float(alpha))), Decimal(repr(float(loss_vc))), Decimal(repr(float(loss_sv)))
    return float((1 - a) * vc + a * sv)


# ---------------------------------------------------------------- oracle over features

class FeatureScoreOracle:
    """Loss_SV as a function of predicted (standardised) feature matrices.

    ``synth_fn(list_of_matrices, n_iters) -> list_of_waveforms`` vocodes a
    candidate; each waveform is scored against ``speaker_id`` and the losses
    are averaged over the candidate's utterances. A candidate whose scoring
    raises ``ValueError`` evaluates to ``None``.
    """

    def __init__(self, score_fn, synth_fn, speaker_id: str, cfg: FeedbackConfig = FeedbackConfig()):
        self.score_fn = score_fn
        self.synth_fn = synth_fn
        self.speaker_id = speaker_id
        self.cfg = cfg

    def raw_scores(self, candidate) -> list:
        waves = self.synth_fn(list(candidate), self.cfg.probe_gl_iters)
        return [self.score_fn(w, self.speaker_id) for w in waves]

    def loss_from_scores(self, scores) -> float:
        return float(np.mean([loss_sv(normalize_score(s, self.cfg), self.cfg.loss_transform) for s in scores]))

    def __call__(self, candidate) -> float:
        return self.loss_from_scores(self.raw_scores(candidate))

    def evaluate_many(self, candidates) -> list:
        sizes = [len(c) for c in candidates]
        waves = self.synth_fn([m for c in candidates for m in c], self.cfg.probe_gl_iters)
        out, pos = [], 0
        for n in sizes:
            try:
                scores = [self.score_fn(w, self.speaker_id) for w in waves[pos : pos + n]]
                out.append(self.loss_from_scores(scores))
            except ValueError as exc:
                log.debug("probe dropped: %s", exc)
                out.append(None)
            pos += n
        return out


def _evaluate(loss_fn, candidates):
    many = getattr(loss_fn, "evaluate_many", None)
    if many is not None:
        return many(candidates)
    out = []
    for c in candidates:
        try:
            out.append(float(loss_fn(c)))
        except ValueError as exc:
            log.debug("probe dropped: %s", exc)
            out.append(None)
    return out


def _draw_directions(rng, ys, cfg: FeedbackConfig):
    """One probe direction per structure of ``ys``, plus the divisor turning
    ``coeff * direction`` into a gradient estimate."""
    dim = ys[0].shape[-1]
    active = dim if cfg.probe_dims is None else min(cfg.probe_dims, dim)
    if cfg.perturbation == "element":
        out = []
        for y in ys:
            d = np.zeros(y.shape)
            d[..., :active] = rng.integers(0, 2, size=y.shape[:-1] + (active,)) * 2.0 - 1.0
            out.append(d)
        return out, 1.0
    signs = np.zeros(dim)
    signs[:active] = rng.integers(0, 2, size=active) * 2.0 - 1.0
    n_rows = sum(int(np.prod(y.shape[:-1])) for y in ys)
    return [np.broadcast_to(signs, y.shape) for y in ys], float(n_rows)


def estimate_sv_gradient(loss_fn, yhat, cfg: FeedbackConfig = FeedbackConfig(), seed=0):
    """Antithetic SPSA estimate of ``dL/dyhat``.

    For every probe pair, ``L(y + s*D) - L(y - s*D)`` over ``2s`` times ``D``
    is accumulated and the pairs are averaged. With ``perturbation="element"``
    ``D`` has an independent Rademacher sign per element and the estimate is
    unbiased for smooth ``L`` as ``s -> 0``. With ``"tied"`` each feature
    dimension carries one sign for all frames, and the result (divided by the
    number of frames) estimates the gradient projected onto frame-constant
    offsets. Dimensions beyond ``cfg.probe_dims`` get a zero estimate.

    ``yhat`` is one matrix or a list of matrices and the estimate has the same
    structure. ``seed`` is an int or a ``numpy.random.Generator``. Returns
    ``(gradient, pairs_used)``.
    """
    single = isinstance(yhat, np.ndarray)
    ys = [np.asarray(yhat, dtype=np.float64)] if single else [np.asarray(y, dtype=np.float64) for y in yhat]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = cfg.probe_scale
    draws = [_draw_directions(rng, ys, cfg) for _ in range(cfg.probes)]
    candidates = []
    for dirs, _ in draws:
        candidates.append([y + sigma * d for y, d in zip(ys, dirs)])
        candidates.append([y - sigma * d for y, d in zip(ys, dirs)])
    if single:
        candidates = [c[0] for c in candidates]
    losses = _evaluate(loss_fn, candidates)
    grad = [np.zeros_like(y) for y in ys]
    used = 0
    for p, (dirs, divisor) in enumerate(draws):
        plus, minus = losses[2 * p], losses[2 * p + 1]
        if plus is None or minus is None:
            continue
        coeff = (plus - minus) / (2.0 * sigma) / divisor
        for g, d in zip(grad, dirs):
            g += coeff * d
        used += 1
    if used == 0:
        log.warning("every SPSA probe failed; using a zero feedback gradient")
    else:
        grad = [g / used for g in grad]
    return (grad[0] if single else grad), used


# ---------------------------------------------------------------- training

@dataclass
class FeedbackStepTrace:
    step: int
    loss_vc: float
    loss_sv: float | None
    combined_loss: float
    raw_score: float | None
    normalized_score: float | None
    probes_used: int
    sv_grad_norm: float
    grad_norm: float


def feedback_train_step(net, inputs, targets, oracle, opt, cfg: FeedbackConfig, rng, step: int = 0,
                        reduction: str = "frame"):
    """One joint update on a minibatch.

    ``inputs``/``targets`` are lists of matrices (targets standardised);
    ``oracle`` is a :class:`FeatureScoreOracle` (or any callable over a list of
    matrices). Updates ``net``/``opt`` in place and returns the step trace.
    """
    mb = vcnet.forward_minibatch(net, inputs, targets, reduction)
    lvc = mb.loss()
    d_vc = mb.loss_gradient()
    raw = norm = lsv = None
    try:
        if hasattr(oracle, "raw_scores"):
            scores = oracle.raw_scores(mb.predictions)
            raw = float(np.mean(scores))
            norm = float(np.mean([normalize_score(s, cfg) for s in scores]))
            lsv = oracle.loss_from_scores(scores)
        else:
            lsv = float(oracle(mb.predictions))
    except ValueError as exc:
        log.warning("step %d: verifier query failed (%s); taking a conversion-only step", step, exc)

    used, sv_norm = 0, 0.0
    if lsv is None:
        dY, combined = d_vc, lvc
    elif cfg.alpha == 0.0:
        dY, combined = d_vc, combined_loss(lvc, lsv, 0.0)
    else:
        g_sv, used = estimate_sv_gradient(oracle, mb.predictions, cfg, rng)
        sv_norm = float(np.sqrt(sum(np.sum(g * g) for g in g_sv)))
        dY = [(1.0 - cfg.alpha) * a + cfg.alpha * b for a, b in zip(d_vc, g_sv)]
        combined = combined_loss(lvc, lsv, cfg.alpha)
    grads = vcnet.backward_minibatch(net, mb, dY)
    trace = FeedbackStepTrace(step, lvc, lsv, combined, raw, norm, used, sv_norm, vcnet.grad_norm(grads))
    vcnet.sgd_step(net, grads, opt)
    return trace


def train_feedback_vc(net, dataset, score_fn, synth_fn, target_speaker: str, opt, cfg: FeedbackConfig,
                      epochs: int, seed: int = 0, reduction: str = "frame"):
    """Feedback-controlled counterpart of :func:`vcnet.train_vc`.

    Minibatch order comes from the same stream ``train_vc`` uses, so with
    ``alpha == 0`` both produce bitwise-identical parameters.
    Returns ``(net, traces)``.
    """
    vcnet.check_dataset(dataset)
    shuffle_rng, probe_rng = vcnet.training_streams(seed)
    oracle = FeatureScoreOracle(score_fn, synth_fn, target_speaker, cfg)
    inputs = [item.ppg.frames for item in dataset]
    targets = [net.normalize(item.target.frames) for item in dataset]
    traces = []
    for _ in range(epochs):
        for batch in vcnet.minibatches(len(dataset), opt.minibatch_size, shuffle_rng):
            traces.append(feedback_train_step(net, [inputs[u] for u in batch], [targets[u] for u in batch],
                                              oracle, opt, cfg, probe_rng, len(traces), reduction))
    return net, traces


TRACE_COLUMNS = ("step", "loss_vc", "loss_sv", "combined", "raw_score", "grad_norm")


def format_trace(traces) -> str:
    """Plain-text table, one line per step."""
    def cell(v):
        return "nan" if v is None else f"{v:.10g}"

    lines = [" ".join(TRACE_COLUMNS)]
    for t in traces:
        lines.append(" ".join([str(t.step), cell(t.loss_vc), cell(t.loss_sv), cell(t.combined_loss),
                               cell(t.raw_score), cell(t.grad_norm)]))
    return "\n".join(lines) + "\n"
