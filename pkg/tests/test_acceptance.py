"""Acceptance suite: one test per primary criterion.

Each test records a ``criterion N: PASS|FAIL`` line, echoed live and again
in the terminal summary, and then asserts the criterion.
"""
import ast
import inspect
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fbvc import dsp, evaluation, feedback, vcnet
from fbvc.asv import ScoreOracle
from fbvc.dsp import FeatureSequence, Spectrogram, Waveform
from fbvc.evaluation import ScoreSet
from fbvc.feedback import FeedbackConfig
from fbvc.gmm import fit_gmm
from fbvc.vcnet import OptimizerState, TrainingItem

from conftest import ACCEPTANCE_LINES
from oracles import brute_force_eer

DATA = Path(__file__).parent / "data"
SEEDS = (0, 1, 2)
DELTA = 0.02  # required mean-score shift, vcfc over vc
TIME_LIMIT = 20 * 60
VERIFIER_EER_BOUND = 0.30


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert ok, line


def fbvc_cli(*args):
    return subprocess.run([sys.executable, "-m", "fbvc", *map(str, args)], capture_output=True, text=True,
                          check=True)


# ---------------------------------------------------------------- 1

def overall_eers(run):
    lines = (run / "report.tsv").read_text().splitlines()
    head = lines[0].split("\t")
    row = next(line.split("\t") for line in lines if line.startswith("Overall"))
    return {name: float(v) for name, v in zip(head[1:], row[1:])}


@pytest.fixture(scope="module")
def trend_runs(tmp_path_factory):
    """Full CLI pipeline per seed: (seed, overall EERs, vcfc - vc mean shift, seconds)."""
    base = tmp_path_factory.mktemp("trend")
    results = []
    for seed in SEEDS:
        run = base / f"seed{seed}"
        t0 = time.perf_counter()
        fbvc_cli("pipeline", "--run-dir", run, "--config", DATA / "acceptance.cfg",
                 "--set", f"run.seed={seed}", "--set", f"corpus.seed={seed}")
        elapsed = time.perf_counter() - t0
        scores = ScoreSet.read(run / "trials" / "scores.txt")
        shift = scores.where("spoof-vcfc").mean() - scores.where("spoof-vc").mean()
        results.append((seed, overall_eers(run), float(shift), elapsed))
    return results


@pytest.mark.slow
def test_criterion_1_trend(trend_runs):
    ordered = [e["Imposter"] < e["PPG-VC"] and shift >= DELTA for _, e, shift, _ in trend_runs]
    positive = all(shift > 0 for _, _, shift, _ in trend_runs)
    in_time = all(t <= TIME_LIMIT for *_, t in trend_runs)
    detail = "; ".join(f"seed {s}: EER imp {100 * e['Imposter']:.1f}% vc {100 * e['PPG-VC']:.1f}% "
                       f"vcfc {100 * e['PPG-VC-FC']:.1f}%, shift {d:+.3f}, {t:.0f} s"
                       for s, e, d, t in trend_runs)
    record(1, sum(ordered) >= 2 and positive and in_time, f"(delta {DELTA}) {detail}")


@pytest.mark.slow
def test_verifier_separates_toy_speakers(trend_runs):
    # bound set from the measured baselines of these three seeds
    assert all(e["Imposter"] < VERIFIER_EER_BOUND for _, e, _, _ in trend_runs)


# ---------------------------------------------------------------- 2

def test_criterion_2_alpha_zero_equivalence():
    rng = np.random.default_rng(0)
    items = []
    for u in range(8):
        p = rng.random((12, 42))
        items.append(TrainingItem(f"u{u}", FeatureSequence(p / p.sum(1, keepdims=True), "ppg", 62.5),
                                  FeatureSequence(rng.standard_normal((12, 10)), "mel", 62.5)))

    def fresh():
        net = vcnet.init_net(42, 6, 10, 2, seed=1)
        net.set_target_stats(np.vstack([i.target.frames for i in items]))
        return net

    def synth(mats, n_iters):
        return [Waveform(m[:, 0], 16000) for m in mats]

    plain, _ = vcnet.train_vc(fresh(), items, OptimizerState(), epochs=4, seed=9)
    fb, _ = feedback.train_feedback_vc(fresh(), items, lambda w, s: float(np.tanh(w.samples.mean())), synth,
                                       "tgt", OptimizerState(), FeedbackConfig(alpha=0.0), epochs=4, seed=9)
    same = all(plain.params[k].tobytes() == fb.params[k].tobytes() for k in plain.params)
    record(2, same, f"{len(plain.params)} parameter tensors bitwise equal after 8 steps")


# ---------------------------------------------------------------- 3

def test_criterion_3_combined_loss():
    exact = feedback.combined_loss(0.5, 0.2, 0.7) == 0.29
    rng = np.random.default_rng(0)
    worst = max(abs(feedback.combined_loss(vc, sv, a) - ((1.0 - a) * vc + a * sv))
                for vc, sv, a in rng.random((1000, 3)))
    record(3, exact and worst <= 1e-15, f"(0.5, 0.2, 0.7) -> 0.29 exact; max diff over 1000 triples {worst:.1e}")


# ---------------------------------------------------------------- 4

def test_criterion_4_gradients():
    rng = np.random.default_rng(2)
    net = vcnet.init_net(4, 3, 5, 2, seed=3, scale=0.5)
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 5))
    h = 1e-4
    worst = 0.0
    for reduction in ("element", "frame"):
        _, grads = vcnet.backward(net, x, y, reduction)
        for name, p in net.params.items():
            flat = p.reshape(-1)
            for idx in rng.choice(flat.size, size=min(50, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = vcnet.forward_minibatch(net, [x], [y], reduction).loss()
                flat[idx] = orig - h
                down = vcnet.forward_minibatch(net, [x], [y], reduction).loss()
                flat[idx] = orig
                num = (up - down) / (2 * h)
                ana = grads[name].reshape(-1)[idx]
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-7))
    record(4, worst <= 1e-4, f"max relative error {worst:.2e} over {len(net.params)} tensors, both reductions")


# ---------------------------------------------------------------- 5

def test_criterion_5_eer():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        gen, imp = rng.normal(1.0, 1.0, 50), rng.normal(0.0, 1.0, 50)
        worst = max(worst, abs(evaluation.compute_eer(gen, imp)[0] - brute_force_eer(gen, imp)))
    perfect = evaluation.compute_eer([2, 3, 4], [0, 1])[0] == 0.0
    same = evaluation.compute_eer([0.2, 0.4, 0.9], [0.9, 0.2, 0.4])[0] == 0.5
    record(5, worst <= 1e-9 and perfect and same,
           f"max diff vs brute force {worst:.1e}; perfect -> 0 {perfect}; identical -> 0.5 {same}")


# ---------------------------------------------------------------- 6

def test_criterion_6_spsa():
    y = np.array([[0.01, -0.02]])
    t = y - np.array([[0.25, -0.25]])
    cfg = FeedbackConfig(perturbation="element", probes=10_000, probe_scale=1e-3)
    grad, _ = feedback.estimate_sv_gradient(lambda c: float(np.sum((c - t) ** 2)), y, cfg, seed=0)
    true = 2 * (y - t)
    rel = float(np.max(np.abs(grad - true) / np.abs(true)))
    record(6, rel <= 0.05, f"max per-coordinate relative error {100 * rel:.2f}% over 10,000 pairs")


# ---------------------------------------------------------------- 7

def test_criterion_7_dsp():
    sr = 16000
    rng = np.random.default_rng(0)
    x = rng.standard_normal(8000)
    rt = dsp.istft(dsp.stft(Waveform(x, sr)), length=8000)
    covered = (dsp.frame_count(8000, 1024, 256) - 1) * 256 + 1024
    rms = float(np.sqrt(np.mean((x[1024:covered - 1024] - rt[1024:covered - 1024]) ** 2)))

    mag = Spectrogram(np.abs(rng.standard_normal((30, 513))), 1024, 256)
    _, errors = dsp.griffin_lim(mag, n_iters=60, return_errors=True)
    monotone = all(b <= a * (1 + 1e-12) for a, b in zip(errors, errors[1:]))

    t = np.arange(sr) / sr
    out = dsp.griffin_lim(dsp.stft(Waveform(np.sin(2 * np.pi * 440 * t), sr)).magnitude(), n_iters=60)
    seg = out.samples[1024:-1024]
    spec = np.abs(np.fft.rfft(seg * np.hanning(len(seg))))
    peak_hz = spec.argmax() * sr / len(seg)
    tone_ok = abs(peak_hz - 440.0) <= sr / 1024

    mel = float(dsp.hz_to_mel(1000.0))
    data = np.vstack([rng.normal(c, 1.0, (200, 3)) for c in (-3, 0, 3)])
    hist = fit_gmm(data, 4, seed=0, n_iter=20).llk_history
    em_ok = all(b >= a - 1e-10 for a, b in zip(hist, hist[1:]))

    ok = rms < 1e-6 and monotone and tone_ok and abs(mel - 1000) <= 0.5 and em_ok
    record(7, ok, f"round-trip RMS {rms:.1e}; GL monotone {monotone}; tone peak {peak_hz:.1f} Hz; "
                  f"mel(1000) {mel:.3f}; EM monotone {em_ok}")


# ---------------------------------------------------------------- 8

def fbvc_imports(module_name):
    module = __import__(f"fbvc.{module_name}", fromlist=["_"])
    tree = ast.parse(inspect.getsource(module))
    found = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom) and node.level:
            found.update(a.name for a in node.names) if node.module is None else found.add(node.module)
        elif isinstance(node, ast.ImportFrom) and (node.module or "").startswith("fbvc."):
            found.add(node.module.split(".", 1)[1])
        elif isinstance(node, ast.Import):
            found.update(a.name.split(".", 1)[1] for a in node.names if a.name.startswith("fbvc."))
    return found


def test_criterion_8_opacity():
    reach, todo = set(), ["feedback"]
    while todo:
        name = todo.pop()
        if name not in reach:
            reach.add(name)
            todo.extend(fbvc_imports(name))
    static_ok = "asv" not in reach

    touched = []

    class Verifier:
        def blackbox_score(self, w, speaker):
            return 0.0

        def __getattribute__(self, name):
            touched.append(name)
            return object.__getattribute__(self, name)

    v = Verifier()
    rng = np.random.default_rng(0)
    p = rng.random((6, 42))
    items = [TrainingItem("u0", FeatureSequence(p / p.sum(1, keepdims=True), "ppg", 62.5),
                          FeatureSequence(rng.standard_normal((6, 4)), "mel", 62.5))]
    net = vcnet.init_net(42, 3, 4, 1)
    feedback.train_feedback_vc(net, items, ScoreOracle(v.blackbox_score),
                               lambda mats, n: [Waveform(m[:, 0], 16000) for m in mats], "tgt",
                               OptimizerState(), FeedbackConfig(probes=2), epochs=1)
    runtime_ok = set(touched) == {"blackbox_score"}
    record(8, static_ok and runtime_ok,
           f"feedback import closure {sorted(reach)}; verifier attributes read {sorted(set(touched))}")


# ---------------------------------------------------------------- 9

@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    outputs = []
    for name in ("a", "b"):
        run = tmp_path / name
        fbvc_cli("pipeline", "--run-dir", run, "--config", DATA / "tiny.cfg")
        outputs.append({f: (run / f).read_bytes() for f in
                        ("trials/scores.txt", "trials/score_log.txt", "report.txt", "report.tsv",
                         "distributions.txt")})
    same = [f for f in outputs[0] if outputs[0][f] == outputs[1][f]]
    record(9, len(same) == len(outputs[0]), f"identical across two CLI runs: {', '.join(same)}")
