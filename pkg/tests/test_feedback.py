import ast
import inspect
import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbvc import feedback, vcnet
from fbvc.dsp import FeatureSequence, Waveform
from fbvc.feedback import FeedbackConfig, FeedbackConfigError, FeatureScoreOracle
from fbvc.vcnet import OptimizerState, TrainingItem

unit = st.floats(0.0, 1.0, allow_nan=False)


# ---------------------------------------------------------------- score arithmetic

@pytest.mark.parametrize("s, expected", [(1.0, 1.0), (-1.0, 0.0), (0.0, 0.5), (3.0, 1.0), (-2.0, 0.0)])
def test_normalize_examples(s, expected):
    assert feedback.normalize_score(s) == expected


def test_normalize_rejects_degenerate_range():
    with pytest.raises(FeedbackConfigError):
        FeedbackConfig(score_floor=0.5, score_ceiling=0.5)
    with pytest.raises(ValueError):
        feedback.normalize_score(float("nan"))


@pytest.mark.parametrize("x, expected", [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)])
def test_loss_sv_examples(x, expected):
    assert feedback.loss_sv(x) == expected


@settings(max_examples=200)
@given(s=st.floats(-10, 10))
def test_normalized_loss_in_unit_interval(s):
    n = feedback.normalize_score(s)
    assert 0.0 <= n <= 1.0
    assert 0.0 <= feedback.loss_sv(n) <= 1.0


def test_neglog_transform():
    assert feedback.loss_sv(1.0, "neglog") == 0.0
    assert feedback.loss_sv(math.exp(-2), "neglog") == pytest.approx(2.0)
    with pytest.raises(FeedbackConfigError):
        FeedbackConfig(loss_transform="square")


def test_combined_loss_examples():
    assert feedback.combined_loss(0.5, 0.2, 0.7) == 0.29
    assert feedback.combined_loss(0.123, 0.9, 0.0) == 0.123
    assert feedback.combined_loss(0.123, 0.9, 1.0) == 0.9


def test_combined_loss_matches_float_evaluation_on_1000_triples():
    rng = np.random.default_rng(0)
    for vc, sv, a in rng.random((1000, 3)):
        reference = (1.0 - a) * vc + a * sv
        assert abs(feedback.combined_loss(vc, sv, a) - reference) <= 1e-15


@settings(max_examples=100)
@given(vc=unit, sv=unit, a=unit, bump=st.floats(0.0, 1.0))
def test_combined_loss_monotone_and_between(vc, sv, a, bump):
    c = feedback.combined_loss(vc, sv, a)
    assert min(vc, sv) - 1e-15 <= c <= max(vc, sv) + 1e-15
    assert feedback.combined_loss(vc + bump, sv, a) >= c - 1e-15
    assert feedback.combined_loss(vc, sv + bump, a) >= c - 1e-15


def test_config_validation():
    for bad in (dict(alpha=1.5), dict(probes=0), dict(probe_scale=0.0), dict(perturbation="x"),
                dict(probe_dims=0), dict(epochs=-1)):
        with pytest.raises(FeedbackConfigError):
            FeedbackConfig(**bad)


# ---------------------------------------------------------------- SPSA

def test_spsa_zero_for_constant_oracle():
    y = np.random.default_rng(0).standard_normal((4, 3))
    for mode in ("element", "tied"):
        cfg = FeedbackConfig(perturbation=mode, probes=16)
        grad, used = feedback.estimate_sv_gradient(lambda c: 0.25, y, cfg, seed=1)
        assert used == 16 and np.all(grad == 0)


def test_spsa_quadratic_element_mode():
    # the cross-term noise on one coordinate has std |g_other| / sqrt(pairs),
    # here 1 % of the value, so 5 % is a 5-sigma bound
    y = np.array([[0.01, -0.02]])
    t = y - np.array([[0.25, -0.25]])
    cfg = FeedbackConfig(perturbation="element", probes=10_000, probe_scale=1e-3)
    grad, used = feedback.estimate_sv_gradient(lambda c: float(np.sum((c - t) ** 2)), y, cfg, seed=0)
    true = 2 * (y - t)
    assert used == 10_000
    assert np.all(np.abs(grad - true) <= 0.05 * np.abs(true))


def test_spsa_tied_mode_estimates_frame_mean_gradient():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((6, 4))
    y = rng.standard_normal((6, 4)) * 0.1
    cfg = FeedbackConfig(perturbation="tied", probes=4000, probe_scale=1e-3, probe_dims=3)
    grad, _ = feedback.estimate_sv_gradient(lambda c: float(np.sum((c - t) ** 2)), y, cfg, seed=0)
    col_mean = (2 * (y - t)).mean(axis=0)
    np.testing.assert_allclose(grad[:, :3], np.tile(col_mean[:3], (6, 1)), rtol=0.1)
    assert np.all(grad[:, 3] == 0)


def test_spsa_deterministic_and_list_structure():
    ys = [np.ones((3, 2)), np.zeros((5, 2))]
    fn = lambda c: float(sum(np.sum(np.sin(m)) for m in c))  # noqa: E731
    a, _ = feedback.estimate_sv_gradient(fn, ys, FeedbackConfig(), seed=7)
    b, _ = feedback.estimate_sv_gradient(fn, ys, FeedbackConfig(), seed=7)
    assert [g.shape for g in a] == [(3, 2), (5, 2)]
    for x, z in zip(a, b):
        np.testing.assert_array_equal(x, z)


def test_spsa_drops_failed_pairs(caplog):
    calls = {"n": 0}

    def flaky(c):
        calls["n"] += 1
        if calls["n"] % 4 == 1:
            raise ValueError("no voiced frames")
        return float(np.sum(c))

    _, used = feedback.estimate_sv_gradient(flaky, np.zeros((2, 2)), FeedbackConfig(probes=8), seed=0)
    assert used == 4

    def broken(c):
        raise ValueError("no voiced frames")

    with caplog.at_level(logging.WARNING, logger="fbvc.feedback"):
        grad, used = feedback.estimate_sv_gradient(broken, np.ones((2, 2)), FeedbackConfig(), seed=0)
    assert used == 0 and np.all(grad == 0)
    assert "every SPSA probe failed" in caplog.text


# ---------------------------------------------------------------- training

def toy_synth(mats, n_iters):
    return [Waveform(np.tanh(m[:, :4].reshape(-1)), 16000) for m in mats]


def toy_score(w, speaker):
    return float(np.tanh(np.mean(w.samples)))


def toy_dataset(n=7, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for u in range(n):
        p = rng.random((10, 42))
        items.append(TrainingItem(f"u{u}", FeatureSequence(p / p.sum(1, keepdims=True), "ppg", 62.5),
                                  FeatureSequence(rng.standard_normal((10, 6)), "mel", 62.5)))
    return items


def fresh_net():
    net = vcnet.init_net(42, 4, 6, 1, seed=3)
    net.set_target_stats(np.vstack([i.target.frames for i in toy_dataset()]))
    return net


def test_alpha_zero_matches_plain_training_bitwise():
    items = toy_dataset()
    plain, reports = vcnet.train_vc(fresh_net(), items, OptimizerState(), epochs=3, seed=5)
    fb, traces = feedback.train_feedback_vc(fresh_net(), items, toy_score, toy_synth, "tgt", OptimizerState(),
                                            FeedbackConfig(alpha=0.0), epochs=3, seed=5)
    for name in plain.params:
        assert plain.params[name].tobytes() == fb.params[name].tobytes()
    assert [r.loss_vc for r in reports] == [t.loss_vc for t in traces]


def test_trace_bookkeeping():
    items = toy_dataset(n=7)
    cfg = FeedbackConfig(alpha=0.7, probes=2)
    _, traces = feedback.train_feedback_vc(fresh_net(), items, toy_score, toy_synth, "tgt", OptimizerState(),
                                           cfg, epochs=2, seed=0)
    assert len(traces) == 2 * math.ceil(7 / 5)
    for t in traces:
        assert t.combined_loss == feedback.combined_loss(t.loss_vc, t.loss_sv, 0.7)
        assert 0.0 <= t.loss_sv <= 1.0 and t.probes_used == 2
    text = feedback.format_trace(traces)
    assert text.splitlines()[0] == " ".join(feedback.TRACE_COLUMNS)
    assert len(text.splitlines()) == len(traces) + 1


def test_zero_epochs_leaves_net_unchanged():
    net = fresh_net()
    before = {k: v.copy() for k, v in net.params.items()}
    _, traces = feedback.train_feedback_vc(net, toy_dataset(), toy_score, toy_synth, "tgt", OptimizerState(),
                                           FeedbackConfig(), epochs=0)
    assert traces == []
    assert all(np.array_equal(before[k], net.params[k]) for k in before)


def test_feedback_moves_score_up_on_toy_oracle():
    items = toy_dataset()
    cfg = FeedbackConfig(alpha=0.9, probes=8, probe_dims=4)
    oracle = FeatureScoreOracle(toy_score, toy_synth, "tgt", cfg)

    def mean_score(net):
        preds = vcnet.forward_minibatch(net, [i.ppg.frames for i in items],
                                        [net.normalize(i.target.frames) for i in items]).predictions
        return float(np.mean(oracle.raw_scores(preds)))

    base = mean_score(fresh_net())
    net, _ = feedback.train_feedback_vc(fresh_net(), items, toy_score, toy_synth, "tgt",
                                        OptimizerState(learning_rate=0.02), cfg, epochs=20, seed=0)
    assert mean_score(net) > base


def test_oracle_failure_degrades_to_vc_step(caplog):
    def refuse(w, speaker):
        raise ValueError("no voiced frames")

    items = toy_dataset(n=3)
    cfg = FeedbackConfig(alpha=0.5)
    with caplog.at_level(logging.WARNING, logger="fbvc.feedback"):
        fb, traces = feedback.train_feedback_vc(fresh_net(), items, refuse, toy_synth, "tgt", OptimizerState(),
                                                cfg, epochs=1, seed=2)
    assert "verifier query failed" in caplog.text
    assert traces[0].loss_sv is None and traces[0].combined_loss == traces[0].loss_vc
    plain, _ = vcnet.train_vc(fresh_net(), items, OptimizerState(), epochs=1, seed=2)
    assert all(np.array_equal(fb.params[k], plain.params[k]) for k in plain.params)


def test_evaluate_many_drops_failing_candidate():
    def score(w, speaker):
        if np.mean(w.samples) > 0.5:
            raise ValueError("no voiced frames")
        return 0.0

    oracle = FeatureScoreOracle(score, toy_synth, "tgt")
    out = oracle.evaluate_many([[np.zeros((2, 4))], [np.full((2, 4), 5.0)]])
    assert out == [0.5, None]


# ---------------------------------------------------------------- black-box opacity

def test_feedback_imports_nothing_from_the_verifier():
    import fbvc

    def local_imports(module):
        tree = ast.parse(inspect.getsource(module))
        names = set()
        for node in ast.walk(tree):
            if isinstance(node, ast.ImportFrom):
                if node.level:
                    names.update(a.name for a in node.names) if node.module is None else names.add(node.module)
                elif node.module and node.module.startswith("fbvc"):
                    names.add(node.module.split(".", 1)[1])
            elif isinstance(node, ast.Import):
                names.update(a.name.split(".", 1)[1] for a in node.names if a.name.startswith("fbvc."))
        return names

    seen, todo = set(), ["feedback"]
    while todo:
        name = todo.pop()
        if name in seen:
            continue
        seen.add(name)
        module = __import__(f"fbvc.{name}", fromlist=["_"])
        todo.extend(local_imports(module))
    assert "asv" not in seen and not any(n.startswith("harness") for n in seen)
    assert "vcnet" in seen and fbvc is not None
    assert "asv" not in inspect.getsource(feedback).lower().replace("asv_dsp", "")


def test_feedback_touches_only_the_score_call():
    class ScoreOnly:
        """Any attribute access on the verifier handle is an opacity violation."""
        def __init__(self):
            self.calls = 0

        def __call__(self, w, speaker):
            object.__setattr__(self, "calls", self.calls + 1)
            return 0.1

        def __getattribute__(self, name):
            if name in ("calls", "__call__", "__class__", "__setattr__", "__dict__"):
                return object.__getattribute__(self, name)
            raise AssertionError(f"feedback read verifier attribute {name!r}")

    proxy = ScoreOnly()
    feedback.train_feedback_vc(fresh_net(), toy_dataset(n=3), proxy, toy_synth, "tgt", OptimizerState(),
                               replace(FeedbackConfig(), probes=2), epochs=1)
    assert proxy.calls == 3 * (1 + 2 * 2)
