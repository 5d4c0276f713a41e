import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbvc import evaluation as ev
from fbvc.evaluation import EvalError, ScoreSet, Trial

from oracles import brute_force_eer

scores_list = st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=30)


# ---------------------------------------------------------------- EER

def test_eer_perfect_separation():
    assert ev.compute_eer([2, 3, 4], [0, 1])[0] == 0.0


def test_eer_identical_sets():
    assert ev.compute_eer([0.1, 0.5, 0.9], [0.9, 0.1, 0.5])[0] == 0.5
    assert ev.compute_eer([0.3], [0.3])[0] == 0.5


def test_eer_reversed_sets():
    assert ev.compute_eer([0, 1], [2, 3, 4])[0] == 1.0


def test_eer_empty_set():
    with pytest.raises(EvalError):
        ev.compute_eer([], [1.0])


def test_eer_matches_brute_force_on_100_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gen = rng.normal(1.0, 1.0, 50)
        imp = rng.normal(0.0, 1.0, 50)
        if rng.random() < 0.3:
            # coarse grid forces ties across and within sets
            gen, imp = np.round(gen, 1), np.round(imp, 1)
        assert abs(ev.compute_eer(gen, imp)[0] - brute_force_eer(gen, imp)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(gen=scores_list, imp=scores_list)
def test_eer_properties(gen, imp):
    eer, _ = ev.compute_eer(gen, imp)
    assert 0.0 <= eer <= 1.0
    assert abs(eer - brute_force_eer(gen, imp)) <= 1e-9
    # a transform that keeps every ordering (and every tie) keeps the EER;
    # scaling by a power of two is exact in binary floating point
    assert ev.compute_eer(np.multiply(gen, 4.0), np.multiply(imp, 4.0))[0] == eer


# ---------------------------------------------------------------- trials

def protocol_of(n):
    return [Trial(f"t{i}", "spk", f"u{i}", "genuine" if i % 2 else "imposter") for i in range(n)]


def test_run_trials_counts_and_empty():
    assert len(ev.run_trials([], lambda w, s: 0.0, lambda t: None)) == 0
    out = ev.run_trials(protocol_of(6), lambda w, s: float(w), lambda t: int(t.utterance[1:]) / 10)
    assert len(out) == 6 and out.scores[3] == 0.3 and out.labels[:2] == ["imposter", "genuine"]


def test_run_trials_missing_audio_lists_ids():
    def resolve(t):
        if t.trial_id in ("t1", "t4"):
            raise FileNotFoundError(t.utterance)
        return 0

    with pytest.raises(EvalError, match="t1, t4"):
        ev.run_trials(protocol_of(6), lambda w, s: 0.0, resolve)


def test_run_trials_records_failures():
    def score(w, s):
        if w == 2:
            raise ValueError("no voiced frames")
        return 0.5

    out = ev.run_trials(protocol_of(4), score, lambda t: int(t.utterance[1:]))
    assert out.failed == ["t2"] and len(out) == 3


def test_run_trials_rejects_duplicate_ids():
    p = protocol_of(2)
    with pytest.raises(EvalError):
        ev.run_trials(p + p[:1], lambda w, s: 0.0, lambda t: 0)


def test_score_file_round_trip(tmp_path):
    s = ScoreSet(meta={"config": "abc", "seed": 3})
    s.add("tgt_m01:genuine:u1", "tgt_m01", "genuine", 0.25)
    s.add("tgt_m01:imposter:u2", "tgt_m01", "imposter", -0.125)
    s.write(tmp_path / "s.txt")
    text = (tmp_path / "s.txt").read_text()
    assert text.startswith("# config abc\n# seed 3\n")
    back = ScoreSet.read(tmp_path / "s.txt")
    assert back.scores == s.scores and back.targets == s.targets and back.meta == {"config": "abc", "seed": "3"}
    (tmp_path / "bad.txt").write_text("a b\n")
    with pytest.raises(EvalError):
        ScoreSet.read(tmp_path / "bad.txt")


def test_non_finite_score_rejected():
    with pytest.raises(EvalError):
        ScoreSet().add("t", "s", "genuine", float("nan"))


# ---------------------------------------------------------------- report

def synthetic_scores(shift_vcfc=0.0):
    rng = np.random.default_rng(1)
    s = ScoreSet()
    for tgt in ("tm", "tf"):
        for i in range(20):
            s.add(f"{tgt}:g:{i}", tgt, "genuine", rng.normal(0.6, 0.1))
            s.add(f"{tgt}:i:{i}", tgt, "imposter", rng.normal(0.0, 0.1))
            v = rng.normal(0.4, 0.1)
            s.add(f"{tgt}:v:{i}", tgt, "spoof-vc", v)
            s.add(f"{tgt}:f:{i}", tgt, "spoof-vcfc", v + shift_vcfc)
    return s


def sex_of(spk):
    return spk[1]


def test_report_rows_and_identical_columns():
    rows = ev.attack_report(synthetic_scores(), sex_of)
    assert [r[0] for r in rows] == ["Male", "Female", "Overall"]
    for _, cells, note in rows:
        assert cells["PPG-VC"] == cells["PPG-VC-FC"] and note == ""
        assert cells["Imposter"] < cells["PPG-VC"]
    text = ev.format_report(rows, failed=2)
    assert text.splitlines()[1].split() == ["Subset", "Imposter", "PPG-VC", "PPG-VC-FC"]
    assert "failed trials excluded: 2" in text
    tsv = ev.format_report_tsv(rows).splitlines()
    assert tsv[0] == "subset\tImposter\tPPG-VC\tPPG-VC-FC" and len(tsv) == 4


def test_report_shift_raises_vcfc_eer():
    cells = dict((g, c) for g, c, _ in ev.attack_report(synthetic_scores(0.2), sex_of))
    assert cells["Overall"]["PPG-VC-FC"] > cells["Overall"]["PPG-VC"]


def test_report_omits_or_notes_missing_groups():
    s = synthetic_scores()
    keep = [i for i, t in enumerate(s.targets) if t == "tm"]
    male_only = ScoreSet(*[[col[i] for i in keep] for col in (s.trial_ids, s.targets, s.labels, s.scores)])
    rows = ev.attack_report(male_only, sex_of)
    assert [r[0] for r in rows] == ["Male", "Overall"]
    no_fc = ScoreSet()
    for t, tg, lab, sc in zip(s.trial_ids, s.targets, s.labels, s.scores):
        if lab != "spoof-vcfc":
            no_fc.add(t, tg, lab, sc)
    rows = ev.attack_report(no_fc, sex_of)
    assert rows[0][1]["PPG-VC-FC"] is None and "spoof-vcfc" in rows[0][2]


# ---------------------------------------------------------------- distributions

def test_single_score_two_bins():
    edges, counts, stats = ev.export_distributions({"vc": [0.3]}, bins=2)
    assert len(edges) == 3 and np.count_nonzero(counts["vc"]) == 1
    assert stats["vc"] == (1, 0.3, 0.0)


@settings(max_examples=30)
@given(a=scores_list, b=scores_list, bins=st.integers(2, 40))
def test_counts_sum_to_set_size(a, b, bins):
    edges, counts, _ = ev.export_distributions({"vc": a, "vcfc": b}, bins)
    assert counts["vc"].sum() == len(a) and counts["vcfc"].sum() == len(b)
    assert np.all(np.diff(edges) > 0)


def test_distribution_table_format():
    text = ev.format_distributions(*ev.export_distributions({"vc": [0.0, 1.0], "vcfc": [1.0]}, bins=2))
    lines = text.splitlines()
    assert lines[0] == "bin_low bin_high count_vc count_vcfc"
    assert lines[1:3] == ["0.000000 0.500000 1 0", "0.500000 1.000000 1 1"]
    assert lines[-1] == "# vcfc n=1 mean=1.000000 std=0.000000"
    with pytest.raises(EvalError):
        ev.export_distributions({"vc": [0.0]}, bins=1)
