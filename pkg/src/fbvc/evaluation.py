"""Trial protocols, equal error rate, score distributions and the attack report."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LABELS = ("genuine", "imposter", "spoof-vc", "spoof-vcfc")
ATTACKS = (("Imposter", "imposter"), ("PPG-VC", "spoof-vc"), ("PPG-VC-FC", "spoof-vcfc"))

# overall EER (%) reported for the full-scale experiment; context only
REFERENCE_OVERALL_EER = {"Imposter": 2.72, "PPG-VC": 29.25, "PPG-VC-FC": 30.73}


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    trial_id: str
    target_speaker: str
    utterance: str
    label: str


@dataclass
class ScoreSet:
    trial_ids: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scores)

    def add(self, trial_id, target, label, score):
        if not np.isfinite(score):
            raise EvalError(f"trial {trial_id}: non-finite score")
        self.trial_ids.append(trial_id)
        self.targets.append(target)
        self.labels.append(label)
        self.scores.append(float(score))

    def where(self, label=None, targets=None) -> np.ndarray:
        return np.array([s for s, lab, tgt in zip(self.scores, self.labels, self.targets)
                         if (label is None or lab == label) and (targets is None or tgt in targets)])

    def write(self, path) -> None:
        """``trial_id label score`` lines, preceded by ``# key value`` metadata."""
        lines = [f"# {k} {v}" for k, v in self.meta.items()]
        lines += [f"{t} {lab} {s:.10f}" for t, lab, s in zip(self.trial_ids, self.labels, self.scores)]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def read(cls, path, target_of=None) -> "ScoreSet":
        """Parse a score file; ``target_of(trial_id)`` recovers the claimed speaker if given."""
        out = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                out.meta[key] = value
                continue
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise EvalError(f"{path}:{lineno}: expected 'trial_id label score'")
            trial_id, label, score = parts
            target = target_of(trial_id) if target_of else trial_id.split(":")[0]
            out.add(trial_id, target, label, float(score))
        return out


def run_trials(protocol, score_fn, resolve) -> ScoreSet:
    """Score every trial through ``score_fn(waveform, speaker_id)``.

    ``resolve(trial)`` returns the test waveform. Trials whose audio cannot be
    resolved abort the run with the full list; verifier ``ValueError``s (e.g.
    no voiced frames) are recorded in ``failed`` and skipped.
    """
    ids = [t.trial_id for t in protocol]
    if len(set(ids)) != len(ids):
        raise EvalError("trial ids must be unique")
    waves, missing = [], []
    for trial in protocol:
        try:
            waves.append(resolve(trial))
        except (FileNotFoundError, KeyError):
            missing.append(trial.trial_id)
    if missing:
        raise EvalError(f"audio missing for trials: {', '.join(missing)}")
    out = ScoreSet()
    for trial, w in zip(protocol, waves):
        try:
            score = score_fn(w, trial.target_speaker)
        except ValueError as exc:
            log.warning("trial %s failed: %s", trial.trial_id, exc)
            out.failed.append(trial.trial_id)
            continue
        out.add(trial.trial_id, trial.target_speaker, trial.label, score)
    return out


def compute_eer(genuine, imposter):
    """Equal error rate and its threshold, accepting when ``score >= threshold``.

    FAR and FRR are swept over every distinct score; the crossing is found by
    linear interpolation between the two neighbouring operating points and
    evaluated in exact rational arithmetic. Ties resolve to the lowest
    threshold. Returns ``(eer, threshold)``.
    """
    gen = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(imposter, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise EvalError("EER needs non-empty genuine and imposter score sets")
    n_g, n_i = gen.size, imp.size
    thresholds = np.unique(np.concatenate([gen, imp]))
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    false_rej = np.searchsorted(gen, thresholds, side="left")  # genuine below threshold
    false_acc = n_i - np.searchsorted(imp, thresholds, side="left")  # imposters at/above
    # FAR - FRR scaled by n_g * n_i, exact in integers
    diff = false_acc.astype(np.int64) * n_g - false_rej.astype(np.int64) * n_i
    k = int(np.argmax(diff <= 0))
    if k == 0 or diff[k] == 0:
        return float(Fraction(int(false_acc[k]), n_i)), float(thresholds[k])
    d0, d1 = int(diff[k - 1]), int(diff[k])
    lam = Fraction(d0, d0 - d1)
    far0, far1 = Fraction(int(false_acc[k - 1]), n_i), Fraction(int(false_acc[k]), n_i)
    eer = far0 + lam * (far1 - far0)
    thr = thresholds[k - 1] + float(lam) * (thresholds[k] - thresholds[k - 1])
    return float(eer), float(thr)


def attack_report(scores: ScoreSet, sex_of) -> list:
    """EER (fraction) per attack type for Male / Female / Overall rows.

    ``sex_of(speaker_id)`` returns ``"m"`` or ``"f"``. Overall pools all
    trials. Each row is ``(group, {attack_name: eer or None}, note)``.
    """
    groups = [("Male", {t for t in set(scores.targets) if sex_of(t) == "m"}),
              ("Female", {t for t in set(scores.targets) if sex_of(t) == "f"}),
              ("Overall", set(scores.targets))]
    rows = []
    for name, members in groups:
        genuine = scores.where("genuine", members)
        cells, missing = {}, []
        for attack, label in ATTACKS:
            imp = scores.where(label, members)
            if genuine.size and imp.size:
                cells[attack] = compute_eer(genuine, imp)[0]
            else:
                cells[attack] = None
                missing.append(label)
        if not genuine.size:
            missing.insert(0, "genuine")
        if all(v is None for v in cells.values()):
            log.info("report group %s omitted: no %s trials", name, "/".join(missing))
            continue
        note = f"missing {', '.join(missing)}" if missing else ""
        rows.append((name, cells, note))
    return rows


def format_report(rows, failed: int = 0) -> str:
    def cell(v):
        return "-" if v is None else f"{100 * v:.2f}"

    names = [a for a, _ in ATTACKS]
    lines = ["EER (%) under attack", f"{'Subset':<10}" + "".join(f"{n:>12}" for n in names)]
    for group, cells, note in rows:
        lines.append(f"{group:<10}" + "".join(f"{cell(cells[n]):>12}" for n in names)
                     + (f"  ({note})" if note else ""))
    ref = REFERENCE_OVERALL_EER
    lines.append(f"{'Reference':<10}" + "".join(f"{ref[n]:>12.2f}" for n in names)
                 + "  (full-scale corpus, overall; context only)")
    lines.append(f"failed trials excluded: {failed}")
    return "\n".join(lines) + "\n"


def format_report_tsv(rows) -> str:
    names = [a for a, _ in ATTACKS]
    lines = ["\t".join(["subset"] + names)]
    for group, cells, _ in rows:
        lines.append("\t".join([group] + ["" if cells[n] is None else f"{cells[n]:.6f}" for n in names]))
    return "\n".join(lines) + "\n"


def export_distributions(sets: dict, bins: int = 30):
    """Histogram several named score arrays on one shared axis.

    Returns ``(edges, counts, stats)`` with ``counts[name]`` the per-bin
    counts and ``stats[name] = (n, mean, std)``.
    """
    if bins < 2:
        raise EvalError("need at least 2 bins")
    arrays = {name: np.asarray(v, dtype=np.float64) for name, v in sets.items()}
    pooled = np.concatenate([a for a in arrays.values()]) if arrays else np.zeros(0)
    lo, hi = (float(pooled.min()), float(pooled.max())) if pooled.size else (0.0, 1.0)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {name: np.histogram(a, bins=edges)[0] for name, a in arrays.items()}
    stats = {name: (a.size, float(a.mean()) if a.size else float("nan"),
                    float(a.std()) if a.size else float("nan")) for name, a in arrays.items()}
    return edges, counts, stats


def format_distributions(edges, counts, stats) -> str:
    names = list(counts)
    lines = ["bin_low bin_high " + " ".join(f"count_{n}" for n in names)]
    for b in range(len(edges) - 1):
        lines.append(f"{edges[b]:.6f} {edges[b + 1]:.6f} " + " ".join(str(int(counts[n][b])) for n in names))
    for n in names:
        size, mean, std = stats[n]
        lines.append(f"# {n} n={size} mean={mean:.6f} std={std:.6f}")
    return "\n".join(lines) + "\n"
