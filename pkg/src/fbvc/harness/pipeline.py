"""Experiment stages over a run directory.

Layout of a run directory::

    config.txt, config.sha256     canonical config and its hash
    corpus/                       toy corpus (gen-corpus)
    asv/verifier.txt              verifier checkpoint (train-asv, enroll)
    models/ppg_model.txt          posterior model
    models/base/<target>.net      shared pretrained conversion net
    models/{vc,vcfc}/<target>.net continued without / with score feedback
    models/{vc,vcfc}/<target>.trace.txt
    converted/{vc,vcfc}/<target>/<utt>.wav
    trials/scores.txt, trials/score_log.txt
    report.txt, report.tsv, distributions.txt

Both conversion systems continue from the same pretrained net with the same
seed and budget, so they differ only in ``feedback.alpha``.
"""
from __future__ import annotations

import logging
import shutil
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .. import asv, evaluation, feedback, ppg, vcnet
from ..dsp import read_wav, write_wav
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import generate_toy_corpus
from .manifest import Manifest

log = logging.getLogger(__name__)

SYSTEMS = {"vc": "spoof-vc", "vcfc": "spoof-vcfc"}


class PipelineError(RuntimeError):
    pass


def derive_seed(seed: int, *names: str) -> int:
    """Stable per-stage seed from the run seed and a few labels."""
    entropy = [seed] + [zlib.crc32(n.encode()) for n in names]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class RunDir:
    path: Path
    config: ExperimentConfig

    @classmethod
    def open(cls, path, config: ExperimentConfig | None = None) -> "RunDir":
        """Open or create a run directory.

        A new directory stores ``config`` (or the defaults). An existing one
        keeps its stored config; passing a config with a different hash is an
        error so a resumed run cannot silently mix settings.
        """
        path = Path(path)
        stored = path / "config.txt"
        if stored.exists():
            existing = load_config(stored)
            recorded = (path / "config.sha256").read_text().strip() if (path / "config.sha256").exists() else None
            if recorded is not None and recorded != existing.hash():
                raise ConfigError(f"{path}: config.txt does not match config.sha256 (edited by hand?)")
            if config is not None and config.hash() != existing.hash():
                raise ConfigError(f"config hash mismatch: run directory {path} has {existing.hash()[:12]}, "
                                  f"given config has {config.hash()[:12]}")
            return cls(path, existing)
        config = config or ExperimentConfig()
        path.mkdir(parents=True, exist_ok=True)
        stored.write_text(config.dumps())
        (path / "config.sha256").write_text(config.hash() + "\n")
        return cls(path, config)

    @property
    def seed(self) -> int:
        return self.config.run.seed

    @property
    def manifest_path(self) -> Path:
        p = Path(self.config.run.manifest)
        return p if p.is_absolute() else self.path / p

    def manifest(self) -> Manifest:
        if not self.manifest_path.exists():
            raise PipelineError(f"manifest {self.manifest_path} not found (run gen-corpus first)")
        return Manifest.read(self.manifest_path)

    def file(self, *parts) -> Path:
        p = self.path.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, *parts, hint: str) -> Path:
        p = self.path.joinpath(*parts)
        if not p.exists():
            raise PipelineError(f"{p} not found ({hint})")
        return p


# ---------------------------------------------------------------- stages

def gen_corpus(run: RunDir) -> Manifest:
    out = run.manifest_path.parent
    if out.exists():
        shutil.rmtree(out)
    return generate_toy_corpus(run.config.corpus, out)


def train_asv(run: RunDir) -> asv.BlackBoxVerifier:
    m = run.manifest()
    train = [m.load(r.utt_id) for r in m.select(split="train")]
    if not train:
        raise PipelineError("manifest has no train utterances")
    verifier = asv.train_verifier(train, run.config.asv_full, derive_seed(run.seed, "asv"))
    asv.save_verifier(run.file("asv", "verifier.txt"), verifier)
    return verifier


def enroll(run: RunDir) -> asv.BlackBoxVerifier:
    path = run.require("asv", "verifier.txt", hint="run train-asv first")
    verifier = asv.load_verifier(path)
    m = run.manifest()
    k = run.config.eval.enroll_utterances
    for target in m.targets:
        rows = m.select(target, "train")[:k]
        if len(rows) < k:
            log.warning("%s: only %d enrolment utterances available", target, len(rows))
        verifier.enroll(target, [m.load(r.utt_id) for r in rows])
    asv.save_verifier(path, verifier)
    return verifier


def _verifier(run: RunDir) -> asv.BlackBoxVerifier:
    verifier = asv.load_verifier(run.require("asv", "verifier.txt", hint="run train-asv and enroll first"))
    if not verifier.enrolled:
        raise PipelineError("verifier has no enrolled speakers (run enroll first)")
    return verifier


def posterior_model(run: RunDir):
    path = run.path / "models" / "ppg_model.txt"
    if path.exists():
        return ppg.load_posterior_model(path)
    cfg = run.config
    m = run.manifest()
    feats = [ppg.ppg_input_features(m.load(r.utt_id), cfg.dsp, cfg.ppg) for r in m.select(split="train")]
    model = ppg.fit_posterior_model(feats, cfg.ppg.n_components, derive_seed(run.seed, "ppg"),
                                    cfg.ppg.n_iter, cfg.ppg.variance_floor)
    ppg.save_posterior_model(run.file("models", "ppg_model.txt"), model)
    return model


def training_set(run: RunDir, target: str, model) -> list:
    cfg = run.config
    m = run.manifest()
    items = []
    for r in m.select(target, "train"):
        w = m.load(r.utt_id)
        items.append(vcnet.TrainingItem(
            r.utt_id, ppg.extract_ppg(ppg.ppg_input_features(w, cfg.dsp, cfg.ppg), model),
            vcnet.acoustic_targets(w, cfg.dsp)))
    if not items:
        raise PipelineError(f"no train utterances for target {target!r}")
    return items


def _targets(run: RunDir, targets=None) -> list:
    known = run.manifest().targets
    if not targets:
        return known
    unknown = [t for t in targets if t not in known]
    if unknown:
        raise PipelineError(f"not a target speaker: {', '.join(unknown)}")
    return list(targets)


def base_net(run: RunDir, target: str, items: list):
    """Pretrained conversion net shared by both systems (cached on disk)."""
    cfg = run.config.vcnet
    path = run.path / "models" / "base" / f"{target}.net"
    if path.exists():
        return vcnet.load_net(path)
    net = vcnet.init_net(items[0].ppg.dim, cfg.hidden_dim, items[0].target.dim, cfg.n_layers,
                         derive_seed(run.seed, "init", target), cfg.init_scale)
    net.set_target_stats(np.vstack([i.target.frames for i in items]))
    net, reports = vcnet.train_vc(net, items, cfg.optimizer(), cfg.epochs,
                                  derive_seed(run.seed, "base", target), cfg.loss_reduction)
    if reports:
        log.info("%s: base loss %.4f -> %.4f", target, reports[0].loss_vc, reports[-1].loss_vc)
    vcnet.save_net(run.file("models", "base", f"{target}.net"), net)
    return net


def _write_reports(path: Path, reports, header: str) -> None:
    lines = [header, "step loss_vc combined grad_norm"]
    lines += [f"{r.step_index} {r.loss_vc:.10g} {r.combined_loss:.10g} {r.grad_norm:.10g}" for r in reports]
    path.write_text("\n".join(lines) + "\n")


def train_vc(run: RunDir, targets=None) -> dict:
    """Continue each target's base net for ``feedback.epochs`` without feedback."""
    model = posterior_model(run)
    out = {}
    for target in _targets(run, targets):
        items = training_set(run, target, model)
        net = base_net(run, target, items)
        cfg = run.config
        net, reports = vcnet.train_vc(net, items, cfg.vcnet.optimizer(), cfg.feedback.epochs,
                                      derive_seed(run.seed, "feedback", target), cfg.vcnet.loss_reduction)
        vcnet.save_net(run.file("models", "vc", f"{target}.net"), net)
        _write_reports(run.file("models", "vc", f"{target}.trace.txt"), reports, f"# target {target}")
        out[target] = net
    return out


def train_vc_fc(run: RunDir, targets=None, alpha: float | None = None) -> dict:
    """Continue each base net for ``feedback.epochs`` with verifier feedback.

    ``alpha`` overrides ``feedback.alpha`` for this invocation only.
    """
    cfg = run.config
    fcfg = cfg.feedback if alpha is None else replace(cfg.feedback, alpha=alpha)
    verifier = _verifier(run)
    model = posterior_model(run)
    out = {}
    for target in _targets(run, targets):
        if target not in verifier.enrolled:
            raise PipelineError(f"target {target!r} is not enrolled")
        items = training_set(run, target, model)
        net = base_net(run, target, items)
        if fcfg.probe_dims is not None and fcfg.probe_dims > net.output_dim:
            raise PipelineError(f"feedback.probe_dims={fcfg.probe_dims} exceeds net output dim {net.output_dim}")
        frozen = net.copy()

        def synth(mats, n_iters, _net=frozen):
            # target statistics never change during training, so a frozen
            # copy denormalises exactly like the live net
            return vcnet.synthesize(_net, mats, cfg.dsp, n_iters, cfg.vcnet.mel_inversion)

        log_path = run.file("models", "vcfc", f"{target}.queries.txt")
        log_path.unlink(missing_ok=True)
        net, traces = feedback.train_feedback_vc(net, items, verifier.oracle(log_path), synth, target,
                                                 cfg.vcnet.optimizer(), fcfg, fcfg.epochs,
                                                 derive_seed(run.seed, "feedback", target), cfg.vcnet.loss_reduction)
        vcnet.save_net(run.file("models", "vcfc", f"{target}.net"), net)
        run.file("models", "vcfc", f"{target}.trace.txt").write_text(
            f"# target {target} alpha {fcfg.alpha!r}\n" + feedback.format_trace(traces))
        out[target] = net
    return out


def convert(run: RunDir, system: str, targets=None) -> int:
    """Convert every trial-split utterance towards every target."""
    if system not in SYSTEMS:
        raise PipelineError(f"unknown system {system!r}; expected one of {sorted(SYSTEMS)}")
    cfg = run.config
    model = posterior_model(run)
    m = run.manifest()
    sources = m.select(split="trial")
    count = 0
    for target in _targets(run, targets):
        net = vcnet.load_net(run.require("models", system, f"{target}.net", hint=f"run train-{system.replace('vcfc', 'vc-fc')} first"))
        out_dir = run.path / "converted" / system / target
        if out_dir.exists():
            shutil.rmtree(out_dir)
        out_dir.mkdir(parents=True)
        preds = []
        for r in sources:
            feats = ppg.ppg_input_features(m.load(r.utt_id), cfg.dsp, cfg.ppg)
            preds.append(vcnet.forward(net, ppg.extract_ppg(feats, model)).frames)
        waves = vcnet.synthesize(net, preds, cfg.dsp, method=cfg.vcnet.mel_inversion) if preds else []
        for r, w in zip(sources, waves):
            write_wav(out_dir / f"{r.utt_id}.wav", w)
            count += 1
    return count


def build_protocol(run: RunDir) -> tuple:
    """Trials plus a resolver from trial to waveform.

    Genuine trials are each target's validation utterances; imposter trials
    are every trial-split utterance against every target; spoof trials are
    the converted trial utterances of whichever systems exist on disk.
    """
    m = run.manifest()
    trials, paths = [], {}
    for target in m.targets:
        for r in m.select(target, "validation"):
            trials.append(evaluation.Trial(f"{target}:genuine:{r.utt_id}", target, r.utt_id, "genuine"))
            paths[trials[-1].trial_id] = m.resolve(r.utt_id)
        for r in m.select(split="trial"):
            trials.append(evaluation.Trial(f"{target}:imposter:{r.utt_id}", target, r.utt_id, "imposter"))
            paths[trials[-1].trial_id] = m.resolve(r.utt_id)
        for system, label in SYSTEMS.items():
            conv_dir = run.path / "converted" / system / target
            if not conv_dir.exists():
                continue
            for r in m.select(split="trial"):
                trials.append(evaluation.Trial(f"{target}:{label}:{r.utt_id}", target, r.utt_id, label))
                paths[trials[-1].trial_id] = conv_dir / f"{r.utt_id}.wav"

    def resolve(trial):
        p = paths[trial.trial_id]
        if not p.exists():
            raise FileNotFoundError(p)
        return read_wav(p)

    return trials, resolve


def run_trials(run: RunDir) -> evaluation.ScoreSet:
    verifier = _verifier(run)
    trials, resolve = build_protocol(run)
    scores = evaluation.run_trials(trials, verifier.oracle(), resolve)
    scores.meta = {"config": run.config.hash(), "seed": run.seed}
    scores.write(run.file("trials", "scores.txt"))
    run.file("trials", "score_log.txt").write_text("".join(
        f"{t} {spk} {s:.10f}\n" for t, spk, s in zip(scores.trial_ids, scores.targets, scores.scores)))
    return scores


def read_scores(run: RunDir) -> evaluation.ScoreSet:
    return evaluation.ScoreSet.read(run.require("trials", "scores.txt", hint="run run-trials first"))


def label_means(scores: evaluation.ScoreSet) -> dict:
    out = {}
    for label in evaluation.LABELS:
        s = scores.where(label)
        if s.size:
            out[label] = float(s.mean())
    return out


def report(run: RunDir) -> str:
    scores = read_scores(run)
    m = run.manifest()
    rows = evaluation.attack_report(scores, m.sex_of)
    text = evaluation.format_report(rows, failed=len(scores.failed))
    text += "mean score by trial type\n"
    text += "".join(f"  {label:<12}{mean:>10.4f}\n" for label, mean in label_means(scores).items())
    text += f"config {run.config.hash()}\n"
    run.file("report.txt").write_text(text)
    run.file("report.tsv").write_text(evaluation.format_report_tsv(rows))
    return text


def export_dist(run: RunDir, target: str | None = None) -> str:
    scores = read_scores(run)
    targets = None if target is None else {target}
    sets = {label: scores.where(label, targets) for label in evaluation.LABELS}
    sets = {k: v for k, v in sets.items() if v.size}
    text = evaluation.format_distributions(*evaluation.export_distributions(sets, run.config.eval.bins))
    name = "distributions.txt" if target is None else f"distributions_{target}.txt"
    run.file(name).write_text(text)
    return text


def run_pipeline(run: RunDir, targets=None) -> str:
    """Every stage in order; returns the report text."""
    if not run.manifest_path.exists():
        gen_corpus(run)
    train_asv(run)
    enroll(run)
    train_vc(run, targets)
    train_vc_fc(run, targets)
    for system in SYSTEMS:
        convert(run, system, targets)
    run_trials(run)
    export_dist(run)
    return report(run)
