"""Command-line entry point: ``fbvc <subcommand> ...``.

Every subcommand except ``eer`` works on a run directory. The first command
to touch a directory stores its config there; later commands reuse it, and a
``--config``/``--set`` that hashes differently is rejected.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from importlib import resources

from .. import evaluation
from . import pipeline
from .config import ConfigError, load_config, parse_config

log = logging.getLogger("fbvc")

FIXTURES = {"perfect-separation": "perfect_separation_scores.txt"}


def _config(args):
    if args.config is None and not args.set:
        return None
    base = load_config(args.config) if args.config else None
    overrides = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides.append(item)
    return parse_config("\n".join(overrides), base)


def _run(args) -> pipeline.RunDir:
    run = pipeline.RunDir.open(args.run_dir, _config(args))
    log.info("run %s config %s", run.path, run.config.hash()[:12])
    return run


def cmd_gen_corpus(args):
    m = pipeline.gen_corpus(_run(args))
    print(f"wrote {len(m.rows)} utterances, {len(m.speakers())} speakers")


def cmd_train_asv(args):
    v = pipeline.train_asv(_run(args))
    print(f"verifier: {v.ubm.weights.size} components, embedding dim {v.projection.matrix.shape[0]}")


def cmd_enroll(args):
    v = pipeline.enroll(_run(args))
    print(f"enrolled {len(v.enrolled)} speakers: {' '.join(sorted(v.enrolled))}")


def cmd_train_vc(args):
    nets = pipeline.train_vc(_run(args), args.target)
    print(f"trained {len(nets)} conversion nets")


def cmd_train_vc_fc(args):
    nets = pipeline.train_vc_fc(_run(args), args.target, args.alpha)
    print(f"trained {len(nets)} feedback-controlled conversion nets")


def cmd_convert(args):
    n = pipeline.convert(_run(args), args.system, args.target)
    print(f"converted {n} utterances with {args.system}")


def cmd_run_trials(args):
    scores = pipeline.run_trials(_run(args))
    print(f"scored {len(scores)} trials ({len(scores.failed)} failed)")


def cmd_eer(args):
    if args.fixture:
        path = resources.files("fbvc.data").joinpath(FIXTURES[args.fixture])
        scores = evaluation.ScoreSet.read(path)
    elif args.scores:
        scores = evaluation.ScoreSet.read(args.scores)
    else:
        raise ConfigError("give a score file or --fixture")
    eer, thr = evaluation.compute_eer(scores.where(args.positive), scores.where(args.negative))
    print(f"{eer:.4f}")
    if args.threshold:
        print(f"threshold {thr:.6f}")


def cmd_report(args):
    sys.stdout.write(pipeline.report(_run(args)))


def cmd_export_dist(args):
    text = pipeline.export_dist(_run(args), args.target)
    if args.print:
        sys.stdout.write(text)


def cmd_pipeline(args):
    t0 = time.perf_counter()
    sys.stdout.write(pipeline.run_pipeline(_run(args), args.target))
    print(f"pipeline finished in {time.perf_counter() - t0:.1f} s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbvc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_cmd(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--run-dir", required=True, help="run directory (created if missing)")
        p.add_argument("--config", help="config file with 'section.key = value' lines")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.set_defaults(func=func)
        return p

    run_cmd("gen-corpus", cmd_gen_corpus, "generate the synthetic toy corpus and its manifest")
    run_cmd("train-asv", cmd_train_asv, "train the verifier's background model and projection")
    run_cmd("enroll", cmd_enroll, "enrol every target speaker in the verifier")
    for name, func, text in (("train-vc", cmd_train_vc, "train conversion nets on the MSE loss only"),
                             ("train-vc-fc", cmd_train_vc_fc, "train conversion nets with verifier score feedback")):
        p = run_cmd(name, func, text)
        p.add_argument("--target", action="append", help="restrict to one target (repeatable)")
    p = sub.choices["train-vc-fc"]
    p.add_argument("--alpha", type=float, help="feedback weight for this invocation (default: feedback.alpha)")
    p = run_cmd("convert", cmd_convert, "convert trial utterances towards each target")
    p.add_argument("--system", choices=sorted(pipeline.SYSTEMS), required=True)
    p.add_argument("--target", action="append", help="restrict to one target (repeatable)")
    run_cmd("run-trials", cmd_run_trials, "score the genuine, imposter and spoof trial protocol")
    run_cmd("report", cmd_report, "write the EER-under-attack report")
    p = run_cmd("export-dist", cmd_export_dist, "write score histograms on a shared axis")
    p.add_argument("--target", help="only this target's trials")
    p.add_argument("--print", action="store_true", help="also print the table")
    p = run_cmd("pipeline", cmd_pipeline, "run every stage in order")
    p.add_argument("--target", action="append", help="restrict training and conversion to one target")

    p = sub.add_parser("eer", help="equal error rate of a score file", description="equal error rate of a score file")
    p.add_argument("scores", nargs="?", help="'trial_id label score' file")
    p.add_argument("--fixture", choices=sorted(FIXTURES), help="use a bundled score file")
    p.add_argument("--positive", default="genuine", help="label of target trials (default: genuine)")
    p.add_argument("--negative", default="imposter", help="label of non-target trials (default: imposter)")
    p.add_argument("--threshold", action="store_true", help="also print the EER threshold")
    p.set_defaults(func=cmd_eer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"fbvc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
