"""Command-line entry point: ``nawasr {synth-data,train,eval,compare,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, experiment_to_text, load_experiment
from .dataset import build_manifest, split_by_label, synth_corpus
from .metrics import evaluate, format_table
from .model import Model
from .textnorm import Vocab
from .train import PRESETS, cached_loader, get_preset, run_experiment, write_reports
from .verify import gradcheck_suite

log = logging.getLogger("nawasr")

GRADCHECK_TOL = 1e-4


def _fraction(text):
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in [0, 1), got {text}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _presets(text):
    names = [n.strip() for n in text.split(",") if n.strip()]
    unknown = [n for n in names if n not in PRESETS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown preset(s) {', '.join(unknown)}; choose from {', '.join(PRESETS)}")
    if len(set(names)) != len(names):
        raise argparse.ArgumentTypeError(f"duplicate preset names in {text!r}")
    if not names:
        raise argparse.ArgumentTypeError("no presets given")
    return names


def _progress(name, summary):
    log.info(
        "[%s] epoch %d  l_ctc %.4f  l_ce %.4f  alpha %.5f  val_wer %.4f  val_noise_acc %.3f",
        name,
        summary["epoch"],
        summary["mean_l_ctc"],
        summary["mean_l_ce"],
        summary["alpha"],
        summary["validation_wer"],
        summary["validation_noise_accuracy"],
    )


def _override(exp, args):
    hyper = exp.hyper
    if getattr(args, "paper_hparams", False):
        hyper = hyper.paper()
    if args.seed is not None:
        hyper = replace(hyper, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        hyper = replace(hyper, epochs=args.epochs)
    return replace(exp, hyper=hyper)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    splits = synth_corpus(args.out, args.train_utts, args.eval_utts, args.noise_frac, args.seed or 0)
    for name, entries in splits.items():
        speech, noise = split_by_label(entries)
        print(f"{name:<10} {len(entries):5d} entries  ({len(speech)} speech, {len(noise)} noise)")
    Vocab.from_alphabet().save(Path(args.out) / "vocab.txt")
    return 0


def cmd_train(args):
    exp = _override(load_experiment(args.config), args)
    report = run_experiment(exp, args.data, args.out, resume=args.resume, progress=_progress)
    print(Path(args.out, "report.txt").read_text(), end="")
    log.debug("%s", report)
    return 0


def cmd_eval(args):
    exp = load_experiment(args.config)
    vocab = Vocab.from_alphabet()
    model = Model.load(args.checkpoint, exp.model)
    speech, noise = split_by_label(build_manifest(Path(args.data) / args.split))
    report = evaluate(model, speech, noise, vocab, cached_loader(), name=exp.name)
    if args.out:
        write_reports(Path(args.out), [report])
    print(format_table([report]), end="")
    return 0


def cmd_compare(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in args.presets:
        exp = _override(get_preset(name), args)
        t0 = time.time()
        reports.append(run_experiment(exp, args.data, out / name, progress=_progress))
        log.info("[%s] finished in %.1fs", name, time.time() - t0)
    write_reports(out / "comparison", reports)
    print((out / "comparison.txt").read_text(), end="")
    return 0


def cmd_gradcheck(args):
    res = gradcheck_suite(seed=args.seed or 0, eps=args.eps, corrupt=args.corrupt)
    print(f"parameters checked: {res.n_params}")
    print(f"max relative error: {res.max_error:.3e} (worst: {res.worst})")
    if res.max_error <= GRADCHECK_TOL:
        print("gradcheck OK")
        return 0
    print(f"gradcheck FAILED: {res.worst} exceeds {GRADCHECK_TOL:g}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# parser


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="nawasr", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus", formatter_class=fmt)
    p.add_argument("--out", "--data", dest="out", required=True, help="output corpus directory")
    p.add_argument("--train-utts", type=_positive_int, default=95, help="speech utterances in train")
    p.add_argument("--eval-utts", type=_positive_int, default=20, help="items per evaluation split (half noise)")
    p.add_argument("--noise-frac", type=_fraction, default=0.05, help="noise share of the train split")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train one configuration", formatter_class=fmt)
    p.add_argument("--config", required=True, help="key = value experiment file")
    p.add_argument("--data", required=True, help="corpus directory from synth-data")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--epochs", type=_positive_int, default=None, help="override the config epochs")
    p.add_argument("--paper-hparams", action="store_true", help="learning rate 1e-5, 30 epochs")
    p.add_argument("--resume", action="store_true", help="continue from state.nawv in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--config", required=True, help="experiment file the checkpoint was trained with")
    p.add_argument("--checkpoint", required=True, help="NAWV1 checkpoint")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"), help="split to score")
    p.add_argument("--out", default=None, help="report path stem (writes .txt and .jsonl)")
    p.add_argument("--seed", type=int, default=None, help="unused; accepted for uniformity")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="run presets on one corpus and tabulate", formatter_class=fmt)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--presets", type=_presets, default=list(PRESETS), help="comma-separated preset names")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="training seed shared by all presets")
    p.add_argument("--epochs", type=_positive_int, default=None, help="override preset epochs")
    p.add_argument("--paper-hparams", action="store_true", help="learning rate 1e-5, 30 epochs")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="model and data seed")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"nawasr {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"nawasr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
