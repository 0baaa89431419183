"""``ctxasr`` command-line entry point.

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines;
keys are the long flag names (dashes or underscores) and explicit flags win.
Exit codes: 0 success, 2 validation error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import acoustic as am
from .checkpoint import load_checkpoint, save_checkpoint
from .config import BENCHMARK_AM, ExperimentConfig, _coerce, _parse_bool, read_config_file
from .errors import CtxAsrError, DataError, ValidationError
from .features import (PcaModel, build_context_table, pca_fit, read_context_table, read_manifest,
                       read_posteriors, write_context_table)
from .lm import LmConfig, load_lm_dir, perplexity, read_lm_corpus, save_lm_dir, train_folds
from .rescoring import (corpus_wer, first_pass_choices, group_analysis, oracle_wer, read_nbest,
                        rescore)
from .synth import SyntheticSpec, synth_am_corpus, synth_lm_corpus

log = logging.getLogger("ctxasr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# name -> (type, default); value None means "not given" until config/defaults resolve it
OPTIONS: Dict[str, Dict[str, tuple]] = {
    "synth-am": {"out_dir": (str, None), "seed": (int, None)},
    "synth-lm": {"out_dir": (str, None), "seed": (int, None)},
    "pca-fit": {"object": (str, None), "place": (str, None), "manifest": (str, None),
                "k": (int, 100), "seed": (int, None), "out": (str, None)},
    "context-table": {"object": (str, None), "place": (str, None), "manifest": (str, None),
                      "pca": (str, None), "seed": (int, None), "out": (str, None)},
    "train-am": {"stage": (str, None), "corpus": (str, None), "context": (str, None),
                 "init": (str, None), "seed": (int, None), "out": (str, None),
                 "epochs": (int, BENCHMARK_AM["epochs"]), "lr": (float, BENCHMARK_AM["lr"]),
                 "batch": (int, 64), "hidden": (int, 128), "layers": (int, 5),
                 "adapt_lr": (float, BENCHMARK_AM["adapt_lr"]),
                 "adapt_epochs": (int, BENCHMARK_AM["adapt_epochs"]),
                 "vat_lr": (float, BENCHMARK_AM["vat_lr"]),
                 "vat_epochs": (int, BENCHMARK_AM["vat_epochs"]),
                 "passes": (int, BENCHMARK_AM["adapt_passes"])},
    "train-lm": {"corpus": (str, None), "context": (str, None), "conditioned": (bool, False),
                 "folds": (int, 5), "seed": (int, None), "out_dir": (str, None),
                 "epochs": (int, 10), "lr": (float, 0.01), "batch": (int, 16),
                 "embed": (int, 32), "hidden": (int, 64), "dropout": (float, 0.5),
                 "clip": (float, 100.0), "inject_every_step": (bool, False)},
    "rescore": {"nbest": (str, None), "refs": (str, None), "groups": (str, None),
                "lm_dir": (str, None), "context": (str, None), "aw": (float, 1.0),
                "lw": (float, 1.0), "fw": (float, 0.0), "ensemble_mode": (str, "log"),
                "report": (str, None)},
    "eval": {"model": (str, None), "lm_dir": (str, None), "corpus": (str, None),
             "context": (str, None), "out": (str, None)},
    "run": {"out_dir": (str, None), "seed": (int, None)},
}
REQUIRED = {
    "synth-am": ("out_dir", "seed"),
    "synth-lm": ("out_dir", "seed"),
    "pca-fit": ("object", "manifest", "seed", "out"),
    "context-table": ("object", "manifest", "seed", "out"),
    "train-am": ("stage", "corpus", "seed", "out"),
    "train-lm": ("corpus", "seed", "out_dir"),
    "rescore": ("nbest", "refs", "lm_dir", "report"),
    "eval": ("corpus",),
    "run": ("out_dir", "seed"),
}
INPUT_FILES = ("object", "place", "manifest", "pca", "corpus", "context", "init", "nbest", "refs",
               "groups", "model")
INPUT_DIRS = ("lm_dir",)
HELP = {
    "synth-am": "generate the context-shifted synthetic acoustic corpus",
    "synth-lm": "generate the topic LM corpus, contexts and n-best lists",
    "pca-fit": "fit PCA on selected-frame posteriors of the given utterances",
    "context-table": "build per-utterance context vectors",
    "train-am": "train an acoustic model stage",
    "train-lm": "train k-fold (optionally context-conditioned) LSTM LMs",
    "rescore": "rescore n-best lists with an LM ensemble and report WER",
    "eval": "frame accuracy of an acoustic model or perplexity of an LM ensemble",
    "run": "run the full desk pipeline end to end",
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxasr", description="Visual-context adaptation for speech recognition.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=HELP[cmd])
        p.add_argument("--config", help="key = value file; explicit flags override it")
        for name, (typ, default) in opts.items():
            extra = f" (default {default})" if default is not None else ""
            if typ is bool:
                p.add_argument(_flag(name), dest=name, action="store_const", const=True,
                               default=None, help=f"enable {name.replace('_', ' ')}")
            else:
                p.add_argument(_flag(name), dest=name, type=typ, default=None,
                               help=f"{name.replace('_', ' ')}{extra}")
        if cmd in ("synth-am", "synth-lm", "run"):
            p.add_argument("--set", dest="overrides", action="append", default=[],
                           metavar="KEY=VALUE", help="override one configuration key")
    return parser


def _resolve(cmd: str, args) -> Dict[str, str]:
    """Fill unset flags from the config file and defaults.

    Returns config-file keys that are not flags of ``cmd`` (passed on to the
    synthetic spec or experiment config by the commands that accept them).
    """
    opts = OPTIONS[cmd]
    extra: Dict[str, str] = {}
    if args.config:
        for key, text in read_config_file(args.config).items():
            name = key.replace("-", "_")
            if name in opts:
                if getattr(args, name) is None:
                    typ = opts[name][0]
                    try:
                        value = _parse_bool(text) if typ is bool else typ(text)
                    except ValueError as exc:
                        raise ValidationError(f"config key {key!r}: {exc}") from exc
                    setattr(args, name, value)
            else:
                extra[key] = text
    for text in getattr(args, "overrides", []):
        key, eq, value = text.partition("=")
        if not eq:
            raise ValidationError(f"--set expects KEY=VALUE, got {text!r}")
        extra[key.strip()] = value.strip()
    for name, (_, default) in opts.items():
        if getattr(args, name) is None:
            setattr(args, name, default)
    missing = [_flag(n) for n in REQUIRED[cmd] if getattr(args, n) is None]
    if missing:
        raise ValidationError(f"{cmd}: missing required option(s) {', '.join(missing)}")
    for name in INPUT_FILES:
        path = getattr(args, name, None)
        if name in opts and path is not None and not Path(path).is_file():
            raise ValidationError(f"{cmd}: {_flag(name)} {path} does not exist")
    for name in INPUT_DIRS:
        path = getattr(args, name, None)
        if name in opts and path is not None and not Path(path).is_dir():
            raise ValidationError(f"{cmd}: {_flag(name)} {path} is not a directory")
    if extra and cmd not in ("synth-am", "synth-lm", "run"):
        raise ValidationError(f"{cmd}: unknown configuration keys {', '.join(sorted(extra))}")
    return extra


def _synth_spec(extra: Dict[str, str]) -> SyntheticSpec:
    spec_fields = {f.name: f for f in fields(SyntheticSpec)}
    unknown = sorted(k for k in extra if k not in spec_fields)
    if unknown:
        raise ValidationError(f"unknown synthetic spec keys: {', '.join(unknown)}")
    values = {}
    for k, text in extra.items():
        try:
            values[k] = _coerce(str(spec_fields[k].type), text)
        except ValueError as exc:
            raise ValidationError(f"synthetic spec key {k!r}: {exc}") from exc
    return SyntheticSpec(**values)


def _emit(lines: List[str], out: Optional[str]):
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth_am(args, extra):
    spec = _synth_spec(extra)
    spec.validate()
    synth_am_corpus(spec, args.seed).write(args.out_dir)


def cmd_synth_lm(args, extra):
    spec = _synth_spec(extra)
    spec.validate(lm=True)
    synth_lm_corpus(spec, args.seed).write(args.out_dir)


def _posteriors(args):
    out = {"object": read_posteriors(args.object, "object")}
    if args.place:
        out["place"] = read_posteriors(args.place, "place")
    return out


def cmd_pca_fit(args, extra):
    if args.k < 1:
        raise ValidationError("pca-fit: --k must be >= 1")
    manifest = read_manifest(args.manifest)
    raw = build_context_table(manifest, _posteriors(args), None, args.seed)
    model = pca_fit(np.stack([raw[u].values for u in sorted(raw)]), args.k)
    print(save_checkpoint(args.out, model.tensors()))


def cmd_context_table(args, extra):
    pca = PcaModel.from_tensors(load_checkpoint(args.pca)) if args.pca else None
    table = build_context_table(read_manifest(args.manifest), _posteriors(args), pca, args.seed)
    write_context_table(args.out, table)


def _am_config(args) -> am.AmConfig:
    return am.AmConfig(seed=args.seed, epochs=args.epochs, lr=args.lr, batch=args.batch,
                       hidden=args.hidden, layers=args.layers, adapt_lr=args.adapt_lr,
                       adapt_epochs=args.adapt_epochs, vat_lr=args.vat_lr,
                       vat_epochs=args.vat_epochs, adapt_passes=args.passes)


def cmd_train_am(args, extra):
    stages = ("si", "adapt", "vat", "concat")
    if args.stage not in stages:
        raise ValidationError(f"train-am: --stage must be one of {', '.join(stages)}")
    if args.stage != "si" and args.context is None:
        raise ValidationError(f"train-am: --stage {args.stage} requires --context")
    if args.stage == "adapt" and args.init is None:
        raise ValidationError("train-am: --stage adapt requires --init with an SI checkpoint")
    if min(args.epochs, args.batch, args.passes) < 1 or args.lr <= 0:
        raise ValidationError("train-am: epochs, batch and passes must be >= 1 and lr > 0")
    config = _am_config(args)
    corpus, n_classes = read_am_corpus_checked(args.corpus)
    config = replace(config, n_classes=n_classes)
    contexts = read_context_table(args.context) if args.context else None
    init = am.load_am_model(load_checkpoint(args.init)) if args.init else None

    if args.stage == "si":
        model = am.train_si_dnn(corpus, config)
    elif args.stage == "concat":
        model = am.train_concat_baseline(corpus, contexts, config)
    elif args.stage == "adapt":
        if not isinstance(init, am.AcousticDnn):
            raise ValidationError("train-am: --init for stage adapt must be an SI checkpoint")
        model = am.train_adaptation_net(init, corpus, contexts, config)
    else:
        if isinstance(init, am.VatModel):
            model = am.retrain_vat_dnn(init, corpus, contexts, config)
        else:
            model = am.train_vat(corpus, contexts, config, si=init)
    digest = save_checkpoint(args.out, am.am_model_tensors(model))
    print(f"LOSS\ttrain\t{am.corpus_loss(model, corpus, contexts):.6f}")
    print(f"SHA256\t{args.out}\t{digest}")


def read_am_corpus_checked(path):
    corpus, n_classes = am.read_am_corpus(path)
    if not corpus:
        raise DataError(f"acoustic corpus {path} has no utterances")
    return corpus, n_classes


def cmd_train_lm(args, extra):
    if args.conditioned and args.context is None:
        raise ValidationError("train-lm: --conditioned requires --context")
    if args.folds < 2:
        raise ValidationError("train-lm: --folds must be >= 2")
    config = LmConfig(embed=args.embed, hidden=args.hidden, epochs=args.epochs, lr=args.lr,
                      batch=args.batch, clip=args.clip, dropout=args.dropout, seed=args.seed,
                      conditioned=args.conditioned, inject_every_step=args.inject_every_step)
    sentences = read_lm_corpus(args.corpus)
    contexts = read_context_table(args.context) if args.context else None
    res = train_folds(sentences, contexts, config, args.folds)
    hashes = save_lm_dir(args.out_dir, res.models)
    lines = [f"PPL_HELDOUT\tall\t{res.heldout_ppl:.6f}"]
    lines += [f"SHA256\t{name}\t{digest}" for name, digest in sorted(hashes.items())]
    _emit(lines, str(Path(args.out_dir) / "train_lm.txt"))


def cmd_rescore(args, extra):
    if args.ensemble_mode not in ("log", "prob"):
        raise ValidationError("rescore: --ensemble-mode must be 'log' or 'prob'")
    ens = load_lm_dir(args.lm_dir, args.ensemble_mode)
    if ens.conditioned and args.context is None:
        raise ValidationError("rescore: the LMs in --lm-dir are conditioned; --context is required")
    lists = read_nbest(args.nbest, args.refs, args.groups)
    contexts = read_context_table(args.context) if args.context else None
    chosen = rescore(lists, ens, contexts, args.aw, args.lw, args.fw)
    first = first_pass_choices(lists)
    lines = [f"WER_FIRST_PASS\tall\t{corpus_wer(lists, first)!r}",
             f"WER_ORACLE\tall\t{oracle_wer(lists)!r}"]
    if args.groups:
        report = group_analysis(lists, chosen, first)
        text = report.table() + "\n\n" + "\n".join(lines + report.metric_lines()) + "\n"
    else:
        lines.append(f"WER_RESCORED\tall\t{corpus_wer(lists, chosen)!r}")
        text = "\n".join(lines) + "\n"
    Path(args.report).write_text(text)
    sys.stdout.write(text)


def cmd_eval(args, extra):
    if (args.model is None) == (args.lm_dir is None):
        raise ValidationError("eval: give exactly one of --model or --lm-dir")
    contexts = read_context_table(args.context) if args.context else None
    if args.model:
        model = am.load_am_model(load_checkpoint(args.model))
        corpus, _ = read_am_corpus_checked(args.corpus)
        lines = [f"FRAME_ACC\tall\t{am.frame_accuracy(model, corpus, contexts):.6f}",
                 f"LOSS\tall\t{am.corpus_loss(model, corpus, contexts):.6f}"]
    else:
        ens = load_lm_dir(args.lm_dir)
        if ens.conditioned and contexts is None:
            raise ValidationError("eval: the LMs in --lm-dir are conditioned; --context is required")
        sentences = read_lm_corpus(args.corpus)
        ids = sorted(sentences)
        if ens.conditioned:
            missing = [u for u in ids if u not in contexts]
            if missing:
                raise DataError(f"missing context vectors for utterances: {', '.join(missing)}")
        ctx = [contexts[u] for u in ids] if ens.conditioned else None
        ppls = [perplexity(m, [sentences[u] for u in ids], ctx) for m in ens.models]
        lines = [f"PPL\tfold{k}\t{p:.6f}" for k, p in enumerate(ppls)]
        lines.append(f"PPL\tmean\t{float(np.mean(ppls)):.6f}")
    _emit(lines, args.out)


def cmd_run(args, extra):
    from .pipeline import run_experiment
    config = ExperimentConfig().with_updates(extra)
    config = replace(config, seed=args.seed).validate()
    for line in run_experiment(config, args.out_dir):
        print(line)


COMMANDS = {
    "synth-am": cmd_synth_am, "synth-lm": cmd_synth_lm, "pca-fit": cmd_pca_fit,
    "context-table": cmd_context_table, "train-am": cmd_train_am, "train-lm": cmd_train_lm,
    "rescore": cmd_rescore, "eval": cmd_eval, "run": cmd_run,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        extra = _resolve(args.command, args)
        COMMANDS[args.command](args, extra)
    except CtxAsrError as exc:
        print(f"ctxasr: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ctxasr: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
