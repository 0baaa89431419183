"""End-to-end desk experiment: synthetic data, PCA contexts, acoustic
adaptation, context LMs and n-best rescoring.

Outputs under the run directory::

    am/ lm/                 synthetic corpora
    models/                 acoustic, PCA and LM checkpoints
    metrics.txt             METRIC<TAB>group<TAB>value lines (deterministic)
    report.txt              group WER table
    manifest.txt            seed, config, checkpoint hashes, stage timings
"""

from __future__ import annotations

import hashlib
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import acoustic as am
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .errors import CtxAsrError
from .features import build_context_table, pca_fit, write_context_table
from .lm import LmEnsemble, save_lm_dir, train_folds
from .rescoring import (corpus_wer, first_pass_choices, group_analysis, oracle_wer, rescore)
from .synth import synth_am_corpus, synth_lm_corpus

log = logging.getLogger(__name__)


def _metric(name: str, group: str, value: float) -> str:
    return f"{name}\t{group}\t{value:.6f}"


class RunManifest:
    """Key/value record of a run, rewritten after every stage."""

    def __init__(self, path: Path, config: ExperimentConfig):
        self.path = path
        self.config = config
        self.timings: Dict[str, float] = {}
        self.hashes: Dict[str, str] = {}
        self.status = "INCOMPLETE"
        self.failure = None

    def write(self):
        lines = [f"status = {self.status}", f"seed = {self.config.seed}",
                 f"config_hash = {self.config.hash()}"]
        if self.failure:
            lines += [f"failed_stage = {self.failure[0]}", f"error = {self.failure[1]}"]
        lines += [f"time.{k} = {v:.3f}" for k, v in self.timings.items()]
        lines += [f"sha256.{k} = {v}" for k, v in sorted(self.hashes.items())]
        lines += [f"config.{k} = {v}" for k, v in sorted(self.config.items().items())]
        self.path.write_text("\n".join(lines) + "\n")


class StageError(CtxAsrError):
    def __init__(self, stage: str, cause: CtxAsrError):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code


def run_experiment(config: ExperimentConfig, out_dir) -> List[str]:
    """Run every stage and return the metric lines written to ``metrics.txt``."""
    config.validate()
    out = Path(out_dir)
    models = out / "models"
    models.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.txt", config)
    manifest.write()
    seed = config.seed

    @contextmanager
    def stage(name):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            yield
        except CtxAsrError as exc:
            manifest.failure = (name, str(exc).replace("\n", " "))
            manifest.write()
            raise StageError(name, exc) from exc
        manifest.timings[name] = time.perf_counter() - t0
        manifest.write()

    def save(name, tensors):
        manifest.hashes[f"models/{name}"] = save_checkpoint(models / name, tensors)

    metrics: List[str] = []

    with stage("synth-am"):
        data = synth_am_corpus(config.synth, seed)
        data.write(out / "am")
    with stage("pca-fit"):
        raw = build_context_table({u.utt_id: data.manifest[u.utt_id] for u in data.train},
                                  data.posteriors, None, seed)
        pca = pca_fit(np.stack([raw[u].values for u in sorted(raw)]), config.pca_dim)
        save("pca.ckpt", pca.tensors())
    with stage("context-table"):
        contexts = build_context_table(data.manifest, data.posteriors, pca, seed)
        write_context_table(out / "am" / "context.txt", contexts)
    amc = config.am_config()
    with stage("train-am-si"):
        si = am.train_si_dnn(data.train, amc)
        save("si.ckpt", am.am_model_tensors(si))
    with stage("train-am-vat"):
        vat = am.train_vat(data.train, contexts, amc, si=si)
        save("vat.ckpt", am.am_model_tensors(vat))
    with stage("train-am-concat"):
        concat = am.train_concat_baseline(data.train, contexts, amc)
        save("concat.ckpt", am.am_model_tensors(concat))
    with stage("eval-am"):
        for name, model in (("SI", si), ("CONCAT", concat), ("VAT", vat)):
            metrics.append(_metric(f"FRAME_ACC_{name}", "test",
                                   am.frame_accuracy(model, data.test, contexts)))

    with stage("synth-lm"):
        lmdata = synth_lm_corpus(config.synth, seed)
        lmdata.write(out / "lm")
    fold_results = {}
    for cond in (False, True):
        tag = "cond" if cond else "uncond"
        with stage(f"train-lm-{tag}"):
            res = train_folds(lmdata.sentences, lmdata.contexts, config.lm_config(cond),
                              config.folds)
            for name, digest in save_lm_dir(models / f"lm_{tag}", res.models).items():
                manifest.hashes[f"models/lm_{tag}/{name}"] = digest
            fold_results[cond] = res
            metrics.append(_metric(f"PPL_{tag.upper()}", "heldout", res.heldout_ppl))
    ppl_u, ppl_c = fold_results[False].heldout_ppl, fold_results[True].heldout_ppl
    metrics.append(_metric("PPL_REL_REDUCTION", "heldout", (ppl_u - ppl_c) / ppl_u))

    with stage("rescore"):
        lists = lmdata.nbest
        first = first_pass_choices(lists)
        metrics.append(_metric("WER_FIRST_PASS", "all", corpus_wer(lists, first)))
        metrics.append(_metric("WER_ORACLE", "all", oracle_wer(lists)))
        chosen = {}
        for cond in (False, True):
            ens = LmEnsemble(fold_results[cond].models, config.ensemble_mode)
            chosen[cond] = rescore(lists, ens, lmdata.contexts, config.aw, config.lw, config.fw)
            tag = "COND" if cond else "UNCOND"
            metrics.append(_metric(f"WER_RESCORED_{tag}", "all", corpus_wer(lists, chosen[cond])))
        report = group_analysis(lists, chosen[True], first)
        metrics.extend(report.metric_lines())
        (out / "report.txt").write_text(report.render())

    text = "\n".join(metrics) + "\n"
    (out / "metrics.txt").write_text(text)
    manifest.hashes["metrics.txt"] = hashlib.sha256(text.encode()).hexdigest()
    manifest.status = "COMPLETE"
    manifest.write()
    return metrics
