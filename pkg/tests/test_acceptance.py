"""Acceptance checks. Each test records one line ``criterion N: PASS/FAIL``
in the terminal summary and also fails normally when its criterion fails."""

import copy
import itertools
import time

import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from conftest import am_setup
from ctxasr import acoustic as A
from ctxasr.checkpoint import tensors_hash
from ctxasr.cli import main
from ctxasr.config import BENCHMARK_AM
from ctxasr.features import pca_fit, pca_inverse, pca_transform
from ctxasr.lm import ContextLm, LmConfig, LmEnsemble, Vocabulary, train_folds
from ctxasr.nncore import (DenseLayer, LstmCellParams, cross_entropy, cross_entropy_grad,
                           dense_backward, dense_forward_train, grad_check, lstm_step_backward,
                           lstm_step_train)
from ctxasr.rescoring import (Hypothesis, NBestList, align, corpus_wer, edit_distance,
                              first_pass_choices, group_analysis, oracle_wer, rescore)
from ctxasr.synth import SyntheticSpec, synth_lm_corpus

AM_SEEDS = (0, 1, 2)
LM_SEEDS = (0, 1, 2, 3, 4)


# ---- 1: gradients -------------------------------------------------------------


def _dense_closure(rng, activation):
    layer = DenseLayer(rng.standard_normal((3, 4)), rng.standard_normal(3), activation)
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((5, 3))

    def closure():
        out, cache = dense_forward_train(layer, x)
        _, dw, db = dense_backward(layer, cache, w)
        return float(np.sum(out * w)), {"W": dw, "b": db}
    return closure, {"W": layer.weights, "b": layer.bias}


def _softmax_ce_closure(rng):
    layer = DenseLayer(rng.standard_normal((4, 3)), rng.standard_normal(4), "softmax")
    x = rng.standard_normal((6, 3))
    y = rng.integers(0, 4, size=6)

    def closure():
        p, cache = dense_forward_train(layer, x)
        _, dw, db = dense_backward(layer, cache, cross_entropy_grad(p, y), from_preactivation=True)
        return cross_entropy(p, y), {"W": dw, "b": db}
    return closure, {"W": layer.weights, "b": layer.bias}


def _lstm_closure(rng):
    cell = LstmCellParams.init(rng, 3, 4)
    cell.b += rng.standard_normal(cell.b.shape) * 0.5
    xs = rng.standard_normal((3, 2, 3))
    w = rng.standard_normal((2, 4))

    def closure():
        h = c = np.zeros((2, 4))
        caches = []
        for x in xs:
            h, c, cache = lstm_step_train(cell, x, h, c)
            caches.append(cache)
        g = {"wx": np.zeros_like(cell.wx), "wh": np.zeros_like(cell.wh), "b": np.zeros_like(cell.b)}
        dh, dc = w, np.zeros_like(c)
        for cache in reversed(caches):
            _, dh, dc, dwx, dwh, db = lstm_step_backward(cell, cache, dh, dc)
            g["wx"] += dwx
            g["wh"] += dwh
            g["b"] += db
        return float(np.sum(h * w)), g
    return closure, {"wx": cell.wx, "wh": cell.wh, "b": cell.b}


def _lm_context_closure(rng, seed):
    words = [f"w{k}" for k in range(9)]
    lm = ContextLm.init(rng, Vocabulary(words), 3, embed=4, hidden=3, conditioned=True,
                        inject_every_step=bool(seed % 2))
    sents = [[words[j] for j in rng.integers(0, 9, size=n)] for n in (1, 3)]
    ctx = [rng.standard_normal(3) for _ in sents]
    return (lambda: lm.loss_and_grads(sents, ctx)), lm.p


def _adaptnet_closure(rng):
    norm = A.FeatureNorm(np.zeros(A.FEATURE_DIM), np.ones(A.FEATURE_DIM))
    dnn = A.AcousticDnn.init(rng, norm, 3, hidden=6, layers=2)
    net = A.AdaptationNetwork.init(rng, 3, (4,))
    out = net.mlp.layers[-1]
    out.weights[:] = rng.standard_normal(out.weights.shape) * 0.3
    xn = rng.standard_normal((8, A.FEATURE_DIM))
    y = rng.integers(0, 3, size=8)
    utt = np.repeat([0, 1], 4)
    ctx = rng.standard_normal((2, 3))
    frozen = tensors_hash(dnn.tensors())

    def closure():
        return A.adaptation_loss_and_grads(dnn, net, xn, y, utt, ctx)
    return closure, net.params(), (dnn, frozen)


def test_criterion_01_gradients(record):
    start = time.time()
    worst = {}
    frozen_ok = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        checks = {f"dense-{a}": _dense_closure(rng, a)
                  for a in ("relu", "tanh", "sigmoid", "linear", "softmax")}
        checks["softmax-ce"] = _softmax_ce_closure(rng)
        checks["lstm"] = _lstm_closure(rng)
        checks["lm-context"] = _lm_context_closure(rng, seed)
        closure, params, (dnn, frozen) = _adaptnet_closure(rng)
        checks["adaptnet"] = (closure, params)
        for name, (closure, params) in checks.items():
            rep = grad_check(closure, params, tolerance=1e-4)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
        frozen_ok &= tensors_hash(dnn.tensors()) == frozen
    elapsed = time.time() - start
    top = max(worst, key=worst.get)
    passed = max(worst.values()) < 1e-4 and frozen_ok and elapsed < 60
    detail = f"20 seeds, {len(worst)} components, worst {top} {worst[top]:.2e}, {elapsed:.1f}s"
    assert record(1, passed, detail), worst


# ---- 2: edit distance vs exhaustive search ---------------------------------------


def test_criterion_02_wer_oracle(record):
    start = time.time()
    strings = [s for n in range(7) for s in itertools.product("abc", repeat=n)]
    index = {s: k for k, s in enumerate(strings)}
    rows, cols = [], []
    for s, k in index.items():
        for i in range(len(s)):
            rows.append(k)
            cols.append(index[s[:i] + s[i + 1:]])  # deletion; the reverse edge is an insertion
            for a in "abc":
                if a != s[i]:
                    rows.append(k)
                    cols.append(index[s[:i] + (a,) + s[i + 1:]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(strings),) * 2).tocsr()
    # Breadth-first search over single-edit moves. Restricting the graph to
    # lengths <= 6 loses nothing: some optimal edit script does its deletions
    # first, then substitutions, then insertions, so no intermediate string is
    # longer than the longer endpoint.
    oracle = shortest_path(graph, method="D", directed=False, unweighted=True).astype(int)
    mismatches = sum(edit_distance(s, t) != oracle[i, j]
                     for i, s in enumerate(strings) for j, t in enumerate(strings))
    elapsed = time.time() - start
    # the backtracking alignment must report the same error count (untimed)
    bad_align = sum(align(s, t).errors != oracle[i, j]
                    for i, s in enumerate(strings) for j, t in enumerate(strings))
    passed = mismatches == 0 and bad_align == 0 and elapsed < 30
    detail = (f"{len(strings) ** 2} pairs, {mismatches} mismatches ({bad_align} in alignments), "
              f"{elapsed:.1f}s")
    assert record(2, passed, detail)


# ---- 3 and 4: acoustic adaptation --------------------------------------------------


def _train_three(seed, shift, concat=True):
    data, ctx = am_setup(seed=seed, pca_dim=100, shift=shift)
    cfg = A.AmConfig(seed=seed, **BENCHMARK_AM)
    si = A.train_si_dnn(data.train, cfg)
    vat = A.train_vat(data.train, ctx, cfg, si=si)
    acc = {"si": A.frame_accuracy(si, data.test), "vat": A.frame_accuracy(vat, data.test, ctx)}
    if concat:
        acc["concat"] = A.frame_accuracy(A.train_concat_baseline(data.train, ctx, cfg),
                                         data.test, ctx)
    return acc


def test_criterion_03_vat_ordering(record):
    start = time.time()
    ok, parts = True, []
    for seed in AM_SEEDS:
        acc = _train_three(seed, 3.0)
        ok &= acc["vat"] >= acc["concat"] >= acc["si"] and acc["vat"] - acc["si"] >= 0.10
        parts.append(f"s{seed} {acc['si']:.3f}/{acc['concat']:.3f}/{acc['vat']:.3f}")
    for seed in AM_SEEDS:
        acc = _train_three(seed, 0.0, concat=False)
        ok &= abs(acc["vat"] - acc["si"]) <= 0.02
        parts.append(f"s{seed} shift0 |d|={abs(acc['vat'] - acc['si']):.3f}")
    elapsed = time.time() - start
    passed = ok and elapsed < 180
    detail = "SI/concat/VAT " + ", ".join(parts) + f", {elapsed:.0f}s"
    assert record(3, passed, detail)


def test_criterion_04_freeze_contracts(record):
    results = []
    for seed in range(5):
        data, ctx = am_setup(seed=seed, pca_dim=10, utts_per_context=8, frames_per_utt=10)
        cfg = A.AmConfig(seed=seed, epochs=2, hidden=16, layers=2, adapt_epochs=2, vat_epochs=2,
                         adapt_passes=2, adapt_lr=0.3)
        si = A.train_si_dnn(data.train, cfg)
        ok, dnn, net = True, si, None
        for _ in range(cfg.adapt_passes):
            dnn_hash = tensors_hash(dnn.tensors())
            stage2 = A.train_adaptation_net(dnn, data.train, ctx, cfg, adaptnet=net)
            ok &= tensors_hash(dnn.tensors()) == dnn_hash
            net_hash = tensors_hash(stage2.adaptnet.tensors())
            vat = A.retrain_vat_dnn(stage2, data.train, ctx, cfg)
            ok &= tensors_hash(vat.adaptnet.tensors()) == net_hash
            ok &= tensors_hash(vat.dnn.tensors()) != dnn_hash  # stage 3 did train the DNN
            dnn, net = vat.dnn, copy.deepcopy(vat.adaptnet)
        results.append(ok)
    detail = f"{sum(results)}/{len(results)} runs x 2 passes kept frozen hashes"
    assert record(4, all(results), detail)


# ---- 5 and 7: context language models ----------------------------------------------


def _lm_pair(seed, overlap):
    data = synth_lm_corpus(SyntheticSpec(overlap=overlap), seed)
    out = {}
    for cond in (False, True):
        res = train_folds(data.sentences, data.contexts, LmConfig(seed=seed, conditioned=cond), 5)
        out[cond] = res
    return data, out


LM_TRAIN_SECONDS = {}


@pytest.fixture(scope="module")
def lm_runs():
    out = {}
    for seed in LM_SEEDS:
        t0 = time.time()
        out[seed] = _lm_pair(seed, 0.2)
        LM_TRAIN_SECONDS[seed] = time.time() - t0
    return out


def test_criterion_05_context_lm_perplexity(record, lm_runs):
    start = time.time()
    ok, parts = True, []
    for seed in AM_SEEDS:
        _, res = lm_runs[seed]
        u, c = res[False].heldout_ppl, res[True].heldout_ppl
        red = (u - c) / u
        _, flat = _lm_pair(seed, 1.0)
        gap = abs(flat[False].heldout_ppl - flat[True].heldout_ppl) / flat[False].heldout_ppl
        ok &= red >= 0.15 and gap <= 0.02
        parts.append(f"s{seed} red {red:.3f} gap@1.0 {gap:.3f}")
    # count the overlap-0.2 training done once in the shared fixture
    elapsed = time.time() - start + sum(LM_TRAIN_SECONDS[s] for s in AM_SEEDS)
    detail = ", ".join(parts) + f", {elapsed:.0f}s"
    assert record(5, ok and elapsed < 240, detail)


def test_criterion_07_rescoring_direction(record, lm_runs):
    ok, parts = True, []
    for seed in LM_SEEDS:
        data, res = lm_runs[seed]
        lists = data.nbest
        first = corpus_wer(lists, first_pass_choices(lists))
        rates = {}
        for cond in (False, True):
            chosen = rescore(lists, LmEnsemble(res[cond].models), data.contexts)
            rates[cond] = corpus_wer(lists, chosen)
        ok &= rates[True] < rates[False] and rates[True] < first
        parts.append(f"s{seed} {first:.3f}/{rates[False]:.3f}/{rates[True]:.3f}")
    assert record(7, ok, "first/uncond/cond " + ", ".join(parts))


# ---- 6: rescoring sanity ------------------------------------------------------------


def test_criterion_06_rescoring_sanity(record, lm_runs):
    data, res = lm_runs[0]
    lists = data.nbest
    model = res[True].models[0]
    first = first_pass_choices(lists)
    a = rescore(lists, model, data.contexts, lm_weight=0.0) == first \
        and corpus_wer(lists, rescore(lists, model, data.contexts, lm_weight=0.0)) \
        == corpus_wer(lists, first)
    refs = {nb.utt_id: nb.reference for nb in lists}
    oracle_lm = lambda words, ref: -float(edit_distance(ref, words))
    b_rate = corpus_wer(lists, rescore(lists, oracle_lm, refs, lm_weight=1e6))
    b = b_rate == oracle_wer(lists)
    single = rescore(lists, LmEnsemble([model]), data.contexts)
    copies = [model.copy() for _ in range(5)]
    c = rescore(lists, LmEnsemble(copies), data.contexts) == single \
        and rescore(lists, LmEnsemble(copies, "prob"), data.contexts) == single
    detail = f"(a) {a}, (b) {b} at {b_rate:.3f}, (c) {c}"
    assert record(6, a and b and c, detail)


# ---- 8: PCA -------------------------------------------------------------------


def test_criterion_08_pca(record):
    worst = {"orth": 0.0, "diag": 0.0, "recon": 0.0}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((300, 60)) * rng.uniform(0.1, 3.0, size=60)
        model = pca_fit(x, 20)
        worst["orth"] = max(worst["orth"], np.abs(model.proj @ model.proj.T - np.eye(20)).max())
        cov = np.cov(pca_transform(model, x), rowvar=False)
        off = np.abs(cov - np.diag(np.diag(cov)))
        scale = np.sqrt(np.outer(model.evals, model.evals))
        worst["diag"] = max(worst["diag"], (off / scale).max())
        low = rng.standard_normal((50, 7)) @ rng.standard_normal((7, 40)) + rng.standard_normal(40)
        m7 = pca_fit(low, 7)
        worst["recon"] = max(worst["recon"], np.abs(pca_inverse(m7, pca_transform(m7, low)) - low).max())
    passed = worst["orth"] <= 1e-8 and worst["diag"] <= 1e-6 and worst["recon"] <= 1e-8
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(8, passed, detail)


# ---- 9: determinism -------------------------------------------------------------


def test_criterion_09_determinism(record, tmp_path):
    slowest = 0.0
    for name in ("a", "b"):
        t0 = time.time()
        assert main(["run", "--out-dir", str(tmp_path / name), "--seed", "0"]) == 0
        slowest = max(slowest, time.time() - t0)
    diffs = []
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        left, right = (tmp_path / "a" / rel).read_bytes(), (tmp_path / "b" / rel).read_bytes()
        if rel.name == "manifest.txt":  # stage wall-clock timings legitimately differ
            keep = lambda t: [l for l in t.decode().splitlines() if not l.startswith("time.")]
            left, right = keep(left), keep(right)
        if left != right:
            diffs.append(str(rel))
    ckpts = sum(1 for f in files if f.suffix == ".ckpt")
    detail = f"{len(files)} files ({ckpts} checkpoints), {len(diffs)} differ, " \
             f"slowest run {slowest:.0f}s"
    assert record(9, not diffs and ckpts > 0 and slowest < 600, detail), diffs


# ---- 10: group analysis -----------------------------------------------------------


def test_criterion_10_group_analysis(record):
    def nb(utt, ref, hyps, group):
        return NBestList(utt, ref.split(), [Hypothesis(h.split(), -k, 0.0) for k, h in
                                            enumerate(hyps)], group)
    lists = [
        # typical-indoors: errors exist but every alternative is as bad
        nb("t1", "put the pan", ["put a pan", "put an pan"], "typical-indoors"),
        nb("t2", "stir it", ["stir it"], "typical-indoors"),
        nb("t3", "add salt now", ["ad salt now", "add sal now"], "typical-indoors"),
        # other: fixable errors 3 + 2 + 1 = 6 at rank 0
        nb("o1", "drill the hole", ["grill a whole", "drill the hole"], "other"),
        nb("o2", "tighten the bolt", ["lighten a bolt", "tighten the bolt"], "other"),
        nb("o3", "sand it down", ["band it down", "sand it down", "sand it"], "other"),
        # a list where the rescorer fixes one of two errors
        nb("o4", "cut the board", ["cut a bored", "cut the bored"], "other"),
    ]
    good = {"drill the hole", "tighten the bolt", "sand it down", "cut the bored"}
    scorer = lambda words, ctx: 0.0 if " ".join(words) in good else -10.0
    chosen = rescore(lists, scorer)
    report = group_analysis(lists, chosen)
    other, indoor = report.row("other"), report.row("typical-indoors")
    # hand count: other baseline 3 + 2 + 1 + 2 = 8 errors, rescored 0 + 0 + 0 + 1 = 1
    expect = (8 - 1) / 8
    passed = (indoor.rel_reduction == 0.0 and indoor.baseline_errors == 2
              and other.baseline_errors == 8 and other.rescored_errors == 1
              and other.rel_reduction == expect)
    detail = f"typical-indoors {indoor.rel_reduction!r}, other {other.rel_reduction!r} (expect 7/8)"
    assert record(10, passed, detail)
