"""Context-conditioned two-layer LSTM language model.

Sentences are framed as ``<s> w1 ... wn </s>``. A conditioned model adds a
linear projection of the utterance context vector to the embedding of the
first input token (optionally to every input token). Scores are natural-log
probabilities.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from . import nncore
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, DataError, ShapeError
from .nncore import (LOG_PROB_FLOOR, LstmCellParams, Optimizer, clip_gradients, glorot_uniform,
                     global_norm, log_softmax, lstm_step_backward, lstm_step_train)

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
RESERVED = (BOS, EOS, UNK)


class Vocabulary:
    """Reserved tokens sit at indices 0, 1, 2; other words follow by
    decreasing count, then alphabetically."""

    def __init__(self, words: Sequence[str] = ()):
        self.itos: List[str] = list(RESERVED)
        for w in words:
            if w in RESERVED:
                raise ContractError(f"word {w!r} collides with a reserved token")
            self.itos.append(w)
        self.stoi = {w: k for k, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ContractError("vocabulary words must be unique")

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for s in sentences for w in s)
        kept = [w for w, n in counts.items() if n >= min_count and w not in RESERVED]
        kept.sort(key=lambda w: (-counts[w], w))
        return cls(kept)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, word: str) -> int:
        return self.stoi.get(word, 2)

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.index(w) for w in words]

    def write(self, path):
        with open(path, "w") as fh:
            for w in self.itos[len(RESERVED):]:
                fh.write(w + "\n")

    @classmethod
    def read(cls, path) -> "Vocabulary":
        try:
            with open(path) as fh:
                return cls([line.rstrip("\n") for line in fh if line.strip()])
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc


@dataclass
class LmConfig:
    embed: int = 32
    hidden: int = 64
    epochs: int = 10
    lr: float = 0.01
    batch: int = 16
    clip: float = 100.0
    dropout: float = 0.5
    seed: int = 0
    conditioned: bool = False
    inject_every_step: bool = False
    optimizer: str = "adagrad"


def _ctx_array(ctx) -> np.ndarray:
    return np.asarray(getattr(ctx, "values", ctx), dtype=np.float64).reshape(-1)


class ContextLm:
    PARAM_NAMES = ("emb", "l1.wx", "l1.wh", "l1.b", "l2.wx", "l2.wh", "l2.b",
                   "out.W", "out.b", "ctx.W")

    def __init__(self, vocab: Vocabulary, params: Dict[str, np.ndarray], conditioned: bool,
                 dropout: float = 0.0, inject_every_step: bool = False):
        self.vocab = vocab
        self.p = params
        self.conditioned = bool(conditioned)
        self.dropout = float(dropout)
        self.inject_every_step = bool(inject_every_step)
        v, e = params["emb"].shape
        h = params["l1.wh"].shape[1]
        if v != len(vocab):
            raise ShapeError(f"embedding has {v} rows for a vocabulary of {len(vocab)}")
        if params["out.W"].shape != (v, h) or params["ctx.W"].shape[0] != e:
            raise ShapeError("output or context projection shape does not match embedding/hidden")
        self.l1 = LstmCellParams(params["l1.wx"], params["l1.wh"], params["l1.b"])
        self.l2 = LstmCellParams(params["l2.wx"], params["l2.wh"], params["l2.b"])
        # keep the dict and the cell objects pointing at the same arrays
        for k, cell in (("l1", self.l1), ("l2", self.l2)):
            self.p[f"{k}.wx"], self.p[f"{k}.wh"], self.p[f"{k}.b"] = cell.wx, cell.wh, cell.b

    @classmethod
    def init(cls, rng, vocab: Vocabulary, context_dim: int, embed: int = 32, hidden: int = 64,
             conditioned: bool = False, dropout: float = 0.0, inject_every_step: bool = False):
        v = len(vocab)
        l1 = LstmCellParams.init(rng, embed, hidden)
        l2 = LstmCellParams.init(rng, hidden, hidden)
        params = {
            "emb": glorot_uniform(rng, v, embed),
            "l1.wx": l1.wx, "l1.wh": l1.wh, "l1.b": l1.b,
            "l2.wx": l2.wx, "l2.wh": l2.wh, "l2.b": l2.b,
            "out.W": glorot_uniform(rng, v, hidden),
            "out.b": np.zeros(v),
            "ctx.W": glorot_uniform(rng, embed, max(int(context_dim), 1)),
        }
        return cls(vocab, params, conditioned, dropout, inject_every_step)

    @property
    def embed_dim(self) -> int:
        return self.p["emb"].shape[1]

    @property
    def hidden(self) -> int:
        return self.l1.hidden

    @property
    def context_dim(self) -> int:
        return self.p["ctx.W"].shape[1]

    def params(self) -> Dict[str, np.ndarray]:
        return self.p

    def copy(self) -> "ContextLm":
        return ContextLm(self.vocab, {k: v.copy() for k, v in self.p.items()}, self.conditioned,
                         self.dropout, self.inject_every_step)

    # ---- persistence -------------------------------------------------------

    def tensors(self) -> Dict[str, np.ndarray]:
        out = dict(self.p)
        out["flags"] = np.array([float(self.conditioned), self.dropout,
                                 float(self.inject_every_step)])
        return out

    @classmethod
    def from_tensors(cls, vocab: Vocabulary, tensors: Mapping[str, np.ndarray]) -> "ContextLm":
        missing = [n for n in cls.PARAM_NAMES + ("flags",) if n not in tensors]
        if missing:
            raise DataError(f"LM checkpoint is missing tensors: {', '.join(missing)}")
        params = {n: np.array(tensors[n], dtype=np.float64) for n in cls.PARAM_NAMES}
        for n in ("l1.b", "l2.b", "out.b"):
            params[n] = params[n].reshape(-1)
        flags = np.asarray(tensors["flags"]).reshape(-1)
        return cls(vocab, params, bool(flags[0]), float(flags[1]), bool(flags[2]))

    def save(self, path) -> str:
        return save_checkpoint(path, self.tensors())

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "ContextLm":
        return cls.from_tensors(vocab, load_checkpoint(path))

    # ---- forward / backward ------------------------------------------------

    def _encode_batch(self, sentences: Sequence[Sequence[str]]):
        ids = [self.vocab.encode(s) for s in sentences]
        steps = max(len(s) for s in ids) + 1
        b = len(ids)
        x = np.zeros((b, steps), dtype=np.int64)  # padded with <s>, masked out
        y = np.ones((b, steps), dtype=np.int64)
        mask = np.zeros((b, steps))
        for r, s in enumerate(ids):
            x[r, 1:len(s) + 1] = s
            y[r, :len(s)] = s
            mask[r, :len(s) + 1] = 1.0
        return x, y, mask

    def _context_batch(self, contexts, n: int) -> np.ndarray:
        k = self.context_dim
        if not self.conditioned:
            return np.zeros((n, k))
        if contexts is None or any(c is None for c in contexts):
            raise ContractError("a conditioned language model needs a context for every sentence")
        ctx = np.stack([_ctx_array(c) for c in contexts]) if n else np.zeros((0, k))
        if ctx.shape[1] != k:
            raise ShapeError(f"context dimension {ctx.shape[1]} != model context dimension {k}")
        return ctx

    def _run(self, sentences, contexts, rng=None, keep=False):
        """Forward pass; returns per-position log-probs of the targets and caches."""
        x, y, mask = self._encode_batch(sentences)
        ctx = self._context_batch(contexts, len(sentences))
        b, steps = x.shape
        hid = self.hidden
        rate = self.dropout if rng is not None else 0.0
        inject = ctx @ self.p["ctx.W"].T if self.conditioned else None
        h1 = c1 = h2 = c2 = np.zeros((b, hid))
        logp_t = np.zeros((b, steps))
        caches = []
        for t in range(steps):
            e = self.p["emb"][x[:, t]]
            if inject is not None and (t == 0 or self.inject_every_step):
                e = e + inject
            e, m0 = nncore.dropout(e, rate, rng)
            h1, c1, k1 = lstm_step_train(self.l1, e, h1, c1)
            a1, m1 = nncore.dropout(h1, rate, rng)
            h2, c2, k2 = lstm_step_train(self.l2, a1, h2, c2)
            a2, m2 = nncore.dropout(h2, rate, rng)
            logits = a2 @ self.p["out.W"].T + self.p["out.b"]
            lsm = log_softmax(logits)
            logp_t[:, t] = lsm[np.arange(b), y[:, t]]
            if keep:
                caches.append((m0, k1, m1, k2, m2, a2, lsm))
        return x, y, mask, ctx, logp_t, caches

    def score_batch(self, sentences: Sequence[Sequence[str]], contexts=None) -> np.ndarray:
        """Total log-probability of each sentence (dropout disabled)."""
        if not len(sentences):
            return np.zeros(0)
        if contexts is None:
            contexts = [None] * len(sentences)
        _, _, mask, _, logp_t, _ = self._run(sentences, contexts)
        low = (logp_t < LOG_PROB_FLOOR) & (mask > 0)
        if low.any():
            nncore.floor_events["lm"] += int(low.sum())
            logp_t = np.maximum(logp_t, LOG_PROB_FLOOR)
        return (logp_t * mask).sum(axis=1)

    def score_sentence(self, words: Sequence[str], context=None) -> float:
        return float(self.score_batch([list(words)], [context])[0])

    def loss_and_grads(self, sentences, contexts=None, rng=None):
        """Mean per-token negative log-likelihood and its gradient.

        ``rng`` enables dropout; pass ``None`` for a deterministic loss.
        """
        if contexts is None:
            contexts = [None] * len(sentences)
        x, y, mask, ctx, logp_t, caches = self._run(sentences, contexts, rng, keep=True)
        n_tok = mask.sum()
        loss = float(-(logp_t * mask).sum() / n_tok)
        b, steps = x.shape
        hid = self.hidden
        g = {k: np.zeros_like(v) for k, v in self.p.items()}
        dh1 = dc1 = dh2 = dc2 = np.zeros((b, hid))
        rows = np.arange(b)
        for t in range(steps - 1, -1, -1):
            m0, k1, m1, k2, m2, a2, lsm = caches[t]
            dlogits = np.exp(lsm)
            dlogits[rows, y[:, t]] -= 1.0
            dlogits *= (mask[:, t] / n_tok)[:, None]
            g["out.W"] += dlogits.T @ a2
            g["out.b"] += dlogits.sum(axis=0)
            da2 = dlogits @ self.p["out.W"]
            dh2 = dh2 + (da2 * m2 if m2 is not None else da2)
            da1, dh2, dc2, dwx, dwh, db = lstm_step_backward(self.l2, k2, dh2, dc2)
            g["l2.wx"] += dwx
            g["l2.wh"] += dwh
            g["l2.b"] += db
            dh1 = dh1 + (da1 * m1 if m1 is not None else da1)
            de, dh1, dc1, dwx, dwh, db = lstm_step_backward(self.l1, k1, dh1, dc1)
            g["l1.wx"] += dwx
            g["l1.wh"] += dwh
            g["l1.b"] += db
            if m0 is not None:
                de = de * m0
            np.add.at(g["emb"], x[:, t], de)
            if self.conditioned and (t == 0 or self.inject_every_step):
                g["ctx.W"] += de.T @ ctx
        return loss, g


def perplexity(lm, sentences: Sequence[Sequence[str]], contexts=None) -> float:
    """exp of the mean negative log-probability per prediction step
    (every word plus ``</s>``)."""
    if not len(sentences):
        raise ContractError("perplexity needs a non-empty corpus")
    total = float(np.sum(lm.score_batch(sentences, contexts)))
    steps = sum(len(s) + 1 for s in sentences)
    return math.exp(-total / steps)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class LmHistory:
    train_ppl: List[float] = field(default_factory=list)
    valid_ppl: List[float] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)
    clipped_norms: List[float] = field(default_factory=list)
    update_norms: List[float] = field(default_factory=list)


def _ordered(sentences, contexts):
    """Accept either parallel lists or ``{utt_id: words}`` / ``{utt_id: context}`` maps."""
    if isinstance(sentences, Mapping):
        ids = sorted(sentences)
        sents = [list(sentences[u]) for u in ids]
        if contexts is None:
            return ids, sents, None
        missing = [u for u in ids if u not in contexts]
        if missing:
            raise DataError(f"missing context vectors for utterances: {', '.join(missing)}")
        return ids, sents, [contexts[u] for u in ids]
    sents = [list(s) for s in sentences]
    return list(range(len(sents))), sents, None if contexts is None else list(contexts)


def train_lm(sentences, contexts=None, config: Optional[LmConfig] = None,
             vocab: Optional[Vocabulary] = None, valid=None, valid_contexts=None) -> ContextLm:
    """Minibatch training with per-update global-norm clipping.

    ``sentences`` is a list of word lists or a ``{utt_id: words}`` map; the
    matching ``contexts`` are required when ``config.conditioned``. The
    returned model carries a ``history`` attribute (:class:`LmHistory`);
    ``train_ppl`` and ``valid_ppl`` start with the value before training.
    """
    config = config or LmConfig()
    _, sents, ctxs = _ordered(sentences, contexts)
    if not sents:
        raise ContractError("cannot train a language model on an empty corpus")
    if config.conditioned and ctxs is None:
        raise ContractError("conditioned training needs a context for every sentence")
    if vocab is None:
        vocab = Vocabulary.build(sents)
    context_dim = _ctx_array(ctxs[0]).shape[0] if ctxs is not None else 1
    rng = np.random.default_rng([config.seed, 0xC7])
    lm = ContextLm.init(rng, vocab, context_dim, config.embed, config.hidden, config.conditioned,
                        config.dropout, config.inject_every_step)
    _, vsents, vctxs = _ordered(valid, valid_contexts) if valid is not None else (None, None, None)
    opt = Optimizer(config.optimizer, config.lr)
    hist = LmHistory()

    def log_ppl():
        hist.train_ppl.append(perplexity(lm, sents, ctxs))
        if vsents:
            hist.valid_ppl.append(perplexity(lm, vsents, vctxs))

    log_ppl()
    n = len(sents)
    for epoch in range(config.epochs):
        erng = np.random.default_rng([config.seed, epoch])
        order = erng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            batch = [sents[i] for i in idx]
            bctx = [ctxs[i] for i in idx] if ctxs is not None else None
            _, grads = lm.loss_and_grads(batch, bctx, erng if config.dropout > 0 else None)
            hist.grad_norms.append(global_norm(grads))
            grads = clip_gradients(grads, config.clip)
            hist.clipped_norms.append(global_norm(grads))
            hist.update_norms.append(opt.step(lm.p, grads))
        log_ppl()
    lm.history = hist
    return lm


def kfold_split(ids: Sequence[str], k: int = 5, seed: int = 0) -> Dict[str, int]:
    """Shuffle deterministically, then deal ids round-robin into ``k`` folds."""
    if k < 2:
        raise ContractError(f"k-fold split needs k >= 2, got {k}")
    ids = sorted(ids)
    if len(ids) < k:
        raise ContractError(f"k-fold split needs at least {k} ids, got {len(ids)}")
    perm = np.random.default_rng([seed, 0xF01D]).permutation(len(ids))
    return {ids[p]: j % k for j, p in enumerate(perm)}


@dataclass
class FoldResult:
    models: List[ContextLm]
    split: Dict[str, int]
    heldout_ppl: float  # pooled over all held-out folds


def train_folds(sentences: Mapping[str, Sequence[str]], contexts=None,
                config: Optional[LmConfig] = None, k: int = 5,
                vocab: Optional[Vocabulary] = None) -> FoldResult:
    """Train one model per fold on the other folds and pool held-out perplexity.

    All fold models share one vocabulary built from the full corpus so that
    they can be ensembled.
    """
    config = config or LmConfig()
    split = kfold_split(list(sentences), k, config.seed)
    vocab = vocab or Vocabulary.build(sentences[u] for u in sorted(sentences))
    models, total, steps = [], 0.0, 0
    for fold in range(k):
        train_ids = [u for u in sorted(sentences) if split[u] != fold]
        held = [u for u in sorted(sentences) if split[u] == fold]
        sub_ctx = contexts if config.conditioned else None
        lm = train_lm({u: sentences[u] for u in train_ids}, sub_ctx, config, vocab)
        _, hs, hc = _ordered({u: sentences[u] for u in held}, sub_ctx)
        total += float(np.sum(lm.score_batch(hs, hc)))
        steps += sum(len(s) + 1 for s in hs)
        models.append(lm)
    return FoldResult(models, split, math.exp(-total / steps))


# --------------------------------------------------------------------------
# Ensembles
# --------------------------------------------------------------------------


class LmEnsemble:
    """Averages sentence scores of several models sharing one vocabulary.

    ``mode="log"`` averages log-probabilities; ``mode="prob"`` averages
    probabilities and returns the log of the mean.
    """

    def __init__(self, models: Sequence[ContextLm], mode: str = "log"):
        if not models:
            raise ContractError("an ensemble needs at least one model")
        if mode not in ("log", "prob"):
            raise ContractError(f"unknown ensemble averaging mode {mode!r}")
        for m in models[1:]:
            if m.vocab != models[0].vocab:
                raise ContractError("ensemble members must share one vocabulary")
        self.models = list(models)
        self.mode = mode

    @property
    def conditioned(self) -> bool:
        return any(m.conditioned for m in self.models)

    @property
    def vocab(self) -> Vocabulary:
        return self.models[0].vocab

    def score_batch(self, sentences, contexts=None) -> np.ndarray:
        scores = np.stack([m.score_batch(sentences, contexts) for m in self.models])
        if self.mode == "log":
            # mean taken relative to the first member: copies of one model
            # then reproduce its score bit-for-bit
            base = scores[0]
            return base + (scores - base).mean(axis=0)
        top = scores.max(axis=0)
        return top + np.log(np.exp(scores - top).mean(axis=0))

    def score_sentence(self, words, context=None) -> float:
        return float(self.score_batch([list(words)], [context])[0])


def ensemble_score(lms: Sequence[ContextLm], words: Sequence[str], context=None,
                   mode: str = "log") -> float:
    return LmEnsemble(lms, mode).score_sentence(words, context)


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def read_lm_corpus(path) -> Dict[str, List[str]]:
    """Read ``utt_id<TAB>w1 w2 ... wn`` lines."""
    out: Dict[str, List[str]] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read LM corpus {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            utt, sep, rest = line.rstrip("\n").partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected 'utt_id<TAB>words'")
            if utt in out:
                raise DataError(f"{path}:{lineno}: duplicate utterance {utt!r}")
            out[utt] = rest.split()
    return out


def write_lm_corpus(path, sentences: Mapping[str, Sequence[str]]):
    with open(path, "w") as fh:
        for utt in sorted(sentences):
            fh.write(f"{utt}\t{' '.join(sentences[utt])}\n")


def save_lm_dir(out_dir, models: Sequence[ContextLm]) -> Dict[str, str]:
    """Write ``vocab.txt`` and ``fold{k}.ckpt``; return checkpoint hashes by file name."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models[0].vocab.write(out / "vocab.txt")
    return {f"fold{k}.ckpt": m.save(out / f"fold{k}.ckpt") for k, m in enumerate(models)}


def load_lm_dir(path, mode: str = "log") -> LmEnsemble:
    d = Path(path)
    vocab = Vocabulary.read(d / "vocab.txt")
    ckpts = sorted(d.glob("fold*.ckpt"), key=lambda p: int(p.stem[4:]))
    if not ckpts:
        raise DataError(f"no fold*.ckpt language models in {d}")
    return LmEnsemble([ContextLm.load(p, vocab) for p in ckpts], mode)
