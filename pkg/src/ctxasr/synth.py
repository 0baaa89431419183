"""Synthetic corpora standing in for real audio-visual recordings.

Acoustic corpus: frames are drawn from class-conditional Gaussians whose
means sit on a 2-D grid embedded in the feature space; every utterance
recorded in context ``c`` is offset by a fixed vector ``delta_c`` in the
same plane, so offsets push classes onto their neighbours unless removed. Each utterance also
gets a short "video" of object and place posteriors that peak on a
context-identifying class.

Language-model corpus: ``C`` topics with partially shared vocabularies and
topic-restricted bigram grammars, topic-revealing context vectors, and
n-best lists made by substituting words from other topics.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List

import numpy as np

from .acoustic import FEATURE_DIM, Utterance, write_am_corpus
from .errors import ValidationError
from .features import (ContextVector, VideoPosteriors, write_context_table, write_manifest,
                       write_posteriors)
from .rescoring import Hypothesis, NBestList, write_groups, write_nbest, write_refs


@dataclass
class SyntheticSpec:
    # acoustic side
    n_contexts: int = 4
    utts_per_context: int = 80
    heldout_per_context: int = 10
    frames_per_utt: int = 50
    n_classes: int = 8
    shift: float = 3.0  # norm of each context offset, in units of the frame noise std
    class_sep: float = 5.0  # grid spacing of class means, in noise-std units
    feature_dim: int = FEATURE_DIM
    video_frames: int = 4
    object_dim: int = 1000
    place_dim: int = 205
    posterior_peak: float = 6.0
    # language-model side
    lm_topics: int = 2
    topic_vocab: int = 20
    overlap: float = 0.2
    lm_sentences_per_topic: int = 150
    min_len: int = 1
    max_len: int = 3
    successors: int = 4
    lm_context_dim: int = 16
    context_noise: float = 0.3
    nbest_utts_per_topic: int = 40
    nbest_size: int = 8
    max_corruptions: int = 2
    inconsistent_fraction: float = 1.0
    acoustic_error_weight: float = 1.0
    acoustic_noise: float = 2.0
    plant_reference: bool = True

    def validate(self, lm: bool = False):
        bad = []
        positive = ["n_contexts", "utts_per_context", "frames_per_utt", "n_classes",
                    "feature_dim", "video_frames", "object_dim", "place_dim",
                    "lm_topics", "topic_vocab", "lm_sentences_per_topic", "min_len",
                    "successors", "lm_context_dim", "nbest_utts_per_topic", "nbest_size"]
        for name in positive:
            if getattr(self, name) < 1:
                bad.append(f"{name} must be >= 1")
        if self.heldout_per_context < 0:
            bad.append("heldout_per_context must be >= 0")
        if self.shift < 0:
            bad.append("shift must be >= 0")
        if self.feature_dim < 2:
            bad.append("feature_dim must be >= 2")
        if not 0.0 <= self.overlap <= 1.0:
            bad.append("overlap must lie in [0, 1]")
        if not 0.0 <= self.inconsistent_fraction <= 1.0:
            bad.append("inconsistent_fraction must lie in [0, 1]")
        if self.max_len < self.min_len:
            bad.append("max_len must be >= min_len")
        if self.max_corruptions < 1:
            bad.append("max_corruptions must be >= 1")
        if lm and self.lm_topics < 2:
            bad.append("lm_topics must be >= 2")
        if not lm and self.n_contexts < 2:
            bad.append("n_contexts must be >= 2 for adaptation experiments")
        if bad:
            raise ValidationError("invalid synthetic spec: " + "; ".join(bad))

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "SyntheticSpec":
        names = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(names))
        if unknown:
            raise ValidationError(f"unknown synthetic spec fields: {', '.join(unknown)}")
        return cls(**values)


# --------------------------------------------------------------------------
# Acoustic corpus
# --------------------------------------------------------------------------


@dataclass
class SynthAm:
    train: List[Utterance]
    test: List[Utterance]
    posteriors: Dict[str, Dict[str, VideoPosteriors]]
    manifest: Dict[str, str]  # utt id -> video id
    utt_context: Dict[str, int]
    shifts: np.ndarray  # C x D ground-truth offsets
    n_classes: int

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_am_corpus(out / "train.am", self.train, self.n_classes)
        write_am_corpus(out / "test.am", self.test, self.n_classes)
        for source, videos in self.posteriors.items():
            write_posteriors(out / f"{source}.post", [videos[v] for v in sorted(videos)])
        write_manifest(out / "manifest.txt", self.manifest)
        write_manifest(out / "train_manifest.txt",
                       {u.utt_id: self.manifest[u.utt_id] for u in self.train})
        with open(out / "truth.txt", "w") as fh:
            for utt in sorted(self.utt_context):
                fh.write(f"{utt}\t{self.utt_context[utt]}\n")
        with open(out / "shifts.txt", "w") as fh:
            for c, row in enumerate(self.shifts):
                fh.write(f"{c}\t{' '.join(map(repr, row.tolist()))}\n")


def _posterior_frames(rng, n, dim, peak_index, peak):
    logits = rng.standard_normal((n, dim))
    logits[:, peak_index] += peak
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def synth_am_corpus(spec: SyntheticSpec, seed: int) -> SynthAm:
    spec.validate()
    rng = np.random.default_rng([seed, 11])
    d = spec.feature_dim
    basis, _ = np.linalg.qr(rng.standard_normal((d, 2)))  # d x 2 orthonormal columns
    cols = int(np.ceil(np.sqrt(spec.n_classes)))
    grid = np.array([(k % cols, k // cols) for k in range(spec.n_classes)], dtype=np.float64)
    grid -= grid.mean(axis=0)
    means = spec.class_sep * grid @ basis.T
    phase = rng.uniform(0.0, 2.0 * np.pi)
    angles = phase + 2.0 * np.pi * np.arange(spec.n_contexts) / spec.n_contexts
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    shifts = spec.shift * directions @ basis.T
    obj_ids = rng.choice(spec.object_dim, spec.n_contexts, replace=False)
    place_ids = rng.choice(spec.place_dim, spec.n_contexts, replace=False)
    # a fixed frame-level offset so normalization has something to remove
    offset = rng.standard_normal(d)

    train, test = [], []
    posteriors: Dict[str, Dict[str, VideoPosteriors]] = {"object": {}, "place": {}}
    manifest, utt_context = {}, {}
    per_ctx = spec.utts_per_context + spec.heldout_per_context
    for c in range(spec.n_contexts):
        for n in range(per_ctx):
            utt = f"c{c}_u{n:03d}"
            labels = rng.integers(spec.n_classes, size=spec.frames_per_utt)
            frames = (means[labels] + shifts[c] + offset
                      + rng.standard_normal((spec.frames_per_utt, d)))
            u = Utterance(utt, frames, labels, [])
            (train if n < spec.utts_per_context else test).append(u)
            vid = f"v_{utt}"
            manifest[utt] = vid
            utt_context[utt] = c
            posteriors["object"][vid] = VideoPosteriors(
                vid, _posterior_frames(rng, spec.video_frames, spec.object_dim, obj_ids[c],
                                       spec.posterior_peak), "object")
            posteriors["place"][vid] = VideoPosteriors(
                vid, _posterior_frames(rng, spec.video_frames, spec.place_dim, place_ids[c],
                                       spec.posterior_peak), "place")
    return SynthAm(train, test, posteriors, manifest, utt_context, shifts, spec.n_classes)


# --------------------------------------------------------------------------
# Language-model corpus and n-best lists
# --------------------------------------------------------------------------


@dataclass
class SynthLm:
    sentences: Dict[str, List[str]]  # training corpus, utt id -> words
    contexts: Dict[str, ContextVector]  # for training and n-best utterances
    topics: Dict[str, int]
    nbest: List[NBestList]
    topic_vocabs: List[List[str]]

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "lm_corpus.txt", "w") as fh:
            for utt in sorted(self.sentences):
                fh.write(f"{utt}\t{' '.join(self.sentences[utt])}\n")
        write_context_table(out / "lm_context.txt", self.contexts)
        write_nbest(out / "nbest.txt", self.nbest)
        write_refs(out / "refs.txt", self.nbest)
        write_groups(out / "groups.txt", self.nbest)
        with open(out / "lm_truth.txt", "w") as fh:
            for utt in sorted(self.topics):
                fh.write(f"{utt}\t{self.topics[utt]}\n")


def _topic_vocabs(spec: SyntheticSpec):
    n_shared = int(round(spec.overlap * spec.topic_vocab))
    n_own = spec.topic_vocab - n_shared
    shared = [f"s{j:02d}" for j in range(n_shared)]
    return [shared + [f"t{t}w{j:02d}" for j in range(n_own)] for t in range(spec.lm_topics)]


class _TopicGrammar:
    """Bigram grammar per topic, derived from one word-level successor table.

    Successor preferences belong to words, not topics, so topics with equal
    vocabularies generate identically distributed sentences.
    """

    def __init__(self, rng, vocabs, successors):
        self.vocabs = vocabs
        words = sorted({w for v in vocabs for w in v})
        self.pref = {w: rng.gamma(0.5, size=len(words)) for w in words}
        self.index = {w: k for k, w in enumerate(words)}
        self.successors = successors

    def next_probs(self, topic, prev):
        vocab = self.vocabs[topic]
        if prev is None:
            return np.full(len(vocab), 1.0 / len(vocab))
        weights = np.array([self.pref[prev][self.index[w]] for w in vocab])
        keep = np.argsort(-weights, kind="stable")[:self.successors]
        p = np.zeros(len(vocab))
        p[keep] = weights[keep] + 1e-3
        return p / p.sum()

    def sample(self, rng, topic, length):
        out, prev = [], None
        vocab = self.vocabs[topic]
        for _ in range(length):
            prev = vocab[rng.choice(len(vocab), p=self.next_probs(topic, prev))]
            out.append(prev)
        return out


def _context_vectors(rng, spec, topics_by_utt, projection):
    table = {}
    for utt in sorted(topics_by_utt):
        onehot = np.zeros(spec.lm_topics)
        onehot[topics_by_utt[utt]] = 1.0
        noisy = onehot + spec.context_noise * rng.standard_normal(spec.lm_topics)
        table[utt] = ContextVector(utt, projection @ noisy, "pca-projected")
    return table


def _corrupt(rng, words, n_sub, topic, vocabs, inconsistent):
    own = set(vocabs[topic])
    foreign = sorted({w for t, v in enumerate(vocabs) if t != topic for w in v} - own)
    out = list(words)
    for pos in rng.choice(len(words), size=n_sub, replace=False):
        if foreign and rng.random() < inconsistent:
            pool = foreign
        else:
            pool = [w for w in vocabs[topic] if w != words[pos]] or foreign
        out[pos] = pool[rng.integers(len(pool))]
    return out


def synth_lm_corpus(spec: SyntheticSpec, seed: int) -> SynthLm:
    """Generate a topic LM corpus plus n-best lists for held-out utterances.

    Two topics carry at most ln 2 nats of information per sentence, so the
    default sentences are short; otherwise the relative perplexity gain from
    knowing the topic is diluted over many tokens.
    """
    spec.validate(lm=True)
    rng = np.random.default_rng([seed, 23])
    vocabs = _topic_vocabs(spec)
    grammar = _TopicGrammar(rng, vocabs, spec.successors)
    projection = rng.standard_normal((spec.lm_context_dim, spec.lm_topics))

    sentences, topics = {}, {}
    for t in range(spec.lm_topics):
        for n in range(spec.lm_sentences_per_topic):
            utt = f"lm_t{t}_{n:04d}"
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            sentences[utt] = grammar.sample(rng, t, length)
            topics[utt] = t

    # first-pass LM: add-one unigram over the training corpus, topic-agnostic
    counts: Dict[str, int] = {}
    for words in sentences.values():
        for w in words:
            counts[w] = counts.get(w, 0) + 1
    all_words = sorted({w for v in vocabs for w in v})
    total = sum(counts.values()) + len(all_words)
    unigram = {w: np.log((counts.get(w, 0) + 1) / total) for w in all_words}

    lists, test_topics = [], {}
    for t in range(spec.lm_topics):
        for n in range(spec.nbest_utts_per_topic):
            utt = f"test_t{t}_{n:04d}"
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            ref = grammar.sample(rng, t, length)
            test_topics[utt] = t
            cands, seen = [], set()
            if spec.plant_reference:
                cands.append((ref, 0))
                seen.add(tuple(ref))
            attempts = 0
            while len(cands) < spec.nbest_size and attempts < 50 * spec.nbest_size:
                attempts += 1
                k = int(rng.integers(1, min(spec.max_corruptions, len(ref)) + 1))
                hyp = _corrupt(rng, ref, k, t, vocabs, spec.inconsistent_fraction)
                if tuple(hyp) in seen:
                    continue
                seen.add(tuple(hyp))
                cands.append((hyp, sum(a != b for a, b in zip(hyp, ref))))
            hyps = []
            for words, errors in cands:
                ac = -spec.acoustic_error_weight * errors + spec.acoustic_noise * rng.standard_normal()
                lm = float(sum(unigram[w] for w in words))
                hyps.append(Hypothesis(words, float(ac), lm))
            # first-pass order follows the acoustic column; the lm column feeds interpolation only
            hyps.sort(key=lambda h: -h.acoustic)
            group = "typical-indoors" if t == 0 else "other"
            lists.append(NBestList(utt, ref, hyps, group))

    all_topics = {**topics, **test_topics}
    contexts = _context_vectors(rng, spec, all_topics, projection)
    return SynthLm(sentences, contexts, all_topics, lists, vocabs)
