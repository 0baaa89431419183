"""N-best rescoring and word error rate scoring.

WER is pooled over a corpus: total substitutions, insertions and deletions
divided by the total number of reference words.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DataError

GROUPS = ("typical-indoors", "other")


@dataclass
class Hypothesis:
    words: List[str]
    acoustic: float
    lm: float

    def __post_init__(self):
        if not (math.isfinite(self.acoustic) and math.isfinite(self.lm)):
            raise DataError(f"hypothesis {' '.join(self.words)!r} has non-finite scores")


@dataclass
class NBestList:
    utt_id: str
    reference: List[str]
    hypotheses: List[Hypothesis]
    group: Optional[str] = None

    def __post_init__(self):
        if not self.hypotheses:
            raise DataError(f"n-best list for {self.utt_id} is empty")
        if self.group is not None and self.group not in GROUPS:
            raise DataError(f"{self.utt_id}: unknown group {self.group!r}")


@dataclass(frozen=True)
class WerAlignment:
    hits: int
    substitutions: int
    insertions: int
    deletions: int

    @property
    def ref_length(self) -> int:
        return self.hits + self.substitutions + self.deletions

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


# --------------------------------------------------------------------------
# Edit distance
# --------------------------------------------------------------------------


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost Levenshtein distance, two-row dynamic programme."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        left = i
        for j, h in enumerate(hyp, 1):
            left = min(prev[j - 1] + (r != h), prev[j] + 1, left + 1)
            cur.append(left)
        prev = cur
    return prev[-1]


def align(ref: Sequence, hyp: Sequence) -> WerAlignment:
    """Full-table alignment with backtrace.

    Among equal-cost paths the backtrace prefers match/substitution, then
    deletion, then insertion, so a substitution wins over an
    insertion+deletion pair.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for j in range(m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        row, above = cost[i], cost[i - 1]
        row[0] = i
        r = ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(above[j - 1] + (r != hyp[j - 1]), above[j] + 1, row[j - 1] + 1)
    i, j = n, m
    hits = subs = ins = dels = 0
    while i > 0 or j > 0:
        here = cost[i][j]
        if i > 0 and j > 0 and here == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                hits += 1
            else:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and here == cost[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerAlignment(hits, subs, ins, dels)


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> Tuple[WerAlignment, float]:
    if not reference:
        raise ContractError("WER is undefined for an empty reference")
    a = align(reference, hypothesis)
    return a, a.errors / len(reference)


# --------------------------------------------------------------------------
# Corpus-level scoring
# --------------------------------------------------------------------------


def _pooled(lists: Iterable[NBestList], choices: Mapping[str, int]) -> Tuple[int, int]:
    errors = words = 0
    for nb in lists:
        if nb.utt_id not in choices:
            raise ContractError(f"no chosen hypothesis for {nb.utt_id}")
        hyp = nb.hypotheses[choices[nb.utt_id]].words
        errors += edit_distance(nb.reference, hyp)
        words += len(nb.reference)
    return errors, words


def corpus_wer(lists: Sequence[NBestList], choices: Mapping[str, int]) -> float:
    """Pooled WER of the hypotheses selected by ``choices`` (utt id -> rank)."""
    errors, words = _pooled(lists, choices)
    if words == 0:
        raise ContractError("corpus has no reference words")
    return errors / words


def first_pass_choices(lists: Sequence[NBestList]) -> Dict[str, int]:
    return {nb.utt_id: 0 for nb in lists}


def oracle_choices(lists: Sequence[NBestList]) -> Dict[str, int]:
    out = {}
    for nb in lists:
        errs = [edit_distance(nb.reference, h.words) for h in nb.hypotheses]
        out[nb.utt_id] = int(np.argmin(errs))  # first minimum = lowest rank
    return out


def oracle_wer(lists: Sequence[NBestList]) -> float:
    return corpus_wer(lists, oracle_choices(lists))


# --------------------------------------------------------------------------
# Rescoring
# --------------------------------------------------------------------------


def _lm_scores(scorer, sentences, contexts):
    batch = getattr(scorer, "score_batch", None)
    if batch is not None:
        return np.asarray(batch(sentences, contexts), dtype=np.float64)
    return np.array([scorer(s, c) for s, c in zip(sentences, contexts)], dtype=np.float64)


def rescore(lists: Sequence[NBestList], scorer, contexts: Optional[Mapping] = None,
            acoustic_weight: float = 1.0, lm_weight: float = 1.0,
            first_pass_weight: float = 0.0) -> Dict[str, int]:
    """Pick one hypothesis per list by ``a*acoustic + b*lm + c*first_pass_lm``.

    ``scorer`` is either a callable ``(words, context) -> log-prob`` or an
    object with ``score_batch(sentences, contexts)``. A scorer whose
    ``conditioned`` attribute is true needs a context for every utterance.
    Exact ties go to the lowest rank.
    """
    conditioned = bool(getattr(scorer, "conditioned", False))
    if conditioned:
        missing = sorted(nb.utt_id for nb in lists if contexts is None or nb.utt_id not in contexts)
        if missing:
            raise DataError(f"missing context vectors for utterances: {', '.join(missing)}")
    choices = {}
    for nb in sorted(lists, key=lambda x: x.utt_id):
        ctx = contexts.get(nb.utt_id) if contexts is not None else None
        ac = np.array([h.acoustic for h in nb.hypotheses])
        fp = np.array([h.lm for h in nb.hypotheses])
        total = acoustic_weight * ac + first_pass_weight * fp
        if lm_weight != 0.0:
            lm = _lm_scores(scorer, [h.words for h in nb.hypotheses], [ctx] * len(nb.hypotheses))
            total = total + lm_weight * lm
        choices[nb.utt_id] = int(np.argmax(total))
    return choices


def grid_search_weights(lists, scorer, contexts=None, lm_weights=(0.0, 0.25, 0.5, 1.0, 2.0, 4.0),
                        acoustic_weight=1.0, first_pass_weight=0.0):
    """Return ``(best_lm_weight, wer)`` over a grid; ties keep the smaller weight."""
    best = None
    for b in lm_weights:
        rate = corpus_wer(lists, rescore(lists, scorer, contexts, acoustic_weight, b,
                                         first_pass_weight))
        if best is None or rate < best[1]:
            best = (b, rate)
    return best


# --------------------------------------------------------------------------
# Group analysis
# --------------------------------------------------------------------------


@dataclass
class GroupRow:
    group: str
    lists: int
    ref_words: int
    baseline_errors: int
    rescored_errors: int

    @property
    def baseline_wer(self) -> float:
        return self.baseline_errors / self.ref_words if self.ref_words else 0.0

    @property
    def rescored_wer(self) -> float:
        return self.rescored_errors / self.ref_words if self.ref_words else 0.0

    @property
    def rel_reduction(self) -> float:
        """(baseline - rescored) / baseline; 0 when both are error free."""
        if self.baseline_errors == 0:
            return 0.0 if self.rescored_errors == 0 else -math.inf
        return (self.baseline_errors - self.rescored_errors) / self.baseline_errors


@dataclass
class GroupReport:
    rows: List[GroupRow]
    extra: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def row(self, group: str) -> GroupRow:
        for r in self.rows:
            if r.group == group:
                return r
        raise KeyError(group)

    def metric_lines(self) -> List[str]:
        lines = []
        for r in self.rows:
            lines.append(f"WER_BASELINE\t{r.group}\t{r.baseline_wer!r}")
            lines.append(f"WER_RESCORED\t{r.group}\t{r.rescored_wer!r}")
            lines.append(f"REL_REDUCTION\t{r.group}\t{r.rel_reduction!r}")
        for metric in sorted(self.extra):
            for group in sorted(self.extra[metric]):
                lines.append(f"{metric}\t{group}\t{self.extra[metric][group]!r}")
        return lines

    def table(self) -> str:
        header = ("group", "lists", "words", "base_err", "base_wer", "new_err", "new_wer", "rel_red")
        body = [
            (r.group, str(r.lists), str(r.ref_words), str(r.baseline_errors),
             f"{100 * r.baseline_wer:.2f}%", str(r.rescored_errors),
             f"{100 * r.rescored_wer:.2f}%", f"{100 * r.rel_reduction:.2f}%")
            for r in self.rows
        ]
        widths = [max(len(row[k]) for row in [header, *body]) for k in range(len(header))]
        fmt = lambda row: "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
        return "\n".join([fmt(header), *map(fmt, body)])

    def render(self) -> str:
        return self.table() + "\n\n" + "\n".join(self.metric_lines()) + "\n"


def group_analysis(lists: Sequence[NBestList], chosen: Mapping[str, int],
                   baseline: Optional[Mapping[str, int]] = None) -> GroupReport:
    """Pooled WER per group for a baseline chooser (rank 0 by default) and ``chosen``.

    The report also carries an ``all`` row over the whole corpus.
    """
    unlabeled = sorted(nb.utt_id for nb in lists if nb.group is None)
    if unlabeled:
        raise ContractError(f"lists without a group label: {', '.join(unlabeled)}")
    if baseline is None:
        baseline = first_pass_choices(lists)
    groups = sorted({nb.group for nb in lists})
    rows = []
    for g in groups + ["all"]:
        members = [nb for nb in lists if g == "all" or nb.group == g]
        base_err, words = _pooled(members, baseline)
        new_err, _ = _pooled(members, chosen)
        rows.append(GroupRow(g, len(members), words, base_err, new_err))
    return GroupReport(rows)


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def write_nbest(path, lists: Iterable[NBestList]):
    with open(path, "w") as fh:
        for nb in lists:
            for rank, h in enumerate(nb.hypotheses):
                fh.write(f"{nb.utt_id}\t{rank}\t{h.acoustic!r}\t{h.lm!r}\t{' '.join(h.words)}\n")


def write_refs(path, lists: Iterable[NBestList]):
    with open(path, "w") as fh:
        for nb in lists:
            fh.write(f"{nb.utt_id}\t{' '.join(nb.reference)}\n")


def write_groups(path, lists: Iterable[NBestList]):
    with open(path, "w") as fh:
        for nb in lists:
            if nb.group is not None:
                fh.write(f"{nb.utt_id}\t{nb.group}\n")


def _read_pairs(path, what) -> Dict[str, str]:
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read {what} file {path}: {exc}") from exc
    with fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, _, value = line.partition("\t")
            out[key] = value
    return out


def read_nbest(nbest_path, refs_path, groups_path=None) -> List[NBestList]:
    refs = {k: v.split() for k, v in _read_pairs(refs_path, "reference").items()}
    groups = _read_pairs(groups_path, "group") if groups_path else {}
    hyps: Dict[str, Dict[int, Hypothesis]] = {}
    try:
        fh = open(nbest_path)
    except OSError as exc:
        raise DataError(f"cannot read n-best file {nbest_path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{nbest_path}:{lineno}: expected 5 tab-separated fields")
            utt, rank = parts[0], int(parts[1])
            hyps.setdefault(utt, {})[rank] = Hypothesis(parts[4].split(), float(parts[2]),
                                                        float(parts[3]))
    missing = sorted(u for u in hyps if u not in refs)
    if missing:
        raise DataError(f"no reference transcript for: {', '.join(missing)}")
    out = []
    for utt in sorted(hyps):
        ranks = sorted(hyps[utt])
        if ranks != list(range(len(ranks))):
            raise DataError(f"{utt}: n-best ranks are not 0..{len(ranks) - 1}")
        out.append(NBestList(utt, refs[utt], [hyps[utt][r] for r in ranks], groups.get(utt)))
    return out
