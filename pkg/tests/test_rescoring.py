import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxasr.errors import ContractError, DataError
from ctxasr.rescoring import (Hypothesis, NBestList, align, corpus_wer, edit_distance,
                              first_pass_choices, grid_search_weights, group_analysis,
                              oracle_choices, oracle_wer, read_nbest, rescore, wer, write_groups,
                              write_nbest, write_refs)


def _nb(utt, ref, hyps, group=None):
    return NBestList(utt, ref.split(), [Hypothesis(w.split(), a, l) for w, a, l in hyps], group)


# ---- WER ---------------------------------------------------------------------


def test_wer_examples():
    a, rate = wer("a b c".split(), "a x c".split())
    assert (a.substitutions, a.insertions, a.deletions, a.hits) == (1, 0, 0, 2)
    assert rate == pytest.approx(1 / 3)
    a, rate = wer("a b".split(), "a b c d".split())
    assert a.insertions == 2 and rate == 1.0
    a, rate = wer("a b c".split(), [])
    assert a.deletions == 3 and rate == 1.0
    assert wer(["a"], ["a"])[1] == 0.0
    with pytest.raises(ContractError):
        wer([], ["a"])


def test_align_prefers_substitution():
    a = align(["a"], ["b"])
    assert (a.substitutions, a.insertions, a.deletions) == (1, 0, 0)


def test_corpus_wer_is_pooled():
    lists = [_nb("u1", "a", [("b", 0, 0)]), _nb("u2", "a b c d", [("a b c d", 0, 0)])]
    # pooled 1 error / 5 words, not the mean of 1.0 and 0.0
    assert corpus_wer(lists, first_pass_choices(lists)) == pytest.approx(0.2)


words = st.lists(st.sampled_from("abc"), max_size=6)


# edit distance is a metric and agrees with the alignment counts
@settings(max_examples=200, deadline=None)
@given(words, words, words)
def test_edit_distance_properties(x, y, z):
    d = edit_distance(x, y)
    assert d == edit_distance(y, x)
    assert (d == 0) == (x == y)
    assert edit_distance(x, z) <= d + edit_distance(y, z)
    assert abs(len(x) - len(y)) <= d <= max(len(x), len(y))
    a = align(x, y)
    assert a.errors == d and a.ref_length == len(x)
    assert a.hits + a.substitutions + a.insertions == len(y)


# ---- rescoring ---------------------------------------------------------------


def _table_scorer(table):
    return lambda w, c: table[" ".join(w)]


def test_rescore_linear_combination():
    nb = _nb("u", "a b", [("a c", -1.0, -5.0), ("a b", -2.0, -1.0)])
    lm = _table_scorer({"a c": -4.0, "a b": -1.0})
    # totals with a=1, b=1: -5 and -3
    assert rescore([nb], lm)["u"] == 1
    # b = 0: acoustic only
    assert rescore([nb], lm, lm_weight=0.0)["u"] == 0
    # first-pass column alone: -5 vs -1
    assert rescore([nb], lm, acoustic_weight=0.0, lm_weight=0.0, first_pass_weight=1.0)["u"] == 1


def test_rescore_ties_go_to_lowest_rank():
    nb = _nb("u", "a", [("x", -1.0, 0.0), ("y", -1.0, 0.0), ("a", -1.0, 0.0)])
    assert rescore([nb], lambda w, c: -2.0)["u"] == 0


def test_lm_weight_zero_never_calls_scorer():
    def boom(w, c):
        raise AssertionError("scorer called")
    nb = _nb("u", "a", [("x", -3.0, 0.0), ("a", -1.0, 0.0)])
    assert rescore([nb], boom, lm_weight=0.0)["u"] == 1


class _CondScorer:
    conditioned = True

    def score_batch(self, sentences, contexts):
        return np.array([c[0] if s == ["a"] else 0.0 for s, c in zip(sentences, contexts)])


def test_conditioned_scorer_uses_and_requires_contexts():
    lists = [_nb("u1", "a", [("x", 0.0, 0.0), ("a", 0.0, 0.0)]),
             _nb("u2", "a", [("x", 0.0, 0.0), ("a", 0.0, 0.0)])]
    ctx = {"u1": np.array([1.0]), "u2": np.array([-1.0])}
    assert rescore(lists, _CondScorer(), ctx) == {"u1": 1, "u2": 0}
    with pytest.raises(DataError, match="u2"):
        rescore(lists, _CondScorer(), {"u1": ctx["u1"]})


def test_oracle_and_grid_search():
    lists = [_nb("u1", "a b", [("a x", -1.0, 0.0), ("a b", -1.5, 0.0), ("a b", -3.0, 0.0)]),
             _nb("u2", "c", [("c", 0.0, 0.0), ("d", -1.0, 0.0)])]
    assert oracle_choices(lists) == {"u1": 1, "u2": 0}
    assert oracle_wer(lists) == 0.0
    lm = _table_scorer({"a x": -2.0, "a b": 0.0, "c": 0.0, "d": 0.0})
    best, rate = grid_search_weights(lists, lm, lm_weights=(0.0, 0.25, 1.0))
    # at 0.25 u1 ties (-1.5 both) and rank 0 keeps its error; any b > 0.25 flips it
    assert (best, rate) == (1.0, 0.0)
    best, rate = grid_search_weights(lists, lm, lm_weights=(0.0, 0.3, 1.0))
    assert (best, rate) == (0.3, 0.0)


def test_hypothesis_and_list_validation():
    with pytest.raises(DataError):
        Hypothesis(["a"], math.nan, 0.0)
    with pytest.raises(DataError):
        NBestList("u", ["a"], [])
    with pytest.raises(DataError):
        NBestList("u", ["a"], [Hypothesis(["a"], 0.0, 0.0)], "outdoors")


# ---- groups ----------------------------------------------------------------


def test_group_analysis_rows():
    lists = [
        _nb("t1", "a b", [("a b", 0, 0)], "typical-indoors"),
        _nb("o1", "a b c", [("x y z", 0, 0), ("a b c", 0, 0)], "other"),
        _nb("o2", "a b c", [("a y z", 0, 0), ("a b z", 0, 0)], "other"),
        _nb("o3", "a", [("x", 0, 0), ("a", 0, 0)], "other"),
    ]
    chosen = {"t1": 0, "o1": 1, "o2": 1, "o3": 0}
    report = group_analysis(lists, chosen)
    other = report.row("other")
    # baseline errors 3 + 2 + 1 = 6, rescored 0 + 1 + 1 = 2 over 7 words
    assert (other.baseline_errors, other.rescored_errors, other.ref_words) == (6, 2, 7)
    assert other.rel_reduction == pytest.approx(4 / 6)
    indoor = report.row("typical-indoors")
    assert indoor.baseline_wer == 0.0 and indoor.rel_reduction == 0.0
    assert report.row("all").baseline_errors == 6
    lines = report.metric_lines()
    assert "REL_REDUCTION\tother\t" + repr(4 / 6) in lines
    assert "other" in report.table()


def test_group_analysis_needs_labels():
    with pytest.raises(ContractError, match="u"):
        group_analysis([_nb("u", "a", [("a", 0, 0)])], {"u": 0})


# ---- files ---------------------------------------------------------------


def test_nbest_file_round_trip(tmp_path):
    lists = [_nb("u1", "a b", [("a b", -0.1, -2.5), ("a", 1e-300, -3.0)], "other"),
             _nb("u2", "c", [("", -1.0, 0.0)], "typical-indoors")]
    write_nbest(tmp_path / "n", lists)
    write_refs(tmp_path / "r", lists)
    write_groups(tmp_path / "g", lists)
    back = read_nbest(tmp_path / "n", tmp_path / "r", tmp_path / "g")
    assert back == lists
    with pytest.raises(DataError):
        read_nbest(tmp_path / "missing", tmp_path / "r")
