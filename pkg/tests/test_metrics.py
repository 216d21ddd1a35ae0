"""Scoring: edit distance, permutation-invariant WER, stream splitting."""

import itertools

import numpy as np
import pytest

from crosstalk.errors import ContractError
from crosstalk.losses import EOS, SC, serialize_sot
from crosstalk.metrics import (EvalReport, ExampleResult,
                               attention_greedy_decode, ctc_greedy_decode,
                               levenshtein, pi_wer, pi_wer_detail, split_sot,
                               wer, write_report)


def edit_distance_by_recursion(ref, hyp) -> int:
    """Independent oracle: memoized textbook recursion on suffixes."""
    from functools import lru_cache

    ref = tuple(ref)
    hyp = tuple(hyp)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        return min(go(i + 1, j + 1) + (ref[i] != hyp[j]),
                   go(i + 1, j) + 1,
                   go(i, j + 1) + 1)

    return go(0, 0)


def pi_wer_by_permutations(refs, hyps):
    """Independent oracle over explicit padded permutations."""
    refs = [list(y) for y in refs]
    hyps = [list(y) for y in hyps]
    n = max(len(refs), len(hyps))
    refs += [[] for _ in range(n - len(refs))]
    hyps += [[] for _ in range(n - len(hyps))]
    best = min(
        sum(edit_distance_by_recursion(refs[i], hyps[p[i]]) for i in range(n))
        for p in itertools.permutations(range(n)))
    return best, sum(len(y) for y in refs)


# ---- levenshtein ---------------------------------------------------------

def test_levenshtein_hand_cases():
    assert levenshtein([1, 2, 3], [1, 2, 3]) == (0, 0, 0)
    assert levenshtein([1, 2, 3], [1, 9, 3]) == (1, 0, 0)
    assert levenshtein([1, 2, 3], [1, 3]) == (0, 1, 0)
    assert levenshtein([1, 3], [1, 2, 3]) == (0, 0, 1)
    assert levenshtein([], [4, 5]) == (0, 0, 2)
    assert levenshtein([4, 5], []) == (0, 2, 0)


def test_levenshtein_total_matches_recursion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        ref = list(rng.integers(0, 5, size=rng.integers(0, 8)))
        hyp = list(rng.integers(0, 5, size=rng.integers(0, 8)))
        assert sum(levenshtein(ref, hyp)) == edit_distance_by_recursion(ref, hyp)


def test_levenshtein_component_bounds():
    # S+D and S+I are bounded by the respective sequence lengths
    rng = np.random.default_rng(1)
    for _ in range(200):
        ref = list(rng.integers(0, 4, size=rng.integers(0, 7)))
        hyp = list(rng.integers(0, 4, size=rng.integers(0, 7)))
        s, d, i = levenshtein(ref, hyp)
        assert s + d <= len(ref)
        assert s + i <= len(hyp)
        # alignment conservation: ref consumes S+D+matches, hyp S+I+matches
        assert (len(ref) - s - d) == (len(hyp) - s - i)


def test_levenshtein_triangle_inequality():
    rng = np.random.default_rng(4)
    for _ in range(300):
        a, b, c = (list(rng.integers(0, 4, size=rng.integers(0, 7)))
                   for _ in range(3))
        assert sum(levenshtein(a, c)) <= (sum(levenshtein(a, b))
                                          + sum(levenshtein(b, c)))


def test_wer_ratio_and_empty_reference():
    assert wer((1, 1, 0), 4) == 0.5
    assert wer(3, 2) == 1.5
    with pytest.raises(ContractError):
        wer((0, 0, 0), 0)


# ---- greedy CTC decode -----------------------------------------------------

def test_ctc_greedy_decode_collapses_and_drops_blanks():
    V = 6
    path = [0, 4, 4, 0, 4, 5, 5, 0, 0]
    logits = np.full((len(path), V), -5.0)
    for t, k in enumerate(path):
        logits[t, k] = 5.0
    assert ctc_greedy_decode(logits) == [4, 4, 5]


def test_ctc_greedy_decode_all_blank_is_empty():
    logits = np.zeros((4, 3))
    logits[:, 0] = 9.0
    assert ctc_greedy_decode(logits) == []


def test_ctc_greedy_decode_output_shape_properties():
    # never emits blank; repeats only survive when blank-separated, so the
    # output can never be longer than the number of frame-path runs
    rng = np.random.default_rng(5)
    for _ in range(300):
        logits = rng.normal(size=(int(rng.integers(1, 12)), 5))
        out = ctc_greedy_decode(logits)
        assert 0 not in out
        path = np.argmax(logits, axis=1)
        runs = [int(k) for k, _ in itertools.groupby(path)]
        assert out == [k for k in runs if k != 0]


# ---- attention greedy decode ------------------------------------------------

def _biased_decoder_model(favored: int):
    """Tiny decoder model whose output-layer bias always argmaxes `favored`."""
    from crosstalk.model import Model, ModelConfig

    m = Model(ModelConfig.desk("sot", d=16, heads=2, ff=24, dec_ff=24,
                               vocab=8, feat_dim=6))
    m.parameters()["dec.out.b"].data[favored] = 1e6
    return m


def test_attention_decode_stops_immediately_on_eos_bias():
    m = _biased_decoder_model(EOS)
    feats = np.random.default_rng(0).normal(size=(20, 6))
    assert attention_greedy_decode(m, feats, max_len=16) == ([], False)


def test_attention_decode_truncates_at_max_len():
    m = _biased_decoder_model(5)
    feats = np.random.default_rng(1).normal(size=(20, 6))
    assert attention_greedy_decode(m, feats, max_len=1) == ([5], True)
    assert attention_greedy_decode(m, feats, max_len=3) == ([5, 5, 5], True)


def test_attention_decode_is_deterministic():
    from crosstalk.model import Model, ModelConfig

    m = Model(ModelConfig.desk("sot", d=16, heads=2, ff=24, dec_ff=24,
                               vocab=8, feat_dim=6, seed=7))
    feats = np.random.default_rng(2).normal(size=(20, 6))
    first = attention_greedy_decode(m, feats, max_len=8)
    assert attention_greedy_decode(m, feats, max_len=8) == first


def test_attention_decode_rejects_nonpositive_max_len():
    m = _biased_decoder_model(EOS)
    feats = np.zeros((20, 6))
    with pytest.raises(ContractError):
        attention_greedy_decode(m, feats, max_len=0)


# ---- stream splitting ------------------------------------------------------

def test_split_sot_keeps_empty_segments():
    assert split_sot([4, 5, SC, 6]) == [[4, 5], [6]]
    assert split_sot([SC, 4]) == [[], [4]]
    assert split_sot([4, SC]) == [[4], []]
    assert split_sot([]) == [[]]
    assert split_sot([SC, SC]) == [[], [], []]


def test_split_round_trips_serialization():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 4))
        ys = [list(rng.integers(4, 20, size=rng.integers(1, 6)))
              for _ in range(n)]
        starts = sorted(rng.integers(0, 50, size=n))
        transcripts = [[int(t) for t in y] for y in ys]
        examples = list(zip(starts, transcripts))
        ser = serialize_sot(transcripts, starts=[int(s) for s in starts])
        back = split_sot(ser)
        # chronological order: same multiset of streams, sorted by start
        order = sorted(range(n), key=lambda i: (starts[i], i))
        assert back == [transcripts[i] for i in order]
        del examples


# ---- permutation-invariant WER ------------------------------------------

def test_pi_wer_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(500):
        n_ref = int(rng.integers(1, 4))
        n_hyp = int(rng.integers(0, 4))
        refs = [list(rng.integers(4, 9, size=rng.integers(1, 6)))
                for _ in range(n_ref)]
        hyps = [list(rng.integers(4, 9, size=rng.integers(0, 6)))
                for _ in range(n_hyp)]
        errors, count = pi_wer(refs, hyps)
        want_errors, want_count = pi_wer_by_permutations(refs, hyps)
        assert (errors, count) == (want_errors, want_count)


def test_pi_wer_invariant_to_hypothesis_order():
    rng = np.random.default_rng(6)
    for _ in range(200):
        refs = [list(rng.integers(4, 12, size=rng.integers(0, 5)))
                for _ in range(int(rng.integers(1, 4)))]
        hyps = [list(rng.integers(4, 12, size=rng.integers(0, 5)))
                for _ in range(int(rng.integers(0, 4)))]
        base = pi_wer(refs, hyps)
        for perm in itertools.permutations(hyps):
            assert pi_wer(refs, list(perm)) == base


def test_pi_wer_prefers_the_better_assignment():
    refs = [[4, 5, 6], [7, 8]]
    errors, count = pi_wer(refs, [[7, 8], [4, 5, 6]])
    assert (errors, count) == (0, 5)


def test_pi_wer_pads_missing_hypotheses():
    errors, count = pi_wer([[4, 5, 6], [7, 8]], [[4, 5, 6]])
    assert (errors, count) == (2, 5)  # second speaker fully deleted


def test_pi_wer_counts_surplus_hypotheses_as_insertions():
    errors, count = pi_wer([[4, 5]], [[4, 5], [6, 7, 8]])
    assert (errors, count) == (3, 2)


def test_pi_wer_contract_errors():
    with pytest.raises(ContractError):
        pi_wer([], [[4]])
    with pytest.raises(ContractError):
        pi_wer([[4]] * 5, [[4]])


def test_pi_wer_detail_components_sum_to_total():
    rng = np.random.default_rng(4)
    for _ in range(100):
        refs = [list(rng.integers(4, 8, size=rng.integers(1, 5)))
                for _ in range(int(rng.integers(1, 3)))]
        hyps = [list(rng.integers(4, 8, size=rng.integers(0, 5)))
                for _ in range(int(rng.integers(1, 3)))]
        s, d, i, n = pi_wer_detail(refs, hyps)
        errors, count = pi_wer(refs, hyps)
        assert s + d + i == errors and n == count


# ---- report aggregation ----------------------------------------------------

def report_rows():
    mk = ExampleResult
    return [
        mk("a", "single", 0, 0, 0, 4, False),
        mk("b", "single", 1, 0, 0, 4, False),
        mk("c", "low", 1, 1, 0, 5, False),
        mk("d", "median", 0, 2, 1, 6, False),
        mk("e", "high", 2, 0, 0, 5, True),
        mk("f", "high", 0, 1, 0, 5, False),
    ]


def test_report_bucket_and_overall_wers():
    rep = EvalReport("test", "cse", report_rows())
    assert rep.single_wer == pytest.approx(1 / 8)
    assert rep.bucket_wer("low") == pytest.approx(2 / 5)
    assert rep.bucket_wer("median") == pytest.approx(3 / 6)
    assert rep.bucket_wer("high") == pytest.approx(3 / 10)
    assert rep.overall_wer == pytest.approx(9 / 29)
    assert rep.truncated_count == 1


def test_oa_wer_is_unweighted_bucket_mean():
    rep = EvalReport("test", "cse", report_rows())
    hand = (2 / 5 + 3 / 6 + 3 / 10) / 3.0
    assert rep.oa_wer == pytest.approx(hand, abs=1e-12)


def test_oa_wer_skips_absent_buckets():
    rows = [r for r in report_rows() if r.bucket in ("single", "high")]
    rep = EvalReport("test", "cse", rows)
    assert rep.oa_wer == pytest.approx(3 / 10)
    only_single = EvalReport("t", "cse", [report_rows()[0]])
    assert only_single.oa_wer is None
    assert only_single.bucket_wer("high") is None


def test_write_report_layout(tmp_path):
    rep = EvalReport("test", "cse", report_rows())
    tsv, summary = write_report(rep, tmp_path)
    lines = tsv.read_text().splitlines()
    assert lines[0] == "id\tbucket\tsub\tdel\tins\tref_count\ttruncated"
    assert lines[1] == "a\tsingle\t0\t0\t0\t4\t0"
    assert len(lines) == 1 + 6
    text = summary.read_text()
    assert "variant cse" in text
    assert f"overall\t{100 * 9 / 29:.2f}" in text
    assert "single\t12.50" in text
