"""Decoding and scoring: greedy decodes, stream splitting, WER variants.

Corpus WER is token-weighted (total errors over total reference tokens).
Two-talker outputs are scored permutation-invariantly: hypotheses are
assigned to references by exhaustive search over permutations, padding the
shorter side with empty transcripts so a dropped speaker costs deletions.
The overlap-aware summary averages the WERs of the three overlap buckets;
no-overlap (ratio 0) examples are reported as their own class outside it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError
from .losses import BLANK, EOS, SC, SOS
from .model import Model
from .simulate import load_split

MAX_SPEAKERS = 4  # exhaustive permutation search bound


def levenshtein(ref, hyp) -> tuple:
    """(substitutions, deletions, insertions) of a minimal-cost alignment.

    Ties resolve by fixed traceback preference diagonal > up > left, so the
    (S, D, I) split is deterministic even when several alignments share the
    minimal total cost.
    """
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dp[i, j] = min(sub, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins


def wer(errors, ref_count: int) -> float:
    """(S + D + I) / N; exceeds 1.0 when insertions outnumber tokens."""
    total = sum(errors) if isinstance(errors, (tuple, list)) else int(errors)
    if ref_count < 1:
        raise ContractError("WER needs at least one reference token")
    return total / ref_count


def ctc_greedy_decode(logits) -> list:
    """Frame argmax, collapse consecutive repeats, drop blanks."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    path = np.argmax(data, axis=1)
    out = []
    prev = -1
    for t in path:
        t = int(t)
        if t != prev and t != BLANK:
            out.append(t)
        prev = t
    return out


def attention_greedy_decode(model: Model, feats, max_len: int) -> tuple:
    """(transcript, truncated): argmax continuation from <sos> until <eos>."""
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    memory = model.encoder_memory(feats)
    seq = [SOS]
    for _ in range(max_len):
        logits = model.dec(seq, memory)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS:
            return seq[1:], False
        seq.append(nxt)
    return seq[1:], True


def split_sot(hyp) -> list:
    """Split a serialized stream on <sc>; empty segments are kept."""
    out = [[]]
    for t in hyp:
        if t == SC:
            out.append([])
        else:
            out[-1].append(int(t))
    return out


def pi_wer_detail(refs, hyps) -> tuple:
    """Best-permutation componentwise errors: (S, D, I, ref_count)."""
    refs = [list(y) for y in refs]
    hyps = [list(y) for y in hyps]
    if not refs:
        raise ContractError("pi_wer needs at least one reference")
    n = max(len(refs), len(hyps))
    if n > MAX_SPEAKERS:
        raise ContractError(
            f"{n} speakers exceeds the exhaustive search bound {MAX_SPEAKERS}")
    refs += [[] for _ in range(n - len(refs))]
    hyps += [[] for _ in range(n - len(hyps))]
    best = None
    for perm in itertools.permutations(range(n)):
        parts = [levenshtein(refs[i], hyps[perm[i]]) for i in range(n)]
        cand = tuple(sum(p[k] for p in parts) for k in range(3))
        if best is None or sum(cand) < sum(best):
            best = cand
    return best[0], best[1], best[2], sum(len(y) for y in refs)


def pi_wer(refs, hyps) -> tuple:
    """(total errors, total reference tokens) under the best assignment."""
    s, d, i, n = pi_wer_detail(refs, hyps)
    return s + d + i, n


def decode_example(model: Model, example, max_len: int = 64) -> tuple:
    """(hypothesis transcripts, truncated flag) for the model's variant."""
    variant = model.config.variant
    if variant in ("simo_pit", "simo_heat"):
        h1, h2 = model.forward_simo(example.features)
        return [ctc_greedy_decode(h1), ctc_greedy_decode(h2)], False
    if variant == "simo_joint_heat":
        h1, h2 = model.forward_simo(example.features)
        joint = ctc_greedy_decode(np.concatenate([h1.data, h2.data], axis=0))
        return split_sot(joint), False
    if variant in ("cse", "cse_no_ppe", "cse_no_mix"):
        h_cat = model.forward_cse(example.features)
        return split_sot(ctc_greedy_decode(h_cat)), False
    if variant in ("sot", "cse_sot"):
        hyp, truncated = attention_greedy_decode(model, example.features, max_len)
        return split_sot(hyp), truncated
    raise ContractError(f"no decoder for variant {variant!r}")


@dataclass
class ExampleResult:
    example_id: str
    bucket: str
    sub: int
    dels: int
    ins: int
    ref_count: int
    truncated: bool

    @property
    def errors(self) -> int:
        return self.sub + self.dels + self.ins


@dataclass
class EvalReport:
    split: str
    variant: str
    rows: list

    def _bucket_totals(self, bucket: str) -> tuple:
        rows = [r for r in self.rows if r.bucket == bucket]
        return sum(r.errors for r in rows), sum(r.ref_count for r in rows)

    def bucket_wer(self, bucket: str) -> float | None:
        errors, count = self._bucket_totals(bucket)
        return wer(errors, count) if count else None

    @property
    def overall_wer(self) -> float:
        return wer(sum(r.errors for r in self.rows),
                   sum(r.ref_count for r in self.rows))

    @property
    def oa_wer(self) -> float | None:
        """Arithmetic mean of the overlap-bucket WERs present."""
        values = [self.bucket_wer(b) for b in ("low", "median", "high")]
        values = [v for v in values if v is not None]
        return sum(values) / len(values) if values else None

    @property
    def single_wer(self) -> float | None:
        return self.bucket_wer("single")

    @property
    def truncated_count(self) -> int:
        return sum(1 for r in self.rows if r.truncated)


def evaluate_corpus(model: Model, corpus_dir, split: str, max_len: int = 64,
                    decode_fn=decode_example) -> EvalReport:
    """Decode and score every example of a split."""
    rows = []
    for example in load_split(corpus_dir, split):
        hyps, truncated = decode_fn(model, example, max_len)
        s, d, i, n = pi_wer_detail(example.transcripts, hyps)
        rows.append(ExampleResult(example.example_id, example.bucket,
                                  s, d, i, n, truncated))
    return EvalReport(split, model.config.variant, rows)


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


def write_report(report: EvalReport, out_dir) -> tuple:
    """report.tsv (per-example rows) + summary.txt (Table-style block)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / "report.tsv"
    with open(tsv, "w") as fh:
        fh.write("id\tbucket\tsub\tdel\tins\tref_count\ttruncated\n")
        for r in report.rows:
            fh.write(f"{r.example_id}\t{r.bucket}\t{r.sub}\t{r.dels}\t"
                     f"{r.ins}\t{r.ref_count}\t{int(r.truncated)}\n")
    summary = out_dir / "summary.txt"
    with open(summary, "w") as fh:
        fh.write(f"variant {report.variant}\n")
        fh.write(f"split {report.split}\n")
        fh.write(f"examples {len(report.rows)}\n")
        fh.write(f"truncated {report.truncated_count}\n")
        fh.write("column\twer_pct\n")
        fh.write(f"overall\t{_fmt(report.overall_wer)}\n")
        for bucket in ("low", "median", "high"):
            fh.write(f"{bucket}\t{_fmt(report.bucket_wer(bucket))}\n")
        fh.write(f"oa_wer\t{_fmt(report.oa_wer)}\n")
        fh.write(f"single\t{_fmt(report.single_wer)}\n")
    return tsv, summary
