"""Training objectives, label serialization, optimizer, learning-rate schedule.

The CTC loss is the workhorse: a log-space forward/backward recursion over
the blank-augmented label sequence, registered as a single tape primitive
with its analytic gradient (softmax minus state occupancy).  The two-branch
objectives differ only in how branch outputs are matched to labels: the
permutation-invariant form searches both assignments, the heuristic form
fixes them by speaking order, and the joint form concatenates the branch
streams and runs one CTC over labels separated by the speaker-change token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, CtcInfeasibleError, NumericError

# reserved token identifiers, fixed across the package
BLANK = 0
SC = 1
SOS = 2
EOS = 3
FIRST_REGULAR = 4

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9


def min_alignment_length(labels) -> int:
    """Shortest frame count that can emit ``labels`` under CTC."""
    labels = list(labels)
    repeats = sum(1 for i in range(1, len(labels)) if labels[i] == labels[i - 1])
    return len(labels) + repeats


def ctc_feasible(n_frames: int, labels) -> bool:
    return n_frames >= min_alignment_length(labels)


def _ctc_grad_and_loss(logits: np.ndarray, labels: list[int]):
    """Forward/backward DP in log space; returns (loss, dloss/dlogits)."""
    n_frames, vocab = logits.shape
    lp = ad.log_softmax_np(logits, axis=1)
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    n_states = ext.size
    # a skip over the preceding blank is legal when it does not merge repeats
    skip_ok = np.zeros(n_states, dtype=bool)
    skip_ok[3::2] = ext[3::2] != ext[1:-2:2]
    if n_states >= 2:
        skip_ok[1] = False  # state 1 has no s-2 predecessor beyond padding
        skip_ok[2] = False

    emit = lp[:, ext]  # (T, S)
    neg = -np.inf

    alpha = np.full((n_frames, n_states), neg)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if n_states > 2:
            skipped = np.where(skip_ok[2:], prev[:-2], neg)
            acc[2:] = np.logaddexp(acc[2:], skipped)
        alpha[t] = acc + emit[t]

    log_p = alpha[-1, -1]
    if n_states > 1:
        log_p = np.logaddexp(log_p, alpha[-1, -2])

    # beta excludes the emission at t, so alpha+beta counts each path once
    beta = np.full((n_frames, n_states), neg)
    beta[-1, -1] = 0.0
    if n_states > 1:
        beta[-1, -2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if n_states > 2:
            skipped = np.where(skip_ok[2:], nxt[2:], neg)
            acc[:-2] = np.logaddexp(acc[:-2], skipped)
        beta[t] = acc

    gamma = np.exp(alpha + beta - log_p)  # posterior state occupancy
    occ = np.zeros((n_frames, vocab))
    np.add.at(occ.T, ext, gamma.T)
    grad = np.exp(lp) - occ
    return -log_p, grad


def ctc_loss(logits: Tensor, labels) -> Tensor:
    """Negative log-probability of ``labels`` summed over all alignments."""
    labels = [int(t) for t in labels]
    if any(t == BLANK for t in labels):
        raise ContractError("CTC labels must not contain the blank id")
    n_frames, vocab = logits.shape
    if any(not 0 <= t < vocab for t in labels):
        raise ContractError(f"label id outside vocabulary of size {vocab}")
    needed = min_alignment_length(labels)
    if n_frames < needed:
        raise CtcInfeasibleError(n_frames, len(labels), needed)
    loss, grad = _ctc_grad_and_loss(logits.data, labels)
    if not np.isfinite(loss):
        raise NumericError(f"CTC loss is non-finite ({loss})")
    return ad.register(np.float64(loss), (logits,), lambda g: (g * grad,))


def pit_loss(h1: Tensor, h2: Tensor, y1, y2) -> Tensor:
    """Minimum over both branch/label assignments; grads flow through the winner."""
    def assignment_loss(a, b):
        if not (ctc_feasible(h1.shape[0], a) and ctc_feasible(h2.shape[0], b)):
            return None
        return ad.add(ctc_loss(h1, a), ctc_loss(h2, b))

    identity = assignment_loss(y1, y2)
    swapped = assignment_loss(y2, y1)
    if identity is None and swapped is None:
        longer = y1 if len(y1) >= len(y2) else y2
        raise CtcInfeasibleError(h1.shape[0], len(longer),
                                 min_alignment_length(longer))
    if identity is None:
        return swapped
    if swapped is None:
        return identity
    return identity if identity.item() <= swapped.item() else swapped


def heat_loss(h1: Tensor, h2: Tensor, y1, y2) -> Tensor:
    """Fixed assignment: branch 1 carries the first-talking speaker."""
    return ad.add(ctc_loss(h1, y1), ctc_loss(h2, y2))


def build_joint_heat_target(y1, y2=None) -> list[int]:
    """[y1, <sc>, y2] in speaking order; a lone talker keeps y1 unchanged."""
    y1 = [int(t) for t in y1]
    if not y1:
        raise ContractError("first speaker's transcript is empty")
    if y2 is None:
        return y1
    return y1 + [SC] + [int(t) for t in y2]


def joint_heat_loss(h_cat: Tensor, y1, y2=None) -> Tensor:
    """One CTC over the time-concatenated branch logits."""
    return ctc_loss(h_cat, build_joint_heat_target(y1, y2))


def serialize_sot(transcripts, starts=None) -> list[int]:
    """Concatenate transcripts in speaking order, separated by <sc> tokens.

    ``starts`` gives per-speaker start frames; omitted means the list is
    already chronological.  Ties keep the lower speaker index first.
    """
    transcripts = [list(map(int, y)) for y in transcripts]
    if not transcripts:
        raise ContractError("no transcripts to serialize")
    if starts is not None:
        if len(starts) != len(transcripts):
            raise ContractError("starts and transcripts length mismatch")
        order = sorted(range(len(transcripts)), key=lambda i: (starts[i], i))
        transcripts = [transcripts[i] for i in order]
    if not transcripts[0]:
        raise ContractError("first speaker's transcript is empty")
    out: list[int] = []
    for i, y in enumerate(transcripts):
        if i:
            out.append(SC)
        out.extend(y)
    return out


def attention_ce_loss(dec_logits: Tensor, serialized, smoothing: float = 0.1) -> Tensor:
    """Mean token cross-entropy against ``serialized + <eos>``, label-smoothed.

    The smoothed target distribution puts 1 - smoothing on the true token and
    spreads smoothing uniformly over all vocab entries.
    """
    targets = np.asarray(list(serialized) + [EOS], dtype=np.int64)
    n, vocab = dec_logits.shape
    if n != targets.size:
        raise ContractError(
            f"decoder emitted {n} rows but teacher forcing expects {targets.size}"
        )
    lsm = ad.log_softmax(dec_logits, axis=1)
    picked = ad.sum_(lsm[np.arange(n), targets])
    loss = ad.mul(picked, Tensor(-(1.0 - smoothing) / n))
    if smoothing > 0.0:
        loss = ad.add(loss, ad.mul(ad.sum_(lsm), Tensor(-smoothing / (vocab * n))))
    return loss


def joint_objective(l_ctc: Tensor, l_att: Tensor, weight: float) -> Tensor:
    """weight * ctc + (1 - weight) * attention."""
    if not 0.0 <= weight <= 1.0:
        raise ContractError(f"ctc weight {weight} outside [0, 1]")
    return ad.add(ad.mul(l_ctc, Tensor(weight)), ad.mul(l_att, Tensor(1.0 - weight)))


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp to base_lr at the warmup step, inverse-sqrt decay after."""
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    return base_lr * min(step / warmup_steps, np.sqrt(warmup_steps / step))


@dataclass
class AdamState:
    """First/second moment accumulators, shaped like their parameters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params
