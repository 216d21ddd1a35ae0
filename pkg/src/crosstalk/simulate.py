"""Synthetic two-talker corpus: token rendering, delay mixing, bucketing.

An utterance is a token sequence rendered to frames: each token contributes
``frames_per_token`` copies of its fixed random unit pattern vector, plus a
fixed per-speaker voice vector, plus Gaussian noise.  Mixtures zero-pad and
sum two utterances with the second delayed, so speaker 1 always talks first;
the overlap ratio (overlapped frames over covered frames) assigns each
example to a bucket.  Generation is pure given (spec, seed): every example
draws from a generator seeded by (seed, split, index).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, GenerationError
from .layers import ConvSubsampler
from .losses import (FIRST_REGULAR, build_joint_heat_target,
                     min_alignment_length, serialize_sot)

SPEED_FACTORS = (0.9, 1.0, 1.1)
BUCKETS = ("single", "low", "median", "high")
SPLITS = ("train", "dev", "test")

MANIFEST_COLUMNS = ("id", "n_speakers", "starts", "ratio", "bucket",
                    "tokens_1", "tokens_2")


@dataclass
class SimSpec:
    """Corpus recipe: rendering constants plus per-split example counts.

    ``<split>_two`` examples draw an unconstrained delay; ``<split>_low`` /
    ``_median`` / ``_high`` rejection-sample the delay until the overlap
    lands in that bucket.
    """

    seed: int = 0
    feat_dim: int = 8
    vocab: int = 20
    frames_per_token: int = 8
    noise: float = 0.1
    min_tokens: int = 2
    max_tokens: int = 6
    speakers: int = 8
    speed_perturb: bool = True

    train_single: int = 0
    train_two: int = 0
    train_low: int = 0
    train_median: int = 0
    train_high: int = 0
    dev_single: int = 0
    dev_two: int = 0
    dev_low: int = 0
    dev_median: int = 0
    dev_high: int = 0
    test_single: int = 0
    test_two: int = 0
    test_low: int = 0
    test_median: int = 0
    test_high: int = 0

    @classmethod
    def default_toy(cls, seed: int = 0, **overrides) -> "SimSpec":
        """The standard corpus: 8000 train, 500 dev, 500 test examples.

        Training mixes single-talker and uniform-delay two-talker examples;
        the test split targets each overlap bucket evenly so bucketed error
        rates are measured on equal support.
        """
        counts = dict(train_single=2000, train_two=6000,
                      dev_single=125, dev_two=375,
                      test_single=125, test_low=125, test_median=125,
                      test_high=125)
        counts.update(overrides)
        spec = cls(seed=seed, **counts)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.vocab <= FIRST_REGULAR:
            raise ContractError(f"vocab {self.vocab} leaves no regular tokens")
        if self.feat_dim < 1 or self.frames_per_token < 1:
            raise ContractError("feat_dim and frames_per_token must be positive")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ContractError("need 1 <= min_tokens <= max_tokens")
        if self.speakers < 2:
            raise ContractError("speaker pool needs at least 2 voices")
        if self.noise < 0:
            raise ContractError("noise must be >= 0")
        for f in fields(self):
            if f.name.split("_")[0] in SPLITS and getattr(self, f.name) < 0:
                raise ContractError(f"negative count {f.name}")


@dataclass
class ToyUtterance:
    speaker_id: int
    tokens: list
    features: np.ndarray  # (T, feat_dim)
    voice: np.ndarray     # (feat_dim,)


@dataclass
class MixtureExample:
    """A rendered example.  ``spans`` carries full (start, end) intervals at
    construction time; the on-disk manifest persists only the starts, so
    examples read back from disk have ``spans`` set to None."""

    example_id: str
    features: np.ndarray  # (Tmix, feat_dim)
    transcripts: list     # per speaker, ordered by start frame
    starts: list          # per speaker start frame
    spans: list | None
    overlap_ratio: float
    bucket: str

    @property
    def n_speakers(self) -> int:
        return len(self.transcripts)


def token_patterns(spec: SimSpec) -> np.ndarray:
    """Fixed unit pattern per regular token id; reserved rows stay zero."""
    rng = np.random.default_rng([spec.seed, 7])
    pats = np.zeros((spec.vocab, spec.feat_dim))
    raw = rng.normal(size=(spec.vocab - FIRST_REGULAR, spec.feat_dim))
    pats[FIRST_REGULAR:] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return pats


def voice_vector(spec: SimSpec, speaker_id: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 11, int(speaker_id)])
    v = rng.normal(size=spec.feat_dim)
    return v / np.linalg.norm(v)


def render_utterance(spec: SimSpec, rng: np.random.Generator, speaker_id: int,
                     length: int | None = None, tokens=None) -> ToyUtterance:
    """Expand tokens to frames_per_token frames each: pattern + voice + noise."""
    if tokens is None:
        if length is None or length < 1:
            raise ContractError("utterance needs length >= 1 or explicit tokens")
        tokens = rng.integers(FIRST_REGULAR, spec.vocab, size=length)
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ContractError("utterance needs at least one token")
    if any(not FIRST_REGULAR <= t < spec.vocab for t in tokens):
        raise ContractError("token outside the regular vocabulary")
    pats = token_patterns(spec)
    voice = voice_vector(spec, speaker_id)
    feats = np.repeat(pats[tokens], spec.frames_per_token, axis=0) + voice
    if spec.noise > 0:
        feats = feats + rng.normal(0.0, spec.noise, size=feats.shape)
    return ToyUtterance(int(speaker_id), tokens, feats, voice)


def speed_perturb(u: ToyUtterance, factor: float) -> ToyUtterance:
    """Nearest-neighbor resample of the time axis to round(T / factor)."""
    if factor not in SPEED_FACTORS:
        raise ContractError(f"speed factor {factor} not in {SPEED_FACTORS}")
    if factor == 1.0:
        return u
    n_frames = u.features.shape[0]
    n_out = int(round(n_frames / factor))
    idx = np.rint(np.linspace(0.0, n_frames - 1, n_out)).astype(np.int64)
    return ToyUtterance(u.speaker_id, list(u.tokens), u.features[idx], u.voice)


def overlap_ratio(spans) -> float:
    """Frames covered by two or more spans over frames covered by any."""
    spans = list(spans)
    if not spans:
        raise ContractError("overlap_ratio needs at least one span")
    end = max(e for _, e in spans)
    cover = np.zeros(end, dtype=np.int64)
    for s, e in spans:
        if s < 0 or e < s:
            raise ContractError(f"bad span ({s}, {e})")
        cover[s:e] += 1
    covered = int((cover >= 1).sum())
    if covered == 0:
        raise ContractError("spans cover no frames")
    return int((cover >= 2).sum()) / covered


def bucket_of(ratio: float) -> str:
    """Half-open-left, closed-right buckets; ratio 0 is the no-overlap class."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"overlap ratio {ratio} outside [0, 1]")
    if ratio == 0.0:
        return "single"
    if ratio <= 0.2:
        return "low"
    if ratio <= 0.5:
        return "median"
    return "high"


def mix(u1: ToyUtterance, u2: ToyUtterance, delay: int,
        example_id: str = "") -> MixtureExample:
    """Zero-padded sum with u2 shifted right; u1 talks first by construction."""
    if delay < 0:
        raise ContractError(f"delay must be >= 0, got {delay}")
    t1, t2 = u1.features.shape[0], u2.features.shape[0]
    t_mix = max(t1, delay + t2)
    feats = np.zeros((t_mix, u1.features.shape[1]))
    feats[:t1] += u1.features
    feats[delay:delay + t2] += u2.features
    spans = [(0, t1), (delay, delay + t2)]
    ratio = overlap_ratio(spans)
    return MixtureExample(example_id, feats, [list(u1.tokens), list(u2.tokens)],
                          [0, delay], spans, ratio, bucket_of(ratio))


def single_example(u: ToyUtterance, example_id: str = "") -> MixtureExample:
    t = u.features.shape[0]
    return MixtureExample(example_id, u.features.copy(), [list(u.tokens)],
                          [0], [(0, t)], 0.0, "single")


def targeted_delay(rng: np.random.Generator, t1: int, t2: int, bucket: str,
                   max_attempts: int = 1000) -> int:
    """Rejection-sample a delay whose overlap lands in ``bucket``."""
    if bucket not in BUCKETS:
        raise ContractError(f"unknown bucket {bucket!r}")
    for _ in range(max_attempts):
        delay = int(rng.integers(0, t1 + 1))
        spans = [(0, t1), (delay, delay + t2)]
        if bucket_of(overlap_ratio(spans)) == bucket:
            return delay
    raise GenerationError(
        f"bucket {bucket!r} unreachable for lengths ({t1}, {t2})")


# ---- corpus build ----------------------------------------------------------

def _feasible(example: MixtureExample) -> bool:
    """Every training objective must have enough subsampled frames."""
    n_sub = ConvSubsampler.output_length(example.features.shape[0])
    if example.features.shape[0] < ConvSubsampler.MIN_FRAMES or n_sub < 1:
        return False
    for y in example.transcripts:
        if n_sub < min_alignment_length(y):
            return False
    if example.n_speakers == 2:
        joint = build_joint_heat_target(*example.transcripts)
        if 2 * n_sub < min_alignment_length(joint):
            return False
        # The single-stream variant aligns the same separated target against
        # L frames, not 2L; every corpus must stay trainable for it too.
        if n_sub < min_alignment_length(serialize_sot(example.transcripts)):
            return False
    return True


def _draw_speakers(spec: SimSpec, rng: np.random.Generator, n: int) -> list:
    return list(rng.choice(spec.speakers, size=n, replace=False))


def _draw_utterance(spec: SimSpec, rng, speaker: int, perturb: bool) -> ToyUtterance:
    length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    u = render_utterance(spec, rng, speaker, length)
    if perturb:
        u = speed_perturb(u, SPEED_FACTORS[rng.integers(0, len(SPEED_FACTORS))])
    return u


def generate_example(spec: SimSpec, rng: np.random.Generator, example_id: str,
                     two_talker: bool, perturb: bool,
                     target_bucket: str | None = None,
                     max_attempts: int = 100) -> MixtureExample:
    """One example; resamples until subsampled CTC targets are feasible."""
    for _ in range(max_attempts):
        if not two_talker:
            speaker, = _draw_speakers(spec, rng, 1)
            ex = single_example(_draw_utterance(spec, rng, speaker, perturb),
                                example_id)
        else:
            spk1, spk2 = _draw_speakers(spec, rng, 2)
            u1 = _draw_utterance(spec, rng, spk1, perturb)
            u2 = _draw_utterance(spec, rng, spk2, perturb)
            t1 = u1.features.shape[0]
            if target_bucket is None:
                delay = int(rng.integers(0, t1 + 1))
            else:
                try:
                    delay = targeted_delay(rng, t1, u2.features.shape[0],
                                           target_bucket)
                except GenerationError:
                    continue  # these lengths cannot reach the bucket; redraw
            ex = mix(u1, u2, delay, example_id)
        if _feasible(ex):
            return ex
    raise GenerationError(
        f"could not generate a feasible example for {example_id} "
        f"in {max_attempts} attempts")


def write_feat(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.astype("<f8").tobytes())


def read_feat(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise DataError(f"truncated feature header in {path}")
        n_frames, feat_dim = struct.unpack("<II", header)
        payload = fh.read()
    want = n_frames * feat_dim * 8
    if len(payload) != want:
        raise DataError(f"feature payload in {path}: {len(payload)} bytes, "
                        f"expected {want}")
    return np.frombuffer(payload, dtype="<f8").reshape(n_frames, feat_dim).copy()


def _manifest_row(ex: MixtureExample) -> str:
    tokens = [" ".join(str(t) for t in y) for y in ex.transcripts]
    while len(tokens) < 2:
        tokens.append("")
    return "\t".join([
        ex.example_id,
        str(ex.n_speakers),
        ",".join(str(s) for s in ex.starts),
        repr(float(ex.overlap_ratio)),
        ex.bucket,
        tokens[0],
        tokens[1],
    ])


def write_split(out_dir, split: str, examples) -> Path:
    split_dir = Path(out_dir) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    manifest = split_dir / "manifest.tsv"
    with open(manifest, "w") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for ex in examples:
            fh.write(_manifest_row(ex) + "\n")
            write_feat(split_dir / f"{ex.example_id}.feat", ex.features)
    return manifest


def load_split(corpus_dir, split: str) -> list:
    """Read a split back; raises DataError on malformed files."""
    split_dir = Path(corpus_dir) / split
    manifest = split_dir / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    examples = []
    with open(manifest) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != list(MANIFEST_COLUMNS):
            raise DataError(f"manifest columns {header} != {list(MANIFEST_COLUMNS)}")
        for line_no, line in enumerate(fh, start=2):
            cols = line.rstrip("\n").split("\t")
            if len(cols) != len(MANIFEST_COLUMNS):
                raise DataError(f"{manifest}:{line_no}: {len(cols)} columns")
            ex_id, n_spk, starts, ratio, bucket, tok1, tok2 = cols
            n_spk = int(n_spk)
            transcripts = [[int(t) for t in tok.split()] for tok in (tok1, tok2)]
            transcripts = transcripts[:n_spk]
            start_list = [int(s) for s in starts.split(",")]
            if len(start_list) != n_spk:
                raise DataError(f"{manifest}:{line_no}: starts/speaker mismatch")
            if bucket not in BUCKETS:
                raise DataError(f"{manifest}:{line_no}: unknown bucket {bucket!r}")
            feats = read_feat(split_dir / f"{ex_id}.feat")
            examples.append(MixtureExample(ex_id, feats, transcripts,
                                           start_list, None, float(ratio),
                                           bucket))
    return examples


def build_corpus(spec: SimSpec, out_dir) -> dict:
    """Write all requested splits; returns {split: [example ids]}."""
    spec.validate()
    built: dict = {}
    for split_ix, split in enumerate(SPLITS):
        plan = [(False, None)] * getattr(spec, f"{split}_single")
        plan += [(True, None)] * getattr(spec, f"{split}_two")
        for bucket in ("low", "median", "high"):
            plan += [(True, bucket)] * getattr(spec, f"{split}_{bucket}")
        if not plan:
            continue
        perturb = spec.speed_perturb and split == "train"
        examples = []
        for i, (two, bucket) in enumerate(plan):
            rng = np.random.default_rng([spec.seed, split_ix, i])
            ex_id = f"{split}_{i:06d}"
            examples.append(generate_example(spec, rng, ex_id, two, perturb,
                                             bucket))
        write_split(out_dir, split, examples)
        built[split] = [ex.example_id for ex in examples]
    return built
