"""System variants: branch encoders, cross-encoding, and decoder assemblies.

Every variant shares the same front: convolutional subsampling, a mixture
encoder, and two speaker-differentiating conformer stacks with distinct
parameters.  The cross-encoding variants then concatenate the mixture
encoding with both branch outputs along time, add a learned per-partition
embedding to mark which rows belong to which stream, run shared conformer
blocks over the joint sequence, and clip the branch partitions back out.
A shared recognition stack and one output projection produce frame logits.

Parameters for each stage are drawn from a generator seeded with
(seed, stage id), so stages shared between variants are initialized
identically; this is what makes bypass-the-cross-blocks comparisons exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ContractError
from .layers import ConformerBlock, ConvSubsampler, Decoder, Linear, _flatten
from .losses import FIRST_REGULAR

SIMO_VARIANTS = ("simo_pit", "simo_heat", "simo_joint_heat")
CSE_VARIANTS = ("cse", "cse_no_ppe", "cse_no_mix", "cse_sot")
DECODER_VARIANTS = ("sot", "cse_sot")
VARIANTS = SIMO_VARIANTS + ("cse", "cse_no_ppe", "cse_no_mix", "sot", "cse_sot")

# stable per-stage stream ids; shared stages across variants must keep these
_STAGE = {"subsample": 0, "mix": 1, "sd1": 2, "sd2": 3, "ppe": 4,
          "cross": 5, "rec": 6, "head": 7, "enc": 8, "dec": 9}


@dataclass
class ModelConfig:
    """Architecture description; ``desk`` and ``full`` build the presets."""

    variant: str = "cse"
    d: int = 32
    heads: int = 4
    ff: int = 64
    dec_ff: int | None = None  # decoder feed-forward width; None means ff
    vocab: int = 20
    feat_dim: int = 8
    kernel: int = 7
    max_dist: int = 64
    dropout: float = 0.0
    mix_blocks: int = 1
    spkrdiff_blocks: int = 2
    cross_blocks: int = 1
    rec_blocks: int = 2
    enc_blocks: int = 0
    dec_blocks: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.d <= 0 or self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.vocab <= FIRST_REGULAR:
            raise ConfigError(f"vocab {self.vocab} leaves no regular tokens")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd, got {self.kernel}")
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be positive")
        if self.max_dist < 1:
            raise ConfigError("max_dist must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        counts = {f.name: getattr(self, f.name) for f in fields(self)
                  if f.name.endswith("_blocks")}
        if any(n < 0 for n in counts.values()):
            raise ConfigError("negative block count")
        if self.dec_ff is not None and self.dec_ff < 1:
            raise ConfigError("dec_ff must be positive")
        is_cse = self.variant in CSE_VARIANTS
        has_dec = self.variant in DECODER_VARIANTS
        if is_cse and self.cross_blocks < 1:
            raise ConfigError(f"{self.variant} requires cross blocks")
        if not is_cse and self.cross_blocks != 0:
            raise ConfigError(f"{self.variant} must not have cross blocks")
        if has_dec and self.dec_blocks < 1:
            raise ConfigError(f"{self.variant} requires decoder blocks")
        if not has_dec and self.dec_blocks != 0:
            raise ConfigError(f"{self.variant} must not have decoder blocks")
        if self.variant == "sot":
            branded = [k for k in ("mix_blocks", "spkrdiff_blocks", "rec_blocks")
                       if counts[k] != 0]
            if branded:
                raise ConfigError(f"sot must not have {branded[0]}")
        elif self.enc_blocks != 0:
            raise ConfigError(f"{self.variant} must not have plain encoder blocks")

    @classmethod
    def desk(cls, variant: str = "cse", **overrides) -> "ModelConfig":
        """CPU-sized preset used by the test suite and the toy corpus."""
        stages = dict(mix_blocks=1, spkrdiff_blocks=2, cross_blocks=1,
                      rec_blocks=2, enc_blocks=0, dec_blocks=0)
        if variant == "sot":
            stages = dict(mix_blocks=0, spkrdiff_blocks=0, cross_blocks=0,
                          rec_blocks=0, enc_blocks=4, dec_blocks=2)
        elif variant == "cse_sot":
            stages["dec_blocks"] = 2
        elif variant in SIMO_VARIANTS:
            stages["cross_blocks"] = 0
        stages.update(overrides)
        cfg = cls(variant=variant, **stages)
        cfg.validate()
        return cfg

    @classmethod
    def full(cls, variant: str = "cse", **overrides) -> "ModelConfig":
        """Full-scale preset: d=256, h=4, ff=1024; the mixture encoder is
        the subsampling CNN alone; decoder feed-forward is 2048 wide."""
        stages = dict(mix_blocks=0, spkrdiff_blocks=4, cross_blocks=2,
                      rec_blocks=6, enc_blocks=0, dec_blocks=0)
        if variant == "sot":
            stages = dict(mix_blocks=0, spkrdiff_blocks=0, cross_blocks=0,
                          rec_blocks=0, enc_blocks=16, dec_blocks=8)
        elif variant == "cse_sot":
            stages["dec_blocks"] = 8
        elif variant in SIMO_VARIANTS:
            stages.update(cross_blocks=0, rec_blocks=8)
        base = dict(d=256, heads=4, ff=1024, dec_ff=2048, feat_dim=80)
        base.update(stages)
        base.update(overrides)
        cfg = cls(variant=variant, **base)
        cfg.validate()
        return cfg


@dataclass
class BranchEncodings:
    """Same-length partitions feeding the cross-encoder."""

    x_hat: Tensor
    s1: Tensor
    s2: Tensor


class Model:
    """One constructed variant; owns all parameter Tensors."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        c = config

        def stage_rng(name: str) -> np.random.Generator:
            return np.random.default_rng([c.seed, _STAGE[name]])

        def stack(name: str, count: int) -> list[ConformerBlock]:
            rng = stage_rng(name)
            return [ConformerBlock(rng, c.d, c.heads, c.ff, c.kernel,
                                   c.max_dist, c.dropout) for _ in range(count)]

        self.subsample = ConvSubsampler(stage_rng("subsample"), c.feat_dim, c.d)
        self.mix: list[ConformerBlock] = []
        self.sd1: list[ConformerBlock] = []
        self.sd2: list[ConformerBlock] = []
        self.cross: list[ConformerBlock] = []
        self.rec: list[ConformerBlock] = []
        self.enc: list[ConformerBlock] = []
        self.ppe: Tensor | None = None
        self.dec: Decoder | None = None

        if c.variant == "sot":
            self.enc = stack("enc", c.enc_blocks)
        else:
            self.mix = stack("mix", c.mix_blocks)
            self.sd1 = stack("sd1", c.spkrdiff_blocks)
            self.sd2 = stack("sd2", c.spkrdiff_blocks)
            self.rec = stack("rec", c.rec_blocks)
            if c.variant in CSE_VARIANTS:
                self.cross = stack("cross", c.cross_blocks)
                if c.variant != "cse_no_ppe":
                    self.ppe = Tensor(np.zeros((3, c.d)), requires_grad=True)
        self.head = Linear(stage_rng("head"), c.d, c.vocab)
        if c.variant in DECODER_VARIANTS:
            self.dec = Decoder(stage_rng("dec"), c.vocab, c.d, c.heads,
                               c.dec_ff or c.ff, c.dec_blocks, c.max_dist,
                               c.dropout)

    # ---- parameter access -------------------------------------------------

    def parameters(self) -> dict:
        # Tensors are created once in __init__ and mutated in place, so the
        # flattened name -> Tensor map never changes after construction.
        cached = getattr(self, "_param_cache", None)
        if cached is not None:
            return cached
        children: dict = {"subsample": self.subsample}
        for name in ("mix", "sd1", "sd2", "cross", "rec", "enc"):
            for i, block in enumerate(getattr(self, name)):
                children[f"{name}.{i}"] = block
        if self.ppe is not None:
            children["ppe"] = self.ppe
        children["head"] = self.head
        if self.dec is not None:
            children["dec"] = self.dec
        self._param_cache = _flatten(children)
        return self._param_cache

    def state(self) -> dict:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            name = sorted(missing or extra)[0]
            kind = "missing" if missing else "unexpected"
            raise CheckpointError(f"{kind} parameter {name!r}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                    f"model {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # ---- forward passes ---------------------------------------------------

    def _mixture_encoding(self, feats, train=False, rng=None) -> Tensor:
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=np.float64))
        x = self.subsample(x)
        for block in self.mix:
            x = block(x, None, train, rng)
        return x

    def _branch_encodings(self, feats, train=False, rng=None) -> BranchEncodings:
        x_hat = self._mixture_encoding(feats, train, rng)
        b1, b2 = x_hat, x_hat
        for block in self.sd1:
            b1 = block(b1, None, train, rng)
        for block in self.sd2:
            b2 = block(b2, None, train, rng)
        return BranchEncodings(x_hat, b1, b2)

    def _recognize(self, s: Tensor, train=False, rng=None) -> Tensor:
        for block in self.rec:
            s = block(s, None, train, rng)
        return s

    def forward_simo(self, feats, train=False, rng=None):
        """Per-branch frame logits (h1, h2), each L x V."""
        if self.config.variant not in SIMO_VARIANTS:
            raise ConfigError(f"forward_simo on variant {self.config.variant!r}")
        b = self._branch_encodings(feats, train, rng)
        h1 = self.head(self._recognize(b.s1, train, rng))
        h2 = self.head(self._recognize(b.s2, train, rng))
        return h1, h2

    def cross_encode(self, b: BranchEncodings, train=False, rng=None,
                     sink=None, bypass=False):
        """Joint-encode the partitions and clip the branches back out.

        ``bypass`` skips the embedding and the cross blocks entirely; it
        exists only so tests can compare against the plain two-branch path.
        """
        if self.config.variant not in CSE_VARIANTS:
            raise ConfigError(f"cross_encode on variant {self.config.variant!r}")
        n_frames = b.s1.shape[0]
        if b.s2.shape[0] != n_frames or b.x_hat.shape[0] != n_frames:
            raise ContractError(
                f"partition lengths differ: {b.x_hat.shape[0]}, "
                f"{b.s1.shape[0]}, {b.s2.shape[0]}")
        if bypass:
            return b.s1, b.s2
        no_mix = self.config.variant == "cse_no_mix"
        parts = [b.s1, b.s2] if no_mix else [b.x_hat, b.s1, b.s2]
        joint = ad.concat(parts, axis=0)
        if self.ppe is not None:
            rows = np.repeat(np.arange(3 - len(parts), 3), n_frames)
            joint = ad.add(joint, ad.take(self.ppe, rows))
        for block in self.cross:
            joint = block(joint, None, train, rng, sink)
        k = len(parts)
        s1_hat = joint[(k - 2) * n_frames:(k - 1) * n_frames]
        s2_hat = joint[(k - 1) * n_frames:k * n_frames]
        return s1_hat, s2_hat

    def _cse_recognition(self, feats, train=False, rng=None, sink=None,
                         bypass_cross=False):
        b = self._branch_encodings(feats, train, rng)
        s1_hat, s2_hat = self.cross_encode(b, train, rng, sink, bypass_cross)
        r1 = self._recognize(s1_hat, train, rng)
        r2 = self._recognize(s2_hat, train, rng)
        return r1, r2

    def forward_cse(self, feats, train=False, rng=None, sink=None,
                    bypass_cross=False) -> Tensor:
        """Concatenated frame logits [H1; H2] of shape 2L x V."""
        if self.config.variant not in ("cse", "cse_no_ppe", "cse_no_mix"):
            raise ConfigError(f"forward_cse on variant {self.config.variant!r}")
        r1, r2 = self._cse_recognition(feats, train, rng, sink, bypass_cross)
        return ad.concat([self.head(r1), self.head(r2)], axis=0)

    def forward_sot(self, feats, targets, train=False, rng=None,
                    cross_sink=None):
        """(ctc_logits L x V, dec_logits) from the single-stream encoder."""
        if self.config.variant != "sot":
            raise ConfigError(f"forward_sot on variant {self.config.variant!r}")
        x = self._mixture_encoding(feats, train, rng)
        for block in self.enc:
            x = block(x, None, train, rng)
        ctc_logits = self.head(x)
        dec_logits = self.dec(targets, x, train, rng, cross_sink)
        return ctc_logits, dec_logits

    def forward_cse_sot(self, feats, targets, train=False, rng=None,
                        sink=None, cross_sink=None):
        """(ctc_logits 2L x V, dec_logits); decoder memory is the
        concatenated pre-projection recognition stream."""
        if self.config.variant != "cse_sot":
            raise ConfigError(f"forward_cse_sot on variant {self.config.variant!r}")
        r1, r2 = self._cse_recognition(feats, train, rng, sink)
        memory = ad.concat([r1, r2], axis=0)
        ctc_logits = self.head(memory)
        dec_logits = self.dec(targets, memory, train, rng, cross_sink)
        return ctc_logits, dec_logits

    def encoder_memory(self, feats) -> Tensor:
        """Decoder memory stream for autoregressive decoding (sot/cse_sot)."""
        if self.config.variant == "sot":
            x = self._mixture_encoding(feats)
            for block in self.enc:
                x = block(x)
            return x
        if self.config.variant == "cse_sot":
            r1, r2 = self._cse_recognition(feats)
            return ad.concat([r1, r2], axis=0)
        raise ConfigError(f"no decoder memory for variant {self.config.variant!r}")


def count_parameters(config: ModelConfig) -> int:
    """Exact trainable scalar count for the configured variant."""
    return sum(p.size for p in Model(config).parameters().values())


def dump_attention(model: Model, feats, out_dir) -> list:
    """Write per-head post-softmax attention of every cross block.

    One text matrix file per (block, head), named crossBB_headHH.txt, in
    block-major order; rows are queries over the joint sequence.
    """
    if model.config.variant not in CSE_VARIANTS:
        raise ConfigError(
            f"attention dump needs a cross-encoding variant, "
            f"got {model.config.variant!r}")
    sink: list = []
    model._cse_recognition(feats, sink=sink)
    heads = model.config.heads
    if len(sink) != model.config.cross_blocks * heads:
        raise ContractError(
            f"collected {len(sink)} attention maps, expected "
            f"{model.config.cross_blocks * heads}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, matrix in enumerate(sink):
        block, head = divmod(i, heads)
        path = out_dir / f"cross{block:02d}_head{head:02d}.txt"
        write_matrix(path, matrix)
        written.append(path)
    return written


def write_matrix(path, matrix: np.ndarray) -> None:
    """Plain-text matrix: first line "rows cols", then full-precision rows."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractError(f"matrix file needs rank 2, got {matrix.ndim}")
    with open(path, "w") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for row in matrix:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_matrix(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ContractError(f"malformed matrix header in {path}")
        rows, cols = int(header[0]), int(header[1])
        out = np.empty((rows, cols))
        for i in range(rows):
            vals = fh.readline().split()
            if len(vals) != cols:
                raise ContractError(f"row {i} of {path} has {len(vals)} values")
            out[i] = [float(v) for v in vals]
    return out
