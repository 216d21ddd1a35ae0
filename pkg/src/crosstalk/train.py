"""Training loop: per-example gradients with accumulation, epoch snapshots,
best-k checkpoint fusion, and a replayable run manifest.

Batch size is one example with gradients accumulated over ``accumulate``
examples per optimizer step; sequences vary in length so there is no padding
anywhere.  All randomness (example order, dropout) is drawn from a generator
seeded by (seed, epoch), which is what makes resuming exact: training e
epochs and then e' more reproduces the e+e' run bitwise.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import losses as ls
from .autodiff import Tape, Tensor, backward
from .checkpoint import average_checkpoints, load_params, save_params
from .errors import (ConfigError, CtcInfeasibleError, DataError, NumericError)
from .model import Model, ModelConfig
from .simulate import load_split


@dataclass
class TrainConfig:
    model: ModelConfig
    epochs: int = 20
    warmup: int = 500
    base_lr: float = 5e-4
    accumulate: int = 8
    best_k: int = 3
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    shuffle: bool = True

    def validate(self) -> None:
        self.model.validate()
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.accumulate < 1:
            raise ConfigError("accumulate must be >= 1")
        if not 1 <= self.best_k:
            raise ConfigError("best_k must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError("ctc_weight outside [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing outside [0, 1)")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        model_kv, train_kv = cfgmod.split_mapping(mapping, ModelConfig, _TrainFields)
        model = cfgmod.bind(ModelConfig, model_kv)
        rest = cfgmod.bind(_TrainFields, train_kv)
        cfg = cls(model=model, **asdict(rest))
        cfg.validate()
        return cfg

    def snapshot(self) -> dict:
        flat = {k: v for k, v in cfgmod.parse_kv(cfgmod.to_kv(self.model)).items()}
        for f in ("epochs", "warmup", "base_lr", "accumulate", "best_k",
                  "ctc_weight", "label_smoothing", "shuffle"):
            value = getattr(self, f)
            flat[f] = str(int(value) if isinstance(value, bool) else value)
        return flat


@dataclass
class _TrainFields:
    """Key holder so flat files can mix model and loop settings."""

    epochs: int = 20
    warmup: int = 500
    base_lr: float = 5e-4
    accumulate: int = 8
    best_k: int = 3
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    shuffle: bool = True


@dataclass
class RunManifest:
    config: dict
    seed: int
    corpus_checksum: str
    dev_loss_init: float = 0.0
    train_losses: list = field(default_factory=list)
    dev_losses: list = field(default_factory=list)
    best_epochs: list = field(default_factory=list)
    wall_clock: float = 0.0
    epochs_done: int = 0

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


def corpus_checksum(corpus_dir, splits=("train", "dev")) -> str:
    """Digest of the split manifests; identifies the corpus content."""
    h = hashlib.sha256()
    for split in splits:
        manifest = Path(corpus_dir) / split / "manifest.tsv"
        if not manifest.exists():
            raise DataError(f"no manifest at {manifest}")
        h.update(manifest.read_bytes())
    return h.hexdigest()


def example_loss(model: Model, example, cfg: TrainConfig, train: bool = False,
                 rng=None) -> Tensor:
    """Variant-appropriate objective for one example."""
    variant = model.config.variant
    ys = example.transcripts
    y1 = ys[0]
    y2 = ys[1] if len(ys) > 1 else None
    try:
        if variant in ("simo_pit", "simo_heat"):
            h1, h2 = model.forward_simo(example.features, train, rng)
            pair = (y1, y2 if y2 is not None else [])
            if variant == "simo_pit":
                return ls.pit_loss(h1, h2, *pair)
            return ls.heat_loss(h1, h2, *pair)
        if variant == "simo_joint_heat":
            h1, h2 = model.forward_simo(example.features, train, rng)
            return ls.joint_heat_loss(ad.concat([h1, h2], axis=0), y1, y2)
        if variant in ("cse", "cse_no_ppe", "cse_no_mix"):
            h_cat = model.forward_cse(example.features, train, rng)
            return ls.joint_heat_loss(h_cat, y1, y2)
        if variant in ("sot", "cse_sot"):
            serialized = ls.serialize_sot(ys)
            forward = (model.forward_sot if variant == "sot"
                       else model.forward_cse_sot)
            ctc_logits, dec_logits = forward(example.features,
                                             [ls.SOS] + serialized, train, rng)
            l_ctc = ls.ctc_loss(ctc_logits, serialized)
            l_att = ls.attention_ce_loss(dec_logits, serialized,
                                         cfg.label_smoothing)
            return ls.joint_objective(l_ctc, l_att, cfg.ctc_weight)
    except CtcInfeasibleError as err:
        raise DataError(
            f"example {example.example_id}: target does not fit the "
            f"subsampled frames ({err})") from err
    raise ConfigError(f"no objective for variant {variant!r}")


def mean_dev_loss(model: Model, examples, cfg: TrainConfig) -> float:
    if not examples:
        raise DataError("dev split is empty")
    total = 0.0
    for example in examples:
        total += example_loss(model, example, cfg, train=False).item()
    return total / len(examples)


def _optim_path(out_dir: Path) -> Path:
    return out_dir / "optim.ckpt"


def _epoch_path(out_dir: Path, epoch: int) -> Path:
    return out_dir / f"epoch_{epoch:03d}.ckpt"


def _save_model(path: Path, model: Model) -> None:
    save_params(path, model.state())
    path.with_suffix(".cfg").write_text(cfgmod.to_kv(model.config))


def _save_optim(path: Path, opt: ls.AdamState, step: int) -> None:
    blob = {f"m.{k}": v for k, v in opt.m.items()}
    blob.update({f"v.{k}": v for k, v in opt.v.items()})
    blob["adam_step"] = np.array([float(opt.step)])
    blob["global_step"] = np.array([float(step)])
    save_params(path, blob)


def _load_optim(path: Path, params: dict) -> tuple:
    blob = load_params(path)
    opt = ls.AdamState(
        m={k: blob[f"m.{k}"] for k in params},
        v={k: blob[f"v.{k}"] for k in params},
        step=int(blob["adam_step"][0]),
    )
    return opt, int(blob["global_step"][0])


def train(cfg: TrainConfig, corpus_dir, out_dir) -> tuple:
    """Run (or resume) training; returns (RunManifest, final checkpoint path).

    The output directory keeps one checkpoint per epoch plus optimizer state,
    so a rerun with a larger epoch count continues where the last run ended.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.monotonic()

    checksum = corpus_checksum(corpus_dir)
    train_ex = load_split(corpus_dir, "train")
    dev_ex = load_split(corpus_dir, "dev")
    if not train_ex:
        raise DataError("train split is empty")

    model = Model(cfg.model)
    params = model.parameters()
    manifest_path = out_dir / "run.json"

    if manifest_path.exists():
        manifest = RunManifest.load(manifest_path)
        stored, current = dict(manifest.config), dict(cfg.snapshot())
        # Asking for more epochs is the resume case, so that key may differ.
        stored.pop("epochs", None)
        current.pop("epochs", None)
        if stored != current:
            raise ConfigError("existing run used a different config; "
                              "refusing to resume")
        if manifest.corpus_checksum != checksum:
            raise DataError("existing run used a different corpus; "
                            "refusing to resume")
        if cfg.epochs < manifest.epochs_done:
            raise ConfigError(
                f"run already has {manifest.epochs_done} epochs; "
                f"cannot rewind to {cfg.epochs}")
        manifest.config = cfg.snapshot()
        start_epoch = manifest.epochs_done
        if start_epoch > 0:
            model.load_state(load_params(_epoch_path(out_dir, start_epoch - 1)))
            opt, step = _load_optim(_optim_path(out_dir), params)
        else:
            opt, step = ls.AdamState.for_params(params), 0
    else:
        manifest = RunManifest(config=cfg.snapshot(), seed=cfg.model.seed,
                               corpus_checksum=checksum)
        manifest.dev_loss_init = mean_dev_loss(model, dev_ex, cfg)
        start_epoch, opt, step = 0, ls.AdamState.for_params(params), 0

    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.model.seed, 1000 + epoch])
        order = rng.permutation(len(train_ex)) if cfg.shuffle \
            else np.arange(len(train_ex))
        acc = {name: np.zeros_like(p.data) for name, p in params.items()}
        pending = 0
        loss_sum = 0.0

        def flush():
            nonlocal step, pending
            if pending == 0:
                return
            step += 1
            lr = ls.warmup_lr(step, cfg.base_lr, cfg.warmup)
            grads = {name: g / pending for name, g in acc.items()}
            ls.adam_step(params, grads, opt, lr)
            for g in acc.values():
                g[:] = 0.0
            pending = 0

        for ix in order:
            example = train_ex[ix]
            with Tape():
                loss = example_loss(model, example, cfg, train=True, rng=rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss on {example.example_id} "
                        f"(epoch {epoch}); last-good checkpoint kept")
                backward(loss)
            loss_sum += value
            for name, p in params.items():
                if p.grad is not None:
                    acc[name] += p.grad
            model.zero_grad()
            pending += 1
            if pending == cfg.accumulate:
                flush()
        flush()

        manifest.train_losses.append(loss_sum / len(train_ex))
        manifest.dev_losses.append(mean_dev_loss(model, dev_ex, cfg))
        manifest.epochs_done = epoch + 1
        _save_model(_epoch_path(out_dir, epoch), model)
        _save_optim(_optim_path(out_dir), opt, step)
        manifest.wall_clock += time.monotonic() - t_start
        t_start = time.monotonic()
        manifest.save(manifest_path)

    k = min(cfg.best_k, len(manifest.dev_losses))
    ranked = sorted(range(len(manifest.dev_losses)),
                    key=lambda e: (manifest.dev_losses[e], e))
    manifest.best_epochs = sorted(ranked[:k])
    fused = average_checkpoints([_epoch_path(out_dir, e)
                                 for e in manifest.best_epochs])
    final_path = out_dir / "final.ckpt"
    save_params(final_path, fused)
    final_path.with_suffix(".cfg").write_text(cfgmod.to_kv(cfg.model))
    manifest.save(manifest_path)
    return manifest, final_path


def load_model(ckpt_path) -> Model:
    """Rebuild a Model from a checkpoint plus its .cfg sidecar."""
    ckpt_path = Path(ckpt_path)
    sidecar = ckpt_path.with_suffix(".cfg")
    if not sidecar.exists():
        sidecar = ckpt_path.parent / "model.cfg"
    if not sidecar.exists():
        raise ConfigError(f"no config sidecar next to {ckpt_path}")
    model_cfg = cfgmod.bind(ModelConfig, cfgmod.load_kv(sidecar))
    model = Model(model_cfg)
    model.load_state(load_params(ckpt_path))
    return model
