"""Command-line front door: simulate, train, eval, dump-attention.

Each command is a batch job that reads flat key=value configs, writes its
outputs under the given directory, and renders a matplotlib figure next to
the delimited files.  Exit codes: 0 success, 2 config error, 3 data or I/O
error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as cfgmod
from . import figures
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .metrics import evaluate_corpus, write_report
from .model import dump_attention, read_matrix
from .simulate import SimSpec, build_corpus, read_feat
from .train import TrainConfig, load_model, train

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    spec = cfgmod.bind(SimSpec, cfgmod.load_kv(args.spec))
    if args.seed is not None:
        spec.seed = args.seed
    built = build_corpus(spec, out)
    for split, ids in built.items():
        print(f"{split}\t{len(ids)}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_mapping(cfgmod.load_kv(args.config))
    manifest, final = train(cfg, args.corpus, args.out)
    figures.loss_curves(manifest, Path(args.out) / "loss_curves.png")
    print(f"final\t{final}")
    print(f"dev_loss\t{manifest.dev_losses[-1]!r}")
    print(f"best_epochs\t{','.join(str(e) for e in manifest.best_epochs)}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    report = evaluate_corpus(model, args.corpus, args.split)
    tsv, summary = write_report(report, args.out)
    figures.wer_bars(report, Path(args.out) / "wer.png")
    sys.stdout.write(Path(summary).read_text())
    return 0


def cmd_dump_attention(args) -> int:
    model = load_model(args.model)
    feat_path = Path(args.example)
    if not feat_path.exists():
        raise DataError(f"no feature file at {feat_path}; pass the .feat path")
    feats = read_feat(feat_path)
    written = dump_attention(model, feats, args.out)
    matrices = {p.stem: read_matrix(p) for p in written}
    figures.attention_grid(matrices, Path(args.out) / "attention.png")
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosstalk",
        description="Two-talker speech recognition sandbox: corpus "
                    "simulation, training, scoring, attention export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="key=value corpus spec file")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the spec's seed")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--config", required=True, help="key=value train config")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--split", required=True, help="split name")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dump-attention",
                       help="export cross-block attention matrices")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--example", required=True, help="path to a .feat file")
    p.add_argument("--out", required=True, help="matrix output directory")
    p.set_defaults(fn=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DataError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
