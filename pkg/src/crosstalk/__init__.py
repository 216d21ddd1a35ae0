"""Desk-scale two-talker speech recognition with cross-speaker encoding.

A small, dependency-light laboratory for multi-talker CTC/attention
recognizers: a float64 reverse-mode tape, conformer blocks, branch encoders
joined by a cross-encoder over concatenated partitions, training objectives
that assign branch outputs to speakers (permutation search, speaking-order
heuristic, or a joint stream with speaker-change tokens), a synthetic
mixture simulator, and permutation-invariant, overlap-aware scoring.
"""

from .autodiff import Tape, Tensor, backward, grad_check
from .checkpoint import average_checkpoints, load_params, save_params
from .errors import (CheckpointError, ConfigError, ContractError,
                     CrosstalkError, CtcInfeasibleError, DataError,
                     GenerationError, NumericError, ShapeError)
from .losses import (AdamState, adam_step, attention_ce_loss,
                     build_joint_heat_target, ctc_loss, heat_loss,
                     joint_heat_loss, joint_objective, pit_loss,
                     serialize_sot, warmup_lr)
from .metrics import (EvalReport, attention_greedy_decode, ctc_greedy_decode,
                      evaluate_corpus, levenshtein, pi_wer, split_sot, wer,
                      write_report)
from .model import (Model, ModelConfig, count_parameters, dump_attention,
                    read_matrix, write_matrix)
from .simulate import (MixtureExample, SimSpec, ToyUtterance, bucket_of,
                       build_corpus, load_split, mix, overlap_ratio,
                       render_utterance, speed_perturb)
from .train import RunManifest, TrainConfig, load_model, train

__version__ = "0.1.0"
