"""Bidirectional linear recurrent networks on numpy.

The pieces, bottom up: :mod:`blur.scan` (diagonal linear recurrences),
:mod:`blur.lru` (one recurrent layer), :mod:`blur.network` (stacked
bidirectional blocks), :mod:`blur.autograd` and :mod:`blur.training`
(gradients, optimizer, loop), :mod:`blur.data` (series ingestion and synthetic
tasks), :mod:`blur.verification` (numerical probes) and :mod:`blur.cli`.
"""
from .errors import (
    BlurError, CheckpointError, ConfigError, ContractError, DimensionError, IngestionError, NumericError,
)
from .scan import Direction, HiddenSequence, ScanElement, combine, par_scan, reverse_scan, seq_scan
from .lru import LruParams, RingInit, init_lru, lru_apply
from .network import BlurModelParams, ModelConfig, block_forward, init_model, merge, model_forward
from .training import TrainConfig, evaluate, train
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
