"""Mixed-supervision binary segmentation.

Trains one segmentation model from three kinds of annotation at once:
full pixel masks, bounding boxes (via axis-projection consistency) and
scribbles (via a minimum-entropy commitment on unmarked pixels plus a
fused-prediction regularizer).  Built on a small numpy autodiff core.
"""

from .tensor import Tensor, no_grad
from .losses import (
    loss_bce,
    loss_dice,
    loss_sp,
    loss_bme,
    loss_scribble,
    loss_lr,
    linear_fuse,
    loss_total,
    LossBreakdown,
    FusionSpec,
)
from .data import Sample, SynthConfig, gen_sample, gen_corpus, write_corpus, read_corpus
from .network import EncoderConfig, init_params, forward, forward_batch
from .training import TrainConfig, train, evaluate, ablate, weighted_average
from .estimator import MixedSupervisionSegmenter

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "loss_bce",
    "loss_dice",
    "loss_sp",
    "loss_bme",
    "loss_scribble",
    "loss_lr",
    "linear_fuse",
    "loss_total",
    "LossBreakdown",
    "FusionSpec",
    "Sample",
    "SynthConfig",
    "gen_sample",
    "gen_corpus",
    "write_corpus",
    "read_corpus",
    "EncoderConfig",
    "init_params",
    "forward",
    "forward_batch",
    "TrainConfig",
    "train",
    "evaluate",
    "ablate",
    "weighted_average",
    "MixedSupervisionSegmenter",
    "__version__",
]
