"""Source-free domain adaptation with cross-inferential networks.

A compact classifier adapts to an unlabeled target domain while an
examiner network, trained on triplets labeled by the classifier's own
confident pseudo labels, cross-checks it through correlation-matrix
and attention consistency. Everything runs on a small numpy autodiff
engine; no deep-learning framework is required.
"""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError, no_grad, grad_check
from .losses import LossWeights, im_loss, examiner_bce_loss, cmc_loss, ac_loss, total_loss
from .nets import BaseNetwork, ExaminerNetwork, EcaBlock, save_checkpoint, load_checkpoint
from .data import DomainDataset, ShiftConfig, generate_domain_pair, save_dataset, load_dataset
from .pipeline import (
    AdaptationConfig,
    RunReport,
    pretrain_source,
    adapt_shot,
    adapt_cin,
    run_adaptation,
    evaluate,
    ablation_run,
)

__all__ = [
    "__version__",
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_check",
    "LossWeights",
    "im_loss",
    "examiner_bce_loss",
    "cmc_loss",
    "ac_loss",
    "total_loss",
    "BaseNetwork",
    "ExaminerNetwork",
    "EcaBlock",
    "save_checkpoint",
    "load_checkpoint",
    "DomainDataset",
    "ShiftConfig",
    "generate_domain_pair",
    "save_dataset",
    "load_dataset",
    "AdaptationConfig",
    "RunReport",
    "pretrain_source",
    "adapt_shot",
    "adapt_cin",
    "run_adaptation",
    "evaluate",
    "ablation_run",
]
