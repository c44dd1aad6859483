"""Mixed image-size CNN training on a small NumPy autodiff engine."""
from .analysis import (CorrelationReport, eval_preprocess, eval_size_sweep, evaluate,
                       grad_correlation_experiment, spearman)
from .calib import BNStats, CalibrationRequiredError, calibrate, reset_bn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import AugmentConfig, Dataset, augment, load_cifar10, make_batch, synth_dataset
from .estimator import EvalPreprocessor, MixSizeClassifier
from .model import ResNetConfig, build_resnet, model_flops
from .optim import SGD, SGDConfig, SmoothedGradState, global_grad_norm, lr_schedule, update_smoothing
from .sched import (MixSizeDistribution, SampledStep, derive_step, make_schedule, mean_stats, preset,
                    sample_step, scaled_learning_rate, validate)
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"
