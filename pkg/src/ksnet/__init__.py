"""Kernel seed networks: Bayesian deep learning from compressed weight seeds.

The library trains networks whose layer weights are decoded at forward time
from small latent seed tensors by 1x1 channel-mixing decoders, producing the
mean and spread of a per-weight Gaussian posterior trained by
bayes-by-backprop against a scale-mixture prior. Baseline, MC-dropout, BNN
and fixed-point seeded variants share the same backbones, and a calibration
suite (ACC/NLL/ECE/ACE/MCE) scores the resulting predictive distributions.
"""

__version__ = "0.1.0"

from .bayes import (
    ElboBreakdown, ScaleMixturePrior, elbo_loss, mc_dropout_forward,
    posterior_log_prob, prior_log_prob, train_step,
)
from .errors import (
    CheckpointError, ConfigError, ContractError, DataError, DimensionError,
    FormatError, KsnetError, ModeError, ParameterError,
)
from .layers import ForwardContext, SampleRecord
from .metrics import CalibrationReport, PredictionSet, evaluate, reliability_data
from .models import (
    FactoryMode, ModelConfig, build_model, count_params, load_checkpoint,
    predict_deterministic, predict_ensemble, predict_posterior_mean,
    save_checkpoint,
)
from .rng import StreamHub
from .seeds import (
    Germinator, KernelSeed, LayerMode, SeedSpec, germinate, init_seed,
    make_seed_spec, param_count, sample_weights,
)
from .tensor import Tensor, backward, zero_grads
