"""Few-shot density estimation with autoregressive image models.

Three conditioning routes over one masked-conv trunk: a global support
encoder, an additive-attention patch memory, and a learned-inner-loss
gradient adaptation step, all on a second-order-capable autodiff core.
"""

from .config import (
    ModelConfig,
    flip_config,
    flip_desk_config,
    omniglot_config,
    tiny_config,
)
from .data import ConceptDataset, Episode, flip_episode, ingest, preprocess, sample_episode
from .layers import OptState, bernoulli_nll, categorical_nll, make_raster_mask, rmsprop_step
from .meta import MetaConfig, adapt, inner_loss, meta_train_step
from .model import (
    SampleResult,
    encode_support,
    forward,
    init_params,
    nll,
    sample,
)
from .tensor import Tensor, backward, grad, no_grad

__all__ = [
    "ConceptDataset",
    "Episode",
    "MetaConfig",
    "ModelConfig",
    "OptState",
    "SampleResult",
    "Tensor",
    "adapt",
    "backward",
    "bernoulli_nll",
    "categorical_nll",
    "encode_support",
    "flip_config",
    "flip_desk_config",
    "flip_episode",
    "forward",
    "grad",
    "ingest",
    "init_params",
    "inner_loss",
    "make_raster_mask",
    "meta_train_step",
    "nll",
    "no_grad",
    "omniglot_config",
    "preprocess",
    "rmsprop_step",
    "sample",
    "sample_episode",
    "tiny_config",
]
