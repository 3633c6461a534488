"""Histogram-based parameter-efficient tuning on a from-scratch transformer encoder."""

from .analysis import ParamAudit, SimilarityReport, cka_linear, count_params, similarity_report
from .data import DatasetBundle, Split, SyntheticSpec, gen_synthetic, read_dataset, write_dataset
from .errors import (CompatibilityError, ConfigError, ContractError, DimensionError, FormatError,
                     HistPetlError, LabelRangeError, MergeError, NonFiniteError, SerializationError,
                     TruncationError)
from .histogram import HistogramLayer, hist_forward
from .layers import FfnLayer, LayerNorm, Linear, MhsaLayer, Module, Parameter
from .model import EncoderBlock, EncoderModel, ModelConfig, capture_features, model_forward
from .petl import Adapter, LoraAdapter, PetlConfig, SsfLayer, freeze_base, instantiate_petl
from .tensor import Tensor, backward, grad_check
from .training import RunReport, TrainConfig, evaluate, train

__version__ = "0.1.0"
