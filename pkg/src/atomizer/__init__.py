"""Modality-agnostic encoding of multispectral rasters as sets of (pixel, band) tokens."""
from .errors import (
    AtomizerError,
    ConfigurationError,
    DegenerateEncodingError,
    IntegrityError,
    InvalidBandError,
    NumericFailure,
    PreconditionError,
    ProtocolViolation,
    StructuralError,
    UndefinedMetricError,
    UnsupportedFactorError,
)
from .latent_encoder import EncoderConfig, ParameterStore, grad_check, init_parameters, predict_logits
from .modality_forge import ForgeSpec, SplitManifest, assign_modalities, forge_sample, synth_dataset
from .position_codec import FourierConfig, PositionConfig, encode_position, fourier_features
from .spectral_codec import BandSpec, GaussianBank, build_default_bank, encode_band
from .tokenizer import Codecs, ModalityConfig, Sample, TokenSet, prune_tokens, tokenize
from .train_eval import EvalReport, TrainConfig, average_precision, evaluate, lr_at, train

__version__ = "0.1.0"
