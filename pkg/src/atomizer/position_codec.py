"""Fourier features for reflectance values and resolution-aware pixel positions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PreconditionError


@dataclass(frozen=True)
class FourierConfig:
    num_frequencies: int = 16
    max_frequency: float = 16.0

    def __post_init__(self):
        if int(self.num_frequencies) != self.num_frequencies or self.num_frequencies < 1:
            raise ConfigurationError(f"num_frequencies must be a positive integer, got {self.num_frequencies}")
        if not np.isfinite(self.max_frequency) or self.max_frequency < 1:
            raise ConfigurationError(f"max_frequency must be >= 1, got {self.max_frequency}")

    @property
    def dim(self) -> int:
        return 2 * self.num_frequencies

    def frequencies(self) -> np.ndarray:
        """Frequencies linearly spaced on [1, max_frequency]; a single one is 1."""
        if self.num_frequencies == 1:
            return np.ones(1)
        return np.linspace(1.0, self.max_frequency, self.num_frequencies)


@dataclass(frozen=True)
class PositionConfig:
    fourier: FourierConfig = field(default_factory=FourierConfig)
    reference_gsd: float = 10.0

    def __post_init__(self):
        if not np.isfinite(self.reference_gsd) or self.reference_gsd <= 0:
            raise ConfigurationError(f"reference_gsd must be > 0, got {self.reference_gsd}")

    @property
    def dim(self) -> int:
        return 2 * (self.fourier.dim + 1)


def fourier_features(x, cfg: FourierConfig) -> np.ndarray:
    """Interleaved ``[sin(pi f_1 x), cos(pi f_1 x), ..., sin(pi f_L x), cos(pi f_L x)]``.

    ``x`` may be a scalar or an array; the feature axis is appended last.
    No range check: resolution-scaled coordinates legitimately leave [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    angles = np.pi * x[..., None] * cfg.frequencies()
    out = np.empty(x.shape + (cfg.dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def encode_reflectance(value, cfg: FourierConfig) -> np.ndarray:
    """Reflectance encoding. Values are expected in [0, 1]; the tokenizer clamps."""
    return fourier_features(value, cfg)


def normalize_coords(x, y, w: int, h: int):
    """Map integer pixel indices to [-1, 1) relative to the image center.

    Uses ``center = (n - 1) / 2`` and half-extent ``n / 2``. A 1-pixel axis maps to 0.
    """
    if w < 1 or h < 1:
        raise PreconditionError(f"image dims must be >= 1, got w={w}, h={h}")
    x = np.asarray(x)
    y = np.asarray(y)
    if np.any((x < 0) | (x >= w)) or np.any((y < 0) | (y >= h)):
        raise PreconditionError(f"pixel index out of range for a {w}x{h} image")
    x_d = (x - (w - 1) / 2) / (w / 2) if w > 1 else np.zeros(x.shape)
    y_d = (y - (h - 1) / 2) / (h / 2) if h > 1 else np.zeros(y.shape)
    if x_d.ndim == 0:
        return float(x_d), float(y_d)
    return x_d, y_d


def encode_position(x_d, y_d, gsd: float, cfg: PositionConfig) -> np.ndarray:
    """Resolution-modulated positional encoding, ``2 * (2L + 1)`` wide.

    Per coordinate: Fourier features of ``coord * gsd / reference_gsd`` followed by
    the unscaled normalized coordinate; x block first, then y.
    """
    if not gsd > 0:
        raise PreconditionError(f"gsd must be > 0, got {gsd}")
    ratio = gsd / cfg.reference_gsd
    blocks = []
    for coord in (x_d, y_d):
        coord = np.asarray(coord, dtype=np.float64)
        blocks.append(fourier_features(coord * ratio, cfg.fourier))
        blocks.append(coord[..., None])
    return np.concatenate(blocks, axis=-1)
