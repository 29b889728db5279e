"""One token per (pixel, band) scalar, plus seeded token pruning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, PreconditionError, StructuralError
from .position_codec import FourierConfig, PositionConfig, encode_position, encode_reflectance, normalize_coords
from .spectral_codec import DEFAULT_N_SAMPLES, BandSpec, GaussianBank, build_default_bank, encode_band

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModalityConfig:
    """A sensor configuration: band list, ground sampling distance and pixel extent."""

    bands: tuple[BandSpec, ...]
    gsd: float
    height: int
    width: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(self.bands))
        if len(self.bands) < 1:
            raise ConfigurationError("a modality needs at least one band")
        if not self.gsd > 0:
            raise ConfigurationError(f"gsd must be > 0, got {self.gsd}")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError(f"height and width must be >= 1, got {self.height}x{self.width}")

    @property
    def num_bands(self) -> int:
        return len(self.bands)

    @property
    def num_tokens(self) -> int:
        return self.height * self.width * self.num_bands

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gsd": self.gsd,
            "height": self.height,
            "width": self.width,
            "bands": [b.to_dict() for b in self.bands],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityConfig":
        return cls(
            bands=tuple(BandSpec.from_dict(b) for b in d["bands"]),
            gsd=float(d["gsd"]),
            height=int(d["height"]),
            width=int(d["width"]),
            name=str(d.get("name", "")),
        )


@dataclass(eq=False)
class Sample:
    cube: np.ndarray  # (H, W, B) reflectance
    modality: ModalityConfig
    target: np.ndarray  # (C,) binary
    id: str = ""

    def __post_init__(self):
        self.cube = np.asarray(self.cube)
        self.target = np.asarray(self.target)
        m = self.modality
        if self.cube.shape != (m.height, m.width, m.num_bands):
            raise StructuralError(
                f"sample {self.id!r}: cube shape {self.cube.shape} does not match modality "
                f"{m.name!r} ({m.height}, {m.width}, {m.num_bands})"
            )
        if not np.all(np.isfinite(self.cube)):
            raise StructuralError(f"sample {self.id!r}: cube contains non-finite values")


TOKEN_BLOCKS = ("reflectance", "position", "spectral")


@dataclass(frozen=True)
class Codecs:
    """Everything needed to turn a sample into tokens."""

    position: PositionConfig = field(default_factory=PositionConfig)
    reflectance: FourierConfig = field(default_factory=FourierConfig)
    bank: GaussianBank = field(default_factory=build_default_bank)
    n_samples: int = DEFAULT_N_SAMPLES
    zeroed: tuple[str, ...] = ()  # blocks written as zeros (metadata ablations)

    def __post_init__(self):
        object.__setattr__(self, "zeroed", tuple(self.zeroed))
        unknown = set(self.zeroed) - set(TOKEN_BLOCKS)
        if unknown:
            raise ConfigurationError(f"unknown token block(s) {sorted(unknown)}; expected a subset of {TOKEN_BLOCKS}")

    @property
    def token_dim(self) -> int:
        return self.reflectance.dim + self.position.dim + len(self.bank)

    @property
    def slices(self) -> dict[str, slice]:
        """Column ranges of the reflectance, position and spectral blocks."""
        a = self.reflectance.dim
        b = a + self.position.dim
        return {"reflectance": slice(0, a), "position": slice(a, b), "spectral": slice(b, self.token_dim)}


@dataclass
class TokenSet:
    tokens: np.ndarray  # (N, D)
    provenance: np.ndarray  # (N, 3) int: x, y, band_index

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]

    def __len__(self) -> int:
        return self.tokens.shape[0]


@lru_cache(maxsize=64)
def _position_table(height: int, width: int, gsd: float, cfg: PositionConfig) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    x_d, y_d = normalize_coords(xs.ravel(), ys.ravel(), width, height)
    table = encode_position(x_d, y_d, gsd, cfg)
    table.flags.writeable = False
    return table


@lru_cache(maxsize=256)
def _band_code(band: BandSpec, bank: GaussianBank, n_samples: int) -> np.ndarray:
    code = encode_band(band, bank, n_samples)
    code.flags.writeable = False
    return code


def spectral_table(bands: Sequence[BandSpec], codecs: Codecs) -> np.ndarray:
    return np.stack([_band_code(b, codecs.bank, codecs.n_samples) for b in bands])


def tokenize(sample: Sample, codecs: Codecs | None = None, dtype=np.float32) -> TokenSet:
    """Build ``H*W*B`` tokens ``[reflectance | position | spectral]`` in (row, col, band) order."""
    codecs = codecs or Codecs()
    m = sample.modality
    cube = sample.cube
    if cube.shape != (m.height, m.width, m.num_bands):
        raise StructuralError(f"cube shape {cube.shape} does not match modality {m.name!r}")
    H, W, B = cube.shape
    clamped = np.clip(cube, 0.0, 1.0)
    n_out = int(np.count_nonzero(clamped != cube))
    if n_out:
        log.warning("sample %r: clamped %d reflectance values into [0, 1]", sample.id, n_out)

    pos = _position_table(H, W, float(m.gsd), codecs.position)  # (H*W, P)
    spec = spectral_table(m.bands, codecs)  # (B, k)
    refl = encode_reflectance(clamped.reshape(H * W, B), codecs.reflectance)  # (H*W, B, 2L)

    s = codecs.slices
    out = np.empty((H * W, B, codecs.token_dim), dtype=dtype)
    out[:, :, s["reflectance"]] = refl
    out[:, :, s["position"]] = pos[:, None, :]
    out[:, :, s["spectral"]] = spec[None, :, :]
    for block in codecs.zeroed:
        out[:, :, s[block]] = 0.0

    ys, xs, bs = np.meshgrid(np.arange(H), np.arange(W), np.arange(B), indexing="ij")
    provenance = np.stack([xs.ravel(), ys.ravel(), bs.ravel()], axis=1)
    return TokenSet(out.reshape(H * W * B, codecs.token_dim), provenance)


def num_kept(n: int, p: float) -> int:
    return max(1, int(np.floor(n * (1.0 - p))))


def prune_indices(n: int, p: float, seed: int) -> np.ndarray:
    """Sorted indices of the ``max(1, floor(n (1 - p)))`` tokens that survive pruning."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"prune proportion must be in [0, 1), got {p}")
    if n < 1:
        raise PreconditionError("cannot prune an empty token set")
    keep = num_kept(n, p)
    if keep == n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.permutation(n)[:keep])


def prune_tokens(tokens: TokenSet, p: float, seed: int) -> TokenSet:
    """Randomly drop a proportion ``p`` of tokens; survivors keep their relative order."""
    idx = prune_indices(len(tokens), p, seed)
    return TokenSet(tokens.tokens[idx], tokens.provenance[idx])
