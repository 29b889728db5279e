"""Run configuration: one JSON document covering codecs, encoder, training, forging and paths."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .latent_encoder import EncoderConfig
from .position_codec import FourierConfig, PositionConfig
from .spectral_codec import DEFAULT_N_SAMPLES, GaussianBank, build_default_bank
from .tokenizer import Codecs
from .train_eval import TrainConfig

PATH_ENV = {
    "base_dir": "ATOMIZER_BASE_DIR",
    "dataset_dir": "ATOMIZER_DATASET_DIR",
    "manifest": "ATOMIZER_MANIFEST",
    "out_dir": "ATOMIZER_OUT_DIR",
}
SECTIONS = ("seed", "codec", "encoder", "train", "forge", "paths")


@dataclass(frozen=True)
class ModalityEntry:
    """A modality to forge; ``bands`` holds catalog indices or band names."""

    name: str
    gsd: float
    height: int
    width: int
    bands: tuple[int | str, ...]

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityEntry":
        try:
            return cls(str(d["name"]), float(d["gsd"]), int(d["height"]), int(d["width"]), tuple(d["bands"]))
        except KeyError as e:
            raise ConfigurationError(f"modality entry is missing field {e.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {"name": self.name, "gsd": self.gsd, "height": self.height, "width": self.width, "bands": list(self.bands)}


@dataclass(frozen=True)
class ForgeConfig:
    train_modalities: tuple[ModalityEntry, ...] = ()
    test_modalities: tuple[ModalityEntry, ...] = ()
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    num_classes: int = 4  # synthetic scenes only

    def to_dict(self) -> dict:
        return {
            "train_modalities": [m.to_dict() for m in self.train_modalities],
            "test_modalities": [m.to_dict() for m in self.test_modalities],
            "val_fraction": self.val_fraction,
            "test_fraction": self.test_fraction,
            "num_classes": self.num_classes,
        }


@dataclass
class RunConfig:
    seed: int = 0
    codecs: Codecs = field(default_factory=Codecs)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    paths: dict[str, str | None] = field(default_factory=dict)

    def codec_dict(self) -> dict:
        c = self.codecs
        return {
            "num_frequencies": c.reflectance.num_frequencies,
            "max_frequency": c.reflectance.max_frequency,
            "reference_gsd": c.position.reference_gsd,
            "n_samples": c.n_samples,
            "bank": c.bank.to_dict(),
            "zeroed": list(c.zeroed),
        }

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "codec": self.codec_dict(),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "forge": self.forge.to_dict(),
            "paths": dict(self.paths),
        }

    @property
    def config_hash(self) -> str:
        """Hash of the sections that fix the meaning of a checkpoint (codec + encoder)."""
        blob = json.dumps({"codec": self.codec_dict(), "encoder": self.encoder.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def path(self, key: str) -> str | None:
        return self.paths.get(key)


def _build(cls, section: dict | None, where: str):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigurationError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigurationError(f"{where}: {e}") from None


def _auto_max_frequency(forge: ForgeConfig) -> float:
    sizes = [max(m.height, m.width) for m in forge.train_modalities]
    return max(1.0, max(sizes) / 2) if sizes else 16.0


def from_dict(raw: dict[str, Any], env: dict[str, str] | None = None) -> RunConfig:
    """Validate a whole run config. Environment variables may override ``paths`` only."""
    if not isinstance(raw, dict):
        raise ConfigurationError("run config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown top-level section(s) {sorted(unknown)}")
    raw = copy.deepcopy(raw)

    f = raw.get("forge") or {}
    forge = ForgeConfig(
        train_modalities=tuple(ModalityEntry.from_dict(m) for m in f.get("train_modalities", [])),
        test_modalities=tuple(ModalityEntry.from_dict(m) for m in f.get("test_modalities", [])),
        val_fraction=float(f.get("val_fraction", 0.1)),
        test_fraction=float(f.get("test_fraction", 0.2)),
        num_classes=int(f.get("num_classes", 4)),
    )

    c = dict(raw.get("codec") or {})
    unknown = set(c) - {"num_frequencies", "max_frequency", "reference_gsd", "n_samples", "bank", "zeroed"}
    if unknown:
        raise ConfigurationError(f"codec: unknown field(s) {sorted(unknown)}")
    f_max = c.get("max_frequency")
    fourier = FourierConfig(int(c.get("num_frequencies", 16)), float(f_max) if f_max is not None else _auto_max_frequency(forge))
    bank = GaussianBank.from_dict(c["bank"]) if c.get("bank") else build_default_bank()
    codecs = Codecs(
        position=PositionConfig(fourier, float(c.get("reference_gsd", 10.0))),
        reflectance=fourier,
        bank=bank,
        n_samples=int(c.get("n_samples", DEFAULT_N_SAMPLES)),
        zeroed=tuple(c.get("zeroed", ())),
    )

    encoder = _build(EncoderConfig, raw.get("encoder"), "encoder")
    train = _build(TrainConfig, raw.get("train"), "train")

    paths = {k: None for k in PATH_ENV}
    raw_paths = raw.get("paths") or {}
    unknown = set(raw_paths) - set(PATH_ENV)
    if unknown:
        raise ConfigurationError(f"paths: unknown field(s) {sorted(unknown)}")
    paths.update(raw_paths)
    env = os.environ if env is None else env
    for key, var in PATH_ENV.items():
        if env.get(var):
            paths[key] = env[var]

    seed = raw.get("seed", 0)
    if int(seed) != seed or seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")
    return RunConfig(int(seed), codecs, encoder, train, forge, paths)


def load(path: str | Path | None, env: dict[str, str] | None = None) -> RunConfig:
    if path is None:
        return from_dict({}, env)
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from None
    return from_dict(raw, env)
