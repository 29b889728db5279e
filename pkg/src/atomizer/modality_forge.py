"""Build heterogeneous modalities from base rasters and assign modality-disjoint splits."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, PreconditionError, ProtocolViolation, StructuralError, UnsupportedFactorError
from .spectral_codec import BandSpec
from .tokenizer import ModalityConfig, Sample

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# Sentinel-2 MSI (B10 cirrus omitted): name, central wavelength nm, bandwidth nm
SENTINEL2 = (
    ("B01", 443.0, 21.0),
    ("B02", 490.0, 66.0),
    ("B03", 560.0, 36.0),
    ("B04", 665.0, 31.0),
    ("B05", 705.0, 15.0),
    ("B06", 740.0, 15.0),
    ("B07", 783.0, 20.0),
    ("B08", 842.0, 106.0),
    ("B8A", 865.0, 21.0),
    ("B09", 945.0, 20.0),
    ("B11", 1610.0, 91.0),
    ("B12", 2190.0, 175.0),
)


def sentinel2_bands() -> tuple[BandSpec, ...]:
    return tuple(BandSpec(c, w, n) for n, c, w in SENTINEL2)


def band_index(name: str, catalog: Sequence[BandSpec] | None = None) -> int:
    catalog = catalog or sentinel2_bands()
    for i, b in enumerate(catalog):
        if b.name == name:
            return i
    raise KeyError(f"band {name!r} not in catalog")


def resample_factor(base_gsd: float, target_gsd: float) -> int:
    ratio = target_gsd / base_gsd
    s = int(round(ratio))
    if s < 1 or abs(ratio - s) > 1e-9 * max(1.0, ratio):
        raise UnsupportedFactorError(
            f"target gsd {target_gsd} / base gsd {base_gsd} = {ratio:g} is not an integer >= 1"
        )
    return s


def resample_to_gsd(raster: np.ndarray, base_gsd: float, target_gsd: float) -> np.ndarray:
    """Non-overlapping s x s block mean per band, ``s = target_gsd / base_gsd``."""
    s = resample_factor(base_gsd, target_gsd)
    raster = np.asarray(raster)
    if s == 1:
        return raster
    H, W, B = raster.shape
    if H % s or W % s:
        raise PreconditionError(f"raster {H}x{W} is not divisible by the resampling factor {s}")
    return raster.reshape(H // s, s, W // s, s, B).mean(axis=(1, 3))


@dataclass(frozen=True)
class ForgeSpec:
    modality: ModalityConfig
    source_band_indices: tuple[int, ...]
    crop_origin: tuple[int, int] | None = None  # (row, col) in base pixels; None centers the crop

    def __post_init__(self):
        object.__setattr__(self, "source_band_indices", tuple(int(i) for i in self.source_band_indices))
        if len(self.source_band_indices) != self.modality.num_bands:
            raise ConfigurationError(
                f"modality {self.modality.name!r} has {self.modality.num_bands} bands but "
                f"{len(self.source_band_indices)} source indices"
            )

    @classmethod
    def from_catalog(
        cls,
        catalog: Sequence[BandSpec],
        name: str,
        gsd: float,
        height: int,
        width: int,
        band_indices: Sequence[int],
        crop_origin: tuple[int, int] | None = None,
    ) -> "ForgeSpec":
        for i in band_indices:
            if not 0 <= i < len(catalog):
                raise PreconditionError(f"band index {i} out of range for a {len(catalog)}-band catalog")
        bands = tuple(catalog[i] for i in band_indices)
        return cls(ModalityConfig(bands, gsd, height, width, name), tuple(band_indices), crop_origin)

    def base_extent(self, base_gsd: float) -> tuple[int, int]:
        """(rows, cols) of the base-resolution crop this spec consumes."""
        s = resample_factor(base_gsd, self.modality.gsd)
        return self.modality.height * s, self.modality.width * s

    def to_dict(self) -> dict:
        return {
            "name": self.modality.name,
            "gsd": self.modality.gsd,
            "height": self.modality.height,
            "width": self.modality.width,
            "bands": list(self.source_band_indices),
            "crop_origin": list(self.crop_origin) if self.crop_origin is not None else None,
        }


def forge_sample(base: Sample, spec: ForgeSpec) -> Sample:
    """Crop, then block-resample, then select bands (in ``spec`` order)."""
    bm = base.modality
    H, W, B = base.cube.shape
    rows, cols = spec.base_extent(bm.gsd)
    if spec.crop_origin is None:
        r0, c0 = (H - rows) // 2, (W - cols) // 2
    else:
        r0, c0 = spec.crop_origin
    if r0 < 0 or c0 < 0 or r0 + rows > H or c0 + cols > W:
        raise PreconditionError(
            f"crop of {rows}x{cols} at ({r0}, {c0}) overflows the {H}x{W} base raster of {base.id!r}"
        )
    for i in spec.source_band_indices:
        if not 0 <= i < B:
            raise PreconditionError(f"band index {i} out of range for {B}-band base raster {base.id!r}")
    catalog = tuple(bm.bands[i] for i in spec.source_band_indices)
    if catalog != spec.modality.bands:
        raise StructuralError(f"modality {spec.modality.name!r} band metadata disagrees with the base catalog")

    crop = base.cube[r0 : r0 + rows, c0 : c0 + cols]
    cube = resample_to_gsd(crop, bm.gsd, spec.modality.gsd)[:, :, list(spec.source_band_indices)]
    return Sample(np.ascontiguousarray(cube), spec.modality, base.target.copy(), base.id)


# split protocol


@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    split: str
    modality: str


@dataclass
class SplitManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def modality_names(self, *splits: str) -> set[str]:
        return {r.modality for r in self.records if r.split in splits}

    def ids(self, split: str, modality: str | None = None) -> list[str]:
        return [r.sample_id for r in self.records if r.split == split and (modality is None or r.modality == modality)]

    def modality_of(self) -> dict[str, str]:
        return {r.sample_id: r.modality for r in self.records}

    def counts(self) -> dict[tuple[str, str], int]:
        return dict(sorted(Counter((r.split, r.modality) for r in self.records).items()))

    def validate(self) -> None:
        """Raise ProtocolViolation unless train/test modalities are disjoint and ids unique."""
        for r in self.records:
            if r.split not in SPLITS:
                raise ProtocolViolation(f"unknown split {r.split!r} for sample {r.sample_id!r}")
        seen = Counter(r.sample_id for r in self.records)
        dupes = sorted(k for k, n in seen.items() if n > 1)
        if dupes:
            raise ProtocolViolation(f"samples appear more than once: {dupes[:5]}")
        overlap = self.modality_names("train", "val") & self.modality_names("test")
        if overlap:
            raise ProtocolViolation(f"modalities used for both training and testing: {sorted(overlap)}")

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"sample_id": r.sample_id, "split": r.split, "modality": r.modality}, sort_keys=True) + "\n"
            for r in self.records
        )

    @classmethod
    def from_jsonl(cls, text: str) -> "SplitManifest":
        records = []
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                records.append(ManifestRecord(str(d["sample_id"]), str(d["split"]), str(d["modality"])))
        return cls(records)


def split_ids(ids: Sequence[str], val_fraction: float, test_fraction: float, seed: int) -> dict[str, list[str]]:
    """Seeded partition of ``ids`` into train / val / test."""
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ConfigurationError("split fractions must be >= 0 and leave room for training data")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    n_val = int(round(val_fraction * len(ids)))
    shuffled = [ids[i] for i in order]
    return {
        "test": sorted(shuffled[:n_test]),
        "val": sorted(shuffled[n_test : n_test + n_val]),
        "train": sorted(shuffled[n_test + n_val :]),
    }


def assign_modalities(
    sample_ids: Mapping[str, Sequence[str]] | Sequence[str],
    train_modalities: Sequence[str],
    test_modalities: Sequence[str],
    seed: int,
) -> SplitManifest:
    """Give every sample exactly one modality, uniformly at random.

    ``sample_ids`` maps split name to ids; a plain sequence is treated as all
    training data. Train and val samples draw from ``train_modalities``,
    test samples from ``test_modalities``.
    """
    if not isinstance(sample_ids, Mapping):
        sample_ids = {"train": list(sample_ids)}
    overlap = set(train_modalities) & set(test_modalities)
    if overlap:
        raise ProtocolViolation(f"train and test modality names overlap: {sorted(overlap)}")
    unknown = set(sample_ids) - set(SPLITS)
    if unknown:
        raise ConfigurationError(f"unknown splits {sorted(unknown)}")

    rng = np.random.default_rng(seed)
    records = []
    for split in SPLITS:
        ids = list(sample_ids.get(split, ()))
        if not ids:
            continue
        pool = list(train_modalities if split in ("train", "val") else test_modalities)
        if not pool:
            raise ConfigurationError(f"no modalities available for the {split} split")
        picks = rng.integers(len(pool), size=len(ids))
        records.extend(ManifestRecord(sid, split, pool[k]) for sid, k in zip(ids, picks))
    manifest = SplitManifest(records)
    manifest.validate()
    return manifest


# synthetic scenes


def class_spectra(num_classes: int, catalog: Sequence[BandSpec]) -> np.ndarray:
    """(num_classes, num_bands) reflectance profiles.

    The catalog's bands, sorted by wavelength, are cut into ``num_classes``
    contiguous groups; class ``c`` is bright on group ``c`` and dark elsewhere.
    A modality observes every class as long as it keeps a band from each group.
    """
    if num_classes > len(catalog):
        raise ConfigurationError(f"{num_classes} classes need at least as many catalog bands")
    order = np.argsort([b.center_wavelength for b in catalog], kind="stable")
    spectra = np.full((num_classes, len(catalog)), 0.1)
    for c, group in enumerate(np.array_split(order, num_classes)):
        spectra[c, group] = 0.7
    return spectra


BACKGROUND_REFLECTANCE = 0.12


def synth_scene(
    rng: np.random.Generator,
    num_classes: int,
    size: int,
    core: int,
    catalog: Sequence[BandSpec],
    presence: float = 0.5,
    radius: tuple[float, float] = (6.0, 10.0),
    noise: float = 0.02,
) -> tuple[np.ndarray, np.ndarray]:
    """One base scene: (cube (size, size, B), target (C,)).

    Class ``c`` is present iff a disk with spectrum ``c`` is painted inside the
    central ``core`` x ``core`` window, so every centered crop at least
    ``core`` pixels wide sees every labelled object. The window is split into a
    grid with one cell per class and each present class gets its own randomly
    chosen cell, so disks never occlude one another.
    """
    spectra = class_spectra(num_classes, catalog)
    B = len(catalog)
    target = (rng.random(num_classes) < presence).astype(np.float32)
    brightness = rng.uniform(0.85, 1.15)
    cube = np.full((size, size, B), BACKGROUND_REFLECTANCE * brightness)
    cube += noise * rng.standard_normal((size, size, B))

    k = math.ceil(math.sqrt(num_classes))
    cell = core / k
    lo = (size - core) / 2
    cells = rng.permutation(k * k)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for c in np.flatnonzero(target):
        r = min(rng.uniform(*radius), cell / 2)
        gy, gx = divmod(int(cells[c]), k)
        cy = lo + gy * cell + rng.uniform(r, cell - r)
        cx = lo + gx * cell + rng.uniform(r, cell - r)
        cover = np.clip(r - np.hypot(yy - cy, xx - cx) + 0.5, 0.0, 1.0)[..., None]
        cube = cover * (spectra[c] * brightness) + (1 - cover) * cube
    return np.clip(cube, 0.0, 1.0).astype(np.float32), target


def synth_scenes(
    num_samples: int,
    num_classes: int,
    seed: int,
    size: int = 128,
    core: int | None = None,
    gsd: float = 10.0,
    catalog: Sequence[BandSpec] | None = None,
    presence: float = 0.5,
) -> list[Sample]:
    """High-resolution base scenes (default: 128 x 128 Sentinel-2-like at 10 m)."""
    if num_classes < 2:
        raise ConfigurationError("synthetic data needs at least 2 classes")
    catalog = tuple(catalog or sentinel2_bands())
    core = size if core is None else core
    modality = ModalityConfig(catalog, gsd, size, size, "base")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(num_samples):
        cube, target = synth_scene(rng, num_classes, size, core, catalog, presence)
        out.append(Sample(cube, modality, target, f"scene{i:06d}"))
    return out


def visible_core(specs: Iterable[ForgeSpec], base_gsd: float) -> int:
    """Side of the central window that every spec's centered crop covers."""
    return min(min(spec.base_extent(base_gsd)) for spec in specs)


def synth_dataset(
    num_samples: int,
    classes: int,
    modalities: Sequence[ForgeSpec],
    seed: int,
    size: int = 128,
    presence: float = 0.5,
) -> list[Sample]:
    """Render each synthetic scene under every modality.

    Returns ``num_samples * len(modalities)`` samples, scene-major; the sample
    id is the scene id, so the modality name tells renders apart. Labels are
    drawn before rendering and therefore identical across modalities.
    """
    modalities = list(modalities)
    if not modalities:
        raise ConfigurationError("at least one modality is required")
    for spec in modalities:
        if spec.crop_origin is not None:
            raise ConfigurationError("synthetic rendering uses centered crops")
    core = min(visible_core(modalities, 10.0), size)
    scenes = synth_scenes(num_samples, classes, seed, size=size, core=core, presence=presence)
    return [forge_sample(scene, spec) for scene in scenes for spec in modalities]
