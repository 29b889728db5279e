"""On-disk formats: rasters, manifests, token dumps and checkpoints.

Rasters and checkpoints share one container layout::

    4-byte magic | uint32 LE header length | UTF-8 JSON header | payload

The header records ``payload_sha256`` so truncated or edited files are
rejected on load. Payloads are little-endian float32.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError, StructuralError
from .latent_encoder import EncoderConfig, ParameterStore
from .modality_forge import SplitManifest
from .tokenizer import ModalityConfig, Sample, TokenSet

RASTER_MAGIC = b"ATMR"
CHECKPOINT_MAGIC = b"ATMC"
RASTER_SUFFIX = ".atmr"
_F32 = np.dtype("<f4")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path: str | Path, magic: bytes, header: dict, payload: bytes) -> None:
    header = dict(header, payload_sha256=sha256_hex(payload), payload_bytes=len(payload))
    raw = canonical_json(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(payload)
    tmp.replace(path)


def read_container(path: str | Path, magic: bytes) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise IntegrityError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    payload = blob[8 + n :]
    if len(payload) != header.get("payload_bytes") or sha256_hex(payload) != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload hash mismatch")
    return header, payload


# rasters


def write_raster(path: str | Path, sample: Sample, extra: dict | None = None) -> None:
    """One sample per file; the cube is stored band-planar (B, H, W).

    ``extra`` adds header fields (e.g. the producing run's config hash).
    """
    m = sample.modality
    header = {
        "format": "atomizer-raster/1",
        "id": sample.id,
        "height": m.height,
        "width": m.width,
        "gsd": m.gsd,
        "modality": m.name,
        "bands": [b.to_dict() for b in m.bands],
        "dtype": "float32le",
        "layout": "planar",
        "target": [int(t) for t in np.asarray(sample.target).ravel()],
    }
    header.update(extra or {})
    planar = np.ascontiguousarray(np.moveaxis(np.asarray(sample.cube), -1, 0), dtype=_F32)
    write_container(path, RASTER_MAGIC, header, planar.tobytes())


def read_raster(path: str | Path) -> Sample:
    header, payload = read_container(path, RASTER_MAGIC)
    modality = ModalityConfig.from_dict(
        {k: header[k] for k in ("bands", "gsd", "height", "width")} | {"name": header.get("modality", "")}
    )
    B, H, W = modality.num_bands, modality.height, modality.width
    data = np.frombuffer(payload, dtype=_F32)
    if data.size != B * H * W:
        raise StructuralError(f"{path}: payload holds {data.size} values, header implies {B * H * W}")
    cube = np.moveaxis(data.reshape(B, H, W), 0, -1).astype(np.float32)
    return Sample(cube, modality, np.asarray(header.get("target", []), dtype=np.float32), header.get("id", ""))


def list_rasters(directory: str | Path) -> list[Path]:
    return sorted(Path(directory).glob(f"*{RASTER_SUFFIX}"))


# manifests


def write_manifest(path: str | Path, manifest: SplitManifest, config_hash: str | None = None) -> None:
    """JSON-lines; with ``config_hash`` every record carries it as an extra key."""
    if config_hash is None:
        Path(path).write_text(manifest.to_jsonl())
        return
    lines = (
        json.dumps(
            {"sample_id": r.sample_id, "split": r.split, "modality": r.modality, "config_hash": config_hash},
            sort_keys=True,
        )
        for r in manifest
    )
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path: str | Path) -> SplitManifest:
    return SplitManifest.from_jsonl(Path(path).read_text())


# token dumps


def write_tokenset(prefix: str | Path, tokens: TokenSet, config_hash: str, extra: dict | None = None) -> tuple[Path, Path]:
    """``<prefix>.f32`` (row-major N x D little-endian float32) plus ``<prefix>.json``."""
    prefix = Path(prefix)
    bin_path = prefix.with_name(prefix.name + ".f32")
    meta_path = prefix.with_name(prefix.name + ".json")
    payload = np.ascontiguousarray(tokens.tokens, dtype=_F32).tobytes()
    bin_path.write_bytes(payload)
    meta = {
        "N": int(tokens.tokens.shape[0]),
        "D": int(tokens.tokens.shape[1]),
        "dtype": "float32le",
        "provenance_columns": ["x", "y", "band_index"],
        "provenance": tokens.provenance.astype(int).tolist(),
        "config_hash": config_hash,
        "payload_sha256": sha256_hex(payload),
    }
    meta.update(extra or {})
    meta_path.write_text(json.dumps(meta, sort_keys=True))
    return bin_path, meta_path


def read_tokenset(prefix: str | Path) -> tuple[TokenSet, dict]:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_name(prefix.name + ".json").read_text())
    payload = prefix.with_name(prefix.name + ".f32").read_bytes()
    if sha256_hex(payload) != meta["payload_sha256"]:
        raise IntegrityError(f"{prefix}: token payload hash mismatch")
    tokens = np.frombuffer(payload, dtype=_F32).reshape(meta["N"], meta["D"]).copy()
    return TokenSet(tokens, np.asarray(meta["provenance"], dtype=np.int64).reshape(-1, 3)), meta


# checkpoints


def save_checkpoint(path: str | Path, params: ParameterStore, config: dict, config_hash: str) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in params.arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "atomizer-checkpoint/1",
        "config": config,
        "config_hash": config_hash,
        "encoder": params.config.to_dict(),
        "token_dim": params.token_dim,
        "arrays": entries,
    }
    write_container(path, CHECKPOINT_MAGIC, header, b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    arrays = {}
    for e in header["arrays"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=_F32).reshape(e["shape"]).copy()
    params = ParameterStore(EncoderConfig(**header["encoder"]), int(header["token_dim"]), arrays)
    return params, header
