"""``atomizer`` command line: forge, atomize, train, eval, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 split-protocol
violation, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from . import config as config_mod
from . import io
from . import latent_encoder as le
from . import modality_forge as mf
from . import train_eval as te
from .errors import (
    AtomizerError,
    DegenerateEncodingError,
    NumericFailure,
    PreconditionError,
    ProtocolViolation,
    UnsupportedFactorError,
)
from .tokenizer import ModalityConfig, Sample, tokenize

log = logging.getLogger("atomizer")

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.atmc"
METRICS_NAME = "metrics.jsonl"
CONFIG_NAME = "config.json"
MANIFEST_NAME = "manifest.jsonl"
SAMPLES_DIR = "samples"


class UsageError(AtomizerError):
    """Bad command-line usage or a missing required setting."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, default):
    p.add_argument("--config", default=default, help="run config (JSON); defaults are used when omitted")
    p.add_argument("--seed", type=int, default=default, help="override the run seed (and the training seed)")
    p.add_argument("--out", default=default, help="override paths.out_dir")
    p.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atomizer", description="Modality-agnostic token encoder for multispectral rasters.")
    _global_flags(p, argparse.SUPPRESS)
    p.set_defaults(config=None, seed=None, out=None, verbose=False)
    # the same flags are accepted after the subcommand name
    common = _Parser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    add = lambda name, **kw: sub.add_parser(name, parents=[common], **kw)

    f = add("forge", help="forge modality-disjoint samples and a split manifest")
    f.add_argument("--base-dir", help="directory of base rasters (overrides paths.base_dir)")
    f.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic base scenes instead")
    f.add_argument("--scene-size", type=int, default=128, help="side of synthetic base scenes in pixels")

    a = add("atomize", help="dump the token matrix of rasters")
    a.add_argument("inputs", nargs="*", help="raster files or directories (default: paths.dataset_dir)")

    t = add("train", help="train on the manifest's train split, validate on val")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and parameter count")

    e = add("eval", help="evaluate a checkpoint per modality")
    e.add_argument("--checkpoint", help=f"checkpoint file (default: <out>/{CHECKPOINT_NAME})")
    e.add_argument("--split", default="test", choices=mf.SPLITS)
    e.add_argument("--modality", action="append", help="restrict to this modality (repeatable)")
    e.add_argument("--sweep-gsd", type=float, nargs="+", metavar="GSD", help="also evaluate resampled to these GSDs")
    e.add_argument("--sweep-size", type=int, nargs="+", metavar="PX", help="also evaluate centered crops of these sizes")
    e.add_argument("--plot", action="store_true", help="plot sweep tables (needs matplotlib)")
    e.add_argument("--json", dest="json_path", help="report path (default: <out>/eval.json)")

    g = add("gradcheck", help="finite-difference check of the encoder gradients")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--num-samples", type=int, default=200)
    g.add_argument("--inject-sign-flip", metavar="PARAM", help="negate one parameter's gradient (fault injection)")
    return p


# helpers


def _resolve(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.out is not None:
        cfg.paths["out_dir"] = args.out
    return cfg


def _require(cfg: config_mod.RunConfig, key: str) -> Path:
    value = cfg.path(key)
    if not value:
        raise UsageError(
            f"paths.{key} is not set (add it to the config or set {config_mod.PATH_ENV[key]})"
        )
    return Path(value)


def _out_dir(cfg: config_mod.RunConfig) -> Path:
    out = _require(cfg, "out_dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _forge_specs(entries, catalog) -> list[mf.ForgeSpec]:
    specs = []
    for m in entries:
        idx = [mf.band_index(b, catalog) if isinstance(b, str) else int(b) for b in m.bands]
        specs.append(mf.ForgeSpec.from_catalog(catalog, m.name, m.gsd, m.height, m.width, idx))
    return specs


def _load_split(cfg: config_mod.RunConfig, manifest: mf.SplitManifest, split: str, modalities=None) -> list[Sample]:
    data_dir = _require(cfg, "dataset_dir")
    out = []
    for r in manifest:
        if r.split != split or (modalities is not None and r.modality not in modalities):
            continue
        path = data_dir / f"{r.sample_id}{io.RASTER_SUFFIX}"
        if not path.exists():
            raise UsageError(f"manifest lists {r.sample_id!r} but {path} does not exist")
        sample = io.read_raster(path)
        if sample.modality.name != r.modality:
            raise ProtocolViolation(
                f"{path}: raster modality {sample.modality.name!r} differs from manifest {r.modality!r}"
            )
        out.append(sample)
    return out


def _check_classes(samples: Sequence[Sample], num_classes: int):
    for s in samples:
        if s.target.shape != (num_classes,):
            raise UsageError(
                f"sample {s.id!r} has {s.target.size} labels but encoder.num_classes is {num_classes}"
            )


# subcommands


def cmd_forge(cfg: config_mod.RunConfig, args) -> int:
    fc = cfg.forge
    if not fc.train_modalities or not fc.test_modalities:
        raise UsageError("forge.train_modalities and forge.test_modalities must both be non-empty")
    overlap = {m.name for m in fc.train_modalities} & {m.name for m in fc.test_modalities}
    if overlap:
        raise ProtocolViolation(f"modalities listed for both training and testing: {sorted(overlap)}")

    if args.synthetic:
        catalog = mf.sentinel2_bands()
        specs = _forge_specs(fc.train_modalities + fc.test_modalities, catalog)
        core = min(mf.visible_core(specs, 10.0), args.scene_size)
        bases = mf.synth_scenes(args.synthetic, fc.num_classes, cfg.seed, size=args.scene_size, core=core)
    else:
        base_dir = Path(args.base_dir) if args.base_dir else _require(cfg, "base_dir")
        paths = io.list_rasters(base_dir) if base_dir.is_dir() else []
        if not paths:
            raise UsageError(f"no samples found in base directory {base_dir}")
        bases = [io.read_raster(p) for p in paths]
        catalog = bases[0].modality.bands
        if any(b.modality.bands != catalog for b in bases):
            raise UsageError("base rasters must share one band catalog")
    by_name = {s.modality.name: s for s in _forge_specs(fc.train_modalities + fc.test_modalities, catalog)}

    ids = [b.id for b in bases]
    if len(set(ids)) != len(ids):
        raise ProtocolViolation("base raster ids are not unique")
    splits = mf.split_ids(ids, fc.val_fraction, fc.test_fraction, cfg.seed)
    manifest = mf.assign_modalities(
        splits, [m.name for m in fc.train_modalities], [m.name for m in fc.test_modalities], cfg.seed
    )
    manifest.validate()
    modality_of = manifest.modality_of()
    forged = [mf.forge_sample(b, by_name[modality_of[b.id]]) for b in bases]  # fails before any write

    out = _out_dir(cfg)
    (out / SAMPLES_DIR).mkdir(exist_ok=True)
    h = cfg.config_hash
    for s in forged:
        io.write_raster(out / SAMPLES_DIR / f"{s.id}{io.RASTER_SUFFIX}", s, {"config_hash": h})
    io.write_manifest(out / MANIFEST_NAME, manifest, h)
    print(f"wrote {len(forged)} samples and {out / MANIFEST_NAME} (config {h})")
    for (split, modality), n in manifest.counts().items():
        print(f"  {split:<5} {modality:<24} {n:>6}")
    return EXIT_OK


def cmd_atomize(cfg: config_mod.RunConfig, args) -> int:
    inputs = [Path(p) for p in args.inputs] or [_require(cfg, "dataset_dir")]
    paths = []
    for p in inputs:
        paths.extend(io.list_rasters(p) if p.is_dir() else [p])
    if not paths:
        raise UsageError("no rasters to atomize")
    out = _out_dir(cfg)
    for p in paths:
        sample = io.read_raster(p)
        tokens = tokenize(sample, cfg.codecs)
        io.write_tokenset(out / p.stem, tokens, cfg.config_hash, {"id": sample.id, "modality": sample.modality.name})
        print(f"{p.name}: {len(tokens)} tokens x {tokens.token_dim}")
    return EXIT_OK


def cmd_train(cfg: config_mod.RunConfig, args) -> int:
    if args.dry_run:
        shapes = le.parameter_shapes(cfg.encoder, cfg.codecs.token_dim)
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        print(f"config hash: {cfg.config_hash}")
        print(f"token width: {cfg.codecs.token_dim}")
        print(f"parameters: {sum(math.prod(s) for s in shapes.values())}")
        return EXIT_OK
    manifest = io.read_manifest(_require(cfg, "manifest"))
    _require(cfg, "dataset_dir")
    manifest.validate()
    train_samples = _load_split(cfg, manifest, "train")
    val_samples = _load_split(cfg, manifest, "val")
    if not train_samples:
        raise UsageError("the manifest has no training samples")
    _check_classes(train_samples + val_samples, cfg.encoder.num_classes)

    out = _out_dir(cfg)
    h = cfg.config_hash
    (out / CONFIG_NAME).write_text(json.dumps(cfg.to_dict() | {"config_hash": h}, indent=2, sort_keys=True))
    metrics = open(out / METRICS_NAME, "w")

    def on_epoch(record, params, is_best):
        metrics.write(json.dumps(record | {"config_hash": h}, sort_keys=True) + "\n")
        metrics.flush()
        if is_best:
            io.save_checkpoint(out / CHECKPOINT_NAME, params, cfg.to_dict(), h)

    with metrics:
        result = te.train(train_samples, cfg.codecs, cfg.train, cfg.encoder, val_samples, on_epoch)
    last = result.history[-1]
    print(f"trained {result.total_steps} steps; best epoch {result.best_epoch}; final train loss {last['train_loss']:.4f}")
    print(f"wrote {out / CHECKPOINT_NAME}, {out / METRICS_NAME}, {out / CONFIG_NAME}")
    return EXIT_OK


def _center_crop(sample: Sample, size: int) -> Sample | None:
    m = sample.modality
    if size > m.height or size > m.width:
        return None
    r0, c0 = (m.height - size) // 2, (m.width - size) // 2
    mod = dataclasses.replace(m, height=size, width=size)
    return Sample(sample.cube[r0 : r0 + size, c0 : c0 + size], mod, sample.target, sample.id)


def _resampled(sample: Sample, gsd: float) -> Sample | None:
    m = sample.modality
    try:
        cube = mf.resample_to_gsd(sample.cube, m.gsd, gsd)
    except (UnsupportedFactorError, PreconditionError) as e:
        log.warning("skipping gsd %g for %s: %s", gsd, m.name, e)
        return None
    mod = ModalityConfig(m.bands, gsd, cube.shape[0], cube.shape[1], m.name)
    return Sample(cube, mod, sample.target, sample.id)


def eval_rows(params, samples: Sequence[Sample], codecs, sweep_gsd=None, sweep_size=None, batch_size=32) -> list[dict]:
    """One row per (modality, variant); every metric comes from an EvalReport."""
    rows = []
    groups: dict[str, list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.modality.name, []).append(s)
    for name in sorted(groups):
        group = groups[name]
        m = group[0].modality
        variants = [("native", m.gsd, m.height, group)]
        for g in sweep_gsd or ():
            v = [r for r in (_resampled(s, g) for s in group) if r is not None]
            if v:
                variants.append(("gsd", g, v[0].modality.height, v))
        for px in sweep_size or ():
            v = [r for r in (_center_crop(s, px) for s in group) if r is not None]
            if v:
                variants.append(("size", m.gsd, px, v))
            else:
                log.warning("skipping size %d for %s: larger than %dx%d", px, name, m.height, m.width)
        for kind, gsd, size, chunk in variants:
            rep = te.evaluate(params, chunk, codecs, name, batch_size)
            rows.append({"sweep": kind, "gsd": gsd, "size": size} | rep.to_dict())
    return rows


def format_table(rows: Sequence[dict]) -> str:
    head = ("modality", "sweep", "gsd", "size", "n", "mAP", "subset_acc", "micro_acc")
    body = [
        (
            r["modality"],
            r["sweep"],
            f"{r['gsd']:g}",
            str(r["size"]),
            str(r["num_samples"]),
            f"{r['mAP']:.4f}",
            f"{r['subset_accuracy']:.4f}",
            f"{r['micro_accuracy']:.4f}",
        )
        for r in rows
    ]
    widths = [max(len(c) for c in col) for col in zip(head, *body)]
    fmt = "  ".join(f"{{:<{w}}}" if i < 2 else f"{{:>{w}}}" for i, w in enumerate(widths))
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines)


def _plot(rows: Sequence[dict], path: Path):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise UsageError("--plot needs matplotlib (pip install 'artifact[plot]')") from None
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, kind, key, label in ((axes[0], "gsd", "gsd", "GSD (m/px)"), (axes[1], "size", "size", "size (px)")):
        for name in sorted({r["modality"] for r in rows}):
            pts = sorted((r[key], r["mAP"]) for r in rows if r["modality"] == name and r["sweep"] in (kind, "native"))
            if len(pts) > 1:
                ax.plot(*zip(*pts), marker="o", label=name)
        ax.set_xlabel(label)
        ax.set_ylabel("mAP")
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_eval(cfg: config_mod.RunConfig, args) -> int:
    ckpt_path = Path(args.checkpoint) if args.checkpoint else _require(cfg, "out_dir") / CHECKPOINT_NAME
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    params, header = io.load_checkpoint(ckpt_path)
    if header.get("config_hash") != cfg.config_hash:
        raise UsageError(
            f"checkpoint config hash {header.get('config_hash')} does not match "
            f"the current config hash {cfg.config_hash}; refusing to evaluate"
        )
    manifest = io.read_manifest(_require(cfg, "manifest"))
    wanted = set(args.modality) if args.modality else None
    samples = _load_split(cfg, manifest, args.split, wanted)
    rows = []
    if samples:
        _check_classes(samples, params.config.num_classes)
        rows = eval_rows(params, samples, cfg.codecs, args.sweep_gsd, args.sweep_size, cfg.train.eval_batch_size)
    else:
        log.warning("no %s samples match the modality filter; the table is empty", args.split)
        print(f"warning: no {args.split} samples selected; empty table", file=sys.stderr)

    print(format_table(rows))
    out = _out_dir(cfg)
    json_path = Path(args.json_path) if args.json_path else out / "eval.json"
    report = {"config_hash": cfg.config_hash, "checkpoint": str(ckpt_path), "split": args.split, "rows": rows}
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"wrote {json_path}")
    if args.plot and rows:
        _plot(rows, out / "sweep.png")
        print(f"wrote {out / 'sweep.png'}")
    return EXIT_OK


def cmd_gradcheck(cfg: config_mod.RunConfig, args) -> int:
    enc, params, tokens, target = le.toy_instance(cfg.seed)
    hook = None
    if args.inject_sign_flip:
        name = args.inject_sign_flip
        if name not in params.arrays:
            raise UsageError(f"unknown parameter {name!r}; choose one of: {', '.join(params.names())}")

        def hook(grads):
            grads[name] = -grads[name]

    report = le.grad_check(
        params, tokens, target, args.tolerance, num_samples=args.num_samples, seed=cfg.seed, cfg=enc, grad_hook=hook
    )
    print(report.format())
    if cfg.path("out_dir"):
        path = _out_dir(cfg) / "gradcheck.json"
        path.write_text(json.dumps(report.to_dict() | {"config_hash": cfg.config_hash}, indent=2, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "forge": cmd_forge,
    "atomize": cmd_atomize,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args)
    except ProtocolViolation as e:
        print(f"protocol violation: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (NumericFailure, DegenerateEncodingError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AtomizerError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
