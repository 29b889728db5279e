"""Acceptance suite: one group of checks per criterion, each timed against its budget.

The terminal summary (see conftest) prints one PASS/FAIL line per criterion.
"""
import dataclasses
import itertools
import math
import time
import warnings

import numpy as np
import pytest

from atomizer.latent_encoder import EncoderConfig, grad_check, init_parameters, predict_logits, toy_instance
from atomizer.modality_forge import (
    ForgeSpec,
    assign_modalities,
    band_index,
    forge_sample,
    resample_to_gsd,
    sentinel2_bands,
    split_ids,
    synth_dataset,
    synth_scenes,
)
from atomizer.position_codec import (
    FourierConfig,
    PositionConfig,
    encode_position,
    encode_reflectance,
    fourier_features,
    normalize_coords,
)
from atomizer.spectral_codec import BandSpec, band_activations, band_support, build_default_bank, encode_band
from atomizer.tokenizer import Codecs, ModalityConfig, Sample, prune_indices, tokenize
from atomizer.train_eval import TrainConfig, average_precision, evaluate, lr_at, train, warmup_steps

CAT = sentinel2_bands()


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f} s, budget {self.seconds} s"


def bands(*names):
    return [band_index(n) for n in names]


# 1. encoding golden suite


def dense_oracle(center, width, bank, n=10_001):
    grid = np.linspace(center - width / 2, center + width / 2, n)
    feats = np.exp(-((grid[:, None] - bank.centers) ** 2) / (2 * bank.widths**2)).max(axis=0)
    return feats / np.linalg.norm(feats)


@pytest.mark.criterion(1, "encoding golden suite")
def test_criterion_1_encoding_golden_suite():
    with Budget(10):
        close = lambda a, b: np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
        close(fourier_features(0.0, FourierConfig(2, 4.0)), [0, 1, 0, 1])
        close(fourier_features(1.0, FourierConfig(1, 1.0)), [0, -1])
        close(fourier_features(0.5, FourierConfig(2, 3.0)), [1, 0, -1, 0])
        r0 = encode_reflectance(0.0, FourierConfig(5, 7.0))
        close(r0[0::2], 0.0)
        close(r0[1::2], 1.0)
        close(encode_reflectance(1.0, FourierConfig(1, 1.0)), [0, -1])
        np.testing.assert_allclose(encode_reflectance(0.25, FourierConfig(1, 1.0)), [0.70711, 0.70711], atol=1e-5)
        assert normalize_coords(1, 1, 3, 3) == (0.0, 0.0)
        assert normalize_coords(0, 0, 100, 100)[0] == pytest.approx(-0.99, abs=1e-12)
        assert normalize_coords(0, 0, 1, 1) == (0.0, 0.0)

        L = 6
        cfg = PositionConfig(FourierConfig(L, 8.0), 10.0)
        for gsd in (1.0, 10.0, 60.0):
            z = encode_position(0.0, 0.0, gsd, cfg)
            for block in (z[: 2 * L + 1], z[2 * L + 1 :]):
                close(block[: 2 * L : 2], 0.0)
                close(block[1 : 2 * L : 2], 1.0)
                assert block[-1] == 0.0
        a, b = encode_position(0.5, 0, 20.0, cfg), encode_position(1.0, 0, 10.0, cfg)
        close(a[: 2 * L], b[: 2 * L])
        assert (a[2 * L], b[2 * L]) == (0.5, 1.0)
        close(encode_position(1.0, -1.0, 10.0, PositionConfig(FourierConfig(1, 1.0), 10.0)), [0, -1, 1, 0, -1, -1])

        bank = build_default_bank()
        assert len(bank) == 64 and bank.centers[0] == 400 and bank.centers[-1] == 2500
        assert np.all(bank.widths > 0) and np.all(np.diff(bank.centers) > 0)
        assert np.all(band_support(BandSpec(500.0, 0.0), 7) == 500)
        close(band_support(BandSpec(500.0, 100.0), 3), [450, 500, 550])
        close(band_support(BandSpec(500.0, 100.0), 2), [450, 550])
        for j in (0, 20, 47, 50, 63):
            peak = BandSpec(float(bank.centers[j]), 0.0)
            assert band_activations(peak, bank)[j] == 1.0
            assert np.argmax(encode_band(peak, bank)) == j
        assert np.linalg.norm(encode_band(BandSpec(600, 20), bank) - encode_band(BandSpec(600, 200), bank)) > 0
        np.testing.assert_allclose(encode_band(BandSpec(650, 40), bank, 32), dense_oracle(650, 40, bank), atol=1e-6)

        rng = np.random.default_rng(0)
        for _ in range(500):
            band = BandSpec(rng.uniform(380, 2600), rng.uniform(0, 300))
            assert abs(np.linalg.norm(encode_band(band, bank)) - 1.0) < 1e-9

        Lq = 16
        for _ in range(1000):
            x_d, g, G = rng.uniform(-1, 1), rng.uniform(0.5, 500), rng.uniform(0.5, 500)
            pc = PositionConfig(FourierConfig(Lq, 16.0), G)
            np.testing.assert_allclose(
                encode_position(x_d, 0.0, g, pc)[: 2 * Lq],
                encode_position(x_d * g / G, 0.0, G, pc)[: 2 * Lq],
                atol=1e-9,
                rtol=0,
            )


# 2. tokenizer contract


@pytest.mark.criterion(2, "tokenizer contract")
def test_criterion_2_tokenizer_contract():
    with Budget(30):
        f = FourierConfig(8, 8.0)
        codecs = Codecs(PositionConfig(f, 10.0), f)
        rng = np.random.default_rng(0)
        widths = set()
        for _ in range(50):
            h, w = (int(v) for v in rng.integers(1, 17, 2))
            nb = int(rng.integers(1, 13))
            names = rng.choice(len(CAT), nb, replace=False)
            m = ModalityConfig(tuple(CAT[i] for i in names), float(rng.uniform(1, 100)), h, w)
            toks = tokenize(Sample(rng.uniform(0, 1, (h, w, nb)), m, np.zeros(1)), codecs)
            assert toks.tokens.shape[0] == h * w * nb
            widths.add(toks.tokens.shape[1])
        assert widths == {codecs.token_dim}

        for n_tok, p in ((4096, 0.5), (17, 0.3), (1000, 0.9), (5, 0.0)):
            assert len(prune_indices(n_tok, p, 3)) == math.floor(n_tok * (1 - p))


@pytest.mark.criterion(2, "tokenizer contract")
def test_criterion_2_per_index_keep_frequency(record_property):
    # Literal check on the 32x32x4 token count: every index kept 0.5 +- 0.05 of the time.
    # For an unbiased sampler each frequency is Binomial(256, 0.5) / 256 (sd 1/32), so
    # about 11.8% of indices are expected outside the band; see the decisions ledger.
    with Budget(30):
        n = 32 * 32 * 4
        counts = np.zeros(n)
        for seed in range(256):
            kept = prune_indices(n, 0.5, seed)
            assert len(kept) == n // 2 and len(np.unique(kept)) == len(kept)
            counts[kept] += 1
        freq = counts / 256
        outside = float(np.mean(np.abs(freq - 0.5) > 0.05))
        record_property("measured", f"mean keep frequency {freq.mean():.4f}; {outside:.1%} of indices outside 0.5 +- 0.05")
        assert outside == 0.0, f"{outside:.1%} of indices outside 0.5 +- 0.05 (range {freq.min():.3f}..{freq.max():.3f})"


# 3. permutation invariance


@pytest.mark.criterion(3, "eval-mode permutation invariance")
def test_criterion_3_permutation_invariance(record_property):
    with Budget(60):
        rng = np.random.default_rng(0)
        m = ModalityConfig(tuple(CAT[i] for i in bands("B02", "B04", "B08", "B11")), 10.0, 32, 32)
        tokens = tokenize(Sample(rng.uniform(0, 1, (32, 32, 4)), m, np.zeros(4)), Codecs()).tokens
        assert tokens.dtype == np.float32 and tokens.shape[0] == 4096
        cfg = EncoderConfig(num_classes=4)
        params = init_parameters(cfg, tokens.shape[1], seed=0)
        # spread the weights so attention is far from uniform
        for arr in params.arrays.values():
            arr += rng.normal(0, 0.05, arr.shape).astype(np.float32)
        ref = predict_logits(tokens, params)
        assert np.all(np.isfinite(ref))
        worst = 0.0
        for _ in range(20):
            perm = rng.permutation(tokens.shape[0])
            worst = max(worst, float(np.max(np.abs(predict_logits(tokens[perm], params) - ref))))
        record_property("measured", f"max L-inf logit deviation over 20 permutations {worst:.2e}")
        assert worst < 1e-5, f"L-inf deviation {worst:.2e}"


# 4. gradient fidelity


@pytest.mark.criterion(4, "gradient check in double precision")
def test_criterion_4_gradient_fidelity(record_property):
    with Budget(300):
        cfg, params, tokens, target = toy_instance(0)
        report = grad_check(params, tokens, target, 1e-4, num_samples=200, h=1e-5, cfg=cfg)
        assert report.num_checked >= 200
        assert set(report.groups) == set(params.names())
        record_property("measured", f"max relative error {report.max_rel_error:.2e} over {report.num_checked} entries")
        assert report.passed, report.format()


# 5. AP oracle


def brute_force_ap(scores, labels):
    n = len(scores)
    terms = []
    for i in range(n):
        if not labels[i]:
            continue
        ahead = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i)]
        terms.append((1 + sum(labels[j] for j in ahead)) / (len(ahead) + 1))
    return math.fsum(terms) / len(terms)


@pytest.mark.criterion(5, "average precision equals brute-force oracle")
def test_criterion_5_ap_oracle():
    with Budget(60):
        rng = np.random.default_rng(0)
        checked = 0
        for n in range(1, 9):
            for bits in itertools.product((0, 1), repeat=n):
                if not any(bits):
                    continue
                for draw in range(100):
                    # every fourth draw is coarse so ties get exercised
                    s = rng.integers(0, 3, n).astype(float) if draw % 4 == 0 else rng.random(n)
                    assert average_precision(s, bits) == brute_force_ap(s.tolist(), bits)
                    checked += 1
        assert checked == 100 * sum(2**n - 1 for n in range(1, 9))


# 6. overfit smoke


@pytest.mark.slow
@pytest.mark.criterion(6, "overfit 32 samples within 500 steps")
def test_criterion_6_overfit(record_property):
    with Budget(600):
        spec = ForgeSpec.from_catalog(CAT, "m", 10.0, 12, 12, bands("B02", "B04", "B8A", "B11"))
        samples = synth_dataset(32, 4, [spec], seed=0, size=12)
        f = FourierConfig(16, 8.0)
        codecs = Codecs(PositionConfig(f, 10.0), f)
        enc = EncoderConfig(num_latents=32, latent_dim=64, num_blocks=2, self_layers_per_block=1, num_heads=4, num_classes=4)
        cfg = TrainConfig(epochs=500, warmup_epochs=50, peak_lr=3e-3, batch_size=32, seed=0)
        result = train(samples, codecs, cfg, enc)
        assert result.total_steps == 500
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            acc = evaluate(result.params, samples, codecs).subset_accuracy
        record_property("measured", f"train subset accuracy {acc:.3f} after {result.total_steps} steps")
        assert acc > 0.95


# 7. cross-modality generalization

C7_SIZE = 32  # side of train modality A; B and the test modality are half as wide
C7_TRAIN, C7_TEST = 128, 64
C7_EPOCHS = 120


def c7_data():
    s = C7_SIZE
    a = ForgeSpec.from_catalog(CAT, "trainA", 10.0, s, s, bands("B02", "B03", "B04", "B08", "B11", "B12"))
    b = ForgeSpec.from_catalog(CAT, "trainB", 20.0, s // 2, s // 2, bands("B03", "B05", "B8A", "B12"))
    t = ForgeSpec.from_catalog(CAT, "test", 40.0, s // 2, s // 2, bands("B02", "B04", "B05", "B8A", "B11"))
    scenes = synth_scenes(C7_TRAIN + C7_TEST, 4, seed=0, size=2 * s, core=s)
    ids = {"train": [x.id for x in scenes[:C7_TRAIN]], "test": [x.id for x in scenes[C7_TRAIN:]]}
    manifest = assign_modalities(ids, ["trainA", "trainB"], ["test"], seed=0)
    manifest.validate()
    specs = {"trainA": a, "trainB": b, "test": t}
    modality = manifest.modality_of()
    forged = [forge_sample(x, specs[modality[x.id]]) for x in scenes]
    return forged[:C7_TRAIN], forged[C7_TRAIN:]


def c7_run(train_set, test_set, zeroed=()):
    f = FourierConfig(16, C7_SIZE / 2)
    codecs = Codecs(PositionConfig(f, 10.0), f, zeroed=zeroed)
    enc = EncoderConfig(num_latents=32, latent_dim=64, num_blocks=2, self_layers_per_block=1, num_heads=4, num_classes=4)
    cfg = TrainConfig(epochs=C7_EPOCHS, warmup_epochs=max(1, C7_EPOCHS // 10), peak_lr=3e-3, batch_size=16, seed=0)
    result = train(train_set, codecs, cfg, enc)
    return evaluate(result.params, test_set, codecs, "test").mAP


@pytest.mark.slow
@pytest.mark.criterion(7, "generalization to an unseen modality")
def test_criterion_7_cross_modality(record_property):
    with Budget(1800):
        train_set, test_set = c7_data()
        assert {s.modality.name for s in train_set}.isdisjoint({s.modality.name for s in test_set})
        prevalence = float(np.stack([s.target for s in test_set]).mean(axis=0).mean())
        full = c7_run(train_set, test_set)
        ablated = c7_run(train_set, test_set, zeroed=("position", "spectral"))
        record_property("measured", f"test mAP {full:.3f}, prevalence {prevalence:.3f}, metadata-zeroed ablation {ablated:.3f}")
        assert full - prevalence >= 0.15
        assert full - ablated >= 0.05


# 8. forge protocol


@pytest.mark.criterion(8, "forge disjointness and mean-preserving resampling")
def test_criterion_8_forge_protocol():
    with Budget(10):
        rng = np.random.default_rng(0)
        for trial in range(100):
            n = int(rng.integers(5, 200))
            ids = [f"s{trial}_{i}" for i in range(n)]
            n_train, n_test = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            train_m = [f"tr{i}" for i in range(n_train)]
            test_m = [f"te{i}" for i in range(n_test)]
            manifest = assign_modalities(split_ids(ids, 0.1, 0.25, trial), train_m, test_m, trial)
            manifest.validate()
            assert manifest.modality_names("train", "val").isdisjoint(manifest.modality_names("test"))
            assert manifest.modality_names("test") <= set(test_m)
            seen = [r.sample_id for r in manifest]
            assert len(seen) == len(set(seen)) == n
        for _ in range(100):
            s, h, w = (int(v) for v in rng.integers(1, 7, 3))
            cube = rng.uniform(0, 1, (h * s, w * s, 3))
            out = resample_to_gsd(cube, 10.0, 10.0 * s)
            np.testing.assert_allclose(out.mean(axis=(0, 1)), cube.mean(axis=(0, 1)), atol=1e-6)


# 9. schedule


@pytest.mark.criterion(9, "warmup plus cosine schedule")
def test_criterion_9_schedule():
    cfg = TrainConfig(epochs=40, warmup_epochs=5, peak_lr=3e-4, batch_size=32)
    steps_per_epoch = 32  # about a thousand samples per epoch at batch 32
    total = cfg.epochs * steps_per_epoch
    w = warmup_steps(total, cfg)
    assert lr_at(0, total, cfg) == 0
    assert lr_at(w, total, cfg) == pytest.approx(cfg.peak_lr, rel=1e-15)
    assert abs(lr_at(total, total, cfg)) < 1e-12
    bound = cfg.peak_lr * max(1 / w, math.pi / (total - w))
    lrs = np.array([lr_at(s, total, cfg) for s in range(total + 1)])
    # warmup increments equal the bound exactly, up to rounding
    assert np.all(np.abs(np.diff(lrs)) <= bound * (1 + 1e-12))
