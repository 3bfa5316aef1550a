"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import procedural_clean_image, synth_pair, synthesize_dataset
from .network import ModelConfig
from .orf import ORF_MODES, DegradationConfig, orf_forward
from .train import TrainConfig, ablate_orf, evaluate, mae_loss, summarize, train

log = logging.getLogger(__name__)

# clean scenes for training and held-out pairs come from disjoint seed ranges
TEST_SEED_OFFSET = 10_000


@dataclass(frozen=True)
class Benchmark:
    n_train: int = 200
    n_test: int = 20
    size: int = 64
    sigma: float = 0.05
    l_min: float = 0.1
    seed: int = 0

    def degradation(self):
        return DegradationConfig(sigma=self.sigma, l_min=self.l_min)


def build_benchmark(bench: Benchmark):
    """Return ``(train_pairs, test_pairs)``; every pair has its own clean scene."""
    cfg = bench.degradation()
    train_clean = [procedural_clean_image(bench.size, bench.size, bench.seed + i) for i in range(bench.n_train)]
    test_clean = [
        procedural_clean_image(bench.size, bench.size, TEST_SEED_OFFSET + bench.seed + i)
        for i in range(bench.n_test)
    ]
    train_pairs = synthesize_dataset(train_clean, bench.n_train, cfg, bench.seed)
    test_pairs = synthesize_dataset(test_clean, bench.n_test, cfg, bench.seed + TEST_SEED_OFFSET)
    return train_pairs, test_pairs


@dataclass
class OverfitResult:
    steps: int
    final_mae: float
    seconds: float
    losses: list = field(repr=False, default_factory=list)


def overfit_single_pair(steps=2000, size=64, channels=16, sigma=0.05, scene=1, seed=0):
    """Train on one pair without augmentation; ``final_mae`` is re-measured after the last update."""
    clean = procedural_clean_image(size, size, scene)
    pair = synth_pair(clean, DegradationConfig(sigma=sigma), scene + 6)
    model = ModelConfig(base_channels=channels, crop_size=size)
    cfg = TrainConfig(steps=steps, batch_size=1, crop_size=size, augment=False, seed=seed)
    start = time.perf_counter()
    result = train(model, [pair], cfg)
    final = float(mae_loss(orf_forward(pair.low, result.params, model).enhanced, pair.reference).data)
    return OverfitResult(steps, final, time.perf_counter() - start, result.losses)


@dataclass
class RestorationResult:
    psnr_in: float
    psnr_out: float
    ssim_in: float
    ssim_out: float
    seconds: float
    final_loss: float

    @property
    def psnr_gain(self):
        return self.psnr_out - self.psnr_in

    @property
    def ssim_gain(self):
        return self.ssim_out - self.ssim_in


def restoration_gain(bench=Benchmark(), steps=5000, batch_size=2, channels=16, seed=0):
    train_pairs, test_pairs = build_benchmark(bench)
    model = ModelConfig(base_channels=channels, crop_size=bench.size)
    cfg = TrainConfig(steps=steps, batch_size=batch_size, crop_size=bench.size, seed=seed)
    start = time.perf_counter()
    result = train(model, train_pairs, cfg)
    summary = summarize(evaluate(result.params, test_pairs, cfg.mode, model))
    return RestorationResult(
        **summary,
        seconds=time.perf_counter() - start,
        final_loss=float(np.mean(result.losses[-100:])),
    )


def orf_ablation(bench=Benchmark(), steps=1000, batch_size=2, channels=16, seeds=(0, 1, 2), modes=ORF_MODES):
    """One row per (seed, mode); seeds vary the initialization and batch order."""
    train_pairs, test_pairs = build_benchmark(bench)
    model = ModelConfig(base_channels=channels, crop_size=bench.size)
    rows = []
    for seed in seeds:
        for mode in modes:
            cfg = TrainConfig(steps=steps, batch_size=batch_size, crop_size=bench.size, seed=seed)
            start = time.perf_counter()
            row = ablate_orf(mode, train_pairs, test_pairs, model, cfg)
            row["seconds"] = time.perf_counter() - start
            log.info("ablation seed %d %s: %s", seed, mode, row)
            rows.append(row)
    return rows


def ordering_holds(rows, seed):
    """Full ORF >= light-up map only >= no ORF on held-out PSNR for ``seed``."""
    by_mode = {r["mode"]: r for r in rows if r["seed"] == seed}
    psnr = {m: by_mode[m].get("psnr_out", -np.inf) for m in ("lightup_map_plus_flu", "lightup_map", "no_orf")}
    return psnr["lightup_map_plus_flu"] >= psnr["lightup_map"] >= psnr["no_orf"]
