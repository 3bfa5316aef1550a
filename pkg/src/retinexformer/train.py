"""MAE training with Adam and cosine annealing, evaluation, ORF ablation."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ImagePair, random_crop_augment
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .metrics import psnr, ssim
from .network import ModelConfig, ParameterStore, init_parameters
from .orf import ORF_MODES, orf_forward
from .tensor import GradientMap, Tape, Tensor, abs_, backward, mean_all, sub

log = logging.getLogger(__name__)


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at an exact tie is 0."""
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss: {pred.shape} vs {target.shape}")
    return mean_all(abs_(sub(pred, target)))


@dataclass(frozen=True)
class Schedule:
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    total_steps: int = 5000

    def __post_init__(self):
        if not self.lr_start > self.lr_end > 0:
            raise ConfigError(f"need lr_start > lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")


def lr_at(step: int, schedule: Schedule) -> float:
    """Cosine annealing from ``lr_start`` (step 0) to ``lr_end`` (last step)."""
    if not 0 <= step <= schedule.total_steps:
        warnings.warn(f"step {step} outside [0, {schedule.total_steps}]; clamping", stacklevel=2)
        step = min(max(step, 0), schedule.total_steps)
    if step == schedule.total_steps:
        return schedule.lr_end
    cosine = 1.0 + math.cos(math.pi * step / schedule.total_steps)
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * cosine


@dataclass
class OptimState:
    first: dict
    second: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, params):
        return cls(
            first={k: np.zeros_like(p.data) for k, p in params.items()},
            second={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params, grads, state: OptimState, lr: float):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if set(params) != set(state.first):
        raise UsageError("optimizer state does not match the parameter names")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, p in params.items():
        if isinstance(grads, GradientMap):
            g = grads.get_for(p)
        elif name in grads:
            g = np.asarray(grads[name])
        else:
            raise UsageError(f"no gradient for parameter {name}")
        m, v = state.first[name], state.second[name]
        if g.shape != p.shape or m.shape != p.shape:
            raise UsageError(f"gradient/state shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)).astype(p.dtype)


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 2
    crop_size: int = 64
    seed: int = 0
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    mode: str = "lightup_map_plus_flu"
    aux_lit_loss: bool = False
    augment: bool = True
    eval_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in ORF_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.crop_size % 4:
            raise ConfigError(f"crop_size {self.crop_size} must be divisible by 4")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")

    @property
    def schedule(self):
        # the last update (index steps - 1) runs at exactly lr_end
        return Schedule(self.lr_start, self.lr_end, max(self.steps - 1, 1))


@dataclass
class TrainResult:
    params: ParameterStore
    log: list = field(default_factory=list)

    @property
    def losses(self):
        return [row["loss"] for row in self.log]


LOG_COLUMNS = ("step", "lr", "loss", "eval_psnr", "eval_ssim")


def _derived_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def make_batch(pairs, cfg: TrainConfig, step: int):
    """Deterministic batch for ``step``: sampled pairs, paired crop/augment."""
    rng = np.random.default_rng(_derived_seed(cfg.seed, step))
    picks = rng.integers(0, len(pairs), size=cfg.batch_size)
    lows, refs = [], []
    for b, i in enumerate(picks):
        pair = pairs[i]
        if cfg.augment:
            pair = random_crop_augment(pair, cfg.crop_size, _derived_seed(cfg.seed, step, b))
        elif pair.low.shape[0] != cfg.crop_size or pair.low.shape[1] != cfg.crop_size:
            h, w = pair.low.shape[:2]
            y0, x0 = (h - cfg.crop_size) // 2, (w - cfg.crop_size) // 2
            s = slice(y0, y0 + cfg.crop_size), slice(x0, x0 + cfg.crop_size)
            pair = ImagePair(Tensor(pair.low.data[s]), Tensor(pair.reference.data[s]))
        lows.append(pair.low.data)
        refs.append(pair.reference.data)
    return Tensor(np.stack(lows)), Tensor(np.stack(refs))


def training_loss(params, low, ref, cfg: TrainConfig, model_config=None):
    out = orf_forward(low, params, model_config, cfg.mode)
    loss = mae_loss(out.enhanced, ref)
    if cfg.aux_lit_loss:
        loss = loss + mae_loss(out.lit_image, ref)
    return loss, out


def train(model_config: ModelConfig, pairs, cfg: TrainConfig, eval_pairs=None,
          params: ParameterStore | None = None) -> TrainResult:
    """Run the full optimization loop and return the trained store plus a log."""
    if not pairs:
        raise UsageError("training set is empty")
    params = params if params is not None else init_parameters(model_config, cfg.seed)
    state = OptimState.create(params)
    schedule = cfg.schedule
    result = TrainResult(params)
    for step in range(cfg.steps):
        low, ref = make_batch(pairs, cfg, step)
        with Tape() as tape:
            loss, _ = training_loss(params, low, ref, cfg, model_config)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(
                f"non-finite loss {value} at step {step} "
                f"(batch seed {_derived_seed(cfg.seed, step)}, run seed {cfg.seed})"
            )
        grads = backward(loss, tape)
        lr = lr_at(step, schedule)
        adam_step(params, grads, state, lr)
        row = {"step": step, "lr": lr, "loss": value, "eval_psnr": "", "eval_ssim": ""}
        last = step == cfg.steps - 1
        if eval_pairs and cfg.eval_every and (step % cfg.eval_every == 0 or last):
            summary = summarize(evaluate(params, eval_pairs, cfg.mode, model_config))
            row["eval_psnr"], row["eval_ssim"] = summary["psnr_out"], summary["ssim_out"]
        if step % cfg.log_every == 0 or last or row["eval_psnr"] != "":
            result.log.append(row)
        if step % 100 == 0 or last:
            log.info("step %d lr %.3g loss %.5f", step, lr, value)
    return result


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


# --------------------------------------------------------------------------
# Inference / evaluation


def enhance(image, params, mode="lightup_map_plus_flu", model_config=None, clip=True):
    """Enhance one ``H x W x 3`` image of any size.

    Sizes not divisible by 4 are reflect-padded up to the next multiple and
    cropped back afterwards.
    """
    data = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    h, w = data.shape[:2]
    ph, pw = (-h) % 4, (-w) % 4
    if ph or pw:
        data = np.pad(data, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    out = orf_forward(Tensor(data), params, model_config, mode).enhanced.data[:h, :w]
    return np.clip(out, 0.0, 1.0) if clip else out


METRIC_COLUMNS = ("image_id", "psnr_in", "psnr_out", "ssim_in", "ssim_out")


def metric_row(name, low, out, ref):
    """PSNR/SSIM of ``out`` against ``ref``, with ``low`` as the input baseline."""
    return {
        "image_id": name,
        "psnr_in": psnr(low, ref),
        "psnr_out": psnr(out, ref),
        "ssim_in": ssim(low, ref),
        "ssim_out": ssim(out, ref),
    }


def evaluate(params, items, mode="lightup_map_plus_flu", model_config=None):
    """Per-image metrics for ``items``: ImagePairs or ``(name, ImagePair)`` tuples."""
    rows = []
    for i, item in enumerate(items):
        name, pair = item if isinstance(item, tuple) else (f"{i:04d}", item)
        out = enhance(pair.low, params, mode, model_config)
        rows.append(metric_row(name, pair.low, out, pair.reference))
    return rows


def summarize(rows):
    return {
        key: float(np.mean([r[key] for r in rows]))
        for key in ("psnr_in", "psnr_out", "ssim_in", "ssim_out")
    }


def _fmt(value):
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.6f}"
    return value


def write_metrics(rows, path):
    """Per-image rows followed by a ``mean`` row; ``*_in`` columns are the input baseline."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        if rows:
            mean = summarize(rows)
            writer.writerow(["mean"] + [_fmt(mean[c]) for c in METRIC_COLUMNS[1:]])


# --------------------------------------------------------------------------
# ORF ablation


def ablate_orf(mode, train_pairs, test_pairs, model_config: ModelConfig, cfg: TrainConfig):
    """Train one ORF variant and report held-out PSNR/SSIM.

    Numeric failures are reported in the row instead of raised, so a sweep
    over all variants always finishes.
    """
    run_cfg = TrainConfig(**{**asdict(cfg), "mode": mode})
    row = {"mode": mode, "seed": cfg.seed, "steps": cfg.steps, "failed": False}
    try:
        result = train(model_config, train_pairs, run_cfg)
    except NumericError as exc:
        log.warning("ablation mode %s failed: %s", mode, exc)
        return {**row, "failed": True, "error": str(exc)}
    summary = summarize(evaluate(result.params, test_pairs, mode, model_config))
    row.update(summary)
    row["final_loss"] = float(np.mean(result.losses[-50:]))
    finite = all(np.all(np.isfinite(p.data)) for p in result.params.values())
    row["failed"] = not finite
    return row
