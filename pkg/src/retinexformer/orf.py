"""One-stage Retinex framework: illumination estimator, light-up, restorer.

The estimator predicts a light-up map that *multiplies* the low-light image.
The rejected alternative, predicting the illumination and dividing by it, is
only reachable through the ``divide_L`` ablation mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .layers import ConvSpec, conv2d
from .network import ESTIMATOR_KERNEL, check_divisible, igt_forward
from .tensor import Tensor, Tape, add, concat, div, mean_over_axis, mul

log = logging.getLogger(__name__)

ORF_MODES = ("no_orf", "divide_L", "lightup_map", "lightup_map_plus_flu")
DIVIDE_EPSILON = 1e-4
LIGHT_UP_WARN = 10.0


@dataclass(frozen=True)
class DegradationConfig:
    """Perturbed-Retinex corruption: ``low = clamp((R + R_hat) * (L + L_hat))``.

    ``sigma`` is the std of the Gaussian reflectance perturbation, ``jitter``
    the amplitude of the smooth illumination perturbation, and ``grid`` the
    coarse lattice size whose bilinear upsampling sets field smoothness.
    """

    sigma: float = 0.05
    l_min: float = 0.1
    l_max: float = 1.0
    jitter: float = 0.0
    grid: int = 4

    def __post_init__(self):
        if self.l_min <= 0:
            raise ConfigError(f"l_min must be > 0, got {self.l_min}")
        if self.l_max < self.l_min or self.l_max > 1:
            raise ConfigError(f"need l_min <= l_max <= 1, got [{self.l_min}, {self.l_max}]")
        if self.sigma < 0 or self.jitter < 0:
            raise ConfigError("perturbation scales must be >= 0")
        if self.grid < 2:
            raise ConfigError("grid must be at least 2")


@dataclass
class IlluminationPrior:
    map: Tensor  # H x W x 1


@dataclass
class LightUpOutput:
    light_up_map: Tensor
    lit_image: Tensor
    light_up_feature: Tensor


@dataclass
class ORFOutput:
    lit_image: Tensor
    light_up_feature: Tensor | None
    enhanced: Tensor
    residual: Tensor
    light_up_map: Tensor | None


def illumination_prior(image: Tensor) -> IlluminationPrior:
    """Per-pixel mean over the colour channels."""
    return IlluminationPrior(mean_over_axis(image, -1, keepdims=True))


def light_up(image: Tensor, light_map: Tensor) -> Tensor:
    return mul(image, light_map)


def _estimator(image, prior, params):
    c = params["estimator.fuse.weight"].shape[3]
    fused = conv2d(
        concat([image, prior.map], axis=-1),
        ConvSpec(4, c, 1),
        params["estimator.fuse.weight"],
        params["estimator.fuse.bias"],
    )
    k = ESTIMATOR_KERNEL
    feature = conv2d(
        fused,
        ConvSpec(c, c, k, padding=k // 2, groups=c),
        params["estimator.depthwise.weight"],
        params["estimator.depthwise.bias"],
    )
    out = conv2d(feature, ConvSpec(c, 3, 1), params["estimator.out.weight"], params["estimator.out.bias"])
    return feature, out


def estimate_illumination(image: Tensor, prior: IlluminationPrior, params) -> LightUpOutput:
    feature, light_map = _estimator(image, prior, params)
    if np.abs(light_map.data).max(initial=0.0) > LIGHT_UP_WARN:
        log.debug("light-up map magnitude exceeds %s", LIGHT_UP_WARN)
    return LightUpOutput(light_map, light_up(image, light_map), feature)


def orf_forward(image: Tensor, params, config=None, mode: str = "lightup_map_plus_flu") -> ORFOutput:
    """Estimator followed by the restorer as a single differentiable graph.

    Modes mirror the framework ablation: ``no_orf`` feeds the raw image and an
    all-ones guide; ``divide_L`` reads the estimator output as illumination
    and divides (with a small epsilon); ``lightup_map`` multiplies by the
    predicted map but drops the feature guide; the default uses both.
    """
    if mode not in ORF_MODES:
        raise ConfigError(f"unknown ORF mode {mode!r}; expected one of {ORF_MODES}")
    h, w = image.shape[-3], image.shape[-2]
    check_divisible(h, w)
    light_map = feature = None
    if mode == "no_orf":
        lit = image
    else:
        prior = illumination_prior(image)
        if mode == "divide_L":
            feature, illum = _estimator(image, prior, params)
            lit = div(image, add(illum, DIVIDE_EPSILON))
            light_map = illum
        else:
            est = estimate_illumination(image, prior, params)
            lit, light_map = est.lit_image, est.light_up_map
            if mode == "lightup_map_plus_flu":
                feature = est.light_up_feature
    guide = feature if mode == "lightup_map_plus_flu" else None
    enhanced, residual = igt_forward(lit, guide, params, config, return_residual=True)
    return ORFOutput(lit, guide, enhanced, residual, light_map)


def data_dependent_divisions(tape: Tape, source: Tensor):
    """Division nodes whose divisor depends on ``source``.

    Dividing by a learnable scalar (the attention temperature) is harmless;
    dividing by anything computed from the image is the fragile pattern the
    light-up map exists to avoid.
    """
    tainted = tape.depends_on(source)
    return [n for n in tape.nodes if n.op == "div" and n.inputs[1].id in tainted]
