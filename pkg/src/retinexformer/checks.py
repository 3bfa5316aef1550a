"""Finite-difference gradient suite over ops, layers, blocks and the network.

Each target is a small scalar function of float64 inputs; the reported
number is the largest relative error between tape gradients and central
differences (see :func:`retinexformer.tensor.finite_diff_check`).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import IGABParams, ig_msa, igab, random_attention_params
from .errors import UsageError
from .layers import ConvSpec, FFNParams, LayerNormParams, conv2d, conv_transpose2d, ffn, gelu, layer_norm
from .network import ModelConfig, downscale_flu, init_parameters
from .orf import estimate_illumination, illumination_prior, orf_forward
from .tensor import (
    Tensor,
    abs_,
    add,
    concat,
    div,
    exp,
    finite_diff_check,
    floor_magnitude,
    l2_normalize,
    matmul,
    mean_all,
    mean_over_axis,
    mul,
    precision,
    reshape,
    scale,
    softmax,
    split,
    stack,
    sub,
    sum_all,
    tanh,
    transpose,
)

SCOPES = ("ops", "layers", "blocks", "network")
THRESHOLDS = {"ops": 1e-5, "layers": 1e-5, "blocks": 1e-5, "network": 1e-4}
NETWORK_SAMPLES = 60


@dataclass
class GradCheckRow:
    scope: str
    target: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self):
        return self.max_rel_error < self.threshold


def _t(rng, *shape, low=None, high=None):
    if low is None:
        return Tensor(rng.normal(size=shape), dtype=np.float64)
    return Tensor(rng.uniform(low, high, size=shape), dtype=np.float64)


def _probe(f, w):
    # random linear read-out keeps the scalar objective smooth
    return lambda *xs: sum_all(mul(f(*xs), w))


def _mae(pred, target):
    return mean_all(abs_(sub(pred, target)))


def _kink_free_target(pred, rng, margin=0.3):
    """Target at least ``margin`` away from ``pred`` in every entry.

    Central differences straddling an |r| = 0 kink of the MAE are
    meaningless; keeping residuals large avoids that without changing the
    loss itself.
    """
    sign = np.where(rng.random(pred.shape) < 0.5, -1.0, 1.0)
    offset = sign * rng.uniform(margin, 2 * margin, size=pred.shape)
    return Tensor(pred.data + offset, dtype=np.float64)


def _ops(rng):
    x, y = _t(rng, 3, 4, 2), _t(rng, 3, 4, 2, low=0.5, high=1.5)
    col = _t(rng, 3, 4, 1, low=0.5, high=1.5)
    w = _t(rng, 3, 4, 2)
    a, b = _t(rng, 3, 4), _t(rng, 4, 5)
    batched = _t(rng, 2, 3, 4)
    # keep away from the |x| kink and the floor threshold
    away = Tensor(np.sign(rng.normal(size=(3, 4, 2))) * rng.uniform(0.2, 1.0, size=(3, 4, 2)), dtype=np.float64)
    return {
        "add": (_probe(add, w), [x, y]),
        "add_broadcast": (_probe(add, w), [x, col]),
        "sub": (_probe(sub, w), [x, y]),
        "mul": (_probe(mul, w), [x, y]),
        "mul_broadcast": (_probe(mul, w), [x, col]),
        "div": (_probe(div, w), [x, y]),
        "div_broadcast": (_probe(div, w), [x, col]),
        "scale": (_probe(lambda x: scale(x, -1.7), w), [x]),
        "exp": (_probe(exp, w), [x]),
        "tanh": (_probe(tanh, w), [x]),
        "abs": (_probe(abs_, w), [away]),
        "floor_magnitude": (_probe(lambda x: floor_magnitude(x, 0.1), w), [away]),
        "matmul": (lambda a, b: sum_all(mul(matmul(a, b), matmul(a, b))), [a, b]),
        "matmul_batched": (lambda p, b: sum_all(mul(matmul(p, b), matmul(p, b))), [batched, b]),
        "l2_normalize": (_probe(lambda x: l2_normalize(x, axis=0), w), [x]),
        "softmax": (_probe(lambda x: softmax(x, axis=-1), w), [x]),
        "softmax_axis0": (_probe(lambda x: softmax(x, axis=0), w), [x]),
        "matmul_softmax": (lambda a, b: sum_all(mul(softmax(matmul(a, b), axis=0), matmul(a, b))), [a, b]),
        "reshape": (_probe(lambda x: reshape(reshape(x, (12, 2)), (3, 4, 2)), w), [x]),
        "transpose": (lambda x: sum_all(mul(transpose(x, (2, 0, 1)), transpose(w, (2, 0, 1)))), [x]),
        "concat": (lambda x, y: sum_all(mul(concat([x, y], axis=-1), concat([w, x], axis=-1))), [x, y]),
        "split": (lambda x: sum_all(mul(split(x, 2, axis=1)[0], split(w, 2, axis=1)[1])), [x]),
        "stack": (lambda x, y: sum_all(mul(stack([x, y]), stack([w, w]))), [x, y]),
        "mean_over_axis": (lambda x: sum_all(mul(mean_over_axis(mul(x, x), -1), col)), [x]),
        "mean_all": (lambda x: mean_all(mul(x, x)), [x]),
    }


def _layers(rng):
    x = _t(rng, 4, 4, 8)
    targets = {}
    for name, spec in {
        "conv1x1": ConvSpec(8, 5, 1),
        "conv3x3": ConvSpec(8, 3, 3, padding=1),
        "conv4x4_stride2": ConvSpec(8, 6, 4, stride=2, padding=1),
        "depthwise9x9": ConvSpec(8, 8, 9, padding=4, groups=8),
    }.items():
        w = _t(rng, *spec.output_size(4, 4), spec.out_channels)
        targets[name] = (
            lambda x, k, b, spec=spec, w=w: sum_all(mul(conv2d(x, spec, k, b), w)),
            [x, _t(rng, *spec.weight_shape), _t(rng, spec.out_channels)],
        )
    wd = _t(rng, 8, 8, 3)
    targets["deconv2x2"] = (
        lambda x, k, b: sum_all(mul(conv_transpose2d(x, k, b), wd)),
        [x, _t(rng, 2, 2, 3, 8), _t(rng, 3)],
    )
    w8 = _t(rng, 4, 4, 8)
    targets["layer_norm"] = (
        lambda x, g, b: sum_all(mul(layer_norm(x, LayerNormParams(g, b)), w8)),
        [x, _t(rng, 8), _t(rng, 8)],
    )
    targets["gelu"] = (_probe(gelu, w8), [x])
    targets["ffn"] = (
        lambda x, e, p: sum_all(mul(ffn(x, FFNParams(e, p)), w8)),
        [x, _t(rng, 1, 1, 8, 32, low=-0.35, high=0.35), _t(rng, 1, 1, 32, 8, low=-0.18, high=0.18)],
    )
    return targets


def _attention_inputs(params):
    tensors = params.wq + params.wk + params.wv + params.alpha + [params.proj, params.pos_dw1, params.pos_dw2]
    return [Tensor(t.data, dtype=np.float64) for t in tensors]


def _rebuild(params, flat):
    k = params.heads
    wq, wk, wv, alpha = flat[:k], flat[k : 2 * k], flat[2 * k : 3 * k], flat[3 * k : 4 * k]
    proj, dw1, dw2 = flat[4 * k :]
    return replace(params, wq=wq, wk=wk, wv=wv, alpha=alpha, proj=proj, pos_dw1=dw1, pos_dw2=dw2)


def _blocks(rng):
    targets = {}
    for k in (1, 2):
        template = random_attention_params(8, k, seed=int(rng.integers(1 << 30)))
        x, f, w = _t(rng, 4, 4, 8), _t(rng, 4, 4, 8), _t(rng, 4, 4, 8)
        targets[f"ig_msa_k{k}"] = (
            lambda x, f, *p, t=template, w=w: sum_all(mul(ig_msa(x, f, _rebuild(t, list(p))), w)),
            [x, f, *_attention_inputs(template)],
        )

    template = random_attention_params(8, 2, seed=int(rng.integers(1 << 30)))
    x, f = _t(rng, 4, 4, 8), _t(rng, 4, 4, 8)
    n_attn = len(_attention_inputs(template))

    def igab_out(x, f, g1, b1, g2, b2, e, p, *attn):
        params = IGABParams(
            LayerNormParams(g1, b1), _rebuild(template, list(attn[:n_attn])), LayerNormParams(g2, b2), FFNParams(e, p)
        )
        return igab(x, f, params)

    igab_inputs = [
        x, f,
        _t(rng, 8, low=0.5, high=1.5), _t(rng, 8), _t(rng, 8, low=0.5, high=1.5), _t(rng, 8),
        _t(rng, 1, 1, 8, 32, low=-0.35, high=0.35), _t(rng, 1, 1, 32, 8, low=-0.18, high=0.18),
        *_attention_inputs(template),
    ]
    target = _kink_free_target(igab_out(*igab_inputs), rng)
    targets["igab_mae"] = (lambda *a: _mae(igab_out(*a), target), igab_inputs)

    with precision("float64"):
        store = init_parameters(ModelConfig(base_channels=4), seed=int(rng.integers(1 << 30)))
    image = _t(rng, 8, 8, 3, low=0.0, high=1.0)
    ref = _t(rng, 8, 8, 3, low=0.0, high=1.0)
    est_names = [n for n in store if n.startswith("estimator.")]

    def estimator_loss(image, *est):
        params = dict(zip(est_names, est))
        return _mae(estimate_illumination(image, illumination_prior(image), params).lit_image, ref)

    targets["estimator_mae"] = (estimator_loss, [image] + [store[n] for n in est_names])

    flu = _t(rng, 8, 8, 4)
    w2 = _t(rng, 2, 2, 16)
    targets["downscale_flu_level2"] = (
        lambda f, a, b: sum_all(mul(downscale_flu(f, {"igt.flu_down0.weight": a, "igt.flu_down1.weight": b}, 2), w2)),
        [flu, store["igt.flu_down0.weight"], store["igt.flu_down1.weight"]],
    )
    return targets


def network_store(seed=0, config=None):
    """Float64 store for the full-network check, with the last conv randomized.

    The zero-initialized output conv blocks every gradient upstream of it, so
    the check replaces it with random weights to exercise the whole graph.
    """
    config = config or ModelConfig(base_channels=4)
    rng = np.random.default_rng(seed + 1)
    with precision("float64"):
        store = init_parameters(config, seed=seed)
    out = store["igt.out.weight"]
    store["igt.out.weight"] = Tensor(rng.uniform(-0.2, 0.2, size=out.shape), requires_grad=True, dtype=np.float64)
    return store


def _network(rng, samples=NETWORK_SAMPLES):
    store = network_store(int(rng.integers(1 << 30)))
    names = list(store)
    image = _t(rng, 8, 8, 3, low=0.05, high=0.95)
    ref = _t(rng, 8, 8, 3, low=0.0, high=1.0)

    def loss(image, *tensors):
        params = type(store)(zip(names, tensors), config=store.config)
        return _mae(orf_forward(image, params).enhanced, ref)

    return {"orf_network_mae": (loss, [image] + [store[n] for n in names], samples)}


_BUILDERS = {"ops": _ops, "layers": _layers, "blocks": _blocks, "network": _network}


def run_grad_checks(scope: str, seed: int = 0, samples: int | None = None):
    """Evaluate every target in ``scope``; returns :class:`GradCheckRow` s."""
    if scope not in SCOPES:
        raise UsageError(f"unknown grad-check scope {scope!r}; expected one of {SCOPES}")
    rng = np.random.default_rng(seed)
    rows = []
    with precision("float64"):
        targets = _BUILDERS[scope](rng)
        for name, spec in targets.items():
            f, inputs = spec[0], spec[1]
            n = samples if samples is not None else (spec[2] if len(spec) > 2 else None)
            err = finite_diff_check(f, inputs, samples=n, seed=seed)
            rows.append(GradCheckRow(scope, name, err, THRESHOLDS[scope]))
    return rows
