"""Illumination-guided multi-head self-attention (IG-MSA) and the IGAB block.

Tokens are single-channel feature maps: each head attends over its ``d_k``
channels, so the attention matrix is ``d_k x d_k`` and the cost grows
linearly with the number of pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import ConvSpec, FFNParams, LayerNormParams, conv2d, ffn, gelu, layer_norm
from .tensor import (
    Tensor,
    add,
    count_matmul_flops,
    div,
    floor_magnitude,
    l2_normalize,
    matmul,
    mul,
    reshape,
    softmax,
    stack,
    transpose,
)

ALPHA_FLOOR = 1e-3
ATTENTION_TAG = "attention"


@dataclass
class AttentionParams:
    """Per-head ``d_k x d_k`` projections, per-head scale, output projection.

    The positional term is either the resolution-free depthwise path
    (``pos_dw1``/``pos_dw2``) or a fixed ``HW x C`` table (``pos_table``).
    With ``normalize_qk`` each query/key channel is scaled to unit L2 norm
    over the pixels before the product, so logits are cosine similarities;
    without it the raw ``K^T Q`` grows with the pixel count and saturates the
    softmax.
    """

    wq: list
    wk: list
    wv: list
    alpha: list
    proj: Tensor
    pos_dw1: Tensor | None = None
    pos_dw2: Tensor | None = None
    pos_table: Tensor | None = None
    normalize_qk: bool = True

    @property
    def heads(self):
        return len(self.wq)

    @property
    def channels(self):
        return self.proj.shape[0]

    @classmethod
    def from_store(cls, store, prefix, normalize_qk=True):
        heads = 0
        while f"{prefix}.wq.head{heads}" in store:
            heads += 1
        if heads == 0:
            raise ConfigError(f"no attention heads found under {prefix!r}")

        def per_head(kind):
            return [store[f"{prefix}.{kind}.head{i}"] for i in range(heads)]

        return cls(
            wq=per_head("wq"),
            wk=per_head("wk"),
            wv=per_head("wv"),
            alpha=per_head("alpha"),
            proj=store[f"{prefix}.proj.weight"],
            pos_dw1=store.get(f"{prefix}.pos.dw1.weight"),
            pos_dw2=store.get(f"{prefix}.pos.dw2.weight"),
            pos_table=store.get(f"{prefix}.pos.table"),
            normalize_qk=normalize_qk,
        )


def _tokens_by_head(t, heads):
    # (n, h, w, c) -> (n, k, HW, d_k); head i owns channels [i*d_k, (i+1)*d_k)
    n, h, w, c = t.shape
    return transpose(reshape(t, (n, h * w, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t, shape):
    n, h, w, c = shape
    return reshape(transpose(t, (0, 2, 1, 3)), (n, h * w, c))


def _validate(x, f_lu, params):
    if x.ndim != 4:
        raise ShapeError(f"expected N x H x W x C features, got {x.shape}")
    c = x.shape[-1]
    if c % params.heads:
        raise ConfigError(f"{c} channels cannot be split into {params.heads} heads")
    if params.channels != c:
        raise ConfigError(f"attention weights sized for {params.channels} channels, input has {c}")
    if f_lu.shape != x.shape:
        raise ShapeError(f"illumination feature {f_lu.shape} does not match input {x.shape}")


def _batched(t):
    return (reshape(t, (1,) + t.shape), True) if t.ndim == 3 else (t, False)


def _attend(x, f_lu, params):
    """Per-head gated attention; returns (heads merged to N x HW x C, V tokens)."""
    k = params.heads
    xs = _tokens_by_head(x, k)
    ys = _tokens_by_head(f_lu, k)
    # x_i W^T for each head: stacked weights are (k, d, d), transposed per head
    q = matmul(xs, transpose(stack(params.wq), (0, 2, 1)))
    key = matmul(xs, transpose(stack(params.wk), (0, 2, 1)))
    v = matmul(xs, transpose(stack(params.wv), (0, 2, 1)))
    if params.normalize_qk:
        q, key = l2_normalize(q, axis=-2), l2_normalize(key, axis=-2)
    logits = matmul(transpose(key, (0, 1, 3, 2)), q, tag=ATTENTION_TAG)  # (n, k, d, d)
    alpha = floor_magnitude(reshape(stack(params.alpha), (1, k, 1, 1)), ALPHA_FLOOR)
    # normalize over the key-channel index: column j of the map is a convex
    # combination weight vector over value channels
    attn = softmax(div(logits, alpha), axis=-2)
    out = matmul(mul(ys, v), attn, tag=ATTENTION_TAG)  # (n, k, HW, d)
    return _merge_heads(out, x.shape), v


def attention_heads(x, f_lu, params):
    """Concatenated head outputs before the output projection (N x HW x C)."""
    xb, _ = _batched(x)
    fb, _ = _batched(f_lu)
    _validate(xb, fb, params)
    return _attend(xb, fb, params)[0]


def _positional(v, shape, params):
    n, h, w, c = shape
    if params.pos_table is not None:
        if params.pos_table.shape != (h * w, c):
            raise ShapeError(
                f"fixed positional table {params.pos_table.shape} needs input of {h * w} pixels x {c}"
            )
        return reshape(params.pos_table, (1, h * w, c))
    spec = ConvSpec(c, c, 3, padding=1, groups=c, bias=False)
    v_img = reshape(_merge_heads(v, shape), shape)
    p = conv2d(gelu(conv2d(v_img, spec, params.pos_dw1)), spec, params.pos_dw2)
    return reshape(p, (n, h * w, c))


def ig_msa(x: Tensor, f_lu: Tensor, params: AttentionParams) -> Tensor:
    """IG-MSA on ``H x W x C`` (or batched) features guided by ``f_lu``."""
    xb, squeezed = _batched(x)
    fb, _ = _batched(f_lu)
    _validate(xb, fb, params)
    heads, v = _attend(xb, fb, params)
    out = matmul(heads, transpose(params.proj, (1, 0)))
    out = add(out, _positional(v, xb.shape, params))
    out = reshape(out, xb.shape)
    return reshape(out, x.shape) if squeezed else out


@dataclass
class IGABParams:
    norm1: LayerNormParams
    attn: AttentionParams
    norm2: LayerNormParams
    ffn: FFNParams

    @classmethod
    def from_store(cls, store, prefix, normalize_qk=True):
        return cls(
            norm1=LayerNormParams(store[f"{prefix}.norm1.gamma"], store[f"{prefix}.norm1.beta"]),
            attn=AttentionParams.from_store(store, f"{prefix}.attn", normalize_qk),
            norm2=LayerNormParams(store[f"{prefix}.norm2.gamma"], store[f"{prefix}.norm2.beta"]),
            ffn=FFNParams(store[f"{prefix}.ffn.expand.weight"], store[f"{prefix}.ffn.project.weight"]),
        )


def igab(x: Tensor, f_lu: Tensor, params: IGABParams) -> Tensor:
    """Pre-norm residual block: attention sub-layer, then feed-forward sub-layer."""
    x = add(x, ig_msa(layer_norm(x, params.norm1), f_lu, params.attn))
    return add(x, ffn(layer_norm(x, params.norm2), params.ffn))


# --------------------------------------------------------------------------
# Complexity models


def flops_ig_msa(h: int, w: int, c: int, k: int) -> int:
    """Multiply-adds of the two attention matmuls over all heads: 2HWC^2/k."""
    if k < 1 or c % k:
        raise ConfigError(f"{c} channels cannot be split into {k} heads")
    d = c // k
    return k * (d * (d * h * w) + h * w * (d * d))


def flops_g_msa(h: int, w: int, c: int) -> int:
    """Global (pixel-token) self-attention cost: 2(HW)^2 C."""
    return 2 * (h * w) ** 2 * c


def random_attention_params(c, k, seed=0, pos="conv", hw=None, normalize_qk=True):
    """Fan-in-scaled random parameters, mainly for tests and instrumentation."""
    if k < 1 or c % k:
        raise ConfigError(f"{c} channels cannot be split into {k} heads")
    rng = np.random.default_rng(seed)
    d = c // k

    def u(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape))

    params = AttentionParams(
        wq=[u((d, d), d) for _ in range(k)],
        wk=[u((d, d), d) for _ in range(k)],
        wv=[u((d, d), d) for _ in range(k)],
        alpha=[Tensor(np.ones(1)) for _ in range(k)],
        proj=u((c, c), c),
        normalize_qk=normalize_qk,
    )
    if pos == "conv":
        params.pos_dw1 = u((3, 3, 1, c), 9)
        params.pos_dw2 = u((3, 3, 1, c), 9)
    else:
        params.pos_table = Tensor(np.zeros((hw, c)))
    return params


def measured_matmul_flops(h: int, w: int, c: int, k: int, seed: int = 0) -> int:
    """Run IG-MSA once with the matmul counter on; count attention multiply-adds.

    Projection and positional-encoding work is outside the count by
    construction: only matmuls tagged as attention are tallied.
    """
    rng = np.random.default_rng(seed)
    params = random_attention_params(c, k, seed)
    x = Tensor(rng.normal(size=(h, w, c)))
    f = Tensor(rng.normal(size=(h, w, c)))
    with count_matmul_flops(ATTENTION_TAG) as counter:
        ig_msa(x, f, params)
    return counter.count


FLOP_COLUMNS = ("H", "W", "C", "k", "formula_igmsa", "measured", "formula_gmsa", "ratio")


def flop_report(grid):
    """Rows comparing the IG-MSA formula, the instrumented count and G-MSA."""
    rows = []
    for h, w, c, k in grid:
        formula = flops_ig_msa(h, w, c, k)
        global_cost = flops_g_msa(h, w, c)
        rows.append(
            {
                "H": h,
                "W": w,
                "C": c,
                "k": k,
                "formula_igmsa": formula,
                "measured": measured_matmul_flops(h, w, c, k),
                "formula_gmsa": global_cost,
                "ratio": global_cost / formula,
            }
        )
    return rows
