"""Three-scale U-shaped illumination-guided transformer and its parameters."""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import IGABParams, igab
from .errors import ConfigError, FormatError, ShapeError
from .layers import FFN_EXPANSION, ConvSpec, conv2d, conv_transpose2d
from .tensor import Tensor, concat, default_dtype, reshape

ESTIMATOR_KERNEL = 9
LEVELS = 3
STAGES = ("enc0", "enc1", "bottleneck", "dec1", "dec0")
STAGE_LEVEL = {"enc0": 0, "enc1": 1, "bottleneck": 2, "dec1": 1, "dec0": 0}


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    heads_per_scale: tuple = (1, 2, 4)
    # IGABs at level 0, level 1 and the bottleneck; the decoder mirrors the encoder
    igab_per_stage: tuple = (1, 2, 2)
    crop_size: int = 64
    pos_encoding: str = "conv"  # "conv" or "fixed" (HW x C table bound to crop_size)
    qk_norm: bool = True  # unit-norm query/key channels before the attention product

    def __post_init__(self):
        object.__setattr__(self, "heads_per_scale", tuple(self.heads_per_scale))
        object.__setattr__(self, "igab_per_stage", tuple(self.igab_per_stage))
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if len(self.heads_per_scale) != LEVELS or len(self.igab_per_stage) != LEVELS:
            raise ConfigError("heads_per_scale and igab_per_stage need one entry per scale (3)")
        for level, k in enumerate(self.heads_per_scale):
            if k < 1 or self.channels(level) % k:
                raise ConfigError(
                    f"level {level}: {self.channels(level)} channels not divisible by {k} heads"
                )
        if any(n < 0 for n in self.igab_per_stage):
            raise ConfigError("igab_per_stage entries must be non-negative")
        if self.crop_size % 4 or self.crop_size < 4:
            raise ConfigError(f"crop_size {self.crop_size} must be a positive multiple of 4")
        if self.pos_encoding not in ("conv", "fixed"):
            raise ConfigError(f"pos_encoding must be 'conv' or 'fixed', got {self.pos_encoding!r}")

    def channels(self, level):
        return self.base_channels * 2**level

    def blocks(self, stage):
        level = STAGE_LEVEL[stage]
        return self.igab_per_stage[level]


class ParameterStore(dict):
    """Insertion-ordered ``name -> Tensor`` map; ``config`` rides along."""

    def __init__(self, *args, config=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.config = config

    def num_parameters(self):
        return sum(t.size for t in self.values())

    def subset(self, prefix):
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    def copy(self):
        return ParameterStore(
            {k: Tensor(v.data, requires_grad=v.requires_grad, name=k, dtype=v.dtype) for k, v in self.items()},
            config=self.config,
        )


# --------------------------------------------------------------------------
# Parameter layout / initialization


def _igab_layout(prefix, c, k, config):
    d = c // k
    entries = [
        (f"{prefix}.norm1.gamma", (c,), "one", None),
        (f"{prefix}.norm1.beta", (c,), "zero", None),
    ]
    for kind in ("wq", "wk", "wv"):
        entries += [(f"{prefix}.attn.{kind}.head{i}", (d, d), "uniform", d) for i in range(k)]
    entries += [(f"{prefix}.attn.alpha.head{i}", (1,), "one", None) for i in range(k)]
    entries.append((f"{prefix}.attn.proj.weight", (c, c), "uniform", c))
    if config.pos_encoding == "conv":
        entries += [
            (f"{prefix}.attn.pos.dw1.weight", (3, 3, 1, c), "uniform", 9),
            (f"{prefix}.attn.pos.dw2.weight", (3, 3, 1, c), "uniform", 9),
        ]
    else:
        level = int(math.log2(c // config.base_channels))
        side = config.crop_size // 2**level
        entries.append((f"{prefix}.attn.pos.table", (side * side, c), "zero", None))
    hidden = FFN_EXPANSION * c
    entries += [
        (f"{prefix}.norm2.gamma", (c,), "one", None),
        (f"{prefix}.norm2.beta", (c,), "zero", None),
        (f"{prefix}.ffn.expand.weight", (1, 1, c, hidden), "uniform", c),
        (f"{prefix}.ffn.project.weight", (1, 1, hidden, c), "uniform", hidden),
    ]
    return entries


def parameter_layout(config: ModelConfig):
    """Ordered ``(name, shape, init, fan_in)`` rows for every trainable tensor."""
    c = config.base_channels
    k9 = ESTIMATOR_KERNEL
    rows = [
        ("estimator.fuse.weight", (1, 1, 4, c), "uniform", 4),
        ("estimator.fuse.bias", (c,), "zero", None),
        ("estimator.depthwise.weight", (k9, k9, 1, c), "uniform", k9 * k9),
        ("estimator.depthwise.bias", (c,), "zero", None),
        ("estimator.out.weight", (1, 1, c, 3), "uniform", c),
        # starts the light-up map near 1, i.e. near the identity light-up
        ("estimator.out.bias", (3,), "one", None),
        ("igt.flu_down0.weight", (4, 4, c, 2 * c), "uniform", 16 * c),
        ("igt.flu_down1.weight", (4, 4, 2 * c, 4 * c), "uniform", 32 * c),
        ("igt.embed.weight", (3, 3, 3, c), "uniform", 27),
    ]

    def stage(name):
        level = STAGE_LEVEL[name]
        ch, k = config.channels(level), config.heads_per_scale[level]
        out = []
        for b in range(config.blocks(name)):
            out += _igab_layout(f"igt.{name}.igab{b}", ch, k, config)
        return out

    rows += stage("enc0")
    rows.append(("igt.down0.weight", (4, 4, c, 2 * c), "uniform", 16 * c))
    rows += stage("enc1")
    rows.append(("igt.down1.weight", (4, 4, 2 * c, 4 * c), "uniform", 32 * c))
    rows += stage("bottleneck")
    rows.append(("igt.up1.weight", (2, 2, 2 * c, 4 * c), "uniform", 4 * c))
    rows.append(("igt.fuse1.weight", (1, 1, 4 * c, 2 * c), "uniform", 4 * c))
    rows += stage("dec1")
    rows.append(("igt.up0.weight", (2, 2, c, 2 * c), "uniform", 2 * c))
    rows.append(("igt.fuse0.weight", (1, 1, 2 * c, c), "uniform", 2 * c))
    rows += stage("dec0")
    rows.append(("igt.out.weight", (3, 3, c, 3), "zero", None))
    return rows


def init_parameters(config: ModelConfig, seed: int = 0, dtype=None) -> ParameterStore:
    """Deterministic fan-in uniform init; the restorer's last conv starts at zero."""
    rng = np.random.default_rng(seed)
    dtype = dtype or default_dtype()
    store = ParameterStore(config=config)
    for name, shape, kind, fan_in in parameter_layout(config):
        if kind == "uniform":
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        store[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)
    return store


def estimator_parameter_count(c: int) -> int:
    k = ESTIMATOR_KERNEL
    return (4 * c + c) + (k * k * c + c) + (3 * c + 3)


def _igab_count(c, k, pos_size):
    d = c // k
    attn = 3 * k * d * d + k + c * c + pos_size
    return 4 * c + attn + 2 * FFN_EXPANSION * c * c


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter total (independent of :func:`parameter_layout`)."""
    c = config.base_channels
    total = estimator_parameter_count(c)
    total += 16 * c * 2 * c + 16 * 2 * c * 4 * c  # F_lu downscaling convs
    total += 27 * c  # embedding conv3x3
    total += 16 * c * 2 * c + 16 * 2 * c * 4 * c  # strided downsampling convs
    total += 4 * 4 * c * 2 * c + 4 * 2 * c * c  # deconvs
    total += 4 * c * 2 * c + 2 * c * c  # skip fusion conv1x1s
    total += 9 * c * 3  # output conv3x3
    for level in range(LEVELS):
        ch, k = config.channels(level), config.heads_per_scale[level]
        if config.pos_encoding == "conv":
            pos = 18 * ch
        else:
            pos = (config.crop_size // 2**level) ** 2 * ch
        n_blocks = config.igab_per_stage[level] * (1 if level == LEVELS - 1 else 2)
        total += n_blocks * _igab_count(ch, k, pos)
    return total


# --------------------------------------------------------------------------
# Forward


def flu_pyramid(f_lu: Tensor, params: ParameterStore):
    """Illumination features at every scale; level l+1 = strided conv of level l."""
    c = f_lu.shape[-1]
    levels = [f_lu]
    for level in range(1, LEVELS):
        ch = c * 2 ** (level - 1)
        spec = ConvSpec(ch, 2 * ch, 4, stride=2, padding=1, bias=False)
        levels.append(conv2d(levels[-1], spec, params[f"igt.flu_down{level - 1}.weight"]))
    return levels


def downscale_flu(f_lu: Tensor, params: ParameterStore, level: int) -> Tensor:
    if level not in range(LEVELS):
        raise ConfigError(f"level must be 0, 1 or 2, got {level}")
    return flu_pyramid(f_lu, params)[level] if level else f_lu


def check_divisible(h, w):
    if h % 4 or w % 4:
        raise ShapeError(f"spatial size {h}x{w} must be divisible by 4 for the three-scale U-shape")


def _run_stage(x, guide, params, config, stage):
    for b in range(config.blocks(stage)):
        x = igab(x, guide, IGABParams.from_store(params, f"igt.{stage}.igab{b}", config.qk_norm))
    return x


def igt_forward(i_lu: Tensor, f_lu: Tensor | None, params: ParameterStore, config=None,
                return_residual=False):
    """Restorer: ``I_en = I_lu + I_re``.

    ``f_lu=None`` runs the attention blocks without illumination guidance
    (an all-ones guide at every scale).
    """
    config = config or params.config
    squeezed = i_lu.ndim == 3
    x = reshape(i_lu, (1,) + i_lu.shape) if squeezed else i_lu
    n, h, w, _ = x.shape
    check_divisible(h, w)
    c = config.base_channels
    if f_lu is None:
        guides = [Tensor(np.ones((n, h >> l, w >> l, c << l)), dtype=x.dtype) for l in range(LEVELS)]
    else:
        if f_lu.ndim == 3:
            f_lu = reshape(f_lu, (1,) + f_lu.shape)
        guides = flu_pyramid(f_lu, params)

    f0 = conv2d(x, ConvSpec(3, c, 3, padding=1, bias=False), params["igt.embed.weight"])
    f0 = _run_stage(f0, guides[0], params, config, "enc0")
    f1 = conv2d(f0, ConvSpec(c, 2 * c, 4, 2, 1, bias=False), params["igt.down0.weight"])
    f1 = _run_stage(f1, guides[1], params, config, "enc1")
    f2 = conv2d(f1, ConvSpec(2 * c, 4 * c, 4, 2, 1, bias=False), params["igt.down1.weight"])
    f2 = _run_stage(f2, guides[2], params, config, "bottleneck")

    u1 = conv_transpose2d(f2, params["igt.up1.weight"])
    u1 = conv2d(concat([u1, f1], axis=-1), ConvSpec(4 * c, 2 * c, 1, bias=False), params["igt.fuse1.weight"])
    u1 = _run_stage(u1, guides[1], params, config, "dec1")
    u0 = conv_transpose2d(u1, params["igt.up0.weight"])
    u0 = conv2d(concat([u0, f0], axis=-1), ConvSpec(2 * c, c, 1, bias=False), params["igt.fuse0.weight"])
    u0 = _run_stage(u0, guides[0], params, config, "dec0")
    i_re = conv2d(u0, ConvSpec(c, 3, 3, padding=1, bias=False), params["igt.out.weight"])

    i_en = x + i_re
    if squeezed:
        i_en, i_re = reshape(i_en, i_lu.shape), reshape(i_re, i_lu.shape)
    return (i_en, i_re) if return_residual else i_en


# --------------------------------------------------------------------------
# Weight file: "RXFW", u32 version, u32 count, then per tensor
# u16 name length, UTF-8 name, u8 rank, u32 dims, little-endian float32 data.

MAGIC = b"RXFW"
FORMAT_VERSION = 1


def save_weights(store: ParameterStore, path):
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> ParameterStore:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n, field):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"weight file truncated while reading {field}", offset=pos, field=field)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected RXFW", offset=0, field="magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4, field="version")
    store = ParameterStore()
    for _ in range(count):
        (length,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(length, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=pos - length, field="name") from None
        (rank,) = struct.unpack("<B", take(1, f"{name}.rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name}.dims"))
        n = math.prod(dims)
        data = np.frombuffer(take(4 * n, f"{name}.data"), dtype="<f4").reshape(dims)
        store[name] = Tensor(data, requires_grad=True, name=name, dtype=np.float32)
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor", offset=pos, field="trailer")
    store.config = config_from_store(store)
    return store


def config_from_store(store) -> ModelConfig:
    """Recover the architecture from parameter names and shapes."""
    try:
        c = store["estimator.fuse.weight"].shape[3]
    except KeyError:
        raise FormatError("missing tensor estimator.fuse.weight", field="estimator.fuse.weight") from None
    heads = []
    blocks = []
    for stage in ("enc0", "enc1", "bottleneck"):
        n = 0
        while f"igt.{stage}.igab{n}.norm1.gamma" in store:
            n += 1
        blocks.append(n)
        k = 0
        while f"igt.{stage}.igab0.attn.wq.head{k}" in store:
            k += 1
        heads.append(k or 1)
    table = next((v for k, v in store.items() if re.search(r"attn\.pos\.table$", k)), None)
    if table is None:
        config = ModelConfig(c, tuple(heads), tuple(blocks))
    else:
        side = int(round(math.sqrt(store["igt.enc0.igab0.attn.pos.table"].shape[0])))
        config = ModelConfig(c, tuple(heads), tuple(blocks), crop_size=side, pos_encoding="fixed")
    expected = {name: shape for name, shape, _, _ in parameter_layout(config)}
    for name, shape in expected.items():
        if name not in store:
            raise FormatError(f"missing tensor {name}", field=name)
        if store[name].shape != shape:
            raise FormatError(f"tensor {name} has shape {store[name].shape}, expected {shape}", field=name)
    extra = set(store) - set(expected)
    if extra:
        raise FormatError(f"unexpected tensors {sorted(extra)[:3]}", field=sorted(extra)[0])
    return config
