"""Vision Transformer with separate CLS-token and patch-token weight paths.

Each sub-layer of a block is held as a :class:`PathPair`. Rows routed to the
CLS path (the CLS token, plus registers when ``register_routing`` is
``"with_cls"``) go through the CLS weights; every other row goes through the
patch weights. Attention itself still mixes all tokens.

Shared layers also process the two row groups separately. numpy's matmul is
not row-consistent across shapes, so this is what makes a copy-initialised
specialised model bitwise identical to its shared counterpart.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor
from .trace import PROBE_POINTS, ROUTINGS, ProbeTrace, TokenPartition

KINDS = ("pre_attn_ln", "qkv", "attn_out", "post_attn_ls", "pre_mlp_ln", "mlp", "post_mlp_ls")
NORM_KINDS = ("pre_attn_ln", "post_attn_ls", "pre_mlp_ln", "post_mlp_ls")
LN_EPS = 1e-6


class ConfigError(ValueError):
    """Invalid model or specialisation configuration."""


# ------------------------------------------------------------------- configs


@dataclass
class SpecConfig:
    """Which layer kinds get a CLS path, over which blocks.

    ``ranges`` maps a kind to a half-open block interval ``(lo, hi)``.
    ``lora_rank`` maps a specialised kind to a rank; that kind's CLS path
    becomes the patch layer plus a low-rank correction.
    ``final_norm`` forces the output LayerNorm on or off; ``None`` means it
    follows the LayerNorm kinds in the last block.
    """

    ranges: dict[str, tuple[int, int]] = field(default_factory=dict)
    lora_rank: dict[str, int] = field(default_factory=dict)
    register_routing: str = "with_cls"
    final_norm: bool | None = None

    def __post_init__(self):
        self.ranges = {k: (int(v[0]), int(v[1])) for k, v in self.ranges.items()}
        self.lora_rank = {k: int(v) for k, v in self.lora_rank.items()}
        for kind in list(self.ranges) + list(self.lora_rank):
            if kind not in KINDS:
                raise ConfigError(f"unknown layer kind {kind!r}; expected one of {KINDS}")
        for kind in self.lora_rank:
            if kind not in self.ranges:
                raise ConfigError(f"lora_rank given for {kind!r} which is not specialised")
        if self.register_routing not in ROUTINGS:
            raise ConfigError(f"register_routing must be one of {ROUTINGS}")

    @classmethod
    def norms(cls, depth: int, **kw) -> SpecConfig:
        return cls(ranges={k: (0, depth) for k in NORM_KINDS}, **kw)

    @classmethod
    def best(cls, depth: int, **kw) -> SpecConfig:
        """Norms in every block plus QKV over the first third (rounded up)."""
        ranges = {k: (0, depth) for k in NORM_KINDS}
        ranges["qkv"] = (0, math.ceil(depth / 3))
        return cls(ranges=ranges, **kw)

    def covers(self, kind: str, block: int) -> bool:
        lo, hi = self.ranges.get(kind, (0, 0))
        return lo <= block < hi

    def final_norm_specialized(self, depth: int) -> bool:
        if self.final_norm is not None:
            return self.final_norm
        return self.covers("pre_attn_ln", depth - 1) or self.covers("pre_mlp_ln", depth - 1)

    def validate(self, depth: int, embed_dim: int) -> None:
        for kind, (lo, hi) in self.ranges.items():
            if not 0 <= lo <= hi <= depth:
                raise ConfigError(f"block range [{lo}, {hi}) for {kind!r} outside [0, {depth}]")
        for kind, r in self.lora_rank.items():
            if not 1 <= r < embed_dim:
                raise ConfigError(f"lora rank {r} for {kind!r} must satisfy 1 <= r < {embed_dim}")

    @property
    def empty(self) -> bool:
        return not any(hi > lo for lo, hi in self.ranges.values()) and not self.final_norm


@dataclass
class ModelConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0
    num_registers: int = 0
    attn_bias: bool = False
    spec: SpecConfig = field(default_factory=SpecConfig)
    num_classes: int = 4
    in_chans: int = 3
    layerscale_init: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.spec, dict):
            self.spec = SpecConfig(**self.spec)
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if min(self.image_size, self.patch_size, self.embed_dim, self.heads, self.in_chans) < 1:
            raise ConfigError("sizes must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_registers < 0:
            raise ConfigError("num_registers must be >= 0")
        self.spec.validate(self.depth, self.embed_dim)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_registers + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def partition(self, n_tokens: int | None = None) -> TokenPartition:
        return TokenPartition(
            self.num_tokens if n_tokens is None else n_tokens,
            self.num_registers,
            self.spec.register_routing,
        )

    def baseline(self) -> ModelConfig:
        """Same architecture with nothing specialised."""
        return replace(self, spec=SpecConfig(register_routing=self.spec.register_routing))

    def layer_io(self, kind: str) -> tuple[int, int]:
        d = self.embed_dim
        return (d, 3 * d) if kind == "qkv" else (d, d)


def vit_large(**kw) -> ModelConfig:
    """ViT-L/14 at 518 px."""
    base = dict(image_size=518, patch_size=14, embed_dim=1024, depth=24, heads=16, in_chans=3)
    base.update(kw)
    return ModelConfig(**base)


# -------------------------------------------------------------------- layers


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight
        yield "bias", self.bias


class LayerNorm:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)

    def named_params(self):
        yield "weight", self.weight
        yield "bias", self.bias


class LayerScale:
    def __init__(self, scale: Tensor):
        self.scale = scale

    def __call__(self, x: Tensor) -> Tensor:
        return layer_scale(x, self.scale)

    def named_params(self):
        yield "scale", self.scale


class MLP:
    def __init__(self, fc1: Linear, fc2: Linear):
        self.fc1 = fc1
        self.fc2 = fc2

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def named_params(self):
        for name, p in self.fc1.named_params():
            yield f"fc1.{name}", p
        for name, p in self.fc2.named_params():
            yield f"fc2.{name}", p


def layer_norm(x: Tensor, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise each row over the feature axis, then apply ``gamma``/``beta``."""
    mu = T.reduce("mean", x, -1, keepdims=True)
    var = T.reduce("var", x, -1, keepdims=True)
    return (x - mu) / T.sqrt(var + eps) * gamma + beta


def layer_scale(x: Tensor, lam) -> Tensor:
    return x * lam


def _clone(layer):
    """Deep copy of a layer with fresh leaf tensors holding equal values."""
    if isinstance(layer, Linear):
        return Linear(_leaf(layer.weight.data), _leaf(layer.bias.data))
    if isinstance(layer, LayerNorm):
        return LayerNorm(_leaf(layer.weight.data), _leaf(layer.bias.data))
    if isinstance(layer, LayerScale):
        return LayerScale(_leaf(layer.scale.data))
    if isinstance(layer, MLP):
        return MLP(_clone(layer.fc1), _clone(layer.fc2))
    raise TypeError(type(layer))


def _leaf(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


class PathPair:
    """A layer with optional CLS-path weights.

    ``cls`` holds a full second layer of identical shape; alternatively
    ``lora_a`` (d_in x r) and ``lora_b`` (r x d_out) hold a low-rank
    correction added to the patch layer's output on CLS-route rows.
    """

    def __init__(self, patch, cls=None, lora_a: Tensor | None = None, lora_b: Tensor | None = None):
        if cls is not None and lora_a is not None:
            raise ValueError("a PathPair holds either full CLS weights or a LoRA delta")
        self.patch = patch
        self.cls = cls
        self.lora_a = lora_a
        self.lora_b = lora_b

    @property
    def specialized(self) -> bool:
        return self.cls is not None or self.lora_a is not None

    @property
    def is_lora(self) -> bool:
        return self.lora_a is not None

    def cls_layer(self, x: Tensor) -> Tensor:
        if self.cls is not None:
            return self.cls(x)
        out = self.patch(x)
        if self.lora_a is not None:
            out = out + (x @ self.lora_a) @ self.lora_b
        return out

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name, p in self.patch.named_params():
            yield f"{prefix}.patch.{name}", p
        if self.cls is not None:
            for name, p in self.cls.named_params():
                yield f"{prefix}.cls.{name}", p
        if self.lora_a is not None:
            yield f"{prefix}.lora_a", self.lora_a
            yield f"{prefix}.lora_b", self.lora_b


def specialized_apply(pair: PathPair, x: Tensor, partition: TokenPartition) -> Tensor:
    """Apply ``pair`` row-wise: CLS-route rows through the CLS path, the rest through patches."""
    n = x.shape[-2]
    if n != partition.n_tokens:
        raise T.ShapeError(f"{n} rows but partition expects {partition.n_tokens}")
    c = partition.n_cls_route
    head = pair.cls_layer(x[..., :c, :])
    if c == n:
        return head
    tail = pair.patch(x[..., c:, :])
    return T.concat([head, tail], axis=-2)


# --------------------------------------------------------------------- model


class Block:
    def __init__(self, layers: dict[str, PathPair], bias_k: Tensor | None = None, bias_v: Tensor | None = None):
        self.layers = layers
        self.bias_k = bias_k
        self.bias_v = bias_v

    def __getattr__(self, name):
        layers = self.__dict__.get("layers", {})
        if name in layers:
            return layers[name]
        raise AttributeError(name)

    def named_params(self, prefix: str):
        for kind in KINDS:
            yield from self.layers[kind].named_params(f"{prefix}.{kind}")
        if self.bias_k is not None:
            yield f"{prefix}.attn_bias.k", self.bias_k
            yield f"{prefix}.attn_bias.v", self.bias_v


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.transpose(axes)


def attend(q: Tensor, k: Tensor, v: Tensor, bias_k: Tensor | None = None, bias_v: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention per head; inputs are (..., heads, n, head_dim).

    Returns the mixed values and the attention weights (..., heads, n, slots).
    """
    *batch, heads, n, hd = q.shape
    if bias_k is not None:
        slot = tuple(batch) + (heads, 1, hd)
        k = T.concat([k, T.broadcast_to(bias_k.reshape(heads, 1, hd), slot)], axis=-2)
        v = T.concat([v, T.broadcast_to(bias_v.reshape(heads, 1, hd), slot)], axis=-2)
    weights = T.softmax_rows(T.scale(q @ _swap_last(k), 1.0 / math.sqrt(hd)))
    return weights @ v, weights


def attention(
    x: Tensor,
    qkv: PathPair,
    attn_out: PathPair,
    partition: TokenPartition,
    heads: int,
    bias_k: Tensor | None = None,
    bias_v: Tensor | None = None,
) -> Tensor:
    """Multi-head self-attention with routed projections.

    With ``bias_k``/``bias_v`` (shape heads x head_dim), each head gets one
    extra learned key/value slot, so the softmax runs over N + 1 entries.
    """
    *batch, n, d = x.shape
    if d % heads:
        raise T.ShapeError(f"width {d} not divisible by {heads} heads")
    hd = d // heads
    nb = len(batch)
    proj = specialized_apply(qkv, x, partition).reshape(tuple(batch) + (n, 3, heads, hd))
    # -> (3, *batch, heads, n, hd)
    proj = proj.transpose((nb + 1, *range(nb), nb + 2, nb, nb + 3))
    q, k, v = proj[0], proj[1], proj[2]
    mixed, _ = attend(q, k, v, bias_k, bias_v)
    # -> (*batch, n, heads, hd)
    mixed = mixed.transpose((*range(nb), nb + 1, nb, nb + 2)).reshape(tuple(batch) + (n, d))
    return specialized_apply(attn_out, mixed, partition)


def block_forward(x: Tensor, block: Block, partition: TokenPartition, heads: int, probe_sink=None, index: int = 0) -> Tensor:
    """Pre-norm residual block; optionally records every probe point."""

    def rec(point, value):
        if probe_sink is not None:
            probe_sink.record(index, point, value)

    rec("pre_attn_ln_in", x)
    h = specialized_apply(block.pre_attn_ln, x, partition)
    rec("pre_attn_ln_out", h)
    a = attention(h, block.qkv, block.attn_out, partition, heads, block.bias_k, block.bias_v)
    rec("attn_out", a)
    rec("post_attn_ls_in", a)
    s = specialized_apply(block.post_attn_ls, a, partition)
    rec("post_attn_ls_out", s)
    x = x + s
    rec("pre_mlp_ln_in", x)
    h = specialized_apply(block.pre_mlp_ln, x, partition)
    rec("pre_mlp_ln_out", h)
    m = specialized_apply(block.mlp, h, partition)
    rec("mlp_out", m)
    rec("post_mlp_ls_in", m)
    s = specialized_apply(block.post_mlp_ls, m, partition)
    rec("post_mlp_ls_out", s)
    x = x + s
    rec("block_out", x)
    return x


assert len(PROBE_POINTS) == 11


def _patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(..., C, H, W) -> (..., P, C*p*p), patches in row-major grid order."""
    *lead, c, h, w = images.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, c, gh, p, gw, p)
    nl = len(lead)
    x = np.transpose(x, (*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4))
    return x.reshape(*lead, gh * gw, c * p * p)


@dataclass
class ForwardResult:
    cls_out: Tensor
    patch_out: Tensor
    trace: ProbeTrace | None


class ViT:
    def __init__(self, config: ModelConfig, embed: Linear, pos_embed: Tensor, cls_token: Tensor,
                 registers: Tensor | None, blocks: list[Block], final_norm: PathPair):
        self.config = config
        self.embed = embed
        self.pos_embed = pos_embed
        self.cls_token = cls_token
        self.registers = registers
        self.blocks = blocks
        self.final_norm = final_norm

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed.weight", self.embed.weight
        yield "embed.bias", self.embed.bias
        yield "pos_embed", self.pos_embed
        yield "cls_token", self.cls_token
        if self.registers is not None:
            yield "registers", self.registers
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"block{i}")
        yield from self.final_norm.named_params("final_norm")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def __call__(self, image) -> ForwardResult:
        return model_forward(image, self)


def patch_embed(image, model: ViT) -> Tensor:
    """Tokens ``[CLS, registers, patches + pos]`` for one image or a batch."""
    cfg = model.config
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim not in (3, 4) or img.shape[-3] != cfg.in_chans:
        raise ConfigError(f"expected (…, {cfg.in_chans}, H, W) image, got {img.shape}")
    patches = Tensor(_patchify(img, cfg.patch_size))
    if patches.shape[-2] != cfg.num_patches:
        raise ConfigError(f"image gives {patches.shape[-2]} patches, model expects {cfg.num_patches}")
    tokens = model.embed(patches) + model.pos_embed
    lead = img.shape[:-3]
    d = cfg.embed_dim
    parts = [T.broadcast_to(model.cls_token.reshape(1, d), lead + (1, d))]
    if model.registers is not None:
        parts.append(T.broadcast_to(model.registers, lead + model.registers.shape))
    parts.append(tokens)
    return T.concat(parts, axis=-2)


def model_forward(image, model: ViT, trace: bool = False) -> ForwardResult:
    """Embed, run all blocks, apply the final norm, split CLS and patch outputs."""
    cfg = model.config
    part = cfg.partition()
    sink = ProbeTrace(part) if trace else None
    x = patch_embed(image, model)
    for i, block in enumerate(model.blocks):
        x = block_forward(x, block, part, cfg.heads, sink, i)
    x = specialized_apply(model.final_norm, x, part)
    return ForwardResult(x[..., 0, :], x[..., 1 + cfg.num_registers:, :], sink)


# ------------------------------------------------------------ construction


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    data = truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng) * std
    return Tensor(np.asarray(data, dtype=np.float64).reshape(shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _full(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=True)


def _make_layer(kind: str, cfg: ModelConfig, rng: np.random.Generator):
    d, std = cfg.embed_dim, cfg.init_std
    if kind in ("pre_attn_ln", "pre_mlp_ln"):
        return LayerNorm(_full(d, 1.0), _zeros(d))
    if kind in ("post_attn_ls", "post_mlp_ls"):
        return LayerScale(_full(d, cfg.layerscale_init))
    if kind == "qkv":
        return Linear(_trunc_normal(rng, (d, 3 * d), std), _zeros(3 * d))
    if kind == "attn_out":
        return Linear(_trunc_normal(rng, (d, d), std), _zeros(d))
    if kind == "mlp":
        hid = cfg.mlp_hidden
        return MLP(
            Linear(_trunc_normal(rng, (d, hid), std), _zeros(hid)),
            Linear(_trunc_normal(rng, (hid, d), std), _zeros(d)),
        )
    raise ValueError(kind)


def build_model(config: ModelConfig, seed: int = 0, cls_init: str = "independent") -> ViT:
    """Instantiate weights.

    Patch-path weights come from one random stream and CLS-path weights from
    another, so the same seed gives the same patch weights whatever the
    specialisation. ``cls_init="copy"`` makes every CLS path an exact copy
    of its patch path.
    """
    if cls_init not in ("independent", "copy"):
        raise ConfigError(f"cls_init must be 'independent' or 'copy', got {cls_init!r}")
    rng = np.random.default_rng(seed)
    rng_cls = np.random.default_rng([seed, 1])
    cfg, spec, d, std = config, config.spec, config.embed_dim, config.init_std
    patch_dim = cfg.in_chans * cfg.patch_size**2

    embed = Linear(_trunc_normal(rng, (patch_dim, d), std), _zeros(d))
    pos = _trunc_normal(rng, (cfg.num_patches, d), std)
    cls_token = _trunc_normal(rng, (d,), std)
    registers = _trunc_normal(rng, (cfg.num_registers, d), std) if cfg.num_registers else None

    def pair(kind: str, patch_layer, specialised: bool) -> PathPair:
        if not specialised:
            return PathPair(patch_layer)
        if kind in spec.lora_rank:
            r = spec.lora_rank[kind]
            d_in, d_out = cfg.layer_io(kind)
            a = Tensor(rng_cls.normal(0.0, std, size=(d_in, r)), requires_grad=True)
            return PathPair(patch_layer, lora_a=a, lora_b=_zeros((r, d_out)))
        if cls_init == "copy":
            return PathPair(patch_layer, _clone(patch_layer))
        return PathPair(patch_layer, _make_layer(kind, cfg, rng_cls))

    blocks = []
    for i in range(cfg.depth):
        layers = {}
        for kind in KINDS:
            layers[kind] = pair(kind, _make_layer(kind, cfg, rng), spec.covers(kind, i))
        bk = bv = None
        if cfg.attn_bias:
            bk = _trunc_normal(rng, (cfg.heads, cfg.head_dim), std)
            bv = _trunc_normal(rng, (cfg.heads, cfg.head_dim), std)
        blocks.append(Block(layers, bk, bv))

    final_patch = LayerNorm(_full(d, 1.0), _zeros(d))
    if spec.final_norm_specialized(cfg.depth):
        final_cls = _clone(final_patch) if cls_init == "copy" else LayerNorm(_full(d, 1.0), _zeros(d))
        final = PathPair(final_patch, final_cls)
    else:
        final = PathPair(final_patch)
    return ViT(cfg, embed, pos, cls_token, registers, blocks, final)


# --------------------------------------------------------------- checkpoint

_MAGIC = b"SPTK"
_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors.

    Layout (all little-endian): ``b"SPTK"``, u32 version, u32 count, then per
    tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 extents, and
    the row-major float64 payload.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return out
