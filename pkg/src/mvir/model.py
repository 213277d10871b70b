"""Alternating-attention network with DPT-style fusion heads.

Images ``[N,3,H,W]`` are cut into ``p x p`` patches, embedded, passed through
blocks that alternate between per-view (frame) attention and joint attention
over every token of every view (global), and decoded by a shared fusion
trunk with five output heads. No view-index term enters anywhere, so the
network is equivariant to reordering the views.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyInputError
from .tensor import Tensor

MAP_CHANNELS = {"albedo": 3, "metallic": 1, "roughness": 1, "normal": 3, "shading": 3}
MAP_NAMES = tuple(MAP_CHANNELS)
AUX_GAIN = 64.0
_NORMAL_OFFSET = np.array([0.0, 0.0, -1e-6]).reshape(1, 3, 1, 1)


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: int = 2
    feature_dim: int = 32
    # auxiliary pyramid widths at full, 1/2, 1/4 and 1/8 resolution
    head_channels: tuple[int, ...] = (16, 16, 32, 32)
    head_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "head_channels", tuple(int(v) for v in self.head_channels))
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch size {p}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 2 or self.num_blocks % 2:
            raise ConfigError(f"num_blocks must be a positive even number, got {self.num_blocks}")
        if len(self.head_channels) != 4:
            raise ConfigError(f"head_channels needs 4 entries, got {self.head_channels}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def tap_indices(self) -> tuple[int, ...]:
        """Block indices whose outputs feed the four reassembly stages."""
        n = self.num_blocks
        return tuple(max(0, (k + 1) * n // 4 - 1) for k in range(4))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["head_channels"] = list(self.head_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


@dataclass
class TokenGrid:
    tokens: Tensor  # [N, T, C]
    grid_dims: tuple[int, int]

    def __post_init__(self):
        gh, gw = self.grid_dims
        if self.tokens.shape[1] != gh * gw:
            raise ConfigError(f"token count {self.tokens.shape[1]} does not match grid {self.grid_dims}")


@dataclass
class IntrinsicSet:
    """Per-view intrinsic maps, each ``[N, C, H, W]``."""

    albedo: object
    metallic: object
    roughness: object
    normal: object
    shading: object

    def items(self):
        return [(k, getattr(self, k)) for k in MAP_NAMES]

    def __getitem__(self, name: str):
        return getattr(self, name)

    def numpy(self) -> "IntrinsicSet":
        return IntrinsicSet(*(np.asarray(v.data if isinstance(v, Tensor) else v) for _, v in self.items()))

    def select(self, idx) -> "IntrinsicSet":
        return IntrinsicSet(*(v[idx] for _, v in self.items()))

    @property
    def num_views(self) -> int:
        return self.albedo.shape[0]


# --------------------------------------------------------------------------
# building blocks


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name, dtype=T.get_default_dtype())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, std: float | None = None):
        std = std if std is not None else 1.0 / np.sqrt(d_in)
        self.weight = _param(rng.normal(0.0, std, size=(d_in, d_out)), "weight")
        self.bias = _param(np.zeros(d_out), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1, gain: float = 2.0):
        std = np.sqrt(gain / (c_in * k * k))
        self.weight = _param(rng.normal(0.0, std, size=(c_out, c_in, k, k)), "weight")
        self.bias = _param(np.zeros(c_out), "bias")
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim), "gain")
        self.bias = _param(np.zeros(dim), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias)


class MapNorm(Module):
    """Normalise each view's ``[C,H,W]`` map as a whole, then a per-channel affine.

    Unlike a per-pixel norm this keeps relative brightness between pixels.
    """

    def __init__(self, dim: int):
        self.gain = _param(np.ones((1, dim, 1, 1)), "gain")
        self.bias = _param(np.zeros((1, dim, 1, 1)), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        flat = T.layernorm(x.reshape(n, -1))
        return flat.reshape(*x.shape) * self.gain + self.bias


class Attention(Module):
    def __init__(self, rng, dim: int, heads: int):
        self.heads = heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        h = self.heads
        d = c // h
        qkv = self.qkv(x).reshape(b, t, 3, h, d).transpose(2, 0, 3, 1, 4)  # [3,B,h,T,d]
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d)), axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
        return self.proj(y)


class Block(Module):
    """Pre-norm transformer block; ``mode`` picks the attention scope."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int, mode: str):
        if mode not in ("frame", "global"):
            raise ConfigError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim)

    def __call__(self, x: Tensor) -> Tensor:
        n, t, c = x.shape
        if self.mode == "global":
            x = x.reshape(1, n * t, c)
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(T.gelu(self.fc1(self.norm2(x))))
        return x.reshape(n, t, c)


class ResidualConvUnit(Module):
    def __init__(self, rng, dim: int):
        self.conv1 = Conv(rng, dim, dim)
        # zero-initialised residual branch: each unit starts as the identity
        self.conv2 = Conv(rng, dim, dim, gain=0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.relu(self.conv1(T.relu(x))))


# --------------------------------------------------------------------------
# network


class MVNet(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p, c, f = cfg.patch_size, cfg.embed_dim, cfg.feature_dim
        gh, gw = cfg.grid

        self.embed = Linear(rng, 3 * p * p, c)
        self.pos_row = _param(rng.normal(0.0, 0.02, size=(gh, 1, c)), "pos_row")
        self.pos_col = _param(rng.normal(0.0, 0.02, size=(1, gw, c)), "pos_col")
        self.blocks = [
            Block(rng, c, cfg.num_heads, cfg.mlp_ratio, "frame" if i % 2 == 0 else "global")
            for i in range(cfg.num_blocks)
        ]
        self.norm = LayerNorm(c)

        self.reassemble = [Conv(rng, c, f, k=1, gain=1.0) for _ in range(4)]
        self.skip_rcu = [ResidualConvUnit(rng, f) for _ in range(4)]
        self.fuse_rcu = [ResidualConvUnit(rng, f) for _ in range(3)]

        hc = cfg.head_channels
        self.aux = [Conv(rng, 3, hc[0])] + [Conv(rng, hc[i - 1], hc[i], stride=2) for i in range(1, 4)]
        # the pyramid is the only full-resolution path; a large initial gain
        # keeps its detail from being buried under the upsampled trunk
        self.aux_proj = [Conv(rng, hc[i], f, k=1, gain=AUX_GAIN) for i in range(4)]

        self.refine = Conv(rng, f, f)
        # the fused trunk grows large during training; normalising it keeps
        # the small heads out of the flat tails of their activations
        self.refine_norm = MapNorm(f)
        self.heads = [
            _Head(Conv(rng, f, cfg.head_hidden), Conv(rng, cfg.head_hidden, MAP_CHANNELS[name], k=1, gain=1.0))
            for name in MAP_NAMES
        ]
        # camera-facing prior: front surfaces have n_z < 0 in camera space
        self.heads[MAP_NAMES.index("normal")].out.bias.data[:] = (0.0, 0.0, -1.0)

    # -- stages ------------------------------------------------------------
    def patch_embed(self, images: Tensor) -> TokenGrid:
        images = T.as_tensor(images)
        n, ch, h, w = images.shape
        p = self.cfg.patch_size
        if (h, w) != self.cfg.image_size:
            raise ConfigError(f"image extent {(h, w)} does not match configured {self.cfg.image_size}")
        if ch != 3:
            raise ConfigError(f"expected 3-channel images, got {ch}")
        gh, gw = h // p, w // p
        patches = images.reshape(n, 3, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, 3 * p * p)
        pos = (self.pos_row + self.pos_col).reshape(1, gh * gw, -1)
        return TokenGrid(self.embed(patches) + pos, (gh, gw))

    def backbone(self, grid: TokenGrid) -> list[Tensor]:
        outs = []
        x = grid.tokens
        for blk in self.blocks:
            x = blk(x)
            outs.append(x)
        return [outs[i] for i in self.cfg.tap_indices]

    def aux_features(self, images: Tensor) -> list[Tensor]:
        feats = []
        x = T.as_tensor(images)
        for conv in self.aux:
            x = T.gelu(conv(x))
            feats.append(x)
        return feats

    def fuse_and_head(self, taps: list[Tensor], grid_dims, images: Tensor, use_aux: bool = True) -> IntrinsicSet:
        n = taps[0].shape[0]
        gh, gw = grid_dims
        h, w = self.cfg.image_size
        sizes = [(max(1, h >> s), max(1, w >> s)) for s in (1, 2, 3, 4)]  # 1/2 .. 1/16
        skips = []
        for k, tok in enumerate(taps):
            fmap = self.norm(tok).transpose(0, 2, 1).reshape(n, -1, gh, gw)
            fmap = self.reassemble[k](fmap)
            skips.append(T.bilinear_resize(fmap, *sizes[k]))

        aux = self.aux_features(images) if use_aux else None

        def add_aux(x: Tensor, level: int) -> Tensor:
            if aux is None:
                return x
            a = self.aux_proj[level](aux[level])
            if a.shape[-2:] != x.shape[-2:]:
                a = T.bilinear_resize(a, *x.shape[-2:])
            return x + a

        x = self.skip_rcu[3](skips[3])
        for k, level in ((2, 3), (1, 2), (0, 1)):
            x = T.bilinear_resize(x, *skips[k].shape[-2:]) + self.skip_rcu[k](skips[k])
            x = add_aux(x, level)
            x = self.fuse_rcu[k](x)
        x = add_aux(T.bilinear_resize(x, h, w), 0)
        x = T.gelu(self.refine_norm(self.refine(x)))

        out = {}
        for name, head in zip(MAP_NAMES, self.heads):
            y = head(x)
            if name == "normal":
                # offset keeps an all-zero raw vector normalisable
                y = y + _NORMAL_OFFSET.astype(y.dtype)
                norm = T.sqrt((y * y).sum(axis=1, keepdims=True) + 1e-20)
                out[name] = y / norm
            else:
                out[name] = T.sigmoid(y)
        return IntrinsicSet(**out)

    def forward(self, images, use_aux: bool = True) -> IntrinsicSet:
        images = T.as_tensor(images)
        if images.ndim != 4 or images.shape[0] == 0:
            raise EmptyInputError(f"forward needs a non-empty [N,3,H,W] batch, got shape {images.shape}")
        grid = self.patch_embed(images)
        taps = self.backbone(grid)
        return self.fuse_and_head(taps, grid.grid_dims, images, use_aux=use_aux)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def copy(self) -> "MVNet":
        other = MVNet(self.cfg)
        other.load_state_dict(self.state_dict())
        return other


class _Head(Module):
    def __init__(self, hidden: Conv, out: Conv):
        self.hidden = hidden
        self.out = out

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.gelu(self.hidden(x)))


def frame_attention(block: Block, grid: TokenGrid) -> TokenGrid:
    """Run ``block`` with attention restricted to each view's own tokens."""
    return TokenGrid(_with_mode(block, "frame", grid.tokens), grid.grid_dims)


def global_attention(block: Block, grid: TokenGrid) -> TokenGrid:
    """Run ``block`` with attention over all views' tokens jointly."""
    return TokenGrid(_with_mode(block, "global", grid.tokens), grid.grid_dims)


def _with_mode(block: Block, mode: str, x: Tensor) -> Tensor:
    prev = block.mode
    block.mode = mode
    try:
        return block(x)
    finally:
        block.mode = prev
