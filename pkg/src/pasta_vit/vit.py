"""Small Vision Transformer that exposes every layer's attention.

The forward pass returns the logits together with the per-layer, per-head
attention probabilities so that attention-space losses can be
back-propagated through both the parameters and the input image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CKPT_VERSION = "pasta-ckpt-v1"


class ConfigError(ValueError):
    """Invalid model or attack configuration."""


class DimensionError(ValueError):
    """Tensor shapes do not match the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 128
    num_heads: int = 4
    depth: int = 6
    mlp_ratio: float = 4.0
    num_classes: int = 10
    use_pos_embed: bool = True

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.channels <= 0:
            raise ConfigError("image_size, patch_size and channels must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}"
            )
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        h = self.heads

        def split(t):
            return t.reshape(B, N, h, D // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, hidden)

    def forward(self, x):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Conv2d(c.channels, c.embed_dim, c.patch_size, stride=c.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, c.seq_len, c.embed_dim))
        self.blocks = nn.ModuleList(
            Block(c.embed_dim, c.num_heads, c.mlp_hidden) for _ in range(c.depth)
        )
        self.norm = nn.LayerNorm(c.embed_dim)
        self.head = nn.Linear(c.embed_dim, c.num_classes)
        self.seed: int | None = None

    def tokens(self, x):
        tok = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        tok = torch.cat([cls, tok], dim=1)
        if self.config.use_pos_embed:
            tok = tok + self.pos_embed
        return tok

    def forward(self, x, keep_attention: bool = True):
        c = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected (B, {c.channels}, {c.image_size}, {c.image_size}), got {tuple(x.shape)}"
            )
        tok = self.tokens(x)
        attns = []
        for blk in self.blocks:
            tok, attn = blk(tok)
            if keep_attention:
                attns.append(attn)
        logits = self.head(self.norm(tok)[:, 0])
        return logits, attns


def init_model(config: ModelConfig, seed: int) -> VisionTransformer:
    """Build a model with seeded truncated-normal(0.02) weights and zero biases."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("config must be a ModelConfig")
    gen = torch.Generator().manual_seed(int(seed))
    model = VisionTransformer(config)
    for name, p in model.named_parameters():
        with torch.no_grad():
            if "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
    model.seed = int(seed)
    return model


def forward(model: VisionTransformer, images: torch.Tensor, keep_attention: bool = True):
    """Return ``(logits, attention_stack)`` for a batch of images."""
    return model(images, keep_attention=keep_attention)


def _head_mean(a):
    # (..., heads, N, N) -> (..., N, N)
    return a.mean(dim=-3)


def attention_map(attns, upto_layer: int) -> torch.Tensor:
    """Composed attention ``A[upto-1] @ ... @ A[0]`` of head-averaged layers.

    Works on batched ``(B, heads, N, N)`` or single ``(heads, N, N)`` layers.
    """
    if not 1 <= upto_layer <= len(attns):
        raise IndexError(f"upto_layer must be in [1, {len(attns)}], got {upto_layer}")
    out = _head_mean(attns[0])
    for a in attns[1:upto_layer]:
        out = _head_mean(a) @ out
    return out


def attention_rollout(attns) -> torch.Tensor:
    """Attention rollout with mean head fusion and 0.5 residual mixing.

    Returns the class-token row over patch tokens as a ``g x g`` map
    (batched if the input is batched), max-normalised to ``[0, 1]``.
    """
    first = _head_mean(attns[0])
    N = first.shape[-1]
    g = int(round((N - 1) ** 0.5))
    if g * g != N - 1:
        raise DimensionError(f"sequence length {N} is not 1 + square")
    eye = torch.eye(N, dtype=first.dtype, device=first.device)
    result = eye.expand_as(first)
    for a in attns:
        mixed = 0.5 * (_head_mean(a) + eye)
        mixed = mixed / mixed.sum(dim=-1, keepdim=True)
        result = mixed @ result
    patch = result[..., 0, 1:]
    peak = patch.amax(dim=-1, keepdim=True)
    patch = torch.where(peak > 0, patch / torch.where(peak > 0, peak, 1.0), patch)
    return patch.reshape(*patch.shape[:-1], g, g)


def predict(model: VisionTransformer, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Argmax predictions without retaining attention."""
    preds = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits, _ = model(images[start:start + batch_size], keep_attention=False)
            preds.append(logits.argmax(dim=1))
    if not preds:
        return torch.empty(0, dtype=torch.long)
    return torch.cat(preds)


def save_checkpoint(model: VisionTransformer, path, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "version": CKPT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "params": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    if extra:
        meta["extra"] = extra
    arrays = {
        k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> VisionTransformer:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        model = VisionTransformer(ModelConfig(**meta["config"]))
        state = {k: torch.from_numpy(data[k].astype(np.float32)) for k in meta["params"]}
    model.load_state_dict(state)
    model.seed = meta.get("seed")
    return model
