"""ViT backbone: patch embedding, shared position embeddings and pre-norm encoders."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .module import LayerNorm, Linear, Module, trunc_normal
from .tensor import Param, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 8
    dim: int = 64
    depth: int = 6
    heads: int = 4
    ffn_ratio: int = 4
    template_side: int = 32
    search_side: int = 64

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or self.template_side % p or self.search_side % p:
            raise ConfigError(f"template_side {self.template_side} and search_side "
                              f"{self.search_side} must be divisible by patch_size {p}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def template_grid(self) -> int:
        return self.template_side // self.patch_size

    @property
    def search_grid(self) -> int:
        return self.search_side // self.patch_size

    @property
    def n_template(self) -> int:
        return self.template_grid ** 2

    @property
    def n_search(self) -> int:
        return self.search_grid ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def vit_base(cls) -> "BackboneConfig":
        # ViT-B; template 128 and search 256 (the usual template < search ordering)
        return cls(patch_size=16, dim=768, depth=12, heads=12, template_side=128, search_side=256)

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls(patch_size=8, dim=64, depth=6, heads=4, template_side=32, search_side=64)

    @classmethod
    def tiny(cls) -> "BackboneConfig":
        """Gradient-check scale: C=16, L=2, h=2 on 2x2 / 4x4 token grids."""
        return cls(patch_size=4, dim=16, depth=2, heads=2, template_side=8, search_side=16)

    def with_(self, **kw) -> "BackboneConfig":
        return replace(self, **kw)


@dataclass
class TokenSequence:
    """Tokens [..., N, C]; rows [0, boundary) are template, the rest search."""

    tokens: Tensor
    boundary: int

    def __post_init__(self):
        if not 0 <= self.boundary <= self.tokens.shape[-2]:
            raise DimensionError(f"segment boundary {self.boundary} outside [0, {self.tokens.shape[-2]}]")

    @property
    def n(self) -> int:
        return self.tokens.shape[-2]

    @property
    def template(self) -> Tensor:
        return self.tokens[..., :self.boundary, :]

    @property
    def search(self) -> Tensor:
        return self.tokens[..., self.boundary:, :]

    def replace_tokens(self, tokens: Tensor) -> "TokenSequence":
        if tokens.shape != self.tokens.shape:
            raise DimensionError(f"token shape changed from {self.tokens.shape} to {tokens.shape}")
        return TokenSequence(tokens, self.boundary)

    @classmethod
    def join(cls, template: Tensor, search: Tensor) -> "TokenSequence":
        return cls(T.concat([template, search], axis=-2), template.shape[-2])


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """[..., 3, H, W] -> [..., N, 3*P*P] in raster order of patches."""
    *lead, c, h, w = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"image size {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, c, gh, patch, gw, patch)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd + 1, nd + 3, nd, nd + 2, nd + 4)
    return np.ascontiguousarray(x.transpose(perm).reshape(*lead, gh * gw, c * patch * patch))


class PatchEmbed(Module):
    def __init__(self, rng: np.random.Generator, patch_size: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = Linear(rng, 3 * patch_size * patch_size, dim, init="normal")

    def __call__(self, image) -> Tensor:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image)
        patches = patchify(arr.astype(self.proj.weight.dtype, copy=False), self.patch_size)
        return self.proj(Tensor(patches, dtype=self.proj.weight.dtype))


def patch_embed(image, proj: PatchEmbed) -> Tensor:
    return proj(image)


class PosEmbed(Module):
    def __init__(self, rng: np.random.Generator, n_template: int, n_search: int, dim: int):
        super().__init__()
        self.template_pe = Param(trunc_normal(rng, (n_template, dim)))
        self.search_pe = Param(trunc_normal(rng, (n_search, dim)))


def add_pos(seq: TokenSequence, pe: PosEmbed) -> TokenSequence:
    nz, nx = pe.template_pe.shape[0], pe.search_pe.shape[0]
    if seq.boundary != nz or seq.n - seq.boundary != nx:
        raise DimensionError(f"position embedding covers {nz}+{nx} tokens, sequence has "
                             f"{seq.boundary}+{seq.n - seq.boundary}")
    return TokenSequence(seq.tokens + T.concat([pe.template_pe, pe.search_pe], axis=0), seq.boundary)


class EncoderLayer(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn_ratio: int = 4,
                 init: str = "normal"):
        super().__init__()
        self.heads = heads
        self.ln1 = LayerNorm(dim)
        self.wq = Linear(rng, dim, dim, init)
        self.wk = Linear(rng, dim, dim, init)
        self.wv = Linear(rng, dim, dim, init)
        self.wo = Linear(rng, dim, dim, init)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, ffn_ratio * dim, init)
        self.fc2 = Linear(rng, ffn_ratio * dim, dim, init)

    def __call__(self, x: Tensor) -> Tensor:
        return encoder_forward(x, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    x = x.reshape(*lead, n, heads, c // heads)
    return x.swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = x.swapaxes(-3, -2)
    *lead, n, h, d = x.shape
    return x.reshape(*lead, n, h * d)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention; scores are divided by sqrt(head_dim)."""
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    probs = T.softmax_lastdim((qh @ kh.swapaxes(-1, -2)) * scale)
    return _merge_heads(probs @ vh)


def msa(x: Tensor, w, heads: int | None = None) -> Tensor:
    """Multi-head self-attention with output projection (no residual)."""
    heads = heads or w.heads
    return w.wo(attention(w.wq(x), w.wk(x), w.wv(x), heads))


def ffn(x: Tensor, w) -> Tensor:
    return w.fc2(T.gelu(w.fc1(x)))


def encoder_forward(x: Tensor, w: EncoderLayer) -> Tensor:
    x = x + msa(w.ln1(x), w)
    return x + ffn(w.ln2(x), w)


class Backbone(Module):
    """Patch embedding, position embeddings, encoder stack and final norm.

    ``forward`` runs the plain RGB path; prompt injection and template
    interaction are orchestrated by the model, which steps layers directly.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(rng, cfg.patch_size, cfg.dim)
        self.pos_embed = PosEmbed(rng, cfg.n_template, cfg.n_search, cfg.dim)
        self.layers = [EncoderLayer(rng, cfg.dim, cfg.heads, cfg.ffn_ratio) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)

    def embed(self, template_img, search_img) -> TokenSequence:
        seq = TokenSequence.join(self.patch_embed(template_img), self.patch_embed(search_img))
        return add_pos(seq, self.pos_embed)

    def forward(self, template_img, search_img) -> TokenSequence:
        seq = self.embed(template_img, search_img)
        x = seq.tokens
        for layer in self.layers:
            x = layer(x)
        return TokenSequence(self.norm(x), seq.boundary)
