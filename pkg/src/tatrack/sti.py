"""Spatio-temporal interaction between the initial- and online-branch templates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import TokenSequence, attention, ffn
from .errors import ConfigError, DimensionError
from .module import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class StiConfig:
    insertion_layers: frozenset = field(default_factory=frozenset)
    depth: int = 12
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "insertion_layers", frozenset(int(i) for i in self.insertion_layers))
        bad = [i for i in self.insertion_layers if not 1 <= i <= self.depth]
        if bad:
            raise ConfigError(f"STI layers {sorted(bad)} outside [1, {self.depth}]")


class StiBlock(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 1, ffn_ratio: int = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"STI dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.ln1 = LayerNorm(dim)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, ffn_ratio * dim)
        self.fc2 = Linear(rng, ffn_ratio * dim, dim)


def sti_forward(z_i: Tensor, z_o: Tensor, w: StiBlock) -> tuple[Tensor, Tensor]:
    if z_i.shape != z_o.shape:
        raise DimensionError(f"STI inputs differ in shape: {z_i.shape} vs {z_o.shape}")
    n = z_i.shape[-2]
    z = T.concat([z_i, z_o], axis=-2)
    f = w.wo(attention(w.wq(z), w.wk(z), w.wv(z), w.heads))
    f_tilde = w.ln1(f + z)
    out = w.ln2(f_tilde + ffn(f_tilde, w))
    a, b = T.split(out, -2, [n, n])
    return a, b


def apply_sti_at_layer(stream_i: TokenSequence, stream_o: TokenSequence, layer: int,
                       cfg: StiConfig, blocks: dict) -> tuple[TokenSequence, TokenSequence]:
    """Exchange template features of two fused streams before ``layer`` (1-indexed)."""
    if not 1 <= layer <= cfg.depth:
        raise ConfigError(f"layer {layer} outside [1, {cfg.depth}]")
    if layer not in cfg.insertion_layers:
        return stream_i, stream_o
    zi, zo = sti_forward(stream_i.template, stream_o.template, blocks[str(layer)])
    new_i = TokenSequence.join(zi, stream_i.search)
    new_o = TokenSequence.join(zo, stream_o.search)
    return new_i, new_o
