"""Modality-complementary prompter: thermal prompts generated and injected per layer."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import TokenSequence
from .errors import ConfigError, DimensionError
from .module import Conv1x1, Module
from .tensor import Tensor

BOTTLENECK = 8


@dataclass
class PromptState(TokenSequence):
    """Prompt tokens sharing the fused stream's segment boundary."""


def _grid(n: int) -> int:
    g = math.isqrt(n)
    if g * g != n:
        raise ConfigError(f"segment with {n} tokens is not a square grid")
    return g


def tokens_to_map(x: Tensor, grid: int) -> Tensor:
    *lead, n, c = x.shape
    return x.swapaxes(-1, -2).reshape(*lead, c, grid, grid)


def map_to_tokens(m: Tensor) -> Tensor:
    *lead, c, h, w = m.shape
    return m.reshape(*lead, c, h * w).swapaxes(-1, -2)


def fovea(m: Tensor) -> Tensor:
    """Re-weight each channel by its spatial softmax, scaled by H*W so a constant map is a fixed point."""
    *lead, c, h, w = m.shape
    flat = m.reshape(*lead, c, h * w)
    weights = T.softmax_lastdim(flat)
    return (flat * (weights * float(h * w))).reshape(*lead, c, h, w)


class McpLayer(Module):
    def __init__(self, rng: np.random.Generator, dim: int, template_grid: int, search_grid: int):
        super().__init__()
        self.template_grid = template_grid
        self.search_grid = search_grid
        self.conv_down_prompt = Conv1x1(rng, dim, BOTTLENECK)
        self.conv_down_stream = Conv1x1(rng, dim, BOTTLENECK)
        self.conv_up = Conv1x1(rng, BOTTLENECK, dim)

    def mix(self, prompt: Tensor, stream: Tensor, grid: int) -> Tensor:
        p = self.conv_down_prompt(tokens_to_map(prompt, grid))
        s = self.conv_down_stream(tokens_to_map(stream, grid))
        return map_to_tokens(self.conv_up(fovea(s) + p))


class Mcp(Module):
    """One prompter per encoder layer."""

    def __init__(self, rng: np.random.Generator, dim: int, depth: int, n_template: int, n_search: int):
        super().__init__()
        tg, sg = _grid(n_template), _grid(n_search)
        self.layers = [McpLayer(rng, dim, tg, sg) for _ in range(depth)]

    def zero_(self) -> None:
        for p in self.params():
            p.assign(np.zeros_like(p.data))


def mcp_forward(prompt: PromptState, stream: TokenSequence, w: McpLayer) -> PromptState:
    if prompt.tokens.shape != stream.tokens.shape or prompt.boundary != stream.boundary:
        raise DimensionError(f"prompt {prompt.tokens.shape}/{prompt.boundary} and stream "
                             f"{stream.tokens.shape}/{stream.boundary} are out of sync")
    tg, sg = _grid(stream.boundary), _grid(stream.n - stream.boundary)
    if (tg, sg) != (w.template_grid, w.search_grid):
        raise ConfigError(f"prompter built for grids {w.template_grid}/{w.search_grid}, got {tg}/{sg}")
    template = w.mix(prompt.template, stream.template, tg)
    search = w.mix(prompt.search, stream.search, sg)
    return PromptState(T.concat([template, search], axis=-2), stream.boundary)


def inject(stream: TokenSequence, prompt: PromptState) -> TokenSequence:
    if stream.tokens.shape != prompt.tokens.shape:
        raise DimensionError(f"cannot inject prompt {prompt.tokens.shape} into stream {stream.tokens.shape}")
    return TokenSequence(stream.tokens + prompt.tokens, stream.boundary)
