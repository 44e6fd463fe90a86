"""Two-branch RGBT tracker: prompted ViT branches, template interaction, fusion and center head."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, TokenSequence
from .errors import ConfigError, DimensionError
from .mcp import Mcp, PromptState, inject, mcp_forward
from .module import Conv1x1, ConvBNReLU, Module
from .sti import StiBlock, StiConfig, apply_sti_at_layer
from .tensor import Tensor

FROZEN_PREFIXES = ("backbone.", "head.")


class BBox(NamedTuple):
    """Center/size box; in normalized search-region units unless stated otherwise."""

    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.desk)
    use_mcp: bool = True
    dual: bool = True
    sti_layers: tuple = ()
    sti_heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sti_layers", tuple(sorted(int(i) for i in self.sti_layers)))
        if self.sti_layers and not self.dual:
            raise ConfigError("STI needs the dual-branch model")
        StiConfig(frozenset(self.sti_layers), self.backbone.depth, self.sti_heads)

    @property
    def sti(self) -> StiConfig:
        return StiConfig(frozenset(self.sti_layers), self.backbone.depth, self.sti_heads)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        b = self.backbone
        return {
            "patch_size": b.patch_size, "dim": b.dim, "depth": b.depth, "heads": b.heads,
            "ffn_ratio": b.ffn_ratio, "template_side": b.template_side, "search_side": b.search_side,
            "use_mcp": int(self.use_mcp), "dual": int(self.dual),
            "sti_layers": ",".join(str(i) for i in self.sti_layers), "sti_heads": self.sti_heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = BackboneConfig(**{k: int(d[k]) for k in (
            "patch_size", "dim", "depth", "heads", "ffn_ratio", "template_side", "search_side")})
        layers = tuple(int(x) for x in str(d.get("sti_layers", "")).split(",") if x.strip())
        return cls(bb, bool(int(d["use_mcp"])), bool(int(d["dual"])), layers, int(d.get("sti_heads", 1)))


def default_sti_layers(depth: int) -> tuple:
    """Layers 4, 7, 10 of a 12-layer backbone, rescaled to other depths."""
    if depth == 12:
        return (4, 7, 10)
    return tuple(sorted({max(1, min(depth, round(i * depth / 12))) for i in (4, 7, 10)}))


@dataclass
class BranchState:
    fused: TokenSequence
    prompt: PromptState | None
    which: str


class Head(Module):
    """Center head: score, offset and size stacks of pointwise Conv-BN-ReLU layers."""

    OUTPUTS = (("score", 1), ("offset", 2), ("size", 2))

    def __init__(self, rng: np.random.Generator, dim: int):
        super().__init__()
        chans = [dim, dim // 2, dim // 4, dim // 8]
        for name, out in self.OUTPUTS:
            stack = [ConvBNReLU(rng, a, b) for a, b in zip(chans[:-1], chans[1:])]
            stack.append(Conv1x1(rng, chans[-1], out))
            setattr(self, name, stack)
        # score prior of ~0.1 keeps the initial focal loss bounded
        self.score[-1].bias.assign(np.full(1, -2.19))

    def __call__(self, feat: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        outs = []
        for name, _ in self.OUTPUTS:
            x = feat
            for layer in getattr(self, name):
                x = layer(x)
            outs.append(T.sigmoid(x))
        return tuple(outs)


class Fusion(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        super().__init__()
        self.cbr = ConvBNReLU(rng, 2 * dim, dim)

    def __call__(self, feat: Tensor) -> Tensor:
        return self.cbr(feat)


def _pair(x):
    if isinstance(x, (tuple, list)) and len(x) == 2:
        return x[0], x[1]
    return x, None


class TATrack(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        bb = cfg.backbone
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(bb, rng)
        self.head = Head(rng, bb.dim)
        prompt_rng = np.random.default_rng([seed, 1])
        if cfg.use_mcp:
            self.mcp_init = Mcp(prompt_rng, bb.dim, bb.depth, bb.n_template, bb.n_search)
            if cfg.dual:
                self.mcp_online = Mcp(prompt_rng, bb.dim, bb.depth, bb.n_template, bb.n_search)
        if cfg.dual:
            self.sti = {str(i): StiBlock(prompt_rng, bb.dim, cfg.sti_heads) for i in cfg.sti_layers}
            self.fusion = Fusion(prompt_rng, bb.dim)

    # -- parameter bookkeeping ------------------------------------------------

    def is_frozen_name(self, name: str) -> bool:
        return name.startswith(FROZEN_PREFIXES)

    def freeze_base(self) -> None:
        """Freeze backbone and head; prompt-learning parameters stay trainable."""
        for name, p in self.named_params():
            p.set_trainable(not self.is_frozen_name(name))

    def frozen_named(self) -> list[tuple[str, np.ndarray]]:
        items = [(n, p.data) for n, p in self.named_params() if self.is_frozen_name(n)]
        items += [(n, b) for n, b in self.named_buffers() if self.is_frozen_name(n)]
        return items

    def train(self, mode: bool = True) -> "TATrack":
        super().train(mode)
        # frozen modules keep their running statistics
        if mode and any(not p.trainable for p in self.head.params()):
            self.head.train(False)
        return self

    # -- forward ----------------------------------------------------------------

    def _start_branch(self, template, search, which: str, with_prompt: bool) -> BranchState:
        t_rgb, t_tir = _pair(template)
        s_rgb, s_tir = _pair(search)
        fused = self.backbone.embed(t_rgb, s_rgb)
        prompt = None
        if with_prompt:
            if t_tir is None or s_tir is None:
                raise DimensionError("prompted branches need both RGB and TIR images")
            p = self.backbone.embed(t_tir, s_tir)
            prompt = PromptState(p.tokens, p.boundary)
        return BranchState(fused, prompt, which)

    def _step(self, branch: BranchState, layer: int, mcp: Mcp | None) -> BranchState:
        fused, prompt = branch.fused, branch.prompt
        if mcp is not None:
            prompt = mcp_forward(prompt, fused, mcp.layers[layer - 1])
            fused = inject(fused, prompt)
        fused = TokenSequence(self.backbone.layers[layer - 1](fused.tokens), fused.boundary)
        return BranchState(fused, prompt, branch.which)

    def branch_forward(self, template, search, mcp: Mcp | None = None, which: str = "initial") -> BranchState:
        branch = self._start_branch(template, search, which, mcp is not None)
        for layer in range(1, self.cfg.backbone.depth + 1):
            branch = self._step(branch, layer, mcp)
        return branch

    def _search_map(self, fused: TokenSequence) -> Tensor:
        x = self.backbone.norm(fused.search)
        g = self.cfg.backbone.search_grid
        *lead, n, c = x.shape
        return x.swapaxes(-1, -2).reshape(*lead, c, g, g)

    def single_forward(self, template, search):
        mcp = self.mcp_init if self.cfg.use_mcp else None
        branch = self.branch_forward(template, search, mcp, "initial")
        return self.head(self._search_map(branch.fused))

    def dual_forward(self, init_tpl, online_tpl, search):
        cfg = self.cfg
        if not cfg.dual:
            raise ConfigError("dual_forward on a single-branch model")
        mcp_i = self.mcp_init if cfg.use_mcp else None
        mcp_o = self.mcp_online if cfg.use_mcp else None
        bi = self._start_branch(init_tpl, search, "initial", mcp_i is not None)
        bo = self._start_branch(online_tpl, search, "online", mcp_o is not None)
        sti_cfg = cfg.sti
        for layer in range(1, cfg.backbone.depth + 1):
            fi, fo = apply_sti_at_layer(bi.fused, bo.fused, layer, sti_cfg, self.sti)
            bi = self._step(BranchState(fi, bi.prompt, bi.which), layer, mcp_i)
            bo = self._step(BranchState(fo, bo.prompt, bo.which), layer, mcp_o)
        feat = T.concat([self._search_map(bi.fused), self._search_map(bo.fused)], axis=-3)
        return self.head(self.fusion(feat))

    def __call__(self, init_tpl, search, online_tpl=None):
        if self.cfg.dual:
            return self.dual_forward(init_tpl, init_tpl if online_tpl is None else online_tpl, search)
        return self.single_forward(init_tpl, search)


def decode_box(score, offset, size) -> tuple[BBox, float]:
    """Box at the score argmax: cell index plus local offset, size read at the same cell."""
    score = np.asarray(getattr(score, "data", score))
    offset = np.asarray(getattr(offset, "data", offset))
    size = np.asarray(getattr(size, "data", size))
    s = score.shape[-1]
    flat = score.reshape(-1)
    k = int(np.argmax(flat))
    i, j = divmod(k, s)
    cx = (j + float(offset[0, i, j])) / s
    cy = (i + float(offset[1, i, j])) / s
    return BBox(cx, cy, float(size[0, i, j]), float(size[1, i, j])), float(flat[k])


def decode_batch(score, offset, size) -> list[tuple[BBox, float]]:
    score = np.asarray(getattr(score, "data", score))
    offset = np.asarray(getattr(offset, "data", offset))
    size = np.asarray(getattr(size, "data", size))
    if score.ndim == 3:
        return [decode_box(score, offset, size)]
    return [decode_box(score[b], offset[b], size[b]) for b in range(score.shape[0])]
