"""Central finite-difference checks of the analytic gradients."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel <= self.tol

    def line(self) -> str:
        return f"{'ok  ' if self.ok else 'FAIL'} {self.name:<24} seed={self.seed:<3} max_rel={self.max_rel:.2e} tol={self.tol:.0e}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                 indices=None) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_function(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray], seed: int = 0,
                   tol: float = 1e-4, h: float = 1e-5) -> CheckResult:
    """Compare gradients of ``sum(fn(*inputs) * w)`` for a fixed random ``w``."""
    rng = np.random.default_rng([seed, 7])
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    w = rng.standard_normal(out.shape)
    T.backward((out * Tensor(w)).sum())
    worst = 0.0
    for leaf in leaves:
        def f():
            with T.no_grad():
                return float((fn(*[Tensor(l.data) for l in leaves]).data * w).sum())

        num = numeric_grad(f, leaf.data, h)
        worst = max(worst, rel_error(leaf.grad, num))
    return CheckResult(name, seed, worst, tol)


def _op_cases(rng: np.random.Generator):
    """(name, fn, inputs) for every differentiable op; inputs avoid kinks."""
    def away(shape, lo=0.2):
        x = rng.standard_normal(shape)
        return np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo, x)

    pos = lambda shape: rng.uniform(0.5, 2.0, shape)  # noqa: E731
    a, b = away((3, 4)), away((3, 4))
    gamma, beta = rng.standard_normal(5), rng.standard_normal(5)
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
    return [
        ("add", lambda x, y: x + y, [a, rng.standard_normal(4)]),
        ("sub", lambda x, y: x - y, [a, b]),
        ("mul", lambda x, y: x * y, [a, b]),
        ("div", lambda x, y: x / y, [a, pos((3, 4))]),
        ("exp", T.exp, [rng.standard_normal((3, 4))]),
        ("log", T.log, [pos((3, 4))]),
        ("sqrt", T.sqrt, [pos((3, 4))]),
        ("power", lambda x: T.power(x, 3.0), [pos((3, 4))]),
        ("abs", T.abs_, [a]),
        ("clip", lambda x: T.clip(x, -0.1, 0.1), [a]),
        ("maximum", T.maximum, [a, a + np.where(rng.random((3, 4)) < 0.5, 0.5, -0.5)]),
        ("minimum", T.minimum, [a, a + np.where(rng.random((3, 4)) < 0.5, 0.5, -0.5)]),
        ("relu", T.relu, [a]),
        ("sigmoid", T.sigmoid, [rng.standard_normal((3, 4)) * 3]),
        ("gelu", T.gelu, [rng.standard_normal((3, 4)) * 2]),
        ("sum", lambda x: T.tsum(x, axis=1, keepdims=True), [a]),
        ("mean", lambda x: T.mean(x, axis=0), [a]),
        ("reshape", lambda x: T.reshape(x, (2, 6)), [a]),
        ("transpose", lambda x: T.transpose(x, (1, 0, 2)), [rng.standard_normal((2, 3, 4))]),
        ("getitem", lambda x: x[1:, ::2], [a]),
        ("getitem_adv", lambda x: x[np.array([0, 2, 0]), np.array([1, 1, 1])], [a]),
        ("concat", lambda x, y: T.concat([x, y], axis=0), [a, b]),
        ("split", lambda x: T.split(x, 1, [1, 3])[1], [a]),
        ("matmul", T.matmul, [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))]),
        ("matmul_batched", T.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))]),
        ("linear", T.linear, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)),
                              rng.standard_normal(5)]),
        ("conv1x1", T.conv1x1, [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((5, 3)),
                                rng.standard_normal(5)]),
        ("softmax_lastdim", T.softmax_lastdim, [rng.standard_normal((3, 6))]),
        ("layer_norm", T.layer_norm, [rng.standard_normal((3, 5)), gamma, beta]),
        ("batch_norm_train", lambda x, g, bb: T.batch_norm(x, g, bb, np.zeros(2), np.ones(2), True),
         [rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2), rng.standard_normal(2)]),
        ("batch_norm_eval", lambda x, g, bb: T.batch_norm(x, g, bb, rm, rv, False),
         [rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2), rng.standard_normal(2)]),
    ]


OP_NAMES = tuple(name for name, _, _ in _op_cases(np.random.default_rng(0)))


def check_ops(seeds=range(10), tol: float = 1e-4) -> list[CheckResult]:
    results = []
    with T.default_dtype(np.float64):
        for seed in seeds:
            for name, fn, inputs in _op_cases(np.random.default_rng(seed)):
                results.append(check_function(name, fn, inputs, seed, tol))
    return results


def check_model_loss(seed: int, tol: float = 1e-3, h: float = 1e-5, per_param: int = 3,
                     sti_layers=(1,)) -> CheckResult:
    """Gradient of the full training loss through the dual-branch model at the tiny config.

    Every parameter tensor is checked at ``per_param`` random coordinates.
    The frozen split is lifted so that backbone and head are covered too.
    """
    from .backbone import BackboneConfig
    from .losses import total_loss
    from .model import BBox, ModelConfig, TATrack

    rng = np.random.default_rng([seed, 3])
    with T.default_dtype(np.float64):
        bb = BackboneConfig.tiny()
        model = TATrack(ModelConfig(bb, True, True, tuple(sti_layers)), seed=seed)
        model.set_trainable(True)
        # BN in eval mode keeps the loss a pure function of the parameters
        model.eval()
        for name, buf in model.named_buffers():
            if name.endswith("running_var"):
                buf[...] = rng.uniform(0.5, 1.5, buf.shape)
            else:
                buf[...] = rng.standard_normal(buf.shape) * 0.1
        b = 2
        img = lambda side: rng.standard_normal((b, 3, side, side))  # noqa: E731
        init = (img(bb.template_side), img(bb.template_side))
        online = (img(bb.template_side), img(bb.template_side))
        search = (img(bb.search_side), img(bb.search_side))
        gts = [BBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.2, 0.4, 2)) for _ in range(b)]

        def loss_value() -> float:
            with T.no_grad():
                return total_loss(*model.dual_forward(init, online, search), gts)[1]["total"]

        model.zero_grad()
        loss, _ = total_loss(*model.dual_forward(init, online, search), gts)
        T.backward(loss)
        worst = 0.0
        for _, p in model.named_params():
            idx = rng.choice(p.size, size=min(per_param, p.size), replace=False)
            num = numeric_grad(loss_value, p.data, h, idx)
            worst = max(worst, rel_error(p.grad.reshape(-1)[idx], num.reshape(-1)[idx], floor=1e-6))
    return CheckResult("total_loss/dual_forward", seed, worst, tol)


def run_all(seeds=range(10), op_tol: float = 1e-4, model_tol: float = 1e-3, report=print) -> bool:
    t0 = time.perf_counter()
    ok = True
    for r in check_ops(seeds, op_tol):
        ok &= r.ok
        if not r.ok:
            report(r.line())
    report(f"ops: {len(OP_NAMES)} ops x {len(list(seeds))} seeds {'ok' if ok else 'FAILED'}")
    for seed in seeds:
        r = check_model_loss(seed, model_tol)
        ok &= r.ok
        report(r.line())
    report(f"elapsed {time.perf_counter() - t0:.1f}s")
    return ok
