"""Wide-precision finite-difference suite over every op and composite block.

Each check builds seeded float64 inputs (spatial size <= 8x8 for single ops),
contracts the output with fixed random weights so no gradient is trivially
zero, and reports :func:`dfn.gradcheck.grad_check`'s worst relative error.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .gradcheck import grad_check
from .losses import LossConfig, combined_loss, focal_loss, softmax_ce
from .model import CAB, DFN, RRB, ModelConfig
from .tensor import WIDE, Tensor

TOLERANCE = 1e-4


def _t(rng, *shape, grad=True, scale=1.0, shift=0.0):
    return Tensor(rng.normal(size=shape) * scale + shift, requires_grad=grad, dtype=WIDE)


# a fixed contraction weight per output shape keeps f deterministic across calls
_WEIGHTS: dict[tuple, Tensor] = {}


def _contract_fixed(out: Tensor) -> Tensor:
    key = out.shape
    if key not in _WEIGHTS:
        _WEIGHTS[key] = Tensor(np.random.default_rng(zlib.crc32(repr(key).encode())).normal(size=key), dtype=WIDE)
    return ops.sum_all(ops.mul(out, _WEIGHTS[key]))


def check_conv2d(rng, eps):
    x, k, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    e1 = grad_check(lambda: _contract_fixed(ops.conv2d(x, k, b, 1, 1)), [x, k, b], eps)
    e2 = grad_check(lambda: _contract_fixed(ops.conv2d(x, k, b, 2, (0, 1))), [x, k, b], eps)
    return max(e1, e2)


def check_max_pool(rng, eps):
    x = _t(rng, 1, 2, 8, 8)
    return grad_check(lambda: _contract_fixed(ops.max_pool(x, 2)), [x], eps)


def check_upsample(rng, eps):
    x = _t(rng, 1, 2, 4, 4)
    return max(
        grad_check(lambda: _contract_fixed(ops.upsample_bilinear(x, 2)), [x], eps),
        grad_check(lambda: _contract_fixed(ops.upsample_bilinear(x, 3)), [x], eps),
    )


def check_global_avg_pool(rng, eps):
    x = _t(rng, 2, 3, 4, 4)
    return grad_check(lambda: _contract_fixed(ops.global_avg_pool(x)), [x], eps)


def check_activation(rng, eps):
    x = _t(rng, 1, 2, 4, 4)
    return max(
        grad_check(lambda: _contract_fixed(ops.sigmoid(x)), [x], eps),
        grad_check(lambda: _contract_fixed(ops.relu(x)), [x], eps),
    )


def check_softmax(rng, eps):
    x = _t(rng, 2, 4, 3, 3)
    return grad_check(lambda: _contract_fixed(ops.softmax_channels(x)), [x], eps)


def check_concat(rng, eps):
    a, b = _t(rng, 1, 2, 4, 4), _t(rng, 1, 3, 4, 4)
    return grad_check(lambda: _contract_fixed(ops.concat_channels(a, b)), [a, b], eps)


def check_channel_scale(rng, eps):
    x, alpha = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 1, 1)
    return grad_check(lambda: _contract_fixed(ops.channel_scale(x, alpha)), [x, alpha], eps)


def check_add(rng, eps):
    a, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 1, 1)
    return grad_check(lambda: _contract_fixed(ops.add(a, b)), [a, b], eps)


def check_batch_norm(rng, eps):
    x, g, b = _t(rng, 2, 3, 4, 4), _t(rng, 3, shift=1.0), _t(rng, 3)
    train = grad_check(
        lambda: _contract_fixed(ops.batch_norm(x, g, b, ops.RunningStats.fresh(3, WIDE), "train")), [x, g, b], eps
    )
    stats = ops.RunningStats(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    evaluation = grad_check(lambda: _contract_fixed(ops.batch_norm(x, g, b, stats, "eval")), [x, g, b], eps)
    return max(train, evaluation)


def _small_cfg(**kw) -> ModelConfig:
    base = dict(num_classes=3, stage_channels=(4, 4, 6, 6, 8), unified_channels=8, init_seed=3)
    base.update(kw)
    return ModelConfig(**base)


def check_rrb(rng, eps):
    cfg = _small_cfg()
    block = RRB("gc.rrb", 4, cfg).to(WIDE)
    x = _t(rng, 2, 4, 4, 4)
    params = [p.value for p in block.parameters()]
    return grad_check(lambda: _contract_fixed(block(x)), [x] + params, eps)


def check_cab(rng, eps):
    cfg = _small_cfg()
    block = CAB("gc.cab", cfg).to(WIDE)
    low, high = _t(rng, 2, 8, 4, 4), _t(rng, 2, 8, 4, 4)
    params = [p.value for p in block.parameters()]

    def f():
        fused, alpha = block(low, high)
        return ops.add(_contract_fixed(fused), _contract_fixed(alpha))

    return grad_check(f, [low, high] + params, eps)


def check_softmax_ce(rng, eps):
    y = _t(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    return grad_check(lambda: softmax_ce(y, labels), [y], eps)


def check_focal_loss(rng, eps):
    z = _t(rng, 2, 1, 6, 6, scale=2.0)
    target = rng.integers(0, 2, size=(2, 6, 6))
    return max(
        grad_check(lambda: focal_loss(z, target, 2.0, 0.75), [z], eps),
        grad_check(lambda: focal_loss(z, target, 0.0, 0.5), [z], eps),
        grad_check(lambda: focal_loss(z, target, 0.5, 0.25), [z], eps),
    )


def check_combined_loss(rng, eps):
    """Full tiny DFN (32x32, K=3): image plus a sample of every parameter group."""
    cfg = _small_cfg()
    model = DFN(cfg).to(WIDE)
    image = _t(rng, 2, 3, 32, 32)
    labels = rng.integers(0, 3, size=(2, 32, 32))
    boundary = rng.integers(0, 2, size=(2, 32, 32))
    lcfg = LossConfig(lam=0.5)

    def f():
        total, _, _ = combined_loss(model(image), labels, boundary, lcfg, cfg)
        return total

    picks = [p.value for p in model.parameters() if p.name.split(".")[0] in ("smooth", "border")]
    sub = [picks[i] for i in rng.choice(len(picks), size=8, replace=False)]
    return max(
        grad_check(f, [image], eps, max_elements=24, seed=1),
        grad_check(f, sub, eps, max_elements=4, seed=2),
    )


CHECKS: dict[str, Callable] = {
    "conv2d": check_conv2d,
    "pool": check_max_pool,
    "upsample": check_upsample,
    "gap": check_global_avg_pool,
    "activation": check_activation,
    "softmax": check_softmax,
    "concat": check_concat,
    "channel_scale": check_channel_scale,
    "add": check_add,
    "bn": check_batch_norm,
    "rrb": check_rrb,
    "cab": check_cab,
    "softmax_ce": check_softmax_ce,
    "focal": check_focal_loss,
    "combined": check_combined_loss,
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(eps: float = 1e-5, only: list[str] | None = None, seed: int = 0) -> list[CheckResult]:
    names = list(CHECKS) if not only else only
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; choose from {sorted(CHECKS)}")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, list(CHECKS).index(name)])
        t0 = time.perf_counter()
        err = CHECKS[name](rng, eps)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
