"""Discriminative Feature Network at desk scale.

A five-stage toy backbone feeds two branches:

* the Smooth Network, a top-down V-shaped decoder that refines every stage with
  a Refinement Residual Block (RRB), injects global-average-pooled context at
  the top and fuses adjacent stages with a Channel Attention Block (CAB);
* the Border Network, a bottom-up branch that predicts semantic boundaries.

Parameters are named by dotted paths (``smooth.stage4.cab.fc1.weight``) and
initialised from a stream keyed by ``(init_seed, name)``, so disabling a branch
never changes the initial values of the others.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError
from .tensor import NARROW, Tensor

TOGGLES = ("use_rrb", "use_gp", "use_cab", "use_ds", "use_border")


@dataclass
class ModelConfig:
    num_classes: int = 4
    input_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    unified_channels: int = 32
    use_rrb: bool = True
    use_gp: bool = True
    use_cab: bool = True
    use_ds: bool = True
    use_border: bool = True
    init_seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 5:
            raise ConfigurationError(f"stage_channels needs 5 entries, got {len(self.stage_channels)}")
        for name in ("num_classes", "input_channels", "unified_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigurationError("stage_channels must be positive")

    def toggles(self) -> dict[str, bool]:
        return {k: getattr(self, k) for k in TOGGLES}

    def with_toggles(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                out[f.name] = "1" if v else "0"
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name == "stage_channels":
                kw[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.type in ("bool", bool):
                kw[f.name] = raw == "1"
            elif f.type in ("float", float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


class Param:
    """A named trainable tensor plus its SGD momentum buffer."""

    __slots__ = ("name", "value", "momentum_buf")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.value = Tensor(data, requires_grad=True)
        self.momentum_buf = np.zeros_like(self.value.data)

    @property
    def grad(self):
        return self.value.grad

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


class Module:
    """Minimal container that discovers parameters through its attributes."""

    training = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for i, item in val.items():
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def own_params(self) -> Iterator[Param]:
        for val in vars(self).values():
            if isinstance(val, Param):
                yield val

    def parameters(self) -> Iterator[Param]:
        yield from self.own_params()
        for _, child in self.named_children():
            yield from child.parameters()

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype):
        """Cast parameters, momentum buffers and running stats in place."""
        for p in self.parameters():
            p.value = Tensor(p.value.data.astype(dtype), requires_grad=True)
            p.momentum_buf = p.momentum_buf.astype(dtype)
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.stats.mean = m.stats.mean.astype(dtype)
                m.stats.var = m.stats.var.astype(dtype)
        return self


class Conv(Module):
    """He-initialised convolution; ``bias=False`` for convs feeding a batch norm."""

    def __init__(self, name, cin, cout, k, seed, stride=1, padding=None, bias=True):
        self.stride = stride
        self.padding = (k // 2) if padding is None else padding
        fan_in = cin * k * k
        w = _param_rng(seed, f"{name}.weight").normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        self.weight = Param(f"{name}.weight", w.astype(NARROW))
        self.bias = Param(f"{name}.bias", np.zeros(cout, NARROW)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        b = self.bias.value if self.bias is not None else None
        return ops.conv2d(x, self.weight.value, b, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, name: str, channels: int, momentum: float, eps: float):
        self.gamma = Param(f"{name}.gamma", np.ones(channels, NARROW))
        self.beta = Param(f"{name}.beta", np.zeros(channels, NARROW))
        self.stats = ops.RunningStats.fresh(channels)
        self.name = name
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x,
            self.gamma.value,
            self.beta.value,
            self.stats,
            "train" if self.training else "eval",
            self.momentum,
            self.eps,
        )


class ConvBNReLU(Module):
    def __init__(self, name, cin, cout, cfg: ModelConfig, stride=1, padding=None):
        self.conv = Conv(f"{name}.conv", cin, cout, 3, cfg.init_seed, stride, padding, bias=False)
        self.bn = BatchNorm(f"{name}.bn", cout, cfg.bn_momentum, cfg.bn_eps)

    def __call__(self, x):
        return ops.relu(self.bn(self.conv(x)))


class Backbone(Module):
    """Five stages; each halves the resolution with a stride-2 3x3 conv."""

    def __init__(self, cfg: ModelConfig):
        self.stages = []
        cin = cfg.input_channels
        for s, cout in enumerate(cfg.stage_channels, start=1):
            # (0, 1) padding makes the stride-2 3x3 conv halve even sizes exactly
            down = ConvBNReLU(f"backbone.stage{s}.down", cin, cout, cfg, stride=2, padding=(0, 1))
            refine = ConvBNReLU(f"backbone.stage{s}.refine", cout, cout, cfg)
            self.stages.append(_Seq(down, refine))
            cin = cout

    def __call__(self, image: Tensor) -> list[Tensor]:
        h, w = image.shape[2], image.shape[3]
        if h % 32 or w % 32:
            raise ConfigurationError(f"input spatial size {h}x{w} must be divisible by 32")
        feats, x = [], image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class _Seq(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class RRB(Module):
    """Refinement Residual Block: 1x1 unify conv, then a basic residual block.

    With ``residual=False`` the block is only the 1x1 unify conv.
    """

    def __init__(self, name: str, cin: int, cfg: ModelConfig, residual: bool = True):
        u = cfg.unified_channels
        self.residual = residual
        self.unify = Conv(f"{name}.unify", cin, u, 1, cfg.init_seed)
        if residual:
            self.conv1 = Conv(f"{name}.conv1", u, u, 3, cfg.init_seed, bias=False)
            self.bn = BatchNorm(f"{name}.bn", u, cfg.bn_momentum, cfg.bn_eps)
            self.conv2 = Conv(f"{name}.conv2", u, u, 3, cfg.init_seed)

    def __call__(self, x: Tensor) -> Tensor:
        t = self.unify(x)
        if not self.residual:
            return t
        r = self.conv2(ops.relu(self.bn(self.conv1(t))))
        return ops.relu(ops.add(t, r))


class CAB(Module):
    """Channel Attention Block.

    ``alpha = sigmoid(fc2(relu(fc1(gap(concat(high, low))))))`` re-weights the
    low-stage feature, and the result is summed with the high-stage feature.
    """

    def __init__(self, name: str, cfg: ModelConfig):
        u = cfg.unified_channels
        hidden = max(u // 4, 4)
        self.fc1 = Conv(f"{name}.fc1", 2 * u, hidden, 1, cfg.init_seed)
        self.fc2 = Conv(f"{name}.fc2", hidden, u, 1, cfg.init_seed)

    def attention(self, low: Tensor, high: Tensor) -> Tensor:
        g = ops.global_avg_pool(ops.concat_channels(high, low))
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(g))))

    def __call__(self, low: Tensor, high: Tensor, alpha_override: Tensor | None = None):
        if low.shape != high.shape:
            raise DimensionError(f"CAB needs matching low/high shapes, got {low.shape} vs {high.shape}")
        alpha = self.attention(low, high) if alpha_override is None else alpha_override
        fused = ops.add(ops.channel_scale(low, alpha), high)
        return fused, alpha


class SmoothNetwork(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        u, k = cfg.unified_channels, cfg.num_classes
        chans = cfg.stage_channels
        self.rrb_in = [RRB(f"smooth.stage{s}.rrb_in", chans[s - 1], cfg, cfg.use_rrb) for s in range(1, 6)]
        # stage 5 has no post-fusion RRB; keep list indices aligned with stages
        self.rrb_out = [RRB(f"smooth.stage{s}.rrb_out", u, cfg, cfg.use_rrb) for s in range(1, 5)]
        cab_stages = range(1, 6) if cfg.use_gp else range(1, 5)
        self.cab = {s: CAB(f"smooth.stage{s}.cab", cfg) for s in cab_stages} if cfg.use_cab else {}
        self.gp = Conv("smooth.gp.conv", chans[4], u, 1, cfg.init_seed) if cfg.use_gp else None
        # auxiliary heads exist only for deep supervision
        heads = range(1, 6) if cfg.use_ds else range(1, 2)
        self.classifier = [Conv(f"smooth.stage{s}.cls", u, k, 1, cfg.init_seed) for s in heads]

    def _fuse(self, s: int, low: Tensor, high: Tensor, alphas: list[Tensor]) -> Tensor:
        if self.cfg.use_cab:
            fused, alpha = self.cab[s](low, high)
            alphas.append(alpha)
            return fused
        return ops.add(low, high)

    def global_context(self, top: Tensor) -> Tensor:
        """The global-pooling guidance broadcast over the top stage's grid."""
        g = self.gp(ops.global_avg_pool(top))
        return ops.expand_spatial(g, top.shape[2], top.shape[3])

    def __call__(self, feats: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
        alphas: list[Tensor] = []
        v = self.rrb_in[4](feats[4])
        if self.cfg.use_gp:
            v = self._fuse(5, v, self.global_context(feats[4]), alphas)
        stage_out = {5: v}
        for s in range(4, 0, -1):
            high = ops.upsample_bilinear(v, 2)
            v = self.rrb_out[s - 1](self._fuse(s, self.rrb_in[s - 1](feats[s - 1]), high, alphas))
            stage_out[s] = v
        heads = range(len(self.classifier), 0, -1)
        scores = [ops.upsample_bilinear(self.classifier[s - 1](stage_out[s]), 2**s) for s in heads]
        return scores, alphas


class BorderNetwork(Module):
    """Bottom-up boundary branch over stages 1-4; one logit map per fusion."""

    def __init__(self, cfg: ModelConfig):
        u = cfg.unified_channels
        chans = cfg.stage_channels
        self.rrb_in = [RRB(f"border.stage{s}.rrb_in", chans[s - 1], cfg) for s in range(1, 5)]
        self.rrb_out = [RRB(f"border.stage{s}.rrb_out", u, cfg) for s in range(2, 5)]
        self.classifier = [Conv(f"border.stage{s}.cls", u, 1, 1, cfg.init_seed) for s in range(2, 5)]

    def __call__(self, feats: list[Tensor]) -> list[Tensor]:
        b = self.rrb_in[0](feats[0])
        scores = []
        for s in range(2, 5):
            b = self.rrb_out[s - 2](ops.add(ops.max_pool(b, 2), self.rrb_in[s - 1](feats[s - 1])))
            scores.append(ops.upsample_bilinear(self.classifier[s - 2](b), 2**s))
        return scores


@dataclass
class DFNOutput:
    seg_scores: list[Tensor]
    border_scores: list[Tensor] = field(default_factory=list)
    attention_vectors: list[Tensor] = field(default_factory=list)

    @property
    def seg_final(self) -> Tensor:
        return self.seg_scores[-1]

    def prediction(self) -> np.ndarray:
        """Per-pixel argmax of the final score map, shape [N,H,W], dtype uint8."""
        return self.seg_final.data.argmax(axis=1).astype(np.uint8)


class DFN(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.smooth = SmoothNetwork(cfg)
        self.border = BorderNetwork(cfg) if cfg.use_border else None

    def __call__(self, image: Tensor) -> DFNOutput:
        if image.dtype != self.dtype and not image.requires_grad:
            image = Tensor(image.data.astype(self.dtype))
        feats = self.backbone(image)
        seg, alphas = self.smooth(feats)
        border = self.border(feats) if self.border is not None else []
        return DFNOutput(seg, border, alphas)

    forward = __call__

    @property
    def dtype(self):
        return next(self.parameters()).value.dtype

    def named_params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for p in self.parameters():
            if p.name in out:
                raise ConfigurationError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def batch_norms(self) -> dict[str, BatchNorm]:
        return {m.name: m for m in self.modules() if isinstance(m, BatchNorm)}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.value.zero_grad()

    def clear_grad(self) -> None:
        for p in self.parameters():
            p.value.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array map of everything a checkpoint must hold."""
        out = {}
        for name, p in self.named_params().items():
            out[name] = p.value.data
        for name, bn in self.batch_norms().items():
            out[f"{name}.running_mean"] = bn.stats.mean
            out[f"{name}.running_var"] = bn.stats.var
        for name, p in self.named_params().items():
            out[f"optim.momentum.{name}"] = p.momentum_buf
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        bns = self.batch_norms()
        expected = set(self.state())
        missing = expected - set(state)
        if missing:
            raise ConfigurationError(f"checkpoint lacks {len(missing)} entries, e.g. {sorted(missing)[0]}")
        for name, p in params.items():
            p.value = Tensor(state[name].copy(), requires_grad=True)
            p.momentum_buf = state[f"optim.momentum.{name}"].copy()
        for name, bn in bns.items():
            bn.stats.mean = state[f"{name}.running_mean"].copy()
            bn.stats.var = state[f"{name}.running_var"].copy()


def dfn_forward(image: Tensor, model: DFN) -> DFNOutput:
    return model(image)
