"""Early-forking two-branch network.

    x -> f_b -> f_c -> g_c   (activity)
            \\-> f_d -> g_d   (domain)

Each feature extractor is conv -> ReLU -> max-pool. CDPL heads
(FC -> BN -> ReLU -> FC) project branch features for the consistency loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import nncore as nn
from .nncore import Parameter, Tensor


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int
    width: int
    num_classes: int
    num_domains: int
    base_filters: int = 16
    base_kernel: int = 9
    base_stride: int = 1
    base_pool: int = 2
    branch_filters: int = 32
    branch_kernel: int = 9
    branch_stride: int = 1
    branch_pool: int = 2
    cdpl_hidden: int = 128
    cdpl_shared: bool = False
    early_fork: bool = True
    with_noncausal: bool = True

    def stage_widths(self) -> dict[str, int]:
        w = {"input": self.width}
        w["base_conv"] = nn.conv_output_width(w["input"], self.base_kernel, self.base_stride)
        w["base_pool"] = w["base_conv"] // self.base_pool if w["base_conv"] >= 1 else 0
        w["branch_conv"] = nn.conv_output_width(w["base_pool"], self.branch_kernel, self.branch_stride)
        w["branch_pool"] = w["branch_conv"] // self.branch_pool if w["branch_conv"] >= 1 else 0
        return w

    @property
    def base_width(self) -> int:
        return self.stage_widths()["base_pool"]

    @property
    def feature_dim(self) -> int:
        return self.branch_filters * self.stage_widths()["branch_pool"]

    def validate(self) -> None:
        bad = [name for name, w in self.stage_widths().items() if w < 1]
        if bad:
            raise ValueError(f"non-positive feature width at stage(s) {bad}: {self.stage_widths()}")
        for name in ("in_channels", "num_classes", "num_domains", "base_filters", "branch_filters", "cdpl_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "dsads": dict(in_channels=45, width=125, num_classes=19, num_domains=4),
    # base conv 32 x (1x25), pool 3: 200 -> 176 -> 58 wide base map
    "uschad": dict(in_channels=6, width=200, num_classes=12, num_domains=4,
                   base_filters=32, base_kernel=25, base_pool=3),
    "pamap2": dict(in_channels=27, width=200, num_classes=12, num_domains=4),
    "ucihar": dict(in_channels=6, width=50, num_classes=6, num_domains=4,
                   base_kernel=5, branch_kernel=5),
    "dsads-position": dict(in_channels=9, width=125, num_classes=19, num_domains=5),
    "synthetic": dict(in_channels=3, width=48, num_classes=4, num_domains=4,
                      base_filters=16, base_kernel=7, branch_filters=16, branch_kernel=5,
                      cdpl_hidden=64),
}


def preset(name: str, **overrides) -> ArchConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = ArchConfig(**{**PRESETS[name], **overrides})
    cfg.validate()
    return cfg


class Module:
    """Minimal container: subclasses list child modules / parameters as attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        seen: set[int] = set()
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                if id(val) not in seen:
                    out[val.name] = val
                    seen.add(id(val))
            elif isinstance(val, Module):
                for name, p in val.named_parameters().items():
                    if id(p) not in seen:
                        out[name] = p
                        seen.add(id(p))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for val in vars(self).values():
            if isinstance(val, Module):
                out.update(val.buffers())
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, Module):
                val.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class ConvBlock(Module):
    def __init__(self, name: str, cin: int, cout: int, kernel: int, stride: int, pool: int,
                 rng: np.random.Generator):
        self.weight = Parameter(_he_normal(rng, (cout, cin, 1, kernel), cin * kernel), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")
        self.stride = stride
        self.pool = pool

    def __call__(self, x) -> Tensor:
        h = nn.conv1d(x, self.weight, self.bias, self.stride)
        return nn.maxpool1d(nn.relu(h), self.pool)


class Linear(Module):
    def __init__(self, name: str, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_he_normal(rng, (dout, din), din), f"{name}.weight")
        # a bias feeding straight into batch norm is cancelled by it, so it can be left out
        self.bias = Parameter(np.zeros(dout), f"{name}.bias") if bias else np.zeros(dout)

    def __call__(self, x) -> Tensor:
        return nn.fully_connected(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, name: str, dim: int):
        self.name = name
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def __call__(self, x) -> Tensor:
        return nn.batch_norm(x, self.gamma, self.beta, self.training, self.running_mean, self.running_var)


class CDPL(Module):
    """Projection head FC -> BN -> ReLU -> FC, output width equals input width."""

    def __init__(self, name: str, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(f"{name}.fc1", dim, hidden, rng, bias=False)
        self.bn = BatchNorm(f"{name}.bn", hidden)
        self.fc2 = Linear(f"{name}.fc2", hidden, dim, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(nn.relu(self.bn(self.fc1(x))))


@dataclass
class BranchOutputs:
    base: Tensor
    base_aug: Tensor | None
    Fc_x: Tensor
    Fd_x: Tensor | None
    Fc_a: Tensor | None
    Fd_a: Tensor | None
    cdpl_c_x: Tensor | None
    cdpl_c_a: Tensor | None
    cdpl_d_x: Tensor | None
    cdpl_d_a: Tensor | None
    act_logits: Tensor
    act_logits_aug: Tensor | None
    dom_logits: Tensor | None
    dom_logits_aug: Tensor | None

    @property
    def batch_size(self) -> int:
        return self.Fc_x.shape[0]


class TwoBranchNet(Module):
    def __init__(self, config: ArchConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        D = c.feature_dim
        self.f_b = ConvBlock("f_b", c.in_channels, c.base_filters, c.base_kernel, c.base_stride, c.base_pool, rng)
        self.f_c = ConvBlock("f_c", c.base_filters, c.branch_filters, c.branch_kernel, c.branch_stride,
                             c.branch_pool, rng)
        self.g_c = Linear("g_c", D, c.num_classes, rng)
        # the optional parts are always initialized so parameter draws stay
        # aligned across variants that share a seed
        f_d = ConvBlock("f_d", c.base_filters, c.branch_filters, c.branch_kernel, c.branch_stride,
                        c.branch_pool, rng)
        g_d = Linear("g_d", D, c.num_domains, rng)
        cdpl_c = CDPL("cdpl_c", D, c.cdpl_hidden, rng)
        cdpl_d = CDPL("cdpl_d", D, c.cdpl_hidden, rng)
        if c.with_noncausal:
            self.f_d = f_d if c.early_fork else self.f_c
            self.g_d = g_d
            self.cdpl_c = cdpl_c
            self.cdpl_d = cdpl_c if c.cdpl_shared else cdpl_d

    # feature extractors ---------------------------------------------------

    def base_features(self, x) -> Tensor:
        return self.f_b(x)

    def causal_features(self, base) -> Tensor:
        return nn.flatten(self.f_c(base))

    def noncausal_features(self, base) -> Tensor:
        return nn.flatten(self.f_d(base))

    def inference_parameters(self) -> dict[str, Parameter]:
        out = {}
        for mod in (self.f_b, self.f_c, self.g_c):
            out.update(mod.named_parameters())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters().items()}
        out.update({name: b.copy() for name, b in self.buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        bufs = self.buffers()
        for name, p in params.items():
            if name in state:
                if state[name].shape != p.data.shape:
                    raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
                p.data = np.array(state[name], dtype=np.float64)
            elif strict:
                raise KeyError(f"missing parameter {name}")
        for name, b in bufs.items():
            if name in state:
                b[...] = state[name]
            elif strict:
                raise KeyError(f"missing buffer {name}")


def build(config: ArchConfig, seed: int = 0) -> TwoBranchNet:
    return TwoBranchNet(config, seed)


def cdpl(model: TwoBranchNet, feature, branch: str) -> Tensor:
    head = {"causal": model.cdpl_c, "non-causal": model.cdpl_d}.get(branch)
    if head is None:
        raise ValueError(f"branch must be 'causal' or 'non-causal', got {branch!r}")
    return head(feature)


def forward_train(model: TwoBranchNet, x, ids_fn: Callable[[Tensor], Tensor] | None,
                  use_cdpl: bool = True) -> BranchOutputs:
    """All training-time products for one batch.

    ``ids_fn=None`` skips augmentation. Without a non-causal branch only the
    activity path is evaluated.
    """
    base = model.base_features(x)
    base_aug = ids_fn(base) if ids_fn is not None else None
    Fc_x = model.causal_features(base)
    Fc_a = model.causal_features(base_aug) if base_aug is not None else None
    act = model.g_c(Fc_x)
    act_aug = model.g_c(Fc_a) if Fc_a is not None else None
    if not model.config.with_noncausal:
        return BranchOutputs(base, base_aug, Fc_x, None, Fc_a, None, None, None, None, None,
                             act, act_aug, None, None)
    Fd_x = model.noncausal_features(base)
    Fd_a = model.noncausal_features(base_aug) if base_aug is not None else None
    dom = model.g_d(Fd_x)
    dom_aug = model.g_d(Fd_a) if Fd_a is not None else None
    proj = {}
    if use_cdpl and Fc_a is not None:
        proj = dict(
            cdpl_c_x=cdpl(model, Fc_x, "causal"),
            cdpl_c_a=cdpl(model, Fc_a, "causal"),
            cdpl_d_x=cdpl(model, Fd_x, "non-causal"),
            cdpl_d_a=cdpl(model, Fd_a, "non-causal"),
        )
    elif Fc_a is not None:
        # without projection heads the consistency terms compare raw features
        proj = dict(cdpl_c_x=Fc_x, cdpl_c_a=Fc_a, cdpl_d_x=Fd_x, cdpl_d_a=Fd_a)
    return BranchOutputs(
        base=base, base_aug=base_aug, Fc_x=Fc_x, Fd_x=Fd_x, Fc_a=Fc_a, Fd_a=Fd_a,
        cdpl_c_x=proj.get("cdpl_c_x"), cdpl_c_a=proj.get("cdpl_c_a"),
        cdpl_d_x=proj.get("cdpl_d_x"), cdpl_d_a=proj.get("cdpl_d_a"),
        act_logits=act, act_logits_aug=act_aug, dom_logits=dom, dom_logits_aug=dom_aug,
    )


def forward_infer(model: TwoBranchNet, x) -> Tensor:
    """Activity logits through f_b -> f_c -> g_c only."""
    return model.g_c(model.causal_features(model.base_features(x)))


def with_config(config: ArchConfig, **changes) -> ArchConfig:
    out = replace(config, **changes)
    out.validate()
    return out
