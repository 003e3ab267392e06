"""Encoder-decoder translation network mapping kV slices to MV predictions.

A UNet-style design: per stage two 3x3 conv + norm + ReLU, 2x max-pool down,
nearest-upsample + 3x3 conv up, skip connections by channel concatenation,
and a final 1x1 conv + tanh so outputs live in (-1, 1) like the normalized
data.  The default width (base_channels=15 at depth 4) is solved so the
trainable parameter count lands on the ~1.88 M budget.

``param_count`` and the module construction share one layer plan, so the
closed-form count always equals the instantiated tensor-element sum.
"""

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass

import torch
from torch import nn

PARAM_BUDGET = 1_882_000


@dataclass
class ModelConfig:
    depth: int = 4
    base_channels: int = 15
    in_channels: int = 1
    out_channels: int = 1
    norm: str = "batch"  # batch or instance
    output_activation: str = "tanh"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.norm not in ("batch", "instance"):
            raise ValueError(f"norm must be batch or instance, got {self.norm!r}")
        if self.output_activation != "tanh":
            raise ValueError("only tanh output is supported")

    def to_dict(self):
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "norm": self.norm,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:16]


def _layer_plan(config: ModelConfig):
    """Conv/norm shapes in construction order; single source of truth for the
    module and for the closed-form parameter count."""
    c = config.base_channels
    plan = []  # (name, kind, in_ch, out_ch, kernel)
    for i in range(config.depth):
        cin = config.in_channels if i == 0 else c * 2 ** (i - 1)
        cout = c * 2**i
        plan.append((f"enc{i}", "block", cin, cout, 3))
    plan.append(("bottleneck", "block", c * 2 ** (config.depth - 1), c * 2**config.depth, 3))
    for i in reversed(range(config.depth)):
        cout = c * 2**i
        plan.append((f"up{i}", "conv", cout * 2, cout, 3))
        plan.append((f"dec{i}", "block", cout * 2, cout, 3))
    plan.append(("head", "conv_plain", c, config.out_channels, 1))
    return plan


def param_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for a config."""

    def conv(cin, cout, k):
        return k * k * cin * cout + cout

    total = 0
    for _, kind, cin, cout, k in _layer_plan(config):
        if kind == "block":
            # two convs, each followed by an affine norm
            total += conv(cin, cout, k) + 2 * cout
            total += conv(cout, cout, k) + 2 * cout
        elif kind == "conv":
            total += conv(cin, cout, k)
        else:
            total += conv(cin, cout, k)
    return total


def _norm_layer(config, channels):
    if config.norm == "batch":
        return nn.BatchNorm2d(channels)
    return nn.InstanceNorm2d(channels, affine=True)


class _Block(nn.Sequential):
    def __init__(self, config, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            _norm_layer(config, cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            _norm_layer(config, cout),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.encoders = nn.ModuleList()
        for i in range(config.depth):
            cin = config.in_channels if i == 0 else c * 2 ** (i - 1)
            self.encoders.append(_Block(config, cin, c * 2**i))
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _Block(config, c * 2 ** (config.depth - 1), c * 2**config.depth)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.up_convs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(config.depth)):
            cout = c * 2**i
            self.up_convs.append(nn.Conv2d(cout * 2, cout, 3, padding=1))
            self.decoders.append(_Block(config, cout * 2, cout))
        self.head = nn.Conv2d(c, config.out_channels, 1)

    def forward(self, x):
        d = x.shape[-1]
        if x.dim() != 4 or x.shape[1] != self.config.in_channels or x.shape[-2] != d:
            raise ValueError(f"expected [B, {self.config.in_channels}, d, d], got {tuple(x.shape)}")
        if d % 2**self.config.depth != 0:
            raise ValueError(
                f"input side {d} not divisible by 2^depth = {2 ** self.config.depth}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up_convs, self.decoders, reversed(skips)):
            x = up(self.upsample(x))
            x = dec(torch.cat([x, skip], dim=1))
        return torch.tanh(self.head(x))


@dataclass
class ModelParams:
    """Named trainable tensors of a network, tied to the config that shaped them."""

    config: ModelConfig
    tensors: "OrderedDict[str, torch.Tensor]"

    @property
    def total_count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def _seeded_init(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_model(config: ModelConfig, seed: int = 0) -> UNet:
    """Instantiate the network with deterministic Kaiming fan-in init."""
    net = UNet(config)
    _seeded_init(net, seed)
    return net


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    net = build_model(config, seed)
    tensors = OrderedDict((name, p.detach().clone()) for name, p in net.named_parameters())
    return ModelParams(config=config, tensors=tensors)


def forward(params: ModelParams, batch) -> torch.Tensor:
    """Evaluation-mode forward through the weights in ``params``.

    Differentiable with respect to both the batch and the parameter tensors
    (the module is called functionally, no state is copied).
    """
    x = torch.as_tensor(batch)
    net = UNet(params.config)
    net.to(x.dtype)
    net.eval()
    return torch.func.functional_call(net, dict(params.tensors), (x,))
