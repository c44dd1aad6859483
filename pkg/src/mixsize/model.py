"""CIFAR-style residual networks built on the tensor core, plus flop counting."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import ops
from .calib import BNStats
from .tensor import Tensor, get_default_dtype

MIN_SIZE = 8


class ConfigError(ValueError):
    pass


class SizeError(ValueError):
    pass


def Parameter(data, decay: bool = False) -> Tensor:
    t = Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)
    t.decay = decay
    return t


class Module:
    """Minimal container: attribute-registered parameters and submodules."""

    mode = "train"

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for prefix, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    yield (f"{prefix}.{name}" if prefix else name), value

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def bn_layers(self) -> Iterator[Tuple[str, "BatchNorm2d"]]:
        for name, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d):
                yield name, mod

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_mode(self, mode: str) -> "Module":
        if mode not in ("train", "eval", "capture"):
            raise ValueError(f"unknown mode {mode!r}")
        for _, mod in self.named_modules():
            mod.mode = mode
        return self

    def train(self) -> "Module":
        return self.set_mode("train")

    def eval(self) -> "Module":
        return self.set_mode("eval")

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def bn_state(self) -> Dict[str, dict]:
        return {name: layer.stats.state() for name, layer in self.bn_layers()}

    def load_bn_state(self, state: Dict[str, dict]) -> None:
        for name, layer in self.bn_layers():
            layer.stats.load(state[name])

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def flops(self, hw: Tuple[int, int]) -> Tuple[int, Tuple[int, int]]:
        return 0, hw


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, pad=0, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = cin * kernel * kernel
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, kernel, kernel)), decay=True)
        self.stride, self.pad, self.kernel = stride, pad, kernel
        self.cin, self.cout = cin, cout

    def forward(self, x):
        return ops.conv2d(x, self.weight, None, self.stride, self.pad)

    def flops(self, hw):
        ho = ops.conv_output_size(hw[0], self.kernel, self.stride, self.pad)
        wo = ops.conv_output_size(hw[1], self.kernel, self.stride, self.pad)
        return 2 * ho * wo * self.cout * self.cin * self.kernel * self.kernel, (ho, wo)


class BatchNorm2d(Module):
    eps = 1e-5
    momentum = 0.1

    def __init__(self, channels, zero_init=False):
        self.gamma = Parameter(np.zeros(channels) if zero_init else np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.stats = BNStats(channels)

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.stats, self.mode, self.eps, self.momentum)


class Linear(Module):
    def __init__(self, fin, fout, rng=None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(fin)
        self.weight = Parameter(rng.uniform(-bound, bound, (fout, fin)), decay=True)
        self.bias = Parameter(np.zeros(fout))
        self.fin, self.fout = fin, fout

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def flops(self, hw):
        return 2 * self.fin * self.fout, (1, 1)


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with a residual connection."""

    def __init__(self, cin, cout, stride, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng)
        self.bn2 = BatchNorm2d(cout, zero_init=True)
        if stride != 1 or cin != cout:
            self.short_conv = Conv2d(cin, cout, 1, stride, 0, rng)
            self.short_bn = BatchNorm2d(cout)
        else:
            self.short_conv = None

    def forward(self, x):
        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = self.short_bn(self.short_conv(x)) if self.short_conv is not None else x
        return ops.relu(ops.add(out, skip))

    def flops(self, hw):
        f1, hw1 = self.conv1.flops(hw)
        f2, hw2 = self.conv2.flops(hw1)
        f3 = self.short_conv.flops(hw)[0] if self.short_conv is not None else 0
        return f1 + f2 + f3, hw2


@dataclass
class ResNetConfig:
    depth: int = 8
    base_width: int = 16
    num_classes: int = 10
    in_channels: int = 3

    def validate(self) -> None:
        if self.depth < 8 or (self.depth - 2) % 6:
            raise ConfigError(f"depth must be 6n+2 with n >= 1, got {self.depth}")
        if self.base_width < 1 or self.num_classes < 2:
            raise ConfigError("base_width must be >= 1 and num_classes >= 2")

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // 6

    def to_dict(self) -> dict:
        return asdict(self)


class ResNet(Module):
    strides = (1, 2, 2)

    def __init__(self, cfg: ResNetConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        self.stem = Conv2d(cfg.in_channels, w, 3, 1, 1, rng)
        self.stem_bn = BatchNorm2d(w)
        self.blocks = []
        cin = w
        for stage, stride in enumerate(self.strides):
            cout = w * 2 ** stage
            for i in range(cfg.blocks_per_stage):
                self.blocks.append(BasicBlock(cin, cout, stride if i == 0 else 1, rng))
                cin = cout
        self.fc = Linear(cin, cfg.num_classes, rng)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        s = min(x.shape[-2:])
        if s < MIN_SIZE:
            raise SizeError(f"input size {s} below the minimum of {MIN_SIZE}")
        out = ops.relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            out = block(out)
        out = ops.flatten(ops.global_avg_pool(out))
        return self.fc(out)

    def flops(self, hw):
        total, hw = self.stem.flops(hw)
        for block in self.blocks:
            f, hw = block.flops(hw)
            total += f
        return total + self.fc.flops(hw)[0], (1, 1)


def build_resnet(cfg: ResNetConfig, rng=None) -> ResNet:
    """Construct a ResNet-(6n+2); ``rng`` is a seeded Generator or an int seed."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return ResNet(cfg, rng)


def model_flops(model: Module, S: int) -> int:
    """Multiply-accumulate count x2 over conv and linear layers at input size ``S``."""
    if S < MIN_SIZE:
        raise SizeError(f"input size {S} below the minimum of {MIN_SIZE}")
    return int(model.flops((S, S))[0])


def parameter_count(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def checksum(model: Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
