"""Lightweight residual CNN family: bottleneck blocks, students and teacher."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .errors import SpecError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor

STUDENT_WIDTHS = (0.75, 1.0, 1.25)
TEACHER_WIDTH = 2.0
MIN_INPUT_SIZE = 16


def round_channels(base: int, width: float, divisor: int = 8) -> int:
    """Scale ``base`` by ``width`` and round to the nearest multiple of 8 (floor 8)."""
    return max(divisor, int(base * width / divisor + 0.5) * divisor)


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    dropout_rate: float = 0.1

    def validate(self) -> None:
        if self.out_channels % 2:
            raise SpecError(f"out_channels must be even, got {self.out_channels}")
        if self.stride not in (1, 2):
            raise SpecError(f"stride must be 1 or 2, got {self.stride}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.in_channels < 1:
            raise SpecError(f"in_channels must be positive, got {self.in_channels}")

    @property
    def identity_shortcut(self) -> bool:
        return self.in_channels == self.out_channels and self.stride == 1


@dataclass(frozen=True)
class ModelSpec:
    width_multiplier: float = 1.0
    stem_channels_base: int = 32
    stage_channels_base: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    num_classes: int = 2
    input_size: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "stage_channels_base", tuple(int(c) for c in self.stage_channels_base))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))

    @property
    def stem_channels(self) -> int:
        return round_channels(self.stem_channels_base, self.width_multiplier)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(round_channels(c, self.width_multiplier) for c in self.stage_channels_base)

    def validate(self) -> None:
        if len(self.stage_channels_base) != 4 or len(self.blocks_per_stage) != 4:
            raise SpecError("the network has exactly 4 stages")
        if any(b < 1 for b in self.blocks_per_stage):
            raise SpecError(f"every stage needs at least one block, got {self.blocks_per_stage}")
        if self.width_multiplier <= 0:
            raise SpecError(f"width multiplier must be positive, got {self.width_multiplier}")
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < MIN_INPUT_SIZE:
            raise SpecError(
                f"input_size {self.input_size} too small for 5 downsamplings (minimum {MIN_INPUT_SIZE})"
            )

    def block_specs(self) -> list[list[BlockSpec]]:
        stages = []
        c_in = self.stem_channels
        for s, (c_out, n_blocks) in enumerate(zip(self.stage_channels, self.blocks_per_stage)):
            blocks = []
            for b in range(n_blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BlockSpec(c_in, c_out, stride, self.dropout_rate))
                c_in = c_out
            stages.append(blocks)
        return stages

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels_base"] = list(self.stage_channels_base)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class ResidualBlock(Module):
    """1x1 reduce -> 3x3 (stride s) -> 1x1 expand, added to a shortcut."""

    def __init__(self, spec: BlockSpec):
        spec.validate()
        self.spec = spec
        mid = spec.out_channels // 2
        self.conv1 = Conv2d(spec.in_channels, mid, 1)
        self.bn1 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, mid, 3, stride=spec.stride, padding=1)
        self.bn2 = BatchNorm2d(mid)
        self.conv3 = Conv2d(mid, spec.out_channels, 1)
        self.bn3 = BatchNorm2d(spec.out_channels)
        self.shortcut = None if spec.identity_shortcut else Conv2d(
            spec.in_channels, spec.out_channels, 1, stride=spec.stride, bias=True
        )

    def forward(self, x, rng=None):
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = F.dropout_spatial(self.bn3(self.conv3(h)), self.spec.dropout_rate, self.training, rng)
        s = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + s)


class Network(Module):
    """Stem, four residual stages, global average pooling and a linear head."""

    def __init__(self, spec: ModelSpec):
        spec.validate()
        self.spec = spec
        self.stem_conv = Conv2d(3, spec.stem_channels, 3, stride=2, padding=1)
        self.stem_bn = BatchNorm2d(spec.stem_channels)
        self.stages = [ResidualBlock(b) for stage in spec.block_specs() for b in stage]
        self.head = Linear(spec.stage_channels[-1], spec.num_classes)

    def features(self, x: Tensor, rng=None) -> Tensor:
        h = F.relu(self.stem_bn(self.stem_conv(x)))
        h = F.maxpool2d(h, 3, 2, padding=1)
        for block in self.stages:
            h = block(h, rng)
        return F.flatten(F.global_avg_pool(h))

    def forward(self, x, rng=None):
        return self.head(self.features(x, rng))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        for module in _walk(self):
            if isinstance(module, (Conv2d, Linear)):
                module.reset(rng)


def _walk(module: Module):
    yield module
    for _, child in module.children():
        yield from _walk(child)


def build_residual_block(spec: BlockSpec, rng: np.random.Generator | None = None) -> ResidualBlock:
    block = ResidualBlock(spec)
    rng = rng if rng is not None else np.random.default_rng(0)
    for m in _walk(block):
        if isinstance(m, Conv2d):
            m.reset(rng)
    return block


def build_network(spec: ModelSpec, seed: int = 42) -> Network:
    net = Network(spec)
    net.reset_parameters(np.random.default_rng(seed))
    return net


def build_student(
    width: float,
    num_classes: int = 2,
    input_size: int = 64,
    *,
    seed: int = 42,
    base: ModelSpec | None = None,
) -> Network:
    """Student of the residual family at the given width multiplier."""
    base = base or ModelSpec()
    spec = ModelSpec(
        width_multiplier=float(width),
        stem_channels_base=base.stem_channels_base,
        stage_channels_base=base.stage_channels_base,
        blocks_per_stage=base.blocks_per_stage,
        num_classes=num_classes,
        input_size=input_size,
        dropout_rate=base.dropout_rate,
    )
    return build_network(spec, seed)


def teacher_spec(num_classes: int = 2, input_size: int = 64, base: ModelSpec | None = None) -> ModelSpec:
    base = base or ModelSpec()
    return ModelSpec(
        width_multiplier=TEACHER_WIDTH,
        stem_channels_base=base.stem_channels_base,
        stage_channels_base=base.stage_channels_base,
        blocks_per_stage=(3, 3, 3, 3),
        num_classes=num_classes,
        input_size=input_size,
        dropout_rate=base.dropout_rate,
    )


def build_teacher(num_classes: int = 2, input_size: int = 64, *, seed: int = 42, base: ModelSpec | None = None) -> Network:
    """Wide (2.0x, 3 blocks per stage) member of the same family."""
    return build_network(teacher_spec(num_classes, input_size, base), seed)


def count_parameters(net: Module) -> int:
    """Number of trainable scalars; batch-norm running stats are excluded."""
    return int(sum(p.size for p in net.parameters()))


def state_arrays(net: Module) -> dict[str, np.ndarray]:
    """Flat name -> array view of parameters and running statistics."""
    out = {name: p.data for name, p in net.named_parameters()}
    for name, st in net.named_states():
        out[f"{name}.running_mean"] = st.mean
        out[f"{name}.running_var"] = st.var
    return out


def snapshot(net: Module) -> dict:
    """Deep copy of every tensor and batch-norm counter."""
    return {
        "arrays": {k: v.copy() for k, v in state_arrays(net).items()},
        "tracked": {name: st.tracked for name, st in net.named_states()},
    }


def restore(net: Module, snap: dict) -> None:
    params = dict(net.named_parameters())
    states = dict(net.named_states())
    for key, arr in snap["arrays"].items():
        if key in params:
            params[key].data[...] = arr
        elif key.endswith(".running_mean"):
            states[key[: -len(".running_mean")]].mean = arr.copy()
        elif key.endswith(".running_var"):
            states[key[: -len(".running_var")]].var = arr.copy()
    for name, tracked in snap["tracked"].items():
        states[name].tracked = tracked


def round_to_float32(net: Module) -> None:
    """Snap every stored value to the nearest float32 so checkpoints are lossless."""
    for p in net.parameters():
        p.data[...] = p.data.astype(np.float32)
    for _, st in net.named_states():
        st.mean = st.mean.astype(np.float32).astype(np.float64)
        st.var = st.var.astype(np.float32).astype(np.float64)


def freeze(net: Module) -> None:
    for p in net.parameters():
        p.requires_grad = False
