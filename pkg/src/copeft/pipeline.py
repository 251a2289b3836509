"""The fixed collaborative-perception architecture.

Per-agent encoder, per-cell attention fusion across agents, detection heads,
the detection loss, and the full forward wiring with optional adaptation
insertion points. With every insertion disabled the forward pass is the
plain intermediate-collaboration model, bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .nn_core import (
    ParamRegistry,
    ParamTensors,
    Tensor,
    bce_with_logits_sum,
    concat,
    conv2d,
    linear,
    matmul,
    relu,
    reshape,
    select,
    smooth_l1_sum,
    softmax,
    transpose,
)

if TYPE_CHECKING:
    from .peft import MethodConfig

_BCE_POS_WEIGHT_CAP = 100.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    One 3x3 conv + ReLU per entry of `encoder_strides`; the hidden channel
    widths are `encoder_widths` and the final conv emits `c` channels. The
    observation grid is `h0` x `w0` cells of `cell_m` metres; features live
    on the grid downsampled by the product of the strides.
    """

    c_in: int = 2
    c: int = 16
    encoder_widths: tuple[int, ...] = (32, 192)
    encoder_strides: tuple[int, ...] = (2, 2, 1)
    fusion_layers: int = 1
    attn_width: int = 16
    cell_m: float = 1.0
    h0: int = 64
    w0: int = 32
    bottleneck_rate: int = 4
    adapter_kernel: int = 1
    fusion_residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "encoder_strides", tuple(self.encoder_strides))
        if min(self.c_in, self.c, self.fusion_layers, self.attn_width,
               self.h0, self.w0, self.bottleneck_rate) < 1 or self.cell_m <= 0:
            raise ConfigError("all ModelConfig dimensions must be positive")
        if len(self.encoder_widths) + 1 != len(self.encoder_strides):
            raise ConfigError(
                f"need one stride per conv: {len(self.encoder_widths)} widths "
                f"imply {len(self.encoder_widths) + 1} convs, got "
                f"{len(self.encoder_strides)} strides")
        if self.h0 % self.stride_total or self.w0 % self.stride_total:
            raise ConfigError(
                f"grid {self.h0}x{self.w0} not divisible by total stride {self.stride_total}")
        if self.c % self.bottleneck_rate:
            raise ConfigError(
                f"bottleneck rate {self.bottleneck_rate} does not divide c={self.c}")
        if self.adapter_kernel < 1 or self.adapter_kernel % 2 == 0:
            raise ConfigError(f"adapter kernel must be odd, got {self.adapter_kernel}")

    @property
    def stride_total(self) -> int:
        return int(np.prod(self.encoder_strides))

    @property
    def feat_h(self) -> int:
        return self.h0 // self.stride_total

    @property
    def feat_w(self) -> int:
        return self.w0 // self.stride_total

    @property
    def feat_cell_m(self) -> float:
        return self.cell_m * self.stride_total

    def to_json(self) -> str:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["encoder_widths"] = list(self.encoder_widths)
        d["encoder_strides"] = list(self.encoder_strides)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        return cls(**d)

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass(frozen=True)
class GridGeometry:
    """Mapping between world metres and feature-map cells.

    Column j spans x in [x_min + j*cell, x_min + (j+1)*cell); row i spans y
    analogously.
    """

    x_min: float
    y_min: float
    cell: float
    h: int
    w: int

    def cell_of(self, x: float, y: float) -> Optional[tuple[int, int]]:
        j = int(math.floor((x - self.x_min) / self.cell))
        i = int(math.floor((y - self.y_min) / self.cell))
        if 0 <= i < self.h and 0 <= j < self.w:
            return i, j
        return None


@dataclass
class Targets:
    """Per-cell supervision: positive mask and box regression targets."""

    pos_mask: np.ndarray  # [H, W], 0/1
    reg: np.ndarray       # [4, H, W]: dx, dy, log w, log l in cell units


@dataclass
class HeadOutputs:
    cls_logits: np.ndarray  # [1, H, W]
    reg: np.ndarray         # [4, H, W]


@dataclass
class ForwardOut:
    cls_logits: Tensor
    reg: Tensor
    loss: Optional[Tensor]
    params: ParamTensors
    fused_rows: int  # number of rows entering the fusion network

    def heads(self) -> HeadOutputs:
        return HeadOutputs(self.cls_logits.data.copy(), self.reg.data.copy())


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def _xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, shape)


def init_base_params(config: ModelConfig, rng: np.random.Generator) -> ParamRegistry:
    """Fresh encoder + fusion + decoder parameters."""
    reg = ParamRegistry()
    chans = [config.c_in, *config.encoder_widths, config.c]
    for i, (cin, cout) in enumerate(zip(chans, chans[1:]), start=1):
        reg.add(f"encoder.conv{i}.w", _he_normal(rng, (cout, cin, 3, 3)))
        reg.add(f"encoder.conv{i}.b", np.zeros(cout))
    a, c = config.attn_width, config.c
    for layer in range(config.fusion_layers):
        # query/key projections carry no bias: a key bias shifts every score
        # of a softmax row equally, so it could never receive gradient
        reg.add(f"fusion.layer{layer}.wq", _xavier_uniform(rng, (a, c)))
        reg.add(f"fusion.layer{layer}.wk", _xavier_uniform(rng, (a, c)))
        reg.add(f"fusion.layer{layer}.wv", _xavier_uniform(rng, (c, c)))
        reg.add(f"fusion.layer{layer}.bv", np.zeros(c))
    reg.add("decoder.cls.w", _he_normal(rng, (1, c, 1, 1)))
    # negative prior keeps early training stable under heavy class imbalance
    reg.add("decoder.cls.b", np.full(1, -2.0))
    reg.add("decoder.reg.w", _he_normal(rng, (4, c, 1, 1)))
    reg.add("decoder.reg.b", np.zeros(4))
    return reg


def encode(obs: Tensor, params: ParamTensors, config: ModelConfig) -> Tensor:
    """Encoder network: a 3x3 conv + ReLU per configured stride.

    Accepts one observation [C_in, H0, W0] or an agent stack with a leading
    axis; the agent axis is carried through unchanged.
    """
    expected = (config.c_in, config.h0, config.w0)
    if obs.shape[-3:] != expected:
        raise ShapeError(f"encode: observation shape {obs.shape} != {expected}")
    x = obs
    for i, stride in enumerate(config.encoder_strides, start=1):
        x = conv2d(x, params[f"encoder.conv{i}.w"], params[f"encoder.conv{i}.b"],
                   stride=stride, padding=1)
        x = relu(x)
    return x


def attention_fuse(stack: Tensor, params: ParamTensors, config: ModelConfig,
                   per_layer_hook: Callable[[int, Tensor], Tensor] | None = None,
                   layers: int | None = None) -> Tensor:
    """Per-cell self-attention across agent rows; returns the ego row.

    At every spatial cell the M agent vectors attend to each other through
    learned query/key/value projections, repeated `layers` times with an
    optional residual connection. `per_layer_hook(layer, stack4)` lets a
    caller adapt the intermediate stack between layers.
    """
    if stack.ndim != 4:
        raise ShapeError(f"attention_fuse: stack must be [M, C, H, W], got {stack.shape}")
    m, c, h, w = stack.shape
    if m < 1:
        raise ShapeError("attention_fuse: empty agent stack")
    if layers is None:
        layers = config.fusion_layers
    inv_sqrt = 1.0 / math.sqrt(config.attn_width)
    x = transpose(reshape(stack, (m, c, h * w)), (2, 0, 1))  # [P, M, C]
    for layer in range(layers):
        q = matmul(x, transpose(params[f"fusion.layer{layer}.wq"], (1, 0)))
        k = matmul(x, transpose(params[f"fusion.layer{layer}.wk"], (1, 0)))
        v = linear(x, params[f"fusion.layer{layer}.wv"], params[f"fusion.layer{layer}.bv"])
        scores = matmul(q, transpose(k, (0, 2, 1))) * inv_sqrt
        attended = matmul(softmax(scores, axis=-1), v)
        x = x + attended if config.fusion_residual else attended
        if per_layer_hook is not None:
            stack4 = reshape(transpose(x, (1, 2, 0)), (m, c, h, w))
            stack4 = per_layer_hook(layer, stack4)
            x = transpose(reshape(stack4, (m, c, h * w)), (2, 0, 1))
    ego = select(x, 1, 0)  # [P, C]
    return reshape(transpose(ego, (1, 0)), (c, h, w))


def decode_heads(fused: Tensor, params: ParamTensors) -> tuple[Tensor, Tensor]:
    """Two parallel 1x1 convolutions: classification logit and box regression."""
    cls = conv2d(fused, params["decoder.cls.w"], params["decoder.cls.b"])
    reg = conv2d(fused, params["decoder.reg.w"], params["decoder.reg.b"])
    return cls, reg


def build_targets(boxes: np.ndarray, geometry: GridGeometry) -> Targets:
    """Rasterize ground-truth boxes onto the feature grid.

    The cell containing a box centre becomes positive and carries the centre
    offset and log sizes in cell units. When two boxes share a cell the
    first one (by index) keeps it.
    """
    pos = np.zeros((geometry.h, geometry.w))
    reg = np.zeros((4, geometry.h, geometry.w))
    for cx, cy, bw, bl in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
        cell = geometry.cell_of(cx, cy)
        if cell is None or pos[cell] > 0:
            continue
        i, j = cell
        pos[i, j] = 1.0
        reg[0, i, j] = (cx - geometry.x_min) / geometry.cell - (j + 0.5)
        reg[1, i, j] = (cy - geometry.y_min) / geometry.cell - (i + 0.5)
        reg[2, i, j] = math.log(bw / geometry.cell)
        reg[3, i, j] = math.log(bl / geometry.cell)
    return Targets(pos, reg)


def detection_loss(cls_logits: Tensor, reg: Tensor, targets: Targets) -> Tensor:
    """Weighted BCE over all cells plus smooth-L1 on the positive cells.

    Positive cells are weighted by the negative/positive ratio (capped at
    100); the classification term is averaged over all cells and the
    regression term over max(1, #positives).
    """
    mask = targets.pos_mask
    if mask.shape != cls_logits.shape[-2:]:
        raise ShapeError(
            f"detection_loss: target grid {mask.shape} != head grid {cls_logits.shape[-2:]}")
    n_pos = float(mask.sum())
    n_cells = mask.size
    pos_weight = min(_BCE_POS_WEIGHT_CAP, (n_cells - n_pos) / n_pos) if n_pos > 0 else 1.0
    weights = np.where(mask > 0, pos_weight, 1.0)
    cls_term = bce_with_logits_sum(cls_logits, mask[None], weights[None]) * (1.0 / n_cells)
    reg_term = smooth_l1_sum(reg, targets.reg, np.broadcast_to(mask, targets.reg.shape)) \
        * (1.0 / max(1.0, n_pos))
    return cls_term + reg_term


def pipeline_forward(config: ModelConfig, registry: ParamRegistry,
                     obs: np.ndarray, method: "MethodConfig",
                     targets: Targets | None = None,
                     train: bool = False) -> ForwardOut:
    """Run the full pipeline for one sample.

    `obs` is the [N, C_in, H0, W0] stack of agent observations with the ego
    agent at row 0. `method` decides which adaptation modules are inserted;
    with all of them disabled this is exactly the base model.
    """
    from . import peft  # deferred: peft builds on this module's primitives

    if obs.ndim != 4:
        raise ShapeError(f"pipeline_forward: obs must be [N, C_in, H0, W0], got {obs.shape}")
    params = registry.tensors(train)
    _check_method_params(registry, method)
    feats = encode(Tensor(obs), params, config)  # [N, C, H, W]
    stack = feats
    if method.uses_ssf:
        stack = peft.ssf_transform(stack, params, "ssf.enc")
    if method.adapter_pre:
        stack = peft.collaboration_adapter(stack, params, "adapter1",
                                           method.plan.adapter_flags)
    rows = stack
    if method.uses_prompt:
        prompt = peft.agent_prompt(stack, params, method.plan.prompt_flags)
        rows = concat([stack, prompt], axis=0)
    hook = None
    if method.per_layer_adapters:
        def hook(layer, stack4):
            return peft.collaboration_adapter(stack4, params, f"adapter_fl{layer}",
                                              method.plan.adapter_flags)
    fused = attention_fuse(rows, params, config, per_layer_hook=hook)  # [C, H, W]
    fused1 = reshape(fused, (1, *fused.shape))
    if method.uses_ssf:
        fused1 = peft.ssf_transform(fused1, params, "ssf.fused")
    if method.adapter_post:
        fused1 = peft.collaboration_adapter(fused1, params, "adapter2",
                                            method.plan.adapter_flags)
    fused = reshape(fused1, fused.shape)
    cls, reg = decode_heads(fused, params)
    loss = detection_loss(cls, reg, targets) if targets is not None else None
    return ForwardOut(cls, reg, loss, params, fused_rows=rows.shape[0])


def _check_method_params(registry: ParamRegistry, method: "MethodConfig") -> None:
    from . import peft

    missing = [p for p in peft.required_prefixes(method)
               if not any(n.startswith(p) for n in registry.names())]
    if missing:
        raise ConfigError(
            f"method '{method.method}' needs parameters with prefixes {missing} "
            "that are absent from the registry")


@dataclass
class Model:
    """Convenience bundle of architecture, parameters, and method."""

    config: ModelConfig
    registry: ParamRegistry
    method: "MethodConfig"

    def forward(self, obs: np.ndarray, targets: Targets | None = None,
                train: bool = False) -> ForwardOut:
        return pipeline_forward(self.config, self.registry, obs, self.method,
                                targets=targets, train=train)


def geometry_for(config: ModelConfig, x_min: float, y_min: float) -> GridGeometry:
    return GridGeometry(x_min, y_min, config.feat_cell_m, config.feat_h, config.feat_w)
