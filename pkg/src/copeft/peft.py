"""Parameter-efficient adaptation: collaboration adapter, agent prompt,
baseline methods, freeze policy, and parameter accounting.

The collaboration adapter is a convolutional bottleneck whose output is
modulated by a score computed from the agent stack (max pooling over agents
followed by a 1x1 conv). The agent prompt builds a single extra feature row
from the adapted stack and joins the fusion as a virtual agent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn_core import (
    ParamRegistry,
    ParamTensors,
    Tensor,
    agent_max_pool,
    conv2d,
    linear,
    narrow,
    relu,
    reshape,
    scale_shift,
    transpose,
)
from .pipeline import ModelConfig

METHODS = ("none", "scratch", "decoder_only", "ssf", "adapter", "copeft")
VARIANTS = ("standard", "S", "D")


@dataclass(frozen=True)
class AdapterFlags:
    """Ablation switches for the collaboration adapter.

    With `conv_branch` off the op is the plain bottleneck adapter (score
    fixed to all-ones). Otherwise the score source is the agent-pooled stack
    when `collaborative_filter` is on (per-row features when off), passed
    through the 1x1 conv when `score_generator` is on.
    """

    conv_branch: bool = True
    collaborative_filter: bool = True
    score_generator: bool = True


@dataclass(frozen=True)
class PromptFlags:
    """Ablation switches for the agent prompt.

    With `instance_aware` off the prompt starts from a free learnable tensor
    instead of the adapted stack; with `collaborative_filter` off the ego
    row is used instead of the agent-pooled one.
    """

    instance_aware: bool = True
    collaborative_filter: bool = True


@dataclass(frozen=True)
class VariantPlan:
    """Where the adaptation modules are inserted and how they are ablated."""

    pre_fusion: bool = True
    post_fusion: bool = True
    per_fusion_layer: bool = False
    prompt_enabled: bool = True
    adapter_flags: AdapterFlags = field(default_factory=AdapterFlags)
    prompt_flags: PromptFlags = field(default_factory=PromptFlags)


def variant_plan(variant: str) -> VariantPlan:
    """Insertion plan for the named variant.

    `standard` adapts the intermediate and the fused feature space, `S` only
    the intermediate one, `D` additionally inserts an adapter after every
    fusion layer. None of them touch the inter-agent messages.
    """
    if variant == "standard":
        return VariantPlan()
    if variant == "S":
        return VariantPlan(post_fusion=False)
    if variant == "D":
        return VariantPlan(per_fusion_layer=True)
    raise ConfigError(f"unknown variant '{variant}' (expected one of {VARIANTS})")


_NO_INSERTS = VariantPlan(pre_fusion=False, post_fusion=False,
                          per_fusion_layer=False, prompt_enabled=False)


@dataclass(frozen=True)
class MethodConfig:
    """A named adaptation method plus its insertion plan."""

    method: str
    plan: VariantPlan = field(default_factory=lambda: _NO_INSERTS)

    @property
    def uses_ssf(self) -> bool:
        return self.method == "ssf"

    @property
    def uses_adapters(self) -> bool:
        return self.method in ("adapter", "copeft")

    @property
    def adapter_pre(self) -> bool:
        return self.uses_adapters and self.plan.pre_fusion

    @property
    def adapter_post(self) -> bool:
        return self.uses_adapters and self.plan.post_fusion

    @property
    def per_layer_adapters(self) -> bool:
        return self.method == "copeft" and self.plan.per_fusion_layer

    @property
    def uses_prompt(self) -> bool:
        return self.method == "copeft" and self.plan.prompt_enabled

    def to_dict(self) -> dict:
        p, a, f = self.plan, self.plan.adapter_flags, self.plan.prompt_flags
        return {
            "method": self.method,
            "plan": {
                "pre_fusion": p.pre_fusion,
                "post_fusion": p.post_fusion,
                "per_fusion_layer": p.per_fusion_layer,
                "prompt_enabled": p.prompt_enabled,
                "adapter_flags": {"conv_branch": a.conv_branch,
                                  "collaborative_filter": a.collaborative_filter,
                                  "score_generator": a.score_generator},
                "prompt_flags": {"instance_aware": f.instance_aware,
                                 "collaborative_filter": f.collaborative_filter},
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        p = d["plan"]
        plan = VariantPlan(
            pre_fusion=p["pre_fusion"], post_fusion=p["post_fusion"],
            per_fusion_layer=p["per_fusion_layer"], prompt_enabled=p["prompt_enabled"],
            adapter_flags=AdapterFlags(**p["adapter_flags"]),
            prompt_flags=PromptFlags(**p["prompt_flags"]))
        return cls(d["method"], plan)


def make_method(method: str, variant: str = "standard") -> MethodConfig:
    """Standard configuration for each named method."""
    if method in ("none", "scratch", "decoder_only", "ssf"):
        return MethodConfig(method)
    if method == "adapter":
        # conventional bottleneck adapter at both macro sites, no modulation
        plan = VariantPlan(prompt_enabled=False,
                           adapter_flags=AdapterFlags(conv_branch=False))
        return MethodConfig(method, plan)
    if method == "copeft":
        return MethodConfig(method, variant_plan(variant))
    raise ConfigError(f"unknown method '{method}' (expected one of {METHODS})")


def ssf_transform(stack: Tensor, params: ParamTensors, prefix: str) -> Tensor:
    return scale_shift(stack, params[f"{prefix}.scale"], params[f"{prefix}.shift"])


def collaboration_adapter(stack: Tensor, params: ParamTensors, prefix: str,
                          flags: AdapterFlags) -> Tensor:
    """Adapt an agent stack: residual bottleneck scaled by a modulation score.

    The bottleneck (down-conv, ReLU, up-conv, same padding) runs per agent
    row; the score is shared across rows when the collaborative filter is
    on. With zero-initialized up-conv weights the op is exactly the identity.
    """
    down_w = params[f"{prefix}.down.w"]
    up_w = params[f"{prefix}.up.w"]
    mid = relu(conv2d(stack, down_w, params[f"{prefix}.down.b"],
                      stride=1, padding=down_w.shape[-1] // 2))
    bottleneck = conv2d(mid, up_w, params[f"{prefix}.up.b"],
                        stride=1, padding=up_w.shape[-1] // 2)
    if not flags.conv_branch:
        return stack + bottleneck
    score = agent_max_pool(stack) if flags.collaborative_filter else stack
    if flags.score_generator:
        score = conv2d(score, params[f"{prefix}.score.w"], params[f"{prefix}.score.b"])
    return stack + score * bottleneck


def agent_prompt(stack: Tensor, params: ParamTensors, flags: PromptFlags) -> Tensor:
    """Build the virtual-agent row [1, C, H, W] from the adapted stack.

    A per-channel scale/shift produces the environmental context, the agent
    axis is max-pooled away, and a per-cell channel map (the prompt's linear
    layer) yields the prompt row.
    """
    base = stack if flags.instance_aware else params["prompt.free"]
    env = scale_shift(base, params["prompt.scale"], params["prompt.shift"])
    pooled = agent_max_pool(env) if flags.collaborative_filter else narrow(env, 0, 0, 1)
    _, c, h, w = pooled.shape
    cells = transpose(reshape(pooled, (c, h * w)), (1, 0))  # [P, C]
    out = linear(cells, params["prompt.lin.w"], params["prompt.lin.b"])
    return reshape(transpose(out, (1, 0)), (1, c, h, w))


def _add_adapter_params(registry: ParamRegistry, prefix: str, config: ModelConfig,
                        rng: np.random.Generator, flags: AdapterFlags) -> None:
    c, r, k = config.c, config.bottleneck_rate, config.adapter_kernel
    cb = c // r
    std = np.sqrt(2.0 / (c * k * k))
    registry.add(f"{prefix}.down.w", rng.normal(0.0, std, (cb, c, k, k)))
    registry.add(f"{prefix}.down.b", np.zeros(cb))
    # zero-initialized up-projection makes the adapter start as the identity
    registry.add(f"{prefix}.up.w", np.zeros((c, cb, k, k)))
    registry.add(f"{prefix}.up.b", np.zeros(c))
    if flags.conv_branch and flags.score_generator:
        # identity-initialized score: the modulation starts as the pooled
        # stack itself, concentrating the bottleneck on active regions from
        # the first step while staying fully learnable
        registry.add(f"{prefix}.score.w", np.eye(c).reshape(c, c, 1, 1))
        registry.add(f"{prefix}.score.b", np.zeros(c))


def init_method_params(registry: ParamRegistry, config: ModelConfig,
                       method: MethodConfig, rng: np.random.Generator) -> None:
    """Add the parameters the method inserts on top of the base network."""
    if method.uses_ssf:
        for site in ("ssf.enc", "ssf.fused"):
            registry.add(f"{site}.scale", np.ones(config.c))
            registry.add(f"{site}.shift", np.zeros(config.c))
    if method.adapter_pre:
        _add_adapter_params(registry, "adapter1", config, rng, method.plan.adapter_flags)
    if method.adapter_post:
        _add_adapter_params(registry, "adapter2", config, rng, method.plan.adapter_flags)
    if method.per_layer_adapters:
        for layer in range(config.fusion_layers):
            _add_adapter_params(registry, f"adapter_fl{layer}", config, rng,
                                method.plan.adapter_flags)
    if method.uses_prompt:
        registry.add("prompt.scale", np.ones(config.c))
        registry.add("prompt.shift", np.zeros(config.c))
        registry.add("prompt.lin.w", rng.uniform(-0.01, 0.01, (config.c, config.c)))
        registry.add("prompt.lin.b", np.zeros(config.c))
        if not method.plan.prompt_flags.instance_aware:
            registry.add("prompt.free",
                         rng.normal(0.0, 0.01, (1, config.c, config.feat_h, config.feat_w)))


def required_prefixes(method: MethodConfig) -> list[str]:
    prefixes = []
    if method.uses_ssf:
        prefixes.append("ssf.")
    if method.adapter_pre:
        prefixes.append("adapter1.")
    if method.adapter_post:
        prefixes.append("adapter2.")
    if method.per_layer_adapters:
        prefixes.append("adapter_fl")
    if method.uses_prompt:
        prefixes.append("prompt.")
    return prefixes


def build_freeze_mask(registry: ParamRegistry, method: MethodConfig) -> set[str]:
    """Names updated during adaptation under the given method."""
    if method.method == "none":
        return set()
    if method.method == "scratch":
        return set(registry.names())
    if method.method not in METHODS:
        raise ConfigError(f"unknown method '{method.method}'")
    prefixes = ["decoder."] + required_prefixes(method)
    return {n for n in registry.names() if any(n.startswith(p) for p in prefixes)}


def count_params(registry: ParamRegistry, mask: set[str]) -> tuple[int, int, float]:
    """(trainable, total, ratio) element counts under a freeze mask."""
    unknown = set(mask) - set(registry.names())
    if unknown:
        raise ConfigError(f"mask names not in registry: {sorted(unknown)}")
    total = sum(e.value.size for e in registry.entries())
    trainable = sum(e.value.size for e in registry.entries() if e.name in mask)
    return trainable, total, (trainable / total if total else 0.0)


def build_registry(config: ModelConfig, method: MethodConfig,
                   base_rng: np.random.Generator,
                   method_rng: np.random.Generator | None = None) -> ParamRegistry:
    """Base parameters plus the method's inserted parameters, masked."""
    from .pipeline import init_base_params

    registry = init_base_params(config, base_rng)
    init_method_params(registry, config, method,
                       method_rng if method_rng is not None else base_rng)
    registry.set_trainable(build_freeze_mask(registry, method))
    return registry
