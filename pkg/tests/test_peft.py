"""Collaboration adapter, agent prompt, freeze masks, parameter accounting,
and variant insertion plans."""

from dataclasses import replace

import numpy as np
import pytest

from copeft import peft
from copeft.errors import ConfigError
from copeft.nn_core import Tensor, agent_max_pool, conv2d
from copeft.peft import (
    AdapterFlags,
    MethodConfig,
    PromptFlags,
    agent_prompt,
    build_freeze_mask,
    collaboration_adapter,
    count_params,
    make_method,
    variant_plan,
)
from copeft.pipeline import ModelConfig

CFG = ModelConfig(c_in=2, c=4, encoder_widths=(3, 5), encoder_strides=(2, 2, 1),
                  attn_width=4, h0=8, w0=8, bottleneck_rate=2, adapter_kernel=3)


def copeft_registry(seed=0, method=None):
    method = method if method is not None else make_method("copeft")
    return peft.build_registry(CFG, method, np.random.default_rng(seed),
                               np.random.default_rng(seed + 100)), method


def random_stack(n=2, seed=0):
    return np.random.default_rng(seed).normal(size=(n, CFG.c, CFG.feat_h, CFG.feat_w))


class TestCollaborationAdapter:
    def test_zero_up_projection_is_identity(self):
        reg, method = copeft_registry(1)
        stack = random_stack(seed=2)
        out = collaboration_adapter(Tensor(stack), reg.tensors(), "adapter1",
                                    method.plan.adapter_flags)
        assert np.array_equal(out.data, stack)

    def test_zero_score_makes_bottleneck_irrelevant(self):
        reg, method = copeft_registry(3)
        rng = np.random.default_rng(4)
        reg["adapter1.up.w"].value = rng.normal(size=reg["adapter1.up.w"].value.shape)
        reg["adapter1.up.b"].value = rng.normal(size=reg["adapter1.up.b"].value.shape)
        reg["adapter1.score.w"].value = np.zeros_like(reg["adapter1.score.w"].value)
        reg["adapter1.score.b"].value = np.zeros_like(reg["adapter1.score.b"].value)
        stack = random_stack(seed=5)
        out = collaboration_adapter(Tensor(stack), reg.tensors(), "adapter1",
                                    method.plan.adapter_flags)
        assert np.array_equal(out.data, stack)

    def test_matches_composed_oracle(self):
        """Pool, 1x1 conv, broadcast multiply, residual add, by hand."""
        reg, method = copeft_registry(6)
        rng = np.random.default_rng(7)
        for name in ("adapter1.up.w", "adapter1.up.b", "adapter1.score.w",
                     "adapter1.score.b"):
            reg[name].value = rng.normal(size=reg[name].value.shape)
        stack = random_stack(n=2, seed=8)
        got = collaboration_adapter(Tensor(stack), reg.tensors(), "adapter1",
                                    method.plan.adapter_flags).data

        params = reg.tensors()
        mid = np.maximum(conv2d(Tensor(stack), params["adapter1.down.w"],
                                params["adapter1.down.b"], padding=1).data, 0.0)
        up = conv2d(Tensor(mid), params["adapter1.up.w"], params["adapter1.up.b"],
                    padding=1).data
        pooled = np.max(stack, axis=0, keepdims=True)
        score = conv2d(Tensor(pooled), params["adapter1.score.w"],
                       params["adapter1.score.b"]).data
        want = stack + score * up
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_score_is_shared_across_rows(self):
        """With the collaborative filter the same score modulates every row."""
        reg, method = copeft_registry(9)
        rng = np.random.default_rng(10)
        reg["adapter1.up.w"].value = rng.normal(size=reg["adapter1.up.w"].value.shape)
        stack = random_stack(n=3, seed=11)
        got = collaboration_adapter(Tensor(stack), reg.tensors(), "adapter1",
                                    method.plan.adapter_flags).data
        params = reg.tensors()
        mid = np.maximum(conv2d(Tensor(stack), params["adapter1.down.w"],
                                params["adapter1.down.b"], padding=1).data, 0.0)
        up = conv2d(Tensor(mid), params["adapter1.up.w"], params["adapter1.up.b"],
                    padding=1).data
        shared = conv2d(agent_max_pool(Tensor(stack)), params["adapter1.score.w"],
                        params["adapter1.score.b"]).data
        for row in range(3):
            np.testing.assert_allclose(got[row], stack[row] + shared[0] * up[row],
                                       atol=1e-12)

    def test_disabling_collaborative_filter_gives_per_row_score(self):
        flags = AdapterFlags(collaborative_filter=False)
        method = MethodConfig("copeft", replace(variant_plan("standard"),
                                                adapter_flags=flags))
        reg, _ = copeft_registry(12, method)
        rng = np.random.default_rng(13)
        reg["adapter1.up.w"].value = rng.normal(size=reg["adapter1.up.w"].value.shape)
        stack = random_stack(n=2, seed=14)
        got = collaboration_adapter(Tensor(stack), reg.tensors(), "adapter1", flags).data
        params = reg.tensors()
        mid = np.maximum(conv2d(Tensor(stack), params["adapter1.down.w"],
                                params["adapter1.down.b"], padding=1).data, 0.0)
        up = conv2d(Tensor(mid), params["adapter1.up.w"], params["adapter1.up.b"],
                    padding=1).data
        per_row = conv2d(Tensor(stack), params["adapter1.score.w"],
                         params["adapter1.score.b"]).data
        np.testing.assert_allclose(got, stack + per_row * up, atol=1e-12)

    def test_conv_branch_off_is_plain_bottleneck(self):
        flags = AdapterFlags(conv_branch=False)
        method = make_method("adapter")
        reg, _ = copeft_registry(15, method)
        rng = np.random.default_rng(16)
        reg["adapter1.up.w"].value = rng.normal(size=reg["adapter1.up.w"].value.shape)
        stack = random_stack(seed=17)
        got = collaboration_adapter(Tensor(stack), reg.tensors(), "adapter1", flags).data
        params = reg.tensors()
        mid = np.maximum(conv2d(Tensor(stack), params["adapter1.down.w"],
                                params["adapter1.down.b"], padding=1).data, 0.0)
        up = conv2d(Tensor(mid), params["adapter1.up.w"], params["adapter1.up.b"],
                    padding=1).data
        np.testing.assert_allclose(got, stack + up, atol=0)


class TestAgentPrompt:
    def test_identity_linear_reduces_to_pool(self):
        """Scale 1, shift 0, identity map: the prompt is the pooled stack."""
        reg, method = copeft_registry(20)
        reg["prompt.lin.w"].value = np.eye(CFG.c)
        stack = random_stack(n=3, seed=21)
        out = agent_prompt(Tensor(stack), reg.tensors(), method.plan.prompt_flags)
        np.testing.assert_allclose(out.data, np.max(stack, axis=0, keepdims=True),
                                   atol=1e-12)

    def test_zero_linear_gives_bias_everywhere(self):
        reg, method = copeft_registry(22)
        reg["prompt.lin.w"].value = np.zeros((CFG.c, CFG.c))
        bias = np.random.default_rng(23).normal(size=CFG.c)
        reg["prompt.lin.b"].value = bias
        out = agent_prompt(Tensor(random_stack(seed=24)), reg.tensors(),
                           method.plan.prompt_flags)
        for c in range(CFG.c):
            assert np.all(out.data[0, c] == bias[c])

    def test_output_shape_single_row(self):
        reg, method = copeft_registry(25)
        out = agent_prompt(Tensor(random_stack(n=3, seed=26)), reg.tensors(),
                           method.plan.prompt_flags)
        assert out.shape == (1, CFG.c, CFG.feat_h, CFG.feat_w)

    def test_without_collaborative_filter_uses_ego_row(self):
        flags = PromptFlags(collaborative_filter=False)
        method = MethodConfig("copeft", replace(variant_plan("standard"),
                                                prompt_flags=flags))
        reg, _ = copeft_registry(27, method)
        reg["prompt.lin.w"].value = np.eye(CFG.c)
        stack = random_stack(n=3, seed=28)
        out = agent_prompt(Tensor(stack), reg.tensors(), flags)
        np.testing.assert_allclose(out.data[0], stack[0], atol=1e-12)

    def test_non_instance_aware_ignores_stack(self):
        flags = PromptFlags(instance_aware=False)
        method = MethodConfig("copeft", replace(variant_plan("standard"),
                                                prompt_flags=flags))
        reg, _ = copeft_registry(29, method)
        params = reg.tensors()
        a = agent_prompt(Tensor(random_stack(seed=30)), params, flags)
        b = agent_prompt(Tensor(random_stack(seed=31) * 5.0), params, flags)
        assert np.array_equal(a.data, b.data)

    def test_instance_awareness_property(self):
        """Raising the agent-axis maximum moves the prompt; raising a strictly
        dominated element does not."""
        reg, method = copeft_registry(32)
        reg["prompt.lin.w"].value = np.eye(CFG.c) + 0.01  # nonsingular
        stack = random_stack(n=2, seed=33)
        stack[0, 0, 0, 0] = 2.0
        stack[1, 0, 0, 0] = 1.0  # strictly dominated
        params = reg.tensors()
        base = agent_prompt(Tensor(stack), params, method.plan.prompt_flags).data

        bumped = stack.copy()
        bumped[0, 0, 0, 0] = 3.0  # the max moves
        assert not np.array_equal(
            agent_prompt(Tensor(bumped), params, method.plan.prompt_flags).data, base)

        dominated = stack.copy()
        dominated[1, 0, 0, 0] = 1.5  # still below the max
        assert np.array_equal(
            agent_prompt(Tensor(dominated), params, method.plan.prompt_flags).data, base)


class TestFreezeMasks:
    def test_none_is_empty(self):
        reg, _ = copeft_registry(40, make_method("none"))
        assert build_freeze_mask(reg, make_method("none")) == set()

    def test_scratch_is_everything(self):
        reg, _ = copeft_registry(41, make_method("scratch"))
        assert build_freeze_mask(reg, make_method("scratch")) == set(reg.names())

    def test_decoder_only_exact_names(self):
        reg, _ = copeft_registry(42, make_method("decoder_only"))
        mask = build_freeze_mask(reg, make_method("decoder_only"))
        assert mask == {"decoder.cls.w", "decoder.cls.b", "decoder.reg.w", "decoder.reg.b"}

    def test_ssf_adds_scale_shift_sites(self):
        method = make_method("ssf")
        reg, _ = copeft_registry(43, method)
        mask = build_freeze_mask(reg, method)
        assert {"ssf.enc.scale", "ssf.enc.shift", "ssf.fused.scale",
                "ssf.fused.shift"} <= mask
        assert all(n.startswith(("decoder.", "ssf.")) for n in mask)

    def test_copeft_standard_exact_prefixes(self):
        method = make_method("copeft")
        reg, _ = copeft_registry(44, method)
        mask = build_freeze_mask(reg, method)
        want = {n for n in reg.names()
                if n.startswith(("adapter1.", "adapter2.", "prompt.", "decoder."))}
        assert mask == want
        assert any(n.startswith("adapter1.") for n in mask)
        assert any(n.startswith("adapter2.") for n in mask)
        assert any(n.startswith("prompt.") for n in mask)

    def test_unknown_method_rejected(self):
        reg, _ = copeft_registry(45, make_method("none"))
        with pytest.raises(ConfigError):
            build_freeze_mask(reg, MethodConfig("mystery"))

    def test_mask_and_complement_partition(self):
        method = make_method("copeft")
        reg, _ = copeft_registry(46, method)
        mask = build_freeze_mask(reg, method)
        complement = set(reg.names()) - mask
        assert mask | complement == set(reg.names())
        assert not (mask & complement)


class TestCountParams:
    def test_empty_mask(self):
        reg, _ = copeft_registry(50, make_method("none"))
        trainable, total, ratio = count_params(reg, set())
        assert trainable == 0 and ratio == 0.0 and total > 0

    def test_equals_brute_force(self):
        method = make_method("copeft")
        reg, _ = copeft_registry(51, method)
        mask = build_freeze_mask(reg, method)
        trainable, total, ratio = count_params(reg, mask)
        brute_total = sum(reg[n].value.size for n in reg.names())
        brute_train = sum(reg[n].value.size for n in mask)
        assert (trainable, total) == (brute_train, brute_total)
        assert ratio == pytest.approx(brute_train / brute_total)

    def test_closed_form_default_config(self):
        """Hand-summed layer formulas for the default configuration."""
        cfg = ModelConfig()
        method = make_method("copeft")
        reg = peft.build_registry(cfg, method, np.random.default_rng(0),
                                  np.random.default_rng(1))
        c, r, a = cfg.c, cfg.bottleneck_rate, cfg.attn_width
        w1, w2 = cfg.encoder_widths
        k2 = cfg.adapter_kernel ** 2
        encoder = (w1 * cfg.c_in * 9 + w1) + (w2 * w1 * 9 + w2) + (c * w2 * 9 + c)
        fusion = cfg.fusion_layers * (a * c + a * c + c * c + c)
        decoder = (c + 1) + (4 * c + 4)
        adapter = ((c // r) * c * k2 + c // r) + (c * (c // r) * k2 + c) + (c * c + c)
        prompt = c + c + c * c + c
        trainable, total, ratio = count_params(reg, build_freeze_mask(reg, method))
        assert trainable == decoder + 2 * adapter + prompt
        assert total == encoder + fusion + decoder + 2 * adapter + prompt
        assert ratio < 0.05

    def test_unknown_mask_name_rejected(self):
        reg, _ = copeft_registry(52, make_method("none"))
        with pytest.raises(ConfigError):
            count_params(reg, {"ghost"})


class TestVariantPlans:
    def test_standard(self):
        plan = variant_plan("standard")
        assert plan.pre_fusion and plan.post_fusion
        assert not plan.per_fusion_layer and plan.prompt_enabled

    def test_s_variant(self):
        plan = variant_plan("S")
        assert plan.pre_fusion and not plan.post_fusion
        assert not plan.per_fusion_layer

    def test_d_variant(self):
        plan = variant_plan("D")
        assert plan.pre_fusion and plan.post_fusion and plan.per_fusion_layer

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            variant_plan("XL")

    def test_d_variant_registry_has_per_layer_adapters(self):
        method = make_method("copeft", "D")
        reg, _ = copeft_registry(53, method)
        assert any(n.startswith("adapter_fl0.") for n in reg.names())
        mask = build_freeze_mask(reg, method)
        assert any(n.startswith("adapter_fl0.") for n in mask)

    def test_method_config_round_trips(self):
        for name in peft.METHODS:
            method = make_method(name)
            assert MethodConfig.from_dict(method.to_dict()) == method
