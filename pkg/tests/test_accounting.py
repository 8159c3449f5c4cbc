import numpy as np
import pytest

import dhvt.numerics.params as params_mod
from dhvt import TABLE_12, build_model, count_macs, count_params, cost_report, micro_config, variant_factory
from dhvt.accounting import conv_macs
from dhvt.numerics import Tensor, no_grad
from dhvt.model import model_forward


def closed_form_params(cfg):
    """Parameter total written out term by term from the architecture."""
    D, h, C, Dh = cfg.embed_dim, cfg.num_heads, cfg.num_classes, cfg.hidden_dim
    d = D // h
    total = 0
    if cfg.use_sope:
        widths = {16: [3, D // 8, D // 4, D // 2, D], 4: [3, D // 2, D], 2: [3, D]}[cfg.patch_size]
        total += 2 * 3 + 2 * D
        total += sum(ci * co * 9 + co + 2 * co for ci, co in zip(widths, widths[1:]))
    else:
        total += 3 * D * cfg.patch_size ** 2 + D
    total += D
    if cfg.use_abs_pos_embed:
        total += (cfg.num_patches + 1) * D
    block = 2 * D + (3 * D * D + 3 * D) + (D * D + D) + 2 * D
    if cfg.use_head_token:
        block += (d * D + D) + 2 * d + h * D
    if cfg.use_daff:
        block += (D * Dh + Dh) + 2 * Dh + (9 * Dh + Dh) + 2 * Dh + (Dh * D + D) + 2 * D
        block += (D * (D // 4) + D // 4) + ((D // 4) * D + D)
    else:
        block += (D * Dh + Dh) + (Dh * D + D)
    total += cfg.depth * block
    return total + 2 * D + D * C + C


def hooked_macs(cfg):
    """MACs observed by instrumenting every conv and linear call during a batch-1 forward."""
    seen = {"n": 0}
    conv, lin = params_mod.conv2d, params_mod.linear

    def conv_hook(x, w, b, stride, padding, groups):
        out = conv(x, w, b, stride, padding, groups)
        seen["n"] += int(np.prod(out.shape)) * int(np.prod(w.shape[1:]))
        return out

    def linear_hook(x, w, b):
        out = lin(x, w, b)
        seen["n"] += int(np.prod(out.shape)) * w.shape[1]
        return out

    params_mod.conv2d, params_mod.linear = conv_hook, linear_hook
    try:
        ps = build_model(cfg, dtype="f32")
        with no_grad():
            model_forward(ps, cfg, Tensor(np.zeros((1, 3, *cfg.image_size), np.float32)))
    finally:
        params_mod.conv2d, params_mod.linear = conv, lin
    return seen["n"]


VARIANTS = list(TABLE_12)


class TestParams:
    @pytest.mark.parametrize("key", VARIANTS, ids=lambda k: "/".join(map(str, k)))
    def test_closed_form_exact(self, key):
        cfg = variant_factory(*key)
        assert count_params(build_model(cfg, materialize=False)).total_params == closed_form_params(cfg)

    @pytest.mark.parametrize("key", VARIANTS, ids=lambda k: "/".join(map(str, k)))
    def test_within_two_percent_of_reference(self, key):
        cfg = variant_factory(*key)
        total = count_params(build_model(cfg, materialize=False)).total_params
        assert abs(total / (TABLE_12[key][0] * 1e6) - 1) <= 0.02

    @pytest.mark.parametrize("override", [{}, dict(use_abs_pos_embed=True), dict(use_sope=False),
                                          dict(use_daff=False), dict(use_head_token=False)])
    def test_closed_form_ablations(self, override):
        cfg = micro_config(**override)
        assert count_params(build_model(cfg, materialize=False)).total_params == closed_form_params(cfg)

    def test_buffers_not_counted(self):
        ps = build_model(micro_config(), materialize=False)
        rep = count_params(ps)
        assert rep.total_params == sum(t.size for _, t in ps.trainable())
        assert not any("running" in k for k in rep.params)


class TestMacs:
    def test_conv_macs(self):
        assert conv_macs(3, 8, 3, 4, 4) == 3 * 8 * 9 * 16
        assert conv_macs(8, 8, 3, 4, 4, groups=8) == 8 * 9 * 16

    @pytest.mark.parametrize("override", [{}, dict(use_sope=False), dict(use_daff=False),
                                          dict(use_head_token=False), dict(patch_size=2),
                                          dict(use_daff=False, plain_ffn="split_cls_agg")])
    def test_matches_instrumented_forward(self, override):
        cfg = micro_config(**override)
        assert count_macs(cfg).module_macs == hooked_macs(cfg)

    def test_cifar_variant_matches_instrumented_forward(self):
        cfg = variant_factory("DHVT-T/CIFAR/P4")
        assert count_macs(cfg).module_macs == hooked_macs(cfg)

    @pytest.mark.parametrize("key", VARIANTS, ids=lambda k: "/".join(map(str, k)))
    def test_within_fifteen_percent_of_reference(self, key):
        rep = count_macs(variant_factory(*key))
        assert abs(rep.gflops / TABLE_12[key][1] - 1) <= 0.15

    def test_attention_products_reported_separately(self):
        cfg = micro_config()
        rep = count_macs(cfg)
        T = cfg.num_patches + 1 + cfg.num_heads
        assert rep.attention_product_macs == 2 * cfg.num_heads * T * T * cfg.head_dim
        assert rep.total_macs == rep.module_macs + rep.attention_product_macs


class TestReport:
    def test_rollup_and_serialization(self):
        cfg = micro_config()
        rep = cost_report(build_model(cfg, materialize=False), cfg)
        roll = rep.rollup("params", 1)
        assert sum(roll.values()) == rep.total_params
        d = rep.to_dict()
        assert d["total_params"] == rep.total_params
        assert "total" in rep.to_text()
