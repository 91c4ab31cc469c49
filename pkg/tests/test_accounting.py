import itertools
import math

import numpy as np
import pytest

from spectok import tensor as T
from spectok.accounting import count_flops, count_params, layer_params
from spectok.model import KINDS, NORM_KINDS, SpecConfig, build_model, model_forward, vit_large

from conftest import small_config

FIRST8 = (0, 8)
TABLE = {
    ("attn_out",): 3,
    ("qkv",): 8,
    ("qkv", "attn_out"): 11,
    ("mlp",): 22,
    ("attn_out", "mlp"): 25,
    ("qkv", "mlp"): 30,
    ("qkv", "attn_out", "mlp"): 33,
}


def vitl_spec(kinds=(), lora=None):
    spec = SpecConfig.norms(24)
    spec.ranges.update({k: FIRST8 for k in kinds})
    if lora:
        spec.lora_rank.update(lora)
    return vit_large(attn_bias=True, spec=spec)


def test_norms_only_overhead():
    assert count_params(vitl_spec()).delta_percent == pytest.approx(0.05, abs=0.5)
    assert round(count_params(vitl_spec()).delta_percent, 2) == 0.05


@pytest.mark.parametrize("kinds,expected", TABLE.items())
def test_table_overheads(kinds, expected):
    assert count_params(vitl_spec(kinds)).delta_percent == pytest.approx(expected, abs=0.5)


@pytest.mark.parametrize("r,expected", [(16, 0.2), (128, 1.4)])
def test_lora_overheads(r, expected):
    pct = count_params(vitl_spec(("qkv",), {"qkv": r})).delta_percent
    assert pct == pytest.approx(expected, abs=0.1)


def test_qkv_block_copy_size():
    assert layer_params("qkv", vit_large()) == 3 * 1024**2 + 3 * 1024 == 3_148_800


def test_empty_spec_has_zero_delta():
    assert count_params(vit_large()).delta == 0


def test_overhead_grows_with_coverage():
    prev = -1
    for hi in range(0, 25, 4):
        d = count_params(vit_large(spec=SpecConfig(ranges={"mlp": (0, hi)}))).delta
        assert d > prev
        prev = d


@pytest.mark.parametrize("spec", [
    SpecConfig(),
    SpecConfig.best(2),
    SpecConfig(ranges={"mlp": (1, 2), "attn_out": (0, 2)}, lora_rank={"mlp": 3}),
    SpecConfig(ranges={"pre_mlp_ln": (0, 2)}, final_norm=True),
])
@pytest.mark.parametrize("extra", [{}, {"num_registers": 2, "attn_bias": True}])
def test_param_count_matches_instantiated_model(spec, extra):
    cfg = small_config(spec=spec, **extra)
    rep = count_params(cfg)
    assert rep.specialized_total == build_model(cfg, 0).num_parameters()
    assert rep.baseline_total == build_model(cfg.baseline(), 0).num_parameters()


def measured_flops(cfg):
    img = np.zeros((cfg.in_chans, cfg.image_size, cfg.image_size))
    m = build_model(cfg, 0)
    with T.no_grad(), T.count_matmuls() as log:
        model_forward(img, m)
    return sum(log)


def test_hand_count_tiny_model():
    cfg = small_config(image_size=4, patch_size=2, embed_dim=4, depth=1, heads=1)
    embed = 4 * 4 * 4
    qkv = 5 * 4 * 12
    attn = 5 * 4 * 5 + 5 * 5 * 4
    proj = 5 * 4 * 4
    mlp = 5 * 4 * 16 * 2
    assert count_flops(cfg).total == embed + qkv + attn + proj + mlp == 1224
    assert measured_flops(cfg) == 1224


def _spec_grid(depth):
    ranges = [(0, math.ceil(depth / 3)), (depth // 2, depth), (0, depth)]
    for kind, rng_ in itertools.product(KINDS, ranges):
        yield SpecConfig(ranges={kind: rng_})
    yield SpecConfig.best(depth)
    yield SpecConfig(ranges={k: (0, depth) for k in KINDS})


FLOP_CONFIGS = [
    dict(depth=3),
    dict(depth=3, num_registers=2, attn_bias=True),
    dict(depth=3, num_registers=2, spec_routing="with_patches"),
]


@pytest.mark.parametrize("extra", FLOP_CONFIGS)
def test_specialisation_adds_no_flops(extra):
    extra = dict(extra)
    routing = extra.pop("spec_routing", "with_cls")
    n = 0
    for spec in _spec_grid(extra["depth"]):
        spec.register_routing = routing
        cfg = small_config(spec=spec, **extra)
        assert count_flops(cfg) == count_flops(cfg.baseline())
        assert measured_flops(cfg) == count_flops(cfg).total
        n += 1
    assert n >= 23


def test_lora_flops_delta():
    spec = SpecConfig(ranges={"qkv": (0, 2), "mlp": (1, 2)}, lora_rank={"qkv": 2, "mlp": 3}, register_routing="with_cls")
    cfg = small_config(spec=spec, num_registers=1)
    d = 8
    c = 2
    want = c * (2 * 2 * (d + 3 * d) + 1 * 3 * (d + d))
    assert count_flops(cfg).total - count_flops(cfg.baseline()).total == want
    assert measured_flops(cfg) == count_flops(cfg).total


def test_flops_at_other_resolution():
    cfg = small_config()
    with pytest.raises(ValueError):
        count_flops(cfg, image_size=10)
    assert count_flops(cfg, image_size=16).total > count_flops(cfg).total
