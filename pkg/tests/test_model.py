import numpy as np
import pytest
import torch

from kv2mv import model as M
from kv2mv.model import ModelConfig


def test_init_deterministic():
    cfg = ModelConfig(depth=2, base_channels=4)
    a = M.init_params(cfg, 12)
    b = M.init_params(cfg, 12)
    for name in a.tensors:
        assert torch.equal(a.tensors[name], b.tensors[name])
    c = M.init_params(cfg, 13)
    assert any(not torch.equal(a.tensors[n], c.tensors[n]) for n in a.tensors)


def test_biases_are_zero():
    params = M.init_params(ModelConfig(depth=2, base_channels=4), 0)
    bias_tensors = [t for n, t in params.tensors.items() if n.endswith("bias")]
    assert bias_tensors
    for t in bias_tensors:
        assert torch.all(t == 0)


def test_first_conv_kaiming_variance():
    # fan_in of the first conv is 9; empirical kernel variance within 20%
    params = M.init_params(ModelConfig(depth=4, base_channels=16), 5)
    first = next(t for n, t in params.tensors.items() if n == "encoders.0.0.weight")
    var = float(first.var(unbiased=False))
    assert abs(var - 2.0 / 9.0) <= 0.2 * (2.0 / 9.0)


def test_param_count_default_hits_budget():
    n = M.param_count(ModelConfig())
    assert abs(n - M.PARAM_BUDGET) <= 0.15 * M.PARAM_BUDGET
    net = M.build_model(ModelConfig(), 0)
    assert n == sum(p.numel() for p in net.parameters())
    assert n == M.init_params(ModelConfig(), 0).total_count


def test_param_count_depth1_hand_enumeration():
    # depth=1, base=1: enumerate every kernel of the one-stage network by hand
    conv = lambda cin, cout, k: k * k * cin * cout + cout  # noqa: E731
    norm = lambda c: 2 * c  # noqa: E731
    expected = (
        conv(1, 1, 3) + norm(1) + conv(1, 1, 3) + norm(1)  # encoder stage
        + conv(1, 2, 3) + norm(2) + conv(2, 2, 3) + norm(2)  # bottleneck
        + conv(2, 1, 3)  # upsample conv
        + conv(2, 1, 3) + norm(1) + conv(1, 1, 3) + norm(1)  # decoder stage
        + conv(1, 1, 1)  # output head
    )
    assert M.param_count(ModelConfig(depth=1, base_channels=1)) == expected


def test_param_count_doubling_factor():
    lo = M.param_count(ModelConfig(base_channels=12))
    hi = M.param_count(ModelConfig(base_channels=24))
    assert 3.5 < hi / lo < 4.5


def test_param_count_monotone():
    base = M.param_count(ModelConfig(depth=3, base_channels=8))
    assert M.param_count(ModelConfig(depth=4, base_channels=8)) > base
    assert M.param_count(ModelConfig(depth=3, base_channels=9)) > base


def test_forward_shape_preservation():
    cfg = ModelConfig(depth=3, base_channels=4)
    params = M.init_params(cfg, 0)
    for d in (16, 32, 64):
        x = torch.rand(2, 1, d, d) * 2 - 1
        y = M.forward(params, x)
        assert y.shape == x.shape


def test_forward_output_strictly_inside_range():
    params = M.init_params(ModelConfig(depth=2, base_channels=4), 1)
    x = torch.rand(4, 1, 16, 16) * 2 - 1
    y = M.forward(params, x)
    assert float(y.max()) < 1.0 and float(y.min()) > -1.0


def test_forward_rejects_indivisible_side():
    params = M.init_params(ModelConfig(depth=4, base_channels=4), 0)
    with pytest.raises(ValueError, match="divisible"):
        M.forward(params, torch.zeros(1, 1, 50, 50))


def test_forward_eval_mode_deterministic():
    params = M.init_params(ModelConfig(depth=2, base_channels=4), 2)
    x = torch.rand(3, 1, 16, 16)
    assert torch.equal(M.forward(params, x), M.forward(params, x))


def test_forward_batch_norm_uses_instance_option():
    cfg = ModelConfig(depth=2, base_channels=4, norm="instance")
    params = M.init_params(cfg, 0)
    y = M.forward(params, torch.rand(1, 1, 16, 16))
    assert y.shape == (1, 1, 16, 16)
    assert M.param_count(cfg) == params.total_count


def test_config_validation():
    with pytest.raises(ValueError, match="depth"):
        ModelConfig(depth=0)
    with pytest.raises(ValueError, match="norm"):
        ModelConfig(norm="group")


def test_config_hash_distinguishes_architectures():
    assert M.config_hash(ModelConfig()) != M.config_hash(ModelConfig(base_channels=16))
    assert M.config_hash(ModelConfig()) == M.config_hash(ModelConfig())
