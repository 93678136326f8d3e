import numpy as np
import pytest
import torch

from manet.losses import LossWeights
from manet.network import (
    NetworkConfig,
    NetworkError,
    argmax_lowest,
    build_network,
    load_checkpoint,
    parameter_groups,
    predict,
    read_manifest,
    save_checkpoint,
    strip_manifold_branch,
)
from manet.training import TrainConfig, self_train_losses

import gradcheck

CFG = NetworkConfig(dims=2, num_classes=4, base_width=8, depth=2)


def test_build_deterministic():
    a = build_network(CFG, seed=0).state_dict()
    b = build_network(CFG, seed=0).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = build_network(CFG, seed=1).state_dict()
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(7)
    expected = torch.rand(3)
    torch.manual_seed(7)
    build_network(CFG, seed=0)
    assert torch.equal(torch.rand(3), expected)


def test_parameter_prefixes():
    names = list(build_network(CFG).state_dict())
    groups = parameter_groups(names)
    assert groups["encoder"] > 0 and groups["base"] > 0 and groups["manifold"] > 0
    assert sum(groups.values()) == len(names)


def test_config_validation():
    for bad in [dict(depth=1), dict(base_width=2), dict(num_classes=1), dict(dims=4)]:
        with pytest.raises(NetworkError):
            build_network(NetworkConfig(**{**vars(CFG), **bad}))


def test_3d_uses_3d_operators():
    net = build_network(NetworkConfig(dims=3, num_classes=2, base_width=4, depth=2))
    convs = [m for m in net.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.Conv3d))]
    assert convs and all(isinstance(m, torch.nn.Conv3d) for m in convs)
    assert not any(isinstance(m, (torch.nn.InstanceNorm2d, torch.nn.MaxPool2d)) for m in net.modules())
    seg, mf = net(torch.randn(1, 1, 8, 8, 8))
    assert seg.shape == (1, 2, 8, 8, 8) and mf.shape == (1, 2, 8, 8, 8)


def test_forward_shapes():
    net = build_network(NetworkConfig(dims=2, num_classes=3, base_width=8, depth=2))
    seg, mf = net(torch.randn(2, 1, 32, 32))
    assert seg.shape == (2, 3, 32, 32)
    assert mf.shape == (2, 2, 32, 32)


def test_forward_input_errors():
    net = build_network(CFG)
    with pytest.raises(NetworkError, match="divisible"):
        net(torch.randn(1, 1, 30, 32))
    with pytest.raises(NetworkError):
        net(torch.randn(1, 2, 32, 32))
    with pytest.raises(NetworkError):
        net(torch.randn(1, 32, 32))


def test_manifold_params_do_not_affect_seg():
    net = build_network(CFG)
    x = torch.randn(2, 1, 16, 16)
    seg0, mf0 = net(x)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.startswith("manifold."):
                p.add_(torch.randn_like(p))
    seg1, mf1 = net(x)
    assert torch.equal(seg0, seg1)
    assert not torch.equal(mf0, mf1)


def test_encoder_param_changes_both_outputs():
    net = build_network(CFG)
    x = torch.randn(2, 1, 16, 16)
    seg0, mf0 = net(x)
    with torch.no_grad():
        net.encoder.stages[0][0].weight[0, 0, 1, 1] += 0.5
    seg1, mf1 = net(x)
    assert not torch.equal(seg0, seg1) and not torch.equal(mf0, mf1)


def test_samples_independent_of_batch_company():
    net = build_network(CFG)
    x = torch.randn(4, 1, 16, 16)
    seg, mf = net(x)
    for i in range(4):
        s_i, m_i = net(x[i:i + 1])
        assert torch.allclose(s_i, seg[i:i + 1], atol=1e-5)
        assert torch.allclose(m_i, mf[i:i + 1], atol=1e-5)


def test_argmax_ties_lowest():
    logits = torch.zeros(1, 3, 2, 2)
    logits[:, 2] = 1.0
    assert torch.all(argmax_lowest(logits) == 2)
    tie = torch.zeros(1, 3, 2, 2)
    tie[:, 1] = 1.0
    tie[:, 2] = 1.0
    assert torch.all(argmax_lowest(tie) == 1)
    assert torch.all(argmax_lowest(torch.zeros(2, 4, 3, 3)) == 0)


def test_predict_is_argmax_of_seg():
    net = build_network(CFG)
    x = torch.randn(3, 1, 16, 16)
    seg, _ = net(x)
    assert torch.equal(predict(net, x), seg.argmax(1))
    assert torch.equal(predict(net, x.numpy()), predict(net, x))


def test_checkpoint_round_trip(tmp_path):
    net = build_network(CFG, seed=3)
    save_checkpoint(net, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    a, b = net.state_dict(), back.state_dict()
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    manifest = read_manifest(tmp_path / "c")
    assert manifest["network"]["num_classes"] == 4
    e = manifest["params"][0]
    assert list(a[e["name"]].shape) == e["shape"] and e["dtype"] == "f32"


def test_strip(tmp_path):
    net = build_network(CFG, seed=3)
    save_checkpoint(net, tmp_path / "full")
    strip_manifold_branch(tmp_path / "full", tmp_path / "s1")
    strip_manifold_branch(tmp_path / "s1", tmp_path / "s2")
    assert (tmp_path / "s1" / "params.bin").stat().st_size < (tmp_path / "full" / "params.bin").stat().st_size
    assert (tmp_path / "s1" / "params.bin").read_bytes() == (tmp_path / "s2" / "params.bin").read_bytes()
    assert read_manifest(tmp_path / "s1") == read_manifest(tmp_path / "s2")
    names = [e["name"] for e in read_manifest(tmp_path / "s1")["params"]]
    groups = parameter_groups(names)
    full = parameter_groups(net.state_dict())
    assert groups["manifold"] == 0 and len(names) == full["encoder"] + full["base"]
    stripped = load_checkpoint(tmp_path / "s1")
    assert not stripped.has_manifold
    g = torch.Generator().manual_seed(0)
    for _ in range(10):
        x = torch.randn(2, 1, 16, 16, generator=g)
        assert torch.equal(predict(stripped, x), predict(net, x))
    seg, mf = stripped(torch.randn(1, 1, 16, 16))
    assert mf is None


def test_strip_missing_manifest(tmp_path):
    with pytest.raises(NetworkError, match="manifest"):
        strip_manifold_branch(tmp_path, tmp_path / "out")


def _tiny_problem(seed=0):
    net = build_network(NetworkConfig(dims=2, num_classes=3, base_width=4, depth=2), seed=seed).double()
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
    y = torch.randint(0, 3, (4, 8, 8), generator=g)
    cfg = TrainConfig(alpha=0.05)

    def loss():
        return self_train_losses(net, x[:2], y[:2], x[2:], y[2:], cfg)[2]

    return net, loss


def test_gradient_matches_finite_differences():
    net, loss = _tiny_problem()
    picks = gradcheck.sample_entries(net, 25, seed=1)
    for name, idx, a, n, _ in gradcheck.check(net, loss, picks, h=1e-6):
        assert gradcheck.rel_err(a, n) < 1e-3, (name, idx, a, n)


def test_gradient_h1e3_mismatches_are_relu_kinks():
    # at h=1e-3 the stencil often straddles a ReLU kink; everywhere else it must agree
    net, loss = _tiny_problem()
    picks = gradcheck.sample_entries(net, 40, seed=2)
    rows = gradcheck.check(net, loss, picks, h=1e-3)
    smooth = [r for r in rows if not r[4]]
    assert len(smooth) >= 5
    for name, idx, a, n, _ in smooth:
        assert gradcheck.rel_err(a, n) < 1e-3, (name, idx, a, n)
    kinked = [(r[0], r[1]) for r in rows if r[4]]
    for name, idx, a, n, _ in gradcheck.check(net, loss, kinked, h=1e-6):
        assert gradcheck.rel_err(a, n) < 1e-3, (name, idx, a, n)


def test_alpha_zero_gives_no_manifold_gradient():
    net, _ = _tiny_problem()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
    y = torch.randint(0, 3, (4, 8, 8), generator=g)
    l_base, l_mf, l_total = self_train_losses(net, x[:2], y[:2], x[2:], y[2:], TrainConfig(alpha=0.0))
    assert l_total is l_base and l_mf is not None
    l_total.backward()
    assert all(p.grad is None for n, p in net.named_parameters() if n.startswith("manifold."))
    assert all(p.grad is not None for n, p in net.named_parameters() if n.startswith("base."))
