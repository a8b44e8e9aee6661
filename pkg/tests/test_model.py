import numpy as np
import pytest

from caudg import nncore as nn
from caudg.model import PRESETS, ArchConfig, build, cdpl, forward_infer, forward_train, preset, with_config


def toy_config(**kw):
    base = dict(in_channels=2, width=16, num_classes=2, num_domains=2, base_filters=3, base_kernel=3,
                branch_filters=4, branch_kernel=3, cdpl_hidden=5)
    return ArchConfig(**{**base, **kw})


def batch(cfg, B=6, seed=0):
    return np.random.default_rng(seed).standard_normal((B, cfg.in_channels, 1, cfg.width))


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build_and_run(name):
    cfg = preset(name)
    assert cfg.feature_dim > 0
    model = build(cfg, 0)
    out = forward_train(model, batch(cfg, B=3), lambda z: z)
    assert out.act_logits.shape == (3, cfg.num_classes)
    assert out.dom_logits.shape == (3, cfg.num_domains)
    assert out.Fc_x.shape == out.Fd_a.shape == out.cdpl_c_a.shape == (3, cfg.feature_dim)


def test_dsads_and_uschad_shapes():
    d = preset("dsads")
    assert (d.in_channels, d.width) == (45, 125)
    u = preset("uschad")
    assert (u.in_channels, u.width) == (6, 200)
    assert u.base_width == 58
    model = build(u, 0)
    assert model.base_features(np.zeros((2, 6, 1, 200))).shape == (2, u.base_filters, 1, 58)


def test_invalid_widths_name_the_stage():
    with pytest.raises(ValueError, match="branch_conv"):
        preset("synthetic", width=20, base_kernel=9, branch_kernel=9)
    with pytest.raises(ValueError):
        with_config(preset("dsads"), base_kernel=200)


def test_same_seed_same_parameters():
    a, b = build(toy_config(), 3).state_dict(), build(toy_config(), 3).state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = build(toy_config(), 4).state_dict()
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if k.endswith("weight"))


def test_initialization_scheme():
    model = build(preset("dsads"), 0)
    w = model.f_b.weight.data
    assert abs(w.std() - np.sqrt(2.0 / (45 * 9))) < 0.1 * np.sqrt(2.0 / (45 * 9))
    assert not model.f_b.bias.data.any()
    np.testing.assert_array_equal(model.cdpl_c.bn.gamma.data, 1.0)
    np.testing.assert_array_equal(model.cdpl_c.bn.beta.data, 0.0)


def test_identity_ids_gives_equal_features():
    cfg = toy_config()
    out = forward_train(build(cfg, 0), batch(cfg), lambda z: z)
    np.testing.assert_array_equal(out.Fc_a.data, out.Fc_x.data)
    np.testing.assert_array_equal(out.Fd_a.data, out.Fd_x.data)


def test_forward_finite_on_fuzzed_inputs():
    cfg = toy_config()
    model = build(cfg, 0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.uniform(-10, 10, (4, 2, 1, 16))
        out = forward_train(model, x, lambda z: z)
        assert np.isfinite(out.act_logits.data).all() and np.isfinite(out.cdpl_d_a.data).all()


def test_early_fork_branches_share_nothing():
    model = build(toy_config(), 0)
    fc = {id(p) for p in model.f_c.parameters()}
    fd = {id(p) for p in model.f_d.parameters()}
    assert not fc & fd
    x = batch(toy_config())
    model.eval()
    before = forward_infer(model, x).data.copy()
    for p in list(model.f_d.parameters()) + list(model.g_d.parameters()) + list(model.cdpl_d.parameters()):
        p.data = p.data + 5.0
    np.testing.assert_array_equal(forward_infer(model, x).data, before)


def test_no_fork_shares_trunk():
    model = build(toy_config(early_fork=False), 0)
    assert model.f_d is model.f_c


def test_cdpl_shared_flag():
    m = build(toy_config(cdpl_shared=True), 0)
    assert m.cdpl_c is m.cdpl_d
    m = build(toy_config(), 0)
    assert m.cdpl_c is not m.cdpl_d


def test_cdpl_shape_identity_path_and_errors():
    cfg = toy_config(cdpl_hidden=8)
    model = build(cfg, 0)
    D = cfg.feature_dim
    assert D == 8  # 16 -> conv 14 -> pool 7 -> conv 5 -> pool 2, x4 filters
    head = model.cdpl_c
    head.fc1.weight.data = np.eye(D)
    head.fc2.weight.data = np.eye(D)
    head.fc2.bias.data = np.zeros(D)
    head.bn.running_mean[:] = 0.0
    head.bn.running_var[:] = 1.0 - 1e-5  # eval-mode BN becomes the identity
    model.eval()
    f = np.random.default_rng(2).standard_normal((3, D))
    np.testing.assert_allclose(cdpl(model, f, "causal").data, np.maximum(f, 0), atol=1e-12)
    model.train()
    assert cdpl(model, f, "causal").shape == f.shape
    with pytest.raises(ValueError):
        cdpl(model, f[:1], "causal")
    with pytest.raises(ValueError):
        cdpl(model, f, "sideways")


def test_cdpl_gradient():
    cfg = toy_config()
    model = build(cfg, 0)
    f = np.random.default_rng(3).standard_normal((5, cfg.feature_dim))
    w = np.random.default_rng(4).standard_normal((5, cfg.feature_dim))
    errs = nn.check_parameter_gradients(lambda: nn.tsum(cdpl(model, f, "non-causal") * w),
                                        model.cdpl_d.parameters())
    assert max(errs.values()) < 1e-4
    assert nn.finite_difference_check(lambda t: nn.tsum(cdpl(model, t, "causal") * w), f) < 1e-4


def test_infer_matches_train_logits_with_identity_ids():
    cfg = toy_config()
    model = build(cfg, 0)
    x = batch(cfg)
    out = forward_train(model, x, lambda z: z)
    model.eval()
    np.testing.assert_array_equal(forward_infer(model, x).data, out.act_logits.data)


def test_inference_path_parameter_count_equals_erm():
    cfg = toy_config()
    full = build(cfg, 0)
    erm = build(with_config(cfg, with_noncausal=False), 0)
    count = lambda ps: sum(p.data.size for p in ps)
    assert count(full.inference_parameters().values()) == count(erm.parameters())
    assert not hasattr(erm, "f_d")


def test_erm_mode_returns_only_activity_path():
    cfg = with_config(toy_config(), with_noncausal=False)
    out = forward_train(build(cfg, 0), batch(cfg), None)
    assert out.Fd_x is None and out.dom_logits is None and out.Fc_a is None
    assert out.act_logits.shape == (6, 2)


def test_state_dict_roundtrip_and_strictness():
    a = build(toy_config(), 0)
    b = build(toy_config(), 9)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(v, b.state_dict()[k]) for k, v in a.state_dict().items())
    partial = {k: v for k, v in a.state_dict().items() if k in a.inference_parameters()}
    with pytest.raises(KeyError):
        b.load_state_dict(partial)
    b.load_state_dict(partial, strict=False)
    bad = dict(a.state_dict())
    bad["g_c.weight"] = np.zeros((1, 1))
    with pytest.raises(ValueError, match="g_c.weight"):
        b.load_state_dict(bad)
