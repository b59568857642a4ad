import numpy as np
import pytest

from convcs import autodiff as ad
from convcs import network, sensing, tensor, verify


def small_cfg(**kw):
    base = dict(stages=3, depth=3, width=6)
    base.update(kw)
    return network.NetConfig.from_preset("rate0.2", **base)


def _measure(x, cfg, seed=0):
    bank = sensing.make_filter_bank(cfg.m, cfg.L, cfg.s, seed)
    return bank, sensing.sense_image(x, bank)


def test_param_count_formula():
    cfg = network.NetConfig.from_preset("rate0.3")
    m, L, w, d, S = 8, 11, 96, 14, 14
    expected = (2 * m * L * L + m) + (w * m * 9 + w) + (d - 1) * (w * w * 9 + w) + S * (w * 9 + 1) + 3 * S + 1
    assert network.param_count(cfg) == expected
    assert sum(v.size for v in network.init_params(cfg).values()) == expected


def test_init_values():
    cfg = small_cfg()
    bank = sensing.make_filter_bank(cfg.m, cfg.L, cfg.s, 0)
    p = network.init_params(cfg, bank)
    np.testing.assert_array_equal(p["sensing"], bank.kernels.astype(np.float32))
    np.testing.assert_array_equal(p["backproj.w"], bank.kernels[:, :, ::-1, ::-1].astype(np.float32))
    np.testing.assert_allclose(p["stage_scalars"], np.tile([0.8, 0.1, 0.1], (3, 1)), atol=1e-7)
    assert all(p.dtype == np.float32 for p in p.values())


def test_he_initialisation_scale():
    cfg = network.NetConfig.from_preset("rate0.2", stages=1, depth=2, width=96)
    w = network.init_params(cfg)["branch.1.w"]
    assert abs(w.std() - np.sqrt(2 / (96 * 9))) < 0.03 * np.sqrt(2 / (96 * 9))


def test_tap_layers():
    assert network.NetConfig(m=1, L=3, s=1).tap_layers() == list(range(14))
    assert network.NetConfig(m=1, L=3, s=1, stages=2, depth=14).tap_layers() == [6, 13]
    assert network.NetConfig(m=1, L=3, s=1, stages=3, depth=5, tap_mode="final").tap_layers() == [4, 4, 4]


@pytest.mark.parametrize("name", list(sensing.PRESETS))
def test_output_shape_matches_padded_image(name):
    cfg = network.NetConfig.from_preset(name, stages=2, depth=2, width=4)
    bank, y = _measure(np.random.default_rng(0).uniform(size=(1, 40, 37)), cfg)
    out = network.forward(y, network.init_params(cfg, bank), cfg)
    assert out.shape == (1, y.meta.H, y.meta.W)
    assert tensor.crop(out, y.meta.pads).shape == (1, 40, 37)


def test_delta_only_network_returns_initial_estimate():
    cfg = small_cfg()
    x = np.random.default_rng(0).uniform(size=(1, 31, 31))
    bank, y = _measure(x, cfg)
    scale = 1 / sensing.operator_scale(bank, y.meta.H, y.meta.W)
    out = network.forward(y, network.delta_only_params(cfg, bank, scale, dtype=np.float64), cfg)
    np.testing.assert_allclose(out, sensing.initial_estimate(y, bank), rtol=1e-12, atol=1e-12)


def test_zero_fill_then_sensing_filters_reproduce_adjoint_interior():
    cfg = small_cfg()
    bank, y = _measure(np.random.default_rng(1).uniform(size=(1, 36, 36)), cfg)
    z = ad.zero_fill(ad.constant(y.maps[None]), (y.meta.H, y.meta.W), cfg.s)
    nz = np.count_nonzero(z.value)
    assert nz == y.maps.size
    # correlating with flipped filters is convolving; sum over maps gives Phi^T y away from the far edges
    L = cfg.L
    zp = np.pad(z.value[0], [(0, 0), (L - 1, 0), (L - 1, 0)])
    back = tensor.conv2d_valid(zp, bank.kernels[:, :, ::-1, ::-1], groups=cfg.m).sum(axis=0)
    np.testing.assert_allclose(back, sensing.adjoint(y, bank)[0], atol=1e-12)


def test_backprojection_branch_is_aligned_with_adjoint():
    cfg = small_cfg()
    bank, y = _measure(np.random.default_rng(2).uniform(size=(1, 46, 46)), cfg)
    params = network.init_params(cfg, bank, dtype=np.float64)
    offset = cfg.L // 2 if cfg.fill_offset == "center" else 0
    z = ad.zero_fill(ad.constant(y.maps[None]), (y.meta.H, y.meta.W), cfg.s, offset)
    h = ad.conv(z, ad.constant(params["backproj.w"]), pads=tensor.same_pads(cfg.L), groups=cfg.m)
    back = h.value[0].sum(axis=0)
    # reflect padding only disturbs a border of L // 2 pixels
    r = cfg.L // 2
    np.testing.assert_allclose(back[r:-r, r:-r], sensing.adjoint(y, bank)[0, r:-r, r:-r], atol=1e-12)


def test_zero_measurements_give_zero_fill():
    z = ad.zero_fill(ad.constant(np.zeros((1, 2, 3, 3))), (11, 11), 4)
    assert z.value.shape == (1, 2, 11, 11) and not np.any(z.value)


def test_one_stage_without_gamma_is_affine_in_y():
    cfg = small_cfg(stages=1)
    bank = sensing.make_filter_bank(cfg.m, cfg.L, cfg.s, 0)
    params = network.init_params(cfg, bank, dtype=np.float64)
    params["stage_scalars"][0, 2] = 0.0
    net = network.ConvCSNet(cfg, params)
    rng = np.random.default_rng(0)
    y1, y2 = rng.normal(size=(2, 1, cfg.m, 4, 4))
    shape = (26, 26)
    f = lambda y: net.forward_measurements(y, shape)  # noqa: E731
    np.testing.assert_allclose(f(y1 + y2), f(y1) + f(y2) - f(np.zeros_like(y1)), atol=1e-12)


def test_stage_scalars_reproduce_simplified_recursion():
    cfg = small_cfg(stages=2)
    bank = sensing.make_filter_bank(cfg.m, cfg.L, cfg.s, 0)
    params = network.init_params(cfg, bank, dtype=np.float64)
    for t in range(2):
        params[f"proj.{t}.w"][:] = 0.0
        params[f"proj.{t}.b"][:] = 0.25
    y = np.random.default_rng(0).normal(size=(1, cfg.m, 4, 4))
    out = network.ConvCSNet(cfg, params).forward_measurements(y, (26, 26))
    x0 = params["x0_scale"][0] * tensor.conv2d_transposed(y, bank.kernels, cfg.s, (26, 26))
    x = x0
    for _ in range(2):
        x = 0.8 * x + 0.1 * x0 + 0.1 * 0.25
    np.testing.assert_allclose(out, x, rtol=1e-12, atol=1e-14)


def test_backward_before_forward_is_an_error():
    cfg = small_cfg()
    net = network.ConvCSNet(cfg, network.init_params(cfg))
    with pytest.raises(ad.GraphError):
        net.backward(np.zeros((1, 1, 26, 26)))


def test_unused_parameter_has_zero_gradient():
    cfg = small_cfg(stages=1, depth=3)
    params = network.init_params(cfg, dtype=np.float64)
    params["stage_scalars"][0, 2] = 0.0
    net = network.ConvCSNet(cfg, params)
    x = np.random.default_rng(0).uniform(size=(1, 1, 26, 26))
    out = net.forward_images(x)
    grads = net.backward(out)
    assert not np.any(grads["branch.0.w"])
    assert np.any(grads["sensing"])


def test_gradient_of_half_squared_norm_is_output():
    x = ad.param(np.random.default_rng(0).normal(size=(1, 1, 4, 4)))
    out = ad.relu(x)
    ad.backward(out, out.value)
    np.testing.assert_array_equal(x.grad, out.value)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    cfg = verify.gradcheck_config(seed, width=8, depth=4, stages=4)
    errors = verify.gradient_errors(cfg, seed)
    assert set(errors) == set(network.param_shapes(cfg))
    assert max(errors.values()) <= 1e-4


def test_gradient_check_detects_a_wrong_gradient(monkeypatch):
    cfg = verify.gradcheck_config(1, width=6, depth=2, stages=2)
    backward = network.ConvCSNet.backward

    def skewed(self, g):
        grads = backward(self, g)
        grads["branch.1.w"] = grads["branch.1.w"] * 1.001
        return grads

    monkeypatch.setattr(network.ConvCSNet, "backward", skewed)
    errors = verify.gradient_errors(cfg, 1)
    assert errors["branch.1.w"] > 1e-4
    assert max(v for k, v in errors.items() if k != "branch.1.w") <= 1e-4


def test_corner_fill_offset_gradients():
    cfg = verify.gradcheck_config(0, width=6, depth=2, stages=2)
    cfg = network.NetConfig(**{**cfg.__dict__, "fill_offset": "corner", "tap_mode": "final"})
    assert max(verify.gradient_errors(cfg, 3).values()) <= 1e-4


def test_config_mismatch():
    cfg = small_cfg()
    with pytest.raises(network.ConfigMismatchError):
        network.ConvCSNet(cfg, network.init_params(small_cfg(width=7)))
    bank, y = _measure(np.zeros((1, 21, 21)), network.NetConfig.from_preset("rate0.3"))
    with pytest.raises(network.ConfigMismatchError):
        network.forward(y, network.init_params(cfg), cfg)


# -- ADAM ---------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = network.adam_step(p, {"w": np.zeros(2)}, network.AdamState.zeros_like(p), lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": np.zeros(3)}
    g = {"w": np.array([0.5, -3.0, 1e-3])}
    new, _ = network.adam_step(p, g, network.AdamState.zeros_like(p), lr=1e-3)
    np.testing.assert_allclose(new["w"], -1e-3 * np.sign(g["w"]), atol=1e-6 * 1e-3 + 1e-8)


def test_adam_matches_reference_formula_and_is_deterministic():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=4)}
    grads = [{"w": rng.normal(size=4)} for _ in range(5)]
    m = v = np.zeros(4)
    w = p["w"].copy()
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g["w"]
        v = 0.999 * v + 0.001 * g["w"] ** 2
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    runs = []
    for _ in range(2):
        q, s = dict(p), network.AdamState.zeros_like(p)
        for g in grads:
            q, s = network.adam_step(q, g, s, lr=0.01)
        runs.append(q["w"])
    np.testing.assert_allclose(runs[0], w, rtol=1e-12)
    np.testing.assert_array_equal(runs[0], runs[1])


def test_adam_frozen_group():
    p = {"a": np.ones(2), "b": np.ones(2)}
    g = {"a": np.ones(2), "b": np.ones(2)}
    new, _ = network.adam_step(p, g, network.AdamState.zeros_like(p), lr=0.1, frozen=("a",))
    np.testing.assert_array_equal(new["a"], 1.0)
    assert np.all(new["b"] < 1.0)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    cfg = small_cfg(init_seed=5, sensing_seed=9, fill_offset="corner", tap_mode="final")
    params = network.init_params(cfg)
    a = tmp_path / "a.ccsn"
    b = tmp_path / "b.ccsn"
    network.save_checkpoint(a, cfg, params)
    cfg2, params2 = network.load_checkpoint(a)
    network.save_checkpoint(b, cfg2, params2)
    assert a.read_bytes() == b.read_bytes()
    assert cfg2 == cfg
    for k in params:
        np.testing.assert_array_equal(params[k], params2[k])


def test_checkpoint_corruption_detected():
    cfg = small_cfg()
    data = network.checkpoint_bytes(cfg, network.init_params(cfg))
    for bad in (b"XXXX" + data[4:], data[:-3], data + b"\0", data[:4] + b"\x09\x00" + data[6:]):
        with pytest.raises(network.CheckpointFormatError):
            network.parse_checkpoint(bad)
