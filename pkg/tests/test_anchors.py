import numpy as np
import pytest

from idivsplat import anchors as A
from idivsplat.anchors import ModelConfig, MlpParams, init_model


def small_model(n=6, seed=0, **cfg):
    pts = np.random.default_rng(seed).uniform(-1, 1, (n, 3))
    return init_model(pts, ModelConfig(**cfg), seed=seed)


def test_mlp_zero_weights_outputs_bias():
    m = MlpParams(np.zeros((4, 8)), np.zeros(8), np.zeros((8, 3)), np.array([1.0, -2.0, 0.5]))
    out, _ = A.mlp_forward(m, np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (5, 1)))


def test_mlp_zero_upstream_zero_gradients():
    rng = np.random.default_rng(1)
    m = MlpParams.init(rng, 4, 3, hidden=8)
    _, cache = A.mlp_forward(m, rng.normal(size=(5, 4)))
    gx, gp = A.mlp_backward(m, cache, np.zeros((5, 3)))
    assert not gx.any() and not any(v.any() for v in gp.values())


def test_mlp_input_gradient_is_linear_adjoint_when_all_units_active():
    rng = np.random.default_rng(2)
    m = MlpParams.init(rng, 4, 3, hidden=8)
    m.b1[:] = 100.0  # every hidden unit active: the network is affine
    x = rng.normal(size=(1, 4))
    _, cache = A.mlp_forward(m, x)
    up = rng.normal(size=(1, 3))
    gx, _ = A.mlp_backward(m, cache, up)
    np.testing.assert_allclose(gx, up @ (m.w1 @ m.w2).T, rtol=1e-12)


def test_mlp_backward_finite_differences():
    rng = np.random.default_rng(3)
    m = MlpParams.init(rng, 5, 4, hidden=7)
    x = rng.normal(size=(3, 5))
    up = rng.normal(size=(3, 4))
    gx, gp = A.mlp_backward(m, A.mlp_forward(m, x)[1], up)
    f = lambda mm, xx: float(np.sum(A.mlp_forward(mm, xx)[0] * up))
    eps = 1e-6
    for name, arr in m.arrays().items():
        for idx in list(np.ndindex(arr.shape))[:12]:
            arr[idx] += eps
            fp = f(m, x)
            arr[idx] -= 2 * eps
            fm = f(m, x)
            arr[idx] += eps
            assert (fp - fm) / (2 * eps) == pytest.approx(gp[name][idx], rel=1e-6, abs=1e-9)


def test_mlp_rejects_wrong_input_dim():
    m = MlpParams.init(np.random.default_rng(0), 4, 3, hidden=8)
    with pytest.raises(ValueError):
        A.mlp_forward(m, np.zeros(5))


def test_decoder_output_sizes_follow_offset_count():
    m = small_model(n_offsets=3)
    K = 3
    assert m.mlp("mlp_idiv").output_dim == 9 * K
    assert m.mlp("mlp_cov").output_dim == 7 * K
    assert m.mlp("mlp_opacity").output_dim == K
    assert m.mlp("mlp_albedo").output_dim == 3 * K
    assert m.mlp("mlp_specattr").output_dim == K * (1 + m.config.spec_latent_dim)
    b, _ = A.decode(m)
    assert len(b) == m.n_gaussians == 6 * K
    assert b.idiv.shape == (18, 3, 3)


def test_zero_offsets_put_gaussians_on_anchor():
    m = small_model()
    m.params["offset"][:] = 0.0
    g = A.spawn_gaussians(2, m)
    np.testing.assert_array_equal(g.means, np.tile(m.anchor_xyz[2], (m.config.n_offsets, 1)))


def test_zero_idiv_decoder_gives_black_diffuse():
    from idivsplat.shading import diffuse_color

    m = small_model()
    for k in ("w1", "b1", "w2", "b2"):
        m.params[f"mlp_idiv.{k}"][:] = 0.0
    g = A.spawn_gaussians(0, m)
    np.testing.assert_array_equal(g.idiv, 0.0)
    L, _ = diffuse_color(np.full((5, 3), 0.5), g.idiv, np.tile([0, 0, 1.0], (5, 1)))
    np.testing.assert_array_equal(L, 0.0)


def test_equal_features_decode_equal_attributes():
    m = small_model()
    m.params["feature"][3] = m.params["feature"][1]
    m.params["log_scaling"][3] = m.params["log_scaling"][1]
    a, b = A.spawn_gaussians(1, m), A.spawn_gaussians(3, m)
    for name in ("quats", "opacity_logit", "albedo_logit", "idiv", "rough_logit", "spec_latent"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_scales_bounded_by_anchor_scaling():
    m = small_model()
    b, _ = A.decode(m)
    bound = np.repeat(m.params["log_scaling"], m.config.n_offsets, axis=0)
    assert np.all(b.log_scales < bound)


def test_initial_render_attributes_are_near_gray():
    m = small_model()
    b, _ = A.decode(m)
    assert np.max(np.abs(b.idiv)) < 0.5
    k_D = 1 / (1 + np.exp(-b.albedo_logit))
    assert np.all(np.abs(k_D - 0.5) < 0.15)
    assert np.all(np.abs(m.params["feature"]) < 0.1)


def test_explicit_mode_parameters():
    m = small_model(use_anchor=False)
    assert "g_mean" in m.params and "mlp_idiv.w1" not in m.params
    b, _ = A.decode(m)
    assert b.idiv.shape == (30, 3, 3)
    m2 = small_model(use_anchor=False, use_idiv=False)
    b2, _ = A.decode(m2)
    assert b2.idiv is None and b2.sh.shape == (30, 16, 3)
    with pytest.raises(AttributeError):
        m.anchors


def test_decode_vjp_finite_differences():
    rng = np.random.default_rng(4)
    m = small_model(n=3, seed=4)
    b, cache = A.decode(m)
    w = b.zeros_like()
    for f in ("means", "quats", "log_scales", "opacity_logit", "albedo_logit", "idiv", "rough_logit",
              "spec_latent"):
        setattr(w, f, rng.normal(size=getattr(b, f).shape))
    w.feature = rng.normal(size=b.feature.shape)

    def f(model):
        bb, _ = A.decode(model)
        return sum(float(np.sum(getattr(bb, k) * getattr(w, k))) for k in
                   ("means", "quats", "log_scales", "opacity_logit", "albedo_logit", "idiv", "rough_logit",
                    "spec_latent", "feature"))

    grads = A.decode_vjp(m, cache, w)
    eps = 1e-6
    for key in ("feature", "offset", "log_scaling", "mlp_cov.w2", "mlp_idiv.b1", "mlp_specattr.w1"):
        arr = m.params[key]
        for idx in list(np.ndindex(arr.shape))[:10]:
            arr[idx] += eps
            fp = f(m)
            arr[idx] -= 2 * eps
            fm = f(m)
            arr[idx] += eps
            assert (fp - fm) / (2 * eps) == pytest.approx(grads[key][idx], rel=1e-5, abs=1e-8), key


def test_prune_threshold_zero_is_identity():
    m = small_model()
    p, keep = A.prune_anchors(m, 0.0)
    assert keep.all() and p.n_anchors == m.n_anchors


def test_prune_everything():
    m = small_model()
    m.params["mlp_opacity.b2"][:] = -50.0
    p, _ = A.prune_anchors(m, 0.005)
    assert p.n_anchors == 0
    b, _ = A.decode(p)
    assert len(b) == 0


def test_prune_one_of_three():
    m = small_model(n=3)
    w2 = m.params["mlp_opacity.w2"]
    w2[:] = 0.0
    m.params["mlp_opacity.w1"][:] = 0.0
    m.params["mlp_opacity.b1"][:] = 0.0
    m.params["mlp_opacity.b2"][:] = 0.0
    # make anchor 1 transparent through its feature: a single active hidden unit
    m.params["mlp_opacity.w1"][0, 0] = 1.0
    w2[0, :] = -100.0
    m.params["feature"][:, 0] = [0.0, 1.0, 0.0]
    state_rows = {k: np.arange(len(v)) for k, v in m.params.items() if not k.startswith("mlp_")}
    from idivsplat.optim import AdamState

    st = AdamState.zeros(m.params)
    for k, rows in state_rows.items():
        st.m[k] = np.broadcast_to(rows.reshape((-1,) + (1,) * (st.m[k].ndim - 1)), st.m[k].shape).astype(float)
    p, keep = A.prune_anchors(m, 0.005, st)
    assert keep.tolist() == [True, False, True]
    assert p.n_anchors == 2
    np.testing.assert_array_equal(p.anchor_xyz, m.anchor_xyz[[0, 2]])
    np.testing.assert_array_equal(st.m["feature"][:, 0], [0, 2])


def test_lipschitz_decreases_with_weight_decay():
    # train the idiv decoder toward a fixed target with decoupled weight decay
    rng = np.random.default_rng(5)
    x = rng.normal(size=(64, 8))
    y = np.sin(3 * x[:, :3])
    consts = []
    for decay in (0.0, 1.0, 5.0):
        m = MlpParams.init(np.random.default_rng(6), 8, 3, hidden=32)
        params = m.arrays()
        from idivsplat.optim import AdamState, adam_step

        st = AdamState.zeros(params)
        for _ in range(300):
            out, cache = A.mlp_forward(m, x)
            _, g = A.mlp_backward(m, cache, 2 * (out - y) / len(x))
            adam_step(params, g, st, {k: 1e-2 for k in params}, {k: decay for k in params})
        consts.append(A.empirical_lipschitz(m, np.random.default_rng(7)))
    assert all(np.isfinite(consts))
    assert consts[0] > consts[1] > consts[2]


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    m = small_model()
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    A.save_checkpoint(m, p1)
    back = A.load_checkpoint(p1)
    A.save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.config == m.config
    for k, v in m.params.items():
        np.testing.assert_array_equal(back.params[k], v)


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        A.checkpoint_from_bytes(b"not a checkpoint at all")
