import math

import numpy as np
import pytest

from exnerf import camera as cam
from exnerf.diffnet import Tape, Var
from exnerf.encoding import EncodingSpec, positional_encode
from exnerf.errors import InvalidArgumentError
from exnerf.field import (Conditioning, FieldConfig, FieldInputs, FieldModel, composite,
                          composite_values, deform, field_eval, render_image, render_ray,
                          render_rays)
from exnerf.prior import gate_expression

from gradcheck import check_gradients, tiny_model


def homogeneous(n, c=0.7):
    t = cam.stratified_t(0.0, 1.0, n)
    sigma = np.ones((1, n))
    rgb = np.full((1, n, 3), c)
    return composite_values(sigma, rgb, t, np.array([1.0]))


def test_empty_medium_is_background():
    t = cam.stratified_t(1.0, 2.0, 16)
    color, w, _, depth, _ = composite_values(np.zeros((1, 16)), np.full((1, 16, 3), 0.5), t,
                                             np.array([2.0]))
    assert np.all(color == 0) and w.sum() == 0


def test_opaque_front():
    t = cam.stratified_t(1.0, 2.0, 16)
    sigma = np.zeros((1, 16))
    sigma[0, 0] = 1e6
    rgb = np.random.default_rng(0).random((1, 16, 3))
    color, w, _, depth, _ = composite_values(sigma, rgb, t, np.array([2.0]))
    np.testing.assert_allclose(color[0], rgb[0, 0], atol=1e-12)
    assert depth[0] == pytest.approx(t[0, 0])


def test_homogeneous_converges():
    exact = 0.7 * (1 - math.exp(-1))
    errs = [abs(homogeneous(n)[0][0, 0] - exact) for n in (16, 64, 256)]
    assert errs[2] < 1e-3
    assert errs[0] > errs[1] > errs[2]
    # at least linear convergence
    assert errs[1] <= errs[0] / 4 * 1.01 + 1e-15 or errs[1] <= errs[0] / 2
    assert errs[2] <= errs[1] / 2


def test_unsorted_rejected():
    with pytest.raises(InvalidArgumentError):
        composite_values(np.ones((1, 3)), np.ones((1, 3, 3)), np.array([[0.1, 0.5, 0.3]]),
                         np.array([1.0]))


def test_weight_invariants():
    rng = np.random.default_rng(1)
    sigma = rng.exponential(3.0, size=(50, 32))
    t = np.sort(rng.uniform(1, 3, size=(50, 32)), axis=1)
    color, w, trans, depth, _ = composite_values(sigma, rng.random((50, 32, 3)), t,
                                                 np.full(50, 3.0))
    assert np.all(w >= 0) and np.all(w.sum(axis=1) <= 1 + 1e-6)
    assert np.all(np.diff(trans, axis=1) <= 0)
    assert np.all((depth >= 1) & (depth <= 3))


def test_composite_gradient():
    rng = np.random.default_rng(2)
    s0 = rng.exponential(1.0, size=(3, 6))
    c0 = rng.random((3, 6, 3))
    t = np.sort(rng.uniform(0, 2, size=(3, 6)), axis=1)
    tf = np.full(3, 2.0)
    g = rng.normal(size=(3, 3))
    s, c = Var(s0.copy(), True), Var(c0.copy(), True)
    tape = Tape()
    out, _, _ = composite(tape, s, c, t, tf)
    tape.backward(out, g)

    def f(sv, cv):
        return np.sum(g * composite_values(sv, cv, t, tf)[0])
    h = 1e-6
    for i in np.ndindex(s0.shape):
        sp, sm = s0.copy(), s0.copy()
        sp[i] += h
        sm[i] -= h
        assert s.grad[i] == pytest.approx((f(sp, c0) - f(sm, c0)) / (2 * h), rel=1e-6, abs=1e-9)
    for i in list(np.ndindex(c0.shape))[:20]:
        cp, cm = c0.copy(), c0.copy()
        cp[i] += h
        cm[i] -= h
        assert c.grad[i] == pytest.approx((f(s0, cp) - f(s0, cm)) / (2 * h), rel=1e-6, abs=1e-9)


def test_deform_is_identity_at_init():
    m = FieldModel(FieldConfig(width=16, depth=2, skip_layer=1, deform_width=16, deform_depth=2,
                               deform_skip=None), 2, dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(10, 3))
    omega = np.random.default_rng(1).normal(size=(1, 128))
    delta = deform(m, Tape(), x, omega, np.zeros(10, dtype=np.int64), 3.0)
    assert np.all(delta.value == 0)


def naive_deform(model, x, omega, alpha):
    enc = positional_encode(x, EncodingSpec(model.config.deform_bands), model.ctf_weights(alpha))
    inp = np.concatenate([enc, np.repeat(omega, len(x), axis=0)], axis=1)
    h = inp
    for i, (W, b) in enumerate(model.deform.layers[:-1]):
        if i == model.deform.spec.skip_layer:
            h = np.concatenate([h, inp], axis=1)
        h = np.maximum(h @ W.value + b.value, 0)
    W, b = model.deform.layers[-1]
    return h @ W.value + b.value


def test_deform_matches_naive_evaluation():
    m = tiny_model()
    x = np.random.default_rng(3).normal(size=(7, 3))
    for omega in (np.zeros((1, 128)), m.latents.deformation.value[1:2]):
        got = deform(m, Tape(), x, omega, np.zeros(7, dtype=np.int64), 2.3).value
        np.testing.assert_allclose(got, naive_deform(m, x, omega, 2.3), atol=1e-12)


def test_equal_codes_equal_deformation():
    m = tiny_model()
    omega = m.latents.deformation.value[0:1]
    x = np.random.default_rng(4).normal(size=(5, 3))
    codes = np.concatenate([omega, omega])
    a = deform(m, Tape(), x, codes, np.zeros(5, dtype=np.int64), 6.0).value
    b = deform(m, Tape(), x, codes, np.ones(5, dtype=np.int64), 6.0).value
    assert np.array_equal(a, b)


def test_input_widths():
    m = FieldModel(FieldConfig(), 2)
    assert m.coarse.trunk.spec.input_dim == 63 + 50
    assert m.coarse.color.spec.input_dim - m.config.width == 27 + 8


def test_zero_beta_reduces_to_unconditioned_field():
    m = tiny_model()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 3))
    d = rng.normal(size=(6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    phi = rng.normal(size=8)
    a = field_eval(m, x, d, phi, np.zeros(50), "fine", Tape())
    # rows of the trunk's first layer that multiply beta contribute nothing
    W = m.fine.trunk.layers[0][0]
    W.value[63:] = rng.normal(size=W.value[63:].shape)
    b = field_eval(m, x, d, phi, np.zeros(50), "fine", Tape())
    assert np.array_equal(a.color, b.color) and np.array_equal(a.density, b.density)
    assert np.all(a.density >= 0) and np.all((a.color >= 0) & (a.color <= 1))


def test_outside_rays_independent_of_beta():
    m = tiny_model()
    camera = cam.Camera(6, 6, 6.0, 6.0, 3.0, 3.0, cam.look_at([0, 0, 2], [0, 0, 0]))
    mask = np.zeros((6, 6), dtype=bool)
    mask[2:4, 2:4] = True
    rng = np.random.default_rng(6)
    imgs = [render_image(m, camera, m.latents.deformation.value[0], m.latents.appearance.value[0],
                         rng.normal(size=50), mask, 1.0, 3.0)[0] for _ in range(3)]
    for img in imgs[1:]:
        assert np.array_equal(img[~mask], imgs[0][~mask])
        assert not np.array_equal(img[mask], imgs[0][mask])


def test_render_image_matches_single_rays():
    m = tiny_model()
    camera = cam.Camera(2, 2, 2.0, 2.0, 1.0, 1.0, cam.look_at([0, 0, 2], [0, 0, 0]))
    beta = np.random.default_rng(7).normal(size=50)
    mask = np.array([[True, False], [False, True]])
    omega, phi = m.latents.deformation.value[1], m.latents.appearance.value[1]
    img, depth, _ = render_image(m, camera, omega, phi, beta, mask, 1.0, 3.0, chunk=1)
    rays = cam.generate_rays(camera, None, 1.0, 3.0)
    for k, pix in enumerate(rays.pixels):
        sub = rays.subset([k])
        cond = Conditioning(omega[None], phi[None], np.zeros(1, dtype=np.int64), beta[None],
                            mask[tuple(pix)][None], float(m.config.deform_bands))
        out = render_rays(m, Tape(grad=False), sub, cond)["fine"]
        np.testing.assert_allclose(img[tuple(pix)], out.color_value[0], atol=1e-12)


def test_render_ray_single():
    m = tiny_model()
    ray = cam.Ray(np.array([0, 0, 2.0]), np.array([0, 0, -1.0]), 1.0, 3.0)
    inputs = FieldInputs(0, m.latents.deformation.value[0], m.latents.appearance.value[0],
                         np.ones(50), True, 1.0)
    t = cam.stratified_t(1.0, 3.0, 16)
    out = render_ray(m, ray, t, inputs, "coarse", Tape(grad=False))
    assert out.color_value.shape == (1, 3)
    assert 0 <= out.opacity[0] <= 1 + 1e-6
    with pytest.raises(InvalidArgumentError):
        FieldInputs(0, np.full(128, np.nan), np.zeros(8), np.zeros(50), True)


def test_init_render_near_background():
    m = FieldModel(FieldConfig(width=32, depth=2, skip_layer=1, color_width=16, deform_width=16,
                               deform_depth=2, deform_skip=None, coarse_samples=16,
                               fine_samples=16), 1)
    camera = cam.Camera(16, 16, 20.0, 20.0, 8.0, 8.0, cam.look_at([0, 0, 2.2], [0, 0, 0]))
    img, _, opacity = render_image(m, camera, np.zeros(128), np.zeros(8), np.zeros(50),
                                   np.ones((16, 16), bool), 1.4, 3.6)
    assert opacity.max() < 0.1 and img.max() < 0.1


def test_gradients_every_group():
    results, _ = check_gradients(tiny_model(seed=3), per_group=6, seed=3)
    assert {r[0] for r in results} == {"coarse", "fine", "deform", "deformation_codes",
                                       "appearance_codes"}
    assert max(r[-1] for r in results) < 1e-4


def test_beta_gradient_and_gating():
    m = tiny_model(seed=4)
    rng = np.random.default_rng(8)
    camera = cam.Camera(8, 8, 8, 8, 4, 4, cam.look_at([0, 0, 2], [0, 0, 0]))
    batch = cam.generate_rays(camera, np.array([[2, 2], [4, 5], [5, 3]]), 1.0, 3.0)
    ind = np.array([True, False, True])
    t = cam.stratified_t(batch.t_near, batch.t_far, 8)
    b0 = rng.normal(size=(3, 50))
    target = rng.random((3, 3))

    def loss(bv, tape):
        cond = Conditioning(m.latents.deformation.value[:1], m.latents.appearance.value[:1],
                            np.zeros(3, dtype=np.int64), bv, ind, 2.0)
        from exnerf.field import render_samples
        return tape.mse(render_samples(m, tape, "fine", batch, cond, t).color, target)
    beta = Var(b0.copy(), True)
    tape = Tape()
    tape.backward(loss(beta, tape))
    assert np.all(beta.grad[1] == 0)
    h = 1e-6
    for i in [(0, 0), (0, 7), (2, 30), (2, 49)]:
        bp, bm = b0.copy(), b0.copy()
        bp[i] += h
        bm[i] -= h
        num = (float(loss(bp, Tape()).value) - float(loss(bm, Tape()).value)) / (2 * h)
        assert beta.grad[i] == pytest.approx(num, rel=1e-4, abs=1e-9)
