import numpy as np
import pytest

from splat4d import deform, distill
from splat4d import rasterizer as ras

from conftest import orbit_camera, random_cloud
from oracles import finite_difference, max_rel_err


def rand_batch(rng, shape=(16, 2, 2, 3), neg=False, aug=False, used=False):
    def t():
        return rng.standard_normal(shape)

    return distill.ScoreBatch(
        eps_cond=t(), eps_uncond=t(),
        eps_neg=t() if neg else None,
        eps_aug=t() if aug else None,
        eps_used=t() if used else None)


class TestNoiseSchedule:
    def test_variance_preserving(self):
        sched = distill.NoiseSchedule.scaled_linear()
        assert sched.steps == 1000
        assert np.allclose(sched.alpha ** 2 + sched.sigma ** 2, 1.0,
                           atol=1e-12)

    def test_snr_strictly_decreasing(self):
        sched = distill.NoiseSchedule.scaled_linear()
        snr = sched.alpha / sched.sigma
        assert np.all(np.diff(snr) < 0.0)

    def test_alpha0_near_one(self):
        sched = distill.NoiseSchedule.scaled_linear()
        assert sched.alpha[0] > 0.999

    def test_tables_match_loop_oracle(self):
        # recompute alpha-bar with plain python floats, no cumprod
        steps, b0, b1 = 1000, 8.5e-4, 1.2e-2
        sched = distill.NoiseSchedule.scaled_linear(steps, b0, b1)
        r0, r1 = np.sqrt(b0), np.sqrt(b1)
        acc = 1.0
        bars = []
        for i in range(steps):
            beta = (r0 + (r1 - r0) * i / (steps - 1)) ** 2
            acc *= 1.0 - beta
            bars.append(acc)
        bars = np.asarray(bars)
        assert np.allclose(sched.alpha ** 2, bars, rtol=1e-12, atol=0.0)
        assert np.allclose(sched.sigma ** 2, 1.0 - bars, rtol=1e-9)

    def test_custom_steps(self):
        sched = distill.NoiseSchedule.scaled_linear(steps=50)
        assert sched.steps == 50
        assert np.all(np.diff(sched.alpha / sched.sigma) < 0.0)

    def test_rejects_non_variance_preserving(self):
        with pytest.raises(ValueError):
            distill.NoiseSchedule(np.array([0.9, 0.5]), np.array([0.1, 0.5]))

    def test_rejects_increasing_snr(self):
        a = np.array([0.5, 0.9])
        with pytest.raises(ValueError):
            distill.NoiseSchedule(a, np.sqrt(1.0 - a ** 2))

    def test_step_from_time(self):
        assert distill.step_from_time(0.0, 1000) == 0
        assert distill.step_from_time(1.0, 1000) == 999
        assert distill.step_from_time(0.98, 1000) == 979
        with pytest.raises(ValueError):
            distill.step_from_time(1.2, 1000)
        with pytest.raises(ValueError):
            distill.step_from_time(-0.1, 1000)


class TestDiffuse:
    def test_zero_step_identity_limit(self, rng):
        sched = distill.NoiseSchedule.scaled_linear()
        x = rng.standard_normal((2, 4, 4, 3))
        z = distill.diffuse(x, 0, np.zeros_like(x), sched)
        assert np.allclose(z, x, rtol=0.0, atol=5e-4 * np.abs(x).max())

    def test_elementwise_formula(self, rng):
        sched = distill.NoiseSchedule.scaled_linear()
        x = rng.standard_normal((3, 2, 2, 1))
        eps = rng.standard_normal(x.shape)
        t = 412
        z = distill.diffuse(x, t, eps, sched)
        assert np.array_equal(z, sched.alpha[t] * x + sched.sigma[t] * eps)

    def test_variance_preserved_monte_carlo(self):
        # unit-variance data stays unit variance after diffusion
        sched = distill.NoiseSchedule.scaled_linear()
        rng = np.random.default_rng(99)
        n = 200_000
        x = rng.standard_normal((n, 1, 1, 1))
        eps = rng.standard_normal((n, 1, 1, 1))
        z = distill.diffuse(x, 700, eps, sched)
        assert abs(z.var() - 1.0) <= 3.0 * np.sqrt(2.0 / n)

    def test_shape_mismatch_raises(self, rng):
        sched = distill.NoiseSchedule.scaled_linear()
        with pytest.raises(ValueError):
            distill.diffuse(np.zeros((2, 2, 2, 3)), 10,
                            np.zeros((2, 2, 2, 1)), sched)

    def test_step_out_of_range_raises(self):
        sched = distill.NoiseSchedule.scaled_linear()
        x = np.zeros((1, 2, 2, 3))
        with pytest.raises(ValueError):
            distill.diffuse(x, 1000, x, sched)
        with pytest.raises(ValueError):
            distill.diffuse(x, -1, x, sched)


class TestMotionAmplify:
    def test_identity_bitwise(self, rng):
        x = rng.standard_normal((16, 3, 3, 3))
        out = distill.motion_amplify(x, 1.0)
        assert out is not x
        assert out.dtype == x.dtype
        assert out.tobytes() == x.tobytes()

    def test_two_frame_example(self):
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        out = distill.motion_amplify(x, 2.0)
        assert np.array_equal(out.ravel(), [0.0, 4.0])

    @pytest.mark.parametrize("omega", [0.0, 2.0, 24.0])
    def test_mean_preserved(self, rng, omega):
        x = rng.standard_normal((16, 4, 4, 3))
        out = distill.motion_amplify(x, omega)
        assert np.allclose(out.mean(axis=0), x.mean(axis=0), atol=1e-12)

    def test_single_frame_identity_any_omega(self, rng):
        x = rng.standard_normal((1, 4, 4, 3))
        out = distill.motion_amplify(x, 24.0)
        assert out.tobytes() == x.tobytes()

    def test_zero_omega_collapses_to_mean(self, rng):
        x = rng.standard_normal((8, 2, 2, 3))
        out = distill.motion_amplify(x, 0.0)
        assert np.allclose(out, np.broadcast_to(x.mean(axis=0), x.shape))

    def test_needs_frame_axis(self):
        with pytest.raises(ValueError):
            distill.motion_amplify(np.float64(3.0), 2.0)


class TestAssembleVideo:
    def test_plain_reduction(self, rng):
        batch = rand_batch(rng)
        w = distill.GuidanceWeights(omega_vid=1.3, omega_neg=0.0,
                                    omega_ma=1.0)
        out = distill.assemble_video_gradient(batch, w, w_t=0.7)
        expect = (0.7 * 1.3) * (batch.eps_cond - batch.eps_uncond)
        assert np.array_equal(out, expect)

    def test_equal_scores_vanish(self, rng):
        eps = rng.standard_normal((16, 2, 2, 3))
        batch = distill.ScoreBatch(eps_cond=eps, eps_uncond=eps.copy(),
                                   eps_neg=eps.copy())
        w = distill.GuidanceWeights(omega_vid=2.0, omega_neg=0.8,
                                    omega_ma=24.0)
        out = distill.assemble_video_gradient(batch, w, w_t=1.0)
        assert np.array_equal(out, np.zeros_like(eps))

    def test_missing_negative_raises(self, rng):
        batch = rand_batch(rng)
        w = distill.GuidanceWeights(omega_neg=0.8)
        with pytest.raises(ValueError):
            distill.assemble_video_gradient(batch, w, w_t=1.0)

    def test_single_frame_ignores_amplifier(self, rng):
        batch = rand_batch(rng, shape=(1, 4, 4, 3))
        big = distill.GuidanceWeights(omega_ma=24.0)
        one = distill.GuidanceWeights(omega_ma=1.0)
        a = distill.assemble_video_gradient(batch, big, w_t=1.0)
        b = distill.assemble_video_gradient(batch, one, w_t=1.0)
        assert np.allclose(a, b, atol=1e-14)

    def test_linear_in_classifier_difference(self, rng):
        batch = rand_batch(rng)
        doubled = distill.ScoreBatch(
            eps_cond=batch.eps_uncond
            + 2.0 * (batch.eps_cond - batch.eps_uncond),
            eps_uncond=batch.eps_uncond)
        w = distill.GuidanceWeights(omega_ma=7.0)
        a = distill.assemble_video_gradient(batch, w, w_t=1.0)
        b = distill.assemble_video_gradient(doubled, w, w_t=1.0)
        assert np.allclose(b, 2.0 * a, atol=1e-12)

    def test_sds_equals_csd_when_cond_is_noise(self, rng):
        eps = rng.standard_normal((16, 2, 2, 3))
        batch = distill.ScoreBatch(eps_cond=eps,
                                   eps_uncond=rng.standard_normal(eps.shape),
                                   eps_used=eps.copy())
        w = distill.GuidanceWeights(omega_ma=24.0)
        a = distill.assemble_video_gradient(batch, w, w_t=1.0, mode="sds")
        b = distill.assemble_video_gradient(batch, w, w_t=1.0, mode="csd")
        assert np.array_equal(a, b)

    def test_sds_adds_generative_term(self, rng):
        batch = rand_batch(rng, used=True)
        w = distill.GuidanceWeights(omega_vid=1.5, omega_ma=3.0)
        sds = distill.assemble_video_gradient(batch, w, w_t=0.9, mode="sds")
        csd = distill.assemble_video_gradient(batch, w, w_t=0.9, mode="csd")
        gen = distill.motion_amplify(batch.eps_cond - batch.eps_used, 3.0)
        assert np.allclose(sds - csd, 0.9 * 1.5 * gen, atol=1e-12)

    def test_sds_needs_used_noise(self, rng):
        batch = rand_batch(rng)
        w = distill.GuidanceWeights()
        with pytest.raises(ValueError):
            distill.assemble_video_gradient(batch, w, w_t=1.0, mode="sds")

    def test_unknown_mode_raises(self, rng):
        with pytest.raises(ValueError):
            distill.assemble_video_gradient(rand_batch(rng),
                                            distill.GuidanceWeights(),
                                            w_t=1.0, mode="vsd")

    def test_non_finite_scores_rejected(self, rng):
        batch = rand_batch(rng)
        batch.eps_cond[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            distill.assemble_video_gradient(batch,
                                            distill.GuidanceWeights(), 1.0)

    def test_mismatched_tensor_shapes_rejected(self, rng):
        batch = rand_batch(rng)
        batch.eps_neg = rng.standard_normal((16, 2, 2, 1))
        with pytest.raises(ValueError):
            distill.assemble_video_gradient(
                batch, distill.GuidanceWeights(omega_neg=0.8), 1.0)


class TestAssembleImage:
    def test_zero_weight_zero_output(self, rng):
        batch = rand_batch(rng, shape=(4, 3, 3, 3))
        w = distill.GuidanceWeights(omega_im=0.0)
        out = distill.assemble_image_gradient(batch, w, w_t=1.0)
        assert np.array_equal(out, np.zeros_like(batch.eps_cond))

    def test_equal_scores_vanish(self, rng):
        eps = rng.standard_normal((4, 3, 3, 3))
        batch = distill.ScoreBatch(eps_cond=eps, eps_uncond=eps.copy())
        out = distill.assemble_image_gradient(batch,
                                              distill.GuidanceWeights(), 1.0)
        assert np.array_equal(out, np.zeros_like(eps))

    def test_plain_formula(self, rng):
        batch = rand_batch(rng, shape=(4, 3, 3, 3))
        w = distill.GuidanceWeights(omega_im=0.4)
        out = distill.assemble_image_gradient(batch, w, w_t=0.5)
        expect = (0.5 * 0.4) * (batch.eps_cond - batch.eps_uncond)
        assert np.array_equal(out, expect)

    def test_linearity(self, rng):
        batch = rand_batch(rng, shape=(4, 3, 3, 3))
        doubled = distill.ScoreBatch(
            eps_cond=batch.eps_uncond
            + 2.0 * (batch.eps_cond - batch.eps_uncond),
            eps_uncond=batch.eps_uncond)
        a = distill.assemble_image_gradient(batch,
                                            distill.GuidanceWeights(), 1.0)
        b = distill.assemble_image_gradient(doubled,
                                            distill.GuidanceWeights(), 1.0)
        assert np.allclose(b, 2.0 * a, atol=1e-12)


class TestAssembleStage1:
    def shapes(self):
        return (4, 3, 3, 3)

    def test_reduction_without_extras(self, rng):
        b3 = rand_batch(rng, self.shapes())
        bi = rand_batch(rng, self.shapes())
        w = distill.GuidanceWeights(omega_3d=1.6, omega_im=0.4,
                                    omega_vg=0.0, omega_neg=0.0)
        out = distill.assemble_stage1_gradient(b3, bi, w, w_t=0.8)
        expect = 0.8 * (1.6 * (b3.eps_cond - b3.eps_uncond)
                        + 0.4 * (bi.eps_cond - bi.eps_uncond))
        assert np.array_equal(out, expect)

    def test_identical_augmented_prompt_is_neutral(self, rng):
        b3 = rand_batch(rng, self.shapes())
        bi = rand_batch(rng, self.shapes())
        bi.eps_aug = bi.eps_cond.copy()
        with_vg = distill.GuidanceWeights(omega_vg=3.0)
        without = distill.GuidanceWeights(omega_vg=0.0)
        a = distill.assemble_stage1_gradient(b3, bi, with_vg, 1.0)
        b = distill.assemble_stage1_gradient(b3, bi, without, 1.0)
        assert np.array_equal(a, b)

    def test_all_weights_zero(self, rng):
        b3 = rand_batch(rng, self.shapes(), neg=True)
        bi = rand_batch(rng, self.shapes(), aug=True)
        w = distill.GuidanceWeights(omega_3d=0.0, omega_im=0.0,
                                    omega_vg=0.0, omega_neg=0.0)
        out = distill.assemble_stage1_gradient(b3, bi, w, w_t=1.0)
        assert np.array_equal(out, np.zeros(self.shapes()))

    def test_negative_rides_on_multiview_only(self, rng):
        b3 = rand_batch(rng, self.shapes(), neg=True)
        bi = rand_batch(rng, self.shapes(), neg=True)
        w = distill.GuidanceWeights(omega_neg=0.8)
        a = distill.assemble_stage1_gradient(b3, bi, w, 1.0)
        bi.eps_neg = rng.standard_normal(self.shapes())
        b = distill.assemble_stage1_gradient(b3, bi, w, 1.0)
        assert np.array_equal(a, b)

    def test_view_guidance_rides_on_image_only(self, rng):
        b3 = rand_batch(rng, self.shapes(), aug=True)
        bi = rand_batch(rng, self.shapes(), aug=True)
        w = distill.GuidanceWeights(omega_vg=3.0)
        a = distill.assemble_stage1_gradient(b3, bi, w, 1.0)
        b3.eps_aug = rng.standard_normal(self.shapes())
        b = distill.assemble_stage1_gradient(b3, bi, w, 1.0)
        assert np.array_equal(a, b)

    def test_missing_tensors_for_active_weights(self, rng):
        b3 = rand_batch(rng, self.shapes())
        bi = rand_batch(rng, self.shapes())
        with pytest.raises(ValueError):
            distill.assemble_stage1_gradient(
                b3, bi, distill.GuidanceWeights(omega_vg=3.0), 1.0)
        with pytest.raises(ValueError):
            distill.assemble_stage1_gradient(
                b3, bi, distill.GuidanceWeights(omega_neg=0.8), 1.0)

    def test_mismatched_batch_shapes(self, rng):
        b3 = rand_batch(rng, (4, 3, 3, 3))
        bi = rand_batch(rng, (4, 2, 2, 3))
        with pytest.raises(ValueError):
            distill.assemble_stage1_gradient(
                b3, bi, distill.GuidanceWeights(), 1.0)


def e2e_field(seed=2, hidden=8, layers=3):
    f = deform.init_field(hidden=hidden, layers=layers, seed=seed) \
        .astype(np.float64)
    # the zero-initialized output layer would hide most of the chain
    rng = np.random.default_rng(seed + 10)
    f.out_weight = rng.normal(0.0, 0.4, f.out_weight.shape)
    f.out_bias = rng.normal(0.0, 0.1, f.out_bias.shape)
    return f


class TestChainToParameters:
    def test_zero_pixel_gradient(self, rng):
        cloud = random_cloud(rng, 6)
        cam = orbit_camera(rng)
        out = ras.render_forward(cloud, cam, ras.RenderSettings())
        grads = distill.chain_to_parameters(
            np.zeros((cam.height, cam.width, 3)), out.aux)
        assert grads.field is None
        assert np.all(grads.cloud.d_positions == 0.0)
        assert np.all(grads.cloud.d_sh == 0.0)
        assert np.all(grads.cloud.d_opacities_raw == 0.0)

    def test_static_routing_matches_renderer(self, rng):
        cloud = random_cloud(rng, 6)
        cam = orbit_camera(rng)
        out = ras.render_forward(cloud, cam, ras.RenderSettings())
        d_image = rng.standard_normal((cam.height, cam.width, 3))
        via_chain = distill.chain_to_parameters(d_image, out.aux)
        direct = ras.render_backward(out.aux, d_image)
        assert np.array_equal(via_chain.cloud.d_positions,
                              direct.d_positions)
        assert np.array_equal(via_chain.cloud.d_sh, direct.d_sh)

    def test_extras_need_context(self, rng):
        cloud = random_cloud(rng, 4)
        cam = orbit_camera(rng)
        out = ras.render_forward(cloud, cam, ras.RenderSettings())
        with pytest.raises(ValueError):
            distill.chain_to_parameters(
                np.zeros((cam.height, cam.width, 3)), out.aux,
                extra_d_displacements=np.zeros((4, 3)))

    def test_dynamic_routing_freezes_cloud(self, rng):
        cloud = random_cloud(rng, 5)
        cam = orbit_camera(rng, width=24, height=24)
        field = e2e_field()
        disp, tape = deform.field_forward(field, cloud.positions, 0.6)
        out = ras.render_forward(cloud.with_positions(cloud.positions + disp),
                                 cam, ras.RenderSettings())
        ctx = distill.DeformationContext(field, cloud.positions, 0.6, tape)
        grads = distill.chain_to_parameters(
            rng.standard_normal((24, 24, 3)), out.aux, ctx)
        assert grads.cloud is None
        assert grads.field is not None
        total = sum(np.abs(g).sum() for _, g in grads.field.param_items())
        assert total > 0.0

    def test_end_to_end_chain_matches_fd(self):
        # scalar loss: weighted render of the deformed cloud plus a
        # displacement-space term entering through the extras hook
        rng = np.random.default_rng(31)
        cloud = random_cloud(rng, 5)
        cam = orbit_camera(rng, width=24, height=24)
        field = e2e_field()
        tau = 0.7
        settings = ras.RenderSettings(oracle_mode=True)
        w_img = rng.standard_normal((24, 24, 3))
        e_disp = rng.standard_normal((5, 3))

        def loss_for(f):
            disp, _ = deform.field_forward(f, cloud.positions, tau)
            out = ras.render_forward(
                cloud.with_positions(cloud.positions + disp), cam, settings)
            return float((out.image * w_img).sum()
                         + (disp * e_disp).sum())

        disp, tape = deform.field_forward(field, cloud.positions, tau)
        out = ras.render_forward(
            cloud.with_positions(cloud.positions + disp), cam, settings)
        ctx = distill.DeformationContext(field, cloud.positions, tau, tape)
        grads = distill.chain_to_parameters(w_img, out.aux, ctx,
                                            extra_d_displacements=e_disp)

        analytic = dict(grads.field.param_items())
        for name, arr in field.param_items():
            def loss(x, name=name):
                f2 = field.copy()
                dict(f2.param_items())[name][...] = x
                return loss_for(f2)

            fd = finite_difference(loss, arr.copy(), eps=1e-5)
            assert max_rel_err(analytic[name], fd, active=1e-5) <= 1e-3, name
