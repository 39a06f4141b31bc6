import numpy as np
import pytest

from conftest import param_grad_error
from ddfire.diffcore import Graph, Parameter
from ddfire.fire import (DepthObservation, RayCache, ReconConfig, ReconResult,
                         ReconstructionDiverged, ReconstructionError, depth_loss, fire_step,
                         mask_iou, masked_depth_l1, read_trace, reconstruct_from_depth,
                         reconstruct_from_depth_sphere_traced, reconstruct_from_silhouette,
                         silhouette_loss, silhouette_terms, traced_step)
from ddfire.oracle import ShapeOracle
from ddfire.render import Camera, DepthImage, render_oracle


def col(g, v):
    return g.constant(np.asarray(v, dtype=np.float64).reshape(-1, 1))


@pytest.fixture
def observation():
    cam = Camera.look_at((1.2, 0.9, 1.3), width=16, height=16)
    return DepthObservation.from_image(render_oracle(ShapeOracle.sphere(0.4), cam), cam)


class TestDepthLoss:
    def test_perfect(self):
        g = Graph()
        assert depth_loss(g, col(g, [1.0, 2.0]), [1.0, 2.0], [True, True]).value == 0

    def test_bias(self):
        g = Graph()
        lam = np.array([1.0, 1.5, 2.0])
        assert float(depth_loss(g, col(g, lam + 0.1), lam, [1, 1, 1]).value) == pytest.approx(0.1)

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        lam, gt, sel = rng.random(30), rng.random(30), rng.random(30) < 0.5
        g = Graph()
        ref = sum(abs(a - b) for a, b, s in zip(lam, gt, sel) if s) / sel.sum()
        assert float(depth_loss(g, col(g, lam), gt, sel).value) == pytest.approx(ref, abs=1e-12)

    def test_empty_selection(self):
        g = Graph()
        assert depth_loss(g, col(g, [1.0]), [1.0], [False]) is None


class TestSilhouetteLoss:
    def test_optimum(self):
        g = Graph()
        mask = np.array([1, 1, 0, 0], bool)
        s = col(g, [0.0, 0.0, 0.1, -0.1])
        sigma = col(g, [1 - 1e-7, 1 - 1e-7, 1e-7, 1e-7])
        assert float(silhouette_loss(g, s, sigma, mask, 0.1).value) == pytest.approx(0, abs=1e-5)

    def test_foreground_term(self):
        g = Graph()
        terms = silhouette_terms(g, col(g, [0.05]), None, [True], 0.1)
        assert float(terms["S_pos"].value) == pytest.approx(0.05)
        assert "S_neg" not in terms

    def test_background_term(self):
        g = Graph()
        terms = silhouette_terms(g, col(g, [0.02]), None, [False], 0.1)
        assert float(terms["S_neg"].value) == pytest.approx(0.08)
        assert "S_pos" not in terms

    def test_hit_term_is_bce(self):
        g = Graph()
        terms = silhouette_terms(g, col(g, [0.0, 0.1]), col(g, [0.5, 0.5]), [True, False], 0.1)
        assert float(terms["S_sigma"].value) == pytest.approx(np.log(2))


class TestObservation:
    def test_shape_mismatch(self):
        cam = Camera.look_at((0, 0, 2), width=8, height=8)
        with pytest.raises(ReconstructionError):
            DepthObservation(np.ones((8, 7)), np.ones((8, 7), bool), cam)

    def test_nonpositive_depth(self):
        cam = Camera.look_at((0, 0, 2), width=4, height=4)
        with pytest.raises(ReconstructionError):
            DepthObservation(np.zeros((4, 4)), np.ones((4, 4), bool), cam)

    def test_no_sphere_hit(self, tiny_models):
        cam = Camera.look_at((0, 0, 2), target=(0, 0, 6), width=4, height=4)
        obs = DepthObservation(np.zeros((4, 4)), np.zeros((4, 4), bool), cam)
        with pytest.raises(ReconstructionError):
            reconstruct_from_depth(tiny_models, obs, ReconConfig(iterations=1))


class TestConfig:
    def test_modes(self):
        d, s = ReconConfig.depth_mode(), ReconConfig.silhouette_mode()
        assert (d.w_S, d.w_D, d.w_l, d.iterations) == (1.0, 1.0, 1e-4, 1000)
        assert (s.w_S, s.w_D, s.w_l) == (1.0, 0.0, 0.005)

    def test_schedule(self):
        c = ReconConfig()
        assert c.lr_at(0) == 1e-3 and c.lr_at(499) == 1e-3 and c.lr_at(500) == 5e-4


class TestFireStep:
    def test_evaluation_counts(self, tiny_models, observation):
        res = reconstruct_from_depth(tiny_models, observation, ReconConfig(iterations=3))
        assert res.n_rays > 0
        assert res.ddf_evals_per_iter == res.n_rays
        assert res.sdf_evals_per_iter == res.n_rays

    def test_gradient_matches_finite_differences(self, tiny_models, observation):
        cache = RayCache.build(tiny_models, observation)
        z = Parameter(tiny_models.latent(0).reshape(1, -1).copy(), name="z")
        cfg = ReconConfig(sigma_threshold=0.0)
        err = param_grad_error(z, lambda: fire_step(tiny_models, z, cache, observation.camera, cfg)[:2],
                               h=1e-6)
        assert err < 1e-3

    def test_cached_projection_matches_fresh(self, tiny_models, observation):
        z = Parameter(tiny_models.latent(1).reshape(1, -1).copy(), name="z")
        a = fire_step(tiny_models, z, RayCache.build(tiny_models, observation), observation.camera, ReconConfig())
        b = fire_step(tiny_models, z, RayCache.build(tiny_models, observation, cache_ddf=False),
                      observation.camera, ReconConfig())
        assert float(a[1].value) == pytest.approx(float(b[1].value), rel=1e-12)

    def test_cached_projection_carries_block_biases(self, tiny_models, observation):
        rng = np.random.default_rng(4)
        for k in range(tiny_models.ddf.n_blocks):
            tiny_models.ddf.params[f"b{k}.b"].value[...] = rng.normal(0, 0.5, tiny_models.config.ddf_hidden)
        z = Parameter(tiny_models.latent(0).reshape(1, -1).copy(), name="z")
        a = fire_step(tiny_models, z, RayCache.build(tiny_models, observation), observation.camera, ReconConfig())
        b = fire_step(tiny_models, z, RayCache.build(tiny_models, observation, cache_ddf=False),
                      observation.camera, ReconConfig())
        assert float(a[1].value) == pytest.approx(float(b[1].value), rel=1e-12)
        assert a[2] == pytest.approx(b[2], rel=1e-12)

    def test_both_gradient_paths_nonzero(self, tiny_models, observation):
        """Feed the DDF and the SDF separate copies of the code and compare gradients."""
        cache = RayCache.build(tiny_models, observation)
        z0 = tiny_models.latent(2).reshape(1, -1).copy()
        cfg = ReconConfig(sigma_threshold=0.0)
        ddf_fwd, sdf_fwd = tiny_models.ddf.forward, tiny_models.sdf.forward
        zd, zs = Parameter(z0.copy(), name="zd"), Parameter(z0.copy(), name="zs")

        def split_ddf(g, z, *a, **kw):
            return ddf_fwd(g, g.param(zd), *a, **kw)

        def split_sdf(g, z, *a, **kw):
            return sdf_fwd(g, g.param(zs), *a, **kw)

        tiny_models.ddf.forward, tiny_models.sdf.forward = split_ddf, split_sdf
        try:
            z = Parameter(z0.copy(), name="z")
            g, total, _ = fire_step(tiny_models, z, cache, observation.camera, cfg)
            g.backward(total)
        finally:
            del tiny_models.ddf.forward, tiny_models.sdf.forward
        assert np.abs(zd.grad).max() > 0 and np.abs(zs.grad).max() > 0
        zf = Parameter(z0.copy(), name="z")
        g, total, _ = fire_step(tiny_models, zf, cache, observation.camera, cfg)
        g.backward(total)
        # regularizer gradient flows through z directly; the rest splits over the heads
        reg = cfg.w_l * z0 / np.linalg.norm(z0)
        np.testing.assert_allclose(zf.grad, zd.grad + zs.grad + reg, rtol=1e-9, atol=1e-12)


class TestReconstruction:
    def snapshot(self, models):
        return {k: p.value.tobytes() for k, p in models.named_parameters().items()}

    def test_models_stay_frozen(self, tiny_models, observation):
        before = self.snapshot(tiny_models)
        reconstruct_from_depth(tiny_models, observation, ReconConfig(iterations=4))
        reconstruct_from_depth_sphere_traced(tiny_models, observation, ReconConfig(iterations=2))
        reconstruct_from_silhouette(tiny_models, observation.mask, observation.camera,
                                    ReconConfig.silhouette_mode(iterations=2))
        assert self.snapshot(tiny_models) == before

    def test_zero_init_and_update(self, tiny_models, observation):
        res = reconstruct_from_depth(tiny_models, observation, ReconConfig(iterations=2))
        assert res.z.shape == (1, tiny_models.config.latent_dim)
        assert np.abs(res.z).max() > 0
        assert len(res.trace) == 2 and res.ms_per_iter > 0

    def test_sphere_traced_finite_and_costlier(self, tiny_models, observation):
        res = reconstruct_from_depth_sphere_traced(tiny_models, observation, ReconConfig(iterations=3))
        assert np.all(np.isfinite(res.losses()))
        assert res.sdf_evals_per_iter >= 2 * res.n_rays
        assert res.ddf_evals_per_iter == 0

    def test_traced_step_counts(self, tiny_models, observation):
        cache = RayCache.build(tiny_models, observation, cache_ddf=False)
        z = Parameter(np.zeros((1, tiny_models.config.latent_dim)), name="z")
        before = tiny_models.sdf.evaluations
        evals = traced_step(tiny_models, z, cache, observation.camera, ReconConfig())[3]
        assert evals == tiny_models.sdf.evaluations - before

    def test_empty_mask_warns(self, tiny_models):
        cam = Camera.look_at((1.2, 0.9, 1.3), width=8, height=8)
        with pytest.warns(RuntimeWarning, match="empty"):
            reconstruct_from_silhouette(tiny_models, np.zeros((8, 8), bool), cam,
                                        ReconConfig.silhouette_mode(iterations=2))

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_divergence_keeps_trace(self, tiny_models, observation):
        z = np.full(tiny_models.config.latent_dim, np.nan)
        with pytest.raises(ReconstructionDiverged) as info:
            reconstruct_from_depth(tiny_models, observation, ReconConfig(iterations=3), z_init=z)
        assert info.value.trace == []

    def test_trace_csv_round_trip(self, tmp_path):
        res = ReconResult(z=np.zeros((1, 2)), trace=[
            {"iter": 0, "L_rec": 0.5, "L_S": 0.25, "L_D": 0.2, "L_l": 0.05, "ms": 12.5},
            {"iter": 1, "L_rec": 0.25, "L_S": 0.125, "L_D": 0.1, "L_l": 0.025, "ms": 11.0}])
        res.write_trace(tmp_path / "t.csv")
        text = (tmp_path / "t.csv").read_text()
        assert text.splitlines()[0] == "iter,L_rec,L_S,L_D,L_l,ms"
        assert read_trace(tmp_path / "t.csv") == res.trace


class TestMetrics:
    def test_iou(self):
        a = np.array([[1, 1], [0, 0]], bool)
        b = np.array([[1, 0], [1, 0]], bool)
        assert mask_iou(a, b) == pytest.approx(1 / 3)
        assert mask_iou(a, a) == 1 and mask_iou(~a & a, ~a & a) == 1

    def test_masked_l1(self):
        cam = Camera.look_at((0, 0, 2), width=2, height=1)
        obs = DepthObservation(np.array([[1.0, 2.0]]), np.array([[True, True]]), cam)
        img = DepthImage(np.array([[1.5, 0.0]]), np.array([[True, False]]))
        assert masked_depth_l1(img, obs) == pytest.approx(0.5)
