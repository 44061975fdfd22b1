import numpy as np
import pytest

from sdftrack.codebook import build_codebook
from sdftrack.errors import InitializationError
from sdftrack.geometry import CameraIntrinsics, Pose, build_rotation_grid, rotation_error_deg
from sdftrack.particle_filter import (
    Detection,
    FilterConfig,
    ParticleSet,
    TrackerState,
    bayes_rotation_update,
    estimate,
    filter_step,
    init_particles,
    propagate,
    resample,
    update,
)
from sdftrack.render import DepthImage, render_depth
from sdftrack.shape import canonical_latent, get_basis

RNG = np.random.default_rng(90210)

SCENE_INTR = CameraIntrinsics(fx=280.0, fy=280.0, cx=159.5, cy=119.5, width=320, height=240)


@pytest.fixture(scope="module")
def camera_cb():
    basis = get_basis("camera")
    return build_codebook(basis, canonical_latent(basis), build_rotation_grid(30.0))


def uniform_set(n, J, t=None, s=None):
    t = np.tile([0.0, 0.0, 1.0], (n, 1)) if t is None else t
    s = np.full(n, 0.24) if s is None else s
    return ParticleSet(t=t, s=s, rot=np.full((n, J), 1.0 / J), log_w=np.zeros(n))


def render_frame(cb, quat, t, size):
    basis = get_basis("camera")
    lat = canonical_latent(basis)
    pose = Pose(quat=quat, t=np.asarray(t, float))
    return render_depth(basis, lat, pose, size, SCENE_INTR), pose


class TestConfig:
    def test_defaults_valid(self):
        cfg = FilterConfig()
        assert cfg.z_pad_eff == pytest.approx(0.125)

    def test_bad_values(self):
        with pytest.raises(ValueError):
            FilterConfig(n=0)
        with pytest.raises(ValueError):
            FilterConfig(ds=0.0)
        with pytest.raises(ValueError):
            FilterConfig(eps_rot=1.0)
        with pytest.raises(ValueError):
            FilterConfig(sigma_s=0.0)


class TestDetection:
    def test_from_mask_tight_bbox(self):
        mask = np.zeros((40, 60), bool)
        mask[10:20, 25:45] = True
        det = Detection.from_mask(mask)
        assert det.bbox == (25.0, 10.0, 44.0, 19.0)

    def test_mask_outside_bbox_rejected(self):
        mask = np.zeros((40, 60), bool)
        mask[5, 5] = True
        mask[30, 50] = True
        with pytest.raises(ValueError):
            Detection(bbox=(4.0, 4.0, 6.0, 6.0), mask=mask)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            Detection.from_mask(np.zeros((10, 10), bool))


class TestInit:
    def make_det(self, depth_value=1.0):
        depth = np.zeros((240, 320))
        mask = np.zeros((240, 320), bool)
        mask[100:140, 140:180] = True
        depth[mask] = depth_value
        return Detection.from_mask(mask), DepthImage(depth)

    def test_size_bounds(self):
        det, depth = self.make_det()
        cfg = FilterConfig(s0=0.2, ds=0.1)
        ps = init_particles(det, depth, SCENE_INTR, cfg, grid_size=48, seed=1)
        assert ps.n == cfg.n_init
        assert np.all(ps.s >= 0.15) and np.all(ps.s <= 0.25)

    def test_depth_band(self):
        det, depth = self.make_det(1.0)
        cfg = FilterConfig(s0=0.2, ds=0.1)
        ps = init_particles(det, depth, SCENE_INTR, cfg, grid_size=48, seed=1)
        # band covers the visible surface, pushed back by the center offset
        surf = ps.t[:, 2] - cfg.center_shift * ps.s
        assert np.all(surf >= 0.9 - 1e-12) and np.all(surf <= 1.1 + 1e-12)

    def test_uniform_rotations_and_weights(self):
        det, depth = self.make_det()
        ps = init_particles(det, depth, SCENE_INTR, FilterConfig(), grid_size=48, seed=1)
        assert np.all(ps.rot == 1.0 / 48)
        assert np.all(ps.log_w == 0.0)

    def test_deterministic(self):
        det, depth = self.make_det()
        a = init_particles(det, depth, SCENE_INTR, FilterConfig(), grid_size=8, seed=7)
        b = init_particles(det, depth, SCENE_INTR, FilterConfig(), grid_size=8, seed=7)
        assert np.array_equal(a.t, b.t) and np.array_equal(a.s, b.s)

    def test_insufficient_depth(self):
        det, depth = self.make_det()
        empty = DepthImage(np.zeros((240, 320)))
        with pytest.raises(InitializationError):
            init_particles(det, empty, SCENE_INTR, FilterConfig(), grid_size=8, seed=0)


class TestPropagate:
    def test_zero_alpha_keeps_translation(self):
        ps = uniform_set(20, 8)
        cfg = FilterConfig(alpha=0.0, sigma_t=(1e-15, 1e-15, 1e-15), sigma_s=1e-15)
        out = propagate(ps, [np.zeros(3), np.ones(3)], cfg, seed=3)
        assert np.allclose(out.t, ps.t, atol=1e-9)

    def test_velocity_shift(self):
        ps = uniform_set(20, 8)
        cfg = FilterConfig(alpha=1.0, sigma_t=(1e-15, 1e-15, 1e-15), sigma_s=1e-15)
        prev = [np.array([0.0, 0.0, 1.0]), np.array([0.01, 0.0, 1.0])]
        out = propagate(ps, prev, cfg, seed=3)
        assert np.allclose(out.t - ps.t, [0.01, 0.0, 0.0], atol=1e-9)

    def test_rotation_mixing_formula(self):
        J = 6
        rot = RNG.dirichlet(np.ones(J), size=10)
        ps = ParticleSet(
            t=np.tile([0, 0, 1.0], (10, 1)), s=np.full(10, 0.2), rot=rot, log_w=np.zeros(10)
        )
        cfg = FilterConfig(eps_rot=0.5)
        out = propagate(ps, None, cfg, seed=0)
        assert np.allclose(out.rot, 0.5 * rot + 0.5 / J, atol=1e-12)

    def test_size_floor(self):
        ps = uniform_set(200, 4)
        cfg = FilterConfig(sigma_s=10.0)
        out = propagate(ps, None, cfg, seed=5)
        assert np.all(out.s >= 1e-3)
        assert np.any(out.s == 1e-3)


class TestBayesUpdate:
    def test_uniform_prior_two_entries(self):
        J = 10
        prior = np.full((1, J), 1.0 / J)
        lik = np.zeros((1, J))
        lik[0, 2] = 0.6
        lik[0, 7] = 0.2
        post, ev = bayes_rotation_update(prior, lik)
        assert ev[0] == pytest.approx(0.8 / J, abs=1e-15)
        assert post[0, 2] == pytest.approx(0.75, abs=1e-12)
        assert post[0, 7] == pytest.approx(0.25, abs=1e-12)

    def test_zero_likelihood_keeps_prior(self):
        prior = np.array([[0.3, 0.7]])
        post, ev = bayes_rotation_update(prior, np.zeros((1, 2)))
        assert np.array_equal(post, prior)
        assert ev[0] == 0.0

    def test_disjoint_support_falls_back_to_likelihood(self):
        prior = np.array([[1.0, 0.0]])
        lik = np.array([[0.0, 0.4]])
        post, ev = bayes_rotation_update(prior, lik)
        assert ev[0] == 0.0
        assert np.allclose(post, [[0.0, 1.0]])


class TestUpdate:
    def test_ground_truth_particle_wins(self, camera_cb):
        cb = camera_cb
        gt_q = cb.grid.quats[200]
        gt_t = np.array([0.03, -0.02, 0.85])
        size = 0.24
        frame, pose = render_frame(cb, gt_q, gt_t, size)
        n = 100
        dirs = RNG.normal(size=(n - 1, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = RNG.uniform(0.05, 0.08, size=(n - 1, 1))
        offsets = np.vstack([np.zeros(3), dirs * radii])
        t = gt_t + offsets
        t[:, 2] = np.maximum(t[:, 2], 0.3)
        ps = uniform_set(n, cb.size, t=t, s=np.full(n, size))
        out = update(ps, frame, SCENE_INTR, cb, FilterConfig())
        assert int(np.argmax(out.log_w)) == 0
        best_bin = int(np.argmax(out.rot[0]))
        err = rotation_error_deg(cb.grid.quats[best_bin], gt_q)
        assert err <= cb.grid.step_deg + 1e-6

    def test_all_particles_floored_off_image(self, camera_cb):
        cb = camera_cb
        frame = DepthImage(np.zeros((240, 320)))
        ps = uniform_set(10, cb.size)
        cfg = FilterConfig()
        out = update(ps, frame, SCENE_INTR, cb, cfg)
        assert np.allclose(out.log_w, ps.log_w + cfg.log_floor)
        assert np.array_equal(out.rot, ps.rot)

    def test_grid_mismatch_rejected(self, camera_cb):
        ps = uniform_set(5, 48)
        frame = DepthImage(np.zeros((240, 320)))
        with pytest.raises(ValueError):
            update(ps, frame, SCENE_INTR, camera_cb, FilterConfig())


class TestResample:
    def test_one_hot_weight(self):
        ps = uniform_set(10, 4, t=RNG.normal(size=(10, 3)) + [0, 0, 5.0])
        lw = np.full(10, -100.0)
        lw[3] = 0.0
        ps = ParticleSet(t=ps.t, s=ps.s, rot=ps.rot, log_w=lw)
        out = resample(ps, 10, seed=2)
        assert np.all(out.t == ps.t[3])
        assert np.all(out.log_w == 0.0)

    def test_equal_weights_balanced_counts(self):
        m = 10
        ps = uniform_set(m, 4, t=np.arange(30, dtype=float).reshape(m, 3) + [0, 0, 100.0])
        out = resample(ps, 25, seed=4)
        # each source index appears floor(25/10) or ceil(25/10) times
        src = out.t[:, 0]
        counts = np.array([(src == ps.t[i, 0]).sum() for i in range(m)])
        assert np.all((counts == 2) | (counts == 3))

    def test_ess_gate_skips(self):
        ps = uniform_set(10, 4)
        out = resample(ps, 10, seed=9)
        assert out is ps

    def test_downsample_ignores_gate(self):
        ps = uniform_set(30, 4)
        out = resample(ps, 10, seed=9)
        assert out.n == 10


class TestEstimate:
    def test_single_particle(self):
        grid = build_rotation_grid(90.0)
        rot = np.zeros((1, 48))
        rot[0, 13] = 1.0
        ps = ParticleSet(
            t=np.array([[0.1, 0.2, 0.9]]), s=np.array([0.3]), rot=rot, log_w=np.zeros(1)
        )
        est = estimate(ps, grid)
        assert np.allclose(est.pose.t, [0.1, 0.2, 0.9], atol=1e-15)
        assert est.size == pytest.approx(0.3, abs=1e-15)
        assert est.rot_index == 13

    def test_two_particle_mean(self):
        grid = build_rotation_grid(90.0)
        ps = uniform_set(2, 48, t=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.2]]))
        est = estimate(ps, grid)
        assert np.allclose(est.pose.t, [0.0, 0.0, 1.1], atol=1e-12)

    def test_uniform_aggregate_tie_breaks_to_zero(self):
        grid = build_rotation_grid(90.0)
        ps = uniform_set(5, 48)
        assert estimate(ps, grid).rot_index == 0

    def test_identical_particles_exact(self):
        grid = build_rotation_grid(90.0)
        rot = np.zeros((7, 48))
        rot[:, 5] = 1.0
        ps = ParticleSet(
            t=np.tile([0.37, -0.11, 1.23], (7, 1)),
            s=np.full(7, 0.279),
            rot=rot,
            log_w=np.full(7, -3.0),
        )
        est = estimate(ps, grid)
        assert np.allclose(est.pose.t, [0.37, -0.11, 1.23], atol=1e-12)
        assert est.size == pytest.approx(0.279, abs=1e-12)
        assert est.rot_index == 5


class TestFilterStep:
    def test_composition_matches_manual(self, camera_cb):
        cb = camera_cb
        gt_q = cb.grid.quats[200]
        gt_t = np.array([0.0, 0.0, 0.9])
        frame, _ = render_frame(cb, gt_q, gt_t, 0.24)
        cfg = FilterConfig(n=40)
        ps0 = uniform_set(40, cb.size, t=gt_t + RNG.normal(0, 0.01, (40, 3)))
        state = TrackerState(seed=11)
        ps_a, est_a = filter_step(ps0, frame, SCENE_INTR, cb, cfg, state)
        ps_b = propagate(ps0, [], cfg, seed=(11, 0, 1))
        ps_b = update(ps_b, frame, SCENE_INTR, cb, cfg)
        ps_b = resample(ps_b, cfg.n, seed=(11, 0, 3))
        est_b = estimate(ps_b, cb.grid)
        assert np.array_equal(ps_a.t, ps_b.t)
        assert np.array_equal(ps_a.rot, ps_b.rot)
        assert np.allclose(est_a.pose.t, est_b.pose.t, atol=0.0)

    def test_static_scene_convergence(self, camera_cb):
        # The appearance code alone is nearly invariant along s/z = const, so
        # absolute depth hinges on the relief-spread factor; with it the
        # filter localizes the static object to centimeters.
        cb = camera_cb
        gt_q = cb.grid.quats[200]
        gt_t = np.array([0.0, 0.0, 0.85])
        size = 0.24
        frame, _ = render_frame(cb, gt_q, gt_t, size)
        det = Detection.from_mask(frame.data > 0)
        cfg = FilterConfig(sigma_phi=0.02, spread_sigma=0.10)
        state = TrackerState(seed=7)
        ps = init_particles(det, frame, SCENE_INTR, cfg, cb.size, seed=(7, 0, 0), cb=cb)
        for cycle in range(10):
            ps = update(ps, frame, SCENE_INTR, cb, cfg, det=det)
            ps = resample(ps, cfg.n, seed=(7, 0, 10 + cycle))
        est = estimate(ps, cb.grid)
        assert np.linalg.norm(est.pose.t - gt_t) < 0.02
        assert est.rot_index == 200
        assert abs(est.size - size) < 0.03
        # freeze process noise to observe pure estimator drift
        cfg = FilterConfig(
            sigma_phi=0.02, spread_sigma=0.10,
            sigma_t=(1e-6, 1e-6, 1e-6), sigma_s=1e-6, alpha=0.0,
        )
        prev = est.pose.t
        drifts = []
        for _ in range(10):
            ps, est = filter_step(ps, frame, SCENE_INTR, cb, cfg, state)
            drifts.append(np.linalg.norm(est.pose.t - prev))
            prev = est.pose.t
        assert np.median(drifts) < 2e-3
        assert np.linalg.norm(est.pose.t - gt_t) < 0.03

    def test_lost_flag_after_floor_streak(self, camera_cb):
        cb = camera_cb
        empty = DepthImage(np.zeros((240, 320)))
        cfg = FilterConfig(n=10)
        ps = uniform_set(10, cb.size)
        state = TrackerState(seed=0)
        for k in range(5):
            ps, _ = filter_step(ps, empty, SCENE_INTR, cb, cfg, state)
        assert state.lost


def test_particle_set_validation():
    with pytest.raises(ValueError):
        ParticleSet(
            t=np.zeros((2, 3)), s=np.array([0.1, -0.1]),
            rot=np.full((2, 4), 0.25), log_w=np.zeros(2),
        )
    bad_rot = np.full((2, 4), 0.3)
    with pytest.raises(ValueError):
        ParticleSet(
            t=np.zeros((2, 3)), s=np.array([0.1, 0.1]), rot=bad_rot, log_w=np.zeros(2)
        )
