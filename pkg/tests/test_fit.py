import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gshadow.body import GaussianBody, InvalidInputError, PoseFrame, Skeleton, posed_set, rigid_transform
from gshadow.fit import (
    FitConfig,
    OptimizationError,
    PiecewiseLinearSchedule,
    VoxelField,
    density_loss_and_grad,
    fit,
    loss_density,
    loss_mean,
    loss_mean_grad,
    loss_sigma,
    loss_sigma_grad,
    regularizer_loss_and_grad,
    sample_query_points,
)
from gshadow.gaussian_core import GaussianSet, InvalidParameterError, rotation_from_rot6
from gshadow.oracle import fd_gradient

from conftest import random_gaussian

SINGLE = Skeleton((-1,), [[0, 0, 0]])
IDENTITY = PoseFrame.identity(1)


def gaussian_field(params, res=64, half=0.6):
    gs = GaussianSet.from_parameters(np.asarray(params).reshape(-1, 13))
    return VoxelField.from_function(gs.density, res, [-half] * 3, [half] * 3)


class TestLossFormulas:
    def test_sigma_knee_continuous(self):
        assert loss_sigma(0.02) == 0.001
        assert 100 * (0.02 - 0.02) ** 4 + 0.001 == 0.001
        assert loss_sigma(0.02 + 1e-12) == pytest.approx(0.001, abs=1e-12)

    def test_sigma_branches(self):
        assert loss_sigma(0.01) == pytest.approx(0.002, rel=1e-15)
        assert loss_sigma(0.12) == pytest.approx(0.011, rel=1e-12)
        assert loss_sigma([0.01, 0.12]) == pytest.approx(0.013, rel=1e-12)

    @pytest.mark.parametrize("bad", [0.0, -0.1, math.nan])
    def test_sigma_rejects(self, bad):
        with pytest.raises(InvalidParameterError):
            loss_sigma(bad)

    def test_mean_zero_at_center(self):
        assert loss_mean([0.3, -0.2, 1.0], [0.3, -0.2, 1.0]) == 0.0

    def test_mean_values(self):
        # frozen with mpmath: 1.01**0.25 - 1 and 101**0.25 - 1
        assert loss_mean([0.1, 0, 0], [0, 0, 0]) == pytest.approx(0.00249067931432111994885127746414, rel=1e-12)
        assert loss_mean([1.0, 0, 0], [0, 0, 0]) == pytest.approx(2.1701538797227005065984951342, rel=1e-14)
        assert loss_mean([0.1, 0.1, 0.1], [0, 0, 0]) == pytest.approx(3 * 0.00249067931432111994885127746414, rel=1e-12)

    @given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
    def test_mean_even_and_nonnegative(self, u):
        u = np.array(u)
        assert loss_mean(u, 0) == pytest.approx(loss_mean(-u, 0), rel=1e-14, abs=1e-300)
        assert loss_mean(u, 0) >= 0
        if np.any(u != 0):
            assert loss_mean(u, 0) > 0 or np.max(np.abs(u)) < 1e-3

    def test_density_trivial(self, rng):
        g = random_gaussian(rng)
        body = GaussianBody(g.to_vector()[None, None])
        pts = rng.uniform(-0.5, 0.5, (50, 3))
        exact = VoxelField.from_function(lambda x: GaussianSet.from_gaussians([g]).density(x), 2, [-1] * 3, [1] * 3)
        # a body compared with its own density has zero loss
        own = type("F", (), {"__call__": lambda self, x: GaussianSet.from_gaussians([g]).density(x)})()
        assert loss_density(body, SINGLE, IDENTITY, own, pts) < 1e-30
        zero = GaussianBody(np.concatenate([g.to_vector()[:12], [0.0]])[None, None])
        ones = VoxelField(np.ones((2, 2, 2)), [-1] * 3, [1] * 3)
        assert loss_density(zero, SINGLE, IDENTITY, ones, pts) == 1.0
        resid = GaussianSet.from_gaussians([g]).density(pts) - exact(pts)
        assert loss_density(body, SINGLE, IDENTITY, exact, pts) == pytest.approx(np.mean(resid**2), rel=1e-14)

    def test_density_empty_points(self, rng):
        body = GaussianBody(random_gaussian(rng).to_vector()[None, None])
        with pytest.raises(InvalidInputError):
            loss_density(body, SINGLE, IDENTITY, VoxelField(np.ones((2, 2, 2)), [-1] * 3, [1] * 3), np.zeros((0, 3)))


class TestGradients:
    def test_density_gradient(self, rng):
        for _ in range(5):
            params = np.stack([[random_gaussian(rng).to_vector() for _ in range(2)] for _ in range(2)])
            pose = PoseFrame(np.stack([rigid_transform(rotation_from_rot6(rng.normal(size=6)), rng.normal(size=3))
                                       for _ in range(2)]))
            pts = posed_set(GaussianBody(params), None, pose).means.repeat(8, axis=0) + rng.normal(scale=0.3, size=(32, 3))
            target = rng.uniform(0, 1, len(pts))
            _, grad = density_loss_and_grad(params, pose, target, pts)
            fd = fd_gradient(lambda v: density_loss_and_grad(v.reshape(params.shape), pose, target, pts)[0], params)
            np.testing.assert_allclose(grad.reshape(-1), fd.reshape(-1), rtol=1e-4, atol=1e-4 * np.max(np.abs(fd)))

    def test_scalar_gradients(self, rng):
        for s in rng.uniform(0.005, 0.3, 20):
            assert loss_sigma_grad(s) == pytest.approx(fd_gradient(lambda v: loss_sigma(v[0]), [s])[0], rel=1e-4)
        for u in rng.uniform(-1, 1, (20, 3)):
            np.testing.assert_allclose(loss_mean_grad(u, 0), fd_gradient(lambda v: loss_mean(v, 0), u), rtol=1e-4, atol=1e-10)

    def test_regularizers_averaged(self, rng):
        params = np.stack([[random_gaussian(rng).to_vector() for _ in range(3)] for _ in range(2)])
        b = rng.normal(size=(2, 3))
        ls, lm, gs, gm = regularizer_loss_and_grad(params, b)
        assert ls == pytest.approx(loss_sigma(params[..., 3:6]) / 6, rel=1e-14)
        fd = fd_gradient(lambda v: regularizer_loss_and_grad(v.reshape(params.shape), b)[1], params)
        np.testing.assert_allclose(gm.reshape(-1), fd.reshape(-1), rtol=1e-4, atol=1e-10)


class TestVoxelField:
    def test_reproduces_linear(self):
        f = VoxelField.from_function(lambda x: 1 + x @ [0.5, 2, 3], (5, 4, 6), [0, 0, 0], [1, 2, 1])
        pts = np.random.default_rng(2).uniform([0, 0, 0], [1, 2, 1], (50, 3))
        np.testing.assert_allclose(f(pts), 1 + pts @ [0.5, 2, 3], rtol=1e-12)

    def test_clamped_outside(self):
        f = VoxelField(np.arange(8, dtype=float).reshape(2, 2, 2), [0] * 3, [1] * 3)
        assert f([-5, -5, -5]) == 0.0
        assert f([5, 5, 5]) == 7.0

    def test_save_load(self, tmp_path):
        f = VoxelField(np.random.default_rng(1).uniform(0, 2, (3, 4, 5)), [0, -1, 2], [1, 1, 3])
        f.save(tmp_path / "f.vox")
        g = VoxelField.load(tmp_path / "f.vox")
        np.testing.assert_array_equal(g.values, f.values.astype(np.float32))
        np.testing.assert_array_equal(g.lo, f.lo)
        assert g.resolution == (3, 4, 5)

    def test_truncated(self, tmp_path):
        VoxelField(np.ones((2, 2, 2)), [0] * 3, [1] * 3).save(tmp_path / "f.vox")
        data = (tmp_path / "f.vox").read_bytes()
        (tmp_path / "g.vox").write_bytes(data[:-4])
        with pytest.raises(InvalidInputError):
            VoxelField.load(tmp_path / "g.vox")

    @pytest.mark.parametrize("values,lo,hi", [
        (-np.ones((2, 2, 2)), [0] * 3, [1] * 3),
        (np.ones((2, 2, 2)), [0] * 3, [1, 0, 1]),
        (np.ones((1, 2, 2)), [0] * 3, [1] * 3),
    ])
    def test_invalid(self, values, lo, hi):
        with pytest.raises(InvalidInputError):
            VoxelField(values, lo, hi)


class TestQueryPoints:
    def setup_method(self):
        self.body = GaussianBody(np.array([[[0.1, 0, 0, 0.1, 0.05, 0.08, 1, 0.2, 0, 0, 1, 0, 1.0],
                                            [-0.2, 0.1, 0, 0.06, 0.06, 0.1, 1, 0, 0, 0, 1, 0, 1.0]]]))
        self.field = VoxelField(np.zeros((2, 2, 2)), [-1] * 3, [1] * 3)

    def test_zero_rejected(self):
        with pytest.raises(InvalidInputError):
            sample_query_points(self.field, self.body, IDENTITY, 0, 1)

    def test_deterministic(self):
        a = sample_query_points(self.field, self.body, IDENTITY, 500, 7)
        np.testing.assert_array_equal(a, sample_query_points(self.field, self.body, IDENTITY, 500, 7))

    def test_near_fraction(self):
        pts = sample_query_points(self.field, self.body, IDENTITY, 4000, 3)
        gset = posed_set(self.body, None, IDENTITY)
        inside = np.zeros(len(pts), dtype=bool)
        for m, p in zip(gset.means, gset.precisions):
            d = pts - m
            inside |= np.einsum("ni,ij,nj->n", d, p, d) <= 9.0
        assert inside.mean() >= 0.4


class TestSchedule:
    def test_ramp(self):
        s = PiecewiseLinearSchedule.ramp(10, 20)
        assert [s(0), s(10), s(15), s(20), s(100)] == [0, 0, 0.5, 1, 1]

    def test_constant(self):
        assert PiecewiseLinearSchedule.constant(0.3)(1e6) == 0.3


class TestFit:
    TRUE = np.array([[[0.05, -0.02, 0.03, 0.1, 0.07, 0.05] + list(rotation_from_rot6([1, 0.3, 0.1, -0.2, 1, 0.2])[:2].reshape(6)) + [1.0]]])

    def test_single_recovery(self):
        field = gaussian_field(self.TRUE, half=0.5)
        init = self.TRUE.copy()
        init[..., 0:3] += 0.05
        init[..., 3:6] *= 1.5
        res = fit(GaussianBody(init), SINGLE, IDENTITY, field, FitConfig(seed=0))
        assert np.max(np.abs(res.body.params[..., 0:3] - self.TRUE[..., 0:3])) < 1e-3
        assert np.max(np.abs(res.body.params[..., 3:6] - self.TRUE[..., 3:6])) < 5e-3
        assert res.final_loss <= res.initial_loss

    def test_exact_init_stays(self):
        field = gaussian_field(self.TRUE, half=0.5)
        res = fit(GaussianBody(self.TRUE), SINGLE, IDENTITY, field, FitConfig(iterations=200, seed=1))
        # grid interpolation error is the only force acting
        np.testing.assert_allclose(res.body.params[..., 0:3], self.TRUE[..., 0:3], atol=1e-3)
        np.testing.assert_allclose(res.body.params[..., 3:6], self.TRUE[..., 3:6], atol=2e-3)

    def test_deterministic(self):
        field = gaussian_field(self.TRUE, res=24, half=0.5)
        init = self.TRUE.copy()
        init[..., 0:3] += 0.03
        cfg = FitConfig(iterations=60, seed=5, w_sigma=0.1, w_mean=0.1)
        a = fit(GaussianBody(init), SINGLE, IDENTITY, field, cfg)
        b = fit(GaussianBody(init), SINGLE, IDENTITY, field, cfg)
        assert a.trace == b.trace
        np.testing.assert_array_equal(a.body.params, b.body.params)

    def test_divergence_reports_iteration(self):
        field = gaussian_field(self.TRUE, res=16, half=0.5)
        init = self.TRUE.copy()
        init[..., 0:3] += 0.03
        with pytest.raises(OptimizationError) as e:
            fit(GaussianBody(init), SINGLE, IDENTITY, field, FitConfig(iterations=50, step_size=1e8))
        assert 0 <= e.value.iteration < 50

    def test_never_worse(self):
        field = gaussian_field(self.TRUE, res=16, half=0.5)
        init = self.TRUE.copy()
        init[..., 0:3] += 0.2
        res = fit(GaussianBody(init), SINGLE, IDENTITY, field, FitConfig(iterations=30, step_size=3.0, seed=2))
        assert res.final_loss <= res.initial_loss
        assert np.all(res.body.params[..., 3:6] > 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FitConfig(iterations=0)
        with pytest.raises(ValueError):
            FitConfig(batch_size=0)
        with pytest.raises(ValueError):
            FitConfig(step_size=0)
