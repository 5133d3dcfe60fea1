"""Facilitation gathers, steady activity, dynamic evolution."""

import math

import numpy as np
import pytest

from motionlift.gabor import LiftedActivity, ManifoldGrid, sigmoid
from motionlift.kernels import (
    KernelGrid,
    SdeSpec,
    contour_lattice,
    estimate_gamma0,
    kernel_lookup,
    trajectory_lattice,
)
from motionlift.population import (
    FacilitationConfig,
    activity_steady,
    evolve_activity,
    facilitate,
    facilitate_reference,
    facilitation_difference,
    stationarity_residual,
    truncated_kernel_values,
)


def synthetic_kernel(lat, seed=5, mode="contour"):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0, 1, lat.shape)
    vals /= vals.sum()
    spec = SdeSpec(mode, 0.1, 0.1, 0.1, 1.0, 1, 0)
    return KernelGrid(lat.axes, lat.origin, lat.spacing, vals, spec)


@pytest.fixture(scope="module")
def small4():
    grid = ManifoldGrid(7, 7, 6, 3, 1.0)
    kernel = synthetic_kernel(contour_lattice(3, 6, 3, 1.0))
    return grid, kernel


@pytest.fixture(scope="module")
def small5():
    grid = ManifoldGrid(7, 7, 6, 3, 1.0)
    kernel = synthetic_kernel(trajectory_lattice(3, 3, 6, 3, 1.0), mode="trajectory")
    return grid, kernel


class TestGatherContract:
    def test_4d_fast_matches_reference(self, small4):
        grid, kernel = small4
        rng = np.random.default_rng(1)
        act = LiftedActivity(grid, rng.uniform(0, 1, (7, 7, 2, 6, 3)),
                             "facilitation", np.array([0, 1]))
        fast = facilitate(act, kernel)
        ref = facilitate_reference(act, kernel)
        assert np.abs(fast.values - ref.values).max() < 1e-10

    def test_5d_fast_matches_reference(self, small5):
        grid, kernel = small5
        rng = np.random.default_rng(2)
        act = LiftedActivity(grid, rng.uniform(0, 1, (7, 7, 5, 6, 3)),
                             "facilitation", np.arange(5))
        fast = facilitate(act, kernel)
        ref = facilitate_reference(act, kernel)
        assert np.abs(fast.values - ref.values).max() < 1e-10

    def test_linearity(self, small5):
        grid, kernel = small5
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, (7, 7, 5, 6, 3))
        b = rng.uniform(0, 1, (7, 7, 5, 6, 3))
        mk = lambda v: LiftedActivity(grid, v, "facilitation", np.arange(5))
        combo = facilitate(mk(2.0 * a + 0.5 * b), kernel)
        parts = 2.0 * facilitate(mk(a), kernel).values + 0.5 * facilitate(mk(b), kernel).values
        assert np.abs(combo.values - parts).max() < 1e-10

    def test_positivity(self, small5):
        grid, kernel = small5
        rng = np.random.default_rng(4)
        act = LiftedActivity(grid, rng.uniform(0, 1, (7, 7, 5, 6, 3)),
                             "facilitation", np.arange(5))
        assert facilitate(act, kernel).values.min() >= 0.0

    def test_spatial_translation_equivariance(self, small4):
        grid, kernel = small4
        rng = np.random.default_rng(5)
        base = np.zeros((7, 7, 1, 6, 3))
        base[1:4, 1:4] = rng.uniform(0, 1, (3, 3, 1, 6, 3))
        shifted = np.roll(base, (2, 1), axis=(0, 1))
        mk = lambda v: LiftedActivity(grid, v, "facilitation", np.array([0]))
        p0 = facilitate(mk(base), kernel).values
        p1 = facilitate(mk(shifted), kernel).values
        # compare away from the zero-padding frontier
        assert np.abs(np.roll(p0, (2, 1), axis=(0, 1))[3:6, 2:5] - p1[3:6, 2:5]).max() < 1e-10

    def test_point_mass_reproduces_kernel(self):
        # a unit point source at the origin element samples the kernel
        # itself on the activity grid
        grid = ManifoldGrid(9, 9, 6, 3, 1.0)
        kernel = synthetic_kernel(contour_lattice(3, 6, 3, 1.0), seed=7)
        vals = np.zeros((9, 9, 1, 6, 3))
        vals[4, 4, 0, 0, 1] = 1.0  # theta = 0 bin, v = 0 bin
        act = LiftedActivity(grid, vals, "facilitation", np.array([0]))
        pattern = facilitate(act, kernel).values
        trunc = KernelGrid(kernel.axes, kernel.origin, kernel.spacing,
                           truncated_kernel_values(kernel), kernel.spec)
        for (dx, dy, it, jv) in ((0, 0, 0, 1), (2, -1, 3, 2), (-3, 3, 5, 0)):
            got = pattern[4 + dx, 4 + dy, 0, it, jv]
            want = kernel_lookup(trunc, [dx, dy, it * grid.d_theta, (jv - 1) * grid.d_v])
            assert got == pytest.approx(want, abs=1e-12)

    def test_point_mass_left_translation(self):
        # translating the input point mass by a group element moves the
        # response peak by the same element
        grid = ManifoldGrid(11, 11, 6, 3, 1.0)
        kernel = synthetic_kernel(contour_lattice(3, 6, 3, 1.0), seed=8)
        # concentrate the kernel so the argmax is crisp
        vals = np.zeros_like(kernel.values)
        vals[4, 5, 1, 2] = 1.0  # offset (+1, +2) rotated, dtheta one bin
        kernel = KernelGrid(kernel.axes, kernel.origin, kernel.spacing, vals,
                            kernel.spec)
        mk = lambda v: LiftedActivity(grid, v, "facilitation", np.array([0]))

        src0 = np.zeros((11, 11, 1, 6, 3))
        src0[5, 5, 0, 0, 1] = 1.0
        p0 = facilitate(mk(src0), kernel).values
        peak0 = np.unravel_index(p0.argmax(), p0.shape)

        src1 = np.zeros((11, 11, 1, 6, 3))
        src1[3, 6, 0, 2, 1] = 1.0  # shifted and rotated by two bins
        p1 = facilitate(mk(src1), kernel).values
        peak1 = np.unravel_index(p1.argmax(), p1.shape)
        # expected: spatial offset rotated by the source's orientation,
        # fiber advanced by the source's bins
        th_src = 2 * grid.d_theta
        off = np.array([peak0[0] - 5, peak0[1] - 5], dtype=float)
        c, s = math.cos(th_src), math.sin(th_src)
        want = np.array([3 + c * off[0] - s * off[1], 6 + s * off[0] + c * off[1]])
        assert abs(peak1[0] - want[0]) <= 1.0
        assert abs(peak1[1] - want[1]) <= 1.0
        assert peak1[3] == (peak0[3] + 2) % 6

    def test_incompatible_grids_rejected(self, small4):
        grid, kernel = small4
        bad = ManifoldGrid(7, 7, 8, 3, 1.0)
        act = LiftedActivity(bad, np.zeros((7, 7, 1, 8, 3)), "facilitation",
                             np.array([0]))
        with pytest.raises(ValueError):
            facilitate(act, kernel)

    def test_trajectory_kernel_reaches_strictly_forward(self, small5):
        grid, kernel = small5
        vals = np.zeros((7, 7, 5, 6, 3))
        vals[3, 3, 2, 0, 1] = 1.0
        act = LiftedActivity(grid, vals, "facilitation", np.arange(5))
        p = facilitate(act, kernel).values
        assert p[:, :, :3].max() == 0.0  # nothing at ds <= 0
        assert p[:, :, 3:].max() > 0.0


class TestSteadyActivity:
    def test_zero_strength_is_pure_feedforward(self, small4):
        grid, kernel = small4
        rng = np.random.default_rng(6)
        raw = LiftedActivity(grid, rng.uniform(0, 1, (7, 7, 1, 6, 3)), "raw",
                             np.array([0]))
        pattern = facilitate(raw.with_values(sigmoid(raw.values, 10, 0.5),
                                             "facilitation"), kernel)
        cfg = FacilitationConfig(0.0, 10.0, 0.5)
        steady = activity_steady(raw, pattern, cfg)
        assert np.allclose(steady.values, sigmoid(raw.values, 10.0, 0.5))

    def test_monotone_in_facilitation(self, small4):
        grid, kernel = small4
        rng = np.random.default_rng(7)
        raw = LiftedActivity(grid, rng.uniform(0, 1, (7, 7, 1, 6, 3)), "raw",
                             np.array([0]))
        p1 = raw.with_values(rng.uniform(0, 0.5, raw.values.shape), "facilitation")
        p2 = p1.with_values(p1.values + 0.1, "facilitation")
        cfg = FacilitationConfig(5.0, 10.0, 0.5)
        s1 = activity_steady(raw, p1, cfg)
        s2 = activity_steady(raw, p2, cfg)
        assert (s2.values >= s1.values).all()
        assert 0.0 < s1.values.min() and s1.values.max() < 1.0

    def test_negative_strength_rejected(self):
        with pytest.raises(ValueError):
            FacilitationConfig(-1.0, 10.0, 0.5)


class TestEvolveActivity:
    def test_decays_to_sigmoid_of_zero(self, small4):
        grid, kernel = small4
        raw = LiftedActivity(grid, np.zeros((7, 7, 1, 6, 3)), "raw", np.array([0]))
        cfg = FacilitationConfig(0.0, 10.0, 0.5)
        out = evolve_activity(raw, kernel, cfg, dt_a=0.5, n_steps=60,
                              a0=np.full(raw.values.shape, 0.9))
        assert np.abs(out.values - sigmoid(0.0, 10.0, 0.5)).max() < 1e-4

    def test_one_step_from_thresholded_matches_first_order_form(self, small4):
        # a unit step from a = S(F) lands on S(c_f K*S(F) + F): the
        # first-order steady approximation
        grid, kernel = small4
        rng = np.random.default_rng(8)
        raw = LiftedActivity(grid, rng.uniform(0, 1, (7, 7, 1, 6, 3)), "raw",
                             np.array([0]))
        cfg = FacilitationConfig(3.0, 10.0, 0.5)
        thr = sigmoid(raw.values, cfg.mu, cfg.beta)
        stepped = evolve_activity(raw, kernel, cfg, dt_a=1.0, n_steps=1, a0=thr)
        pattern = facilitate(raw.with_values(thr, "facilitation"), kernel)
        direct = activity_steady(raw, pattern, cfg)
        assert np.abs(stepped.values - direct.values).max() < 1e-12

    def test_residual_decreases(self, small4):
        grid, kernel = small4
        rng = np.random.default_rng(9)
        raw = LiftedActivity(grid, rng.uniform(0, 1, (7, 7, 1, 6, 3)), "raw",
                             np.array([0]))
        cfg = FacilitationConfig(2.0, 10.0, 0.5)
        a = sigmoid(raw.values, cfg.mu, cfg.beta)
        res = [stationarity_residual(a, raw, kernel, cfg)]
        state = a
        for _ in range(3):
            state = evolve_activity(raw, kernel, cfg, 0.8, 5, a0=state).values
            res.append(stationarity_residual(state, raw, kernel, cfg))
        assert res[-1] < res[0]
        assert res[-1] < 1e-3

    def test_divergence_guard(self, small4):
        # a state far outside the model's range trips the instability guard
        # before it can relax back
        grid, kernel = small4
        raw = LiftedActivity(grid, np.zeros((7, 7, 1, 6, 3)), "raw", np.array([0]))
        cfg = FacilitationConfig(0.0, 10.0, 0.5)
        with pytest.raises(ArithmeticError):
            evolve_activity(raw, kernel, cfg, 0.1, 1,
                            a0=np.full(raw.values.shape, 20.0))

    def test_step_bounds_checked(self, small4):
        grid, kernel = small4
        raw = LiftedActivity(grid, np.zeros((7, 7, 1, 6, 3)), "raw", np.array([0]))
        with pytest.raises(ValueError):
            evolve_activity(raw, kernel, FacilitationConfig(0, 10, 0.5), 1.5, 1)


class TestFacilitationDifference:
    def test_elementwise_signed(self, small4):
        grid, _ = small4
        rng = np.random.default_rng(10)
        mk = lambda: LiftedActivity(
            grid, np.clip(rng.uniform(0.01, 0.99, (7, 7, 1, 6, 3)), 1e-6, 1 - 1e-6),
            "total", np.array([0]))
        full, first, second = mk(), mk(), mk()
        diff = facilitation_difference(full, first, second)
        assert np.allclose(diff.values,
                           full.values - first.values - second.values)
        assert diff.kind == "facilitation"

    def test_no_stimulus_baseline(self, small4):
        # with disjoint parts and zero input everywhere, the probe settles
        # at -S(0)
        grid, kernel = small4
        raw = LiftedActivity(grid, np.zeros((7, 7, 1, 6, 3)), "raw", np.array([0]))
        cfg = FacilitationConfig(0.0, 10.0, 0.5)
        pattern = raw.with_values(np.zeros_like(raw.values), "facilitation")
        f0 = activity_steady(raw, pattern, cfg)
        diff = facilitation_difference(f0, f0, f0)
        assert np.allclose(diff.values, -sigmoid(0.0, 10.0, 0.5))

    def test_requires_total_kind(self, small4):
        grid, _ = small4
        raw = LiftedActivity(grid, np.zeros((7, 7, 1, 6, 3)), "raw", np.array([0]))
        with pytest.raises(ValueError):
            facilitation_difference(raw, raw, raw)


class TestRealKernelTranslation:
    def test_contour_point_source_matches_shifted_estimate(self):
        # facilitation of a point source at zeta equals a kernel directly
        # re-estimated from zeta (matched seeds), within MC binning noise
        lat = contour_lattice(5, 8, 5, 1.0)
        spec = SdeSpec("contour", 0.35, 0.2, 0.02, 2.0, 30_000, seed=31)
        kernel = estimate_gamma0(spec, lat)
        grid = ManifoldGrid(17, 17, 8, 5, 1.0)
        i_th, j_v = 2, 3
        vals = np.zeros((17, 17, 1, 8, 5))
        vals[8, 8, 0, i_th, j_v] = 1.0
        act = LiftedActivity(grid, vals, "facilitation", np.array([0]))
        pattern = facilitate(act, kernel).values[:, :, 0]

        # direct estimation from the shifted start, binned on the activity
        # grid (same noise stream as the cached kernel)
        import motionlift.kernels as kmod

        theta0 = i_th * grid.d_theta
        v0 = grid.vs[j_v]
        counts = kmod._batch_counts(spec.n_paths)
        children = np.random.SeedSequence(spec.seed).spawn(len(counts))
        hist = np.zeros((17, 17, 8, 5))
        dt = spec.dt_exact
        sk = math.sqrt(2 * dt) * spec.kappa
        sa = math.sqrt(2 * dt) * spec.alpha
        for nb, ch in zip(counts, children):
            rng = np.random.default_rng(ch)
            noise = rng.standard_normal((spec.n_steps, 2, nb))
            q1 = np.full(nb, 8.0)
            q2 = np.full(nb, 8.0)
            th = np.full(nb, theta0)
            v = np.full(nb, v0)
            for k in range(spec.n_steps):
                q1 += -np.sin(th) * dt
                q2 += np.cos(th) * dt
                th += sk * noise[k, 0]
                v += sa * noise[k, 1]
                i1 = np.rint(q1).astype(int)
                i2 = np.rint(q2).astype(int)
                it = np.rint(th / grid.d_theta).astype(int) % 8
                iv = np.rint((v + 1.0) / grid.d_v).astype(int)
                ok = (i1 >= 0) & (i1 < 17) & (i2 >= 0) & (i2 < 17) & (iv >= 0) & (iv < 5)
                np.add.at(hist, (i1[ok], i2[ok], it[ok], iv[ok]), dt)
        direct = hist / hist.sum()
        sampled = pattern / pattern.sum()
        assert np.abs(sampled - direct).sum() < 0.15
