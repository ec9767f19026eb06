"""Time-travel plan and conditional sampler tests.

The statistical checks pit the sampler against an exact oracle. For a
jointly-Gaussian data model (a single Gaussian, or a zero-variance lattice
mixture whose atoms sit at scaled midpoint quantiles so the joint second
moments are exact) every move the sampler makes is a linear-Gaussian map,
so the output mean and covariance can be propagated move by move in closed
form. Monte Carlo estimates over frozen seeds must land within a few
standard errors of that propagation, and the two-pixel conditional run must
track the bivariate-normal conditioning formula.
"""

import math
from statistics import NormalDist

import numpy as np
import pytest

from repaint_lab.diffusion import (
    AnalyticDenoiser,
    GmmDataModel,
    make_linear_schedule,
    reverse_step,
)
from repaint_lab.grid import BinaryMask, Image
from repaint_lab.repaint import (
    KNOWN_VARIANCE_INDEXES,
    RepaintConfig,
    TimeTravelPlan,
    build_plan,
    inpaint,
    known_sample,
    repaint_step,
)


def single_gaussian(m0, v0, shape, sched):
    gmm = GmmDataModel(
        means=(Image(np.full(shape, m0)),),
        weights=np.array([1.0]),
        variances=np.array([v0]),
    )
    return AnalyticDenoiser(gmm, sched)


def two_pixel_lattice(mu1, mu2, sig, rho, m_lat, sched):
    """Zero-variance mixture over 1x2 images approximating a bivariate
    normal with correlation rho. Atoms sit at midpoint quantiles scaled to
    unit latent variance, so the mixture's joint first and second moments
    equal the target's exactly."""
    nd = NormalDist()
    q = np.array([nd.inv_cdf((i + 0.5) / m_lat) for i in range(m_lat)])
    q /= math.sqrt(float((q * q).mean()))
    means = []
    for z in q:
        for w in q:
            means.append(
                Image(
                    np.array(
                        [[mu1 + sig * z, mu2 + sig * (rho * z + math.sqrt(1.0 - rho * rho) * w)]]
                    )
                )
            )
    k = m_lat * m_lat
    gmm = GmmDataModel(
        means=tuple(means), weights=np.full(k, 1.0 / k), variances=np.zeros(k)
    )
    return AnalyticDenoiser(gmm, sched)


def propagate_moments(plan, sched, mu, Sigma, known=None, clean=None):
    """Exact output mean/covariance of the sampler for Gaussian data.

    Walks the plan: a reverse move applies the affine posterior-mean map
    plus its noise variance, then (when a known set is given) overwrites the
    known coordinates with the independent forward-marginal draw of the
    clean values; a forward move rescales and adds noise. Independent route:
    no sampler code is touched.
    """
    mu = np.asarray(mu, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    p = mu.size
    eye = np.eye(p)
    m = np.zeros(p)
    C = eye.copy()
    t = plan.timesteps
    for move in plan.moves:
        if move == -1:
            ab = sched.alpha_bar[t]
            abm = sched.alpha_bar[t - 1]
            beta = sched.beta[t]
            alpha = sched.alpha[t]
            Sinv = np.linalg.inv(ab * Sigma + (1.0 - ab) * eye)
            A = (eye - beta * Sinv) / math.sqrt(alpha)
            b = beta * (Sinv @ (math.sqrt(ab) * mu)) / math.sqrt(alpha)
            m = A @ m + b
            C = A @ C @ A.T
            if t > 1:
                C = C + ((1.0 - abm) / (1.0 - ab) * beta) * eye
            if known is not None:
                for i in np.flatnonzero(known):
                    m[i] = math.sqrt(abm) * clean[i]
                    C[i, :] = 0.0
                    C[:, i] = 0.0
                    C[i, i] = 1.0 - abm
            t -= 1
        else:
            beta = sched.beta[t + 1]
            m = math.sqrt(1.0 - beta) * m
            C = (1.0 - beta) * C + beta * eye
            t += 1
    assert t == 0
    return m, C


class TestPlanConstruction:
    def test_worked_example(self):
        plan = build_plan(4, 2, 2)
        assert plan.moves == (-1, -1, 1, 1, -1, -1, -1, -1)
        assert plan.timesteps == 4

    def test_no_resampling_is_plain_descent(self):
        assert build_plan(7, 3, 1).moves == (-1,) * 7

    def test_full_length_jump_never_fires(self):
        # t + j <= T fails for every t > 0 when j == T
        assert build_plan(6, 6, 4).moves == (-1,) * 6

    def test_uneven_jump_skips_top_boundary(self):
        # T=7, j=3: t=6 has no room (6+3 > 7), t=3 does
        plan = build_plan(7, 3, 2)
        assert plan.moves == (-1, -1, -1, -1, 1, 1, 1, -1, -1, -1, -1, -1, -1)

    def test_random_plans_walk_invariants(self):
        rng = np.random.default_rng(4100)
        for _ in range(300):
            T = int(rng.integers(1, 41))
            j = int(rng.integers(1, T + 1))
            r = int(rng.integers(1, 7))
            moves = np.asarray(build_plan(T, j, r).moves)
            path = T + np.cumsum(moves)
            assert path.min() >= 0 and path.max() <= T
            assert path[-1] == 0
            boundaries = [t for t in range(1, T) if t % j == 0 and t + j <= T]
            assert moves.size == T + (r - 1) * 2 * j * len(boundaries)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError, match="timesteps"):
            build_plan(0, 1, 1)
        with pytest.raises(ValueError, match="jump_length"):
            build_plan(10, 0, 1)
        with pytest.raises(ValueError, match="jump_length"):
            build_plan(10, 11, 1)
        with pytest.raises(ValueError, match="resamplings"):
            build_plan(10, 2, 0)

    def test_plan_validation_rejects_bad_walks(self):
        with pytest.raises(ValueError, match="expected -1 or \\+1"):
            TimeTravelPlan(moves=(0,), timesteps=1)
        with pytest.raises(ValueError, match="leaves"):
            TimeTravelPlan(moves=(1,), timesteps=1)
        with pytest.raises(ValueError, match="leaves"):
            TimeTravelPlan(moves=(-1, -1), timesteps=1)
        with pytest.raises(ValueError, match="ends at t=1"):
            TimeTravelPlan(moves=(-1,), timesteps=2)


class TestConfig:
    def test_defaults(self):
        cfg = RepaintConfig()
        assert cfg.jump_length == 1
        assert cfg.resamplings == 1
        assert cfg.sigma_mode == "beta_tilde"
        assert cfg.known_variance_index == "tm1"
        assert KNOWN_VARIANCE_INDEXES == ("tm1", "t")

    def test_validation(self):
        with pytest.raises(ValueError, match="jump_length"):
            RepaintConfig(jump_length=0)
        with pytest.raises(ValueError, match="resamplings"):
            RepaintConfig(resamplings=0)
        with pytest.raises(ValueError, match="sigma mode"):
            RepaintConfig(sigma_mode="eta")
        with pytest.raises(ValueError, match="known_variance_index"):
            RepaintConfig(known_variance_index="tp1")


class TestKnownSample:
    def test_final_index_returns_clean_exactly(self):
        sched = make_linear_schedule(1e-4, 0.05, 12)
        rng = np.random.default_rng(0)
        I0 = Image(np.random.default_rng(1).standard_normal((3, 4)))
        state = rng.bit_generator.state
        out = known_sample(I0, 0, sched, rng)
        assert np.array_equal(out.data, I0.data)
        assert rng.bit_generator.state == state

    def test_moments_match_forward_marginal(self):
        sched = make_linear_schedule(1e-4, 0.05, 20)
        idx = 12
        I0 = Image(np.full((3, 4), 0.8))
        rng = np.random.default_rng(4200)
        draws = np.array(
            [known_sample(I0, idx, sched, rng).data.ravel() for _ in range(2000)]
        ).ravel()
        target_mean = math.sqrt(sched.alpha_bar[idx]) * 0.8
        target_var = 1.0 - sched.alpha_bar[idx]
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(draws.mean() - target_mean) < 5 * se
        assert abs(draws.var(ddof=1) - target_var) < 0.05 * target_var

    def test_variance_index_variants(self):
        sched = make_linear_schedule(1e-4, 0.05, 20)
        idx = 7
        I0 = Image(np.random.default_rng(2).standard_normal((2, 5)))
        for variant, var_idx in (("tm1", idx), ("t", idx + 1)):
            rng = np.random.default_rng(4300)
            clone = np.random.default_rng(4300)
            out = known_sample(I0, idx, sched, rng, variance_index=variant)
            z = clone.standard_normal(I0.shape)
            expect = (
                math.sqrt(sched.alpha_bar[idx]) * I0.data
                + math.sqrt(1.0 - sched.alpha_bar[var_idx]) * z
            )
            assert np.array_equal(out.data, expect)

    def test_variant_needs_room_below_top(self):
        sched = make_linear_schedule(1e-4, 0.05, 20)
        I0 = Image(np.zeros((2, 2)))
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="needs"):
            known_sample(I0, 20, sched, rng, variance_index="t")

    def test_rejects_bad_index_and_variant(self):
        sched = make_linear_schedule(1e-4, 0.05, 20)
        I0 = Image(np.zeros((2, 2)))
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="outside"):
            known_sample(I0, -1, sched, rng)
        with pytest.raises(ValueError, match="outside"):
            known_sample(I0, 21, sched, rng)
        with pytest.raises(ValueError, match="variance_index"):
            known_sample(I0, 3, sched, rng, variance_index="q")


class TestRepaintStep:
    def setup_method(self):
        self.sched = make_linear_schedule(1e-3, 0.08, 8)
        self.model = single_gaussian(0.4, 0.04, (3, 3), self.sched)
        self.I0 = Image(np.random.default_rng(7).standard_normal((3, 3)) * 0.1 + 0.4)

    def test_composites_reverse_and_known_draws(self):
        rng_mask = np.random.default_rng(11)
        masks = [
            rng_mask.integers(0, 2, size=(3, 3)).astype(np.float64),
            np.ones((3, 3)),
            np.zeros((3, 3)),
        ]
        x = Image(np.random.default_rng(8).standard_normal((3, 3)))
        for mdata in masks:
            mask = BinaryMask(mdata)
            rng = np.random.default_rng(4400)
            clone = np.random.default_rng(4400)
            got = repaint_step(x, 5, self.I0, mask, self.model, self.sched, rng)
            unknown = reverse_step(x, 5, self.model, self.sched, clone)
            known = known_sample(self.I0, 4, self.sched, clone)
            expect = np.where(mask.bool_array, known.data, unknown.data)
            assert np.array_equal(got.data, expect)

    def test_mode_arguments_reach_the_kernels(self):
        mask = BinaryMask(np.eye(3))
        x = Image(np.random.default_rng(9).standard_normal((3, 3)))
        rng = np.random.default_rng(4500)
        clone = np.random.default_rng(4500)
        got = repaint_step(
            x, 6, self.I0, mask, self.model, self.sched, rng,
            sigma_mode="zero", known_variance_index="t",
        )
        unknown = reverse_step(x, 6, self.model, self.sched, clone, sigma_mode="zero")
        known = known_sample(self.I0, 5, self.sched, clone, variance_index="t")
        expect = np.where(mask.bool_array, known.data, unknown.data)
        assert np.array_equal(got.data, expect)

    def test_shape_mismatch_rejected(self):
        mask = BinaryMask(np.ones((3, 3)))
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="shape mismatch"):
            repaint_step(
                Image(np.zeros((2, 2))), 5, self.I0, mask, self.model, self.sched, rng
            )
        with pytest.raises(ValueError, match="shape mismatch"):
            repaint_step(
                Image(np.zeros((3, 3))), 5, self.I0,
                BinaryMask(np.ones((2, 3))), self.model, self.sched, rng,
            )


class TestInpaintExactness:
    def setup_method(self):
        self.sched = make_linear_schedule(1e-3, 0.08, 10)
        self.model = single_gaussian(0.3, 0.04, (4, 3), self.sched)
        self.I0 = Image(np.random.default_rng(21).standard_normal((4, 3)) * 0.1 + 0.3)
        self.cfg = RepaintConfig(jump_length=2, resamplings=3)

    def test_all_known_returns_clean(self):
        mask = BinaryMask(np.ones((4, 3)))
        out = inpaint(self.I0, mask, self.model, self.sched, self.cfg,
                      np.random.default_rng(4600))
        assert np.array_equal(out.data, self.I0.data)

    def test_known_region_survives_bit_exact(self):
        mdata = np.random.default_rng(22).integers(0, 2, size=(4, 3)).astype(np.float64)
        mask = BinaryMask(mdata)
        out = inpaint(self.I0, mask, self.model, self.sched, self.cfg,
                      np.random.default_rng(4700))
        assert np.array_equal(out.data[mask.bool_array], self.I0.data[mask.bool_array])
        assert not np.array_equal(
            out.data[~mask.bool_array], self.I0.data[~mask.bool_array]
        )

    def test_seed_reproducibility(self):
        mask = BinaryMask(np.eye(4, 3))
        a = inpaint(self.I0, mask, self.model, self.sched, self.cfg,
                    np.random.default_rng(4800))
        b = inpaint(self.I0, mask, self.model, self.sched, self.cfg,
                    np.random.default_rng(4800))
        c = inpaint(self.I0, mask, self.model, self.sched, self.cfg,
                    np.random.default_rng(4801))
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_uneven_jump_runs(self):
        sched = make_linear_schedule(1e-3, 0.08, 7)
        model = single_gaussian(0.3, 0.04, (2, 2), sched)
        out = inpaint(
            Image(np.full((2, 2), 0.3)), BinaryMask(np.zeros((2, 2))), model, sched,
            RepaintConfig(jump_length=3, resamplings=2), np.random.default_rng(4900),
        )
        assert out.shape == (2, 2)
        assert np.isfinite(out.data).all()

    def test_zero_sigma_mode_changes_the_draw(self):
        mask = BinaryMask(np.eye(4, 3))
        noisy = inpaint(self.I0, mask, self.model, self.sched, self.cfg,
                        np.random.default_rng(5000))
        quiet = inpaint(
            self.I0, mask, self.model, self.sched,
            RepaintConfig(jump_length=2, resamplings=3, sigma_mode="zero"),
            np.random.default_rng(5000),
        )
        assert not np.array_equal(noisy.data, quiet.data)
        assert np.array_equal(quiet.data[mask.bool_array], self.I0.data[mask.bool_array])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            inpaint(self.I0, BinaryMask(np.ones((2, 2))), self.model, self.sched,
                    self.cfg, np.random.default_rng(0))


class TestInpaintStatistics:
    def test_unconditional_moments_track_exact_propagation(self):
        m0, v0 = 0.7, 0.04
        sched = make_linear_schedule(1e-3, 0.12, 60)
        model = single_gaussian(m0, v0, (1, 2), sched)
        plan = build_plan(60, 3, 3)
        om, oC = propagate_moments(plan, sched, np.full(2, m0), v0 * np.eye(2))
        assert abs(oC[0, 0] - oC[1, 1]) < 1e-12
        # the walk itself contracts: the oracle predicts less than the data
        # variance and the sampler must follow the oracle, not the data
        assert oC[0, 0] < v0
        mask = BinaryMask(np.zeros((1, 2)))
        I0 = Image(np.zeros((1, 2)))
        cfg = RepaintConfig(jump_length=3, resamplings=3)
        draws = np.array(
            [
                inpaint(I0, mask, model, sched, cfg, np.random.default_rng(91000 + i)).data.ravel()
                for i in range(500)
            ]
        ).ravel()
        se_m = draws.std(ddof=1) / math.sqrt(draws.size)
        sv = draws.var(ddof=1)
        se_v = sv * math.sqrt(2.0 / (draws.size - 1))
        assert abs(draws.mean() - om[0]) < 5 * se_m
        assert abs(sv - oC[0, 0]) < 5 * se_v

    def test_conditional_two_pixel_matches_formula(self):
        # frozen design: verified deviations stay under 3 SE at n=200 for
        # both seed bases (worst observed -2.49 SE on the variance)
        mu1, mu2, sig, rho = 0.3, -0.2, 0.1, 0.3
        sched = make_linear_schedule(1e-4, 0.04, 100)
        model = two_pixel_lattice(mu1, mu2, sig, rho, 32, sched)
        c = mu1 + sig
        cond_mean = mu2 + rho * sig
        cond_var = sig * sig * (1.0 - rho * rho)
        I0 = Image(np.array([[c, 0.0]]))
        mask = BinaryMask(np.array([[1.0, 0.0]]))
        cfg = RepaintConfig(jump_length=4, resamplings=8)
        n = 200
        for base in (81000, 82000):
            vals = np.array(
                [
                    inpaint(I0, mask, model, sched, cfg, np.random.default_rng(base + i)).data[0, 1]
                    for i in range(n)
                ]
            )
            se_m = vals.std(ddof=1) / math.sqrt(n)
            sv = vals.var(ddof=1)
            se_v = sv * math.sqrt(2.0 / (n - 1))
            assert abs(vals.mean() - cond_mean) < 3 * se_m
            assert abs(sv - cond_var) < 3 * se_v

    def test_more_resampling_tightens_conditional_pull(self):
        mu1, mu2, sig, rho = 0.3, -0.2, 0.1, 0.7
        sched = make_linear_schedule(1e-4, 0.04, 50)
        model = two_pixel_lattice(mu1, mu2, sig, rho, 32, sched)
        cond_mean = mu2 + rho * sig
        I0 = Image(np.array([[mu1 + sig, 0.0]]))
        mask = BinaryMask(np.array([[1.0, 0.0]]))
        errs = []
        for r, base in ((1, 62000), (5, 63000), (10, 64000)):
            cfg = RepaintConfig(jump_length=1, resamplings=r)
            vals = np.array(
                [
                    inpaint(I0, mask, model, sched, cfg, np.random.default_rng(base + i)).data[0, 1]
                    for i in range(200)
                ]
            )
            errs.append(abs(vals.mean() - cond_mean))
        assert errs[0] > errs[1] > errs[2]
