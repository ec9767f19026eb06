"""Phantom generator, conditional oracle, and spec parsing tests.

Everything here has a closed-form target: ellipse areas against pi*a*b,
rendered interiors against the recorded latents, conditional moments
against the bivariate-normal formulas, and mixture moments against the
population's, exactly for the rescaled midpoint lattice.
"""

import math
import warnings

import numpy as np
import pytest

from repaint_lab.grid import mirror_mask
from repaint_lab.phantom import (
    PhantomSpec,
    PhantomSpecError,
    StructureSpec,
    VacuousConditioningWarning,
    build_atlas,
    conditional_oracle,
    ellipse_mask,
    generate,
    gmm_from_spec,
    parse_phantom_spec,
)


def one_pair(rho=0.0, sigma=0.1, smoothing=0.0, **kw):
    s = StructureSpec(name="thalamus", center=(8.0, 4.0), axes=(3.0, 2.5),
                      sigma_left=sigma, sigma_right=sigma, rho=rho, **kw)
    return PhantomSpec(width=16, height=16, structures=(s,), background=0.2,
                       smoothing=smoothing)


def tiny_pair(rho=0.0, sigma=0.1):
    """Single-pixel pair on a 4x4 grid; cheap enough for 10^4-draw loops."""
    s = StructureSpec(name="t", center=(1.0, 1.0), axes=(0.6, 0.6),
                      sigma_left=sigma, sigma_right=sigma, rho=rho)
    return PhantomSpec(width=4, height=4, structures=(s,), background=0.2)


class TestEllipseMask:
    def test_area_tracks_pi_ab(self):
        for ay, ax in ((3, 3), (4, 3), (5, 4), (5.2, 3.4), (3.0, 2.5)):
            mask = ellipse_mask(32, 32, (16.0, 10.0), (ay, ax))
            target = math.pi * ay * ax
            assert abs(mask.count - target) < 0.1 * target

    def test_edge_ellipse_counts_only_in_grid_pixels(self):
        mask = ellipse_mask(8, 8, (1.0, 1.0), (3.0, 3.0))
        assert 0 < mask.count < math.pi * 9.0


class TestSpecValidation:
    def test_structure_rejects_bad_values(self):
        with pytest.raises(ValueError, match="rho"):
            StructureSpec(name="t", center=(4, 4), axes=(2, 2), rho=1.5)
        with pytest.raises(ValueError, match="sigma"):
            StructureSpec(name="t", center=(4, 4), axes=(2, 2), sigma_left=-0.1)
        with pytest.raises(ValueError, match="axes"):
            StructureSpec(name="t", center=(4, 4), axes=(0.0, 2))
        with pytest.raises(ValueError, match="name"):
            StructureSpec(name="", center=(4, 4), axes=(2, 2))
        with pytest.raises(ValueError, match="finite"):
            StructureSpec(name="t", center=(4, 4), axes=(2, 2), mu_left=math.inf)

    def test_phantom_rejects_odd_width(self):
        with pytest.raises(ValueError, match="even"):
            PhantomSpec(width=15, height=16)

    def test_phantom_rejects_excess_smoothing(self):
        with pytest.raises(ValueError, match="smoothing"):
            PhantomSpec(width=16, height=16, smoothing=2.0)

    def test_duplicate_names_rejected(self):
        s = StructureSpec(name="t", center=(4.0, 4.0), axes=(1.5, 1.5))
        u = StructureSpec(name="t", center=(12.0, 4.0), axes=(1.5, 1.5))
        with pytest.raises(ValueError, match="unique"):
            PhantomSpec(width=16, height=16, structures=(s, u))

    def test_overlapping_structures_rejected(self):
        a = StructureSpec(name="a", center=(8.0, 4.0), axes=(2.0, 2.0))
        b = StructureSpec(name="b", center=(9.0, 4.0), axes=(2.0, 2.0))
        with pytest.raises(ValueError, match="overlap"):
            PhantomSpec(width=16, height=16, structures=(a, b))

    def test_midline_crossing_pair_rejected(self):
        # mirror of an ellipse near the midline collides with the ellipse
        s = StructureSpec(name="t", center=(8.0, 7.5), axes=(2.0, 2.0))
        with pytest.raises(ValueError, match="overlap"):
            PhantomSpec(width=16, height=16, structures=(s,))


class TestGenerate:
    def test_atlas_sides_are_exact_mirrors(self):
        sample = generate(one_pair(rho=0.3), np.random.default_rng(0))
        left = sample.atlas.get("thalamus", "left")
        right = sample.atlas.get("thalamus", "right")
        assert np.array_equal(mirror_mask(left).bits, right.bits)
        assert left.count > 0

    def test_interiors_reproduce_latents_exactly(self):
        sample = generate(one_pair(rho=0.5), np.random.default_rng(1))
        a_left, a_right = sample.latents["thalamus"]
        img = sample.image.data
        left = sample.atlas.get("thalamus", "left").bool_array
        right = sample.atlas.get("thalamus", "right").bool_array
        assert (img[left] == a_left).all()
        assert (img[right] == a_right).all()
        assert (img[~(left | right)] == 0.2).all()

    def test_smoothed_interior_mean_within_one_percent(self):
        s = StructureSpec(name="t", center=(16.0, 8.0), axes=(4.5, 3.5),
                          sigma_left=0.0, sigma_right=0.0)
        spec = PhantomSpec(width=32, height=32, structures=(s,), background=0.2,
                           smoothing=0.35)
        sample = generate(spec, np.random.default_rng(2))
        mask = sample.atlas.get("t", "left").bool_array
        mean = sample.image.data[mask].mean()
        assert abs(mean - 0.6) < 0.01 * 0.6

    def test_perfect_correlation_locks_sides(self):
        spec = tiny_pair(rho=1.0)
        rng = np.random.default_rng(3)
        for _ in range(50):
            a_left, a_right = generate(spec, rng).latents["t"]
            assert a_left == a_right

    def test_zero_correlation_in_monte_carlo(self):
        spec = tiny_pair(rho=0.0)
        rng = np.random.default_rng(100)
        lat = np.array([generate(spec, rng).latents["t"] for _ in range(10000)])
        corr = np.corrcoef(lat.T)[0, 1]
        assert abs(corr) < 0.03
        assert abs(lat[:, 0].mean() - 0.6) < 5 * 0.1 / 100.0
        assert abs(lat[:, 0].std(ddof=1) - 0.1) < 0.05 * 0.1

    def test_stream_layout_independent_of_sigmas(self):
        # structure 1's parameters must not shift structure 2's draws
        def two(sig1):
            a = StructureSpec(name="a", center=(4.0, 4.0), axes=(1.5, 1.5),
                              sigma_left=sig1, sigma_right=sig1)
            b = StructureSpec(name="b", center=(12.0, 4.0), axes=(1.5, 1.5))
            return PhantomSpec(width=16, height=16, structures=(a, b))

        lat_a = generate(two(0.0), np.random.default_rng(7)).latents["b"]
        lat_b = generate(two(0.1), np.random.default_rng(7)).latents["b"]
        assert lat_a == lat_b

    def test_same_seed_reproduces(self):
        spec = one_pair(rho=0.4)
        a = generate(spec, np.random.default_rng(9))
        b = generate(spec, np.random.default_rng(9))
        assert a.latents == b.latents
        assert np.array_equal(a.image.data, b.image.data)


class TestConditionalOracle:
    def test_independence_ignores_conditioning_value(self):
        spec = one_pair(rho=0.0)
        assert conditional_oracle(spec, "thalamus", 0.9) == (0.6, pytest.approx(0.01))
        assert conditional_oracle(spec, "thalamus", -3.0) == (0.6, pytest.approx(0.01))

    def test_perfect_correlation_is_deterministic(self):
        spec = one_pair(rho=1.0)
        mean, var = conditional_oracle(spec, "thalamus", 0.75)
        assert mean == pytest.approx(0.6 + (0.75 - 0.6))
        assert var == 0.0

    def test_marginal_to_conditional_variance_ratio(self):
        spec = one_pair(rho=0.9)
        _, var = conditional_oracle(spec, "thalamus", 0.7)
        assert (0.1 ** 2) / var == pytest.approx(1.0 / (1.0 - 0.81))

    def test_known_right_swaps_roles(self):
        s = StructureSpec(name="t", center=(8.0, 4.0), axes=(2.0, 2.0),
                          mu_left=0.5, mu_right=0.7, sigma_left=0.1,
                          sigma_right=0.2, rho=0.5)
        spec = PhantomSpec(width=16, height=16, structures=(s,))
        mean, var = conditional_oracle(spec, "t", 0.8, known_side="right")
        assert mean == pytest.approx(0.5 + 0.5 * (0.1 / 0.2) * (0.8 - 0.7))
        assert var == pytest.approx(0.1 ** 2 * 0.75)

    def test_vacuous_conditioning_returns_marginal_with_warning(self):
        s = StructureSpec(name="t", center=(8.0, 4.0), axes=(2.0, 2.0),
                          sigma_left=0.0, sigma_right=0.1, rho=0.4)
        spec = PhantomSpec(width=16, height=16, structures=(s,))
        with pytest.warns(VacuousConditioningWarning):
            mean, var = conditional_oracle(spec, "t", 0.9, known_side="left")
        assert (mean, var) == (0.6, pytest.approx(0.01))

    def test_deterministic_hidden_side_needs_no_warning(self):
        s = StructureSpec(name="t", center=(8.0, 4.0), axes=(2.0, 2.0),
                          sigma_left=0.1, sigma_right=0.0, rho=0.4)
        spec = PhantomSpec(width=16, height=16, structures=(s,))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert conditional_oracle(spec, "t", 0.9) == (0.6, 0.0)

    def test_unknown_structure_and_side_rejected(self):
        spec = one_pair()
        with pytest.raises(ValueError, match="no structure"):
            conditional_oracle(spec, "amygdala", 0.5)
        with pytest.raises(ValueError, match="known_side"):
            conditional_oracle(spec, "thalamus", 0.5, known_side="up")

    def test_law_of_total_variance(self):
        spec = tiny_pair(rho=0.6)
        rng = np.random.default_rng(200)
        lat = np.array([generate(spec, rng).latents["t"] for _ in range(5000)])
        cond_means = np.array(
            [conditional_oracle(spec, "t", a_left)[0] for a_left in lat[:, 0]]
        )
        cond_var = conditional_oracle(spec, "t", 0.0)[1]
        marginal = lat[:, 1].var(ddof=1)
        explained = cond_means.var(ddof=1) + cond_var
        # conservative SE: the two variance estimates treated as independent
        se = math.sqrt(2.0 / (len(lat) - 1)) * math.sqrt(
            marginal ** 2 + cond_means.var(ddof=1) ** 2
        )
        assert abs(marginal - explained) < 3 * se


class TestGmmFromSpec:
    def test_single_component_is_central_rendering(self):
        spec = one_pair(rho=0.5)
        gmm = gmm_from_spec(spec, 1)
        assert len(gmm.means) == 1
        img = gmm.means[0].data
        atlas = build_atlas(spec)
        left = atlas.get("thalamus", "left").bool_array
        right = atlas.get("thalamus", "right").bool_array
        assert (img[left] == 0.6).all()
        assert (img[right] == 0.6).all()
        assert (img[~(left | right)] == 0.2).all()

    def test_deterministic_spec_collapses_to_one_exact_component(self):
        gmm = gmm_from_spec(one_pair(sigma=0.0), 500)
        assert len(gmm.means) == 1
        assert gmm.variances[0] == 0.0

    def test_lattice_size_is_largest_power_within_budget(self):
        gmm = gmm_from_spec(one_pair(rho=0.9), 576)
        assert len(gmm.means) == 576  # m=24, d=2
        assert np.allclose(gmm.weights, 1.0 / 576)
        assert (gmm.variances == 0.0).all()
        assert len(gmm_from_spec(one_pair(rho=0.9), 575).means) == 529  # m=23

    def test_rank_drops_for_degenerate_structures(self):
        assert len(gmm_from_spec(one_pair(rho=1.0), 10).means) == 10  # d=1
        s = StructureSpec(name="t", center=(8.0, 4.0), axes=(2.0, 2.0),
                          sigma_left=0.0, sigma_right=0.1)
        spec = PhantomSpec(width=16, height=16, structures=(s,))
        gmm = gmm_from_spec(spec, 10)
        assert len(gmm.means) == 10
        # the zero-variance side is constant across components
        atlas = build_atlas(spec)
        left = atlas.get("t", "left").bool_array
        for mean_img in gmm.means:
            assert (mean_img.data[left] == 0.6).all()

    def test_midpoint_lattice_moments_are_exact(self):
        spec = one_pair(rho=0.9)
        gmm = gmm_from_spec(spec, 576)
        # interiors are constant, so one pixel per side carries the latent
        a_left = np.array([m.data[8, 4] for m in gmm.means])
        a_right = np.array([m.data[8, 11] for m in gmm.means])
        w = gmm.weights
        assert abs(float(w @ a_left) - 0.6) < 1e-12
        assert abs(float(w @ ((a_left - 0.6) ** 2)) - 0.01) < 1e-10
        assert abs(float(w @ ((a_right - 0.6) ** 2)) - 0.01) < 1e-10
        cov = float(w @ ((a_left - 0.6) * (a_right - 0.6)))
        assert abs(cov - 0.9 * 0.01) < 1e-10

    def test_mixture_mean_matches_monte_carlo_population_mean(self):
        spec = one_pair(rho=0.5, smoothing=0.8)
        gmm = gmm_from_spec(spec, 100)
        mix_mean = np.zeros(spec_shape := (16, 16))
        for w, m in zip(gmm.weights, gmm.means):
            mix_mean += w * m.data
        rng = np.random.default_rng(300)
        mc = np.zeros(spec_shape)
        n = 4000
        for _ in range(n):
            mc += generate(spec, rng).image.data
        mc /= n
        assert np.max(np.abs(mix_mean - mc)) < 0.02 * np.max(np.abs(mc))

    def test_stratified_jitter_stays_unbiased(self):
        spec = one_pair(rho=0.9)
        gmm = gmm_from_spec(spec, 576, rng=np.random.default_rng(11))
        base = gmm_from_spec(spec, 576)
        assert len(gmm.means) == 576
        assert not np.array_equal(gmm.means[0].data, base.means[0].data)
        a_left = np.array([m.data[8, 4] for m in gmm.means])
        assert abs(a_left.mean() - 0.6) < 0.01
        assert abs(a_left.var() - 0.01) < 0.15 * 0.01

    def test_rejects_empty_budget(self):
        with pytest.raises(ValueError, match="n_components"):
            gmm_from_spec(one_pair(), 0)


DEMO_TEXT = """\
[phantom]
width = 32
height = 32
background = 0.1
smoothing = 0.35

[structure:thalamus]
center = 8, 8
axes = 3.0, 3.4
rho = 0.9

[structure:caudate]
center = 16, 7.5
axes = 3.2, 3.0
mu_left = 0.55
mu_right = 0.65
rho = 0.5
"""


class TestParsePhantomSpec:
    def test_demo_round_trip(self, tmp_path):
        p = tmp_path / "demo.ini"
        p.write_text(DEMO_TEXT)
        spec = parse_phantom_spec(p)
        assert (spec.width, spec.height) == (32, 32)
        assert spec.background == 0.1
        assert spec.smoothing == 0.35
        names = [s.name for s in spec.structures]
        assert names == ["thalamus", "caudate"]
        thal = spec.structures[0]
        assert thal.center == (8.0, 8.0)
        assert thal.axes == (3.0, 3.4)
        assert (thal.mu_left, thal.sigma_left, thal.rho) == (0.6, 0.1, 0.9)
        assert (spec.structures[1].mu_left, spec.structures[1].mu_right) == (0.55, 0.65)

    def test_empty_file_gives_default_empty_phantom(self, tmp_path):
        p = tmp_path / "empty.ini"
        p.write_text("")
        spec = parse_phantom_spec(p)
        assert (spec.width, spec.height) == (32, 32)
        assert spec.structures == ()

    def test_syntax_error_reports_line(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[phantom]\nwidth 32\n")
        with pytest.raises(PhantomSpecError, match="line"):
            parse_phantom_spec(p)

    def test_bad_value_reports_line(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text(
            "[structure:t]\n"   # line 1
            "center = 8, 8\n"   # line 2
            "axes = 2, 2\n"     # line 3
            "rho = banana\n"    # line 4
        )
        with pytest.raises(PhantomSpecError, match="line 4"):
            parse_phantom_spec(p)

    def test_unknown_key_reports_line(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[phantom]\nwidht = 32\n")
        with pytest.raises(PhantomSpecError, match="line 2.*widht"):
            parse_phantom_spec(p)

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[noise]\nlevel = 3\n")
        with pytest.raises(PhantomSpecError, match="unknown section"):
            parse_phantom_spec(p)

    def test_missing_required_key_names_section(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[structure:t]\ncenter = 8, 8\n")
        with pytest.raises(PhantomSpecError, match="axes"):
            parse_phantom_spec(p)

    def test_bad_pair_reports_key_line(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[structure:t]\ncenter = 8\naxes = 2, 2\n")
        with pytest.raises(PhantomSpecError, match="line 2"):
            parse_phantom_spec(p)

    def test_semantic_errors_surface_as_spec_errors(self, tmp_path):
        p = tmp_path / "odd.ini"
        p.write_text("[phantom]\nwidth = 15\n")
        with pytest.raises(PhantomSpecError, match="even"):
            parse_phantom_spec(p)
        q = tmp_path / "rho.ini"
        q.write_text("[structure:t]\ncenter = 8, 8\naxes = 2, 2\nrho = 1.5\n")
        with pytest.raises(PhantomSpecError, match="rho"):
            parse_phantom_spec(q)

    def test_missing_file_is_a_spec_error(self, tmp_path):
        with pytest.raises(PhantomSpecError, match="cannot read"):
            parse_phantom_spec(tmp_path / "absent.ini")
