import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kymorecon.conditioning import (
    PoissonML,
    assemble_point_source_matrix,
    default_motivation_psf,
    lateral_psf_eval,
    motivation_grid,
    nn_selection_matrix,
    pixel_convolution_matrix,
    rcn,
    roots_of_unity_sources,
    run_error_sweep,
    run_rcn_sweep,
)
from kymorecon.microscope import ImagingConfig, PsfModel

GRID = motivation_grid(24)
PSF = default_motivation_psf(4.0)
PX = GRID.pixel_size
CENTRE = np.array([12.5, 12.5]) * PX


class TestPointSourceMatrix:
    def test_single_source(self):
        system = assemble_point_source_matrix([CENTRE], PSF, GRID)
        assert system.M.shape == (GRID.n_pixels, 1)
        assert rcn(system.M) == 1.0

    def test_identical_locations(self):
        M = assemble_point_source_matrix([CENTRE, CENTRE], PSF, GRID).M
        np.testing.assert_array_equal(M[:, 0], M[:, 1])

    def test_entry_formula(self):
        loc = CENTRE + [0.03, -0.05]
        M = assemble_point_source_matrix([loc], PSF, GRID).M
        x, y, _ = GRID.axes()
        k = 12 * GRID.n_cols + 13
        d = np.array([x[13], y[12]]) - loc
        expected = PX**2 * np.exp(-0.5 * (d @ d) / PSF.sigma_xy**2) / (2 * np.pi * PSF.sigma_xy**2)
        assert M[k, 0] == pytest.approx(expected, rel=1e-13)

    def test_whole_pixel_translation_permutes_rows(self):
        locs = roots_of_unity_sources(3, 2.0, CENTRE, PX)
        a = assemble_point_source_matrix(locs, PSF, GRID).M.reshape(24, 24, -1)
        b = assemble_point_source_matrix(locs + [2 * PX, PX], PSF, GRID).M.reshape(24, 24, -1)
        np.testing.assert_allclose(np.roll(a, (1, 2), axis=(0, 1)), b, atol=1e-15)

    def test_lateral_mass(self):
        # a source at a pixel centre, untruncated, sums close to one photon per unit intensity
        M = assemble_point_source_matrix([CENTRE], PsfModel(), GRID).M
        assert M.sum() == pytest.approx(1.0, abs=1e-3)
        assert lateral_psf_eval(PsfModel(), np.zeros(2)) == pytest.approx(1 / (2 * np.pi * 0.13**2))

    def test_errors(self):
        with pytest.raises(ValueError):
            assemble_point_source_matrix(np.zeros((0, 2)), PSF, GRID)
        with pytest.raises(ValueError):
            assemble_point_source_matrix([[-0.1, 0.5]], PSF, GRID)
        with pytest.raises(ValueError):
            assemble_point_source_matrix([CENTRE], PSF, ImagingConfig(2, 8, 8))

    def test_convolution_matrix_square(self):
        g = motivation_grid(6)
        assert pixel_convolution_matrix(PSF, g).shape == (36, 36)


class TestRcn:
    def test_identity(self):
        assert rcn(np.eye(4)) == 1.0

    def test_duplicate_column(self):
        A = np.random.default_rng(0).normal(size=(6, 3))
        assert rcn(np.column_stack([A, A[:, 0]])) < 1e-12

    def test_diag(self):
        assert rcn(np.diag([1.0, 2.0])) == 0.5

    def test_wide_is_zero(self):
        assert rcn(np.ones((2, 3))) == 0.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            rcn(np.array([[np.inf]]))

    def test_disjoint_supports_norm_ratio(self):
        locs = [CENTRE, CENTRE + [7.3 * PX, 0.4 * PX], CENTRE - [0.2 * PX, 8.1 * PX]]
        M = assemble_point_source_matrix(locs, PSF, GRID).M
        assert not np.any((M > 0).sum(axis=1) > 1)
        norms = np.linalg.norm(M, axis=0)
        assert rcn(M) == pytest.approx(norms.min() / norms.max(), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_rcn_scale_invariant(seed, alpha):
    A = np.random.default_rng(seed).normal(size=(7, 4))
    assert rcn(alpha * A) == pytest.approx(rcn(A), rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rcn_square_root_of_gram(seed):
    A = np.random.default_rng(seed).normal(size=(9, 4))
    assert rcn(A) == pytest.approx(np.sqrt(rcn(A.T @ A)), abs=1e-8)


class TestRootsOfUnity:
    def test_centre_only(self):
        np.testing.assert_array_equal(roots_of_unity_sources(0, 1.0, [1.0, 2.0]), [[1.0, 2.0]])

    def test_four(self):
        pts = roots_of_unity_sources(4, 2.0, [0.0, 0.0], pixel_size=1.0)
        np.testing.assert_allclose(pts, [[0, 0], [2, 0], [0, 2], [-2, 0], [0, -2]], atol=1e-15)

    @pytest.mark.parametrize("n", [1, 3, 7, 31])
    def test_distance(self, n):
        pts = roots_of_unity_sources(n, 2.5, CENTRE, PX)
        np.testing.assert_allclose(np.linalg.norm(pts[1:] - CENTRE, axis=1), 2.5 * PX, atol=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            roots_of_unity_sources(2, 0.0, CENTRE)


class TestSweeps:
    def test_rcn_sweep_table(self):
        rows = run_rcn_sweep([0.5, 8.0], [1, 2, 4])
        assert [(r["radius_px"], r["n_sources"]) for r in rows] == [(a, b) for a in (0.5, 8.0) for b in (1, 2, 4)]
        two = [r["rcn"] for r in rows if r["n_sources"] == 2 and r["radius_px"] == 8.0][0]
        # both sources sit at the same sub-pixel offset
        assert two == pytest.approx(1.0, abs=1e-10)

    def test_error_sweep_deterministic(self):
        a = run_error_sweep([1.0], [1, 2], repeats=3, seed=4)
        b = run_error_sweep([1.0], [1, 2], repeats=3, seed=4)
        assert a == b

    def test_single_source_small_error(self):
        rows = run_error_sweep([8.0], [1], repeats=20, mu_bg=10.0, phi_true=400.0, seed=0)
        assert rows[0]["median_l2_error"] < 0.05


class TestPoissonML:
    def test_noiseless_recovery(self):
        locs = roots_of_unity_sources(3, 6.0, CENTRE, PX)
        M = assemble_point_source_matrix(locs, PSF, GRID).M
        truth = np.array([400.0, 250.0, 600.0, 10.0])
        est = PoissonML().fit(M, M @ truth + 10.0, background=10.0)
        np.testing.assert_allclose(est.coef_, truth, rtol=1e-6)
        np.testing.assert_allclose(est.predict(M), M @ truth + 10.0, rtol=1e-9)

    def test_nonnegative(self):
        M = assemble_point_source_matrix(roots_of_unity_sources(2, 0.5, CENTRE, PX), PSF, GRID).M
        counts = np.random.default_rng(1).poisson(np.full(M.shape[0], 10.0)).astype(float)
        assert np.all(PoissonML().fit(M, counts, background=10.0).coef_ >= 0)

    def test_needs_background(self):
        with pytest.raises(ValueError):
            PoissonML().fit(np.ones((3, 1)), np.ones(3))


class TestSelection:
    def test_unique_pixels(self):
        g = motivation_grid(8)
        pts = np.array([[0.5, 0.5], [1.5, 0.5], [2.5, 3.5]]) * g.pixel_size
        sel = nn_selection_matrix(pts, g)
        np.testing.assert_array_equal(sel.S.T @ sel.S, np.eye(3))
        assert not sel.duplicated

    def test_duplicate_pixel(self):
        g = motivation_grid(8)
        pts = np.array([[2.4, 2.5], [2.6, 2.5], [5.5, 5.5]]) * g.pixel_size
        sel = nn_selection_matrix(pts, g)
        assert sel.duplicated
        M = pixel_convolution_matrix(PSF, g)
        assert rcn(M @ sel.S) < 1e-12

    def test_outside(self):
        with pytest.raises(ValueError):
            nn_selection_matrix([[-1.0, 0.1]], motivation_grid(8))
