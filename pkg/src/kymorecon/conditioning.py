"""Conditioning of point-source deconvolution on a single imaging plane.

Point sources at arbitrary lateral positions are imaged through the
lateral (xy) marginal of the PSF onto one pixel plane, giving the linear
model ``mu = M phi + mu_bg``. The module measures how close ``M`` is to an
ill-posed problem (reciprocal condition number) and how well Poisson
maximum likelihood recovers the intensities as sources crowd together.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_positive, check_vector
from .baselines import nearest_pixel_index
from .microscope import ImagingConfig, PsfModel

logger = logging.getLogger(__name__)


def motivation_grid(n=64, pixel_size=0.160, acquisition_time=1.0):
    """Single ``n x n`` pixel plane.

    ``acquisition_time=1`` makes each column of ``M`` the fraction of a
    source's photons landing in each pixel, so intensities read as photons.
    """
    return ImagingConfig(1, n, n, pixel_size, 1.0, acquisition_time)


def default_motivation_psf(cutoff=4.0):
    return PsfModel(cutoff=cutoff)


def lateral_psf_eval(psf, dxy):
    """Lateral marginal of the PSF (um^-2) at offsets of shape (..., 2)."""
    dxy = np.asarray(dxy, dtype=float)
    c = 1.0 / (2.0 * np.pi * psf.sigma_xy**2)
    return c * psf.factor(dxy[..., 0], psf.sigma_xy) * psf.factor(dxy[..., 1], psf.sigma_xy)


def _plane_centres(grid):
    x, y, _ = grid.axes()
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass(frozen=True, eq=False)
class PointSourceSystem:
    M: np.ndarray
    locations: np.ndarray
    grid: ImagingConfig

    @property
    def n_sources(self):
        return self.M.shape[1]

    def expected(self, phi, mu_bg):
        return self.M @ np.asarray(phi, dtype=float) + mu_bg


def _check_plane(grid):
    if grid.n_slices != 1:
        raise ValueError("point-source systems live on a single imaging plane")


def assemble_point_source_matrix(locations, psf, grid):
    """``M[k, j] = |p| t_A psf_xy(x_k - y_j)`` sampled at pixel centres.

    ``locations`` has shape (n_s, 2) or (n_s, 3); only x and y are used.
    """
    _check_plane(grid)
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    if loc.size == 0:
        raise ValueError("at least one source location is required")
    if loc.ndim != 2 or loc.shape[1] not in (2, 3) or not np.all(np.isfinite(loc)):
        raise ValueError("locations must be a finite (n, 2) or (n, 3) array")
    loc = loc[:, :2]
    ext = np.array(grid.extent[:2])
    if np.any(loc < 0) or np.any(loc > ext):
        raise ValueError("source locations must lie within the grid extent")
    centres = _plane_centres(grid)
    M = grid.pixel_area * grid.acquisition_time * lateral_psf_eval(psf, centres[:, None, :] - loc[None, :, :])
    M.setflags(write=False)
    return PointSourceSystem(M, loc, grid)


def pixel_convolution_matrix(psf, grid):
    """Digital convolution matrix: one source at every pixel centre."""
    return assemble_point_source_matrix(_plane_centres(grid), psf, grid).M


def rcn(matrix):
    """Reciprocal condition number ``sigma_min / sigma_max`` (0 if rank deficient)."""
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.size == 0 or not np.all(np.isfinite(A)):
        raise ValueError("rcn needs a non-empty finite 2-D matrix")
    if A.shape[1] > A.shape[0]:
        return 0.0
    s = np.linalg.svd(A, compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def roots_of_unity_sources(n_neighbours, radius, centre, pixel_size=0.160):
    """A source at ``centre`` plus ``n_neighbours`` on a circle of ``radius`` pixels."""
    check_int(n_neighbours, "n_neighbours", minimum=0)
    check_positive(radius, "radius")
    centre = np.asarray(centre, dtype=float)
    angles = 2.0 * np.pi * np.arange(n_neighbours) / max(n_neighbours, 1)
    ring = centre + radius * pixel_size * np.column_stack([np.cos(angles), np.sin(angles)])
    return np.vstack([centre[None, :], ring])


def _grid_centre(grid):
    return np.array(grid.extent[:2]) / 2.0


def run_rcn_sweep(radii, counts, psf=None, grid=None):
    """RCN of ``M`` for every (radius in pixels, total source count) pair."""
    psf = psf or default_motivation_psf()
    grid = grid or motivation_grid()
    rows = []
    for r in radii:
        for c in counts:
            locs = roots_of_unity_sources(check_int(c, "count", minimum=1) - 1, r, _grid_centre(grid), grid.pixel_size)
            rows.append({"radius_px": float(r), "n_sources": int(c),
                         "rcn": rcn(assemble_point_source_matrix(locs, psf, grid).M)})
    return rows


class PoissonML(BaseEstimator):
    """Nonnegative Poisson maximum likelihood for ``counts ~ P(M phi + background)``.

    Uses L-BFGS-B with positivity bounds. Pixels where every column of
    ``M`` vanishes carry no information on ``phi`` and are dropped.
    """

    def __init__(self, ftol=1e-15, gtol=1e-10, max_iter=20000):
        self.ftol = ftol
        self.gtol = gtol
        self.max_iter = max_iter

    def fit(self, M, counts, background=None):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2:
            raise ValueError("M must be a 2-D array")
        counts = check_vector(counts, "counts", length=M.shape[0], nonnegative=True)
        bg = check_positive(background, "background")
        keep = np.any(M != 0, axis=1)
        Ma, na = M[keep], counts[keep]
        # work in units of the per-source total mass so the variables are O(1)
        mass = np.maximum(Ma.sum(axis=0), 1e-300)
        Ms = Ma / mass
        x0 = np.maximum(np.linalg.lstsq(Ms, na - bg, rcond=None)[0], 1.0)

        def f(x):
            mu = bg + Ms @ x
            pos = na > 0
            val = np.sum(mu) - np.sum(na[pos] * np.log(mu[pos]))
            return val, Ms.T @ (1.0 - na / mu)

        res = optimize.minimize(f, x0, jac=True, method="L-BFGS-B", bounds=[(0, None)] * Ms.shape[1],
                                options={"ftol": self.ftol, "gtol": self.gtol, "maxiter": self.max_iter})
        self.coef_ = res.x / mass
        self.n_iter_ = int(res.nit)
        self.converged_ = bool(res.success)
        self.background_ = bg
        self.n_features_in_ = M.shape[1]
        return self

    def predict(self, M):
        check_is_fitted(self, "coef_")
        return self.background_ + np.asarray(M, dtype=float) @ self.coef_


def normalised_l2_error(estimate, truth):
    truth = np.asarray(truth, dtype=float)
    return float(np.linalg.norm(np.asarray(estimate) - truth) / np.linalg.norm(truth))


def run_error_sweep(radii, counts, repeats=20, psf=None, grid=None, mu_bg=10.0, phi_true=400.0,
                    seed=0, noiseless=False):
    """Median normalised l2 error of Poisson ML over ``repeats`` noise draws.

    Every cell (radius, count) draws from its own stream seeded by
    ``(seed, cell index)``, so cells can be computed in any order.
    ``noiseless`` replaces the draws with the exact expected counts.
    """
    psf = psf or default_motivation_psf()
    grid = grid or motivation_grid()
    check_int(repeats, "repeats", minimum=1)
    rows = []
    cell = 0
    for r in radii:
        for c in counts:
            locs = roots_of_unity_sources(check_int(c, "count", minimum=1) - 1, r, _grid_centre(grid), grid.pixel_size)
            system = assemble_point_source_matrix(locs, psf, grid)
            truth = np.full(system.n_sources, float(phi_true))
            mu = system.expected(truth, mu_bg)
            rng = np.random.default_rng([seed, cell])
            errors = []
            for _ in range(1 if noiseless else repeats):
                data = mu if noiseless else rng.poisson(mu).astype(float)
                est = PoissonML().fit(system.M, data, background=mu_bg).coef_
                errors.append(normalised_l2_error(est, truth))
            rows.append({"radius_px": float(r), "n_sources": int(c), "median_l2_error": float(np.median(errors))})
            cell += 1
    return rows


@dataclass(frozen=True, eq=False)
class SelectionMatrix:
    S: np.ndarray
    pixel_index: np.ndarray
    duplicated: bool

    def __post_init__(self):
        if not np.allclose(self.S.sum(axis=0), 1.0):
            raise ValueError("every column of a selection matrix must hold exactly one 1")


def nn_selection_matrix(sample_points, grid):
    """Assign each sample point to its nearest pixel centre.

    Returns ``S`` with ``S[k, j] = 1`` iff pixel ``k`` is nearest to sample
    ``j``; ``duplicated`` flags two samples sharing a pixel, which makes any
    ``M @ S`` rank deficient.
    """
    _check_plane(grid)
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if pts.shape[1] == 2:
        pts = np.column_stack([pts, np.full(pts.shape[0], 0.5 * grid.z_spacing)])
    idx, clamped = nearest_pixel_index(pts, grid)
    if clamped.any():
        raise ValueError("sample points must lie within the grid")
    linear = idx[:, 1] * grid.n_cols + idx[:, 2]
    S = np.zeros((grid.n_rows * grid.n_cols, pts.shape[0]))
    S[linear, np.arange(pts.shape[0])] = 1.0
    return SelectionMatrix(S, linear, bool(np.unique(linear).size < linear.size))
