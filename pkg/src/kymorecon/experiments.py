"""Synthetic scenarios and the sweeps built on them.

The two reference geometries (a straight segment and a curved quadratic
spline) are combined with the comet and island photometries to simulate
stacks; reconstructions are scored against the analog ground truth on a
fine grid of curve positions.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._validation import SolverDivergenceError
from .baselines import Kymograph, fit_background, model_density, nearest_pixel_index
from .conditioning import rcn
from .geometry import LineCurve, SplineCurve
from .microscope import (
    build_system,
    grey_to_photons,
    psnr_acquisition_time,
    simulate_frame,
)
from .photometry import CometParams, IslandParams, whitening_matrix
from .solver import SolverConfig, run_map

logger = logging.getLogger(__name__)

TRUTH_STEP = 0.01
GEOMETRIES = ("gm1", "gm2")
PHOTOMETRIES = ("pm1", "pm2")
# five decades bracketing the optimum of the island scenario at the default settings
DEFAULT_LAMBDAS = (3e-8, 3e-7, 3e-6, 3e-5, 3e-4, 3e-3)
DEFAULT_BIN_SIZES = (0.02, 0.04, 0.08)
DEFAULT_RCN_BIN_SIZES = (0.01, 0.02, 0.04, 0.08, 0.16, 0.32)
DEFAULT_PSNRS = (5.0, 15.0, 25.0)


def worker_count():
    """Worker pool size, capped by ``KYMO_THREADS`` when set."""
    env = os.environ.get("KYMO_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"KYMO_THREADS must be a positive integer, got {env!r}") from None
        if n < 1:
            raise ValueError(f"KYMO_THREADS must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


def parallel_map(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------- scenarios

def gm1_curve(frame_index=0):
    direction = np.array([1.0, 0.15, 0.05])
    return LineCurve((0.5, 1.6, 3.0), tuple(direction / np.linalg.norm(direction)), 5.6, frame_index)


GM2_CONTROL_POINTS = ((0.3, 0.5, 2.8), (2.4, 3.7, 3.2), (4.6, 0.3, 3.4), (6.5, 3.2, 3.0))


def gm2_curve(frame_index=0):
    return SplineCurve(GM2_CONTROL_POINTS, frame_index)


def scenario_curve(geometry, frame_index=0):
    if geometry == "gm1":
        return gm1_curve(frame_index)
    if geometry == "gm2":
        return gm2_curve(frame_index)
    raise ValueError(f"geometry must be one of {GEOMETRIES}, got {geometry!r}")


def scenario_density(photometry):
    if photometry == "pm1":
        return model_density("pm1", CometParams().as_array())
    if photometry == "pm2":
        return model_density("pm2", IslandParams().as_array())
    raise ValueError(f"photometry must be one of {PHOTOMETRIES}, got {photometry!r}")


@dataclass
class SyntheticData:
    curves: list
    frames: list
    density: object
    config: object

    @property
    def greys(self):
        return [f.grey for f in self.frames]

    @property
    def imaging(self):
        return self.config.imaging


def simulate(curves, density, config, seed=None, psnr=None):
    """Simulate one stack per curve; frame ``f`` uses the stream ``(seed, f)``.

    With ``psnr`` the acquisition time is set from the first frame so that
    the stack reaches that peak signal-to-noise ratio.
    """
    seed = config.seed if seed is None else seed
    if psnr is not None:
        imaging = config.imaging
        t_a = psnr_acquisition_time(psnr, density, curves[0], config.psf, imaging,
                                    config.background.rate(0.0), TRUTH_STEP)
        config = config.replace(imaging__acquisition_time=float(t_a))
    frames = [simulate_frame(c, density, config.psf, config.imaging, config.camera, config.background,
                             seed=np.random.default_rng([seed, c.frame_index]))
              for c in curves]
    return SyntheticData(list(curves), frames, density, config)


def simulate_scenario(geometry, photometry, config, n_frames=1, seed=None, psnr=None):
    curves = [scenario_curve(geometry, f) for f in range(n_frames)]
    return simulate(curves, scenario_density(photometry), config, seed, psnr)


# ---------------------------------------------------------------- metrics

def truth_positions(length, step=TRUTH_STEP):
    n = max(int(np.ceil(length / step - 1e-9)), 1)
    return np.minimum((np.arange(n) + 0.5) * step, length)


def piecewise_values(phi, basis, ell):
    return np.asarray(phi, dtype=float)[basis.bin_of(ell)]


def l1_error(values, truth, step=TRUTH_STEP):
    """Discrete l1 distance of two signals sampled on the truth grid (photons / s)."""
    return float(np.sum(np.abs(np.asarray(values) - np.asarray(truth))) * step)


def half_max_support(values):
    values = np.asarray(values, dtype=float)
    peak = values.max()
    return values > 0.5 * peak if peak > 0 else np.zeros(values.shape, dtype=bool)


def jaccard(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.sum(a | b)
    return float(np.sum(a & b) / union) if union else 1.0


def nn_profile(grey, curve, imaging, ell):
    """Grey value of the nearest pixel centre at each curve position."""
    idx, _ = nearest_pixel_index(curve.embed(ell), imaging)
    return np.asarray(grey)[idx[:, 0], idx[:, 1], idx[:, 2]].astype(float)


def calibrate_affine(values, truth):
    """Least-squares ``a * values + b`` against ``truth``; returns the mapped values."""
    design = np.column_stack([values, np.ones_like(values)])
    coef = np.linalg.lstsq(design, truth, rcond=None)[0]
    return design @ coef


# ---------------------------------------------------------- reconstruction

@dataclass
class FrameReconstruction:
    frame_index: int
    phi: np.ndarray
    basis: object
    diagnostics: object
    background: float


def reconstruct_frame(grey, curve, config, bin_size, lam, prior="laplace", background=None,
                      system=None, record=True, frame_index=None):
    """MAP photometry of one grey stack along ``curve``.

    ``background`` is the integrated background in photons per pixel; by
    default it comes from ``config.background`` at the frame's time.
    """
    imaging = config.imaging
    frame = curve.frame_index if frame_index is None else frame_index
    system = system or build_system(curve, bin_size, config.psf, imaging)
    bg = config.background.integrated(imaging, frame) if background is None else float(background)
    counts = grey_to_photons(config.camera, grey).ravel()
    solver = SolverConfig(gamma=config.solver.gamma, lam=lam, max_iters=config.solver.max_iters,
                          rel_tol=config.solver.rel_tol, prior=prior, scale=config.solver.scale)
    try:
        phi, diag = run_map(counts, system.H, bg, whitening_matrix(system.n_bases), solver, record=record)
    except SolverDivergenceError as exc:
        exc.frame = frame
        raise
    return FrameReconstruction(frame, phi, system.basis, diag, bg)


def reconstruct_frames(greys, curves, config, bin_size, lam, prior="laplace", background_model=None):
    """Independent MAP reconstruction of every frame, in a worker pool."""
    greys, curves = list(greys), list(curves)
    if len(greys) != len(curves):
        raise ValueError("need exactly one curve per frame")
    if background_model is not None:
        config = config.replace(background=background_model)

    def job(pair):
        grey, curve = pair
        return reconstruct_frame(grey, curve, config, bin_size, lam, prior)

    return parallel_map(job, zip(greys, curves))


def map_kymograph(results, imaging):
    rows = [(r.frame_index, r.frame_index * imaging.acquisition_time, r.basis.centres, r.phi) for r in results]
    return Kymograph.from_frames(rows, "map")


def truth_kymograph(curves, density, imaging, step=TRUTH_STEP):
    rows = []
    for c in curves:
        ell = truth_positions(c.length, step)
        rows.append((c.frame_index, c.frame_index * imaging.acquisition_time, ell, density(ell)))
    return Kymograph.from_frames(rows, "truth")


def maybe_fit_background(greys, config):
    """Background model from the stacks when there are enough frames, else the configured one."""
    greys = list(greys)
    if len(greys) >= 3:
        return fit_background(greys, config.camera, config.imaging)
    return config.background


# ------------------------------------------------------------------ sweeps

def _scored(data, rec):
    curve = data.curves[0]
    ell = truth_positions(curve.length)
    truth = data.density(ell)
    est = piecewise_values(rec.phi, rec.basis, ell)
    return ell, truth, est


def lambda_sweep(data, lambdas, bin_sizes=DEFAULT_BIN_SIZES, prior="laplace"):
    """l1 error (first frame) for every (bin size, lambda) pair."""
    curve, grey, config = data.curves[0], data.frames[0].grey, data.config
    rows = []
    for delta in bin_sizes:
        system = build_system(curve, delta, config.psf, config.imaging)

        def job(lam, delta=delta, system=system):
            rec = reconstruct_frame(grey, curve, config, delta, lam, prior, system=system, record=False)
            _, truth, est = _scored(data, rec)
            return {"bin_size_um": float(delta), "lambda": float(lam), "l1_error": l1_error(est, truth),
                    "jaccard": jaccard(half_max_support(est), half_max_support(truth)),
                    "n_iter": rec.diagnostics.n_iter, "converged": rec.diagnostics.converged}

        rows.extend(parallel_map(job, lambdas))
    return rows


def nn_error(data, frame=0):
    """l1 error of the affinely calibrated NN profile on the truth grid."""
    curve = data.curves[frame]
    ell = truth_positions(curve.length)
    truth = data.density(ell)
    raw = nn_profile(data.frames[frame].grey, curve, data.imaging, ell)
    return l1_error(calibrate_affine(raw, truth), truth)


def bin_sweep(curve, config, bin_sizes=DEFAULT_RCN_BIN_SIZES, quad_points=10):
    """RCN of ``H^T H`` and of ``H^T H + L^T L + I`` per bin size."""
    rows = []
    for delta in bin_sizes:
        H = build_system(curve, delta, config.psf, config.imaging, quad_points).H
        L = whitening_matrix(H.shape[1], dense=True)
        hth = H.T @ H
        rows.append({"bin_size_um": float(delta), "n_bases": H.shape[1], "rcn_hth": rcn(hth),
                     "rcn_ata": rcn(hth + L.T @ L + np.eye(H.shape[1]))})
    return rows


def psnr_sweep(geometry, photometry, config, psnrs, lambdas, bin_size=0.04, seed=None, prior="laplace"):
    """l1 error for every (PSNR, lambda) pair, one simulated stack per PSNR."""
    rows = []
    for p in psnrs:
        data = simulate_scenario(geometry, photometry, config, seed=seed, psnr=p)
        for r in lambda_sweep(data, lambdas, (bin_size,), prior):
            r.update({"psnr_db": float(p), "acquisition_s": data.imaging.acquisition_time})
            rows.append(r)
    return rows
