"""Reference methods the MAP reconstruction is compared against.

* nearest-neighbour kymographs read straight from the grey stacks,
* parametric maximum-likelihood fits of the comet and island models,
  driven by a small CMA-ES,
* the exponential photobleaching fit of the background rate.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_positive, check_vector
from .microscope import BackgroundModel, grey_to_photons
from .photometry import CometParams, IslandParams, comet_density, island_density, project_to_basis
from .solver import neg_log_likelihood

logger = logging.getLogger(__name__)

KYMOGRAPH_KINDS = ("nn", "map", "ml", "truth")


@dataclass(frozen=True, eq=False)
class Kymograph:
    """Long-format kymograph: one row per (frame, sample) pair."""

    frame: np.ndarray
    time: np.ndarray
    arc_length: np.ndarray
    intensity: np.ndarray
    kind: str
    clamped: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in KYMOGRAPH_KINDS:
            raise ValueError(f"kind must be one of {KYMOGRAPH_KINDS}, got {self.kind!r}")
        frame = np.asarray(self.frame, dtype=np.int64)
        n = frame.shape[0]
        cols = {
            "frame": frame,
            "time": check_vector(self.time, "time", length=n),
            "arc_length": check_vector(self.arc_length, "arc_length", length=n),
            "intensity": check_vector(self.intensity, "intensity", length=n),
        }
        clamped = np.zeros(n, dtype=bool) if self.clamped is None else np.asarray(self.clamped, dtype=bool)
        if clamped.shape != (n,):
            raise ValueError("clamped flags must have one entry per row")
        cols["clamped"] = clamped
        if self.kind != "nn" and np.any(cols["intensity"] < 0):
            raise ValueError(f"{self.kind} kymograph intensities must be nonnegative")
        for f in np.unique(frame):
            ell = cols["arc_length"][frame == f]
            if np.any(np.diff(ell) <= 0):
                raise ValueError(f"arc length must increase strictly within frame {f}")
        for name, value in cols.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_frames(cls, frames, kind):
        """Build from an iterable of ``(frame_index, time_s, ell, values)``."""
        parts = [(np.full(len(e), f), np.full(len(e), t), np.asarray(e, float), np.asarray(v, float))
                 for f, t, e, v in frames]
        if not parts:
            raise ValueError("a kymograph needs at least one frame")
        return cls(*(np.concatenate(c) for c in zip(*parts)), kind=kind)

    def __len__(self):
        return self.frame.shape[0]

    @property
    def frames(self):
        return np.unique(self.frame)

    def frame_values(self, frame_index):
        sel = self.frame == frame_index
        return self.arc_length[sel], self.intensity[sel]

    def as_matrix(self):
        """Intensities as a (samples, frames) array, NaN-padded for short frames."""
        frames = self.frames
        cols = [self.frame_values(f)[1] for f in frames]
        out = np.full((max(len(c) for c in cols), len(frames)), np.nan)
        for j, c in enumerate(cols):
            out[: len(c), j] = c
        return out

    def same_rows(self, other):
        return (self.kind == other.kind and len(self) == len(other)
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("frame", "time", "arc_length", "intensity")))


# ---------------------------------------------------------------- NN sampling

def nearest_pixel_index(points, imaging):
    """Nearest pixel centre of each 3-D point as (slice, row, col), plus a clamp flag.

    Equidistant ties go to the lower index on every axis, which is the lowest
    linear (z, y, x raster) index overall.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    steps = np.array([imaging.pixel_size, imaging.pixel_size, imaging.z_spacing])
    sizes = np.array([imaging.n_cols, imaging.n_rows, imaging.n_slices])
    # centre i sits at (i + 1/2) * step; ceil(u - 1) is the nearest one, lower on ties
    raw = np.ceil(pts / steps - 1.0).astype(np.int64)
    idx = np.clip(raw, 0, sizes - 1)
    clamped = np.any(idx != raw, axis=1)
    return idx[:, ::-1], clamped


def nn_sample_positions(length, sample_spacing):
    check_positive(sample_spacing, "sample_spacing")
    n = int(np.floor(length / sample_spacing + 1e-9)) + 1
    return np.arange(n) * sample_spacing


def nn_kymograph(greys, curves, imaging, sample_spacing=None):
    """Nearest-neighbour kymograph from raw grey stacks.

    ``greys[f]`` is the stack of frame ``f`` with shape ``imaging.shape`` and
    ``curves[f]`` its geometry. Samples are taken every ``sample_spacing`` um
    (one pixel by default) from ``ell = 0``. Points falling outside the
    imaging volume read the nearest boundary pixel and are flagged in
    ``Kymograph.clamped``.
    """
    greys = list(greys)
    curves = list(curves)
    if len(greys) != len(curves):
        raise ValueError("need exactly one curve per frame")
    spacing = imaging.pixel_size if sample_spacing is None else sample_spacing
    rows = []
    flags = []
    for f, (stack, curve) in enumerate(zip(greys, curves)):
        stack = np.asarray(stack)
        if stack.shape != imaging.shape:
            raise ValueError(f"frame {f}: stack shape {stack.shape} != {imaging.shape}")
        ell = nn_sample_positions(curve.length, spacing)
        idx, clamped = nearest_pixel_index(curve.embed(ell), imaging)
        values = stack[idx[:, 0], idx[:, 1], idx[:, 2]].astype(float)
        frame = getattr(curve, "frame_index", f)
        rows.append((frame, frame * imaging.acquisition_time, ell, values))
        flags.append(clamped)
    kymo = Kymograph.from_frames(rows, "nn")
    object.__setattr__(kymo, "clamped", np.concatenate(flags))
    kymo.clamped.setflags(write=False)
    if kymo.clamped.any():
        logger.warning("%d NN samples fell outside the imaging volume", int(kymo.clamped.sum()))
    return kymo


# ----------------------------------------------------------------- CMA-ES

@dataclass
class CMAResult:
    x: np.ndarray
    fun: float
    nfev: int
    best_history: list
    message: str


def _mirror(z):
    """Fold points back into the unit box by reflection at its faces."""
    z = np.mod(z, 2.0)
    return np.where(z > 1.0, 2.0 - z, z)


def cmaes_minimize(fun, x0, bounds, sigma0=0.3, budget=2000, popsize=None, seed=0, tol=1e-12):
    """Minimise ``fun`` over a box with a (mu/mu_w, lambda) CMA-ES.

    The search runs in coordinates normalised to the unit box; infeasible
    samples are mirrored back inside. ``x0`` is always evaluated first, so
    the returned value never exceeds ``fun(x0)``. ``best_history`` holds
    the best-so-far value after every evaluation.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in zip(*bounds))
    if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)) or np.any(hi <= lo):
        raise ValueError("bounds must be finite with lower < upper")
    check_int(budget, "budget", minimum=1)
    n = lo.shape[0]
    span = hi - lo
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (n,) or np.any(x0 < lo) or np.any(x0 > hi):
        raise ValueError("x0 must lie inside the bounds")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def to_x(z):
        return lo + span * z

    lam = popsize or 4 + int(3 * np.log(n))
    mu = lam // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w**2)
    cs = (mueff + 2) / (n + mueff + 5)
    ds = 1 + 2 * max(0.0, np.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    mean = (x0 - lo) / span
    sigma = float(sigma0)
    C = np.eye(n)
    B, D = np.eye(n), np.ones(n)
    ps, pc = np.zeros(n), np.zeros(n)

    best_f = float(fun(x0))
    best_z = mean.copy()
    history = [best_f]
    nfev, gen = 1, 0
    message = "budget exhausted"
    while nfev < budget:
        k = min(lam, budget - nfev)
        y = (rng.standard_normal((k, n)) * D) @ B.T
        z = _mirror(mean + sigma * y)
        f = np.empty(k)
        for i in range(k):
            f[i] = fun(to_x(z[i]))
            nfev += 1
            if f[i] < best_f:
                best_f, best_z = float(f[i]), z[i].copy()
            history.append(best_f)
        if k < lam:
            break
        gen += 1
        order = np.argsort(f)[:mu]
        # steps are recomputed from the mirrored samples so the update sees feasible points
        ysel = (z[order] - mean) / sigma
        old = mean
        mean = mean + sigma * (w @ ysel)
        yw = (mean - old) / sigma
        inv_sqrt = B @ np.diag(1.0 / D) @ B.T
        ps = (1 - cs) * ps + np.sqrt(cs * (2 - cs) * mueff) * (inv_sqrt @ yw)
        hsig = np.linalg.norm(ps) / np.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * np.sqrt(cc * (2 - cc) * mueff) * yw
        C = ((1 - c1 - cmu) * C
             + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * C)
             + cmu * (ysel.T * w) @ ysel)
        sigma *= np.exp((cs / ds) * (np.linalg.norm(ps) / chi_n - 1))
        C = 0.5 * (C + C.T)
        evals, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(evals, 1e-300))
        if sigma * D.max() < tol:
            message = "step size below tolerance"
            break
        if np.ptp(f) == 0 and sigma * D.max() < 1e-6:
            message = "flat fitness"
            break
    return CMAResult(to_x(best_z), best_f, nfev, history, message)


# ----------------------------------------------------------- parametric ML

PARAMETRIC_MODELS = ("pm1", "pm2")


def model_density(model, theta):
    """Density callable for a model name and raw parameter vector.

    For ``pm2`` the four breakpoints are sorted, which keeps every point of
    the search box feasible.
    """
    theta = np.asarray(theta, dtype=float)
    if model == "pm1":
        params = CometParams(*theta)
        return lambda ell: comet_density(params, ell)
    if model == "pm2":
        params = IslandParams(*theta[:3], *np.sort(theta[3:]))
        return lambda ell: island_density(params, ell)
    raise ValueError(f"model must be one of {PARAMETRIC_MODELS}, got {model!r}")


def default_bounds(model, length, max_intensity=2000.0):
    """Positive boxes; intensities in photons / s / um, lengths in um.

    The comet shape parameters are capped at micrometre scale: with an
    unbounded head-to-tail offset the fit can collapse onto a pure
    Gaussian, which is a wide and shallow local minimum.
    """
    if model == "pm1":
        return [(0.0, length), (0.02, 1.0), (1.0, 2.0 * max_intensity),
                (0.01, 1.0), (0.01, 2.0), (0.1, max_intensity)]
    if model == "pm2":
        return [(0.0, max_intensity)] * 3 + [(0.0, length)] * 4
    raise ValueError(f"model must be one of {PARAMETRIC_MODELS}, got {model!r}")


def default_start(model, bounds):
    lo, hi = (np.asarray(b, dtype=float) for b in zip(*bounds))
    x0 = 0.5 * (lo + hi)
    if model == "pm2":
        x0[3:] = lo[3:] + (hi[3:] - lo[3:]) * np.arange(1, 5) / 5.0
    return x0


@dataclass
class ParametricFit:
    model: str
    params: np.ndarray
    nll: float
    initial_nll: float
    nfev: int
    best_history: list

    def density(self):
        return model_density(self.model, self.params)


def parametric_ml_fit(model, counts, system, bg, bounds=None, x0=None, budget=2000, seed=0,
                      sigma0=0.3, n_points=8, n_restarts=2):
    """Fit ``pm1`` or ``pm2`` to one frame of photon counts.

    ``system`` is a :class:`~kymorecon.microscope.SystemMatrices` on a fine
    basis; the model density is averaged over each of its bins before being
    pushed through ``H``, so the fit resolves features down to the bin width.

    Without ``x0`` the search starts from the box centre, with the comet
    peak placed at the maximum of the background-subtracted back-projection
    of the counts. ``n_restarts`` extra runs start from uniform random
    points of the box; each run gets its own ``budget`` and the best is kept.
    """
    if model not in PARAMETRIC_MODELS:
        raise ValueError(f"model must be one of {PARAMETRIC_MODELS}, got {model!r}")
    basis = system.basis
    bounds = default_bounds(model, basis.length) if bounds is None else [tuple(map(float, b)) for b in bounds]
    expected = 6 if model == "pm1" else 7
    if len(bounds) != expected:
        raise ValueError(f"{model} needs {expected} bounds, got {len(bounds)}")
    for name_lo, name_hi in bounds:
        if not (np.isfinite(name_lo) and np.isfinite(name_hi)) or name_hi <= name_lo:
            raise ValueError("each bound must be a finite (lower, upper) pair with lower < upper")
    lows = np.array([b[0] for b in bounds])
    if model == "pm1" and np.any(lows[1:] <= 0):
        raise ValueError("pm1 shape parameters need strictly positive lower bounds")
    if np.any(lows < 0):
        raise ValueError("parameter bounds must be nonnegative")
    check_positive(bg, "bg")
    counts = check_vector(counts, "counts", length=system.n_pixels, nonnegative=True)

    H = system.H
    active = H.max(axis=1) > 1e-12 * H.max()
    Ha, na = H[active], counts[active]
    # pixels the curve cannot reach contribute a theta-independent constant
    idle = neg_log_likelihood(np.full((~active).sum(), bg), counts[~active]) * (~active).sum() if (~active).any() else 0.0
    n_p = counts.shape[0]

    def nll(theta):
        try:
            phi = project_to_basis(model_density(model, theta), basis, n_points)
        except ValueError:
            return np.inf
        return (neg_log_likelihood(bg + Ha @ phi, na) * na.shape[0] + idle) / n_p

    if x0 is None:
        start = default_start(model, bounds)
        if model == "pm1":
            back = (Ha.T @ (na - bg)) / np.maximum(Ha.sum(axis=0), 1e-300)
            start[0] = np.clip(basis.centres[int(np.argmax(back))], bounds[0][0], bounds[0][1])
    else:
        start = np.asarray(x0, dtype=float)
    rng = np.random.default_rng(seed)
    hi = np.array([b[1] for b in bounds])
    res = cmaes_minimize(nll, start, bounds, sigma0=sigma0, budget=budget, seed=rng)
    initial, nfev, history = res.best_history[0], res.nfev, list(res.best_history)
    for _ in range(n_restarts):
        trial = cmaes_minimize(nll, lows + (hi - lows) * rng.uniform(size=hi.shape), bounds,
                               sigma0=sigma0, budget=budget, seed=rng)
        nfev += trial.nfev
        history.extend(min(history[-1], v) for v in trial.best_history)
        if trial.fun < res.fun:
            res = trial
    params = res.x.copy()
    if model == "pm2":
        params[3:] = np.sort(params[3:])
    logger.info("%s fit: nll %.6g -> %.6g in %d evaluations", model, initial, res.fun, nfev)
    return ParametricFit(model, params, res.fun, initial, nfev, history)


# ----------------------------------------------------------- background

class ExponentialBackground(RegressorMixin, BaseEstimator):
    """Least-squares fit of ``rate(t) = amplitude * exp(-decay_rate * t) + offset``.

    For a fixed decay rate the model is linear in (amplitude, offset), so
    those are solved by nonnegative least squares and only the decay rate is
    searched (a log grid followed by a bounded scalar refinement). Decay
    rate zero is the constant model, so the fit is never worse than the
    best constant.

    Parameters
    ----------
    max_decay : float or None
        Upper end of the decay-rate search; defaults to 50 over the time span.
    n_grid : int
        Grid points for the initial decay-rate scan.
    """

    def __init__(self, max_decay=None, n_grid=200):
        self.max_decay = max_decay
        self.n_grid = n_grid

    @staticmethod
    def _linear_part(t, r, k):
        design = np.column_stack([np.exp(-k * t), np.ones_like(t)])
        coef, res = optimize.nnls(design, r)
        return coef, res * res

    def fit(self, t, rates):
        t = check_vector(t, "t")
        r = check_vector(rates, "rates", length=t.shape[0])
        if t.shape[0] < 3:
            raise ValueError("at least 3 frames are needed to fit a background decay")
        span = float(np.ptp(t))
        if span <= 0:
            raise ValueError("frame times must not all coincide")
        t0 = t - t.min()
        k_max = 50.0 / span if self.max_decay is None else check_positive(self.max_decay, "max_decay")
        const_res = float(np.sum((r - r.mean()) ** 2))

        grid = np.concatenate([[0.0], np.geomspace(k_max * 1e-4, k_max, self.n_grid)])
        sse = np.array([self._linear_part(t0, r, k)[1] for k in grid])
        i = int(np.argmin(sse))
        k = grid[i]
        if 0 < i < len(grid) - 1:
            sol = optimize.minimize_scalar(lambda kk: self._linear_part(t0, r, kk)[1],
                                           bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                                           options={"xatol": 1e-10 * k_max})
            if sol.fun <= sse[i]:
                k = float(sol.x)
        (a, c), best = self._linear_part(t0, r, k)
        if k == 0.0 or best >= const_res * (1 - 1e-12) or a == 0.0:
            k, a, c, best = 0.0, 0.0, float(max(r.mean(), 0.0)), const_res
        # shift the amplitude back from t0 = t - min(t) to absolute time
        self.decay_rate_ = float(k)
        self.amplitude_ = float(a * np.exp(k * t.min()))
        self.offset_ = float(c)
        self.residual_ = float(best)
        self.constant_residual_ = const_res
        self.n_features_in_ = 1
        return self

    def predict(self, t):
        check_is_fitted(self, "decay_rate_")
        t = np.asarray(t, dtype=float)
        return self.amplitude_ * np.exp(-self.decay_rate_ * t) + self.offset_

    def to_model(self):
        check_is_fitted(self, "decay_rate_")
        return BackgroundModel(self.amplitude_, self.decay_rate_, self.offset_)


def stack_background_rates(greys, camera, imaging):
    """Mean photon rate per unit area of each grey stack, photons / s / um^2."""
    greys = list(greys)
    scale = imaging.pixel_area * imaging.acquisition_time
    return np.array([grey_to_photons(camera, g).mean() / scale for g in greys])


def fit_background(greys, camera, imaging, frame_indices=None):
    """Exponential photobleaching model from a sequence of grey stacks."""
    greys = list(greys)
    if len(greys) < 3:
        raise ValueError("at least 3 frames are needed to fit a background decay")
    idx = np.arange(len(greys)) if frame_indices is None else np.asarray(frame_indices, dtype=float)
    rates = stack_background_rates(greys, camera, imaging)
    return ExponentialBackground().fit(idx * imaging.acquisition_time, rates).to_model()
