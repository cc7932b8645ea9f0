"""MAP reconstruction of digital intensities under a Poisson likelihood and
a first-order innovation prior.

The objective for one frame is

    E(phi) = D(bg + H phi) / n_p  +  Phi(L phi) / N  +  indicator(phi >= 0)

with ``D`` the Poisson I-divergence. It is minimised by a fully split
alternating split Bregman scheme: the three terms are decoupled through
``w = bg * 1_BG + A phi`` with ``A = [H; L; I]``, giving one dense
least-squares solve (factorised once) and three closed-form proximal maps
per iteration.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg, sparse
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import SolverDivergenceError, check_int, check_positive, check_vector
from .photometry import InnovationPrior, prior_potential, whitening_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the split Bregman iteration.

    ``gamma=None`` picks the step from the data (see :func:`auto_gamma`);
    ``scale=None`` picks the internal intensity unit (see :func:`auto_scale`).
    Neither changes the minimiser, only the speed of convergence.
    """

    gamma: Optional[float] = None
    lam: float = 1.0
    max_iters: int = 5000
    rel_tol: float = 1e-6
    prior: str = "laplace"
    scale: Optional[float] = None

    def __post_init__(self):
        if self.gamma is not None:
            check_positive(self.gamma, "gamma")
        if self.scale is not None:
            check_positive(self.scale, "scale")
        check_positive(self.lam, "lam")
        check_int(self.max_iters, "max_iters", minimum=1)
        check_positive(self.rel_tol, "rel_tol")
        InnovationPrior(self.prior, self.lam)

    @property
    def innovation_prior(self):
        return InnovationPrior(self.prior, self.lam)


def neg_log_likelihood(rates, counts):
    """Normalised Poisson I-divergence ``mean(n log(n / lam) + lam - n)``.

    Counts may be non-integer; ``0 log 0`` is taken as 0.
    """
    rates = np.asarray(rates, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if np.any(~(rates > 0)):
        raise ValueError("expected counts must be > 0 to evaluate the likelihood")
    pos = counts > 0
    log_term = np.zeros_like(rates)
    log_term[pos] = counts[pos] * np.log(counts[pos] / rates[pos])
    return float(np.mean(log_term + rates - counts))


def map_objective(phi, H, counts, bg, L, prior):
    """Value of the normalised MAP energy at a nonnegative ``phi``."""
    phi = np.asarray(phi, dtype=float)
    nll = neg_log_likelihood(bg + H @ phi, counts)
    pot = prior_potential(L @ phi, prior) / phi.shape[0]
    return nll + pot, nll, pot


@dataclass(frozen=True, eq=False)
class StackedOperator:
    """``A = [H; L; I]`` with a Cholesky factorisation of ``A^T A``."""

    H: np.ndarray
    L: object
    gram: np.ndarray
    factor: tuple

    @property
    def n_bases(self):
        return self.gram.shape[0]

    @property
    def inverse(self):
        return linalg.cho_solve(self.factor, np.eye(self.n_bases))

    def apply(self, phi):
        return self.H @ phi, self.L @ phi, phi

    def adjoint(self, v1, v2, v3):
        return self.H.T @ v1 + self.L.T @ v2 + v3

    def solve(self, rhs):
        return linalg.cho_solve(self.factor, rhs)


def precompute_normal_inverse(H, L):
    """Factorise ``H^T H + L^T L + I`` once, outside the iteration loop."""
    H = np.asarray(H, dtype=float)
    Ld = L.toarray() if sparse.issparse(L) else np.asarray(L, dtype=float)
    if H.ndim != 2 or Ld.shape != (H.shape[1], H.shape[1]):
        raise ValueError("H and L have inconsistent shapes")
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(Ld))):
        raise ValueError("H and L must be finite")
    gram = H.T @ H + Ld.T @ Ld + np.eye(H.shape[1])
    gram = 0.5 * (gram + gram.T)
    L_op = L if sparse.issparse(L) else Ld
    return StackedOperator(H=H, L=L_op, gram=gram, factor=linalg.cho_factor(gram))


@dataclass
class SolverState:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    phi_ls: np.ndarray
    phi_p: np.ndarray
    iteration: int = 0

    @classmethod
    def initial(cls, n_pixels, n_bases, bg):
        zeros = np.zeros(n_bases)
        return cls(
            w1=np.full(n_pixels, float(bg)), w2=zeros.copy(), w3=zeros.copy(),
            b1=np.zeros(n_pixels), b2=zeros.copy(), b3=zeros.copy(),
            phi_ls=zeros.copy(), phi_p=zeros.copy(),
        )


def solve_least_squares(state, op, bg):
    """Normal-equation step ``phi = (A^T A)^-1 A^T (w - b - bg 1_BG)``."""
    rhs = op.adjoint(state.w1 - state.b1 - bg, state.w2 - state.b2, state.w3 - state.b3)
    return op.solve(rhs)


def likelihood_prox(s, counts, tau):
    """Positive root of ``w^2 + w (tau - s) - tau n = 0`` for each pixel.

    ``tau`` is ``gamma / n_p``. For ``n = 0`` the roots are ``{0, s - tau}``
    and the larger nonnegative one is returned.
    """
    s = np.asarray(s, dtype=float)
    counts = np.asarray(counts, dtype=float)
    p = s - tau
    disc = np.sqrt(p * p + 4.0 * tau * counts)
    # for p < 0 use the cancellation-free form of the same root
    with np.errstate(divide="ignore", invalid="ignore"):
        alt = 2.0 * tau * counts / (disc - p)
    root = np.where(p >= 0, 0.5 * (p + disc), alt)
    return np.where(counts > 0, root, np.maximum(p, 0.0))


def innovation_prox(v, family, threshold):
    """Proximal map of ``threshold * potential``: soft threshold or shrinkage."""
    v = np.asarray(v, dtype=float)
    if family == "laplace":
        return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)
    if family == "gaussian":
        return v / (1.0 + 2.0 * threshold)
    raise ValueError(f"unknown prior family {family!r}")


def positivity_project(v):
    return np.maximum(np.asarray(v, dtype=float), 0.0)


@dataclass
class Diagnostics:
    """Per-iteration trace of a MAP run."""

    objective: List[float] = field(default_factory=list)
    nll: List[float] = field(default_factory=list)
    prior: List[float] = field(default_factory=list)
    constraint_residual: List[float] = field(default_factory=list)
    phi_rel_change: List[float] = field(default_factory=list)
    converged: bool = False
    initial_objective: float = float("nan")
    n_iter: int = 0
    gamma: float = float("nan")
    scale: float = float("nan")

    def append(self, objective, nll, prior, residual, change):
        self.objective.append(float(objective))
        self.nll.append(float(nll))
        self.prior.append(float(prior))
        self.constraint_residual.append(float(residual))
        self.phi_rel_change.append(float(change))

    @property
    def final_objective(self):
        return self.objective[-1]

    def rows(self):
        """(iter, objective, nll, prior, residual, change) tuples, as recorded."""
        first = self.n_iter - len(self.objective) + 1
        for i in range(len(self.objective)):
            yield (first + i, self.objective[i], self.nll[i], self.prior[i],
                   self.constraint_residual[i], self.phi_rel_change[i])


# rows of H whose largest entry is below this fraction of max(H) are
# decoupled from phi and handled in closed form
PRUNE_RTOL = 1e-12
# likelihood step relative to the mean photon count of the coupled pixels
_AUTO_TAU_FACTOR = 0.1


def auto_scale(H):
    """Intensity unit giving the largest column of ``H * scale`` unit norm."""
    norm = float(np.linalg.norm(H, axis=0).max()) if H.size else 0.0
    return 1.0 / norm if norm > 0 else 1.0


def auto_gamma(counts, bg, n_pixels):
    """Step ``gamma`` such that ``gamma / n_p`` tracks the typical photon count."""
    typical = max(float(np.mean(counts)) if counts.size else 0.0, bg)
    return _AUTO_TAU_FACTOR * typical * n_pixels


def _divergence_terms(rates, counts):
    pos = counts > 0
    out = rates - counts
    out[pos] += counts[pos] * np.log(counts[pos] / rates[pos])
    return out


def run_map(counts, H, bg, L=None, config=None, record=True):
    """Solve the MAP problem for one frame.

    Parameters
    ----------
    counts : array of shape (n_p,)
        Photon counts, possibly non-integer after grey-value conversion.
    H : array of shape (n_p, N)
        System matrix of the frame.
    bg : float
        Integrated background (photons per pixel), strictly positive.
    L : matrix, optional
        Whitening operator; defaults to first-order differences.
    config : SolverConfig, optional
    record : bool
        Evaluate the objective and residuals at every iteration. The final
        values are always recorded.

    Returns
    -------
    phi : ndarray of shape (N,)
        The projected iterate, nonnegative.
    diag : Diagnostics
    """
    config = config or SolverConfig()
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise ValueError("H must be a 2-D array")
    n_p, n_b = H.shape
    counts = check_vector(counts, "counts", length=n_p, nonnegative=True)
    check_positive(bg, "bg")
    if L is None:
        L = whitening_matrix(n_b)
    prior = config.innovation_prior

    hmax = float(H.max()) if H.size else 0.0
    active = H.max(axis=1) > PRUNE_RTOL * hmax if hmax > 0 else np.ones(n_p, dtype=bool)
    n_act = counts[active]
    # pixels decoupled from phi sit at rate bg; their divergence is a constant
    idle_term = float(np.sum(_divergence_terms(np.full(n_p - active.sum(), bg), counts[~active])))

    scale = config.scale if config.scale is not None else auto_scale(H)
    gamma = config.gamma if config.gamma is not None else auto_gamma(n_act, bg, n_p)
    Hs = H[active] * scale
    op = precompute_normal_inverse(Hs, L)
    tau = gamma / n_p
    if prior.family == "laplace":
        thresh = gamma * config.lam * scale / n_b
    else:
        thresh = gamma * config.lam * scale**2 / n_b

    def energy(psi, h_psi):
        nll = (float(np.sum(_divergence_terms(bg + h_psi, n_act))) + idle_term) / n_p
        pot = prior_potential(L @ (psi * scale), prior) / n_b
        return nll + pot, nll, pot

    state = SolverState.initial(Hs.shape[0], n_b, bg)
    diag = Diagnostics(gamma=gamma, scale=scale)
    diag.initial_objective = energy(state.phi_p, np.zeros(Hs.shape[0]))[0]
    change = float("inf")
    for it in range(1, config.max_iters + 1):
        phi_ls = solve_least_squares(state, op, bg)
        h_phi, l_phi, _ = op.apply(phi_ls)
        w1 = likelihood_prox(state.b1 + bg + h_phi, n_act, tau)
        w2 = innovation_prox(state.b2 + l_phi, prior.family, thresh)
        w3 = positivity_project(state.b3 + phi_ls)
        r1 = bg + h_phi - w1
        r2 = l_phi - w2
        r3 = phi_ls - w3
        state.b1 += r1
        state.b2 += r2
        state.b3 += r3
        prev = state.phi_p
        state.w1, state.w2, state.w3 = w1, w2, w3
        state.phi_ls, state.phi_p, state.iteration = phi_ls, w3, it
        if not (np.all(np.isfinite(w3)) and np.all(np.isfinite(state.b1)) and np.all(np.isfinite(state.b2))):
            raise SolverDivergenceError(it)
        change = float(np.linalg.norm(w3 - prev) / max(np.linalg.norm(prev), 1e-12))
        diag.n_iter = it
        done = it > 1 and change < config.rel_tol
        if record or done or it == config.max_iters:
            res = np.sqrt(r1 @ r1 + r2 @ r2 + r3 @ r3)
            wn = np.sqrt(w1 @ w1 + w2 @ w2 + w3 @ w3)
            obj, nll, pot = energy(w3, Hs @ w3)
            diag.append(obj, nll, pot, res / (1.0 + wn), change)
        if done:
            diag.converged = True
            break
    logger.debug("MAP stopped after %d iterations (converged=%s)", state.iteration, diag.converged)
    return state.phi_p * scale, diag


class MAPKymograph(BaseEstimator):
    """Estimator wrapper around :func:`run_map` for a single frame.

    ``fit(H, counts, background=bg)`` treats the system matrix as the design
    matrix and photon counts as the response; ``coef_`` holds the digital
    intensities and ``predict(H)`` returns expected photon counts.

    Parameters
    ----------
    prior : {"laplace", "gaussian"}
    lam : float
        Regularisation weight.
    gamma : float or None
        Bregman penalty step; ``None`` derives it from the data.
    max_iter : int
    tol : float
        Relative change of the projected iterate used as stopping rule.
    """

    def __init__(self, prior="laplace", lam=1.0, gamma=None, max_iter=5000, tol=1e-6):
        self.prior = prior
        self.lam = lam
        self.gamma = gamma
        self.max_iter = max_iter
        self.tol = tol

    def _config(self):
        return SolverConfig(gamma=self.gamma, lam=self.lam, max_iters=self.max_iter,
                            rel_tol=self.tol, prior=self.prior)

    def fit(self, H, counts, background=None):
        H = np.asarray(H, dtype=float)
        if H.ndim != 2:
            raise ValueError("H must be a 2-D array")
        if background is None:
            raise ValueError("background (integrated, photons per pixel) is required")
        coef, diag = run_map(counts, H, float(background), config=self._config())
        self.coef_ = coef
        self.background_ = float(background)
        self.diagnostics_ = diag
        self.n_iter_ = diag.n_iter
        self.n_features_in_ = H.shape[1]
        return self

    def predict(self, H):
        check_is_fitted(self, "coef_")
        return self.background_ + np.asarray(H, dtype=float) @ self.coef_

    def score(self, H, counts):
        """Negative normalised I-divergence of the fitted rates (higher is better)."""
        return -neg_log_likelihood(self.predict(H), counts)
