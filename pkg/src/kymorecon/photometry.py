"""Photometry along a curve: the piecewise-constant reconstruction space,
the comet and island parametric models, the first-order whitening matrix
and the innovation potentials."""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ._validation import DomainError, check_int, check_positive, check_vector
from .geometry import n_bins_for

PRIOR_FAMILIES = ("laplace", "gaussian")


@dataclass(frozen=True)
class BasisSpec:
    """Degree-0 B-spline basis of ``n_bases`` bins of width ``bin_size`` on [0, length]."""

    bin_size: float
    n_bases: int
    length: float

    def __post_init__(self):
        check_positive(self.bin_size, "bin_size")
        check_positive(self.length, "length")
        check_int(self.n_bases, "n_bases", minimum=1)
        if self.n_bases != n_bins_for(self.length, self.bin_size):
            raise ValueError("n_bases must equal ceil(length / bin_size)")

    @classmethod
    def for_length(cls, length, bin_size):
        return cls(float(bin_size), n_bins_for(length, bin_size), float(length))

    @property
    def edges(self):
        e = np.arange(self.n_bases + 1) * self.bin_size
        e[-1] = self.length
        return e

    @property
    def centres(self):
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    def bin_of(self, ell):
        ell = np.asarray(ell, dtype=float)
        tol = 1e-12 * max(1.0, self.length)
        if np.any(~np.isfinite(ell)) or np.any(ell < -tol) or np.any(ell > self.length + tol):
            raise DomainError(f"parameter outside [0, {self.length}]")
        idx = np.floor(np.clip(ell, 0.0, self.length) / self.bin_size).astype(int)
        return np.minimum(idx, self.n_bases - 1)


@dataclass(frozen=True, eq=False)
class PhotometryVector:
    """Digital intensities on the reconstruction grid, photons / s / um of curve."""

    values: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        v = check_vector(self.values, "values", nonnegative=True).copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


def eval_signal(phi, basis, ell):
    """Evaluate the piecewise-constant signal at curve parameter(s) ``ell``.

    Bins are right-open except the last, which also contains ``ell = length``.
    """
    values = phi.values if isinstance(phi, PhotometryVector) else np.asarray(phi, dtype=float)
    if values.shape[0] != basis.n_bases:
        raise ValueError("photometry length does not match the basis")
    return values[basis.bin_of(ell)]


def project_to_basis(func, basis, n_points=32):
    """Average a continuous density over each bin (midpoint-rule sub-sampling)."""
    edges = basis.edges
    t = (np.arange(n_points) + 0.5) / n_points
    ell = edges[:-1, None] + (edges[1:] - edges[:-1])[:, None] * t[None, :]
    return np.asarray(func(ell)).mean(axis=1)


@dataclass(frozen=True)
class CometParams:
    """Comet-shaped profile: Gaussian head, exponential tail towards ``ell = 0``."""

    mu: float = 4.0
    sigma: float = 0.3
    a: float = 300.0
    b: float = 0.2
    c: float = 0.6
    d: float = 20.0

    def __post_init__(self):
        for name in ("mu", "sigma", "a", "b", "c", "d"):
            check_positive(getattr(self, name), name)

    def as_array(self):
        return np.array([self.mu, self.sigma, self.a, self.b, self.c, self.d])


def comet_density(theta, ell):
    ell = np.asarray(ell, dtype=float)
    peak = theta.a / np.sqrt(2.0 * np.pi * theta.sigma**2)
    split = theta.mu - theta.b
    head = peak * np.exp(-0.5 * ((ell - theta.mu) / theta.sigma) ** 2)
    at_split = peak * np.exp(-0.5 * theta.b**2 / theta.sigma**2)
    # exponent <= 0 on the tail branch; clip so the unused branch cannot overflow
    tail = (at_split - theta.d) * np.exp(np.minimum(ell - split, 0.0) / theta.c) + theta.d
    return np.where(ell >= split, head, tail)


@dataclass(frozen=True)
class IslandParams:
    """Three constant islands on [0, a], [b, c] and [d, length]."""

    phi1: float = 600.0
    phi2: float = 400.0
    phi3: float = 800.0
    a: float = 1.0
    b: float = 2.5
    c: float = 3.0
    d: float = 4.5

    def __post_init__(self):
        for name in ("phi1", "phi2", "phi3"):
            check_positive(getattr(self, name), name, allow_zero=True)
        if not (0 <= self.a <= self.b <= self.c <= self.d):
            raise ValueError("island breakpoints must satisfy 0 <= a <= b <= c <= d")

    def as_array(self):
        return np.array([self.phi1, self.phi2, self.phi3, self.a, self.b, self.c, self.d])


def island_density(theta, ell):
    ell = np.asarray(ell, dtype=float)
    out = np.zeros_like(ell)
    out = np.where((ell >= theta.d), theta.phi3, out)
    out = np.where((ell >= theta.b) & (ell <= theta.c), theta.phi2, out)
    out = np.where((ell >= 0) & (ell <= theta.a), theta.phi1, out)
    return out


def whitening_matrix(n, dense=False):
    """First-order finite-difference operator with an identity first row.

    ``(L phi)[0] = phi[0]`` and ``(L phi)[p] = phi[p] - phi[p - 1]``.
    Returned as a CSR matrix unless ``dense`` is set.
    """
    n = check_int(n, "n", minimum=1)
    mat = sparse.diags([np.ones(n), -np.ones(n - 1)], [0, -1], shape=(n, n), format="csr")
    return mat.toarray() if dense else mat


@dataclass(frozen=True)
class InnovationPrior:
    family: str = "laplace"
    weight: float = 1.0

    def __post_init__(self):
        if self.family not in PRIOR_FAMILIES:
            raise ValueError(f"prior family must be one of {PRIOR_FAMILIES}, got {self.family!r}")
        check_positive(self.weight, "weight")


def prior_potential(u, prior):
    """Unnormalised potential: ``weight * |u|_1`` or ``weight * |u|_2^2``."""
    u = np.asarray(u, dtype=float)
    if prior.family == "laplace":
        return prior.weight * float(np.sum(np.abs(u)))
    return prior.weight * float(np.sum(u * u))
