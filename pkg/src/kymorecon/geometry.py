"""Curve geometry: embeddings of a 1-D parameter space into 3-D, and the
quadrature-based virtual point sources that discretise line integrals
along a curve.

All lengths are in micrometres.
"""

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss

from ._validation import DomainError, check_int, check_point, check_positive

_ARC_LENGTH_PANELS = 64
_ARC_LENGTH_NODES = 8
# absorbs round-off in ell = Lambda when comparing against the domain end
_DOMAIN_SLACK = 1e-12


def _check_domain(ell, length):
    ell = np.asarray(ell, dtype=float)
    tol = _DOMAIN_SLACK * max(1.0, length)
    if np.any(~np.isfinite(ell)) or np.any(ell < -tol) or np.any(ell > length + tol):
        raise DomainError(f"parameter outside [0, {length}]")
    return np.clip(ell, 0.0, length)


@dataclass(frozen=True)
class LineCurve:
    """Straight segment ``origin + direction * ell`` for ``ell`` in ``[0, length]``.

    The parameterisation is by arc length, so the metric is identically one.
    """

    origin: Tuple[float, float, float]
    direction: Tuple[float, float, float]
    length: float
    frame_index: int = 0
    kind: str = field(default="line", init=False)

    def __post_init__(self):
        origin = check_point(self.origin, "origin")
        direction = check_point(self.direction, "direction")
        if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
            raise ValueError("direction must be a unit vector")
        check_positive(self.length, "length")
        check_int(self.frame_index, "frame_index", minimum=0)
        object.__setattr__(self, "origin", tuple(origin.tolist()))
        object.__setattr__(self, "direction", tuple(direction.tolist()))
        object.__setattr__(self, "length", float(self.length))

    @classmethod
    def from_endpoints(cls, start, end, frame_index=0):
        start = check_point(start, "start")
        delta = check_point(end, "end") - start
        length = float(np.linalg.norm(delta))
        return cls(tuple(start), tuple(delta / length), length, frame_index)

    def embed(self, ell):
        ell = _check_domain(ell, self.length)
        return np.asarray(self.origin) + np.multiply.outer(ell, np.asarray(self.direction))

    def metric(self, ell):
        ell = _check_domain(ell, self.length)
        return np.ones_like(ell)


def _bspline_segment(u):
    """Segment index and local coordinate for natural parameter ``u`` in [0, 1]."""
    s = 2.0 * np.asarray(u, dtype=float)
    j = np.minimum(np.floor(s), 1.0).astype(int)
    return j, s - j


@dataclass(frozen=True)
class SplineCurve:
    """Uniform quadratic B-spline over four control points.

    The natural parameter ``u`` in [0, 1] spans the two polynomial pieces.
    The curve parameter is ``ell = length * u`` where ``length`` is the
    numerically integrated arc length, so ``ell`` ranges over ``[0, length]``
    but is not an arc-length parameter in general.
    """

    control_points: Tuple[Tuple[float, float, float], ...]
    frame_index: int = 0
    kind: str = field(default="quadratic-spline", init=False)
    length: float = field(default=0.0, init=False)

    def __post_init__(self):
        pts = [check_point(p, "control point") for p in self.control_points]
        if len(pts) != 4:
            raise ValueError(f"a quadratic spline needs exactly 4 control points, got {len(pts)}")
        check_int(self.frame_index, "frame_index", minimum=0)
        object.__setattr__(self, "control_points", tuple(tuple(p.tolist()) for p in pts))
        length = self._arc_length()
        if not length > 0:
            raise ValueError("spline has zero arc length")
        object.__setattr__(self, "length", length)

    @property
    def _cp(self):
        return np.asarray(self.control_points)

    def point_at(self, u):
        """Evaluate the spline at natural parameter(s) ``u``."""
        j, t = _bspline_segment(u)
        cp = self._cp
        b0 = 0.5 * (1.0 - t) ** 2
        b1 = 0.5 + t - t * t
        b2 = 0.5 * t * t
        return b0[..., None] * cp[j] + b1[..., None] * cp[j + 1] + b2[..., None] * cp[j + 2]

    def derivative_at(self, u):
        """Derivative with respect to the natural parameter ``u``."""
        j, t = _bspline_segment(u)
        cp = self._cp
        # d/dt of the three blending functions, times ds/du = 2
        d0 = t - 1.0
        d1 = 1.0 - 2.0 * t
        d2 = t
        return 2.0 * (d0[..., None] * cp[j] + d1[..., None] * cp[j + 1] + d2[..., None] * cp[j + 2])

    def _arc_length(self):
        x, w = leggauss(_ARC_LENGTH_NODES)
        edges = np.linspace(0.0, 1.0, _ARC_LENGTH_PANELS + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        u = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        weights = (half[:, None] * w[None, :]).ravel()
        speed = np.linalg.norm(self.derivative_at(u), axis=-1)
        return float(np.sum(weights * speed))

    def embed(self, ell):
        ell = _check_domain(ell, self.length)
        return self.point_at(ell / self.length)

    def metric(self, ell):
        ell = _check_domain(ell, self.length)
        return np.linalg.norm(self.derivative_at(ell / self.length), axis=-1) / self.length


Curve = Union[LineCurve, SplineCurve]


def embed_point(curve, ell):
    """Map curve parameter(s) ``ell`` to 3-D physical coordinates."""
    return curve.embed(ell)


def metric(curve, ell):
    """Riemannian metric ``|d gamma / d ell|`` of the embedding at ``ell``."""
    return curve.metric(ell)


def n_bins_for(length, bin_size):
    """Number of degree-0 basis functions covering ``[0, length]``."""
    ratio = length / bin_size
    n = int(np.ceil(ratio - 1e-9 * max(1.0, ratio)))
    return max(n, 1)


@dataclass(frozen=True, eq=False)
class VirtualSources:
    """Quadrature nodes on a curve and their integration weights.

    ``weights`` already include the metric, so that
    ``sum(weights * f(positions))`` approximates ``int f(ell) m(ell) d ell``.
    """

    positions: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    bin_index: np.ndarray
    bin_size: float
    n_bins: int
    length: float

    def __post_init__(self):
        for name in ("positions", "weights", "points", "bin_index"):
            getattr(self, name).setflags(write=False)

    def __len__(self):
        return self.positions.shape[0]

    def bin_weight_sums(self):
        return np.bincount(self.bin_index, weights=self.weights, minlength=self.n_bins)


def build_virtual_sources(curve, bin_size, quad_points_per_bin=10):
    """Place Gauss-Legendre nodes in every bin of width ``bin_size`` along ``curve``.

    The last bin is shortened when the curve length is not a multiple of
    ``bin_size``; its quadrature rule is rescaled to the actual width.
    """
    check_positive(bin_size, "bin_size")
    check_int(quad_points_per_bin, "quad_points_per_bin", minimum=1)
    length = curve.length
    n_bins = n_bins_for(length, bin_size)
    lo = np.arange(n_bins) * bin_size
    hi = np.minimum(lo + bin_size, length)
    hi[-1] = length
    x, w = leggauss(quad_points_per_bin)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    positions = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    qweights = (half[:, None] * w[None, :]).ravel()
    positions = np.clip(positions, 0.0, length)
    weights = curve.metric(positions) * qweights
    points = curve.embed(positions)
    bin_index = np.repeat(np.arange(n_bins), quad_points_per_bin)
    return VirtualSources(
        positions=positions,
        weights=weights,
        points=np.ascontiguousarray(points),
        bin_index=bin_index,
        bin_size=float(bin_size),
        n_bins=n_bins,
        length=length,
    )
