"""Forward model of the virtual microscope.

A curve carrying a fluorescence density is imaged through a Gaussian PSF
onto a stack of pixel planes. Expected photon counts are affine in the
digital intensities, ``lam = bg * 1 + H @ phi``, with the system matrix
``H = Psi diag(w_bar) B^T`` folding pixel area, acquisition time, metric
and quadrature weights into its columns.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_int, check_positive, check_vector
from .geometry import build_virtual_sources
from .photometry import BasisSpec, PhotometryVector

# 65535 is the largest value a u16 grey stack can hold
_GREY_MAX = np.iinfo(np.uint16).max


@dataclass(frozen=True)
class PsfModel:
    """Anisotropic 3-D Gaussian PSF normalised to unit mass.

    ``cutoff`` (in standard deviations, per axis) truncates the kernel to a
    box; ``None`` keeps it untruncated.
    """

    sigma_xy: float = 0.130
    sigma_z: float = 0.255
    cutoff: Optional[float] = None

    def __post_init__(self):
        check_positive(self.sigma_xy, "sigma_xy")
        check_positive(self.sigma_z, "sigma_z")
        if self.cutoff is not None:
            check_positive(self.cutoff, "cutoff")

    @property
    def norm_const(self):
        return (8.0 * np.pi**3 * self.sigma_xy**4 * self.sigma_z**2) ** -0.5

    def factor(self, d, sigma):
        """One separable 1-D factor ``exp(-d^2 / (2 sigma^2))`` with truncation."""
        r = np.asarray(d, dtype=float) / sigma
        g = np.exp(-0.5 * r * r)
        if self.cutoff is not None:
            g = np.where(np.abs(r) > self.cutoff, 0.0, g)
        return g


def psf_eval(psf, dx):
    """PSF density (um^-3) at offset(s) ``dx`` of shape (..., 3)."""
    dx = np.asarray(dx, dtype=float)
    return (
        psf.norm_const
        * psf.factor(dx[..., 0], psf.sigma_xy)
        * psf.factor(dx[..., 1], psf.sigma_xy)
        * psf.factor(dx[..., 2], psf.sigma_z)
    )


@dataclass(frozen=True)
class ImagingConfig:
    n_slices: int = 21
    n_rows: int = 25
    n_cols: int = 42
    pixel_size: float = 0.160
    z_spacing: float = 0.300
    acquisition_time: float = 0.026

    def __post_init__(self):
        for name in ("n_slices", "n_rows", "n_cols"):
            check_int(getattr(self, name), name, minimum=1)
        for name in ("pixel_size", "z_spacing", "acquisition_time"):
            check_positive(getattr(self, name), name)

    @property
    def shape(self):
        return (self.n_slices, self.n_rows, self.n_cols)

    @property
    def n_pixels(self):
        return self.n_slices * self.n_rows * self.n_cols

    @property
    def pixel_area(self):
        return self.pixel_size**2

    @property
    def extent(self):
        """Physical size (x, y, z) of the imaged volume."""
        return (self.n_cols * self.pixel_size, self.n_rows * self.pixel_size, self.n_slices * self.z_spacing)

    def axes(self):
        """Pixel-centre coordinates along x, y and z."""
        x = (np.arange(self.n_cols) + 0.5) * self.pixel_size
        y = (np.arange(self.n_rows) + 0.5) * self.pixel_size
        z = (np.arange(self.n_slices) + 0.5) * self.z_spacing
        return x, y, z

    def pixel_centres(self):
        """All pixel centres as an (n_pixels, 3) array in z, y, x raster order."""
        x, y, z = self.axes()
        zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def with_time(self, acquisition_time):
        return ImagingConfig(self.n_slices, self.n_rows, self.n_cols, self.pixel_size, self.z_spacing, acquisition_time)


@dataclass(frozen=True)
class CameraModel:
    """Deterministic EM-CCD pixel-to-grey mapping ``g = qe * gain / adu * n + bias``."""

    quantum_efficiency: float = 0.7
    gain: float = 1200.0
    adu_factor: float = 6.44
    bias: float = 1839.0

    def __post_init__(self):
        qe = check_positive(self.quantum_efficiency, "quantum_efficiency")
        if qe > 1.0:
            raise ValueError("quantum_efficiency must lie in (0, 1]")
        check_positive(self.gain, "gain")
        check_positive(self.adu_factor, "adu_factor")
        check_positive(self.bias, "bias", allow_zero=True)

    @property
    def slope(self):
        return self.quantum_efficiency * self.gain / self.adu_factor


def photons_to_grey(camera, n):
    """Grey values for photon counts ``n``, rounded half-to-even and saturated at u16."""
    g = np.rint(camera.slope * np.asarray(n, dtype=float) + camera.bias)
    return np.clip(g, 0, _GREY_MAX).astype(np.uint16)


def grey_to_photons(camera, g):
    """Invert the camera map; bias undershoot is clamped to zero photons."""
    n = (np.asarray(g, dtype=float) - camera.bias) / camera.slope
    return np.maximum(n, 0.0)


@dataclass(frozen=True)
class BackgroundModel:
    """Spatially uniform background rate (photons / s / um^2) decaying in time."""

    amplitude: float = 0.0
    decay_rate: float = 0.0
    offset: float = 100.0

    def __post_init__(self):
        for name in ("amplitude", "decay_rate", "offset"):
            check_positive(getattr(self, name), name, allow_zero=True)

    def rate(self, t):
        return self.amplitude * np.exp(-self.decay_rate * np.asarray(t, dtype=float)) + self.offset

    def integrated(self, imaging, frame_index=0):
        """Expected background photons per pixel in frame ``frame_index`` (0-based)."""
        t = frame_index * imaging.acquisition_time
        value = float(imaging.pixel_area * imaging.acquisition_time * self.rate(t))
        if not value > 0:
            raise ValueError(f"integrated background must be > 0 in frame {frame_index}")
        return value


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    """Linear map from digital intensities to expected photon counts of one frame."""

    H: np.ndarray
    integrated_weights: np.ndarray
    basis: BasisSpec
    frame_index: int = 0

    def __post_init__(self):
        if self.H.ndim != 2 or self.H.shape[1] != self.basis.n_bases:
            raise ValueError("H must have one column per basis function")
        if np.any(self.H < 0) or not np.all(np.isfinite(self.H)):
            raise ValueError("H must be finite and nonnegative")
        self.H.setflags(write=False)

    @property
    def n_pixels(self):
        return self.H.shape[0]

    @property
    def n_bases(self):
        return self.H.shape[1]


def _grouped_psf_sum(points, coeffs, groups, n_groups, psf, imaging):
    """Columns ``sum_{v in group g} coeffs[v] * psf(x_k - points[v])``.

    Uses the separability of the Gaussian on the pixel lattice; the result
    has shape (n_pixels, n_groups).
    """
    x, y, z = imaging.axes()
    counts = np.bincount(groups, minlength=n_groups)
    width = int(counts.max()) if counts.size else 0
    order = np.argsort(groups, kind="stable")
    slot = np.arange(len(groups)) - np.repeat(np.cumsum(counts) - counts, counts)
    # pad each group to the same number of sources; padded slots carry weight 0
    c = np.zeros((n_groups, width))
    pts = np.zeros((n_groups, width, 3))
    g_sorted = groups[order]
    c[g_sorted, slot] = coeffs[order] * psf.norm_const
    pts[g_sorted, slot] = points[order]
    gx = psf.factor(x[None, None, :] - pts[..., 0:1], psf.sigma_xy)
    gy = psf.factor(y[None, None, :] - pts[..., 1:2], psf.sigma_xy)
    gz = psf.factor(z[None, None, :] - pts[..., 2:3], psf.sigma_z) * c[..., None]
    nz, ny, nx = imaging.shape
    out = np.empty((imaging.n_pixels, n_groups))
    # bounded working set: process groups in chunks
    chunk = max(1, int(4e6 // max(1, width * nz * ny)))
    for start in range(0, n_groups, chunk):
        sl = slice(start, start + chunk)
        zy = (gz[sl, :, :, None] * gy[sl, :, None, :]).reshape(gz[sl].shape[0], width, nz * ny)
        cols = np.matmul(zy.transpose(0, 2, 1), gx[sl])  # (g, nz*ny, nx)
        out[:, sl] = cols.reshape(cols.shape[0], -1).T
    return out


def assemble_system(curve, basis, sources, psf, imaging, frame_index=None):
    """Assemble ``H[k, p] = sum_{v in bin p} |p| t_A w_v psf(x_k - gamma(ell_v))``."""
    if sources.n_bins != basis.n_bases or abs(sources.bin_size - basis.bin_size) > 1e-12:
        raise ValueError("virtual sources were not built for this basis")
    if abs(sources.length - curve.length) > 1e-9 or abs(basis.length - curve.length) > 1e-9:
        raise ValueError("sources, basis and curve disagree on the curve length")
    w_bar = imaging.pixel_area * imaging.acquisition_time * sources.weights
    H = _grouped_psf_sum(sources.points, w_bar, sources.bin_index, basis.n_bases, psf, imaging)
    frame = curve.frame_index if frame_index is None else frame_index
    return SystemMatrices(H=H, integrated_weights=w_bar, basis=basis, frame_index=frame)


def build_system(curve, bin_size, psf, imaging, quad_points=10):
    """Convenience wrapper: basis, virtual sources and system matrix for one curve."""
    basis = BasisSpec.for_length(curve.length, bin_size)
    sources = build_virtual_sources(curve, bin_size, quad_points)
    return assemble_system(curve, basis, sources, psf, imaging)


def curve_flux(curve, density, psf, imaging, bin_size=0.01, quad_points=10):
    """Photon flux density of the curve at every pixel centre (photons / s / um^2).

    ``density`` is a callable of the curve parameter, evaluated at the
    virtual sources rather than through a digital basis.
    """
    sources = build_virtual_sources(curve, bin_size, quad_points)
    coeffs = sources.weights * np.asarray(density(sources.positions), dtype=float)
    groups = np.zeros(len(sources), dtype=int)
    return _grouped_psf_sum(sources.points, coeffs, groups, 1, psf, imaging)[:, 0]


def expected_counts(system, phi, bg):
    """``bg * 1 + H @ phi`` for a positive integrated background ``bg``."""
    check_positive(bg, "bg")
    values = phi.values if isinstance(phi, PhotometryVector) else check_vector(phi, "phi")
    if values.shape[0] != system.n_bases:
        raise ValueError("phi length does not match the system")
    return bg + system.H @ values


def sample_poisson(rates, seed=None, shape=None):
    """Draw independent Poisson counts; ``seed`` may be an int or a Generator."""
    rates = np.asarray(rates, dtype=float)
    if np.any(~np.isfinite(rates)) or np.any(rates <= 0):
        raise ValueError("Poisson rates must be finite and > 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = rng.poisson(rates)
    return counts.reshape(shape) if shape is not None else counts


def psnr_acquisition_time(psnr_db, density, curve, psf, imaging, bg_rate, bin_size=0.01, quad_points=10):
    """Acquisition time that puts a simulation at the requested PSNR (dB).

    ``density`` is either a callable of the curve parameter or a
    :class:`PhotometryVector` on bins of width ``bin_size``.
    """
    check_positive(bg_rate, "bg_rate", allow_zero=True)
    if isinstance(density, PhotometryVector):
        basis = BasisSpec.for_length(curve.length, bin_size)
        values = density.values
        if values.shape[0] != basis.n_bases:
            raise ValueError("photometry length does not match bin_size")
        density_fn = lambda ell: values[basis.bin_of(ell)]  # noqa: E731
    else:
        density_fn = density
    flux = curve_flux(curve, density_fn, psf, imaging, bin_size, quad_points)
    peak = float(flux.max())
    if not peak > 0:
        raise ValueError("curve flux is zero everywhere; PSNR undefined")
    prefactor = (bg_rate + float(flux.mean())) / (imaging.pixel_area * peak**2)
    return prefactor * 10.0 ** (0.1 * psnr_db)


@dataclass(frozen=True, eq=False)
class SimulatedFrame:
    expected: np.ndarray
    photons: np.ndarray
    grey: np.ndarray
    background: float
    imaging: ImagingConfig = field(repr=False)
    frame_index: int = 0


def simulate_frame(curve, density, psf, imaging, camera, background, seed=None,
                   truth_bin_size=0.01, quad_points=10, frame_index=None):
    """Render one noisy grey stack of ``curve`` carrying the analog ``density``."""
    frame = curve.frame_index if frame_index is None else frame_index
    bg = background.integrated(imaging, frame)
    flux = curve_flux(curve, density, psf, imaging, truth_bin_size, quad_points)
    lam = bg + imaging.pixel_area * imaging.acquisition_time * flux
    photons = sample_poisson(lam, seed, imaging.shape)
    grey = photons_to_grey(camera, photons)
    return SimulatedFrame(lam.reshape(imaging.shape), photons, grey, bg, imaging, frame)
