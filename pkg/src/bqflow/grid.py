"""
Periodic-box fields and spectral operators.

The box is the cube [-L/2, L/2)^3 sampled on n uniform points per axis,
x_j = -L/2 + j*(L/n).  Spectral coefficients are Fourier-series
coefficients with respect to the plane waves e^{i k.x} on that box,
k = 2*pi*m/L for integer m in [-n/2, n/2).  With this convention a
constant field c has the single coefficient c at k = 0, and the mean of
a scalar field is its zero mode (so integrals are zero mode times L^3).

Relative to numpy's FFT (which indexes from the box corner) the
coefficients differ by the sign (-1)^(m1+m2+m3); the conversion is
handled here once so every other module can stay convention-free.
Diagonal multipliers (heat factors, projections, derivatives) are
unaffected by the sign and are applied on raw half-spectrum arrays in
the performance-sensitive paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import InvalidRegionError

_FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    """Set the number of threads used by FFT calls (scipy.fft workers)."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


def get_fft_workers() -> int:
    return _FFT_WORKERS


def fftn(a):
    return sfft.fftn(a, axes=(-3, -2, -1), workers=_FFT_WORKERS)


def ifftn(a):
    return sfft.ifftn(a, axes=(-3, -2, -1), workers=_FFT_WORKERS)


def rfftn(a):
    return sfft.rfftn(a, axes=(-3, -2, -1), workers=_FFT_WORKERS)


def irfftn(a, n):
    return sfft.irfftn(a, s=(n, n, n), axes=(-3, -2, -1), workers=_FFT_WORKERS)


@dataclass(frozen=True)
class GridSpec:
    """
    Discretization of the periodic cube [-L/2, L/2)^3.

    Parameters
    ----------
    n : int
        Grid points per axis; even and >= 8.
    length : float
        Box side L.
    dealias_fraction : float
        Modes with any |m| > dealias_fraction * n/2 are zeroed by the
        dealias mask (2/3 rule by default).
    center : tuple of 3 floats
        Origin of the radial coordinate used by exterior norms.
    """

    n: int
    length: float
    dealias_fraction: float = 2.0 / 3.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.n % 2 != 0 or self.n < 8:
            raise ValueError(f"n must be even and >= 8, got {self.n}")
        if self.length <= 0:
            raise ValueError(f"box length must be positive, got {self.length}")
        if not 0 < self.dealias_fraction <= 1:
            raise ValueError("dealias_fraction must lie in (0, 1]")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    # -- real-space geometry -------------------------------------------------

    @property
    def h(self) -> float:
        """Grid spacing L/n."""
        return self.length / self.n

    @property
    def cell_volume(self) -> float:
        return self.h**3

    @cached_property
    def x1(self) -> np.ndarray:
        """1D coordinates -L/2 + j h."""
        return -self.length / 2 + self.h * np.arange(self.n)

    @cached_property
    def radius(self) -> np.ndarray:
        """|x - center| on the grid, shape (n, n, n)."""
        dx = self.x1 - self.center[0]
        dy = self.x1 - self.center[1]
        dz = self.x1 - self.center[2]
        return np.sqrt(
            dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2
        )

    def coords(self) -> np.ndarray:
        """Coordinate arrays stacked as shape (3, n, n, n)."""
        x = self.x1
        return np.stack(np.meshgrid(x, x, x, indexing="ij"))

    # -- wavenumbers (full spectrum) -----------------------------------------

    @cached_property
    def k1(self) -> np.ndarray:
        """1D wavenumbers 2 pi m / L in FFT order."""
        return 2 * np.pi * sfft.fftfreq(self.n, d=self.h)

    @cached_property
    def mode_index(self) -> np.ndarray:
        """Integer m per 1D FFT slot."""
        return np.rint(self.k1 * self.length / (2 * np.pi)).astype(int)

    @cached_property
    def sign_full(self) -> np.ndarray:
        """(-1)^(m1+m2+m3): converts corner-indexed FFT output to centered
        coefficients and back (involution)."""
        s = (-1.0) ** self.mode_index
        return s[:, None, None] * s[None, :, None] * s[None, None, :]

    @cached_property
    def k2_full(self) -> np.ndarray:
        k = self.k1
        return (
            k[:, None, None] ** 2 + k[None, :, None] ** 2 + k[None, None, :] ** 2
        )

    @cached_property
    def dealias_full(self) -> np.ndarray:
        m = np.abs(self.mode_index)
        cut = self.dealias_fraction * self.n / 2
        keep = m <= cut
        return (
            keep[:, None, None] & keep[None, :, None] & keep[None, None, :]
        )

    # -- wavenumbers (half spectrum, rfftn layout) ---------------------------

    @cached_property
    def k1r(self) -> np.ndarray:
        return 2 * np.pi * sfft.rfftfreq(self.n, d=self.h)

    @cached_property
    def kvec_r(self) -> np.ndarray:
        """Wavenumber components on the rfftn lattice, shape (3, n, n, n/2+1)."""
        k = self.k1
        kr = self.k1r
        shape = (self.n, self.n, self.n // 2 + 1)
        return np.stack(
            [
                np.broadcast_to(k[:, None, None], shape),
                np.broadcast_to(k[None, :, None], shape),
                np.broadcast_to(kr[None, None, :], shape),
            ]
        )

    @cached_property
    def k2_r(self) -> np.ndarray:
        k = self.k1
        kr = self.k1r
        return k[:, None, None] ** 2 + k[None, :, None] ** 2 + kr[None, None, :] ** 2

    @cached_property
    def inv_k2_r(self) -> np.ndarray:
        """1/|k|^2 with the zero mode set to 0 (used by the projector)."""
        k2 = self.k2_r.copy()
        k2[0, 0, 0] = 1.0
        inv = 1.0 / k2
        inv[0, 0, 0] = 0.0
        return inv

    @cached_property
    def dealias_r(self) -> np.ndarray:
        m = np.abs(self.mode_index)
        cut = self.dealias_fraction * self.n / 2
        keep = m <= cut
        keep_r = keep[: self.n // 2 + 1]
        return keep[:, None, None] & keep[None, :, None] & keep_r[None, None, :]

    def heat_factor_r(self, t: float) -> np.ndarray:
        """e^{-|k|^2 t} on the half-spectrum lattice."""
        return np.exp(-self.k2_r * t)

    def __hash__(self):
        return hash((self.n, self.length, self.dealias_fraction, self.center))


@dataclass(frozen=True)
class RegionSpec:
    """Ball B_R around the grid center, or its complement."""

    radius: float
    complement: bool = True

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")

    def validate(self, grid: GridSpec) -> None:
        if self.radius >= grid.length / 2:
            raise InvalidRegionError(
                f"region radius {self.radius} >= half box {grid.length / 2}: "
                "the region wraps around the torus"
            )

    def mask(self, grid: GridSpec) -> np.ndarray:
        self.validate(grid)
        if self.complement:
            return grid.radius >= self.radius
        return grid.radius < self.radius


class Field:
    """
    Scalar or 3-vector field on a GridSpec, immutable, with lazily cached
    real samples and centered spectral coefficients.

    Arrays have shape (n, n, n) for scalars and (3, n, n, n) for vectors.
    """

    __slots__ = ("grid", "rank", "representation", "_real", "_spec")

    def __init__(self, grid: GridSpec, rank: str, representation: str,
                 real=None, spec=None):
        if rank not in ("scalar", "vector"):
            raise ValueError(f"rank must be 'scalar' or 'vector', got {rank!r}")
        if representation not in ("real", "spectral"):
            raise ValueError(f"bad representation {representation!r}")
        self.grid = grid
        self.rank = rank
        self.representation = representation
        self._real = real
        self._spec = spec

    # -- constructors ---------------------------------------------------------

    @classmethod
    def from_real(cls, grid: GridSpec, values) -> "Field":
        values = np.asarray(values, dtype=np.float64)
        rank = cls._check_shape(grid, values)
        return cls(grid, rank, "real", real=values)

    @classmethod
    def from_spectral(cls, grid: GridSpec, coeffs) -> "Field":
        coeffs = np.asarray(coeffs, dtype=np.complex128)
        rank = cls._check_shape(grid, coeffs)
        return cls(grid, rank, "spectral", spec=coeffs)

    @classmethod
    def zeros(cls, grid: GridSpec, rank: str = "scalar") -> "Field":
        shape = (grid.n,) * 3 if rank == "scalar" else (3,) + (grid.n,) * 3
        return cls.from_real(grid, np.zeros(shape))

    @staticmethod
    def _check_shape(grid, a) -> str:
        n = grid.n
        if a.shape == (n, n, n):
            return "scalar"
        if a.shape == (3, n, n, n):
            return "vector"
        raise ValueError(f"array shape {a.shape} does not match grid n={n}")

    # -- representations -------------------------------------------------------

    @property
    def real_values(self) -> np.ndarray:
        if self._real is None:
            g = self.grid
            self._real = np.ascontiguousarray(
                ifftn(g.sign_full * self._spec).real * g.n**3
            )
        return self._real

    @property
    def spectral_values(self) -> np.ndarray:
        """Centered Fourier-series coefficients (full complex spectrum)."""
        if self._spec is None:
            g = self.grid
            self._spec = g.sign_full * fftn(self._real) / g.n**3
        return self._spec

    def half_spectrum(self) -> np.ndarray:
        """Raw rfftn of the real samples (corner-indexed, unnormalized).
        Used by multiplier pipelines where phase conventions cancel."""
        return rfftn(self.real_values)

    @classmethod
    def from_half_spectrum(cls, grid: GridSpec, hs) -> "Field":
        real = irfftn(hs, grid.n)
        return cls.from_real(grid, real)

    # -- misc -------------------------------------------------------------------

    def magnitude(self) -> np.ndarray:
        """Pointwise |f|; Euclidean over components for vectors."""
        v = self.real_values
        if self.rank == "scalar":
            return np.abs(v)
        return np.sqrt((v * v).sum(axis=0))

    def component(self, i: int) -> "Field":
        if self.rank != "vector":
            raise ValueError("component() needs a vector field")
        if self._real is not None:
            return Field.from_real(self.grid, self._real[i])
        return Field.from_spectral(self.grid, self._spec[i])

    def mean(self):
        if self._spec is not None:
            return self._spec[..., 0, 0, 0].real
        return self.real_values.mean(axis=(-3, -2, -1))

    def __add__(self, other: "Field") -> "Field":
        self._compat(other)
        return Field.from_real(self.grid, self.real_values + other.real_values)

    def __sub__(self, other: "Field") -> "Field":
        self._compat(other)
        return Field.from_real(self.grid, self.real_values - other.real_values)

    def __mul__(self, c) -> "Field":
        if self._real is not None:
            return Field.from_real(self.grid, self._real * c)
        return Field.from_spectral(self.grid, self._spec * c)

    __rmul__ = __mul__

    def _compat(self, other: "Field"):
        if self.grid != other.grid or self.rank != other.rank:
            raise ValueError("field mismatch: grids or ranks differ")


# -- conversions ----------------------------------------------------------------


def to_spectral(f: Field) -> Field:
    """Return the field with the spectral representation active (both cached)."""
    f.spectral_values
    out = Field(f.grid, f.rank, "spectral", real=f._real, spec=f._spec)
    return out


def to_real(f: Field) -> Field:
    f.real_values
    return Field(f.grid, f.rank, "real", real=f._real, spec=f._spec)


def is_hermitian(f: Field, rtol: float = 1e-12) -> bool:
    """Spectral coefficients satisfy c(-k) = conj(c(k)) within rtol."""
    c = f.spectral_values
    flipped = c[..., ::-1, ::-1, ::-1]
    flipped = np.roll(flipped, (1, 1, 1), axis=(-3, -2, -1))
    scale = np.max(np.abs(c)) or 1.0
    return bool(np.max(np.abs(flipped.conj() - c)) <= rtol * scale)


# -- multiplier operators ---------------------------------------------------------


def _apply_multiplier(f: Field, mult: np.ndarray) -> Field:
    """Apply a scalar spectral multiplier defined on the full lattice."""
    c = f.spectral_values * mult
    return Field.from_spectral(f.grid, c)


def heat_semigroup(f: Field, t: float) -> Field:
    """e^{t Laplacian} f via the multiplier e^{-|k|^2 t}."""
    if t < 0:
        raise ValueError(f"heat semigroup needs t >= 0, got {t}")
    if t == 0:
        return f
    return _apply_multiplier(f, np.exp(-f.grid.k2_full * t))


def leray_project(v: Field) -> Field:
    """
    Project onto divergence-free fields: vhat -> (I - k k^T/|k|^2) vhat.

    The k = 0 mode is set to zero.  On the torus the projector is
    undefined there; zeroing it pins the co-moving mean-free frame and
    emulates the decaying whole-space setting (a box with net buoyancy
    would otherwise accelerate uniformly, a pure box artifact).
    """
    if v.rank != "vector":
        raise ValueError("leray_project needs a vector field")
    g = v.grid
    c = np.array(v.spectral_values, copy=True)
    k = g.k1
    kx = k[:, None, None]
    ky = k[None, :, None]
    kz = k[None, None, :]
    k2 = g.k2_full.copy()
    k2[0, 0, 0] = 1.0
    kdotv = kx * c[0] + ky * c[1] + kz * c[2]
    kdotv /= k2
    c[0] -= kx * kdotv
    c[1] -= ky * kdotv
    c[2] -= kz * kdotv
    c[:, 0, 0, 0] = 0.0
    return Field.from_spectral(g, c)


def derivative(f: Field, axis: int) -> Field:
    """Spectral partial derivative along a coordinate axis."""
    g = f.grid
    k = g.k1
    shape = [1, 1, 1]
    shape[axis] = g.n
    mult = 1j * k.reshape(shape)
    return Field.from_spectral(g, f.spectral_values * mult)


def gradient(f: Field) -> Field:
    if f.rank != "scalar":
        raise ValueError("gradient needs a scalar field")
    c = f.spectral_values
    g = f.grid
    k = g.k1
    out = np.empty((3,) + c.shape, dtype=np.complex128)
    out[0] = 1j * k[:, None, None] * c
    out[1] = 1j * k[None, :, None] * c
    out[2] = 1j * k[None, None, :] * c
    return Field.from_spectral(g, out)


def divergence(v: Field) -> Field:
    if v.rank != "vector":
        raise ValueError("divergence needs a vector field")
    c = v.spectral_values
    g = v.grid
    k = g.k1
    d = (
        1j * k[:, None, None] * c[0]
        + 1j * k[None, :, None] * c[1]
        + 1j * k[None, None, :] * c[2]
    )
    return Field.from_spectral(g, d)


def laplacian(f: Field) -> Field:
    return Field.from_spectral(f.grid, -f.grid.k2_full * f.spectral_values)


def dealias(f: Field) -> Field:
    return Field.from_spectral(f.grid, f.spectral_values * f.grid.dealias_full)


def divergence_residual(v: Field) -> float:
    """max_k |k . vhat| relative to max_k |k| |vhat| (0 for divergence-free)."""
    g = v.grid
    c = v.spectral_values
    k = g.k1
    kdotv = (
        k[:, None, None] * c[0] + k[None, :, None] * c[1] + k[None, None, :] * c[2]
    )
    kmag = np.sqrt(g.k2_full)
    denom = np.max(kmag * np.sqrt((np.abs(c) ** 2).sum(axis=0)))
    if denom == 0:
        return 0.0
    return float(np.max(np.abs(kdotv)) / denom)


# -- norms -------------------------------------------------------------------------


def lp_norm(f: Field, p: float) -> float:
    """Riemann-sum L^p norm over the box; p = inf is the grid max of |f|."""
    mag = f.magnitude()
    return _lp_of_samples(mag, p, f.grid.cell_volume)


def exterior_lp_norm(f: Field, p: float, region: RegionSpec) -> float:
    """L^p norm over the region (exterior of the ball by default)."""
    mask = region.mask(f.grid)
    mag = f.magnitude()[mask]
    return _lp_of_samples(mag, p, f.grid.cell_volume)


def _lp_of_samples(mag: np.ndarray, p: float, cell: float) -> float:
    if not 1 <= p:
        raise ValueError(f"p must be in [1, inf], got {p}")
    if mag.size == 0:
        return 0.0
    if np.isinf(p):
        return float(mag.max())
    return float((np.sum(mag**p) * cell) ** (1.0 / p))


def spectral_l2(f: Field) -> float:
    """L^2 norm from the spectral side (Parseval with the box volume)."""
    c = f.spectral_values
    return float(np.sqrt(f.grid.length**3 * np.sum(np.abs(c) ** 2)))


def integral(f: Field) -> float:
    """Box integral of a scalar field (zero mode times volume)."""
    if f.rank != "scalar":
        raise ValueError("integral() needs a scalar field")
    if f._spec is not None:
        return float(f._spec[0, 0, 0].real * f.grid.length**3)
    return float(f.real_values.sum() * f.grid.cell_volume)


# -- simple constructors ------------------------------------------------------------


def gaussian_bump(grid: GridSpec, width: float, mass: float = 1.0,
                  center=(0.0, 0.0, 0.0), band_limit: bool = True) -> Field:
    """
    Normalized bump exp(-|x-c|^2/(4 w^2)) / (4 pi w^2)^{3/2} scaled to the
    requested integral, optionally truncated to the dealias band so it is
    exactly band-limited.
    """
    dx = grid.x1 - center[0]
    dy = grid.x1 - center[1]
    dz = grid.x1 - center[2]
    r2 = dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2
    vals = mass * np.exp(-r2 / (4 * width**2)) / (4 * np.pi * width**2) ** 1.5
    f = Field.from_real(grid, vals)
    if band_limit:
        f = dealias(f)
    return f


def random_band_limited(grid: GridSpec, rng: np.random.Generator,
                        rank: str = "scalar", kmax_frac: float = 0.25,
                        amplitude: float = 1.0) -> Field:
    """Random smooth real field with modes only below kmax_frac * k_nyquist."""
    n = grid.n
    shape = (n, n, n) if rank == "scalar" else (3, n, n, n)
    white = rng.standard_normal(shape)
    f = Field.from_real(grid, white)
    m = np.abs(grid.mode_index)
    cut = kmax_frac * n / 2
    keep = m <= cut
    mask = keep[:, None, None] & keep[None, :, None] & keep[None, None, :]
    c = f.spectral_values * mask
    out = Field.from_spectral(grid, c)
    peak = np.max(np.abs(out.real_values)) or 1.0
    return out * (amplitude / peak)
