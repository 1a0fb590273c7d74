"""
Numerical kernels for the SHM toolkit
Uniform grids, composite quadrature, convolution-type integrals, bracketed
root finding, inverse-CDF sampling and Kolmogorov-Smirnov helpers
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import toeplitz
from scipy.signal import fftconvolve
from scipy.special import comb
from scipy.stats import kstest

from config import CONVOLUTION_METHOD, MIN_GRID_POINTS, ROOT_TOL, KS2D_BINS


@dataclass(frozen=True)
class Grid:
    """Uniform grid lo, lo+step, ..., hi with n points."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not np.isfinite(self.lo) or not np.isfinite(self.hi):
            raise ValueError("grid endpoints must be finite")
        if not self.lo < self.hi:
            raise ValueError("grid requires lo < hi")
        if self.n < MIN_GRID_POINTS:
            raise ValueError(f"grid requires n ≥ {MIN_GRID_POINTS}")

    @classmethod
    def symmetric(cls, half_width, n):
        return cls(-float(half_width), float(half_width), int(n))

    @property
    def step(self):
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def points(self):
        return _grid_points(self)

    @property
    def is_symmetric(self):
        return self.lo == -self.hi

    def contains(self, x):
        return self.lo <= x <= self.hi

    def index_of(self, x):
        """Index of the grid point nearest to x."""
        return int(np.clip(round((x - self.lo) / self.step), 0, self.n - 1))

    def describe(self):
        return {'lo': self.lo, 'hi': self.hi, 'n': self.n}


@lru_cache(maxsize=16)
def _grid_points(grid):
    pts = grid.lo + np.arange(grid.n) * grid.step
    pts.flags.writeable = False
    return pts


@dataclass(eq=False)
class GridFunction:
    """
    Real function tabulated on a Grid.

    log_density marks functions allowed to take the value -inf off their
    support; every other GridFunction must be finite everywhere.
    """

    grid: Grid
    values: np.ndarray
    log_density: bool = field(default=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ValueError(f"values must have length {self.grid.n}, got shape {self.values.shape}")
        if np.isnan(self.values).any():
            raise ValueError("grid function contains NaN")
        if self.log_density:
            if np.isposinf(self.values).any():
                raise ValueError("log-density may only be -inf off its support")
        elif not np.isfinite(self.values).all():
            raise ValueError("grid function contains non-finite values")

    @classmethod
    def from_callable(cls, grid, func):
        return cls(grid, func(grid.points))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.n))

    def __call__(self, x):
        """Linear interpolation between grid points (clamped at the ends)."""
        return np.interp(x, self.grid.points, self.values)

    def derivative(self):
        """Centered differences in the interior, one-sided at the ends."""
        return GridFunction(self.grid, np.gradient(self.values, self.grid.step))

    def second_difference(self):
        """Second differences on the grid interior (length n-2)."""
        v = self.values
        return (v[2:] - 2.0 * v[1:-1] + v[:-2]) / self.grid.step ** 2

    def at_zero(self):
        return float(self(0.0))


@lru_cache(maxsize=16)
def quadrature_weights(grid):
    """
    Composite quadrature weights for a grid.

    Args:
        grid: Grid

    Returns:
        Read-only array of Simpson weights (n odd) or trapezoid weights (n even)
    """
    h = grid.step
    if grid.n % 2 == 1:
        w = np.ones(grid.n)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= h / 3.0
    else:
        w = np.full(grid.n, h)
        w[0] = w[-1] = h / 2.0
    w.flags.writeable = False
    return w


def integrate(f):
    """
    Integrate a grid function over its grid.

    Args:
        f: GridFunction

    Returns:
        Composite Simpson (n odd) or trapezoid (n even) approximation of ∫f
    """
    values = f.values
    if not np.isfinite(values).all():
        raise ValueError("non-finite integrand")
    return float(quadrature_weights(f.grid) @ values)


def integrate_2d(grid, matrix):
    """Tensor-product quadrature of a matrix tabulated on grid×grid."""
    matrix = np.asarray(matrix, dtype=float)
    if not np.isfinite(matrix).all():
        raise ValueError("non-finite integrand")
    w = quadrature_weights(grid)
    return float(w @ matrix @ w)


@dataclass(frozen=True)
class PolynomialKernel:
    """
    Kernel e^{-K(u)} given as a polynomial in u (ascending coefficients).

    Convolutions against it are evaluated exactly through the moments of g,
    so singular interactions such as K(u) = -2 log|u| never get evaluated
    at u = 0.
    """

    coeffs: tuple

    def __call__(self, u):
        return np.polynomial.polynomial.polyval(u, self.coeffs)

    @property
    def degree(self):
        return len(self.coeffs) - 1


def _lags(grid):
    n = grid.n
    return (np.arange(2 * n - 1) - (n - 1)) * grid.step


@lru_cache(maxsize=4)
def kernel_matrix(grid, kernel):
    kv = _kernel_lags(grid, kernel)
    n = grid.n
    mat = toeplitz(kv[n - 1:], kv[n - 1::-1])
    mat.flags.writeable = False
    return mat


def _kernel_lags(grid, kernel):
    kv = np.asarray(kernel(_lags(grid)), dtype=float)
    if not np.isfinite(kv).all() or (kv < 0).any():
        raise ValueError("kernel must be finite and non-negative at all grid differences")
    return kv


def _row_blocks(n, workers):
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _direct_rows(mat, u, start, stop):
    # one dot per output point keeps the summation order fixed
    return np.array([np.dot(mat[i], u) for i in range(start, stop)])


def convolve_weight(g, kernel, method=None, max_workers=1):
    """
    Compute x ↦ ∫ e^{-K(x-y)} g(y) dy on the grid of g.

    Args:
        g: Non-negative GridFunction
        kernel: Callable evaluating e^{-K} on an array of differences, or a PolynomialKernel
        method: 'direct' (O(n²) sum) or 'fft' (cyclic convolution); default CONVOLUTION_METHOD
        max_workers: Threads sharing the output index range in the direct path

    Returns:
        GridFunction on the same grid
    """
    grid = g.grid
    gv = g.values
    if not np.isfinite(gv).all():
        raise ValueError("non-finite integrand")
    if (gv < 0).any():
        raise ValueError("convolution weight g must be non-negative")

    if isinstance(kernel, PolynomialKernel):
        out = _polynomial_convolution(g, kernel)
    else:
        method = method or CONVOLUTION_METHOD
        u = gv * quadrature_weights(grid)
        n = grid.n
        if method == 'fft':
            kv = _kernel_lags(grid, kernel)
            out = np.maximum(fftconvolve(kv, u)[n - 1:2 * n - 1], 0.0)
        elif method == 'direct':
            mat = kernel_matrix(grid, kernel)
            blocks = _row_blocks(n, max(1, int(max_workers or 1)))
            if len(blocks) == 1:
                out = _direct_rows(mat, u, 0, n)
            else:
                with ThreadPoolExecutor(max_workers=len(blocks)) as executor:
                    parts = list(executor.map(lambda ab: _direct_rows(mat, u, *ab), blocks))
                out = np.concatenate(parts)
        else:
            raise ValueError(f"unknown convolution method '{method}'")

    bad = ~np.isfinite(out)
    if bad.any():
        x = grid.points[np.argmax(bad)]
        raise OverflowError(f"convolution overflow at x={x:.6g}")
    return GridFunction(grid, out)


def _polynomial_convolution(g, kernel):
    # ∫ (x-y)^k g(y) dy = Σ_j C(k,j) x^{k-j} (-1)^j M_j
    x = g.grid.points
    w = quadrature_weights(g.grid)
    moments = [float(w @ (g.values * x ** j)) for j in range(kernel.degree + 1)]
    out = np.zeros_like(x)
    for k, c in enumerate(kernel.coeffs):
        if c == 0:
            continue
        term = np.zeros_like(x)
        for j in range(k + 1):
            term += comb(k, j, exact=True) * (-1) ** j * moments[j] * x ** (k - j)
        out += c * term
    return out


def log_convolve_weight(log_g, grid, kernel, method=None, max_workers=1):
    """
    Logarithm of convolve_weight for a weight given by its logarithm.

    The weight is shifted by its maximum before exponentiation and the shift
    added back, so weights far below the float range are handled.

    Args:
        log_g: Array of log g on the grid (entries may be -inf)
        grid: Grid
        kernel: As in convolve_weight

    Returns:
        Array of log ∫ e^{-K(x-y)} g(y) dy (may contain -inf)
    """
    log_g = np.asarray(log_g, dtype=float)
    finite = np.isfinite(log_g)
    if not finite.any():
        raise ValueError("mass underflow")
    shift = log_g[finite].max()
    g = np.where(finite, np.exp(np.where(finite, log_g - shift, 0.0)), 0.0)
    conv = convolve_weight(GridFunction(grid, g), kernel, method=method, max_workers=max_workers).values
    with np.errstate(divide='ignore'):
        return np.log(conv) + shift


def find_root_bracketed(p, lo, hi, tol=ROOT_TOL):
    """
    Bisection root of a polynomial on a sign-changing bracket.

    Args:
        p: Polynomial coefficients, highest power first (numpy.polyval order)
        lo: Left bracket end
        hi: Right bracket end
        tol: Bracket width at which to stop

    Returns:
        Root estimate (midpoint of the final bracket)
    """
    p = np.asarray(p, dtype=float)
    f_lo = np.polyval(p, lo)
    f_hi = np.polyval(p, hi)
    if f_lo == 0:
        return float(lo)
    if f_hi == 0:
        return float(hi)
    if np.sign(f_lo) == np.sign(f_hi):
        raise ValueError("bracket invalid")

    lo, hi = float(lo), float(hi)
    for _ in range(400):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        f_mid = np.polyval(p, mid)
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def density_cdf_table(density):
    """Normalized piecewise-linear CDF of a non-negative grid density."""
    values = density.values
    if (values < 0).any():
        raise ValueError("density must be non-negative")
    cdf = cumulative_trapezoid(values, density.grid.points, initial=0.0)
    total = cdf[-1]
    if not total > 0:
        raise ValueError("density has zero total mass")
    return cdf / total


def inverse_cdf_from_table(points, cdf, u):
    """Invert a tabulated CDF at u (scalar or array) by linear interpolation."""
    u = np.asarray(u, dtype=float)
    idx = np.clip(np.searchsorted(cdf, u, side='left'), 1, len(points) - 1)
    lower = cdf[idx - 1]
    upper = cdf[idx]
    width = upper - lower
    frac = np.divide(u - lower, width, out=np.zeros_like(u), where=width > 0)
    step = points[1] - points[0]
    return points[idx - 1] + np.clip(frac, 0.0, 1.0) * step


def inverse_cdf_sample(density, u):
    """
    Draw from a tabulated density by inverting its CDF.

    Args:
        density: Non-negative GridFunction
        u: Uniform variate(s) in (0, 1)

    Returns:
        x with cumulative mass u (float for scalar u, array otherwise)
    """
    u_arr = np.asarray(u, dtype=float)
    if ((u_arr <= 0) | (u_arr >= 1)).any():
        raise ValueError("u must lie in (0, 1)")
    x = inverse_cdf_from_table(density.grid.points, density_cdf_table(density), u_arr)
    return float(x) if np.ndim(u) == 0 else x


def ks_to_density(samples, density):
    """Kolmogorov-Smirnov distance between samples and a tabulated density."""
    points = density.grid.points
    cdf = density_cdf_table(density)
    return float(kstest(np.asarray(samples), lambda x: np.interp(x, points, cdf)).statistic)


def ks_2d_statistic(a, b, bins=KS2D_BINS):
    """
    Binned two-sample 2-D Kolmogorov-Smirnov statistic.

    Both samples are histogrammed on pooled quantile edges; the statistic is
    the largest difference of the four quadrant CDFs over the bin corners.

    Args:
        a: Array (N, 2)
        b: Array (M, 2)
        bins: Quantile bins per coordinate

    Returns:
        Statistic in [0, 1]
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pooled = np.vstack([a, b])
    q = np.linspace(0.0, 1.0, bins + 1)
    edges = [np.unique(np.quantile(pooled[:, k], q)) for k in range(2)]
    ha, _, _ = np.histogram2d(a[:, 0], a[:, 1], bins=edges)
    hb, _, _ = np.histogram2d(b[:, 0], b[:, 1], bins=edges)
    diff = ha / len(a) - hb / len(b)

    stat = 0.0
    for flip_x in (False, True):
        for flip_y in (False, True):
            d = diff[::-1] if flip_x else diff
            d = d[:, ::-1] if flip_y else d
            stat = max(stat, float(np.abs(d.cumsum(axis=0).cumsum(axis=1)).max()))
    return stat


def linear_extrapolator(grid, values):
    """Interpolate a tabulated derivative, continuing linearly past the grid ends."""
    points = grid.points
    h = grid.step
    slope_lo = (values[1] - values[0]) / h
    slope_hi = (values[-1] - values[-2]) / h

    def evaluate(x):
        out = np.interp(x, points, values)
        below = x < grid.lo
        above = x > grid.hi
        if below.any():
            out = np.where(below, values[0] + slope_lo * (x - grid.lo), out)
        if above.any():
            out = np.where(above, values[-1] + slope_hi * (x - grid.hi), out)
        return out

    return evaluate


def clip_away_from_zero(diff, delta):
    """Replace entries with |diff| < delta by ±delta (sign of diff, + at 0)."""
    return np.where(np.abs(diff) < delta, np.where(diff >= 0, delta, -delta), diff)
