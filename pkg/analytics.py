"""
Closed-form cases
Linear (Gaussian) model: regimes, variance/correlation pairs, tree resolvent
and the Kesten-McKay spectral measure. Log-repulsive (Dyson) model: moment
polynomial, its positive root and the resulting edge density.
"""

from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy.special import comb

from config import (KM_CURVE_POINTS, KM_QUAD_NODES, REGIME_COLLAR, ROOT_TOL, SIGN_SCAN_CHUNK, SIGN_SCAN_RANGE,
                    SIGN_SCAN_STEP)
from fixed_point import apply_T
from numerics import GridFunction, find_root_bracketed, integrate

REGIMES = ('i', 'ii', 'iii', 'iv', 'v')


@dataclass
class LinearCaseReport:
    """Gaussian SHM solutions of the linear model at (m, z); absent quantities are None."""

    m: int
    z: float
    regime: str
    sigma2_plus: float = None
    sigma2_minus: float = None
    rho_plus: float = None
    rho_minus: float = None
    resolvent: float = None
    extendable_plus: bool = None
    extendable_minus: bool = None

    def to_dict(self):
        return asdict(self)


def _check_m(m):
    if isinstance(m, bool) or int(m) != m or m < 2:
        raise ValueError("m must be ≥ 2")
    return int(m)


def classify_regime(m, z, collar=REGIME_COLLAR):
    """
    Regime of the linear model.

    i: z > m; ii: z = m > 2; iii: 2√(m-1) < z < m; iv: z = 2√(m-1), m ≠ 2;
    v: z < 2√(m-1) or z = m = 2 (no Gaussian solution).
    """
    m = _check_m(m)
    edge = 2.0 * np.sqrt(m - 1)
    if m == 2:
        return 'i' if z > m + collar else 'v'
    if abs(z - m) <= collar:
        return 'ii'
    if z > m:
        return 'i'
    if abs(z - edge) <= collar:
        return 'iv'
    if z > edge:
        return 'iii'
    return 'v'


def _rho_pair(m, z):
    root = np.sqrt(max(z * z - 4.0 * (m - 1), 0.0))
    return (z - root) / (2.0 * (m - 1)), (z + root) / (2.0 * (m - 1))


def linear_report(m, z):
    """
    Classify (m, z) and fill the variance/correlation pairs that exist.

    Each pair solves (m-1)ρ² - zρ + 1 = 0 and σ²(z - mρ) = 1; a branch is
    extendable iff |ρ| < 1/√(m-1).

    Returns:
        LinearCaseReport
    """
    m = _check_m(m)
    z = float(z)
    regime = classify_regime(m, z)
    report = LinearCaseReport(m=m, z=z, regime=regime)
    threshold = 1.0 / np.sqrt(m - 1)

    if regime == 'i':
        rho, _ = _rho_pair(m, z)
        report.rho_plus = rho
        report.sigma2_plus = 1.0 / (z - m * rho)
    elif regime == 'ii':
        report.rho_plus = 1.0 / (m - 1)
        report.sigma2_plus = (m - 1) / (m * (m - 2))
    elif regime == 'iii':
        rho_p, rho_m = _rho_pair(m, z)
        report.rho_plus, report.rho_minus = rho_p, rho_m
        report.sigma2_plus = 1.0 / (z - m * rho_p)
        report.sigma2_minus = 1.0 / (z - m * rho_m)
        report.extendable_minus = bool(abs(rho_m) < threshold)
    elif regime == 'iv':
        report.rho_plus = threshold
        report.sigma2_plus = 1.0 / (np.sqrt(m - 1) - threshold)
    else:
        return report

    report.extendable_plus = bool(abs(report.rho_plus) < threshold)
    if regime in ('i', 'ii', 'iii'):
        report.resolvent = resolvent(m, z)
    return report


def linear_regime_table(m, zs):
    """linear_report over a list of z values as a DataFrame."""
    return pd.DataFrame([linear_report(m, z).to_dict() for z in zs])


def resolvent(m, z):
    """
    Diagonal resolvent ⟨e_v, (zI - A)⁻¹ e_v⟩ of the m-regular tree for real z > 2√(m-1).

    Returns:
        2(m-1) / ((m-2)z + m√(z² - 4(m-1)))
    """
    m = _check_m(m)
    edge = 2.0 * np.sqrt(m - 1)
    if abs(z) <= edge:
        raise ValueError(f"z in spectrum [−2√(m−1), 2√(m−1)] = [{-edge:.8g}, {edge:.8g}]")
    if z < 0:
        raise ValueError("resolvent is implemented for z > 2√(m−1) only")
    return 2.0 * (m - 1) / ((m - 2) * z + m * np.sqrt(z * z - 4.0 * (m - 1)))


def kesten_mckay_density(m, x):
    """
    Kesten-McKay density m√((4(m-1) - x²)₊) / (2π(m² - x²)).

    For m = 2 the density is 1/(π√(4 - x²)), infinite at x = ±2.
    Accepts scalars or arrays.
    """
    m = _check_m(m)
    x_arr = np.asarray(x, dtype=float)
    edge2 = 4.0 * (m - 1)
    inside = x_arr ** 2 < edge2
    with np.errstate(divide='ignore', invalid='ignore'):
        dens = m * np.sqrt(np.where(inside, edge2 - x_arr ** 2, 0.0)) / (2.0 * np.pi * (m * m - x_arr ** 2))
    dens = np.where(inside, dens, 0.0)
    if m == 2:
        dens = np.where(x_arr ** 2 == edge2, np.inf, dens)
    return float(dens) if np.ndim(x) == 0 else dens


def _angle_nodes(m, n):
    """
    Nodes and weights for ∫ f dμ after x = 2√(m-1)cos θ.

    In θ the measure has the smooth density m c² sin²θ / (2π(m² - c²cos²θ)),
    so a midpoint rule is spectrally accurate, also for m = 2.
    """
    c = 2.0 * np.sqrt(m - 1)
    theta = (np.arange(n) + 0.5) * np.pi / n
    x = c * np.cos(theta)
    w = m * c * c * np.sin(theta) ** 2 / (2.0 * np.pi * (m * m - x * x)) * (np.pi / n)
    return x, w


def kesten_mckay_moment(m, k, n=KM_QUAD_NODES):
    """∫ x^k μ(dx); the zeroth moment is 1 and the second is m."""
    m = _check_m(m)
    x, w = _angle_nodes(m, n)
    return float(w @ x ** k)


def stieltjes_check(m, z, n=KM_QUAD_NODES):
    """
    Compare ∫(z - x)⁻¹μ(dx) by quadrature with the closed-form resolvent.

    Returns:
        Dictionary {lhs, rhs, err}
    """
    m = _check_m(m)
    rhs = resolvent(m, z)
    x, w = _angle_nodes(m, n)
    lhs = float(w @ (1.0 / (z - x)))
    return {'lhs': lhs, 'rhs': float(rhs), 'err': abs(lhs - rhs)}


def kesten_mckay_curve(m, n=KM_CURVE_POINTS):
    """
    Density on the angle nodes, ascending in x.

    Returns:
        DataFrame with columns x, density, weight; Σ density·weight = 1
    """
    m = _check_m(m)
    x, w = _angle_nodes(m, n)
    c = 2.0 * np.sqrt(m - 1)
    theta = (np.arange(n) + 0.5) * np.pi / n
    dx = c * np.sin(theta) * (np.pi / n)
    df = pd.DataFrame({'x': x, 'density': kesten_mckay_density(m, x), 'weight': dx})
    return df.iloc[::-1].reset_index(drop=True)


@dataclass
class DysonReport:
    """Moment polynomial of the log-repulsive model and its positive root r."""

    m: int
    moments: list
    poly_coeffs: list
    normalized_coeffs: list
    r: float
    lam: float
    sign_changes: int
    poly_residual: float
    fixed_point_residual: float = None

    def to_dict(self):
        return asdict(self)

    def F(self, x):
        """Gauged solution log r - log(x² + r)."""
        x = np.asarray(x, dtype=float)
        return np.log(self.r) - np.log(x * x + self.r)


def _sign_changes(coeffs):
    signs = [np.sign(c) for c in coeffs if c != 0]
    return int(sum(1 for a, b in zip(signs[:-1], signs[1:]) if a != b))


def dyson_moments(cfg):
    """s_k = ∫x^k e^{-U} for k = 0..2m by grid quadrature."""
    grid = cfg.grid
    x = grid.points
    eU = cfg.potentials.exp_minus_U(x)
    return [integrate(GridFunction(grid, x ** k * eU)) for k in range(2 * cfg.m + 1)]


def dyson_polynomial(m, moments):
    """Coefficients ((m-2j)/m)·C(m,j)·s_{2j} of r^{m-j}, highest power first."""
    return [(m - 2 * j) / m * comb(m, j, exact=True) * moments[2 * j] for j in range(m + 1)]


def dyson_report(cfg, check_fixed_point=True, max_workers=1):
    """
    Positive root r of the moment polynomial and the constant λ = ∫(y²+r)^{m-1}e^{-U}.

    F(x) = -log(x² + r) then solves the fixed-point problem; with
    check_fixed_point the gauged residual sup|T(F) - F| is recorded.

    Args:
        cfg: ModelConfig with the log-repulsive interaction

    Returns:
        DysonReport
    """
    if not cfg.is_log_repulsive:
        raise ValueError("dyson_report requires the log-repulsive interaction")
    m = cfg.m
    moments = dyson_moments(cfg)
    coeffs = dyson_polynomial(m, moments)
    changes = _sign_changes(coeffs)
    if changes != 1:
        raise ValueError("polynomial sign pattern violated")

    lead = coeffs[0]
    bound = 1.0 + max(abs(c / lead) for c in coeffs[1:])
    r = find_root_bracketed(coeffs, 0.0, bound, tol=ROOT_TOL)
    poly_residual = abs(float(np.polyval(coeffs, r))) / abs(lead)

    grid = cfg.grid
    x = grid.points
    eU = cfg.potentials.exp_minus_U(x)
    lam = integrate(GridFunction(grid, (x * x + r) ** (m - 1) * eU))

    report = DysonReport(m=m, moments=moments, poly_coeffs=coeffs,
                         normalized_coeffs=[c / lead for c in coeffs], r=float(r), lam=float(lam),
                         sign_changes=changes, poly_residual=poly_residual)
    if check_fixed_point:
        F = GridFunction(grid, report.F(x))
        report.fixed_point_residual = float(np.max(np.abs(apply_T(cfg, F, max_workers).values - F.values)))
    return report


def dyson_density(cfg, report):
    """
    Closed-form edge law of the log-repulsive model.

    ρ(x,y) ∝ (x-y)² e^{-U(x)-U(y)} (x²+r)^{m-1} (y²+r)^{m-1}, whose marginal
    is ∝ e^{-U(x)} (x²+r)^m.

    Returns:
        DataFrame with columns x, F, marginal (normalized on the grid)
    """
    grid = cfg.grid
    x = grid.points
    marginal = cfg.potentials.exp_minus_U(x) * (x * x + report.r) ** cfg.m
    marginal = marginal / integrate(GridFunction(grid, marginal))
    return pd.DataFrame({'x': x, 'F': report.F(x), 'marginal': marginal})


def sign_scan_root(coeffs, lo=SIGN_SCAN_RANGE[0], hi=SIGN_SCAN_RANGE[1], step=SIGN_SCAN_STEP):
    """
    First sign change of a polynomial on a uniform scan, refined by linear interpolation.

    Args:
        coeffs: Coefficients, highest power first

    Returns:
        Root estimate, or None when the scan finds no sign change
    """
    coeffs = np.asarray(coeffs, dtype=float)
    n_total = int(np.floor((hi - lo) / step)) + 1
    prev_x = prev_v = None
    for start in range(0, n_total, SIGN_SCAN_CHUNK):
        xs = lo + np.arange(start, min(start + SIGN_SCAN_CHUNK, n_total)) * step
        vs = np.polyval(coeffs, xs)
        if prev_x is not None:
            xs = np.concatenate([[prev_x], xs])
            vs = np.concatenate([[prev_v], vs])
        zero = np.flatnonzero(vs == 0)
        flips = np.flatnonzero(np.sign(vs[:-1]) * np.sign(vs[1:]) < 0)
        if len(zero) and (not len(flips) or zero[0] <= flips[0]):
            return float(xs[zero[0]])
        if len(flips):
            i = flips[0]
            a, b, fa, fb = xs[i], xs[i + 1], vs[i], vs[i + 1]
            return float(a - fa * (b - a) / (fb - fa))
        prev_x, prev_v = xs[-1], vs[-1]
    return None
