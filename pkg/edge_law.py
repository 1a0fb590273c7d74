"""
Two-vertex stationary law of an SHM solution
Joint edge density ρ(x,y), normalization Z, boundary law (l, Q), marginal
ρ_X and the parent→child conditional kernel κ(y|x)
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid, trapezoid

from config import TECH2_WINDOW, TECH_P
from numerics import (GridFunction, convolve_weight, integrate, integrate_2d, kernel_matrix, log_convolve_weight,
                      quadrature_weights)
from potentials import kernel_power

MAX_BUILD_RESIDUAL = 1e-6


@dataclass(eq=False)
class EdgeLaw:
    """
    Tabulated edge law of a solved model.

    Q(x,y) = e^{-C1-U(x)/m-U(y)/m-K(x-y)} is not stored; Q() evaluates it.
    log_h holds -U-(m-1)F, the per-vertex factor of ρ.
    """

    m: int
    potentials: object
    F: GridFunction
    rho: np.ndarray
    Z: float
    log_Z: float
    l: GridFunction
    rho_X: GridFunction
    C1: float
    C2: float
    log_h: np.ndarray
    tech1: dict

    @property
    def grid(self):
        return self.F.grid

    def Q(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        pot = self.potentials
        with np.errstate(over='ignore'):
            return np.exp(-self.C1 - pot.U(x) / self.m - pot.U(y) / self.m) * pot.weight_kernel(x - y)

    def marginal_from_boundary_law(self):
        """C2⁻¹ l^m computed in log form."""
        pot = self.potentials
        x = self.grid.points
        return np.exp(-pot.U(x) - self.m * self.F.values - self.log_Z + self.C1)


def build_edge_law(cfg, sol, max_residual=MAX_BUILD_RESIDUAL, p=TECH_P):
    """
    Tabulate ρ(x,y) = Z⁻¹exp(-U(x)-U(y)-K(x-y)-(m-1)F(x)-(m-1)F(y)).

    Args:
        cfg: ModelConfig
        sol: FixedPointSolution for cfg
        max_residual: Largest accepted fixed-point residual
        p: Exponent for the drift-integrability diagnostic

    Returns:
        EdgeLaw
    """
    if not sol.residual <= max_residual:
        raise ValueError(f"fixed point residual {sol.residual:.3e} exceeds {max_residual:.1e}")
    grid = cfg.grid
    pot = cfg.potentials
    m = cfg.m
    x = grid.points

    log_h = -pot.U(x) - (m - 1) * sol.F.values
    finite = np.isfinite(log_h)
    if not finite.any():
        raise ValueError("normalization diverges")
    shift = log_h[finite].max()
    h = np.where(finite, np.exp(np.where(finite, log_h - shift, 0.0)), 0.0)

    kmat = kernel_matrix(grid, pot.weight_kernel)
    unnorm = h[:, None] * kmat * h[None, :]
    try:
        z_shifted = integrate_2d(grid, unnorm)
    except ValueError:
        raise ValueError("normalization diverges")
    if not (np.isfinite(z_shifted) and z_shifted > 0):
        raise ValueError("normalization diverges")
    log_Z = float(np.log(z_shifted) + 2.0 * shift)
    rho = unnorm / z_shifted

    w = quadrature_weights(grid)
    rho_X = GridFunction(grid, rho @ w)
    with np.errstate(over='ignore'):
        l = GridFunction(grid, np.exp(-pot.U(x) / m - sol.F.values))
    C1 = float(sol.C)

    law = EdgeLaw(
        m=m, potentials=pot, F=sol.F, rho=rho, Z=float(np.exp(log_Z)), log_Z=log_Z,
        l=l, rho_X=rho_X, C1=C1, C2=float(np.exp(log_Z - C1)), log_h=log_h,
        tech1=_tech1_prime(cfg, rho, p),
    )
    return law


def _tech1_prime(cfg, rho, p):
    """E_ρ[|U'(X)|^p + |K'(X-Y)|^p]; finite iff the unnormalized integral is."""
    grid = cfg.grid
    pot = cfg.potentials
    x = grid.points
    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        dk = np.abs(pot.dK(x[:, None] - x[None, :])) ** p
        integrand = np.nan_to_num((np.abs(pot.dU(x))[:, None] ** p + dk) * rho, nan=0.0)
    try:
        value = integrate_2d(grid, integrand)
    except ValueError:
        value = float('inf')
    return {'value': float(value), 'finite': bool(np.isfinite(value)), 'p': float(p)}


def boundary_law_residual(law, cfg):
    """
    Sup over the grid of |∫Q(x,y)l(y)^{m-1}dy - l(x)| / l(x).

    Args:
        law: EdgeLaw
        cfg: ModelConfig it was built from

    Returns:
        Relative residual (points where l vanishes are skipped)
    """
    grid = cfg.grid
    pot = cfg.potentials
    m = cfg.m
    x = grid.points
    with np.errstate(divide='ignore'):
        log_l = np.log(law.l.values)
    log_g = -pot.U(x) / m + (m - 1) * log_l
    log_conv = log_convolve_weight(log_g, grid, pot.weight_kernel)
    log_num = -law.C1 - pot.U(x) / m + log_conv
    ok = np.isfinite(log_l)
    ratio = np.exp(log_num[ok] - log_l[ok])
    return float(np.max(np.abs(ratio - 1.0)))


def conditional_kernel(law, x):
    """
    Child density κ(y|x) = Q(x,y) l(y)^{m-1} / l(x) at parent value x.

    Args:
        law: EdgeLaw
        x: Parent value inside the grid

    Returns:
        GridFunction in y
    """
    grid = law.grid
    if not grid.contains(x):
        raise ValueError(f"x={x} outside grid [{grid.lo}, {grid.hi}]")
    if not law.l(x) > 0:
        raise ValueError(f"boundary law vanishes at x={x}")
    y = grid.points
    with np.errstate(over='ignore'):
        values = np.exp(-law.C1 + law.F(x) + law.log_h) * law.potentials.weight_kernel(x - y)
    return GridFunction(grid, values)


def conditional_matrix(law):
    """κ(y_j|x_i) for all grid parents x_i (rows)."""
    F = law.F.values
    with np.errstate(over='ignore'):
        return np.exp(-law.C1 + F[:, None] + law.log_h[None, :]) * kernel_matrix(law.grid, law.potentials.weight_kernel)


def conditional_cdf_table(law):
    """
    Row-normalized piecewise-linear CDFs of κ(·|x_i) for every grid parent.

    Returns:
        Array (n, n); rows with zero mass are left as the uniform CDF
    """
    grid = law.grid
    cdf = cumulative_trapezoid(conditional_matrix(law), grid.points, axis=1, initial=0.0)
    totals = cdf[:, -1:]
    uniform = np.linspace(0.0, 1.0, grid.n)[None, :]
    safe = np.where(totals > 0, totals, 1.0)
    return np.where(totals > 0, cdf / safe, uniform)


def edge_correlation(law):
    """
    Moments of the tabulated edge law.

    Returns:
        Dictionary {mean, variance, covariance, correlation}
    """
    grid = law.grid
    x = grid.points
    mean = integrate(GridFunction(grid, x * law.rho_X.values))
    var = integrate(GridFunction(grid, (x - mean) ** 2 * law.rho_X.values))
    cov = integrate_2d(grid, np.outer(x - mean, x - mean) * law.rho)
    return {'mean': mean, 'variance': var, 'covariance': cov, 'correlation': cov / var if var > 0 else 0.0}


def tech2_check(cfg, window=TECH2_WINDOW):
    """
    ∫_A (∫|K'(x-y)|^m e^{-U(y)-mK(x-y)} dy)^{1/m} dx on a compact window A.

    Finiteness guarantees F' = E[K'(X-Y) | X].

    Returns:
        Dictionary {value, finite, window}
    """
    grid = cfg.grid
    pot = cfg.potentials
    m = cfg.m
    x = grid.points
    km = kernel_power(pot.weight_kernel, m)

    def weight(u):
        with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
            h = np.abs(pot.dK(u)) ** m * km(u)
        return np.nan_to_num(h, nan=0.0, posinf=np.inf)

    try:
        inner = convolve_weight(GridFunction(grid, pot.exp_minus_U(x)), weight).values
        mask = (x >= window[0]) & (x <= window[1])
        value = float(trapezoid(inner[mask] ** (1.0 / m), x[mask]))
    except (OverflowError, ValueError):
        value = float('inf')
    return {'value': value, 'finite': bool(np.isfinite(value)), 'window': list(window)}


def drift_identity_check(law, cfg, sol, window=2.0):
    """
    Compare F'(x) with ∫K'(x-y)κ(y|x)dy on |x| ≤ window.

    Returns:
        Dictionary {max_error, x, F_prime, conditional_drift}
    """
    grid = cfg.grid
    x = grid.points
    rows = np.flatnonzero(np.abs(x) <= window)
    kappa = conditional_matrix(law)[rows]
    with np.errstate(divide='ignore', invalid='ignore'):
        drift = np.nan_to_num(cfg.potentials.dK(x[rows][:, None] - x[None, :]) * kappa, nan=0.0, posinf=0.0, neginf=0.0)
    cond = drift @ quadrature_weights(grid)
    fp = sol.F_prime.values[rows]
    return {'max_error': float(np.max(np.abs(fp - cond))), 'x': x[rows], 'F_prime': fp,
            'conditional_drift': cond}


def export_edge_law(law, out_dir, stride=1, prefix='edge'):
    """
    Write ρ as a CSV matrix (grid points in header row and first column) and
    l, ρ_X as a CSV with columns x, l, rho_X.

    Args:
        law: EdgeLaw
        out_dir: Output directory
        stride: Keep every stride-th grid point in the matrix export

    Returns:
        List of written paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = law.grid.points
    idx = np.arange(0, law.grid.n, max(1, int(stride)))
    matrix = pd.DataFrame(law.rho[np.ix_(idx, idx)], index=x[idx], columns=[f'{v:.10g}' for v in x[idx]])
    matrix.index.name = 'x'
    rho_path = out_dir / f'{prefix}_rho.csv'
    matrix.to_csv(rho_path)

    marg_path = out_dir / f'{prefix}_marginal.csv'
    pd.DataFrame({'x': x, 'l': law.l.values, 'rho_X': law.rho_X.values}).to_csv(marg_path, index=False)

    json_path = out_dir / f'{prefix}_law.json'
    summary = {'Z': law.Z, 'log_Z': law.log_Z, 'C1': law.C1, 'C2': law.C2, 'tech1': law.tech1}
    summary.update(edge_correlation(law))
    with open(json_path, 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return [rho_path, marg_path, json_path]
