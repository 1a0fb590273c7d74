"""
Fixed-point solver for the edge potential F
Damped Picard iteration of the map T and, for m = 2, power iteration of the
positive kernel operator S. Solutions are gauged so that F(0) = 0.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from config import (BAND_EPS, DEFAULT_DAMPING, DEFAULT_MAX_ITER, DEFAULT_TOL, EDGE_MASS_TOL,
                    POWER_TOL)
from numerics import GridFunction, convolve_weight, integrate, log_convolve_weight


@dataclass(eq=False)
class FixedPointSolution:
    """Gauged solution F with gauge constant C and solver diagnostics."""

    F: GridFunction
    C: float
    residual: float
    iterations: int
    integrability: float
    converged: bool = True
    method: str = 'picard'
    status: str = 'converged'
    edge_mass: float = 0.0
    history: list = field(default_factory=list)

    @property
    def grid(self):
        return self.F.grid

    @property
    def F_prime(self):
        return self.F.derivative()

    def sidecar(self):
        return {
            'C': self.C,
            'residual': self.residual,
            'iterations': self.iterations,
            'integrability': self.integrability,
            'converged': self.converged,
            'method': self.method,
            'status': self.status,
            'edge_mass': self.edge_mass,
        }


def _gauge(values, grid):
    return values - np.interp(0.0, grid.points, values)


def _T_with_constant(cfg, F_values, max_workers=1):
    """Gauged T(F) and the log-normalizer at x = 0."""
    grid = cfg.grid
    pot = cfg.potentials
    log_g = -pot.U(grid.points) - (cfg.m - 1) * F_values
    log_conv = log_convolve_weight(log_g, grid, pot.weight_kernel, max_workers=max_workers)
    if not np.isfinite(log_conv).all():
        raise ValueError("mass underflow")
    c0 = float(np.interp(0.0, grid.points, log_conv))
    return c0 - log_conv, c0


def apply_T(cfg, F, max_workers=1):
    """
    One application of the fixed-point map.

    T(F)(x) = log∫e^{-U(y)-K(y)-(m-1)F(y)}dy - log∫e^{-U(y)-K(x-y)-(m-1)F(y)}dy

    Args:
        cfg: ModelConfig
        F: GridFunction on cfg.grid
        max_workers: Threads for the convolution

    Returns:
        T(F) as a GridFunction gauged to vanish at x = 0
    """
    if not np.isfinite(F.values).all():
        raise ValueError("F must be finite")
    T, _ = _T_with_constant(cfg, F.values, max_workers)
    return GridFunction(cfg.grid, T)


def _integrability(cfg, F_values):
    """∫e^{-U-mF} and the relative weight of that integrand at the grid ends."""
    log_w = -cfg.potentials.U(cfg.grid.points) - cfg.m * F_values
    with np.errstate(over='ignore'):
        w = np.exp(log_w)
    if not np.isfinite(w).all():
        return float('inf'), 1.0
    top = w.max()
    edge = max(w[0], w[-1]) / top if top > 0 else 1.0
    return integrate(GridFunction(cfg.grid, w)), float(edge)


def _finish(cfg, F_values, converged, iterations, method, history, max_workers, C=None):
    T, c0 = _T_with_constant(cfg, F_values, max_workers)
    residual = float(np.max(np.abs(T - F_values)))
    integrability, edge_mass = _integrability(cfg, F_values)
    status = 'converged' if converged else 'not converged'
    if converged and (not np.isfinite(integrability) or edge_mass > EDGE_MASS_TOL):
        converged = False
        status = 'not converged: mass at grid boundary'
    return FixedPointSolution(
        F=GridFunction(cfg.grid, F_values),
        C=c0 if C is None else C,
        residual=residual,
        iterations=iterations,
        integrability=integrability,
        converged=converged,
        method=method,
        status=status,
        edge_mass=edge_mass,
        history=history,
    )


def solve_picard(cfg, damping=DEFAULT_DAMPING, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, init=None,
                 max_workers=1, verbose=False):
    """
    Damped Picard iteration F ← (1-α)F + αT(F), gauged each step.

    Args:
        cfg: ModelConfig
        damping: α in (0, 1]
        tol: Stop when sup|ΔF| < tol
        max_iter: Iteration cap
        init: Initial GridFunction (default F ≡ 0)
        max_workers: Threads for the convolution
        verbose: Print progress lines

    Returns:
        FixedPointSolution; converged=False when max_iter is reached
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = cfg.grid
    if init is None:
        F = np.zeros(grid.n)
    else:
        if init.grid != grid:
            raise ValueError("init must live on the model grid")
        if not np.isfinite(init.values).all():
            raise ValueError("init must be finite")
        F = _gauge(init.values.copy(), grid)

    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        T, _ = _T_with_constant(cfg, F, max_workers)
        new = _gauge((1.0 - damping) * F + damping * T, grid)
        delta = float(np.max(np.abs(new - F)))
        F = new
        history.append(delta)
        if verbose and (iterations % 10 == 0 or delta < tol):
            print(f"🔄 Picard iteration {iterations}: sup|ΔF| = {delta:.3e}")
        if delta < tol:
            converged = True
            break

    sol = _finish(cfg, F, converged, iterations, 'picard', history, max_workers)
    if verbose:
        mark = '✅' if sol.converged else '⚠️'
        print(f"{mark} Picard {sol.status} after {iterations} iterations (residual {sol.residual:.3e})")
    return sol


def solve_power_m2(cfg, tol=POWER_TOL, max_iter=DEFAULT_MAX_ITER, max_workers=1, verbose=False):
    """
    Power iteration for m = 2 on Sφ(x) = ∫φ(y)e^{-K(x-y)-U(y)}dy.

    φ = e^{-F} is the positive eigenfunction; the eigenvalue λ is the
    Rayleigh quotient in L²(e^{-U}), for which S is self-adjoint, and
    C = log λ.

    Args:
        cfg: ModelConfig with m = 2
        tol: Stop when the sup-distance of successive normalized φ is below tol
        max_iter: Iteration cap

    Returns:
        FixedPointSolution with method='power'
    """
    if cfg.m != 2:
        raise ValueError("power iteration requires m = 2")
    grid = cfg.grid
    pot = cfg.potentials
    eU = pot.exp_minus_U(grid.points)
    kernel = pot.weight_kernel

    phi = np.ones(grid.n)
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        s = convolve_weight(GridFunction(grid, phi * eU), kernel, max_workers=max_workers).values
        top = s.max()
        if not top > 0:
            raise ValueError("zero mass")
        s = s / top
        delta = float(np.max(np.abs(s - phi)))
        phi = s
        history.append(delta)
        if verbose and (iterations % 10 == 0 or delta < tol):
            print(f"🔄 Power iteration {iterations}: sup|Δφ| = {delta:.3e}")
        if delta < tol:
            converged = True
            break

    if not (phi > 0).all():
        raise ValueError("mass underflow")
    s = convolve_weight(GridFunction(grid, phi * eU), kernel, max_workers=max_workers).values
    lam = integrate(GridFunction(grid, phi * s * eU)) / integrate(GridFunction(grid, phi * phi * eU))
    F = _gauge(-np.log(phi), grid)

    sol = _finish(cfg, F, converged, iterations, 'power', history, max_workers, C=float(np.log(lam)))
    if verbose:
        mark = '✅' if sol.converged else '⚠️'
        print(f"{mark} Power iteration {sol.status} after {iterations} iterations (λ = {lam:.8g})")
    return sol


def band_check(cfg, sol, eps=BAND_EPS):
    """
    Check d - ε ≤ F'' ≤ c + ε on the grid interior, d = b - c/(m-1).

    Args:
        cfg: ModelConfig with curvature bounds
        sol: FixedPointSolution

    Returns:
        Dictionary {in_band, min_F2, max_F2, d, c}
    """
    bounds = cfg.potentials.curvature_bounds
    if bounds is None:
        raise ValueError("curvature unavailable")
    d = bounds['b'] - bounds['c'] / (cfg.m - 1)
    c = bounds['c']
    f2 = sol.F.second_difference()
    lo, hi = float(f2.min()), float(f2.max())
    return {'in_band': bool(lo >= d - eps and hi <= c + eps), 'min_F2': lo, 'max_F2': hi,
            'd': float(d), 'c': float(c)}


def linear_branch_init(grid, m, z, branch='plus'):
    """
    Exact linear-model solution F = (1-ρ±)x²/2 on a grid.

    Used to start Picard iteration on a chosen branch when two Gaussian
    solutions exist (2√(m-1) < z < m).

    Args:
        grid: Grid
        m: Tree degree
        z: Spectral parameter
        branch: 'plus' or 'minus'

    Returns:
        GridFunction
    """
    if branch not in ('plus', 'minus'):
        raise ValueError("branch must be 'plus' or 'minus'")
    disc = z * z - 4.0 * (m - 1)
    if disc < 0:
        raise ValueError("no real correlation for this (m, z)")
    sign = -1.0 if branch == 'plus' else 1.0
    rho = (z + sign * np.sqrt(disc)) / (2.0 * (m - 1))
    return GridFunction(grid, 0.5 * (1.0 - rho) * grid.points ** 2)


def fitted_correlation(sol, window=2.0):
    """
    Edge correlation implied by a linear-model solution: ρ̂ = 1 - F''.

    F'' is averaged over |x| ≤ window.
    """
    x = sol.grid.points[1:-1]
    f2 = sol.F.second_difference()
    return float(1.0 - f2[np.abs(x) <= window].mean())


def export_solution(sol, out_dir, prefix='solution'):
    """
    Write F as CSV (x, F, dF, exp_minus_F) plus a JSON sidecar.

    Args:
        sol: FixedPointSolution
        out_dir: Output directory (created if missing)
        prefix: File name prefix

    Returns:
        List of written paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({
        'x': sol.grid.points,
        'F': sol.F.values,
        'dF': sol.F_prime.values,
        'exp_minus_F': np.exp(-sol.F.values),
    })
    csv_path = out_dir / f'{prefix}_F.csv'
    json_path = out_dir / f'{prefix}_F.json'
    df.to_csv(csv_path, index=False)
    with open(json_path, 'w') as f:
        json.dump(sol.sidecar(), f, indent=2, sort_keys=True)
    return [csv_path, json_path]
