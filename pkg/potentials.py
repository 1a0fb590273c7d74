"""
Potential pairs (U, K) and model configurations
Confinement U, even interaction K, their derivatives, convexity metadata and
the integrability / uniqueness checks that depend only on the model
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from config import DEFAULT_GRID, TECH_P, validate_model_config
from numerics import Grid, GridFunction, PolynomialKernel, convolve_weight, integrate, quadrature_weights


@dataclass(frozen=True, eq=False)
class PotentialPair:
    """
    Confinement U and even interaction K with derivatives.

    weight_kernel evaluates e^{-K} on arrays of differences; for the
    log-repulsive interaction it is the polynomial u² handled by moments.
    curvature_bounds is {'a': ess inf U'', 'b': ess inf K'', 'c': sup |K''|,
    'estimated': bool} or None when K'' is unbounded.
    """

    U: object
    dU: object
    K: object
    dK: object
    kind_U: tuple
    kind_K: tuple
    weight_kernel: object
    curvature_bounds: dict = None

    def exp_minus_U(self, x):
        with np.errstate(over='ignore'):
            return np.exp(-self.U(x))


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """Tree degree m, potential pair and grid; description is the JSON form when known."""

    m: int
    potentials: PotentialPair
    grid: Grid
    description: dict = field(default=None)

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be ≥ 2")

    @property
    def kind(self):
        return self.potentials.kind_K[0]

    @property
    def is_log_repulsive(self):
        return self.potentials.kind_K[0] == 'log_repulsive'


def _default_grid(grid):
    if grid is None:
        return Grid(DEFAULT_GRID['lo'], DEFAULT_GRID['hi'], DEFAULT_GRID['n'])
    return grid


def _quadratic(q):
    q = float(q)
    return (lambda x: 0.5 * q * np.asarray(x, dtype=float) ** 2,
            lambda x: q * np.asarray(x, dtype=float))


def _gaussian_weight(u):
    return np.exp(-0.5 * np.asarray(u, dtype=float) ** 2)


def make_confinement(name, scale=1.0):
    """
    Named confinement potentials.

    Args:
        name: 'gaussian' (scale·x²/2) or 'quartic' (scale·x⁴/4)
        scale: Positive prefactor

    Returns:
        Tuple (U, dU, kind_U, a) with a = ess inf U''
    """
    scale = float(scale)
    if name == 'gaussian':
        U, dU = _quadratic(scale)
        return U, dU, ('quadratic', scale), scale
    if name == 'quartic':
        return (lambda x: 0.25 * scale * np.asarray(x, dtype=float) ** 4,
                lambda x: scale * np.asarray(x, dtype=float) ** 3,
                ('custom', 'quartic'), 0.0)
    raise ValueError(f"unknown confinement '{name}'")


def make_linear_model(m, z, grid=None):
    """
    Linear (Gaussian) model U(x)=(z-m)x²/2, K(x)=x²/2.

    Args:
        m: Tree degree (≥ 2)
        z: Spectral parameter
        grid: Optional Grid (default [-10, 10] with 2049 points)

    Returns:
        ModelConfig with quadratic kinds and curvature bounds a=z-m, b=c=1
    """
    if m < 2:
        raise ValueError("m must be ≥ 2")
    grid = _default_grid(grid)
    q = float(z) - m
    U, dU = _quadratic(q)
    K, dK = _quadratic(1.0)
    pair = PotentialPair(
        U=U, dU=dU, K=K, dK=dK,
        kind_U=('quadratic', q), kind_K=('quadratic', 1.0),
        weight_kernel=_gaussian_weight,
        curvature_bounds={'a': q, 'b': 1.0, 'c': 1.0, 'estimated': False},
    )
    description = {'m': int(m), 'potential_kind': 'linear', 'parameters': {'z': float(z)},
                   'grid': grid.describe()}
    return ModelConfig(int(m), pair, grid, description)


def _dyson_K(x):
    with np.errstate(divide='ignore'):
        return -2.0 * np.log(np.abs(np.asarray(x, dtype=float)))


def _dyson_dK(x):
    with np.errstate(divide='ignore'):
        return -2.0 / np.asarray(x, dtype=float)


def make_dyson_model(m, U, dU, grid=None, kind_U=('custom',), description=None):
    """
    Dyson-type model with K(x) = -2 log|x| (β = 2).

    Args:
        m: Tree degree (≥ 2)
        U: Even confinement (vectorized callable)
        dU: Its derivative
        grid: Optional Grid
        kind_U: Tag for U
        description: JSON description for caching (optional)

    Returns:
        ModelConfig with kind_K = ('log_repulsive', 2.0) and no curvature bounds
    """
    if m < 2:
        raise ValueError("m must be ≥ 2")
    grid = _default_grid(grid)
    x = grid.points
    u_vals = np.asarray(U(x), dtype=float)
    if np.max(np.abs(u_vals - np.asarray(U(-x), dtype=float))) > 1e-9:
        raise ValueError("U must be even")

    with np.errstate(over='ignore'):
        e = np.exp(-u_vals)
    w = quadrature_weights(grid)
    for k in range(2 * m + 1):
        s_k = float(w @ (x ** k * e))
        if not np.isfinite(s_k):
            raise ValueError(f"moment s_{k} of e^(-U) is not finite on the grid")
    if not w @ e > 0:
        raise ValueError("e^(-U) has zero mass on the grid")

    pair = PotentialPair(
        U=U, dU=dU, K=_dyson_K, dK=_dyson_dK,
        kind_U=tuple(kind_U), kind_K=('log_repulsive', 2.0),
        weight_kernel=PolynomialKernel((0.0, 0.0, 1.0)),
        curvature_bounds=None,
    )
    return ModelConfig(int(m), pair, grid, description)


def make_named_dyson_model(m, confinement='gaussian', scale=1.0, grid=None):
    """Dyson model with a named confinement, carrying its JSON description."""
    grid = _default_grid(grid)
    U, dU, kind_U, _ = make_confinement(confinement, scale)
    description = {'m': int(m), 'potential_kind': 'dyson',
                   'parameters': {'U': confinement, 'scale': float(scale)}, 'grid': grid.describe()}
    return make_dyson_model(m, U, dU, grid=grid, kind_U=kind_U, description=description)


def make_free_model(m, confinement='gaussian', scale=1.0, grid=None):
    """
    Non-interacting model K ≡ 0 with a named confinement.

    Returns:
        ModelConfig with kind_K = ('quadratic', 0.0) and b = c = 0
    """
    if m < 2:
        raise ValueError("m must be ≥ 2")
    grid = _default_grid(grid)
    U, dU, kind_U, a = make_confinement(confinement, scale)
    K, dK = _quadratic(0.0)
    pair = PotentialPair(
        U=U, dU=dU, K=K, dK=dK,
        kind_U=kind_U, kind_K=('quadratic', 0.0),
        weight_kernel=lambda u: np.ones_like(np.asarray(u, dtype=float)),
        curvature_bounds={'a': a, 'b': 0.0, 'c': 0.0, 'estimated': False},
    )
    description = {'m': int(m), 'potential_kind': 'free',
                   'parameters': {'U': confinement, 'scale': float(scale)}, 'grid': grid.describe()}
    return ModelConfig(int(m), pair, grid, description)


def make_tabulated_model(m, grid, x_table, U_table, K_table, description=None):
    """
    Model from tabulated U and K.

    U may be +inf (hard core, e^{-U} = 0) and the grid must lie inside the
    table. K is read at |u| from the non-negative part of the table and
    clamped beyond its last entry.
    Curvature bounds come from second finite differences and are labeled
    estimated.

    Args:
        m: Tree degree
        grid: Grid used for solving
        x_table: Increasing table abscissae
        U_table: U values at x_table
        K_table: K values at x_table (only x ≥ 0 entries are used)

    Returns:
        ModelConfig with tabulated kinds
    """
    if m < 2:
        raise ValueError("m must be ≥ 2")
    x_table = np.asarray(x_table, dtype=float)
    U_table = np.asarray(U_table, dtype=float)
    K_table = np.asarray(K_table, dtype=float)
    if not (np.diff(x_table) > 0).all():
        raise ValueError("table x must be strictly increasing")
    if grid.lo < x_table[0] or grid.hi > x_table[-1]:
        raise ValueError(f"grid [{grid.lo:g}, {grid.hi:g}] extends beyond the table [{x_table[0]:g}, {x_table[-1]:g}]")

    with np.errstate(over='ignore'):
        expU = np.exp(-U_table)
    finite_U = np.isfinite(U_table)
    dU_table = np.zeros_like(U_table)
    if finite_U.sum() >= 2:
        dU_table[finite_U] = np.gradient(U_table[finite_U], x_table[finite_U])

    def U(t):
        with np.errstate(divide='ignore'):
            return -np.log(np.interp(t, x_table, expU))

    def dU(t):
        return np.interp(t, x_table, dU_table)

    keep = x_table >= 0
    if keep.sum() < 2:
        raise ValueError("K table needs at least two entries with x ≥ 0")
    kx, kv = x_table[keep], K_table[keep]
    if not np.isfinite(kv).all():
        raise ValueError("tabulated K must be finite")
    dk = np.gradient(kv, kx)

    def K(t):
        return np.interp(np.abs(t), kx, kv)

    def dK(t):
        t = np.asarray(t, dtype=float)
        return np.sign(t) * np.interp(np.abs(t), kx, dk)

    d2U = np.diff(U_table[finite_U], 2) / np.diff(x_table[finite_U])[:-1] ** 2 if finite_U.sum() >= 3 else np.array([0.0])
    d2K = np.diff(kv, 2) / np.diff(kx)[:-1] ** 2 if len(kx) >= 3 else np.array([0.0])
    bounds = {'a': float(d2U.min()), 'b': float(d2K.min()), 'c': float(np.abs(d2K).max()), 'estimated': True}

    pair = PotentialPair(
        U=U, dU=dU, K=K, dK=dK,
        kind_U=('tabulated',), kind_K=('tabulated',),
        weight_kernel=lambda u: np.exp(-K(u)),
        curvature_bounds=bounds,
    )
    return ModelConfig(int(m), pair, grid, description)


def make_model_from_config(raw):
    """
    Build a ModelConfig from a configuration dictionary (see CONFIG_SCHEMA.md).

    Args:
        raw: Dictionary with keys m, potential_kind, parameters, grid

    Returns:
        ModelConfig
    """
    cfg = validate_model_config(raw)
    grid = Grid(cfg['grid']['lo'], cfg['grid']['hi'], cfg['grid']['n'])
    m = cfg['m']
    params = cfg['parameters']
    kind = cfg['potential_kind']

    if kind == 'linear':
        return make_linear_model(m, params['z'], grid=grid)
    if kind == 'dyson':
        return make_named_dyson_model(m, params['U'], params['scale'], grid=grid)
    if kind == 'free':
        return make_free_model(m, params['U'], params['scale'], grid=grid)

    table = Path(params['table'])
    df = pd.read_csv(table)
    missing = {'x', 'U', 'K'} - set(df.columns)
    if missing:
        raise ValueError(f"table {params['table']} missing columns: {', '.join(sorted(missing))}")
    # table contents, not just its path, identify the model
    description = dict(cfg, table_md5=hashlib.md5(table.read_bytes()).hexdigest())
    return make_tabulated_model(m, grid, df['x'].to_numpy(), df['U'].to_numpy(), df['K'].to_numpy(),
                                description=description)


def check_uniqueness_condition(cfg):
    """
    Sufficient condition for uniqueness when m > 2: a > m(c - b).

    Args:
        cfg: ModelConfig

    Returns:
        Dictionary {holds, margin, reason}
    """
    bounds = cfg.potentials.curvature_bounds
    if bounds is None:
        return {'holds': False, 'margin': None, 'reason': 'curvature unavailable'}
    margin = bounds['a'] - cfg.m * (bounds['c'] - bounds['b'])
    reason = 'estimated curvature' if bounds.get('estimated') else ''
    return {'holds': bool(margin > 0), 'margin': float(margin), 'reason': reason}


def kernel_power(kernel, p):
    """e^{-pK} from e^{-K} for a positive integer p."""
    if isinstance(kernel, PolynomialKernel):
        coeffs = np.array([1.0])
        for _ in range(p):
            coeffs = np.polynomial.polynomial.polymul(coeffs, kernel.coeffs)
        return PolynomialKernel(tuple(float(c) for c in coeffs))
    return lambda u: kernel(u) ** p


def _pair_integral(cfg, weight_x, kernel):
    # ∫∫ weight_x(x) e^{-U(x)} kernel(x-y) e^{-U(y)} dy dx
    grid = cfg.grid
    eU = cfg.potentials.exp_minus_U(grid.points)
    conv = convolve_weight(GridFunction(grid, eU), kernel).values
    return integrate(GridFunction(grid, weight_x * eU * conv))


def check_m2_mass(cfg):
    """
    Existence condition for m = 2: ∫∫ e^{-U(x)-U(y)-2K(x-y)} < ∞ on the grid.

    Returns:
        Dictionary {mass, finite}
    """
    try:
        mass = _pair_integral(cfg, np.ones(cfg.grid.n), kernel_power(cfg.potentials.weight_kernel, 2))
    except (OverflowError, ValueError):
        return {'mass': float('inf'), 'finite': False}
    return {'mass': mass, 'finite': bool(np.isfinite(mass) and mass > 0)}


def check_tech1(cfg, p=TECH_P):
    """
    Sufficient integrability ∫∫(|U'|^{mp}+|K'|^{mp}) e^{-U(x)-U(y)-mK(x-y)} < ∞ on the grid.

    Args:
        cfg: ModelConfig
        p: Exponent p > 1

    Returns:
        Dictionary {value, finite, p}
    """
    if p <= 1:
        raise ValueError("p must exceed 1")
    pot = cfg.potentials
    m = cfg.m
    x = cfg.grid.points
    km = kernel_power(pot.weight_kernel, m)

    def drift_weight(u):
        with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
            h = np.abs(pot.dK(u)) ** (m * p) * km(u)
        return np.nan_to_num(h, nan=0.0, posinf=np.inf)

    try:
        term_u = _pair_integral(cfg, np.abs(pot.dU(x)) ** (m * p), km)
        term_k = _pair_integral(cfg, np.ones_like(x), drift_weight)
        value = term_u + term_k
    except (OverflowError, ValueError):
        value = float('inf')
    return {'value': float(value), 'finite': bool(np.isfinite(value)), 'p': float(p)}
