"""
Verification suite
Named checks comparing solver, sampler and simulator output with the
closed-form cases; every check yields rows of a pass/fail table
"""

import json

import numpy as np
import pandas as pd

from analytics import (dyson_report, kesten_mckay_moment, linear_report, resolvent, sign_scan_root,
                       stieltjes_check)
from config import (DECIMAL_PLACES, DEFAULT_TOL, HOMOGENEITY_THRESHOLD, KS_DYSON_THRESHOLD, KS_ESTIMATED_THRESHOLD,
                    KS_MARGINAL_THRESHOLD, MARKOV_MIN_SAMPLES, MARKOV_THRESHOLD, MIN_STATIONARITY_ENSEMBLE,
                    SCIENTIFIC_COLUMNS, VERIFY_DECOUPLED_N, VERIFY_ESTIMATED_N, VERIFY_PROBE_Z, VERIFY_RESOLVENT_PAIRS,
                    VERIFY_SEED, VERIFY_TREE_SAMPLES, VERIFY_TREE_SDE_REPLICAS)
from edge_law import boundary_law_residual, build_edge_law, drift_identity_check, edge_correlation, tech2_check
from fixed_point import apply_T, band_check, fitted_correlation, linear_branch_init
from local_sim import run_stationarity_test
from numerics import GridFunction, ks_to_density
from potentials import make_confinement, make_dyson_model, make_linear_model, make_named_dyson_model
from solution_cache import solve_cached
from tree import consistency_check, distance_correlations, homogeneity_test, markov_test, sample_tree_parallel, \
    simulate_tree_sde

COLUMNS = ['check', 'item', 'value', 'threshold', 'passed', 'lhs', 'rhs', 'err', 'detail']


class CheckContext:
    """Shared settings and memoized solved models for one verification run."""

    def __init__(self, scale=1.0, max_workers=1, seed=VERIFY_SEED, use_cache=True, verbose=False):
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)
        self.max_workers = max_workers
        self.seed = int(seed)
        self.use_cache = use_cache
        self.verbose = verbose
        self._solved = {}

    def size(self, base, minimum):
        return max(int(base * self.scale), minimum)

    def solved(self, cfg, method='picard'):
        """(sol, law) for cfg, solved once per run."""
        key = (json.dumps(cfg.description, sort_keys=True), method)
        if key not in self._solved:
            sol = solve_cached(cfg, method=method, use_cache=self.use_cache, max_workers=self.max_workers,
                               verbose=self.verbose)
            if not sol.converged:
                raise ValueError(f"fixed point {sol.status}")
            self._solved[key] = (sol, build_edge_law(cfg, sol))
        return self._solved[key]


def _row(check, item, value, threshold, passed, lhs=np.nan, rhs=np.nan, err=np.nan, detail=''):
    return {'check': check, 'item': item, 'value': float(value), 'threshold': float(threshold),
            'passed': bool(passed), 'lhs': float(lhs), 'rhs': float(rhs), 'err': float(err), 'detail': detail}


def _below(check, item, value, threshold, detail=''):
    return _row(check, item, value, threshold, value < threshold, detail=detail)


def _mc_threshold(base, n, k=4.0):
    # keep Monte-Carlo thresholds above k standard errors when --scale shrinks the sample
    return max(base, k / np.sqrt(n))


def check_linear_fixed_point(ctx):
    name = 'linear-fixed-point'
    cfg = make_linear_model(3, 4.0)
    sol, _ = ctx.solved(cfg)
    report = linear_report(3, 4.0)
    x = cfg.grid.points
    window = np.abs(x) <= 6.0
    exact = 0.5 * (1.0 - report.rho_plus) * x ** 2
    err = float(np.max(np.abs(sol.F.values[window] - exact[window])))
    band = band_check(cfg, sol)
    f1 = sol.F(1.0)
    return [
        _below(name, 'sup |F - (1-ρ₊)x²/2| on [-6,6]', err, 1e-3),
        _row(name, 'F(1)', f1, 1e-4, abs(f1 - 0.5 * (1.0 - report.rho_plus)) < 1e-4,
             lhs=f1, rhs=0.5 * (1.0 - report.rho_plus), err=abs(f1 - 0.5 * (1.0 - report.rho_plus))),
        _row(name, "F'' in band [d, c]", band['max_F2'], band['c'], band['in_band'],
             detail=f"min F''={band['min_F2']:.6f}, d={band['d']:.3f}"),
    ]


def check_resolvent_identity(ctx):
    name = 'resolvent-identity'
    rows = []
    for m, z in VERIFY_RESOLVENT_PAIRS:
        res = resolvent(m, z)
        sigma2 = linear_report(m, z).sigma2_plus
        err = abs(res - sigma2)
        rows.append(_row(name, f'm={m} z={z:g} resolvent vs σ²₊', err, 1e-12, err < 1e-12,
                         lhs=res, rhs=sigma2, err=err))
        cfg = make_linear_model(m, z)
        _, law = ctx.solved(cfg)
        var = edge_correlation(law)['variance']
        err = abs(res - var)
        rows.append(_row(name, f'm={m} z={z:g} resolvent vs Var(ρ_X)', err, 1e-3, err < 1e-3,
                         lhs=res, rhs=var, err=err))
    return rows


def check_kesten_mckay(ctx):
    name = 'kesten-mckay'
    mass = kesten_mckay_moment(3, 0)
    second = kesten_mckay_moment(3, 2)
    rows = [
        _row(name, '∫μ (m=3)', abs(mass - 1.0), 1e-6, abs(mass - 1.0) < 1e-6, lhs=mass, rhs=1.0),
        _row(name, 'second moment (m=3)', abs(second - 3.0), 1e-4, abs(second - 3.0) < 1e-4, lhs=second, rhs=3.0),
    ]
    for m, z, tol in ((3, 4.0, 1e-4), (3, 10.0, 1e-6), (2, 3.0, 1e-3)):
        s = stieltjes_check(m, z)
        rows.append(_row(name, f'Stieltjes m={m} z={z:g}', s['err'], tol, s['err'] < tol, **s))
    return rows


def check_dyson_m2(ctx):
    name = 'dyson-m2'
    report = dyson_report(make_named_dyson_model(2, 'gaussian'), max_workers=ctx.max_workers)
    quartic = dyson_report(make_named_dyson_model(2, 'quartic'), max_workers=ctx.max_workers)
    s = quartic.moments
    return [
        _row(name, 'r = √3 (gaussian)', abs(report.r - np.sqrt(3.0)), 1e-8, abs(report.r - np.sqrt(3.0)) < 1e-8,
             lhs=report.r, rhs=np.sqrt(3.0), err=abs(report.r - np.sqrt(3.0))),
        _below(name, 'fixed-point residual of -log(x²+r) (gaussian)', report.fixed_point_residual, 1e-6),
        _row(name, 'r = √(s₄/s₀) (quartic)', abs(quartic.r - np.sqrt(s[4] / s[0])), 1e-8,
             abs(quartic.r - np.sqrt(s[4] / s[0])) < 1e-8, lhs=quartic.r, rhs=np.sqrt(s[4] / s[0])),
        _below(name, 'fixed-point residual (quartic)', quartic.fixed_point_residual, 1e-6),
    ]


def check_dyson_m3(ctx):
    name = 'dyson-m3'
    report = dyson_report(make_named_dyson_model(3, 'gaussian'), max_workers=ctx.max_workers)
    target = np.array([1.0, 1.0, -3.0, -15.0])
    coeff_err = float(np.max(np.abs(np.array(report.normalized_coeffs) - target)))
    oracle = sign_scan_root(report.poly_coeffs)
    scan_err = abs(report.r - oracle) if oracle is not None else np.inf
    signs = ''.join('+' if c > 0 else '-' for c in report.poly_coeffs)
    return [
        _below(name, 'coefficients ∝ r³+r²-3r-15', coeff_err, 1e-8),
        _row(name, 'sign pattern', report.sign_changes, 1, report.sign_changes == 1, detail=signs),
        _row(name, 'bisection vs sign scan', scan_err, 1e-8, scan_err < 1e-8, lhs=report.r,
             rhs=np.nan if oracle is None else oracle, err=scan_err),
        _row(name, 'r ≈ 2.5297', abs(report.r - 2.5297), 1e-3, abs(report.r - 2.5297) < 1e-3),
        _below(name, 'fixed-point residual', report.fixed_point_residual, 1e-6),
    ]


def check_boundary_law(ctx):
    name = 'boundary-law'
    rows = []
    models = ((make_linear_model(3, 4.0), 'picard', 'linear m=3 z=4'),
              (make_named_dyson_model(2, 'gaussian'), 'power', 'dyson m=2 gaussian'))
    for cfg, method, label in models:
        sol, law = ctx.solved(cfg, method)
        rows.append(_below(name, f'boundary-law residual ({label})', boundary_law_residual(law, cfg), 1e-5))
        rows.append(_below(name, f'consistency p₁ → p₀ ({label})', consistency_check(law, cfg), 1e-5))
        rows.append(_row(name, f'drift integrability ({label})', law.tech1['value'], np.inf, law.tech1['finite']))
    return rows


def check_tree_sampler(ctx):
    name = 'tree-sampler'
    cfg = make_linear_model(3, 4.0)
    _, law = ctx.solved(cfg)
    n = ctx.size(VERIFY_TREE_SAMPLES, 10_000)
    samples = sample_tree_parallel(law, 3, n, ctx.seed, max_workers=ctx.max_workers)
    rho = linear_report(3, 4.0).rho_plus
    rows = []
    table = distance_correlations(samples)
    for _, r in table[table['d'] > 0].iterrows():
        target = rho ** r['d']
        err = abs(r['correlation'] - target)
        rows.append(_row(name, f"corr(root, d={int(r['d'])}) vs ρ₊^d", err, 3 * r['se'], err < 3 * r['se'],
                         lhs=r['correlation'], rhs=target, err=err))
    markov = markov_test(samples, kind='linear', min_samples=min(MARKOV_MIN_SAMPLES, n),
                         threshold=_mc_threshold(MARKOV_THRESHOLD, n))
    rows.append(_row(name, 'Markov partial correlation', abs(markov['partial_corr']),
                     _mc_threshold(MARKOV_THRESHOLD, n), markov['pass'], detail=markov['method']))
    homog = homogeneity_test(samples, threshold=_mc_threshold(HOMOGENEITY_THRESHOLD, n, k=6.0))
    rows.append(_row(name, 'homogeneity 2-D KS', homog['ks2d'], _mc_threshold(HOMOGENEITY_THRESHOLD, n, k=6.0),
                     homog['pass']))
    return rows


def check_local_stationarity(ctx):
    name = 'local-stationarity'
    rows = []
    cfg = make_linear_model(3, 4.0)
    sol, law = ctx.solved(cfg)
    rng = np.random.default_rng(ctx.seed)

    n = ctx.size(VERIFY_DECOUPLED_N, MIN_STATIONARITY_ENSEMBLE)
    res = run_stationarity_test(cfg, sol, law, n, 1e-3, 10.0, mode='decoupled', rng=rng, verbose=ctx.verbose)
    threshold = _mc_threshold(KS_MARGINAL_THRESHOLD, n, k=2.0)
    rows.append(_below(name, f'decoupled KS to ρ_X (N={n})', res['ks_marginal'], threshold))
    rows.append(_below(name, f'decoupled symmetry KS (N={n})', res['symmetry_ks'], threshold))

    n = ctx.size(VERIFY_ESTIMATED_N, MIN_STATIONARITY_ENSEMBLE)
    res = run_stationarity_test(cfg, sol, law, n, 1e-3, 10.0, mode='estimated', rng=rng, verbose=ctx.verbose)
    rows.append(_below(name, f'estimated KS to ρ_X (N={n})', res['ks_marginal'],
                       _mc_threshold(KS_ESTIMATED_THRESHOLD, n, k=2.5)))

    dyson = make_named_dyson_model(2, 'gaussian')
    dsol, dlaw = ctx.solved(dyson, 'power')
    res = run_stationarity_test(dyson, dsol, dlaw, n, 1e-3, 10.0, mode='decoupled', rng=rng, verbose=ctx.verbose)
    rows.append(_below(name, f'dyson m=2 decoupled KS to ρ_X (N={n})', res['ks_marginal'],
                       _mc_threshold(KS_DYSON_THRESHOLD, n, k=2.5)))
    return rows


def check_tree_sde(ctx):
    name = 'tree-sde'
    cfg = make_linear_model(3, 4.0)
    sol, law = ctx.solved(cfg)
    replicas = ctx.size(VERIFY_TREE_SDE_REPLICAS, 250)
    init = sample_tree_parallel(law, 2, replicas, ctx.seed, max_workers=ctx.max_workers)
    state = simulate_tree_sde(cfg, sol, 2, 1e-3, 5.0, init, ctx.seed + 1, max_workers=ctx.max_workers)
    pooled = state.root_snapshots.ravel()
    ks = ks_to_density(pooled, law.rho_X)
    threshold = _mc_threshold(KS_MARGINAL_THRESHOLD, pooled.size, k=2.0)
    return [_below(name, f'root KS to ρ_X (k=2, {replicas} replicas, pooled)', ks, threshold,
                   detail=f'{pooled.size} pooled root values')]


def check_m2_equivalence(ctx):
    name = 'm2-equivalence'
    cfg = make_linear_model(2, 3.0)
    picard, _ = ctx.solved(cfg, 'picard')
    power, _ = ctx.solved(cfg, 'power')
    diff = float(np.max(np.abs(picard.F.values - power.F.values)))
    rows = [_below(name, 'sup |F_picard - F_power|', diff, 1e-6)]
    for label, sol in (('picard', picard), ('power', power)):
        rho = fitted_correlation(sol)
        resid = abs((2 - 1) * rho ** 2 - 3.0 * rho + 1.0)
        rows.append(_below(name, f'(m-1)ρ̂²-zρ̂+1 ({label})', resid, 1e-4, detail=f'ρ̂={rho:.8f}'))
    gap = abs(picard.C - power.C)
    rows.append(_below(name, 'gauge constant C agreement', gap, 1e-6))
    return rows


def check_regime_table(ctx):
    name = 'regime-table'
    expected = {'i': (True, None), 'ii': (True, None), 'iii': (True, False), 'iv': (False, None), 'v': (None, None)}
    rows = []
    for z, regime in zip(VERIFY_PROBE_Z, ('i', 'ii', 'iii', 'iv', 'v')):
        rep = linear_report(3, z)
        flags = (rep.extendable_plus, rep.extendable_minus)
        ok = rep.regime == regime and flags == expected[regime]
        worst = 0.0
        for rho, sigma2 in ((rep.rho_plus, rep.sigma2_plus), (rep.rho_minus, rep.sigma2_minus)):
            if rho is None:
                continue
            worst = max(worst, abs(2 * rho ** 2 - z * rho + 1.0), abs(sigma2 * (z - 3 * rho) - 1.0))
        rows.append(_row(name, f'z={z:.8g} → regime {rep.regime}', worst, 1e-12, ok and worst < 1e-12,
                         detail=f'extendable {flags}'))
    return rows


def check_gauge_invariance(ctx):
    name = 'gauge-invariance'
    cfg = make_linear_model(3, 4.0)
    F = linear_branch_init(cfg.grid, 3, 4.0)
    base = apply_T(cfg, F, ctx.max_workers).values
    shifted = apply_T(cfg, GridFunction(cfg.grid, F.values + 3.7), ctx.max_workers).values
    shift_err = float(np.max(np.abs(base - shifted)))

    U, dU, kind_U, _ = make_confinement('gaussian')
    r0 = dyson_report(make_dyson_model(2, U, dU, kind_U=kind_U), check_fixed_point=False).r
    r1 = dyson_report(make_dyson_model(2, lambda x: U(x) + np.log(5.0), dU, kind_U=kind_U),
                      check_fixed_point=False).r

    sol, _ = ctx.solved(cfg)
    even_err = float(np.max(np.abs(sol.F.values - sol.F.values[::-1])))
    return [
        _below(name, 'T(F + c) = T(F)', shift_err, 1e-12),
        _below(name, 'Dyson r under e^{-U} rescaling', abs(r0 - r1), 1e-10),
        _below(name, 'evenness of solved F', even_err, 10 * DEFAULT_TOL),
    ]


def check_drift_identity(ctx):
    name = 'drift-identity'
    rows = []
    models = ((make_linear_model(3, 4.0), 'picard', 'linear m=3 z=4'),
              (make_named_dyson_model(2, 'gaussian'), 'power', 'dyson m=2 gaussian'))
    for cfg, method, label in models:
        sol, law = ctx.solved(cfg, method)
        res = drift_identity_check(law, cfg, sol)
        rows.append(_below(name, f"sup |F' - E[K'(X-Y)|X]| on [-2,2] ({label})", res['max_error'], 1e-4))
        tech = tech2_check(cfg)
        rows.append(_row(name, f'compact-set integrability ({label})', tech['value'], np.inf, tech['finite']))
    return rows


CHECKS = {
    'linear-fixed-point': (check_linear_fixed_point, 'Picard solution of the linear model vs (1-ρ₊)x²/2'),
    'resolvent-identity': (check_resolvent_identity, 'tree resolvent = σ²₊, algebraically and from the solver'),
    'kesten-mckay': (check_kesten_mckay, 'normalization, second moment and Stieltjes transform'),
    'dyson-m2': (check_dyson_m2, 'r = √(s₄/s₀) and the closed-form fixed point for m = 2'),
    'dyson-m3': (check_dyson_m3, 'moment polynomial, sign pattern and root for m = 3'),
    'boundary-law': (check_boundary_law, 'boundary-law identity and ball consistency'),
    'tree-sampler': (check_tree_sampler, 'distance correlations, Markov and homogeneity of ball samples'),
    'local-stationarity': (check_local_stationarity, 'local equation started from ρ stays at ρ'),
    'tree-sde': (check_tree_sde, 'wired-leaf ball SDE keeps the root marginal ρ_X'),
    'm2-equivalence': (check_m2_equivalence, 'power iteration and Picard agree for m = 2'),
    'regime-table': (check_regime_table, 'five regimes of the linear model with extendability'),
    'gauge-invariance': (check_gauge_invariance, 'shift covariance of T, rescaling invariance of r, evenness'),
    'drift-identity': (check_drift_identity, "F' equals the conditional mean of K'(X-Y)"),
}


def list_checks():
    return pd.DataFrame([{'check': k, 'description': v[1]} for k, v in CHECKS.items()])


def run_checks(names=None, scale=1.0, max_workers=1, seed=VERIFY_SEED, use_cache=True, verbose=False,
               progress_callback=None):
    """
    Run named checks and collect their rows.

    A check that raises contributes one failed row carrying the error message.

    Args:
        names: Check names (default: all registered checks)
        scale: Multiplier for Monte-Carlo sample sizes
        max_workers: Threads for solvers and samplers
        seed: Master seed
        use_cache: Reuse cached fixed-point solutions
        progress_callback: Optional callback function(name, success, current, total)

    Returns:
        DataFrame with columns check, item, value, threshold, passed, lhs, rhs, err, detail
    """
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown check '{unknown[0]}'; available: {', '.join(CHECKS)}")
    ctx = CheckContext(scale=scale, max_workers=max_workers, seed=seed, use_cache=use_cache, verbose=verbose)

    rows = []
    for i, name in enumerate(names, start=1):
        if verbose:
            print(f"🔄 Running {name}...")
        try:
            check_rows = CHECKS[name][0](ctx)
            ok = all(r['passed'] for r in check_rows)
        except Exception as e:
            print(f"❌ {name}: {e}")
            check_rows = [_row(name, 'error', np.nan, np.nan, False, detail=str(e))]
            ok = False
        rows.extend(check_rows)
        if verbose:
            print(f"{'✅' if ok else '❌'} {name}")
        if progress_callback:
            progress_callback(name, ok, i, len(names))
    return pd.DataFrame(rows, columns=COLUMNS)


def format_results_dataframe(df):
    """
    Round numeric columns of a results table per DECIMAL_PLACES and render
    SCIENTIFIC_COLUMNS as %.3e strings.

    Args:
        df: Results DataFrame

    Returns:
        Formatted DataFrame
    """
    df = df.copy()
    for col in df.columns:
        if col in DECIMAL_PLACES:
            df[col] = df[col].astype(float).round(DECIMAL_PLACES[col])
        elif col in SCIENTIFIC_COLUMNS:
            df[col] = df[col].map(lambda v: '' if pd.isna(v) else f'{v:.3e}')
    return df


def run_model_checks(cfg, method='picard', max_workers=1, use_cache=True, verbose=False):
    """
    Model-agnostic checks for one configuration: solver convergence, the
    boundary-law identity, ball consistency, the drift identity, evenness
    and, when curvature bounds exist, the F'' band.

    Returns:
        DataFrame with the same columns as run_checks
    """
    name = 'model'
    rows = []
    sol = solve_cached(cfg, method=method, use_cache=use_cache, max_workers=max_workers, verbose=verbose)
    rows.append(_row(name, f'fixed point ({sol.method})', sol.residual, 1e-6, sol.converged and sol.residual < 1e-6,
                     detail=sol.status))
    if not sol.converged:
        return pd.DataFrame(rows, columns=COLUMNS)

    law = build_edge_law(cfg, sol)
    rows.append(_below(name, 'boundary-law residual', boundary_law_residual(law, cfg), 1e-5))
    rows.append(_below(name, 'consistency p₁ → p₀', consistency_check(law, cfg), 1e-5))
    rows.append(_below(name, "sup |F' - E[K'(X-Y)|X]| on [-2,2]", drift_identity_check(law, cfg, sol)['max_error'],
                       1e-4))
    if cfg.grid.is_symmetric and cfg.kind != 'tabulated':
        rows.append(_below(name, 'evenness of solved F', float(np.max(np.abs(sol.F.values - sol.F.values[::-1]))),
                           10 * DEFAULT_TOL))
    if cfg.potentials.curvature_bounds is not None:
        band = band_check(cfg, sol)
        rows.append(_row(name, "F'' in band [d, c]", band['max_F2'], band['c'], band['in_band'],
                         detail=f"min F''={band['min_F2']:.6f}, d={band['d']:.3f}"))
    rows.append(_row(name, 'drift integrability', law.tech1['value'], np.inf, law.tech1['finite']))
    return pd.DataFrame(rows, columns=COLUMNS)
