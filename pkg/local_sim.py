"""
Particle simulation of the local equation
One edge (X, Y) driven by U', K' and the conditional drift E[K'(X-Y) | X],
either taken from a solved fixed point (decoupled) or estimated from the
ensemble by kernel regression (estimated)
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from config import (DYSON_CLIP, MIN_REGRESSION_ENSEMBLE, MIN_STATIONARITY_ENSEMBLE, NW_BIN_FRACTION)
from numerics import clip_away_from_zero, ks_2d_statistic, ks_to_density, linear_extrapolator
from tree import sample_tree

MODES = ('decoupled', 'estimated')


@dataclass(eq=False)
class ParticleEnsemble:
    """N independent copies of the edge (X, Y) at a common time."""

    X: np.ndarray
    Y: np.ndarray
    time: float = 0.0
    mode: str = 'decoupled'
    bandwidth: float = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).ravel()
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        if self.X.shape != self.Y.shape:
            raise ValueError("X and Y must have the same length")
        if not (np.isfinite(self.X).all() and np.isfinite(self.Y).all()):
            raise ValueError("particle positions must be finite")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}' (expected one of {', '.join(MODES)})")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def N(self):
        return len(self.X)

    def swapped(self):
        return ParticleEnsemble(self.Y.copy(), self.X.copy(), self.time, self.mode, self.bandwidth)

    def permuted(self, order):
        order = np.asarray(order)
        return ParticleEnsemble(self.X[order], self.Y[order], self.time, self.mode, self.bandwidth)


def default_bandwidth(X, Y):
    """
    Silverman-type bandwidth N^{-1/5}·std over the pooled positions.

    The pooled sample is sorted first so the value depends only on the
    multiset of positions, not on particle order or on which coordinate is X.
    """
    pooled = np.sort(np.concatenate([X, Y]))
    spread = float(np.std(pooled))
    if not spread > 0:
        spread = 1.0
    return len(X) ** (-0.2) * spread


def nadaraya_watson(x_obs, y_obs, x_eval, bandwidth, binned=True):
    """
    Nadaraya-Watson regression with a Gaussian kernel.

    Observations are put in canonical (x, y) order first so the estimate
    is invariant, to the last bit, under any permutation of the pairs.
    The binned version accumulates on a lattice of width
    NW_BIN_FRACTION·bandwidth anchored at min(x_obs), smooths with the
    kernel out to 4 bandwidths and interpolates at x_eval.

    Args:
        x_obs: Regressor sample
        y_obs: Responses
        x_eval: Evaluation points
        bandwidth: Kernel standard deviation
        binned: Use the lattice approximation (O(N)) instead of exact sums (O(N·M))

    Returns:
        Array of estimates at x_eval
    """
    x_obs = np.asarray(x_obs, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    x_eval = np.asarray(x_eval, dtype=float)
    if x_obs.shape != y_obs.shape:
        raise ValueError("x_obs and y_obs must have the same length")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    order = np.lexsort((y_obs, x_obs))
    x_obs = x_obs[order]
    y_obs = y_obs[order]

    if not binned:
        out = np.empty_like(x_eval)
        for start in range(0, len(x_eval), 2048):
            chunk = x_eval[start:start + 2048]
            w = np.exp(-0.5 * ((chunk[:, None] - x_obs[None, :]) / bandwidth) ** 2)
            den = w.sum(axis=1)
            out[start:start + 2048] = np.divide(w @ y_obs, den, out=np.zeros_like(den), where=den > 0)
        return out

    width = bandwidth * NW_BIN_FRACTION
    reach = int(np.ceil(4.0 / NW_BIN_FRACTION))
    lo = x_obs[0] - (reach + 1) * width
    n_bins = int(np.ceil((x_obs[-1] - lo) / width)) + reach + 2
    idx = np.rint((x_obs - lo) / width).astype(int)
    counts = np.bincount(idx, minlength=n_bins).astype(float)
    sums = np.bincount(idx, weights=y_obs, minlength=n_bins)

    offsets = np.arange(-reach, reach + 1) * NW_BIN_FRACTION
    kern = np.exp(-0.5 * offsets ** 2)
    den = np.convolve(counts, kern, mode='same')
    num = np.convolve(sums, kern, mode='same')
    centers = lo + np.arange(n_bins) * width
    fitted = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-12)
    return np.interp(x_eval, centers, fitted)


def _interaction(cfg, X, Y, delta):
    # K'(X-Y) and K'(Y-X), each difference formed directly so swapping X and Y swaps the pair
    diff_xy = X - Y
    diff_yx = Y - X
    if cfg.is_log_repulsive:
        diff_xy = clip_away_from_zero(diff_xy, delta)
        diff_yx = clip_away_from_zero(diff_yx, delta)
    dK = cfg.potentials.dK
    return dK(diff_xy), dK(diff_yx)


def _conditional_drift(cfg, X, Y, kx, ky, mode, f_prime, bandwidth):
    """(m-1)·E[K'(X-Y)|X] evaluated at X and at Y."""
    m = cfg.m
    if mode == 'decoupled':
        return (m - 1) * f_prime(X), (m - 1) * f_prime(Y)
    if len(X) < MIN_REGRESSION_ENSEMBLE:
        raise ValueError("ensemble too small for regression")
    h = bandwidth if bandwidth is not None else default_bandwidth(X, Y)
    # (X, K'(X-Y)) and (Y, K'(Y-X)) are exchangeable under the symmetric law
    g = nadaraya_watson(np.concatenate([X, Y]), np.concatenate([kx, ky]), np.concatenate([X, Y]), h)
    n = len(X)
    return (m - 1) * g[:n], (m - 1) * g[n:]


def _f_prime(ens, sol):
    if ens.mode != 'decoupled':
        return None
    if sol is None:
        raise ValueError("decoupled mode requires a fixed-point solution")
    return linear_extrapolator(sol.grid, sol.F_prime.values)


def step_local(cfg, ens, sol, dt, rng=None, noise=None, delta=DYSON_CLIP, f_prime=None):
    """
    One Euler-Maruyama step of the local equation with noise scale √2.

    Drift on X is -(U'(X) + K'(X-Y) + (m-1)·g(X)) and symmetrically on Y,
    where g is F' (decoupled) or the kernel regression of K'(X-Y) on X
    over the current ensemble (estimated). The regression is computed once
    from the pre-step positions.

    Args:
        cfg: ModelConfig
        ens: ParticleEnsemble
        sol: FixedPointSolution (required in decoupled mode)
        dt: Time step
        rng: numpy Generator, used when noise is not given
        noise: Optional standard normal array of shape (2, N); row 0 drives X
        delta: Clip for |X - Y| with the log-repulsive interaction
        f_prime: Optional precomputed F' evaluator

    Returns:
        New ParticleEnsemble at time ens.time + dt
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if f_prime is None:
        f_prime = _f_prime(ens, sol)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = rng.standard_normal((2, ens.N))
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (2, ens.N):
        raise ValueError(f"noise must have shape (2, {ens.N})")

    X, Y = ens.X, ens.Y
    dU = cfg.potentials.dU
    kx, ky = _interaction(cfg, X, Y, delta)
    gx, gy = _conditional_drift(cfg, X, Y, kx, ky, ens.mode, f_prime, ens.bandwidth)
    scale = np.sqrt(2.0 * dt)
    new_X = X - (dU(X) + kx + gx) * dt + scale * noise[0]
    new_Y = Y - (dU(Y) + ky + gy) * dt + scale * noise[1]
    return ParticleEnsemble(new_X, new_Y, ens.time + dt, ens.mode, ens.bandwidth)


def init_from_edge_law(law, N, rng, mode='decoupled', bandwidth=None):
    """
    N independent draws of (X, Y) from ρ: X from ρ_X, then Y from κ(·|X).

    Returns:
        ParticleEnsemble at time 0
    """
    sample = sample_tree(law, 1, rng, int(N))
    return ParticleEnsemble(sample.column(''), sample.column('0'), 0.0, mode, bandwidth)


def init_iid_normal(N, rng, mode='decoupled', bandwidth=None, scale=1.0):
    """X, Y independent N(0, scale²); a deliberately wrong starting law."""
    return ParticleEnsemble(scale * rng.standard_normal(int(N)), scale * rng.standard_normal(int(N)),
                            0.0, mode, bandwidth)


def trajectory_row(ens, law=None):
    """Summary statistics of an ensemble (one CSV row)."""
    X, Y = ens.X, ens.Y
    row = {
        'time': ens.time,
        'mean_X': float(X.mean()),
        'var_X': float(X.var()),
        'cov_XY': float(np.mean((X - X.mean()) * (Y - Y.mean()))),
    }
    if law is not None:
        row['ks_to_rho_X'] = ks_to_density(X, law.rho_X)
    return row


def _evolve(cfg, ens, sol, dt, n_steps, rng, delta, record_every=None, law=None, rows=None):
    f_prime = _f_prime(ens, sol)
    for step in range(1, n_steps + 1):
        ens = step_local(cfg, ens, sol, dt, rng=rng, delta=delta, f_prime=f_prime)
        if rows is not None and record_every and step % record_every == 0:
            rows.append(trajectory_row(ens, law))
    return ens


def run_stationarity_test(cfg, sol, law, N, dt, T, mode='decoupled', rng=None, bandwidth=None,
                          record_every=None, init=None, delta=DYSON_CLIP, verbose=False):
    """
    Start from ρ, evolve to time T and measure how far the ensemble drifted.

    Args:
        cfg: ModelConfig
        sol: FixedPointSolution (required in decoupled mode)
        law: EdgeLaw of sol
        N: Particles (≥ MIN_STATIONARITY_ENSEMBLE)
        dt: Time step
        T: Final time
        mode: 'decoupled' or 'estimated'
        rng: numpy Generator
        bandwidth: Regression bandwidth (estimated mode; default Silverman-type)
        record_every: Steps between summary rows (default: 10 rows per run)
        init: Optional starting ParticleEnsemble (default: drawn from ρ)

    Returns:
        Dictionary {ks_marginal, symmetry_ks, summary (DataFrame), ensemble}
    """
    if N < MIN_STATIONARITY_ENSEMBLE:
        raise ValueError(f"stationarity test needs N ≥ {MIN_STATIONARITY_ENSEMBLE}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    ens = init if init is not None else init_from_edge_law(law, N, rng, mode, bandwidth)
    n_steps = int(round(T / dt))
    record_every = record_every or max(1, n_steps // 10)

    rows = [trajectory_row(ens, law)]
    ens = _evolve(cfg, ens, sol, dt, n_steps, rng, delta, record_every, law, rows)
    ks_marginal = ks_to_density(ens.X, law.rho_X)
    symmetry_ks = ks_2d_statistic(np.column_stack([ens.X, ens.Y]), np.column_stack([ens.Y, ens.X]))
    if verbose:
        mark = '✅' if ks_marginal < 0.02 else '⚠️'
        print(f"{mark} {mode} ensemble at T={ens.time:g}: KS to ρ_X = {ks_marginal:.4f}, "
              f"symmetry KS = {symmetry_ks:.4f}")
    return {'ks_marginal': ks_marginal, 'symmetry_ks': symmetry_ks, 'summary': pd.DataFrame(rows),
            'ensemble': ens}


def run_relaxation(cfg, sol, law, init, dt, times, rng, delta=DYSON_CLIP):
    """
    KS distance of the X-marginal to ρ_X along an increasing time grid.

    Args:
        init: Starting ParticleEnsemble (typically not drawn from ρ)
        times: Increasing observation times

    Returns:
        DataFrame with columns time, ks
    """
    times = np.asarray(times, dtype=float)
    if (np.diff(times) <= 0).any():
        raise ValueError("times must be increasing")
    ens = init
    rows = []
    for t in times:
        n_steps = int(round((t - ens.time) / dt))
        ens = _evolve(cfg, ens, sol, dt, n_steps, rng, delta)
        rows.append({'time': ens.time, 'ks': ks_to_density(ens.X, law.rho_X)})
    return pd.DataFrame(rows)


def run_ergodic_average(cfg, sol, dt, T, rng, x0=0.0, y0=0.0, batches=20, burn_in=0.0,
                        delta=DYSON_CLIP):
    """
    Time average of X along one decoupled path (N = 1).

    The standard error comes from batch means over `batches` equal blocks.

    Returns:
        Dictionary {mean, se, steps, batches}
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n_burn = int(round(burn_in / dt))
    n_steps = int(round(T / dt))
    if n_steps < batches:
        raise ValueError("T/dt must be at least the number of batches")
    f_prime = linear_extrapolator(sol.grid, sol.F_prime.values)
    dU = cfg.potentials.dU
    m = cfg.m
    scale = np.sqrt(2.0 * dt)
    x = np.array([float(x0)])
    y = np.array([float(y0)])
    path = np.empty(n_steps)
    noise = rng.standard_normal((n_burn + n_steps, 2))
    for step in range(n_burn + n_steps):
        kx, ky = _interaction(cfg, x, y, delta)
        x, y = (x - (dU(x) + kx + (m - 1) * f_prime(x)) * dt + scale * noise[step, 0],
                y - (dU(y) + ky + (m - 1) * f_prime(y)) * dt + scale * noise[step, 1])
        if step >= n_burn:
            path[step - n_burn] = x[0]
    means = path[:batches * (n_steps // batches)].reshape(batches, -1).mean(axis=1)
    return {'mean': float(path.mean()), 'se': float(means.std(ddof=1) / np.sqrt(batches)),
            'steps': n_steps, 'batches': batches}


def export_trajectory(summary, out_dir, ensemble=None, prefix='local'):
    """
    Write the trajectory summary CSV and, optionally, the final ensemble.

    Returns:
        List of written paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    summary_path = out_dir / f'{prefix}_trajectory.csv'
    summary.to_csv(summary_path, index=False, float_format='%.12g')
    paths.append(summary_path)
    if ensemble is not None:
        ens_path = out_dir / f'{prefix}_ensemble.csv'
        pd.DataFrame({'X': ensemble.X, 'Y': ensemble.Y}).to_csv(ens_path, index=False, float_format='%.12g')
        paths.append(ens_path)
        meta_path = out_dir / f'{prefix}_ensemble.json'
        with open(meta_path, 'w') as f:
            json.dump({'N': ensemble.N, 'time': ensemble.time, 'mode': ensemble.mode,
                       'bandwidth': ensemble.bandwidth}, f, indent=2, sort_keys=True)
        paths.append(meta_path)
    return paths
