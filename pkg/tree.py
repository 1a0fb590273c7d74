"""
Tree ball sampling and simulation
Exact sampling of the depth-k ball measure p_k from the edge law, the
truncated-tree SDE with wired leaves, and statistical checks of the Markov
and homogeneity structure
"""

import json
import weakref
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from config import (DYSON_CLIP, HOMOGENEITY_THRESHOLD, KS2D_BINS, MARKOV_BINS, MARKOV_MIN_SAMPLES,
                    MARKOV_THRESHOLD, SAMPLE_BLOCK, TREE_SDE_BLOCK, TREE_SDE_SNAPSHOTS)
from edge_law import conditional_cdf_table
from numerics import (clip_away_from_zero, density_cdf_table, inverse_cdf_from_table, ks_2d_statistic,
                      linear_extrapolator, log_convolve_weight)


@dataclass(frozen=True)
class TreeBall:
    """
    Closed ball of radius depth around the root of the m-regular tree.

    Vertices are addressed by paths: '' is the root, the root's children are
    '0'..'m-1', and the children of a non-root vertex v are v.'0'..v.'m-2'.
    """

    m: int
    depth: int

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be ≥ 2")
        if self.depth < 0:
            raise ValueError("depth must be ≥ 0")

    @staticmethod
    def expected_count(m, k):
        if m == 2:
            return 1 + 2 * k
        return 1 + m * ((m - 1) ** k - 1) // (m - 2)

    @cached_property
    def vertices(self):
        """Addresses in breadth-first order."""
        out = ['']
        frontier = [str(i) for i in range(self.m)] if self.depth >= 1 else []
        for _ in range(self.depth):
            out.extend(frontier)
            frontier = [f'{v}.{i}' for v in frontier for i in range(self.m - 1)]
        return out

    @cached_property
    def index(self):
        return {v: i for i, v in enumerate(self.vertices)}

    @property
    def size(self):
        return len(self.vertices)

    @staticmethod
    def parent(address):
        if address == '':
            raise ValueError("the root has no parent")
        return address.rpartition('.')[0]

    @staticmethod
    def level(address):
        return 0 if address == '' else address.count('.') + 1

    def distance_from_root(self, address):
        if address not in self.index:
            raise ValueError(f"vertex '{address}' is not in the ball")
        return self.level(address)

    def children(self, address):
        if self.level(address) >= self.depth:
            return []
        if address == '':
            return [str(i) for i in range(self.m)]
        return [f'{address}.{i}' for i in range(self.m - 1)]

    @cached_property
    def parent_index(self):
        """Parent index per vertex (-1 for the root)."""
        return np.array([-1] + [self.index[self.parent(v)] for v in self.vertices[1:]], dtype=int)

    @cached_property
    def levels(self):
        return np.array([self.level(v) for v in self.vertices], dtype=int)

    @cached_property
    def leaves(self):
        """Indices of the boundary vertices (empty when depth = 0)."""
        if self.depth == 0:
            return np.array([], dtype=int)
        return np.flatnonzero(self.levels == self.depth)

    @staticmethod
    def path_vertex(d):
        """Address of the vertex at distance d along the first branch."""
        return '.'.join(['0'] * d)


@dataclass(eq=False)
class TreeSample:
    """Batch of draws on a ball: values has shape (samples, vertices)."""

    ball: TreeBall
    values: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.ball.size:
            raise ValueError(f"expected {self.ball.size} vertex values, got {self.values.shape[1]}")
        if not np.isfinite(self.values).all():
            raise ValueError("tree sample values must be finite")

    @property
    def n_samples(self):
        return self.values.shape[0]

    def column(self, address):
        return self.values[:, self.ball.index[address]]


@dataclass(eq=False)
class TreeSdeState:
    """State of replicated tree-SDE runs at time `time`."""

    ball: TreeBall
    values: np.ndarray
    time: float
    rng_seed: int
    escaped: int = 0
    root_snapshots: np.ndarray = field(default=None)

    @property
    def is_escaped(self):
        return self.escaped > 0


_sampling_cache = weakref.WeakKeyDictionary()


def _sampling_tables(law):
    tables = _sampling_cache.get(law)
    if tables is None:
        n = law.grid.n
        root_cdf = density_cdf_table(law.rho_X)
        cond = conditional_cdf_table(law)
        # rows shifted apart so one searchsorted serves every parent row
        flat = (cond + 2.0 * np.arange(n)[:, None]).ravel()
        tables = (root_cdf, cond, flat)
        _sampling_cache[law] = tables
    return tables


def _draw_children(law, parents, rng, tables):
    grid = law.grid
    n = grid.n
    points = grid.points
    _, cond, flat = tables
    t = np.clip((parents - grid.lo) / grid.step, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(t).astype(int), n - 2)
    # mixture of the two neighbouring parent rows interpolates κ(·|x) in x
    row = i0 + (rng.random(parents.shape) < (t - i0))
    u = rng.random(parents.shape)
    j = np.searchsorted(flat, u + 2.0 * row, side='left') - row * n
    j = np.clip(j, 1, n - 1)
    lower = cond[row, j - 1]
    upper = cond[row, j]
    width = upper - lower
    frac = np.divide(u - lower, width, out=np.zeros_like(u), where=width > 0)
    return points[j - 1] + np.clip(frac, 0.0, 1.0) * grid.step


def sample_tree(law, k, rng, n_samples=1):
    """
    Exact draws from the ball measure p_k.

    The root comes from ρ_X by inverse CDF; every child is drawn from
    κ(·|parent value).

    Args:
        law: EdgeLaw
        k: Ball depth (≥ 0)
        rng: numpy Generator
        n_samples: Number of independent draws

    Returns:
        TreeSample with values of shape (n_samples, vertices)
    """
    ball = TreeBall(law.m, int(k))
    tables = _sampling_tables(law)
    values = np.empty((int(n_samples), ball.size))
    u = rng.random(int(n_samples))
    values[:, 0] = inverse_cdf_from_table(law.grid.points, tables[0], u)
    for v in range(1, ball.size):
        values[:, v] = _draw_children(law, values[:, ball.parent_index[v]], rng, tables)
    return TreeSample(ball, values)


def sample_tree_parallel(law, k, n_samples, seed, max_workers=1, progress_callback=None):
    """
    sample_tree split into fixed blocks with independent seeded streams.

    Block b uses SeedSequence(seed).spawn(...)[b], so the output is identical
    for every worker count.

    Args:
        law: EdgeLaw
        k: Ball depth
        n_samples: Total draws
        seed: Master seed
        max_workers: Maximum number of parallel threads
        progress_callback: Optional callback function(label, success, current, total)

    Returns:
        TreeSample
    """
    n_samples = int(n_samples)
    sizes = [SAMPLE_BLOCK] * (n_samples // SAMPLE_BLOCK)
    if n_samples % SAMPLE_BLOCK:
        sizes.append(n_samples % SAMPLE_BLOCK)
    streams = np.random.SeedSequence(seed).spawn(len(sizes))
    _sampling_tables(law)

    def run_block(b):
        return b, sample_tree(law, k, np.random.default_rng(streams[b]), sizes[b]).values

    parts = _run_blocks(run_block, len(sizes), max_workers, progress_callback, 'sample block')
    return TreeSample(TreeBall(law.m, int(k)), np.vstack(parts))


def _run_blocks(run_block, n_blocks, max_workers, progress_callback, label):
    parts = [None] * n_blocks
    completed = 0
    with ThreadPoolExecutor(max_workers=max(1, int(max_workers))) as executor:
        futures = {executor.submit(run_block, b): b for b in range(n_blocks)}
        for future in as_completed(futures):
            completed += 1
            b = futures[future]
            try:
                _, part = future.result()
                parts[b] = part
                if progress_callback:
                    progress_callback(f'{label} {b}', True, completed, n_blocks)
            except Exception:
                if progress_callback:
                    progress_callback(f'{label} {b}', False, completed, n_blocks)
                raise
    return parts


def consistency_check(law, cfg):
    """
    Integrating p_1 over its m leaf coordinates must return p_0 = C2⁻¹l^m.

    p_1(x, y_1..y_m) = C2⁻¹ Π_i Q(x,y_i) l(y_i)^{m-1}, so its root marginal
    is C2⁻¹(∫Q(x,y)l(y)^{m-1}dy)^m, compared pointwise with C2⁻¹l^m.

    Returns:
        Sup relative error over grid points where l > 0
    """
    grid = cfg.grid
    pot = cfg.potentials
    m = cfg.m
    x = grid.points
    with np.errstate(divide='ignore'):
        log_l = np.log(law.l.values)
    log_conv = log_convolve_weight(-pot.U(x) / m + (m - 1) * log_l, grid, pot.weight_kernel)
    log_inner = -law.C1 - pot.U(x) / m + log_conv
    ok = np.isfinite(log_l)
    log_p1 = m * log_inner[ok] - np.log(law.C2)
    log_p0 = m * log_l[ok] - np.log(law.C2)
    return float(np.max(np.abs(np.exp(log_p1 - log_p0) - 1.0)))


def simulate_tree_sde(cfg, sol, k, dt, t_end, init, seed, max_workers=1, delta=DYSON_CLIP,
                      snapshots=TREE_SDE_SNAPSHOTS, progress_callback=None):
    """
    Euler-Maruyama for the ball SDE with wired leaves.

    Interior vertices feel -(U'(x_v) + Σ_{u~v} K'(x_v-x_u)); each leaf gets
    -(U'(x_v) + K'(x_v-x_parent) + (m-1)F'(x_v)), and a depth-0 root gets
    -(U' + mF'), so p_k is the stationary density. Noise scale is √2.
    Replicas (rows of init.values) run in blocks of TREE_SDE_BLOCK, block b
    with stream SeedSequence(seed).spawn(...)[b].

    Args:
        cfg: ModelConfig
        sol: FixedPointSolution (supplies F')
        k: Ball depth, must match init.ball
        dt: Time step
        t_end: Final time
        init: TreeSample of starting configurations (one row per replica)
        seed: Master seed
        max_workers: Maximum number of parallel threads
        delta: Clip for |x_v - x_u| with the log-repulsive interaction
        snapshots: Root snapshots recorded over the second half of the run

    Returns:
        TreeSdeState
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    ball = init.ball
    if ball.depth != k or ball.m != cfg.m:
        raise ValueError("init does not live on the requested ball")

    pot = cfg.potentials
    m = cfg.m
    grid = cfg.grid
    f_prime = linear_extrapolator(grid, sol.F_prime.values)
    clip = cfg.is_log_repulsive

    child_idx = np.arange(1, ball.size)
    parent_idx = ball.parent_index[1:]
    incidence = np.zeros((len(child_idx), ball.size))
    incidence[np.arange(len(child_idx)), parent_idx] = 1.0
    leaves = ball.leaves

    n_steps = int(round(t_end / dt))
    snap_steps = np.unique(np.linspace(n_steps // 2, n_steps, max(1, snapshots)).astype(int))
    replicas = init.n_samples
    n_blocks = -(-replicas // TREE_SDE_BLOCK)
    streams = np.random.SeedSequence(seed).spawn(n_blocks)
    noise_scale = np.sqrt(2.0 * dt)

    def drift(x):
        out = -pot.dU(x)
        if len(child_idx):
            diff = x[:, child_idx] - x[:, parent_idx]
            if clip:
                diff = clip_away_from_zero(diff, delta)
            out[:, child_idx] -= pot.dK(diff)
            out -= pot.dK(-diff) @ incidence
        if k == 0:
            out[:, 0] -= m * f_prime(x[:, 0])
        else:
            out[:, leaves] -= (m - 1) * f_prime(x[:, leaves])
        return out

    def run_block(b):
        rng = np.random.default_rng(streams[b])
        x = init.values[b * TREE_SDE_BLOCK:(b + 1) * TREE_SDE_BLOCK].copy()
        snaps = []
        escaped = 0
        if 0 in snap_steps:
            snaps.append(x[:, 0].copy())
        for step in range(1, n_steps + 1):
            x = x + drift(x) * dt + noise_scale * rng.standard_normal(x.shape)
            if step in snap_set:
                snaps.append(x[:, 0].copy())
            escaped += int(((x < grid.lo) | (x > grid.hi)).any(axis=1).sum())
        return b, (x, np.column_stack(snaps) if snaps else np.empty((len(x), 0)), escaped)

    snap_set = set(int(s) for s in snap_steps)
    parts = _run_blocks(run_block, n_blocks, max_workers, progress_callback, 'replica block')
    values = np.vstack([p[0] for p in parts])
    snaps = np.vstack([p[1] for p in parts])
    escaped = sum(p[2] for p in parts)
    if escaped:
        print(f"⚠️ {escaped} replica-steps left the grid; drift was extrapolated linearly")
    return TreeSdeState(ball=ball, values=values, time=n_steps * dt, rng_seed=int(seed),
                        escaped=escaped, root_snapshots=snaps)


def _stack(samples):
    if isinstance(samples, TreeSample):
        return samples
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    return TreeSample(samples[0].ball, np.vstack([s.values for s in samples]))


def _residualize(a, b):
    # residual of a after least-squares regression on b (with intercept)
    bc = b - b.mean()
    denom = bc @ bc
    slope = (bc @ (a - a.mean())) / denom if denom > 0 else 0.0
    return a - a.mean() - slope * bc


def markov_test(samples, kind='linear', min_samples=MARKOV_MIN_SAMPLES, threshold=MARKOV_THRESHOLD,
                bins=MARKOV_BINS):
    """
    Conditional independence of root and grandchild given the child between them.

    kind='linear' uses the partial correlation; any other kind uses a binned
    statistic: within quantile bins of the child, both ends are regressed on
    the child and the residual covariances are pooled and normalized.

    Args:
        samples: TreeSample or list of TreeSample (depth ≥ 2)
        kind: Model kind tag

    Returns:
        Dictionary {partial_corr, pass, method, n}
    """
    s = _stack(samples)
    if s.ball.depth < 2:
        raise ValueError("markov_test needs depth ≥ 2")
    if s.n_samples < min_samples:
        raise ValueError(f"insufficient samples: {s.n_samples} < {min_samples}")
    root = s.column('')
    child = s.column('0')
    grand = s.column('0.0')

    if kind in ('linear', 'quadratic'):
        r = np.corrcoef(np.vstack([root, child, grand]))
        r_rg, r_rc, r_cg = r[0, 2], r[0, 1], r[1, 2]
        stat = (r_rg - r_rc * r_cg) / np.sqrt((1 - r_rc ** 2) * (1 - r_cg ** 2))
        method = 'partial correlation'
    else:
        edges = np.quantile(child, np.linspace(0, 1, bins + 1))
        which = np.clip(np.searchsorted(edges, child, side='right') - 1, 0, bins - 1)
        cov = var_r = var_g = 0.0
        for b in range(bins):
            mask = which == b
            if mask.sum() < 3:
                continue
            res_r = _residualize(root[mask], child[mask])
            res_g = _residualize(grand[mask], child[mask])
            cov += res_r @ res_g
            var_r += res_r @ res_r
            var_g += res_g @ res_g
        stat = cov / np.sqrt(var_r * var_g) if var_r > 0 and var_g > 0 else 0.0
        method = 'binned conditional covariance'
    stat = float(stat)
    return {'partial_corr': stat, 'pass': bool(abs(stat) < threshold), 'method': method, 'n': s.n_samples}


def homogeneity_test(samples, threshold=HOMOGENEITY_THRESHOLD, bins=KS2D_BINS):
    """
    2-D KS distance between the laws of (root, '0') and ('0', '0.0').

    Returns:
        Dictionary {ks2d, pass}
    """
    s = _stack(samples)
    if s.ball.depth < 2:
        raise ValueError("homogeneity_test needs depth ≥ 2")
    first = np.column_stack([s.column(''), s.column('0')])
    second = np.column_stack([s.column('0'), s.column('0.0')])
    stat = ks_2d_statistic(first, second, bins=bins)
    return {'ks2d': stat, 'pass': bool(stat < threshold)}


def distance_correlations(samples, max_d=None):
    """
    Covariance and correlation between the root and the vertex at distance d
    along the first branch.

    Returns:
        DataFrame with columns d, vertex, covariance, correlation, se
    """
    s = _stack(samples)
    max_d = s.ball.depth if max_d is None else min(max_d, s.ball.depth)
    root = s.column('')
    n = s.n_samples
    rows = []
    for d in range(max_d + 1):
        address = TreeBall.path_vertex(d)
        other = s.column(address)
        cov = float(np.mean((root - root.mean()) * (other - other.mean())))
        corr = float(np.corrcoef(root, other)[0, 1]) if d > 0 else 1.0
        rows.append({'d': d, 'vertex': address or 'root', 'covariance': cov, 'correlation': corr,
                     'se': (1.0 - corr ** 2) / np.sqrt(n)})
    return pd.DataFrame(rows)


def shuffle_grandchildren(samples, rng):
    """Negative control: permute the '0.0' column across samples."""
    s = _stack(samples)
    values = s.values.copy()
    col = s.ball.index['0.0']
    values[:, col] = rng.permutation(values[:, col])
    return TreeSample(s.ball, values)


def export_samples(samples, out_dir, prefix='tree'):
    """
    Write samples as CSV (one column per vertex address, 'root' for the root)
    and a JSON summary of per-distance covariances.

    Returns:
        List of written paths
    """
    s = _stack(samples)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = [v or 'root' for v in s.ball.vertices]
    csv_path = out_dir / f'{prefix}_samples.csv'
    pd.DataFrame(s.values, columns=columns).to_csv(csv_path, index=False, float_format='%.12g')

    table = distance_correlations(s)
    summary = {
        'm': s.ball.m,
        'depth': s.ball.depth,
        'samples': s.n_samples,
        'covariance': table['covariance'].tolist(),
        'correlation': table['correlation'].tolist(),
        'se': table['se'].tolist(),
    }
    json_path = out_dir / f'{prefix}_summary.json'
    with open(json_path, 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return [csv_path, json_path]
