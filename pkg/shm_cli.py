"""
Command-line interface for the SHM toolkit

Usage:
  python shm_cli.py solve --model linear --m 3 --z 4
  python shm_cli.py sample-tree --config configs/linear_m3_z4.json --depth 2 --samples 200000 --seed 1
  python shm_cli.py simulate --model linear --m 3 --z 4 --target local --N 10000 --dt 1e-3 --T 10
  python shm_cli.py verify --all
  python shm_cli.py analytics --kesten-mckay --m 3

Exit codes: 0 success, 1 usage or configuration error, 2 numerical non-convergence
or failed checks.
"""

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from analytics import dyson_density, dyson_report, kesten_mckay_curve, linear_report
from config import (DEFAULT_DAMPING, DEFAULT_GRID, DEFAULT_MAX_ITER, DEFAULT_TOL, MIN_STATIONARITY_ENSEMBLE,
                    TOOL_VERSION, VERIFY_SEED, default_threads, load_model_config)
from edge_law import build_edge_law, export_edge_law
from fixed_point import export_solution, linear_branch_init
from local_sim import export_trajectory, run_stationarity_test
from numerics import Grid, ks_to_density
from potentials import make_model_from_config, make_named_dyson_model
from solution_cache import solve_cached
from tree import TreeSample, export_samples, sample_tree_parallel, simulate_tree_sde
from verification import CHECKS, format_results_dataframe, list_checks, run_checks, run_model_checks

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_ERROR."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ {message}", file=sys.stderr)
        sys.exit(EXIT_ERROR)


class RunManifest:
    """Record of one command run: every file written plus how it was produced."""

    def __init__(self, command, config_path, seed):
        self.command = command
        self.config_path = config_path
        self.seed = seed
        self.outputs = []

    def add(self, paths):
        self.outputs.extend(str(p) for p in paths)

    def write(self, out_dir):
        epoch = os.environ.get('SOURCE_DATE_EPOCH')
        moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc) if epoch else datetime.now(timezone.utc)
        manifest = {
            'command': self.command,
            'config_path': self.config_path,
            'seed': self.seed,
            'outputs': self.outputs,
            'timestamp': moment.isoformat(),
            'tool_version': TOOL_VERSION,
        }
        path = Path(out_dir) / 'manifest.json'
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        return path


def _add_model_args(p):
    group = p.add_argument_group('model')
    group.add_argument('--config', help='model configuration JSON (see CONFIG_SCHEMA.md)')
    group.add_argument('--model', choices=['linear', 'dyson', 'free'], help='inline model kind')
    group.add_argument('--m', type=int, help='tree degree')
    group.add_argument('--z', type=float, help='spectral parameter of the linear model')
    group.add_argument('--U', default='gaussian', choices=['gaussian', 'quartic'], help='confinement')
    group.add_argument('--U-scale', type=float, default=1.0, dest='u_scale', help='confinement prefactor')
    group.add_argument('--grid-n', type=int, help='grid points')
    group.add_argument('--grid-L', type=float, help='grid half-width')


def _add_run_args(p, seed=True):
    group = p.add_argument_group('run')
    group.add_argument('--threads', type=int, help='worker threads (default: $SHM_THREADS or 1)')
    if seed:
        group.add_argument('--seed', type=int, default=0, help='master seed')
    group.add_argument('--out', default='shm_out', help='output directory')
    group.add_argument('--plot', action='store_true', help='also write PNG plots')
    group.add_argument('--no-cache', action='store_true', help='do not read or write the solution cache')


def build_parser():
    parser = _Parser(prog='shm_cli.py', description='Stationary homogeneous Markov solutions of tree-indexed SDEs')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('solve', help='solve the fixed-point problem for F')
    _add_model_args(p)
    _add_run_args(p, seed=False)
    p.add_argument('--damping', type=float, default=DEFAULT_DAMPING)
    p.add_argument('--tol', type=float, default=DEFAULT_TOL)
    p.add_argument('--max-iter', type=int, default=DEFAULT_MAX_ITER)
    p.add_argument('--method', choices=['picard', 'power'], default='picard')
    p.add_argument('--branch', choices=['plus', 'minus'], help='start Picard on a linear-model branch')
    p.add_argument('--edge-law', action='store_true', help='also export ρ, l and ρ_X')

    p = sub.add_parser('sample-tree', help='exact samples of the ball measure p_k')
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument('--depth', type=int, default=2)
    p.add_argument('--samples', type=int, default=10_000)

    p = sub.add_parser('simulate', help='simulate the local equation or the wired-leaf ball SDE')
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument('--target', choices=['local', 'tree'], default='local')
    p.add_argument('--mode', choices=['decoupled', 'estimated'], default='decoupled')
    p.add_argument('--N', type=int, default=10_000, help='particles (local) or replicas (tree)')
    p.add_argument('--dt', type=float, default=1e-3)
    p.add_argument('--T', type=float, default=10.0)
    p.add_argument('--depth', type=int, default=2, help='ball depth for --target tree')
    p.add_argument('--bandwidth', type=float, help='regression bandwidth for --mode estimated')

    p = sub.add_parser('verify', help='run the verification checks')
    _add_model_args(p)
    _add_run_args(p, seed=False)
    p.add_argument('--seed', type=int, default=VERIFY_SEED)
    p.add_argument('--all', action='store_true', help='run every registered check')
    p.add_argument('--check', action='append', default=[], help='run a named check (repeatable)')
    p.add_argument('--list', action='store_true', help='list available checks')
    p.add_argument('--scale', type=float, default=1.0, help='multiplier for Monte-Carlo sample sizes')

    p = sub.add_parser('analytics', help='closed-form curves and reports')
    p.add_argument('--kesten-mckay', action='store_true', help='Kesten-McKay density CSV')
    p.add_argument('--dyson', action='store_true', help='Dyson root, λ and edge density')
    p.add_argument('--linear', action='store_true', help='linear-model regime report (needs --z)')
    p.add_argument('--m', type=int, required=True)
    p.add_argument('--z', type=float)
    p.add_argument('--U', default='gaussian', choices=['gaussian', 'quartic'])
    p.add_argument('--U-scale', type=float, default=1.0, dest='u_scale')
    p.add_argument('--grid-n', type=int)
    p.add_argument('--grid-L', type=float)
    p.add_argument('--out', default='shm_out')
    p.add_argument('--plot', action='store_true')
    return parser


def _grid_override(args):
    grid = {}
    if args.grid_n is not None:
        grid['n'] = args.grid_n
    if args.grid_L is not None:
        grid['lo'], grid['hi'] = -args.grid_L, args.grid_L
    return grid


def build_model(args):
    """ModelConfig from --config or the inline model flags."""
    if args.config:
        raw = load_model_config(args.config)
        raw['grid'].update(_grid_override(args))
    elif args.model:
        if args.m is None:
            raise ValueError("--m is required with --model")
        if args.model == 'linear':
            if args.z is None:
                raise ValueError("--z is required with --model linear")
            params = {'z': args.z}
        else:
            params = {'U': args.U, 'scale': args.u_scale}
        raw = {'m': args.m, 'potential_kind': args.model, 'parameters': params, 'grid': _grid_override(args)}
    else:
        raise ValueError("either --config or --model is required")
    return make_model_from_config(raw)


def _threads(args):
    return args.threads if args.threads else default_threads()


def _solve(cfg, args, method='picard', verbose=True):
    init = None
    branch = getattr(args, 'branch', None)
    if branch:
        if cfg.description is None or cfg.description['potential_kind'] != 'linear':
            raise ValueError("--branch applies to the linear model only")
        init = linear_branch_init(cfg.grid, cfg.m, cfg.description['parameters']['z'], branch)
    return solve_cached(cfg, method=method, tol=getattr(args, 'tol', DEFAULT_TOL),
                        damping=getattr(args, 'damping', DEFAULT_DAMPING),
                        max_iter=getattr(args, 'max_iter', DEFAULT_MAX_ITER), init=init,
                        max_workers=_threads(args), use_cache=not args.no_cache, verbose=verbose)


def _solved_law(cfg, args):
    method = 'power' if cfg.m == 2 and cfg.is_log_repulsive else 'picard'
    sol = _solve(cfg, args, method)
    if not sol.converged:
        print(f"⚠️ Fixed point {sol.status}")
        return sol, None
    return sol, build_edge_law(cfg, sol)


def _plot(path, draw):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cmd_solve(args, manifest):
    cfg = build_model(args)
    sol = _solve(cfg, args, args.method)
    out = Path(args.out)
    manifest.add(export_solution(sol, out))
    if args.edge_law and sol.converged:
        manifest.add(export_edge_law(build_edge_law(cfg, sol), out))
    if args.plot:
        x = sol.grid.points
        manifest.add([_plot(out / 'solution_F.png', lambda ax: (ax.plot(x, sol.F.values), ax.set_xlabel('x'),
                                                                 ax.set_ylabel('F(x)')))])
    if not sol.converged:
        print(f"⚠️ Fixed point {sol.status} (residual {sol.residual:.3e})")
        return EXIT_NOT_CONVERGED
    print(f"✅ Solved: C = {sol.C:.10g}, residual = {sol.residual:.3e}, F(1) = {sol.F(1.0):.8f}")
    return EXIT_OK


def cmd_sample_tree(args, manifest):
    if args.depth < 0:
        raise ValueError("depth must be ≥ 0")
    if args.samples < 1:
        raise ValueError("samples must be positive")
    cfg = build_model(args)
    sol, law = _solved_law(cfg, args)
    if law is None:
        return EXIT_NOT_CONVERGED

    def progress(label, ok, done, total):
        print(f"  [{done}/{total}] {label} {'✅' if ok else '❌'}")

    samples = sample_tree_parallel(law, args.depth, args.samples, args.seed, max_workers=_threads(args),
                                   progress_callback=progress if args.samples > 100_000 else None)
    out = Path(args.out)
    manifest.add(export_samples(samples, out))
    if args.plot:
        x = law.grid.points

        def draw(ax):
            ax.hist(samples.column(''), bins=100, density=True, alpha=0.5, label='root samples')
            ax.plot(x, law.rho_X.values, label='ρ_X')
            ax.set_xlim(np.quantile(samples.column(''), [0.001, 0.999]))
            ax.legend()

        manifest.add([_plot(out / 'tree_root.png', draw)])
    print(f"✅ Drew {samples.n_samples} samples on a ball of {samples.ball.size} vertices")
    return EXIT_OK


def cmd_simulate(args, manifest):
    if not args.dt > 0:
        raise ValueError("dt must be positive")
    if args.T < 0:
        raise ValueError("T must be non-negative")
    if args.target == 'local' and args.N < MIN_STATIONARITY_ENSEMBLE:
        raise ValueError(f"stationarity test needs N ≥ {MIN_STATIONARITY_ENSEMBLE}")
    cfg = build_model(args)
    sol, law = _solved_law(cfg, args)
    if law is None:
        return EXIT_NOT_CONVERGED
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.target == 'local':
        rng = np.random.default_rng(args.seed)
        res = run_stationarity_test(cfg, sol, law, args.N, args.dt, args.T, mode=args.mode, rng=rng,
                                    bandwidth=args.bandwidth, verbose=True)
        manifest.add(export_trajectory(res['summary'], out, ensemble=res['ensemble']))
        summary = {'target': 'local', 'mode': args.mode, 'N': args.N, 'dt': args.dt, 'T': args.T,
                   'ks_marginal': res['ks_marginal'], 'symmetry_ks': res['symmetry_ks']}
        if args.plot:
            traj = res['summary']
            manifest.add([_plot(out / 'local_ks.png', lambda ax: (ax.plot(traj['time'], traj['ks_to_rho_X']),
                                                                    ax.set_xlabel('t'),
                                                                    ax.set_ylabel('KS to ρ_X')))])
    else:
        init = sample_tree_parallel(law, args.depth, args.N, args.seed, max_workers=_threads(args))
        state = simulate_tree_sde(cfg, sol, args.depth, args.dt, args.T, init, args.seed + 1,
                                  max_workers=_threads(args))
        pooled = state.root_snapshots.ravel()
        manifest.add(export_samples(TreeSample(state.ball, state.values), out, prefix='tree_sde'))
        summary = {'target': 'tree', 'depth': args.depth, 'replicas': args.N, 'dt': args.dt, 'T': args.T,
                   'root_ks': ks_to_density(pooled, law.rho_X), 'root_ks_final': ks_to_density(state.values[:, 0],
                                                                                               law.rho_X),
                   'pooled_root_values': int(pooled.size), 'escaped': state.escaped}
        print(f"✅ Tree SDE root KS to ρ_X = {summary['root_ks']:.4f} ({pooled.size} pooled values)")

    path = out / f'simulate_{args.target}_summary.json'
    with open(path, 'w') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    manifest.add([path])
    return EXIT_OK


def _print_table(df):
    with pd.option_context('display.max_colwidth', 60, 'display.width', 200):
        print(format_results_dataframe(df).drop(columns=['lhs', 'rhs']).to_string(index=False))


def cmd_verify(args, manifest):
    if args.list:
        print(list_checks().to_string(index=False))
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.all or args.check:
        unknown = [c for c in args.check if c not in CHECKS]
        if unknown:
            print(f"❌ unknown check '{unknown[0]}'. Available checks:")
            for name in CHECKS:
                print(f"  {name}")
            return EXIT_ERROR
        names = list(CHECKS) if args.all else args.check
        df = run_checks(names, scale=args.scale, max_workers=_threads(args), seed=args.seed,
                        use_cache=not args.no_cache, verbose=True)
    else:
        cfg = build_model(args)
        df = run_model_checks(cfg, max_workers=_threads(args), use_cache=not args.no_cache, verbose=True)

    _print_table(df)
    path = out / 'verify.csv'
    df.to_csv(path, index=False)
    manifest.add([path])
    passed = int(df['passed'].sum())
    if passed == len(df):
        print(f"\n✅ All {len(df)} checks passed")
        return EXIT_OK
    print(f"\n❌ {len(df) - passed} of {len(df)} checks failed")
    return EXIT_NOT_CONVERGED


def cmd_analytics(args, manifest):
    if args.m is None or args.m < 2:
        raise ValueError("m must be ≥ 2")
    if not (args.kesten_mckay or args.dyson or args.linear):
        raise ValueError("choose at least one of --kesten-mckay, --dyson, --linear")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.kesten_mckay:
        curve = kesten_mckay_curve(args.m)
        path = out / f'kesten_mckay_m{args.m}.csv'
        curve.to_csv(path, index=False, float_format='%.15g')
        manifest.add([path])
        print(f"✅ Kesten-McKay m={args.m}: mass {float(curve['density'] @ curve['weight']):.10f}")
        if args.plot:
            manifest.add([_plot(out / f'kesten_mckay_m{args.m}.png',
                                lambda ax: (ax.plot(curve['x'], curve['density']), ax.set_xlabel('x')))])

    if args.linear:
        if args.z is None:
            raise ValueError("--linear requires --z")
        report = linear_report(args.m, args.z)
        path = out / f'linear_m{args.m}_z{args.z:g}.json'
        with open(path, 'w') as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        manifest.add([path])
        print(f"✅ Linear m={args.m} z={args.z:g}: regime {report.regime}")

    if args.dyson:
        g = dict(DEFAULT_GRID)
        g.update(_grid_override(args))
        cfg = make_named_dyson_model(args.m, args.U, args.u_scale, grid=Grid(g['lo'], g['hi'], g['n']))
        report = dyson_report(cfg)
        stem = f'dyson_m{args.m}_{args.U}'
        path = out / f'{stem}.json'
        with open(path, 'w') as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        density = dyson_density(cfg, report)
        csv_path = out / f'{stem}_density.csv'
        density.to_csv(csv_path, index=False, float_format='%.15g')
        manifest.add([path, csv_path])
        print(f"✅ Dyson m={args.m} {args.U}: r = {report.r:.10f}, residual {report.fixed_point_residual:.3e}")
        if args.plot:
            manifest.add([_plot(out / f'{stem}_density.png',
                                lambda ax: (ax.plot(density['x'], density['marginal']), ax.set_xlabel('x')))])
    return EXIT_OK


COMMANDS = {
    'solve': cmd_solve,
    'sample-tree': cmd_sample_tree,
    'simulate': cmd_simulate,
    'verify': cmd_verify,
    'analytics': cmd_analytics,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    manifest = RunManifest(args.command, getattr(args, 'config', None) or 'inline', getattr(args, 'seed', None))
    try:
        code = COMMANDS[args.command](args, manifest)
    except (ValueError, OverflowError) as e:
        print(f"❌ {e}")
        return EXIT_ERROR
    if manifest.outputs:
        manifest.write(args.out)
    return code


if __name__ == '__main__':
    sys.exit(main())
