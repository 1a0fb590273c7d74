"""
Solution Cache - SQLite-based storage for solved fixed points
Keyed by the md5 of the model description and solver settings, with an
in-memory TTL layer in front of the database
"""

import hashlib
import json
import sqlite3
from datetime import datetime

import numpy as np

from config import CACHE_DB, CACHE_DIR, DEFAULT_DAMPING, DEFAULT_MAX_ITER, DEFAULT_TOL, MEMORY_CACHE_TTL, TOOL_VERSION
from fixed_point import FixedPointSolution, solve_picard, solve_power_m2
from numerics import GridFunction

# Simple in-memory cache in front of SQLite
_memory_cache = {}


def initialize_cache():
    """Initialize local SQLite database for solution caching."""
    CACHE_DIR.mkdir(parents=True, exist_ok=True)

    conn = sqlite3.connect(CACHE_DB)
    cursor = conn.cursor()
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS solutions (
            cache_key TEXT PRIMARY KEY,
            description TEXT NOT NULL,
            method TEXT NOT NULL,
            F TEXT NOT NULL,
            C REAL,
            residual REAL,
            iterations INTEGER,
            integrability REAL,
            edge_mass REAL,
            converged INTEGER,
            status TEXT,
            created_at TEXT
        )
    ''')
    conn.commit()
    conn.close()


def solution_key(cfg, method, tol, damping):
    """
    md5 of the model description and solver settings.

    Returns:
        Hex digest, or None for models without a description (custom callables)
    """
    if cfg.description is None:
        return None
    payload = {
        'description': cfg.description,
        'method': method,
        'tol': float(tol),
        'damping': float(damping) if method == 'picard' else None,
        'version': TOOL_VERSION,
    }
    return hashlib.md5(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _is_memory_valid(key):
    entry = _memory_cache.get(key)
    if entry is None:
        return False
    if (datetime.now().timestamp() - entry['timestamp']) < MEMORY_CACHE_TTL:
        return True
    del _memory_cache[key]
    return False


def get_cached_solution(cfg, method='picard', tol=DEFAULT_TOL, damping=DEFAULT_DAMPING):
    """
    Look up a solved fixed point.

    Args:
        cfg: ModelConfig
        method: 'picard' or 'power'
        tol: Solver tolerance the solution was computed with
        damping: Picard damping

    Returns:
        FixedPointSolution or None if not cached
    """
    key = solution_key(cfg, method, tol, damping)
    if key is None:
        return None
    if _is_memory_valid(key):
        return _memory_cache[key]['solution']
    if not CACHE_DB.exists():
        return None

    try:
        conn = sqlite3.connect(CACHE_DB)
        cursor = conn.cursor()
        cursor.execute('''
            SELECT F, C, residual, iterations, integrability, edge_mass, converged, status
            FROM solutions WHERE cache_key = ?
        ''', (key,))
        row = cursor.fetchone()
        conn.close()
    except Exception as e:
        print(f"⚠️ Cache read error: {e}")
        return None

    if row is None:
        return None
    values = np.asarray(json.loads(row[0]), dtype=float)
    if values.shape != (cfg.grid.n,):
        print("⚠️ Cached solution does not match the model grid; ignoring it")
        return None
    sol = FixedPointSolution(
        F=GridFunction(cfg.grid, values), C=row[1], residual=row[2], iterations=row[3],
        integrability=row[4], edge_mass=row[5], converged=bool(row[6]), method=method, status=row[7],
    )
    _memory_cache[key] = {'solution': sol, 'timestamp': datetime.now().timestamp()}
    return sol


def cache_solution(cfg, sol, tol=DEFAULT_TOL, damping=DEFAULT_DAMPING):
    """
    Store a solved fixed point.

    Returns:
        True if stored, False otherwise
    """
    key = solution_key(cfg, sol.method, tol, damping)
    if key is None:
        return False
    try:
        initialize_cache()
        conn = sqlite3.connect(CACHE_DB)
        cursor = conn.cursor()
        cursor.execute('''
            INSERT OR REPLACE INTO solutions
            (cache_key, description, method, F, C, residual, iterations, integrability, edge_mass,
             converged, status, created_at)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (key, json.dumps(cfg.description, sort_keys=True), sol.method, json.dumps(sol.F.values.tolist()),
              sol.C, sol.residual, sol.iterations, sol.integrability, sol.edge_mass, int(sol.converged),
              sol.status, datetime.now().isoformat()))
        conn.commit()
        conn.close()
    except Exception as e:
        print(f"⚠️ Cache write error: {e}")
        return False
    _memory_cache[key] = {'solution': sol, 'timestamp': datetime.now().timestamp()}
    return True


def clear_solution_cache():
    """
    Drop the in-memory layer and every stored solution.

    Returns:
        Number of deleted database rows
    """
    _memory_cache.clear()
    if not CACHE_DB.exists():
        return 0
    try:
        conn = sqlite3.connect(CACHE_DB)
        cursor = conn.cursor()
        cursor.execute('DELETE FROM solutions')
        deleted = cursor.rowcount
        conn.commit()
        conn.close()
    except Exception as e:
        print(f"⚠️ Cache clear error: {e}")
        return 0
    if deleted > 0:
        print(f"✅ Removed {deleted} cached solutions")
    return deleted


def get_cache_stats():
    """Get cache statistics."""
    if not CACHE_DB.exists():
        return {"status": "No cache", "size_mb": 0, "memory_entries": len(_memory_cache)}

    try:
        conn = sqlite3.connect(CACHE_DB)
        cursor = conn.cursor()
        cursor.execute('SELECT COUNT(*), SUM(converged) FROM solutions')
        total, converged = cursor.fetchone()
        cursor.execute('SELECT method, COUNT(*) FROM solutions GROUP BY method ORDER BY method')
        by_method = dict(cursor.fetchall())
        conn.close()

        size_mb = CACHE_DB.stat().st_size / (1024 * 1024)
        return {
            "status": "Active",
            "total_solutions": total,
            "converged": int(converged or 0),
            "by_method": by_method,
            "memory_entries": len(_memory_cache),
            "size_mb": f"{size_mb:.2f}",
            "cache_db_path": str(CACHE_DB)
        }
    except Exception as e:
        return {"status": "Error", "error": str(e)}


def solve_cached(cfg, method='picard', tol=DEFAULT_TOL, damping=DEFAULT_DAMPING, max_iter=DEFAULT_MAX_ITER,
                 init=None, max_workers=1, use_cache=True, verbose=False):
    """
    Solve the fixed-point problem, reusing a cached solution when available.

    Only converged solutions are stored. A custom init bypasses the cache,
    since it can select a different solution branch.

    Returns:
        FixedPointSolution
    """
    if method not in ('picard', 'power'):
        raise ValueError(f"unknown method '{method}' (expected picard or power)")
    cacheable = use_cache and init is None
    if cacheable:
        sol = get_cached_solution(cfg, method, tol, damping)
        if sol is not None:
            if verbose:
                print(f"✅ Loaded cached {method} solution (residual {sol.residual:.3e})")
            return sol

    if method == 'power':
        sol = solve_power_m2(cfg, tol=tol, max_iter=max_iter, max_workers=max_workers, verbose=verbose)
    else:
        sol = solve_picard(cfg, damping=damping, tol=tol, max_iter=max_iter, init=init,
                           max_workers=max_workers, verbose=verbose)
    if cacheable and sol.converged:
        cache_solution(cfg, sol, tol, damping)
    return sol


if __name__ == '__main__':
    initialize_cache()
    print("✅ Cache initialized")
    print(get_cache_stats())
