"""
Configuration constants for the SHM tree-diffusion toolkit
Grid, solver, sampler and simulation defaults plus JSON model-config loading
"""

import json
import os
from pathlib import Path

TOOL_VERSION = '1.0.0'

# Grid defaults (odd n so composite Simpson applies)
DEFAULT_GRID = {
    'lo': -10.0,
    'hi': 10.0,
    'n': 2049
}
MIN_GRID_POINTS = 3

# Fixed-point solver
DEFAULT_DAMPING = 0.5
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 2000
POWER_TOL = 1e-12
BAND_EPS = 1e-3
EDGE_MASS_TOL = 1e-8  # relative mass of e^{-U-mF} allowed at the grid ends

# Convolution
CONVOLUTION_METHOD = 'direct'  # 'direct' or 'fft'

# Root finding
ROOT_TOL = 1e-12
SIGN_SCAN_STEP = 1e-6

# Edge law technical integrals
TECH_P = 1.5
TECH2_WINDOW = (-1.0, 1.0)

# Regime classification collar around z = m and z = 2*sqrt(m-1)
REGIME_COLLAR = 1e-12

# Spectral measure of the tree
KM_QUAD_NODES = 512  # midpoint nodes in the angle variable x = 2sqrt(m-1)cos(theta)
KM_CURVE_POINTS = 2001
SIGN_SCAN_RANGE = (0.0, 10.0)
SIGN_SCAN_CHUNK = 1_000_000

# Tree sampling / testing
MARKOV_MIN_SAMPLES = 100_000
MARKOV_THRESHOLD = 0.01
MARKOV_BINS = 40  # quantile bins for the non-Gaussian conditional covariance statistic
HOMOGENEITY_THRESHOLD = 0.02
KS2D_BINS = 32
TREE_SDE_BLOCK = 250  # replicas per RNG stream; fixed so results do not depend on worker count
SAMPLE_BLOCK = 50_000  # tree draws per RNG stream
TREE_SDE_SNAPSHOTS = 6  # root snapshots pooled over the second half of a run

# Local equation
DYSON_CLIP = 1e-4
MIN_REGRESSION_ENSEMBLE = 100
MIN_STATIONARITY_ENSEMBLE = 1000
NW_BIN_FRACTION = 0.25  # bin width as a fraction of the bandwidth
KS_MARGINAL_THRESHOLD = 0.02
KS_ESTIMATED_THRESHOLD = 0.03
KS_DYSON_THRESHOLD = 0.03

# Verification runs
VERIFY_SEED = 20240601
VERIFY_TREE_SAMPLES = 200_000
VERIFY_DECOUPLED_N = 40_000  # symmetry KS needs more particles than the marginal KS
VERIFY_ESTIMATED_N = 10_000
VERIFY_TREE_SDE_REPLICAS = 4_000
VERIFY_PROBE_Z = (4.0, 3.0, 2.9, 2.0 * 2 ** 0.5, 2.0)
VERIFY_RESOLVENT_PAIRS = ((3, 4.0), (3, 5.0), (4, 5.0), (4, 6.0))

# Parallelism
THREADS_ENV_VAR = 'SHM_THREADS'
DEFAULT_THREADS = 1

# Output formatting for printed tables
DECIMAL_PLACES = {
    'lhs': 10,
    'rhs': 10
}
SCIENTIFIC_COLUMNS = ('value', 'threshold', 'err')  # printed as %.3e

# Solution cache
CACHE_DIR = Path('.') / '.shm_cache'
CACHE_DB = CACHE_DIR / 'solutions.db'
MEMORY_CACHE_TTL = 3600  # seconds

POTENTIAL_KINDS = ('linear', 'dyson', 'free', 'tabulated')
CONFINEMENTS = ('gaussian', 'quartic')


def default_threads():
    """
    Worker count from the SHM_THREADS environment variable.

    Returns:
        Positive integer, DEFAULT_THREADS when the variable is unset or invalid
    """
    raw = os.environ.get(THREADS_ENV_VAR)
    if not raw:
        return DEFAULT_THREADS
    try:
        value = int(raw)
    except ValueError:
        print(f"⚠️ Ignoring {THREADS_ENV_VAR}={raw!r}: not an integer")
        return DEFAULT_THREADS
    return max(1, value)


def load_model_config(path):
    """
    Load and validate a model configuration JSON file.

    Args:
        path: Path to a JSON file with keys m, potential_kind, parameters, grid

    Returns:
        Dictionary with the validated configuration (grid filled from DEFAULT_GRID)
    """
    path = Path(path)
    if not path.exists():
        raise ValueError(f"config file not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"config file {path} is not valid JSON: {e}")

    cfg = validate_model_config(raw)
    if cfg['potential_kind'] == 'tabulated':
        table = Path(cfg['parameters']['table'])
        if not table.is_absolute():
            cfg['parameters']['table'] = str(path.parent / table)
    return cfg


def validate_model_config(raw):
    """
    Check required keys and fill defaults of a model configuration dictionary.

    Args:
        raw: Dictionary as read from JSON

    Returns:
        New dictionary with normalized types
    """
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    for key in ('m', 'potential_kind'):
        if key not in raw:
            raise ValueError(f"config missing required key '{key}'")

    kind = raw['potential_kind']
    if kind not in POTENTIAL_KINDS:
        raise ValueError(f"unknown potential_kind '{kind}' (expected one of {', '.join(POTENTIAL_KINDS)})")

    m = raw['m']
    if isinstance(m, bool) or not isinstance(m, int) or m < 2:
        raise ValueError("m must be ≥ 2")

    params = dict(raw.get('parameters') or {})
    if kind == 'linear':
        if 'z' not in params:
            raise ValueError("linear model requires parameters.z")
        params['z'] = float(params['z'])
    elif kind in ('dyson', 'free'):
        params.setdefault('U', 'gaussian')
        params.setdefault('scale', 1.0)
        if params['U'] not in CONFINEMENTS:
            raise ValueError(f"unknown confinement '{params['U']}' (expected one of {', '.join(CONFINEMENTS)})")
        params['scale'] = float(params['scale'])
        if params['scale'] <= 0:
            raise ValueError("parameters.scale must be positive")
    elif kind == 'tabulated':
        if 'table' not in params:
            raise ValueError("tabulated model requires parameters.table")

    grid = dict(DEFAULT_GRID)
    grid.update(raw.get('grid') or {})
    grid = {'lo': float(grid['lo']), 'hi': float(grid['hi']), 'n': int(grid['n'])}
    if not grid['lo'] < grid['hi']:
        raise ValueError("grid.lo must be less than grid.hi")
    if grid['n'] < MIN_GRID_POINTS:
        raise ValueError(f"grid.n must be at least {MIN_GRID_POINTS}")

    return {'m': m, 'potential_kind': kind, 'parameters': params, 'grid': grid}
