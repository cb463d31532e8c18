"""Paths, defaults and shared numerical settings."""

from pathlib import Path

DEFAULT_OUTPUT_DIR = Path("stackorder-out")
VERBOSITY_ENV_VAR = "STACKORDER_VERBOSITY"

# guard against factorial blow-up of the option set (8! = 40320 orderings)
MAX_GROUPS = 8

SYMMETRY_TOL = 1e-12
RANK_TOL = 1e-10
LM_EPS = 1e-8
LM_MAX_ITER = 200
LM_INITIAL_DAMPING = 1e-3
LM_DAMPING_FACTOR = 10.0
FD_STEP = 1e-6

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
