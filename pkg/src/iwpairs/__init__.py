"""Ito-Watanabe pairs for one-dimensional diffusions."""
from .errors import *  # noqa: F401,F403
from .diffusion_core import (DiffusionSpec, Interval, RadonMeasure, ScaleFunction, SDE,
                             caf_potential, classify_boundaries, killed_potential_density,
                             measure_integrate)
from .ie_solver import (GeneralSolution, PairProblem, PairSolution, combine,
                        exit_expectation_check, fit_decomposition, kappa_from_boundary_identity,
                        march_measure_ode, residual, solve, solve_decreasing, solve_increasing,
                        solve_via_killed_kernel)
from .transform import (TransformedDiffusion, local_time_terminal_rate, q_boundary_probabilities,
                        q_hitting_probability, transform)
from .optimal_stopping import (RewardSpec, StoppingSolution, brute_force_majorant,
                               concave_majorant, stopping_indicator)
from .optimal_stopping import solve as solve_stopping
from .mc_verify import (EstimateResult, SimConfig, SimulationResult, estimate_exit_value,
                        estimate_local_time_total, estimate_pair_value, estimate_q_hitting,
                        estimate_stopping_value, martingale_check, simulate)
from .io import load_artifact, load_problem, parse_problem, validate_artifact
from .estimators import ItoWatanabePair, OptimalStopper, PathTransform

__version__ = "0.1.0"
