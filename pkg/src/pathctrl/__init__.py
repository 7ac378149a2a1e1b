"""Monte Carlo scheme for path-dependent stochastic control.

Backward induction along a reference process with Gaussian-weight estimates
of the value's first and second derivative analogues, a finite max over a
control grid, and the controlled discrete-time semimartingale that the
scheme's value optimizes.
"""
from .degenerate import PerturbedProblem, epsilon_sweep, fit_linear, perturb, sym_sqrt
from .errors import (AssumptionViolation, DimensionUnsupported, EngineUnsupported,
                     EvaluationError, LiftMismatch, PathCtrlError, RegressionFailure,
                     SizeLimitExceeded, StrategyUnavailable, WellPosednessError)
from .kernel import (StepDensityParams, WellPosedness, density_eval, density_moments,
                     gaussian_weights, sample_step, step_mg, well_posedness)
from .model import (ControlGrid, ControlProblem, LiftSpec, MarkovLift, PathGrid, lift_problem,
                    make_path, markov_spec)
from .regression import BasisSpec, FitReport, fit_step, truncate_targets
from .scheme import (DriverInput, Lattice, QuadratureEngine, SchemeConfig, SchemeResult,
                     backward_induction, driver_G, quadrature_engine, simulate_reference, solve)
from .semimart import (ConstantStrategy, LatticePlan, brute_force_value, extract_strategy,
                       simulate_controlled)

__version__ = "0.1.0"
