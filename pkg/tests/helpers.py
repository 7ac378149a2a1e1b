"""Small constant-coefficient lifts shared by the tests."""
import numpy as np

from pathctrl.model import ControlGrid, ControlProblem, lift_problem, markov_spec
from pathctrl.scheme import Lattice


def additive_lift(variances, sigma0, payoff, x0=0.0, running=0.0, drift=0.0, horizon=1.0,
                  lattice_size=201, width=8.0, validate=5):
    """``dX = drift dt + sqrt(u) dW`` with controls ``u`` (variances) and constant ref vol."""
    grid = ControlGrid(list(variances))
    problem = ControlProblem(
        1, horizon, [x0], lambda t, p, u: np.array([drift]),
        lambda t, p, u: np.array([[np.sqrt(u)]]), lambda t, p, u: running,
        lambda p: float(payoff(np.array([p.eval(p.horizon)[0]]))[0]), grid,
        lambda t, p: np.array([[sigma0]]), name="additive")
    spec = markov_spec(
        drift=lambda t, x, s, u: np.full_like(x, drift),
        vol=lambda t, x, s, u: np.full((x.shape[0], 1, 1), np.sqrt(u)),
        running_reward=lambda t, x, s, u: np.full(x.shape[0], float(running)),
        terminal_reward=lambda x: payoff(x[:, 0]),
        ref_vol=lambda t, x: np.full((x.shape[0], 1, 1), sigma0),
    )
    sd = np.sqrt(max(variances) * horizon)
    xs = np.linspace(x0 - width * sd, x0 + width * sd, lattice_size)
    return lift_problem(problem, spec, n_paths=validate, lattice=lambda n, size: Lattice(xs))


def call(strike):
    return lambda x: np.maximum(x - strike, 0.0)
