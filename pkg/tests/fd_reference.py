"""Test-only Crank-Nicolson solver for the 1-d Black-Scholes-Barenblatt equation.

    V_t + 1/2 max_{v in [v_lo, v_hi]} v S^2 V_SS = 0,   V(T, S) = payoff(S)

solved in x = log S, where the operator reads 1/2 v (V_xx - V_x).  The
variance is chosen per node by policy iteration inside each time step.
A few fully implicit steps at the start damp the payoff kink.
"""
import numpy as np
from scipy.linalg import solve_banded


def bsb_price(s0, payoff, v_lo, v_hi, T=1.0, nx=1200, nt=800, width=8.0, rannacher=4,
              policy_iters=6):
    sd = np.sqrt(v_hi * T)
    x = np.linspace(np.log(s0) - width * sd, np.log(s0) + width * sd, nx)
    dx = x[1] - x[0]
    dt = T / nt
    S = np.exp(x)
    V = payoff(S)
    lo_bc, hi_bc = V[0], V[-1]

    def operator_rows(v):
        # L V_i = 1/2 v_i [(V_{i+1} - 2V_i + V_{i-1})/dx^2 - (V_{i+1} - V_{i-1})/(2dx)]
        a = 0.5 * v * (1 / dx**2 + 1 / (2 * dx))   # coefficient of V_{i-1}
        b = -v / dx**2                             # V_i
        c = 0.5 * v * (1 / dx**2 - 1 / (2 * dx))   # V_{i+1}
        return a, b, c

    def apply(V, v):
        a, b, c = operator_rows(v)
        out = np.zeros_like(V)
        out[1:-1] = a[1:-1] * V[:-2] + b[1:-1] * V[1:-1] + c[1:-1] * V[2:]
        return out

    def second(V):
        g = np.zeros_like(V)
        g[1:-1] = (V[2:] - 2 * V[1:-1] + V[:-2]) / dx**2 - (V[2:] - V[:-2]) / (2 * dx)
        return g

    for step in range(nt):
        theta = 1.0 if step < rannacher else 0.5
        v = np.where(second(V) >= 0, v_hi, v_lo)
        for _ in range(policy_iters):
            a, b, c = operator_rows(v)
            rhs = V + (1 - theta) * dt * apply(V, v)
            ab = np.zeros((3, nx))
            ab[0, 2:] = -theta * dt * c[1:-1]
            ab[1, 1:-1] = 1 - theta * dt * b[1:-1]
            ab[2, :-2] = -theta * dt * a[1:-1]
            ab[1, 0] = ab[1, -1] = 1.0
            rhs[0] = lo_bc
            rhs[-1] = hi_bc
            Vn = solve_banded((1, 1), ab, rhs)
            v_new = np.where(second(Vn) >= 0, v_hi, v_lo)
            if np.array_equal(v_new, v):
                break
            v = v_new
        V = Vn
    return float(np.interp(np.log(s0), x, V))
