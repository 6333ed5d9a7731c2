"""Convex oracle for the linearized voltage-regulation dispatch problem.

Minimizes ||v(p, q, d) - 1||^2 (optionally plus a small ridge that pins
down the otherwise underdetermined null-space component) over the box of
feasible injections, by projected gradient with the exact Lipschitz step.
Used as ground truth for optimality-gap metrics and tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridModel, _demand_vector, nominal_voltage
from .numerics import spectral_norm


@dataclass(frozen=True)
class OpfSolution:
    p_star: np.ndarray
    q_star: np.ndarray
    objective_value: float
    iterations: int
    converged: bool


def voltage_objective(model: GridModel, p, q, d) -> float:
    """Squared deviation of all bus voltages from 1 p.u."""
    from .grid import voltages

    r = voltages(model, p, q, d) - 1.0
    return float(np.dot(r, r))


def _box(model: GridModel):
    lo = np.concatenate([model.p_lo, model.q_lo])
    hi = np.concatenate([model.p_hi, model.q_hi])
    return lo, hi


def solve_opf(
    model: GridModel,
    d,
    ridge: float = 1e-8,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    accelerate: bool = False,
    x0: np.ndarray | None = None,
    trace: list | None = None,
) -> OpfSolution:
    """Box-constrained minimizer of the ridge-regularized voltage objective.

    Plain projected gradient with fixed step 1/L (L from the largest
    eigenvalue of the stacked sensitivity Gram matrix plus ridge) keeps the
    objective non-increasing; ``accelerate=True`` switches to a momentum
    variant that converges much faster on ill-conditioned instances but is
    not monotone.  Stops when the unit-step projected-gradient residual
    drops to ``tol``.  Non-convergence is reported, never silent.
    """
    if ridge < 0.0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    vec = _demand_vector(d, model.n)
    c = model.n_ctrl
    A = np.concatenate([model.G_p, model.G_q], axis=1)
    b = 1.0 - nominal_voltage(model, vec)
    gram = A.T @ A
    lip = 2.0 * (spectral_norm(0.5 * (gram + gram.T)) + ridge)
    lo, hi = _box(model)
    u = np.clip(np.zeros(2 * c) if x0 is None else np.asarray(x0, dtype=float), lo, hi)

    def grad(x):
        return 2.0 * (A.T @ (A @ x - b)) + 2.0 * ridge * x

    def objective(x):
        r = A @ x - b
        return float(np.dot(r, r)) + ridge * float(np.dot(x, x))

    converged = False
    iterations = 0
    y = u.copy()
    t_mom = 1.0
    for k in range(max_iter):
        g = grad(u)
        resid = float(np.linalg.norm(u - np.clip(u - g, lo, hi)))
        if trace is not None:
            trace.append(objective(u))
        if resid <= tol:
            converged = True
            iterations = k
            break
        if accelerate:
            u_next = np.clip(y - grad(y) / lip, lo, hi)
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            y = u_next + ((t_mom - 1.0) / t_next) * (u_next - u)
            u, t_mom = u_next, t_next
        else:
            u = np.clip(u - g / lip, lo, hi)
        iterations = k + 1

    return OpfSolution(
        p_star=u[:c].copy(),
        q_star=u[c:].copy(),
        objective_value=objective(u),
        iterations=iterations,
        converged=converged,
    )


def optimality_gap(model: GridModel, d, p, q) -> float:
    """Voltage objective of (p, q) minus the oracle optimum, ridge-free.

    The reference solve drops the ridge so the comparison is against the
    true minimum of the voltage objective; any feasible point then has a
    gap bounded below by solver precision.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    feas_tol = 1e-9
    if np.any(p < model.p_lo - feas_tol) or np.any(p > model.p_hi + feas_tol):
        raise ValueError("active injections outside the feasible box")
    if np.any(q < model.q_lo - feas_tol) or np.any(q > model.q_hi + feas_tol):
        raise ValueError("reactive injections outside the feasible box")
    sol = solve_opf(model, d, ridge=0.0)
    return voltage_objective(model, p, q, d) - voltage_objective(model, sol.p_star, sol.q_star, d)
