"""Stability certificates, parameter projection, and contraction diagnostics.

The incremental update with step eps has a unique globally stable fixed
point when three conditions hold: (a) every controller map is
non-increasing in its voltage input, (b) the certified reactive slope
bound L_q stays strictly below 1/(kappa(R^{1/2}) * ||Xhat||) where
Xhat = X - alpha* R removes the best resistive multiple of the reactance
block, and (c) eps stays strictly below

    eps_max = min{1, 2 / (1 + kappa(R^{1/2}) L_q ||Xhat|| + (L_p + alpha* L_q) ||R||)}.

Projection enforces (a) by sign clamps and (b) by an exact Euclidean
projection of each node's reactive output weights onto a weighted-l1 ball.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from .controllers import ControllerBank, NodeParams, eval_nif, slope_bounds
from .grid import GridModel
from .numerics import (
    invsqrt_psd,
    kappa_sqrt,
    minimize_scalar,
    operator_norm,
    spectral_norm,
    sqrt_psd,
)

# Strict inequalities get this safety margin so boundary banks fail deterministically.
DEFAULT_MARGIN = 1e-9


def alpha_star(R, X, tol: float = 1e-10) -> float:
    """Nonnegative scalar minimizing the spectral norm of X - alpha*R.

    The objective is convex in alpha; golden-section search over
    [0, 2*lambda_max(X)/lambda_min(R)] locates the minimizer to ``tol``.
    """
    R = np.asarray(R, dtype=float)
    X = np.asarray(X, dtype=float)
    from .numerics import sym_eig

    lam_r = sym_eig(R).eigenvalues
    lam_x = sym_eig(X).eigenvalues
    upper = 2.0 * float(lam_x[-1]) / float(lam_r[0])
    if upper <= 0.0:
        return 0.0

    def objective(alpha: float) -> float:
        return spectral_norm(X - alpha * R) ** 2

    best = minimize_scalar(objective, 0.0, upper, tol=tol)
    # the boundary can beat the interior bracket midpoint
    if objective(0.0) <= objective(best):
        return 0.0
    return best


def alpha_frobenius(R, X) -> float:
    """Closed-form Frobenius-norm minimizer, used as a sanity cross-check."""
    R = np.asarray(R, dtype=float)
    X = np.asarray(X, dtype=float)
    denom = float(np.sum(R * R))
    return max(0.0, float(np.sum(X * R)) / denom)


@dataclass(frozen=True)
class StabilityCertificate:
    """Verified stability data for one bank on one feeder.

    ``cond_monotone``: sign pattern guarantees non-increasing maps.
    ``cond_slope_budget``: L_q strictly below 1/(kappa * ||Xhat||).
    ``cond_step_size``: requested eps strictly below eps_max (None when no
    eps was supplied).  ``overall`` covers the eps-independent conditions.
    """

    alpha_star: float
    Xhat_norm: float
    kappa_R_half: float
    L_p: float
    L_q: float
    Lq_budget: float
    eps_max: float
    eps: float | None
    cond_monotone: bool
    cond_slope_budget: bool
    cond_step_size: bool | None
    overall: bool
    margin: float
    violations: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["violations"] = list(self.violations)
        if math.isinf(self.Lq_budget):
            doc["Lq_budget"] = "inf"
        return doc


def _sign_violations(bank: ControllerBank) -> list[str]:
    bad = []
    for nd in bank.nodes:
        if np.any(nd.a < 0.0):
            bad.append(f"bus {nd.bus}: negative voltage input weight")
        if np.any(nd.w_p > 0.0):
            bad.append(f"bus {nd.bus}: positive active output weight")
        if np.any(nd.w_q > 0.0):
            bad.append(f"bus {nd.bus}: positive reactive output weight")
    return bad


def slope_budget(model: GridModel) -> tuple[float, float, float, float]:
    """(budget, alpha*, ||Xhat||, kappa(R^{1/2})) for a grid model."""
    a_star = alpha_star(model.R, model.X)
    xhat_norm = spectral_norm(model.X - a_star * model.R)
    kappa = kappa_sqrt(model.R)
    budget = math.inf if xhat_norm == 0.0 else 1.0 / (kappa * xhat_norm)
    return budget, a_star, xhat_norm, kappa


def certify(
    bank: ControllerBank,
    model: GridModel,
    eps: float | None = None,
    margin: float = DEFAULT_MARGIN,
) -> StabilityCertificate:
    """Evaluate every stability condition with certified slope bounds.

    A failing certificate is a normal result, not an error.  Strict
    inequalities are checked against a safety margin so parameter sets
    exactly on the boundary are rejected deterministically.
    """
    budget, a_star, xhat_norm, kappa = slope_budget(model)
    l_p, l_q = slope_bounds(bank)
    violations = _sign_violations(bank)
    cond_monotone = not violations
    if math.isinf(budget):
        cond_slope = True
    else:
        cond_slope = l_q < budget * (1.0 - margin)
        if not cond_slope:
            over = [nd.bus for nd in bank.nodes if np.sum(np.abs(nd.w_q * nd.a)) >= budget * (1.0 - margin)]
            violations.append(f"reactive slope bound {l_q:.6g} reaches budget {budget:.6g} (buses {over})")
    norm_r = spectral_norm(model.R)
    denom = 1.0 + kappa * l_q * xhat_norm + (l_p + a_star * l_q) * norm_r
    eps_max = min(1.0, 2.0 / denom)
    cond_step = None
    if eps is not None:
        cond_step = eps < eps_max * (1.0 - margin)
        if not cond_step:
            violations.append(f"step size {eps} is not below eps_max {eps_max:.6g}")
    return StabilityCertificate(
        alpha_star=a_star,
        Xhat_norm=xhat_norm,
        kappa_R_half=kappa,
        L_p=l_p,
        L_q=l_q,
        Lq_budget=budget,
        eps_max=eps_max,
        eps=eps,
        cond_monotone=cond_monotone,
        cond_slope_budget=cond_slope,
        cond_step_size=cond_step,
        overall=cond_monotone and cond_slope,
        margin=margin,
        violations=tuple(violations),
    )


def project_weighted_l1(u0, weights, budget: float) -> np.ndarray:
    """Euclidean projection of u0 >= 0 onto {u >= 0, sum_h w_h u_h <= budget}.

    Exact sort-based KKT solve: the projection has the form
    u_h = max(0, u0_h - tau * w_h) with tau >= 0 picked so the constraint
    is tight whenever the input violates it.  Zero-weight components pass
    through unchanged.
    """
    u0 = np.maximum(np.asarray(u0, dtype=float), 0.0)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0.0):
        raise ValueError("projection weights must be nonnegative")
    if not budget > 0.0:
        raise ValueError(f"projection budget must be positive, got {budget}")
    if math.isinf(budget) or float(np.dot(w, u0)) <= budget:
        return u0
    active = w > 0.0
    uw = u0[active]
    ww = w[active]
    # breakpoints where components hit zero, ascending
    taus = uw / ww
    order = np.argsort(taus, kind="stable")
    uw, ww, taus = uw[order], ww[order], taus[order]
    # suffix sums over components still positive past each breakpoint
    s1 = np.cumsum((ww * uw)[::-1])[::-1]
    s2 = np.cumsum((ww * ww)[::-1])[::-1]
    tau = None
    prev = 0.0
    for k in range(len(taus)):
        cand = (s1[k] - budget) / s2[k]
        if prev <= cand <= taus[k] + 1e-18:
            tau = cand
            break
        prev = taus[k]
    if tau is None:
        # all components driven to zero; constraint slack at the origin
        tau = taus[-1]
    out = u0.copy()
    out[active] = np.maximum(0.0, u0[active] - tau * w[active])
    return out


def project_bank(bank: ControllerBank, model: GridModel, margin: float = 0.0) -> ControllerBank:
    """Project every node onto the stability-feasible parameter set.

    Sign clamps first (voltage weights up to 0, output weights down to 0),
    then each node whose weighted reactive budget is exceeded gets its w_q
    replaced by the exact projection.  Idempotent.
    """
    budget, _, _, _ = slope_budget(model)
    eff_budget = budget if math.isinf(budget) else budget * (1.0 - margin)
    nodes = []
    for nd in bank.nodes:
        a = np.maximum(nd.a, 0.0)
        w_p = np.minimum(nd.w_p, 0.0)
        w_q = np.minimum(nd.w_q, 0.0)
        if not math.isinf(eff_budget) and float(np.sum(a * np.abs(w_q))) > eff_budget:
            w_q = -project_weighted_l1(-w_q, a, eff_budget)
        nodes.append(replace(nd, a=a, w_p=w_p, w_q=w_q))
    return bank.with_nodes(nodes)


@dataclass(frozen=True)
class SecantDiagnostics:
    """Secant slopes between two voltage profiles and the contraction data.

    ``s_matrix`` propagates voltage differences exactly under the affine
    model; ``contraction_bound`` is the triangle-inequality bound on the
    similarity-transformed update and stays below 1 for certified banks
    with an admissible step size.
    """

    P_diag: np.ndarray
    Q_diag: np.ndarray
    s_matrix: np.ndarray
    s_norm_similarity: float
    contraction_bound: float


def secant_diagnostics(
    model: GridModel,
    bank: ControllerBank,
    d,
    v_c,
    v_c_prime,
    eps: float,
) -> SecantDiagnostics:
    """Per-bus secants of the controller maps plus contraction bounds."""
    from .grid import _demand_vector

    vec = _demand_vector(d, model.n)
    d_c = vec[model.c_idx]
    v_c = np.asarray(v_c, dtype=float)
    v_p = np.asarray(v_c_prime, dtype=float)
    c = model.n_ctrl
    P = np.zeros(c)
    Q = np.zeros(c)
    for i, nd in enumerate(bank.nodes):
        if v_c[i] == v_p[i]:
            continue
        p1, q1 = eval_nif(nd, v_c[i], d_c[i].real, d_c[i].imag)
        p2, q2 = eval_nif(nd, v_p[i], d_c[i].real, d_c[i].imag)
        P[i] = (p1 - p2) / (v_c[i] - v_p[i])
        Q[i] = (q1 - q2) / (v_c[i] - v_p[i])

    a_star = alpha_star(model.R, model.X)
    xhat = model.X - a_star * model.R
    r_half = sqrt_psd(model.R)
    r_inv_half = invsqrt_psd(model.R)
    eye = np.eye(c)
    z1 = (1.0 - eps) * eye - eps * r_half @ np.diag(np.abs(P) + a_star * np.abs(Q)) @ r_half
    z2 = eps * r_inv_half @ xhat @ np.diag(np.abs(Q)) @ r_half
    s_mat = (1.0 - eps) * eye + eps * model.R @ np.diag(P) + eps * model.X @ np.diag(Q)
    return SecantDiagnostics(
        P_diag=P,
        Q_diag=Q,
        s_matrix=s_mat,
        s_norm_similarity=operator_norm(z1 - z2),
        contraction_bound=spectral_norm(0.5 * (z1 + z1.T)) + operator_norm(z2),
    )


def save_certificate(cert: StabilityCertificate, path, input_hashes=None) -> None:
    doc = cert.to_dict()
    doc["inputs"] = dict(input_hashes or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
