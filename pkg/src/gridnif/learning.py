"""Unsupervised training of controller banks against the linearized model.

The loss per demand sample is the full-network squared voltage deviation
plus an equity penalty: the l2 norm of the inner products between the
active-power decisions and one or more unit-norm protected feature
vectors (electrical distance by default).  Gradients are exact analytic
derivatives through the tanh layer and the affine voltage map; output
saturation contributes identity inside the box and zero outside.  Training
is plain or adaptive-moment stochastic projected gradient descent with a
periodic exact projection onto the stability-feasible parameter set.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import ControllerBank, NodeParams
from .grid import GridModel, LoadScenario, ScenarioSet, nominal_voltage
from .stability import project_bank


class TrainingDiverged(RuntimeError):
    """Mean loss blew past the divergence guard; training aborted."""


class ConfigError(ValueError):
    """Invalid training configuration or protected-features matrix."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    batch_size: int = 32
    learning_rate: float = 0.01
    equity_weight: float = 0.0154
    projection_period: int = 10
    seed: int = 0
    hidden: int = 50
    optimizer: str = "adam"  # "plain" | "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    input_voltage: str = "precontrol"  # "precontrol" | "closedloop"


def validate_config(cfg: TrainConfig) -> None:
    if cfg.learning_rate <= 0.0:
        raise ConfigError("learning_rate must be positive")
    if cfg.equity_weight < 0.0:
        raise ConfigError("equity_weight must be nonnegative")
    if cfg.projection_period < 1 or cfg.batch_size < 1 or cfg.hidden < 1 or cfg.epochs < 0:
        raise ConfigError("projection_period, batch_size, hidden must be >= 1 and epochs >= 0")
    if cfg.optimizer not in ("plain", "adam"):
        raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
    if cfg.input_voltage not in ("precontrol", "closedloop"):
        raise ConfigError(f"unknown input_voltage convention {cfg.input_voltage!r}")


def config_from_dict(doc: dict) -> TrainConfig:
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
    cfg = TrainConfig(**doc)
    cfg = replace(
        cfg,
        epochs=int(cfg.epochs),
        batch_size=int(cfg.batch_size),
        projection_period=int(cfg.projection_period),
        seed=int(cfg.seed),
        hidden=int(cfg.hidden),
        learning_rate=float(cfg.learning_rate),
        equity_weight=float(cfg.equity_weight),
    )
    validate_config(cfg)
    return cfg


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(doc)


@dataclass(frozen=True)
class ProtectedFeatures:
    """Unit-norm feature columns (C x F) the decisions should not load on."""

    Z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.Z, dtype=float)
        if z.ndim != 2 or z.shape[1] < 1:
            raise ConfigError("protected features must form a C x F matrix with F >= 1")
        if z.shape[1] > z.shape[0] - 1:
            raise ConfigError(
                f"at most C-1 protected features are usable, got F={z.shape[1]} for C={z.shape[0]}"
            )
        norms = np.linalg.norm(z, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ConfigError("protected feature columns must have unit norm")
        object.__setattr__(self, "Z", z)


def electrical_distance_features(model: GridModel) -> ProtectedFeatures:
    """Single protected feature: normalized electrical distance to the root."""
    z = model.diag_R / np.linalg.norm(model.diag_R)
    return ProtectedFeatures(z.reshape(-1, 1))


def init_bank(model: GridModel, hidden: int, rng: np.random.Generator) -> ControllerBank:
    """Fresh bank: unit voltage weights, small nonpositive output weights,
    output offsets at the box midpoints."""
    nodes = []
    for box in model.spec.controllable:
        w_p = rng.uniform(-0.1, 0.0, hidden)
        w_q = rng.uniform(-0.1, 0.0, hidden)
        b = rng.uniform(-0.5, 0.5, hidden)
        c = rng.uniform(-0.5, 0.5, hidden)
        bias = rng.uniform(-0.5, 0.5, hidden)
        nodes.append(
            NodeParams(
                bus=box.bus,
                w_p=w_p,
                w_q=w_q,
                a=np.ones(hidden),
                b=b,
                c=c,
                bias=bias,
                e_p=0.5 * (box.p_min + box.p_max),
                e_q=0.5 * (box.q_min + box.q_max),
                p_min=box.p_min,
                p_max=box.p_max,
                q_min=box.q_min,
                q_max=box.q_max,
            )
        )
    return ControllerBank(nodes)


# parameter classes updated by the optimizer, in a fixed order
PARAM_KEYS = ("w_p", "w_q", "a", "b", "c", "bias", "e_p", "e_q")


def _controller_inputs(model: GridModel, scenarios, bank, convention: str):
    """(V, PL, QL) arrays of shape (M, C): per-sample controller inputs."""
    d_mat = np.array([s.d for s in scenarios])
    ci = model.c_idx
    pl = d_mat.real[:, ci]
    ql = d_mat.imag[:, ci]
    if convention == "precontrol":
        vhat = d_mat.real @ model.R_tilde.T + d_mat.imag @ model.X_tilde.T + 1.0
        v_in = vhat[:, ci]
    else:
        from .sim import run_fixed

        v_in = np.empty((len(scenarios), model.n_ctrl))
        for i, s in enumerate(scenarios):
            res = run_fixed(model, bank, s, eps=0.1, max_iter=500, tol=1e-9)
            v_in[i] = res.v_fix[ci]
    return pl, ql, v_in


def _forward_backward(model: GridModel, bank: ControllerBank, pl, ql, v_in, lam, Z):
    """Batch losses and exact gradients of mean(f_v + lam * f_eq).

    All samples evaluated at once; accumulation order is the fixed
    lexicographic order of (sample, bus, unit) sums inside numpy.
    """
    s = bank.stacked()
    m = pl.shape[0]
    pre = (
        s["a"][None, :, :] * v_in[:, :, None]
        + s["b"][None, :, :] * pl[:, :, None]
        + s["c"][None, :, :] * ql[:, :, None]
        + s["bias"][None, :, :]
    )
    t = np.tanh(pre)
    p_raw = np.einsum("ch,mch->mc", s["w_p"], t) + s["e_p"]
    q_raw = np.einsum("ch,mch->mc", s["w_q"], t) + s["e_q"]
    p = np.clip(p_raw, s["p_lo"], s["p_hi"])
    q = np.clip(q_raw, s["q_lo"], s["q_hi"])
    mask_p = ((p_raw > s["p_lo"]) & (p_raw < s["p_hi"])).astype(float)
    mask_q = ((q_raw > s["q_lo"]) & (q_raw < s["q_hi"])).astype(float)

    d_mat_r = np.array([sc.real for sc in _forward_backward._dr]) if False else None
    # full voltages: v = G_p p + G_q q + vhat
    vhat = _forward_backward._vhat
    v_full = p @ model.G_p.T + q @ model.G_q.T + vhat
    resid = v_full - 1.0
    f_v = np.sum(resid * resid, axis=1)

    g = p @ Z  # (M, F)
    g_norm = np.linalg.norm(g, axis=1)
    f_eq = g_norm

    # dL/dp, dL/dq per sample (mean over batch applied at the end)
    dl_dp = 2.0 * (resid @ model.G_p)
    dl_dq = 2.0 * (resid @ model.G_q)
    if lam > 0.0:
        safe = np.where(g_norm > 0.0, g_norm, 1.0)
        dl_dp = dl_dp + lam * np.where(g_norm[:, None] > 0.0, (g / safe[:, None]) @ Z.T, 0.0)
    dl_dp = dl_dp * mask_p
    dl_dq = dl_dq * mask_q

    sech2 = 1.0 - t * t
    trunk = (dl_dp[:, :, None] * s["w_p"][None, :, :] + dl_dq[:, :, None] * s["w_q"][None, :, :]) * sech2
    grads = {
        "w_p": np.einsum("mc,mch->ch", dl_dp, t) / m,
        "w_q": np.einsum("mc,mch->ch", dl_dq, t) / m,
        "a": np.einsum("mch,mc->ch", trunk, v_in) / m,
        "b": np.einsum("mch,mc->ch", trunk, pl) / m,
        "c": np.einsum("mch,mc->ch", trunk, ql) / m,
        "bias": np.sum(trunk, axis=0) / m,
        "e_p": np.sum(dl_dp, axis=0) / m,
        "e_q": np.sum(dl_dq, axis=0) / m,
    }
    return grads, float(np.mean(f_v)), float(np.mean(f_eq))


def _batch_eval(model, bank, scenarios, lam, Z, convention):
    pl, ql, v_in = _controller_inputs(model, scenarios, bank, convention)
    d_mat = np.array([s.d for s in scenarios])
    _forward_backward._vhat = d_mat.real @ model.R_tilde.T + d_mat.imag @ model.X_tilde.T + 1.0
    return _forward_backward(model, bank, pl, ql, v_in, lam, Z)


def loss_fv(model: GridModel, bank: ControllerBank, scenario: LoadScenario,
            input_voltage: str = "precontrol") -> float:
    """Full-network squared voltage deviation under the bank's decisions."""
    _, fv, _ = _batch_eval(model, bank, [scenario], 0.0, np.zeros((model.n_ctrl, 1)), input_voltage)
    return fv


def loss_feq(gamma_vec, features: ProtectedFeatures) -> float:
    """Norm of the decisions' loadings on the protected features."""
    g = np.asarray(gamma_vec, dtype=float) @ features.Z
    return float(np.linalg.norm(g))


def gradients(model: GridModel, bank: ControllerBank, batch, equity_weight: float,
              features: ProtectedFeatures | None = None,
              input_voltage: str = "precontrol") -> dict:
    """Exact analytic gradients of the batch-mean loss per parameter class.

    Returns {name: array} with shapes matching the stacked bank parameters.
    """
    if equity_weight > 0.0 and features is None:
        raise ConfigError("equity_weight > 0 requires protected features")
    Z = features.Z if features is not None else np.zeros((model.n_ctrl, 1))
    grads, _, _ = _batch_eval(model, bank, list(batch), equity_weight, Z, input_voltage)
    return grads


@dataclass
class TrainTrace:
    f_v: list = field(default_factory=list)
    f_eq: list = field(default_factory=list)
    total: list = field(default_factory=list)
    proj_event: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "f_v", "f_eq", "total", "proj_event", "grad_norm"])
            for i in range(len(self.f_v)):
                writer.writerow(
                    [i, repr(self.f_v[i]), repr(self.f_eq[i]), repr(self.total[i]),
                     self.proj_event[i], repr(self.grad_norm[i])]
                )


class _Adam:
    def __init__(self, shapes, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(sh) for k, sh in shapes.items()}
        self.v = {k: np.zeros(sh) for k, sh in shapes.items()}
        self.t = 0

    def update(self, params, grads):
        self.t += 1
        for k in PARAM_KEYS:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            mhat = self.m[k] / (1.0 - self.b1 ** self.t)
            vhat = self.v[k] / (1.0 - self.b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _PlainSgd:
    """Bare stochastic step: theta -= (lr/2) * grad of the batch mean."""

    def __init__(self, lr):
        self.lr = lr

    def update(self, params, grads):
        for k in PARAM_KEYS:
            params[k] -= 0.5 * self.lr * grads[k]


def _params_from_bank(bank):
    s = bank.stacked()
    return {k: s[k].copy() for k in PARAM_KEYS}


def _bank_from_params(bank, params):
    nodes = []
    for i, nd in enumerate(bank.nodes):
        nodes.append(
            replace(
                nd,
                w_p=params["w_p"][i],
                w_q=params["w_q"][i],
                a=params["a"][i],
                b=params["b"][i],
                c=params["c"][i],
                bias=params["bias"][i],
                e_p=float(params["e_p"][i]),
                e_q=float(params["e_q"][i]),
            )
        )
    return bank.with_nodes(nodes)


def train(
    model: GridModel,
    scenarios: ScenarioSet,
    features: ProtectedFeatures | None,
    cfg: TrainConfig,
) -> tuple[ControllerBank, TrainTrace]:
    """Projected stochastic training; deterministic for a fixed seed.

    Projects onto the stability-feasible set every ``projection_period``
    epochs and once more at the end, so the returned bank always satisfies
    the sign and reactive-budget conditions.  Aborts if the epoch-mean loss
    exceeds a million times its starting value.
    """
    validate_config(cfg)
    if len(scenarios) == 0:
        raise ConfigError("cannot train on an empty scenario set")
    if cfg.equity_weight > 0.0 and features is None:
        features = electrical_distance_features(model)
    Z = features.Z if features is not None else np.zeros((model.n_ctrl, 1))

    rng = np.random.default_rng(cfg.seed)
    bank = project_bank(init_bank(model, cfg.hidden, rng), model)
    trace = TrainTrace()
    if cfg.epochs == 0:
        return bank, trace

    scen = list(scenarios)
    m_total = len(scen)
    params = _params_from_bank(bank)
    if cfg.optimizer == "adam":
        opt = _Adam({k: v.shape for k, v in params.items()}, cfg.learning_rate,
                    cfg.beta1, cfg.beta2, cfg.eps_adam)
    else:
        opt = _PlainSgd(cfg.learning_rate)

    initial_loss = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(m_total)
        fv_sum = feq_sum = gn_sum = 0.0
        n_batches = 0
        for start in range(0, m_total, cfg.batch_size):
            batch = [scen[i] for i in order[start : start + cfg.batch_size]]
            bank = _bank_from_params(bank, params)
            grads, fv, feq = _batch_eval(model, bank, batch, cfg.equity_weight, Z, cfg.input_voltage)
            opt.update(params, grads)
            fv_sum += fv
            feq_sum += feq
            gn_sum += math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            n_batches += 1
        mean_fv = fv_sum / n_batches
        mean_feq = feq_sum / n_batches
        mean_total = mean_fv + cfg.equity_weight * mean_feq
        proj = 0
        if (epoch + 1) % cfg.projection_period == 0:
            bank = project_bank(_bank_from_params(bank, params), model)
            params = _params_from_bank(bank)
            proj = 1
        trace.f_v.append(mean_fv)
        trace.f_eq.append(mean_feq)
        trace.total.append(mean_total)
        trace.proj_event.append(proj)
        trace.grad_norm.append(gn_sum / n_batches)
        if initial_loss is None:
            initial_loss = max(mean_total, 1e-30)
        elif mean_total > 1e6 * initial_loss:
            raise TrainingDiverged(
                f"epoch {epoch}: mean loss {mean_total:.3e} exceeds 1e6 x initial {initial_loss:.3e}"
            )

    bank = project_bank(_bank_from_params(bank, params), model)
    return bank, trace
