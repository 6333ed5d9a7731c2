"""Local controller evaluation: learned tanh banks and linear droop baselines.

Each controllable bus carries a single-hidden-layer tanh network mapping
(local voltage, local demand) to an active/reactive setpoint, saturated to
the bus capability box.  With input weights a >= 0 and output weights
w_p, w_q <= 0 the maps are non-increasing in voltage, and the certified
slope bounds max_n sum_h |w a| survive both tanh (|sech^2| <= 1) and the
box clamp (1-Lipschitz).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np


class ControllerFormatError(ValueError):
    """Malformed controller file or inconsistent bank."""


@dataclass
class NodeParams:
    """Parameters of one bus controller plus its capability box.

    Arrays all have length H.  ``bias`` is the hidden-layer offset; ``e_p``
    and ``e_q`` are the output offsets.  The box is runtime state copied
    from the feeder, not part of the serialized parameter set.
    """

    bus: int
    w_p: np.ndarray
    w_q: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    bias: np.ndarray
    e_p: float
    e_q: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float

    def __post_init__(self):
        for name in ("w_p", "w_q", "a", "b", "c", "bias"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).copy())
        h = len(self.w_p)
        for name in ("w_q", "a", "b", "c", "bias"):
            if len(getattr(self, name)) != h:
                raise ControllerFormatError(f"bus {self.bus}: parameter arrays disagree on H")

    @property
    def H(self) -> int:
        return len(self.w_p)


def eval_nif(params: NodeParams, v: float, p_load: float, q_load: float) -> tuple[float, float]:
    """Controller output at local voltage v and demand components, clamped."""
    t = np.tanh(params.a * v + params.b * p_load + params.c * q_load + params.bias)
    p_raw = float(np.dot(params.w_p, t)) + params.e_p
    q_raw = float(np.dot(params.w_q, t)) + params.e_q
    p = min(max(p_raw, params.p_min), params.p_max)
    q = min(max(q_raw, params.q_min), params.q_max)
    return p, q


class ControllerBank:
    """Controllers for every controllable bus, in ascending bus order.

    Treated as immutable once built: training and projection construct new
    banks via :meth:`with_nodes`.
    """

    def __init__(self, nodes, metadata=None):
        nodes = sorted(nodes, key=lambda nd: nd.bus)
        buses = [nd.bus for nd in nodes]
        if len(set(buses)) != len(buses):
            raise ControllerFormatError("duplicate bus in controller bank")
        self.nodes = tuple(nodes)
        self.metadata = dict(metadata or {})
        self._stack = None

    @property
    def buses(self) -> tuple[int, ...]:
        return tuple(nd.bus for nd in self.nodes)

    def node(self, bus: int) -> NodeParams:
        for nd in self.nodes:
            if nd.bus == bus:
                return nd
        raise KeyError(f"no controller for bus {bus}")

    def with_nodes(self, nodes, metadata=None) -> "ControllerBank":
        return ControllerBank(nodes, self.metadata if metadata is None else metadata)

    def stacked(self) -> dict:
        """Parameter arrays stacked (C, H) / (C,) for vectorized evaluation."""
        if self._stack is None:
            self._stack = {
                "w_p": np.array([nd.w_p for nd in self.nodes]),
                "w_q": np.array([nd.w_q for nd in self.nodes]),
                "a": np.array([nd.a for nd in self.nodes]),
                "b": np.array([nd.b for nd in self.nodes]),
                "c": np.array([nd.c for nd in self.nodes]),
                "bias": np.array([nd.bias for nd in self.nodes]),
                "e_p": np.array([nd.e_p for nd in self.nodes]),
                "e_q": np.array([nd.e_q for nd in self.nodes]),
                "p_lo": np.array([nd.p_min for nd in self.nodes]),
                "p_hi": np.array([nd.p_max for nd in self.nodes]),
                "q_lo": np.array([nd.q_min for nd in self.nodes]),
                "q_hi": np.array([nd.q_max for nd in self.nodes]),
            }
        return self._stack

    def eval_all(self, v_c, p_load, q_load):
        """Vectorized outputs for all buses; inputs are (C,) arrays."""
        s = self.stacked()
        pre = (
            s["a"] * np.asarray(v_c)[:, None]
            + s["b"] * np.asarray(p_load)[:, None]
            + s["c"] * np.asarray(q_load)[:, None]
            + s["bias"]
        )
        t = np.tanh(pre)
        p_raw = np.sum(s["w_p"] * t, axis=1) + s["e_p"]
        q_raw = np.sum(s["w_q"] * t, axis=1) + s["e_q"]
        p = np.clip(p_raw, s["p_lo"], s["p_hi"])
        q = np.clip(q_raw, s["q_lo"], s["q_hi"])
        return p, q

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "nodes": [
                {
                    "bus": nd.bus,
                    "H": nd.H,
                    "w_p": nd.w_p.tolist(),
                    "w_q": nd.w_q.tolist(),
                    "a": nd.a.tolist(),
                    "b": nd.b.tolist(),
                    "c": nd.c.tolist(),
                    "bias": nd.bias.tolist(),
                    "e_p": nd.e_p,
                    "e_q": nd.e_q,
                }
                for nd in self.nodes
            ],
        }

    def param_hash(self) -> str:
        blob = json.dumps(self.to_dict()["nodes"], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def save_bank(bank: ControllerBank, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bank.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_bank(path, spec) -> ControllerBank:
    """Load controller parameters and re-attach boxes from the feeder spec."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ControllerFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    boxes = {b.bus: b for b in spec.controllable}
    nodes = []
    try:
        for nd in doc["nodes"]:
            bus = int(nd["bus"])
            if bus not in boxes:
                raise ControllerFormatError(f"{path}: bus {bus} is not controllable in this feeder")
            box = boxes[bus]
            nodes.append(
                NodeParams(
                    bus=bus,
                    w_p=nd["w_p"],
                    w_q=nd["w_q"],
                    a=nd["a"],
                    b=nd["b"],
                    c=nd["c"],
                    bias=nd["bias"],
                    e_p=float(nd["e_p"]),
                    e_q=float(nd["e_q"]),
                    p_min=box.p_min,
                    p_max=box.p_max,
                    q_min=box.q_min,
                    q_max=box.q_max,
                )
            )
    except KeyError as exc:
        raise ControllerFormatError(f"{path}: missing controller field {exc}") from exc
    if sorted(nd.bus for nd in nodes) != sorted(boxes):
        raise ControllerFormatError(f"{path}: bank does not cover every controllable bus")
    return ControllerBank(nodes, doc.get("metadata", {}))


def slope_bounds(bank: ControllerBank) -> tuple[float, float]:
    """Certified voltage-slope bounds (L_p, L_q) = max_n sum_h |w a|.

    Upper-bounds the worst-case derivative magnitude of any node's maps in
    its voltage input; saturation can only shrink secant slopes.
    """
    l_p = 0.0
    l_q = 0.0
    for nd in bank.nodes:
        l_p = max(l_p, float(np.sum(np.abs(nd.w_p * nd.a))))
        l_q = max(l_q, float(np.sum(np.abs(nd.w_q * nd.a))))
    return l_p, l_q


# ---------------------------------------------------------------------------
# linear droop baselines


@dataclass(frozen=True)
class LinearCurveParams:
    """Two-breakpoint droop curves for one bus.

    Active power holds p_max below v_min_th, ramps down linearly, and holds
    p_min above v_max.  Reactive power ramps between v_min and v_max.
    """

    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_min_th: float = 1.03
    v_min: float = 0.95
    v_max: float = 1.05

    def __post_init__(self):
        if not (self.v_min < self.v_max) or not (self.v_min_th < self.v_max):
            raise ControllerFormatError("droop breakpoints must satisfy v_min < v_max and v_min_th < v_max")

    @property
    def slope_p(self) -> float:
        return (self.p_max - self.p_min) / (self.v_max - self.v_min_th)

    @property
    def slope_q(self) -> float:
        return (self.q_max - self.q_min) / (self.v_max - self.v_min)


def eval_volt_watt(params: LinearCurveParams, v: float) -> float:
    if v <= params.v_min_th:
        return params.p_max
    if v >= params.v_max:
        return params.p_min
    return -params.slope_p * (v - params.v_min_th) + params.p_max


def eval_volt_var(params: LinearCurveParams, v: float) -> float:
    if v <= params.v_min:
        return params.q_max
    if v >= params.v_max:
        return params.q_min
    return -params.slope_q * (v - params.v_min) + params.q_max


class BaselineBank:
    """Droop curves wrapped with the same evaluation surface as a bank."""

    def __init__(self, curves: dict[int, LinearCurveParams]):
        self.curves = dict(sorted(curves.items()))

    @classmethod
    def from_spec(cls, spec, v_min_th: float = 1.03, v_min: float = 0.95, v_max: float = 1.05):
        return cls(
            {
                box.bus: LinearCurveParams(
                    p_min=box.p_min,
                    p_max=box.p_max,
                    q_min=box.q_min,
                    q_max=box.q_max,
                    v_min_th=v_min_th,
                    v_min=v_min,
                    v_max=v_max,
                )
                for box in spec.controllable
            }
        )

    @property
    def buses(self) -> tuple[int, ...]:
        return tuple(self.curves)

    def eval_all(self, v_c, p_load, q_load):
        p = np.array([eval_volt_watt(cv, v) for cv, v in zip(self.curves.values(), v_c)])
        q = np.array([eval_volt_var(cv, v) for cv, v in zip(self.curves.values(), v_c)])
        return p, q
