"""Radial feeder model: admittance matrix, voltage sensitivities, scenarios.

The feeder is a tree rooted at the substation (bus 0, slack at 1 p.u.).
Line admittances build the bus admittance matrix; inverting its reduced
form (substation row/column removed) yields the resistance/reactance
sensitivity matrices that drive the linearized voltage map

    v = [R; R_L^T] p + [X; X_L^T] q + vhat,   vhat = Rt Re(d) + Xt Im(d) + 1

where p, q are controllable injections and d is the complex net demand
(injections positive: loads enter with negative sign).

All vectors exposed by this module use original bus ids (bus n at index
n-1); the controllable/load partition is kept internally as index arrays.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import NumericsError, kappa_sqrt, sym_eig


class FeederFormatError(ValueError):
    """Malformed or physically invalid feeder description."""


class ScenarioFormatError(ValueError):
    """Malformed scenario file or config."""


@dataclass(frozen=True)
class Edge:
    m: int
    n: int
    y: complex  # series admittance, per-unit


@dataclass(frozen=True)
class ControlBox:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class FeederSpec:
    """Feeder topology plus controllable-bus capability boxes.

    ``bus_count`` counts the substation, so there are N = bus_count - 1
    non-slack buses.  Edges must form a spanning tree over all buses.
    """

    bus_count: int
    edges: tuple[Edge, ...]
    controllable: tuple[ControlBox, ...]
    name: str = "feeder"
    base_mva: float | None = None
    base_kv: float | None = None

    @property
    def n(self) -> int:
        return self.bus_count - 1


def validate_spec(spec: FeederSpec) -> None:
    if spec.bus_count < 2:
        raise FeederFormatError("feeder needs at least the substation and one bus")
    n_total = spec.bus_count
    if len(spec.edges) != n_total - 1:
        raise FeederFormatError(
            f"{len(spec.edges)} edges for {n_total} buses: a spanning tree needs {n_total - 1}"
        )
    seen = set()
    adj: dict[int, list[int]] = {b: [] for b in range(n_total)}
    for e in spec.edges:
        if e.m == e.n:
            raise FeederFormatError(f"self-loop at bus {e.m}")
        if not (0 <= e.m < n_total and 0 <= e.n < n_total):
            raise FeederFormatError(f"edge ({e.m},{e.n}) references an unknown bus")
        key = (min(e.m, e.n), max(e.m, e.n))
        if key in seen:
            raise FeederFormatError(f"duplicate edge between buses {key[0]} and {key[1]}")
        seen.add(key)
        if not (e.y.real > 0.0) or not math.isfinite(abs(e.y)):
            raise FeederFormatError(
                f"edge ({e.m},{e.n}): admittance must have positive real part"
            )
        adj[e.m].append(e.n)
        adj[e.n].append(e.m)
    # connectivity; with exactly N edges this also rules out cycles
    stack, visited = [0], {0}
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in visited:
                visited.add(nb)
                stack.append(nb)
    if len(visited) != n_total:
        raise FeederFormatError("edges do not connect all buses (not a spanning tree)")
    seen_ctrl = set()
    for box in spec.controllable:
        if not (1 <= box.bus <= spec.n):
            raise FeederFormatError(f"controllable bus {box.bus} out of range 1..{spec.n}")
        if box.bus in seen_ctrl:
            raise FeederFormatError(f"controllable bus {box.bus} listed twice")
        seen_ctrl.add(box.bus)
        if box.p_min > box.p_max or box.q_min > box.q_max:
            raise FeederFormatError(f"bus {box.bus}: empty capability box")
    if not spec.controllable:
        raise FeederFormatError("at least one controllable bus is required")


_FEEDER_KEYS = {"name", "description", "base_mva", "base_kv", "buses", "edges", "controllable"}
_EDGE_KEYS = {"from", "to", "r", "x"}
_CTRL_KEYS = {"bus", "p_min", "p_max", "q_min", "q_max"}


def feeder_from_dict(doc: dict) -> FeederSpec:
    if not isinstance(doc, dict):
        raise FeederFormatError("feeder document must be a JSON object")
    unknown = set(doc) - _FEEDER_KEYS
    if unknown:
        # shunt elements in particular are rejected, not ignored
        raise FeederFormatError(f"unsupported feeder fields: {sorted(unknown)}")
    try:
        bus_count = int(doc["buses"])
        edges = []
        for i, e in enumerate(doc["edges"]):
            extra = set(e) - _EDGE_KEYS
            if extra:
                raise FeederFormatError(f"edge {i}: unsupported fields {sorted(extra)}")
            r, x = float(e["r"]), float(e["x"])
            if r <= 0.0:
                raise FeederFormatError(f"edge {i}: resistance must be positive, got {r}")
            edges.append(Edge(int(e["from"]), int(e["to"]), 1.0 / complex(r, x)))
        ctrl = []
        for i, c in enumerate(doc.get("controllable", [])):
            extra = set(c) - _CTRL_KEYS
            if extra:
                raise FeederFormatError(f"controllable {i}: unsupported fields {sorted(extra)}")
            ctrl.append(
                ControlBox(
                    int(c["bus"]),
                    float(c["p_min"]),
                    float(c["p_max"]),
                    float(c["q_min"]),
                    float(c["q_max"]),
                )
            )
    except KeyError as exc:
        raise FeederFormatError(f"missing feeder field: {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FeederFormatError):
            raise
        raise FeederFormatError(f"malformed feeder value: {exc}") from exc
    spec = FeederSpec(
        bus_count=bus_count,
        edges=tuple(edges),
        controllable=tuple(sorted(ctrl, key=lambda b: b.bus)),
        name=str(doc.get("name", "feeder")),
        base_mva=float(doc["base_mva"]) if "base_mva" in doc else None,
        base_kv=float(doc["base_kv"]) if "base_kv" in doc else None,
    )
    validate_spec(spec)
    return spec


def load_feeder(path) -> FeederSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return feeder_from_dict(doc)


def build_admittance(spec: FeederSpec) -> np.ndarray:
    """Full (N+1)x(N+1) bus admittance matrix; symmetric with zero row sums."""
    validate_spec(spec)
    n_total = spec.bus_count
    y_full = np.zeros((n_total, n_total), dtype=complex)
    for e in spec.edges:
        y_full[e.m, e.n] -= e.y
        y_full[e.n, e.m] -= e.y

        y_full[e.m, e.m] += e.y
        y_full[e.n, e.n] += e.y
    return y_full


@dataclass(frozen=True)
class GridModel:
    """Immutable sensitivity model of a feeder.

    ``R_tilde``/``X_tilde`` are the full NxN real/imaginary parts of the
    reduced admittance inverse in original bus order.  ``R``/``X`` are the
    controllable-block submatrices, ``R_L``/``X_L`` the C x L couplings and
    ``diag_R`` the per-controllable-bus electrical distance.
    """

    spec: FeederSpec
    R_tilde: np.ndarray
    X_tilde: np.ndarray
    c_buses: tuple[int, ...]
    l_buses: tuple[int, ...]
    R: np.ndarray
    X: np.ndarray
    R_L: np.ndarray
    X_L: np.ndarray
    diag_R: np.ndarray
    # stacked voltage maps [R; R_L^T], [X; X_L^T] in original bus order
    G_p: np.ndarray = field(repr=False)
    G_q: np.ndarray = field(repr=False)
    p_lo: np.ndarray = field(repr=False)
    p_hi: np.ndarray = field(repr=False)
    q_lo: np.ndarray = field(repr=False)
    q_hi: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def n_ctrl(self) -> int:
        return len(self.c_buses)

    @property
    def c_idx(self) -> np.ndarray:
        return np.asarray(self.c_buses, dtype=int) - 1


def build_grid_model(spec: FeederSpec) -> GridModel:
    """Invert the reduced admittance matrix and partition the sensitivities."""
    y_full = build_admittance(spec)
    y_red = y_full[1:, 1:]
    try:
        z = np.linalg.inv(y_red)
    except np.linalg.LinAlgError as exc:
        raise FeederFormatError("reduced admittance matrix is singular (disconnected network)") from exc
    z = 0.5 * (z + z.T)
    resid = np.max(np.abs(y_red @ z - np.eye(spec.n)))
    if resid > 1e-9 * max(1.0, np.max(np.abs(y_red)) * np.max(np.abs(z))):
        raise FeederFormatError(f"admittance inversion failed (residual {resid:.3e})")
    r_tilde = np.ascontiguousarray(z.real)
    x_tilde = np.ascontiguousarray(z.imag)

    c_buses = tuple(box.bus for box in spec.controllable)
    l_buses = tuple(b for b in range(1, spec.bus_count) if b not in set(c_buses))
    ci = np.asarray(c_buses, dtype=int) - 1
    li = np.asarray(l_buses, dtype=int) - 1

    r_cc = r_tilde[np.ix_(ci, ci)]
    x_cc = x_tilde[np.ix_(ci, ci)]
    for nm, blk in (("R", r_cc), ("X", x_cc)):
        try:
            np.linalg.cholesky(blk)
        except np.linalg.LinAlgError as exc:
            raise FeederFormatError(f"{nm} block is not positive definite") from exc

    boxes = spec.controllable
    return GridModel(
        spec=spec,
        R_tilde=r_tilde,
        X_tilde=x_tilde,
        c_buses=c_buses,
        l_buses=l_buses,
        R=r_cc,
        X=x_cc,
        R_L=r_tilde[np.ix_(ci, li)] if len(li) else np.zeros((len(ci), 0)),
        X_L=x_tilde[np.ix_(ci, li)] if len(li) else np.zeros((len(ci), 0)),
        diag_R=np.diag(r_cc).copy(),
        G_p=r_tilde[:, ci].copy(),
        G_q=x_tilde[:, ci].copy(),
        p_lo=np.array([b.p_min for b in boxes]),
        p_hi=np.array([b.p_max for b in boxes]),
        q_lo=np.array([b.q_min for b in boxes]),
        q_hi=np.array([b.q_max for b in boxes]),
    )


def grid_spectra(model: GridModel) -> dict:
    """Eigenvalue extremes and conditioning of the controllable blocks."""
    w_r = sym_eig(model.R).eigenvalues
    w_x = sym_eig(model.X).eigenvalues
    return {
        "lambda_min_R": float(w_r[0]),
        "lambda_max_R": float(w_r[-1]),
        "lambda_min_X": float(w_x[0]),
        "lambda_max_X": float(w_x[-1]),
        "kappa_R_half": kappa_sqrt(model.R),
    }


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class LoadScenario:
    minute: int
    d: np.ndarray  # complex net demand per bus, injections positive


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple[LoadScenario, ...]
    n_bus: int
    source: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, i) -> LoadScenario:
        return self.scenarios[i]

    def window(self, start_minute: int, stop_minute: int) -> "ScenarioSet":
        """Scenarios with start_minute <= minute < stop_minute."""
        kept = tuple(s for s in self.scenarios if start_minute <= s.minute < stop_minute)
        return ScenarioSet(kept, self.n_bus, dict(self.source))

    def subsample(self, every: int) -> "ScenarioSet":
        kept = self.scenarios[::every]
        return ScenarioSet(kept, self.n_bus, dict(self.source))

    def demand_matrix(self) -> np.ndarray:
        return np.array([s.d for s in self.scenarios])


def _validate_set(scenarios, n_bus):
    last = None
    for s in scenarios:
        if len(s.d) != n_bus:
            raise ScenarioFormatError(f"minute {s.minute}: expected {n_bus} buses, got {len(s.d)}")
        if not np.all(np.isfinite(s.d.view(float))):
            raise ScenarioFormatError(f"minute {s.minute}: non-finite demand")
        if last is not None and s.minute <= last:
            raise ScenarioFormatError(f"timestamps not strictly increasing at minute {s.minute}")
        last = s.minute


SCENARIO_HEADER = ["minute", "bus", "p_load", "q_load", "pv"]


def load_scenarios(path, n_bus: int, fmt: str = "csv") -> ScenarioSet:
    """Parse a scenario CSV into net complex demands.

    Schema: header ``minute,bus,p_load,q_load,pv``; per-unit columns;
    minutes 0-based.  Net injection per bus is (-p_load + pv) - j*q_load.
    Buses missing from a minute default to zero demand.
    """
    if fmt != "csv":
        raise ScenarioFormatError(f"unsupported scenario format {fmt!r}")
    per_minute: dict[int, np.ndarray] = {}
    filled: dict[int, set] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ScenarioFormatError(f"{path}: empty file, missing header") from None
        if [h.strip() for h in header] != SCENARIO_HEADER:
            raise ScenarioFormatError(
                f"{path}: line 1: expected header {','.join(SCENARIO_HEADER)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise ScenarioFormatError(f"{path}: line {lineno}: expected 5 columns, got {len(row)}")
            try:
                minute = int(row[0])
                bus = int(row[1])
                p_load, q_load, pv = (float(v) for v in row[2:5])
            except ValueError as exc:
                raise ScenarioFormatError(f"{path}: line {lineno}: {exc}") from exc
            if minute < 0:
                raise ScenarioFormatError(f"{path}: line {lineno}: negative minute {minute}")
            if not (1 <= bus <= n_bus):
                raise ScenarioFormatError(
                    f"{path}: line {lineno}: bus {bus} out of range 1..{n_bus}"
                )
            d = per_minute.setdefault(minute, np.zeros(n_bus, dtype=complex))
            used = filled.setdefault(minute, set())
            if bus in used:
                raise ScenarioFormatError(f"{path}: line {lineno}: duplicate bus {bus} in minute {minute}")
            used.add(bus)
            d[bus - 1] = complex(-p_load + pv, -q_load)
    scenarios = tuple(LoadScenario(minute, per_minute[minute]) for minute in sorted(per_minute))
    out = ScenarioSet(scenarios, n_bus, {"source": "file", "path": str(path)})
    _validate_set(out.scenarios, n_bus)
    return out


def save_scenarios(sset: ScenarioSet, path) -> None:
    """Write the net-load form: p_load = -Re(d), q_load = -Im(d), pv = 0."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCENARIO_HEADER)
        for s in sset:
            for bus in range(1, sset.n_bus + 1):
                dn = s.d[bus - 1]
                writer.writerow([s.minute, bus, repr(-dn.real), repr(-dn.imag), repr(0.0)])


@dataclass(frozen=True)
class DayProfileConfig:
    """Synthetic minute-level day: diurnal loads plus uncontrollable solar.

    ``load_p``/``load_q`` map bus -> base consumption (positive).  Loads
    follow 1 + amplitude*cos(2*pi*(t - load_peak_minute)/1440); solar buses
    produce capacity*sin(pi*(t-sunrise)/(sunset-sunrise))^2 inside the
    daylight window and exactly zero outside.  Noise is an independent
    multiplicative factor uniform in [1-noise, 1+noise] per entry.
    """

    minutes: int = 1440
    load_p: dict = field(default_factory=dict)
    load_q: dict = field(default_factory=dict)
    amplitude: float = 0.25
    load_peak_minute: int = 1140
    solar: dict = field(default_factory=dict)
    daylight: tuple[int, int] = (360, 1080)
    noise: float = 0.05

    @property
    def solar_peak_minute(self) -> int:
        return (self.daylight[0] + self.daylight[1]) // 2


def day_profile_from_dict(doc: dict) -> DayProfileConfig:
    try:
        cfg = DayProfileConfig(
            minutes=int(doc.get("minutes", 1440)),
            load_p={int(k): float(v) for k, v in doc.get("load_p", {}).items()},
            load_q={int(k): float(v) for k, v in doc.get("load_q", {}).items()},
            amplitude=float(doc.get("amplitude", 0.25)),
            load_peak_minute=int(doc.get("load_peak_minute", 1140)),
            solar={int(k): float(v) for k, v in doc.get("solar", {}).items()},
            daylight=tuple(int(v) for v in doc.get("daylight", (360, 1080))),
            noise=float(doc.get("noise", 0.05)),
        )
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"malformed day profile config: {exc}") from exc
    validate_day_profile(cfg)
    return cfg


def load_day_profile(path) -> DayProfileConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return day_profile_from_dict(doc)


def validate_day_profile(cfg: DayProfileConfig) -> None:
    if cfg.minutes < 1:
        raise ScenarioFormatError("minutes must be >= 1")
    if cfg.amplitude < 0.0 or cfg.noise < 0.0:
        raise ScenarioFormatError("amplitude and noise must be nonnegative")
    if cfg.noise >= 1.0:
        raise ScenarioFormatError("noise must stay below 1 (multiplicative factors positive)")
    for name, table in (("load_p", cfg.load_p), ("load_q", cfg.load_q), ("solar", cfg.solar)):
        for bus, val in table.items():
            if val < 0.0:
                raise ScenarioFormatError(f"{name}[{bus}] = {val}: negative amplitudes rejected")
    if not (0 <= cfg.daylight[0] < cfg.daylight[1]):
        raise ScenarioFormatError(f"invalid daylight window {cfg.daylight}")


def synth_scenarios(model: GridModel, cfg: DayProfileConfig, seed: int) -> ScenarioSet:
    """Deterministic synthetic day for a feeder; same seed, same scenarios."""
    validate_day_profile(cfg)
    n = model.n
    for table in (cfg.load_p, cfg.load_q, cfg.solar):
        for bus in table:
            if not (1 <= bus <= n):
                raise ScenarioFormatError(f"config bus {bus} out of range 1..{n}")
    rng = np.random.default_rng(seed)
    t = np.arange(cfg.minutes)
    load_shape = 1.0 + cfg.amplitude * np.cos(2.0 * np.pi * (t - cfg.load_peak_minute) / 1440.0)
    rise, set_ = cfg.daylight
    frac = (t - rise) / float(set_ - rise)
    sun = np.where((frac >= 0.0) & (frac <= 1.0), np.sin(np.pi * np.clip(frac, 0.0, 1.0)) ** 2, 0.0)

    base_p = np.zeros(n)
    base_q = np.zeros(n)
    cap = np.zeros(n)
    for bus, val in cfg.load_p.items():
        base_p[bus - 1] = val
    for bus, val in cfg.load_q.items():
        base_q[bus - 1] = val
    for bus, val in cfg.solar.items():
        cap[bus - 1] = val

    def factors():
        if cfg.noise == 0.0:
            return np.ones((cfg.minutes, n))
        return rng.uniform(1.0 - cfg.noise, 1.0 + cfg.noise, size=(cfg.minutes, n))

    p_load = base_p[None, :] * load_shape[:, None] * factors()
    q_load = base_q[None, :] * load_shape[:, None] * factors()
    pv = cap[None, :] * sun[:, None] * factors()

    scenarios = tuple(
        LoadScenario(int(m), (-p_load[m] + pv[m]) - 1j * q_load[m]) for m in range(cfg.minutes)
    )
    return ScenarioSet(scenarios, n, {"source": "synthetic", "seed": int(seed)})


def perturb_scenarios(sset: ScenarioSet, fraction: float, seed: int) -> ScenarioSet:
    """Scale each demand component by an independent factor in [1-f, 1+f]."""
    if not (0.0 <= fraction < 1.0):
        raise ScenarioFormatError(f"fraction must be in [0, 1), got {fraction}")
    if fraction == 0.0:
        return ScenarioSet(sset.scenarios, sset.n_bus, dict(sset.source))
    rng = np.random.default_rng(seed)
    out = []
    for s in sset:
        fr = rng.uniform(1.0 - fraction, 1.0 + fraction, size=len(s.d))
        fi = rng.uniform(1.0 - fraction, 1.0 + fraction, size=len(s.d))
        out.append(LoadScenario(s.minute, s.d.real * fr + 1j * (s.d.imag * fi)))
    meta = dict(sset.source)
    meta.update({"perturbed_fraction": fraction, "perturb_seed": int(seed)})
    return ScenarioSet(tuple(out), sset.n_bus, meta)


# ---------------------------------------------------------------------------
# linearized voltage evaluation


def _demand_vector(d, n: int) -> np.ndarray:
    vec = d.d if isinstance(d, LoadScenario) else np.asarray(d, dtype=complex)
    if vec.shape != (n,):
        raise ScenarioFormatError(f"demand vector has shape {vec.shape}, expected ({n},)")
    return vec


def nominal_voltage(model: GridModel, d) -> np.ndarray:
    """Zero-controllable-injection voltages, full vector in bus order."""
    vec = _demand_vector(d, model.n)
    return model.R_tilde @ vec.real + model.X_tilde @ vec.imag + 1.0


def nominal_voltage_ctrl(model: GridModel, d) -> np.ndarray:
    """Controllable-bus slice of the zero-injection voltages."""
    return nominal_voltage(model, d)[model.c_idx]


def voltages(model: GridModel, p, q, d) -> np.ndarray:
    """Linearized full voltage vector at injections (p, q) and demand d."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    c = model.n_ctrl
    if p.shape != (c,) or q.shape != (c,):
        raise ScenarioFormatError(f"injection vectors must have shape ({c},)")
    return model.G_p @ p + model.G_q @ q + nominal_voltage(model, d)
