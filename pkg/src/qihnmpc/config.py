"""Run configuration: YAML schema, validation with line diagnostics, defaults.

Schema (all sections optional, defaults shown by ``default_config()``)::

    model:      {name: two_state, params: {T: 0.1, mu0: 0.5, discretization: exact}}
    weights:    {Wx: [[1, 0], [0, 1]], Wu: [[0.5]]}
    input_box:  {lower: [-2.0], upper: [2.0]}
    state_box:  null | {lower: [...], upper: [...]}
    synthesis:  {beta: 0.99, boundary_samples: 3600, gamma_max: 1.0e6}
    comparison: list of {name, approach, rho_x, rho_u, kappa, coupled_gain}
    sweeps:     list of {table, approach, vary, rho_x, rho_u, coupled_gain}
    initial_conditions: [[-3.0, 2.0]]
    N_max: 40
    T_steps: 200
    verify:     {invariance_samples: 500, invariance_steps: 200,
                 domination_samples: 100, domination_steps: 500}
    out_dir: results
    seed: 0
    workers: 1

Sweep entries list one parameter as a sequence under ``vary``; the other
one is a scalar. Matrices are row-major nested lists.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .lyapunov import APPROACHES, StageWeights, SynthesisError, TuningParams
from .model import BoxSet, DiscreteModel, ModelError, get_model


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ApproachSpec:
    name: str
    approach: str
    rho_x: float = 0.0
    rho_u: float = 0.0
    kappa: float = 1.0
    coupled_gain: bool = True

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "approach": self.approach}
        if self.approach == "yu":
            d["kappa"] = float(self.kappa)
        else:
            d["rho_x"] = float(self.rho_x)
            d["rho_u"] = float(self.rho_u)
        if self.approach == "lqr_inflated":
            d["coupled_gain"] = bool(self.coupled_gain)
        return d


@dataclass(frozen=True)
class SweepSpec:
    table: str
    approach: str
    vary: str
    rho_x: tuple
    rho_u: tuple
    coupled_gain: bool = True

    def rows(self) -> list[tuple[float, float]]:
        return [(x, u) for x in self.rho_x for u in self.rho_u]

    def to_dict(self) -> dict:
        def pack(name, vals):
            return [float(v) for v in vals] if name == self.vary else float(vals[0])

        d = {
            "table": self.table,
            "approach": self.approach,
            "vary": self.vary,
            "rho_x": pack("rho_x", self.rho_x),
            "rho_u": pack("rho_u", self.rho_u),
        }
        if self.approach == "lqr_inflated":
            d["coupled_gain"] = bool(self.coupled_gain)
        return d


@dataclass(frozen=True)
class RunConfig:
    model_name: str = "two_state"
    model_params: dict = field(default_factory=lambda: {"T": 0.1, "mu0": 0.5, "discretization": "exact"})
    Wx: tuple = ((1.0, 0.0), (0.0, 1.0))
    Wu: tuple = ((0.5,),)
    input_lower: tuple = (-2.0,)
    input_upper: tuple = (2.0,)
    state_lower: Optional[tuple] = None
    state_upper: Optional[tuple] = None
    beta: float = 0.99
    boundary_samples: int = 3600
    gamma_max: float = 1e6
    comparison: tuple = ()
    sweeps: tuple = ()
    initial_conditions: tuple = ((-3.0, 2.0),)
    N_max: int = 40
    T_steps: int = 200
    invariance_samples: int = 500
    invariance_steps: int = 200
    domination_samples: int = 100
    domination_steps: int = 500
    out_dir: str = "results"
    seed: int = 0
    workers: int = 1

    # --- builders -----------------------------------------------------

    def build_model(self) -> DiscreteModel:
        return get_model(self.model_name, **self.model_params)

    def build_weights(self) -> StageWeights:
        return StageWeights(np.array(self.Wx, dtype=float), np.array(self.Wu, dtype=float))

    def build_input_set(self) -> BoxSet:
        return BoxSet(np.array(self.input_lower), np.array(self.input_upper))

    def build_state_set(self) -> Optional[BoxSet]:
        if self.state_lower is None:
            return None
        return BoxSet(np.array(self.state_lower), np.array(self.state_upper))

    def tuning(self, approach: str, rho_x=0.0, rho_u=0.0, kappa=1.0, coupled_gain=True) -> TuningParams:
        return TuningParams(
            approach=approach,
            rho_x=rho_x,
            rho_u=rho_u,
            kappa=kappa,
            beta=self.beta,
            boundary_samples=self.boundary_samples,
            coupled_gain=coupled_gain,
            gamma_max=self.gamma_max,
        )

    def tuning_for(self, spec: ApproachSpec) -> TuningParams:
        return self.tuning(spec.approach, spec.rho_x, spec.rho_u, spec.kappa, spec.coupled_gain)

    # --- serialization ------------------------------------------------

    def to_dict(self) -> dict:
        state_box = None
        if self.state_lower is not None:
            state_box = {"lower": [float(v) for v in self.state_lower], "upper": [float(v) for v in self.state_upper]}
        return {
            "model": {"name": self.model_name, "params": dict(self.model_params)},
            "weights": {"Wx": [list(map(float, r)) for r in self.Wx], "Wu": [list(map(float, r)) for r in self.Wu]},
            "input_box": {"lower": [float(v) for v in self.input_lower], "upper": [float(v) for v in self.input_upper]},
            "state_box": state_box,
            "synthesis": {
                "beta": float(self.beta),
                "boundary_samples": int(self.boundary_samples),
                "gamma_max": float(self.gamma_max),
            },
            "comparison": [c.to_dict() for c in self.comparison],
            "sweeps": [s.to_dict() for s in self.sweeps],
            "initial_conditions": [[float(v) for v in x] for x in self.initial_conditions],
            "N_max": int(self.N_max),
            "T_steps": int(self.T_steps),
            "verify": {
                "invariance_samples": int(self.invariance_samples),
                "invariance_steps": int(self.invariance_steps),
                "domination_samples": int(self.domination_samples),
                "domination_steps": int(self.domination_steps),
            },
            "out_dir": self.out_dir,
            "seed": int(self.seed),
            "workers": int(self.workers),
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None, width=100)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def default_config() -> RunConfig:
    """Benchmark defaults: the sweeps and comparison rows of the terminal-region study."""
    return RunConfig(
        comparison=(
            ApproachSpec("yu", "yu", kappa=1.0 / 0.91),
            ApproachSpec("ac_rho_x", "arbitrary_controller", rho_x=100.0, rho_u=0.0),
            ApproachSpec("ac_best", "arbitrary_controller", rho_x=100.0, rho_u=100.0),
            ApproachSpec("lqr_rho_x", "lqr_inflated", rho_x=50.0, rho_u=1.0),
            ApproachSpec("lqr_best", "lqr_inflated", rho_x=100.0, rho_u=100.0),
        ),
        sweeps=(
            SweepSpec("I", "arbitrary_controller", "rho_x", (0.1, 1.0, 5.0, 20.0, 50.0, 100.0), (0.0,)),
            SweepSpec("II", "arbitrary_controller", "rho_u", (100.0,), (1.0, 5.0, 10.0, 100.0, 200.0)),
            SweepSpec("III", "lqr_inflated", "rho_x", (5.0, 20.0, 50.0, 100.0), (1.0,)),
            SweepSpec("IV", "lqr_inflated", "rho_u", (100.0,), (1.1, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0)),
        ),
    )


# --- parsing ----------------------------------------------------------


class _Lines:
    """Map dotted field paths to 1-based source lines using the YAML node tree."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.lines: dict[str, int] = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{source}:{mark.line + 1}" if mark else source
            raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                sub = f"{path}.{k.value}" if path else str(k.value)
                self.lines[sub] = k.start_mark.line + 1
                self._walk(v, sub)
                self.lines[sub] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, f"{path}[{i}]")

    def error(self, path: str, msg: str) -> ConfigError:
        p = path
        while p and p not in self.lines:
            p = p.rsplit(".", 1)[0] if "." in p else p.rsplit("[", 1)[0] if "[" in p else ""
        line = self.lines.get(p)
        where = f"{self.source}:{line}" if line else self.source
        return ConfigError(f"{where}: {path}: {msg}")


_EXP_FLOAT = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def _number(v, path, lines, integer=False):
    # YAML 1.1 leaves exponents without a dot or sign (1e6, 1.0e6) as strings
    if isinstance(v, str) and _EXP_FLOAT.match(v.strip()):
        v = float(v)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise lines.error(path, f"expected a number, got {v!r}")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            raise lines.error(path, f"expected an integer, got {v!r}")
        return int(v)
    return float(v)


def _vector(v, path, lines):
    if not isinstance(v, list) or not v:
        raise lines.error(path, "expected a non-empty list of numbers")
    return tuple(_number(x, f"{path}[{i}]", lines) for i, x in enumerate(v))


def _matrix(v, path, lines):
    if not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v):
        raise lines.error(path, "expected a matrix as a list of rows")
    rows = tuple(_vector(r, f"{path}[{i}]", lines) for i, r in enumerate(v))
    if len({len(r) for r in rows}) != 1:
        raise lines.error(path, "matrix rows have different lengths")
    return rows


def _section(d, key, lines, path=""):
    v = d.get(key, {})
    if v is None:
        v = {}
    if not isinstance(v, dict):
        raise lines.error(f"{path}{key}", "expected a mapping")
    return v


def _check_keys(d, allowed, path, lines):
    for k in d:
        if k not in allowed:
            where = f"{path}.{k}" if path else str(k)
            raise lines.error(where, f"unknown key; allowed: {sorted(allowed)}")


_TOP_KEYS = {
    "model", "weights", "input_box", "state_box", "synthesis", "comparison", "sweeps",
    "initial_conditions", "N_max", "T_steps", "verify", "out_dir", "seed", "workers",
}


def _approach_spec(d, path, lines) -> ApproachSpec:
    if not isinstance(d, dict):
        raise lines.error(path, "expected a mapping")
    _check_keys(d, {"name", "approach", "rho_x", "rho_u", "kappa", "coupled_gain"}, path, lines)
    approach = d.get("approach")
    if approach not in APPROACHES:
        raise lines.error(f"{path}.approach", f"expected one of {list(APPROACHES)}, got {approach!r}")
    spec = ApproachSpec(
        name=str(d.get("name", approach)),
        approach=approach,
        rho_x=_number(d.get("rho_x", 0.0), f"{path}.rho_x", lines),
        rho_u=_number(d.get("rho_u", 0.0), f"{path}.rho_u", lines),
        kappa=_number(d.get("kappa", 1.0), f"{path}.kappa", lines),
        coupled_gain=bool(d.get("coupled_gain", True)),
    )
    try:
        TuningParams(spec.approach, spec.rho_x, spec.rho_u, spec.kappa, coupled_gain=spec.coupled_gain)
    except SynthesisError as exc:
        raise lines.error(path, str(exc)) from None
    return spec


def _sweep_spec(d, path, lines) -> SweepSpec:
    if not isinstance(d, dict):
        raise lines.error(path, "expected a mapping")
    _check_keys(d, {"table", "approach", "vary", "rho_x", "rho_u", "coupled_gain"}, path, lines)
    approach = d.get("approach")
    if approach not in ("arbitrary_controller", "lqr_inflated"):
        raise lines.error(f"{path}.approach", "sweeps support arbitrary_controller and lqr_inflated")
    vary = d.get("vary")
    if vary not in ("rho_x", "rho_u"):
        raise lines.error(f"{path}.vary", "expected 'rho_x' or 'rho_u'")
    vals = {}
    for key in ("rho_x", "rho_u"):
        v = d.get(key, 0.0)
        if key == vary:
            vals[key] = _vector(v, f"{path}.{key}", lines)
        else:
            vals[key] = (_number(v, f"{path}.{key}", lines),)
    spec = SweepSpec(str(d.get("table", "")), approach, vary, vals["rho_x"], vals["rho_u"],
                     bool(d.get("coupled_gain", True)))
    for i, (rx, ru) in enumerate(spec.rows()):
        try:
            TuningParams(approach, rx, ru, coupled_gain=spec.coupled_gain)
        except SynthesisError as exc:
            raise lines.error(f"{path}.{vary}", f"row {i}: {exc}") from None
    return spec


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate YAML text; raises ``ConfigError`` with ``source:line: field: reason``."""
    lines = _Lines(text, source)
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise lines.error("", "top level must be a mapping")
    _check_keys(raw, _TOP_KEYS, "", lines)
    base = default_config()
    kw: dict[str, Any] = {}

    model = _section(raw, "model", lines)
    _check_keys(model, {"name", "params"}, "model", lines)
    kw["model_name"] = str(model.get("name", base.model_name))
    params = model.get("params", base.model_params if "name" not in model else {})
    if not isinstance(params, dict):
        raise lines.error("model.params", "expected a mapping")
    kw["model_params"] = dict(params)

    weights = _section(raw, "weights", lines)
    _check_keys(weights, {"Wx", "Wu"}, "weights", lines)
    kw["Wx"] = _matrix(weights["Wx"], "weights.Wx", lines) if "Wx" in weights else base.Wx
    kw["Wu"] = _matrix(weights["Wu"], "weights.Wu", lines) if "Wu" in weights else base.Wu

    box = _section(raw, "input_box", lines)
    _check_keys(box, {"lower", "upper"}, "input_box", lines)
    kw["input_lower"] = _vector(box["lower"], "input_box.lower", lines) if "lower" in box else base.input_lower
    kw["input_upper"] = _vector(box["upper"], "input_box.upper", lines) if "upper" in box else base.input_upper

    sbox = raw.get("state_box")
    if sbox is not None:
        if not isinstance(sbox, dict) or set(sbox) != {"lower", "upper"}:
            raise lines.error("state_box", "expected null or a mapping with lower and upper")
        kw["state_lower"] = _vector(sbox["lower"], "state_box.lower", lines)
        kw["state_upper"] = _vector(sbox["upper"], "state_box.upper", lines)

    syn = _section(raw, "synthesis", lines)
    _check_keys(syn, {"beta", "boundary_samples", "gamma_max"}, "synthesis", lines)
    kw["beta"] = _number(syn.get("beta", base.beta), "synthesis.beta", lines)
    kw["boundary_samples"] = _number(syn.get("boundary_samples", base.boundary_samples),
                                     "synthesis.boundary_samples", lines, integer=True)
    kw["gamma_max"] = _number(syn.get("gamma_max", base.gamma_max), "synthesis.gamma_max", lines)

    if "comparison" in raw:
        comp = raw["comparison"] or []
        if not isinstance(comp, list):
            raise lines.error("comparison", "expected a list")
        kw["comparison"] = tuple(_approach_spec(c, f"comparison[{i}]", lines) for i, c in enumerate(comp))
    else:
        kw["comparison"] = base.comparison
    if "sweeps" in raw:
        sw = raw["sweeps"] or []
        if not isinstance(sw, list):
            raise lines.error("sweeps", "expected a list")
        kw["sweeps"] = tuple(_sweep_spec(s, f"sweeps[{i}]", lines) for i, s in enumerate(sw))
    else:
        kw["sweeps"] = base.sweeps

    if "initial_conditions" in raw:
        ics = raw["initial_conditions"]
        if not isinstance(ics, list):
            raise lines.error("initial_conditions", "expected a list of state vectors")
        kw["initial_conditions"] = tuple(_vector(x, f"initial_conditions[{i}]", lines) for i, x in enumerate(ics))

    for key in ("N_max", "T_steps", "seed", "workers"):
        if key in raw:
            kw[key] = _number(raw[key], key, lines, integer=True)
    ver = _section(raw, "verify", lines)
    _check_keys(ver, {"invariance_samples", "invariance_steps", "domination_samples", "domination_steps"},
                "verify", lines)
    for key, v in ver.items():
        kw[key] = _number(v, f"verify.{key}", lines, integer=True)
    if "out_dir" in raw:
        kw["out_dir"] = str(raw["out_dir"])

    cfg = RunConfig(**{**base.__dict__, **kw})
    _validate(cfg, lines)
    return cfg


def _validate(cfg: RunConfig, lines: _Lines):
    if not 0.0 < cfg.beta < 1.0:
        raise lines.error("synthesis.beta", "must lie in (0, 1)")
    if cfg.boundary_samples < 1:
        raise lines.error("synthesis.boundary_samples", "must be positive")
    for key in ("N_max", "T_steps", "workers", "invariance_samples", "invariance_steps",
                "domination_samples", "domination_steps"):
        if getattr(cfg, key) < 1:
            raise lines.error(key, "must be positive")
    try:
        model = cfg.build_model()
    except (ModelError, TypeError) as exc:
        raise lines.error("model", str(exc)) from None
    try:
        w = cfg.build_weights()
    except SynthesisError as exc:
        raise lines.error("weights", str(exc)) from None
    if w.Wx.shape != (model.n_x, model.n_x):
        raise lines.error("weights.Wx", f"expected {model.n_x}x{model.n_x}")
    if w.Wu.shape != (model.n_u, model.n_u):
        raise lines.error("weights.Wu", f"expected {model.n_u}x{model.n_u}")
    try:
        U = cfg.build_input_set()
    except ModelError as exc:
        raise lines.error("input_box", str(exc)) from None
    if U.dim != model.n_u:
        raise lines.error("input_box", f"expected {model.n_u} bounds")
    if cfg.state_lower is not None:
        try:
            X = cfg.build_state_set()
        except ModelError as exc:
            raise lines.error("state_box", str(exc)) from None
        if X.dim != model.n_x:
            raise lines.error("state_box", f"expected {model.n_x} bounds")
    for i, x in enumerate(cfg.initial_conditions):
        if len(x) != model.n_x:
            raise lines.error(f"initial_conditions[{i}]", f"expected {model.n_x} entries")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))
