"""Experiment drivers and plain-text/CSV report assembly."""
from __future__ import annotations

import csv
import io
import json
import math
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from .config import ApproachSpec, RunConfig, SweepSpec
from .lyapunov import SynthesisError, lqr_gain, spectral_radius
from .model import Linearization, linearize
from .nmpc import FEAS_TOL, OCPProblem, ClosedLoopTrace, minimum_feasible_horizon, receding_horizon_run
from .terminal import CertificationError, TerminalIngredients, synthesize_terminal

PACKAGE_VERSION = "0.1.0"


@dataclass
class SweepRow:
    table: str
    approach: str
    rho_x: float
    rho_u: float
    gamma: float = math.nan
    alpha: float = math.nan
    area: float = math.nan
    error: str = ""
    ingredients: Optional[TerminalIngredients] = None


@dataclass
class ComparisonRow:
    spec: ApproachSpec
    ingredients: Optional[TerminalIngredients] = None
    error: str = ""
    ratio_vs_yu: float = math.nan


@dataclass
class HorizonRow:
    name: str
    approach: str
    x0: tuple
    horizon: Optional[int]
    steps: int = 0
    final_norm: float = math.nan
    trace: Optional[ClosedLoopTrace] = None
    error: str = ""


@dataclass
class ResultsReport:
    config: RunConfig
    linearization: Linearization
    lqr_L: np.ndarray
    sweeps: list = field(default_factory=list)
    comparison: list = field(default_factory=list)
    horizons: list = field(default_factory=list)

    def provenance(self) -> dict:
        return {
            "config_sha256_16": self.config.digest(),
            "seed": self.config.seed,
            "package": PACKAGE_VERSION,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        }


def _synth(cfg: RunConfig, model, weights, U, params):
    try:
        return synthesize_terminal(model, weights, params, U, seed=cfg.seed), ""
    except (SynthesisError, CertificationError) as exc:
        return None, str(exc)


def run_sweeps(cfg: RunConfig, model, weights, U) -> list:
    jobs = []
    for sw in cfg.sweeps:
        for rx, ru in sw.rows():
            jobs.append((sw, rx, ru))

    def work(job):
        sw, rx, ru = job
        ti, err = _synth(cfg, model, weights, U, cfg.tuning(sw.approach, rx, ru, coupled_gain=sw.coupled_gain))
        row = SweepRow(sw.table, sw.approach, rx, ru, error=err, ingredients=ti)
        if ti is not None:
            row.gamma, row.alpha, row.area = ti.gamma, ti.alpha, ti.area if ti.area is not None else math.nan
        return row

    # rows are independent; map keeps config order
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(work, jobs))


def run_comparison(cfg: RunConfig, model, weights, U) -> list:
    rows = []
    for spec in cfg.comparison:
        ti, err = _synth(cfg, model, weights, U, cfg.tuning_for(spec))
        rows.append(ComparisonRow(spec, ti, err))
    yu_areas = [r.ingredients.area for r in rows
                if r.spec.approach == "yu" and r.ingredients is not None and r.ingredients.area]
    if yu_areas:
        yu_best = max(yu_areas)
        for r in rows:
            if r.ingredients is not None and r.ingredients.area is not None:
                r.ratio_vs_yu = r.ingredients.area / yu_best
    return rows


def run_synthesis(cfg: RunConfig) -> ResultsReport:
    model, weights, U = cfg.build_model(), cfg.build_weights(), cfg.build_input_set()
    lin = linearize(model)
    rep = ResultsReport(cfg, lin, lqr_gain(lin, weights).L)
    rep.sweeps = run_sweeps(cfg, model, weights, U)
    rep.comparison = run_comparison(cfg, model, weights, U)
    return rep


def run_horizons(cfg: RunConfig, rep: ResultsReport) -> list:
    model, weights, U, X = cfg.build_model(), cfg.build_weights(), cfg.build_input_set(), cfg.build_state_set()
    rows = []
    for x0 in cfg.initial_conditions:
        for c in rep.comparison:
            row = HorizonRow(c.spec.name, c.spec.approach, tuple(x0), None)
            if c.ingredients is None:
                row.error = f"no terminal region: {c.error}"
                rows.append(row)
                continue
            N = minimum_feasible_horizon(model, weights, c.ingredients, U, x0, cfg.N_max, X)
            row.horizon = N
            if N is None:
                row.error = f"infeasible up to N_max = {cfg.N_max}"
            else:
                prob = OCPProblem(model, weights, c.ingredients, N, U, np.asarray(x0, dtype=float), X)
                tr = receding_horizon_run(prob, cfg.T_steps)
                row.trace = tr
                row.steps = len(tr.applied_inputs)
                row.final_norm = float(np.linalg.norm(tr.states[-1]))
            rows.append(row)
    rep.horizons = rows
    return rows


# --- formatting -------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(v)
    if isinstance(v, float) and math.isnan(v):
        return "-"
    return f"{v:.6g}"


def format_table(headers, rows) -> str:
    cells = [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(headers)]
    line = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    out = [line, "-" * len(line)]
    out += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(out)


def _csv_text(headers, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(headers)
    for r in rows:
        w.writerow(["" if (isinstance(v, float) and math.isnan(v)) or v is None else
                    (f"{v:.12g}" if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


SWEEP_HEADERS = ["table", "approach", "rho_x", "rho_u", "gamma", "alpha", "area", "note"]
COMPARISON_HEADERS = ["name", "approach", "rho_x", "rho_u", "kappa", "gamma", "alpha", "area", "ratio_vs_yu", "note"]
HORIZON_HEADERS = ["name", "approach", "x0", "N_min", "closed_loop_steps", "final_norm", "note"]


def sweep_rows(rep: ResultsReport, table: Optional[str] = None):
    return [[r.table, r.approach, r.rho_x, r.rho_u, r.gamma, r.alpha, r.area, r.error]
            for r in rep.sweeps if table is None or r.table == table]


def comparison_rows(rep: ResultsReport):
    out = []
    for r in rep.comparison:
        s = r.spec
        ti = r.ingredients
        yu = s.approach == "yu"
        out.append([s.name, s.approach, None if yu else s.rho_x, None if yu else s.rho_u, s.kappa if yu else None,
                    ti.gamma if ti else math.nan, ti.alpha if ti else math.nan,
                    ti.area if ti and ti.area is not None else math.nan, r.ratio_vs_yu, r.error])
    return out


def horizon_rows(rep: ResultsReport):
    return [[h.name, h.approach, " ".join(f"{v:g}" for v in h.x0), h.horizon, h.steps, h.final_norm, h.error]
            for h in rep.horizons]


def synthesis_text(rep: ResultsReport) -> str:
    cfg = rep.config
    lin = rep.linearization
    eig = np.sort(np.linalg.eigvals(lin.Phi).real)
    PhiL = lin.Phi - lin.Gamma @ rep.lqr_L
    parts = [
        "Terminal region synthesis",
        f"config {cfg.digest()}  seed {cfg.seed}  model {cfg.model_name} {cfg.model_params}",
        f"boundary samples {cfg.boundary_samples}  beta {cfg.beta:g}  input box "
        f"{list(cfg.input_lower)}..{list(cfg.input_upper)}",
        "",
        "Linearization at the origin",
        f"  Phi   = {np.array2string(lin.Phi, precision=6)}",
        f"  Gamma = {np.array2string(lin.Gamma.ravel(), precision=6)}",
        f"  eig(Phi) = {np.array2string(eig, precision=4)}",
        f"LQR gain (Wx, Wu): L = {np.array2string(rep.lqr_L.ravel(), precision=5)}"
        f"  spectral radius of Phi - Gamma L = {spectral_radius(PhiL):.5f}",
    ]
    for sw in cfg.sweeps:
        fixed = "rho_u" if sw.vary == "rho_x" else "rho_x"
        val = getattr(sw, fixed)[0]
        parts += ["", f"Table {sw.table}: {sw.approach}, varying {sw.vary}, {fixed} = {val:g}",
                  format_table(SWEEP_HEADERS, sweep_rows(rep, sw.table))]
    if rep.comparison:
        parts += ["", "Comparison (area ratio relative to the largest yu region)",
                  format_table(COMPARISON_HEADERS, comparison_rows(rep))]
    return "\n".join(parts) + "\n"


def horizons_text(rep: ResultsReport) -> str:
    cfg = rep.config
    return "\n".join([
        "Minimum prediction horizon and closed loop",
        f"config {cfg.digest()}  seed {cfg.seed}  N_max {cfg.N_max}  T_steps {cfg.T_steps}"
        f"  feasibility tolerance {FEAS_TOL:g}",
        format_table(HORIZON_HEADERS, horizon_rows(rep)),
    ]) + "\n"


def write_synthesis(rep: ResultsReport, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "synthesis.txt").write_text(synthesis_text(rep))
    (out / "sweeps.csv").write_text(_csv_text(SWEEP_HEADERS, sweep_rows(rep)))
    (out / "comparison.csv").write_text(_csv_text(COMPARISON_HEADERS, comparison_rows(rep)))


def write_horizons(rep: ResultsReport, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "horizons.txt").write_text(horizons_text(rep))
    (out / "horizons.csv").write_text(_csv_text(HORIZON_HEADERS, horizon_rows(rep)))


def write_provenance(rep: ResultsReport, out: Path, command: str):
    """Run metadata, including wall-clock time; kept apart so reports stay byte-identical."""
    out.mkdir(parents=True, exist_ok=True)
    data = rep.provenance()
    data.update({"command": command, "argv": sys.argv,
                 "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds")})
    (out / "provenance.json").write_text(json.dumps(data, indent=2) + "\n")
    (out / "config.yaml").write_text(rep.config.dumps())
