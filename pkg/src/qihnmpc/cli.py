"""Command-line front end: ``qihnmpc {synthesize,closed-loop,verify,export-region}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import re
import sys
from pathlib import Path
from typing import Optional

from .config import ConfigError, RunConfig, default_config, load_config
from .nmpc import OCPError, write_trace_csv
from .properties import (
    PropertyReport,
    PropertyResult,
    closed_loop_properties,
    decrease_slack,
    domination,
    invariance,
    lyapunov_residual,
)
from .report import (
    ResultsReport,
    horizons_text,
    run_comparison,
    run_horizons,
    run_synthesis,
    synthesis_text,
    write_horizons,
    write_provenance,
    write_synthesis,
)
from .lyapunov import lqr_gain
from .model import linearize
from .terminal import write_region_csv

log = logging.getLogger("qihnmpc")

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG = 0, 1, 2


def _slug(*parts) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", "_".join(str(p) for p in parts))


def _comparison_only(cfg: RunConfig) -> ResultsReport:
    model, weights, U = cfg.build_model(), cfg.build_weights(), cfg.build_input_set()
    lin = linearize(model)
    rep = ResultsReport(cfg, lin, lqr_gain(lin, weights).L)
    rep.comparison = run_comparison(cfg, model, weights, U)
    return rep


def cmd_synthesize(cfg: RunConfig, out: Path) -> ResultsReport:
    rep = run_synthesis(cfg)
    write_synthesis(rep, out)
    regions = out / "regions"
    for r in rep.sweeps:
        if r.ingredients is not None and r.ingredients.penalty.shape == (2, 2):
            write_region_csv(regions / f"{_slug('table', r.table, r.approach, r.rho_x, r.rho_u)}.csv",
                             r.ingredients.region)
    for c in rep.comparison:
        if c.ingredients is not None and c.ingredients.penalty.shape == (2, 2):
            write_region_csv(regions / f"{_slug('compare', c.spec.name)}.csv", c.ingredients.region)
    write_provenance(rep, out, "synthesize")
    return rep


def cmd_closed_loop(cfg: RunConfig, out: Path) -> ResultsReport:
    rep = _comparison_only(cfg)
    run_horizons(cfg, rep)
    write_horizons(rep, out)
    for i, h in enumerate(rep.horizons):
        if h.trace is not None:
            write_trace_csv(out / "traces" / f"{_slug(h.name, 'ic', i // max(1, len(rep.comparison)))}.csv",
                            h.trace)
    write_provenance(rep, out, "closed-loop")
    return rep


def cmd_verify(cfg: RunConfig, out: Optional[Path] = None):
    """Run the property battery; returns ``(PropertyReport, ResultsReport)``."""
    props = PropertyReport()
    model, weights, U = cfg.build_model(), cfg.build_weights(), cfg.build_input_set()
    rep = _comparison_only(cfg)
    for c in rep.comparison:
        name = c.spec.name
        if c.ingredients is None:
            props.add(PropertyResult("synthesis", name, False, detail=c.error))
            continue
        ti = c.ingredients
        props.add(lyapunov_residual(ti, name))
        props.add(decrease_slack(ti, name))
        # separate streams from the certification samples
        props.add(invariance(model, ti, U, cfg.invariance_samples, cfg.invariance_steps, [cfg.seed, 1], name))
        props.add(domination(model, weights, ti, cfg.domination_samples, cfg.domination_steps, [cfg.seed, 2], name))
    try:
        run_horizons(cfg, rep)
    except OCPError as exc:
        props.add(PropertyResult("closed_loop", "run", False, detail=str(exc)))
    by_name = {c.spec.name: c.ingredients for c in rep.comparison}
    for h in rep.horizons:
        subject = f"{h.name} x0=({', '.join(f'{v:g}' for v in h.x0)})"
        if h.trace is None:
            props.add(PropertyResult("closed_loop", subject, False, detail=h.error))
            continue
        for r in closed_loop_properties(h.trace, by_name[h.name], subject):
            props.add(r)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        lines = [r.line() for r in props.results]
        for r in props.failures():
            if r.counterexample:
                lines.append(f"  counterexample for {r.subject} {r.name}: {r.counterexample}")
        (out / "verify.txt").write_text("\n".join(lines) + "\n")
        write_horizons(rep, out)
        write_provenance(rep, out, "verify")
    return props, rep


def cmd_export_region(cfg: RunConfig, out: Path, n_points: int = 360) -> list:
    rep = _comparison_only(cfg)
    paths = []
    for c in rep.comparison:
        if c.ingredients is None:
            log.warning("skipping %s: %s", c.spec.name, c.error)
            continue
        paths.append(write_region_csv(out / f"region_{_slug(c.spec.name)}.csv", c.ingredients.region, n_points))
    return paths


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qihnmpc", description="Terminal-region synthesis and NMPC benchmark runs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("synthesize", "terminal-region sweeps and comparison table"),
        ("closed-loop", "minimum horizons and closed-loop traces"),
        ("verify", "property battery; exit 1 on any failure"),
        ("export-region", "boundary CSVs of the comparison regions"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML run configuration (default: built-in benchmark)")
        s.add_argument("--out", type=Path, help="output directory (default: out_dir from the config)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--samples", type=int, help="override boundary samples used in the alpha search")
        if name == "export-region":
            s.add_argument("--points", type=int, default=360, help="boundary points per region")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.samples is not None:
        if args.samples < 1:
            raise ConfigError("--samples must be positive")
        over["boundary_samples"] = args.samples
    return dataclasses.replace(cfg, **over) if over else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out if args.out is not None else Path(cfg.out_dir)

    if args.command == "synthesize":
        rep = cmd_synthesize(cfg, out)
        print(synthesis_text(rep), end="")
        return EXIT_OK
    if args.command == "closed-loop":
        rep = cmd_closed_loop(cfg, out)
        print(horizons_text(rep), end="")
        return EXIT_OK
    if args.command == "verify":
        props, _ = cmd_verify(cfg, out)
        for r in props.results:
            print(r.line())
        n_bad = len(props.failures())
        print(f"{len(props.results) - n_bad} passed, {n_bad} failed")
        return EXIT_OK if props.ok else EXIT_PROPERTY
    paths = cmd_export_region(cfg, out, args.points)
    for path in paths:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
