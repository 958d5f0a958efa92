"""Command-line entry point: ``pipesched simulate|verify|compare --manifest run.json``.

Exit codes: 0 success, 1 a verification check failed, 2 configuration or
usage error. Errors are reported as one line on stderr:
``error: <category>: <rule>: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import analysis, optim
from .builder import ScheduleError, build
from .engine import bubble_ratio, simulate, steady_state_bubble_ratio
from .gantt import render_svg
from .model import ClusterSpec, MemoryModel, Policy, PolicyConfig, as_fraction, fraction_str
from .suite import CheckResult, SuiteSettings, run_suite

log = logging.getLogger("pipesched")

FORMATS = ("csv", "json", "svg")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

SUMMARY_COLUMNS = ("cell", "policy", "depth", "injection_limit", "threshold", "num_minibatches", "makespan",
                   "bubble_ratio", "steady_bubble_ratio", "max_mismatch", "peak_activation_per_device",
                   "peak_memory_per_device")
COMPARE_COLUMNS = ("policy", "depth", "injection_limit", "bubble_ratio_simulated", "bubble_ratio_analytic",
                   "weight_memory_simulated", "weight_memory_analytic", "peak_activation_simulated",
                   "peak_activation_analytic", "max_mismatch")


class ConfigError(Exception):
    """Invalid manifest or configuration; maps to exit code 2."""

    def __init__(self, category: str, rule: str, message: str):
        super().__init__(f"{category}: {rule}: {message}")
        self.category, self.rule, self.message = category, rule, message


# manifest ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    policies: List[Policy]
    depths: List[int] = field(default_factory=lambda: [4])
    injection_limits: List[Optional[int]] = field(default_factory=lambda: [None])
    thresholds: List[Optional[int]] = field(default_factory=lambda: [None])
    etas: List[float] = field(default_factory=lambda: list(optim.SCALING_ETAS))
    config_paths: List[Path] = field(default_factory=list)
    windows: int = 4
    num_minibatches: Optional[int] = None
    fwd_cost: Fraction = Fraction(1)
    bwd_cost: Fraction = Fraction(2)
    update_cost: Fraction = Fraction(0)
    comm_cost: Fraction = Fraction(0)
    zero_enabled: bool = False
    output_dir: Path = Path("out")
    seed: int = 0
    formats: Tuple[str, ...] = FORMATS
    suite: SuiteSettings = field(default_factory=SuiteSettings)

    KEYS = ("policies", "grids", "config_paths", "windows", "num_minibatches", "costs", "zero_enabled",
            "output_dir", "seed", "formats", "suite")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError("manifest", "missing-file", f"cannot read {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("manifest", "json", f"{path}: {exc.msg} at line {exc.lineno}") from None
        if not isinstance(data, dict):
            raise ConfigError("manifest", "json", "manifest must be a JSON object")
        return cls.from_dict(data, path.parent)

    @classmethod
    def from_dict(cls, data: dict, base: Path = Path(".")) -> "RunManifest":
        unknown = sorted(set(data) - set(cls.KEYS))
        if unknown:
            raise ConfigError("manifest", "unknown-key", ", ".join(unknown))
        raw_policies = data.get("policies", [])
        if not isinstance(raw_policies, list) or not raw_policies:
            raise ConfigError("manifest", "empty-policies", "the policy list must name at least one policy")
        try:
            policies = [Policy.parse(p) for p in raw_policies]
        except ValueError as exc:
            raise ConfigError("manifest", "policy", str(exc)) from None

        grids = data.get("grids", {})
        if not isinstance(grids, dict):
            raise ConfigError("manifest", "grids", "grids must be an object of explicit lists")
        extra = sorted(set(grids) - {"depth", "injection_limit", "threshold", "eta"})
        if extra:
            raise ConfigError("manifest", "unknown-key", "grids." + ", grids.".join(extra))

        def grid(name, default, conv):
            values = grids.get(name, default)
            if not isinstance(values, list):
                raise ConfigError("manifest", "grid-list", f"grids.{name} must be an explicit list")
            if not values:
                raise ConfigError("manifest", "empty-grid", f"grids.{name} is empty")
            try:
                return [None if v is None else conv(v) for v in values]
            except (TypeError, ValueError):
                raise ConfigError("manifest", "grid-value", f"grids.{name} has a malformed entry") from None

        def whole(v):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ValueError(v)
            return v

        depths = grid("depth", [4], whole)
        if any(d is None for d in depths):
            raise ConfigError("manifest", "grid-value", "grids.depth entries must be integers")
        etas = grid("eta", list(optim.SCALING_ETAS), float)

        config_paths = []
        for p in data.get("config_paths", []):
            path = (base / p) if not Path(p).is_absolute() else Path(p)
            if not path.is_file():
                raise ConfigError("manifest", "missing-file", f"config path {p} does not exist")
            config_paths.append(path)

        costs = data.get("costs", {})
        bad = sorted(set(costs) - {"fwd", "bwd", "update", "comm"})
        if bad:
            raise ConfigError("manifest", "unknown-key", "costs." + ", costs.".join(bad))
        formats = data.get("formats", list(FORMATS))
        if not formats or any(f not in FORMATS for f in formats):
            raise ConfigError("manifest", "formats", f"formats must be a non-empty subset of {list(FORMATS)}")
        try:
            suite = SuiteSettings.from_dict(data.get("suite", {}))
            m = cls(
                policies=policies,
                depths=depths,
                injection_limits=grid("injection_limit", [None], whole),
                thresholds=grid("threshold", [None], whole),
                etas=etas,
                config_paths=config_paths,
                windows=whole(data.get("windows", 4)),
                num_minibatches=None if data.get("num_minibatches") is None else whole(data["num_minibatches"]),
                fwd_cost=as_fraction(costs.get("fwd", 1)),
                bwd_cost=as_fraction(costs.get("bwd", 2)),
                update_cost=as_fraction(costs.get("update", 0)),
                comm_cost=as_fraction(costs.get("comm", 0)),
                zero_enabled=bool(data.get("zero_enabled", False)),
                output_dir=Path(data.get("output_dir", "out")),
                seed=whole(data.get("seed", 0)),
                formats=tuple(sorted(set(formats), key=FORMATS.index)),
                suite=suite,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError("manifest", "value", str(exc) or "malformed value") from None
        if m.windows < 1:
            raise ConfigError("manifest", "windows", "windows must be >= 1")
        return m

    def clusters(self) -> List[ClusterSpec]:
        if self.config_paths:
            out = []
            for path in self.config_paths:
                try:
                    out.append(ClusterSpec.from_dict(json.loads(path.read_text())))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError("config", "cluster", f"{path.name}: {exc}") from None
            return out
        return [ClusterSpec.uniform(d, self.fwd_cost, self.bwd_cost, update_cost=self.update_cost,
                                    comm_cost=self.comm_cost) for d in self.depths]


@dataclass(frozen=True)
class Cell:
    policy: PolicyConfig
    cluster: ClusterSpec

    @property
    def name(self) -> str:
        cfg = self.policy.resolved(self.cluster.depth)
        return (f"{cfg.policy.value}-d{self.cluster.depth}-n{cfg.injection_limit}"
                f"-t{cfg.accumulation_threshold}-m{cfg.num_minibatches}")


def expand_cells(m: RunManifest) -> List[Cell]:
    cells = []
    seen = set()
    for cluster in m.clusters():
        d = cluster.depth
        for policy in m.policies:
            for n in m.injection_limits:
                for thr in m.thresholds:
                    base = PolicyConfig(policy, 1, injection_limit=n, accumulation_threshold=thr,
                                        zero_enabled=m.zero_enabled).resolved(d)
                    count = m.num_minibatches or base.accumulation_threshold * m.windows
                    cfg = PolicyConfig(policy, count, injection_limit=n, accumulation_threshold=thr,
                                       zero_enabled=m.zero_enabled)
                    cell = Cell(cfg, cluster)
                    key = (cell.name, analysis.to_json(cluster.to_dict()))
                    if key not in seen:
                        seen.add(key)
                        cells.append(cell)
    return cells


# simulate -----------------------------------------------------------------------------

def _steady(t) -> str:
    try:
        return fraction_str(steady_state_bubble_ratio(t))
    except ValueError:
        return "NA"


def run_cell(cell: Cell, formats: Sequence[str]) -> Tuple[List[str], Dict[str, bytes]]:
    """Simulate one cell; return its summary row and artifacts keyed by relative path."""
    try:
        graph = build(cell.policy, cell.cluster)
    except ScheduleError as exc:
        raise ConfigError("config", exc.rule, f"{cell.name}: {exc.message}") from None
    t = simulate(graph, cell.cluster)
    cfg = cell.policy.resolved(cell.cluster.depth)
    mism = analysis.mismatch_report(t)
    mem = analysis.memory_report(t, cfg, MemoryModel())
    row = [
        cell.name, cfg.policy.value, str(cell.cluster.depth), str(cfg.injection_limit),
        str(cfg.accumulation_threshold), str(cfg.num_minibatches), fraction_str(t.makespan),
        fraction_str(bubble_ratio(t)), _steady(t), str(mism.max_mismatch),
        " ".join(fraction_str(dm.peak_activation) for dm in mem.devices),
        " ".join(fraction_str(dm.weight + dm.gradient + dm.optimizer_state + dm.peak_activation)
                 for dm in mem.devices),
    ]
    files: Dict[str, bytes] = {}
    stem = f"cells/{cell.name}"
    if "csv" in formats:
        files[f"{stem}.timeline.csv"] = analysis.rows_to_csv(t.csv_rows()).encode()
        files[f"{stem}.mismatch.csv"] = analysis.rows_to_csv(analysis.mismatch_csv_rows(mism)).encode()
    if "json" in formats:
        doc = {"timeline": t.to_dict(), "policy": cfg.to_dict(), "mismatch": analysis.mismatch_to_dict(mism),
               "memory": mem.to_dict()}
        files[f"{stem}.json"] = analysis.to_json(doc).encode()
    if "svg" in formats:
        title = f"{cfg.policy.value} d={cell.cluster.depth} threshold={cfg.accumulation_threshold}"
        files[f"{stem}.svg"] = render_svg(t, title=title).encode()
    return row, files


def _run_cells(cells: Sequence[Cell], formats: Sequence[str], jobs: int):
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(c, formats) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_cell, cells, [tuple(formats)] * len(cells)))


def simulate_artifacts(m: RunManifest, jobs: int = 1) -> Dict[str, bytes]:
    """All simulate artifacts as bytes; independent of ``jobs``."""
    cells = expand_cells(m)
    results = _run_cells(cells, m.formats, jobs)
    files: Dict[str, bytes] = {}
    rows = [list(SUMMARY_COLUMNS)]
    for row, cell_files in results:
        rows.append(row)
        files.update(cell_files)
    if "csv" in m.formats:
        files["summary.csv"] = analysis.rows_to_csv(rows).encode()
    if "json" in m.formats:
        files["summary.json"] = analysis.to_json(
            {"seed": m.seed, "cells": [dict(zip(SUMMARY_COLUMNS, r)) for r in rows[1:]]}).encode()
    return files


def write_artifacts(out: Path, files: Dict[str, bytes]) -> None:
    for rel, data in sorted(files.items()):
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)


def cmd_simulate(m: RunManifest, jobs: int = 1) -> int:
    files = simulate_artifacts(m, jobs)
    write_artifacts(m.output_dir, files)
    print(f"wrote {len(files)} files to {m.output_dir}")
    return EXIT_OK


# verify -------------------------------------------------------------------------------

def check_grid(m: RunManifest) -> None:
    """Surface configuration errors in the manifest grid before running anything."""
    for cell in expand_cells(m):
        try:
            build(dataclasses.replace(cell.policy, num_minibatches=1), cell.cluster)
        except ScheduleError as exc:
            raise ConfigError("config", exc.rule, f"{cell.name}: {exc.message}") from None


def determinism_check(m: RunManifest) -> CheckResult:
    small = dataclasses.replace(m, formats=FORMATS)
    first = simulate_artifacts(small, jobs=1)
    again = simulate_artifacts(small, jobs=1)
    parallel = simulate_artifacts(small, jobs=2)
    for label, other in (("repeat", again), ("jobs=2", parallel)):
        if other != first:
            diff = sorted(k for k in set(first) | set(other) if first.get(k) != other.get(k))
            return CheckResult("determinism", False, f"{label} run differs in {diff[0]}", {"files": diff[:10]})
    return CheckResult("determinism", True,
                       f"{len(first)} artifacts byte-identical across repeat and jobs=2 runs")


def cmd_verify(m: RunManifest, jobs: int = 1) -> int:
    check_grid(m)
    try:
        settings = dataclasses.replace(m.suite, scaling_etas=tuple(m.etas))
        results = run_suite(settings, m.seed, extra=[("determinism", lambda: determinism_check(m))])
    except optim.PreconditionError as exc:
        raise ConfigError("config", "precondition", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("manifest", "suite", str(exc)) from None
    for r in results:
        print(r.line())
        log.info("%s took %.1fs", r.name, r.seconds)
    files: Dict[str, bytes] = {}
    if "json" in m.formats:
        files["verify.json"] = analysis.to_json({"seed": m.seed, "checks": [r.to_dict() for r in results]}).encode()
    if "csv" in m.formats:
        rows = [["check", "passed", "detail"]] + [[r.name, str(r.passed).lower(), r.detail] for r in results]
        files["verify.csv"] = analysis.rows_to_csv(rows).encode()
    write_artifacts(m.output_dir, files)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


# compare ------------------------------------------------------------------------------

def compare_rows(m: RunManifest) -> List[List[str]]:
    if len(set(m.policies)) < 2:
        raise ConfigError("precondition", "policies", "compare needs at least two distinct policies")
    rows = [list(COMPARE_COLUMNS)]
    mem_cache = {}
    for cluster in m.clusters():
        d = cluster.depth
        unit = MemoryModel()  # one stage's weights and one minibatch's stage activations are the units
        for n in m.injection_limits:
            n_eff = n if n is not None else d
            total = m.num_minibatches or n_eff * m.windows
            for policy in m.policies:
                if policy is Policy.AMDP:
                    cfg = PolicyConfig(policy, total, zero_enabled=m.zero_enabled)
                elif policy is Policy.PIPEDREAM:
                    cfg = PolicyConfig(policy, total, injection_limit=min(n_eff, d))
                else:
                    cfg = PolicyConfig(policy, total, injection_limit=n_eff, accumulation_threshold=n_eff,
                                       zero_enabled=m.zero_enabled)
                try:
                    t = simulate(build(cfg, cluster), cluster)
                except ScheduleError as exc:
                    raise ConfigError("config", exc.rule, f"{policy.value} d={d} n={n_eff}: {exc.message}") from None
                if policy.synchronous:
                    simulated = fraction_str(bubble_ratio(t))
                else:
                    simulated = _steady(t)
                mem = analysis.memory_report(t, cfg, unit)
                analytic = analysis.closed_form_row(policy, d, n_eff)
                weight = max(dm.weight for dm in mem.devices)
                peak = max(dm.peak_activation for dm in mem.devices)
                rows.append([
                    policy.value, str(d), str(n_eff), simulated, analytic.bubble_text(),
                    fraction_str(weight), analytic.weight_text(), fraction_str(peak),
                    fraction_str(analytic.peak_activation), str(analysis.mismatch_report(t).max_mismatch),
                ])
    return rows


def cmd_compare(m: RunManifest, jobs: int = 1) -> int:
    rows = compare_rows(m)
    files: Dict[str, bytes] = {}
    if "csv" in m.formats:
        files["compare.csv"] = analysis.rows_to_csv(rows).encode()
    if "json" in m.formats:
        files["compare.json"] = analysis.to_json([dict(zip(rows[0], r)) for r in rows[1:]]).encode()
    write_artifacts(m.output_dir, files)
    print(analysis.rows_to_csv(rows), end="")
    return EXIT_OK


# entry point ----------------------------------------------------------------------------

COMMANDS = {"simulate": cmd_simulate, "verify": cmd_verify, "compare": cmd_compare}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipesched", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate every (policy, config) cell and write timelines, Gantt charts and a summary",
        "verify": "run the verification suite; exit 1 if any check fails",
        "compare": "emit the policy comparison table for the configured (d, n)",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--manifest", required=True, type=Path, help="run manifest (JSON)")
        p.add_argument("--out", type=Path, help="output directory (overrides the manifest)")
        p.add_argument("--seed", type=int, help="seed (overrides the manifest)")
        p.add_argument("--format", action="append", choices=FORMATS,
                       help="artifact format; repeat to select several (default: manifest formats)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("PIPESCHED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    args = make_parser().parse_args(argv)
    try:
        m = RunManifest.load(args.manifest)
        if args.out is not None:
            m.output_dir = args.out
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("usage", "seed", "seed must be an unsigned 64-bit integer")
            m.seed = args.seed
        if args.format:
            m.formats = tuple(sorted(set(args.format), key=FORMATS.index))
        if args.jobs < 1:
            raise ConfigError("usage", "jobs", "--jobs must be >= 1")
        return COMMANDS[args.command](m, args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
