"""Mismatch, window, memory and communication statistics over timelines.

Mismatch counting: an update counts against (stage i, minibatch j) when it
modifies the parameters used by the replica that ran forward(i, j) and lands
after that forward started and no later than backward(i, j) started. A
Broadcast updates every replica of its stage at its finish time; an Update
event updates only the replica on its own device.
"""

from __future__ import annotations

import csv
import io
import json
import random
from bisect import bisect_left, bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .builder import build, map_stage_to_device
from .engine import simulate
from .model import (
    ClusterSpec,
    Kind,
    MemoryModel,
    MismatchReport,
    Policy,
    PolicyConfig,
    Timeline,
    fraction_str,
)


@dataclass(frozen=True)
class Verdict:
    passed: bool
    message: str
    witness: Optional[dict] = None
    details: Dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed


def _update_times(t: Timeline) -> Dict[int, List[Tuple[Fraction, Optional[int]]]]:
    """Per stage: (time, device) of every parameter update; device None = all replicas."""
    out: Dict[int, List[Tuple[Fraction, Optional[int]]]] = defaultdict(list)
    for ev in t.events:
        if ev.kind is Kind.BROADCAST:
            out[ev.stage].append((ev.end, None))
        elif ev.kind is Kind.UPDATE:
            out[ev.stage].append((ev.end, ev.device))
    return out


def mismatch_report(t: Timeline) -> MismatchReport:
    """Count parameter updates between each forward and its backward."""
    ev = t.compute_events()
    per_stage: Dict[int, Dict[Optional[int], List[Fraction]]] = {}
    for stage, items in _update_times(t).items():
        table: Dict[Optional[int], List[Fraction]] = defaultdict(list)
        for when, dev in items:
            table[dev].append(when)
        per_stage[stage] = {k: sorted(v) for k, v in table.items()}

    def count(times: Sequence[Fraction], lo: Fraction, hi: Fraction) -> int:
        # lo < u <= hi
        return bisect_right(times, hi) - bisect_right(times, lo)

    entries: Dict[Tuple[int, int], int] = {}
    flagged = []
    for (kind, i, j), fwd in sorted(ev.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0].order)):
        if kind is not Kind.FORWARD:
            continue
        bwd = ev.get((Kind.BACKWARD, i, j))
        if bwd is None:
            flagged.append((i, j))
            continue
        table = per_stage.get(i, {})
        total = count(table.get(None, ()), fwd.start, bwd.start)
        total += count(table.get(fwd.device, ()), fwd.start, bwd.start)
        entries[(i, j)] = total
    max_per_stage: Dict[int, int] = {}
    for (i, _), v in entries.items():
        max_per_stage[i] = max(max_per_stage.get(i, 0), v)
    return MismatchReport(entries=entries, max_per_stage=max_per_stage, flagged=tuple(flagged))


def steady_state_mismatch(report: MismatchReport, depth: int, num_minibatches: int) -> Dict[int, FrozenSet[int]]:
    """Distinct mismatch values per stage, excluding the first and last ``depth`` minibatches."""
    out: Dict[int, set] = defaultdict(set)
    for (i, j), v in report.entries.items():
        if depth <= j < num_minibatches - depth:
            out[i].add(v)
    return {i: frozenset(vs) for i, vs in sorted(out.items())}


def mismatch_prediction(depth: int, injection_limit: int) -> List[int]:
    return [min(injection_limit, depth - i) - 1 for i in range(depth)]


def verify_mismatch_formula(depth: int, injection_limit: int, num_minibatches: Optional[int] = None) -> Verdict:
    """Simulate a per-backward-update 1F1B schedule and compare with min(n, d-i) - 1."""
    if not 1 <= injection_limit <= depth:
        return Verdict(False, f"injection limit {injection_limit} outside [1, {depth}]")
    m = num_minibatches or 4 * depth + 8
    cluster = ClusterSpec.uniform(depth, 1, 2)
    cfg = PolicyConfig(Policy.PIPEDREAM, m, injection_limit=injection_limit, accumulation_threshold=1)
    t = simulate(build(cfg, cluster), cluster)
    steady = steady_state_mismatch(mismatch_report(t), depth, m)
    expected = mismatch_prediction(depth, injection_limit)
    measured = []
    for i in range(depth):
        values = steady.get(i, frozenset())
        if values != {expected[i]}:
            return Verdict(
                False,
                f"stage {i}: measured {sorted(values)}, expected {expected[i]}",
                witness={"depth": depth, "injection_limit": injection_limit, "stage": i,
                         "num_minibatches": m},
            )
        measured.append(expected[i])
    return Verdict(True, f"d={depth} n={injection_limit} mismatch={measured}", details={"mismatch": measured})


@dataclass(frozen=True)
class WindowEntry:
    window: int
    minibatches: Tuple[int, ...]
    mismatched: FrozenSet[int]
    update_count: int

    @property
    def size(self) -> int:
        return len(self.minibatches)


@dataclass(frozen=True)
class WindowReport:
    threshold: int
    windows: Tuple[WindowEntry, ...]

    def mismatched_sets(self) -> Dict[int, FrozenSet[int]]:
        return {w.window: w.mismatched for w in self.windows}

    def check_leading(self, depth: int) -> Optional[str]:
        """None when every non-initial full window mismatches exactly its first
        min(depth, threshold) minibatches; otherwise a description of the first
        offending window."""
        lead = min(depth, self.threshold)
        for entry in self.windows[1:]:
            if entry.size < lead:
                continue
            expected = frozenset(entry.minibatches[:lead])
            if entry.mismatched != expected:
                return (f"window {entry.window}: mismatched {sorted(entry.mismatched)}, "
                        f"expected {sorted(expected)}")
        return None


def window_mismatch(t: Timeline, d: Optional[int] = None, report: Optional[MismatchReport] = None) -> WindowReport:
    """Group minibatches by accumulation window and list those with nonzero mismatch.

    ``d`` is accepted for symmetry with :meth:`WindowReport.check_leading`;
    grouping uses the threshold recorded in the timeline's policy.
    """
    if t.policy is None or t.policy.accumulation_threshold is None:
        raise ValueError("timeline carries no accumulation threshold")
    thr = t.policy.accumulation_threshold
    report = report or mismatch_report(t)
    members: Dict[int, set] = defaultdict(set)
    bad: Dict[int, set] = defaultdict(set)
    for (_, j), v in report.entries.items():
        members[j // thr].add(j)
        if v:
            bad[j // thr].add(j)
    updates: Dict[int, int] = defaultdict(int)
    for ev in t.events:
        if ev.kind in (Kind.BROADCAST, Kind.UPDATE):
            updates[ev.window] += 1
    entries = tuple(
        WindowEntry(w, tuple(sorted(members[w])), frozenset(bad.get(w, ())), updates.get(w, 0))
        for w in sorted(members)
    )
    return WindowReport(threshold=thr, windows=entries)


def verify_amdp_bound(depth: int, threshold: int, windows: int = 8, *, zero_enabled: bool = False,
                      cluster: Optional[ClusterSpec] = None) -> Verdict:
    """Max mismatch <= 1 and the leading-minibatch window property for one AMDP run."""
    cluster = cluster or ClusterSpec.uniform(depth, 1, 2)
    cfg = PolicyConfig(Policy.AMDP, threshold * windows, accumulation_threshold=threshold,
                       zero_enabled=zero_enabled)
    t = simulate(build(cfg, cluster), cluster)
    rep = mismatch_report(t)
    witness = {"depth": depth, "threshold": threshold, "windows": windows, "zero_enabled": zero_enabled}
    if rep.max_mismatch > 1:
        worst = max(rep.entries, key=rep.entries.get)
        return Verdict(False, f"mismatch {rep.entries[worst]} at (stage, minibatch)={worst}", witness=witness)
    problem = window_mismatch(t, depth, rep).check_leading(depth)
    if problem:
        return Verdict(False, problem, witness=witness)
    return Verdict(True, f"d={depth} threshold={threshold}: max mismatch {rep.max_mismatch}",
                   details={"max_mismatch": rep.max_mismatch})


# topology perturbations -----------------------------------------------------

def _random_fraction(rng: random.Random, lo: int, hi: int, den: int) -> Fraction:
    return Fraction(rng.randint(lo, hi), den)


def random_topology(depth: int, rng: random.Random) -> dict:
    """One perturbed AMDP deployment: node split, latencies, placement, directions."""
    pipes = depth // 2
    base = [[map_stage_to_device(j, i, depth) for i in range(depth)] for j in range(pipes)]
    mode = rng.choice(["relabel", "reverse", "per-pipeline", "relabel+reverse"])
    perm = list(range(depth))
    rng.shuffle(perm)
    if mode == "per-pipeline":
        device_map = []
        for _ in range(pipes):
            row = list(range(depth))
            rng.shuffle(row)
            device_map.append(row)
    else:
        device_map = [list(row) for row in base]
        if "reverse" in mode:
            device_map = [row[::-1] for row in device_map]
        if "relabel" in mode:
            device_map = [[perm[dev] for dev in row] for row in device_map]
    cuts = sorted(rng.sample(range(1, depth), rng.randint(0, min(3, depth - 1))))
    order = list(range(depth))
    rng.shuffle(order)
    nodes, prev = [], 0
    for c in cuts + [depth]:
        nodes.append(sorted(order[prev:c]))
        prev = c
    fwd = [_random_fraction(rng, 1, 4, 2) for _ in range(depth)]
    bwd = [f * rng.choice([1, 2, 3]) for f in fwd]
    return {
        "mode": mode,
        "device_map": device_map,
        "nodes": nodes,
        "comm_cost": _random_fraction(rng, 1, 4, 4),
        "inter_node_comm_cost": _random_fraction(rng, 2, 12, 4),
        "fwd_cost": fwd,
        "bwd_cost": bwd,
        "threshold": depth * rng.choice([1, 2, 4]),
        "zero_enabled": rng.random() < 0.5,
    }


def _jsonable(cfg: dict) -> dict:
    out = {}
    for k, v in cfg.items():
        if isinstance(v, Fraction):
            out[k] = fraction_str(v)
        elif isinstance(v, list) and v and isinstance(v[0], Fraction):
            out[k] = [fraction_str(x) for x in v]
        else:
            out[k] = v
    return out


def verify_topology_invariance(depth: int, trials: int, seed: int, windows: int = 4) -> Verdict:
    """AMDP max mismatch stays <= 1 under random placement, latency and direction changes."""
    if depth % 2:
        return Verdict(False, f"depth must be even (got {depth})")
    rng = random.Random(seed)
    worst = 0
    for trial in range(trials):
        topo = random_topology(depth, rng)
        cluster = ClusterSpec(
            depth=depth,
            devices=depth,
            fwd_cost=tuple(topo["fwd_cost"]),
            bwd_cost=tuple(topo["bwd_cost"]),
            comm_cost=topo["comm_cost"],
            nodes=tuple(tuple(g) for g in topo["nodes"]),
            inter_node_comm_cost=topo["inter_node_comm_cost"],
        )
        cfg = PolicyConfig(Policy.AMDP, topo["threshold"] * windows,
                           accumulation_threshold=topo["threshold"], zero_enabled=topo["zero_enabled"])
        t = simulate(build(cfg, cluster, device_map=topo["device_map"]), cluster)
        rep = mismatch_report(t)
        worst = max(worst, rep.max_mismatch)
        if rep.max_mismatch > 1:
            witness = _jsonable(topo)
            witness.update(trial=trial, seed=seed, depth=depth)
            return Verdict(False, f"trial {trial}: mismatch {rep.max_mismatch}", witness=witness)
    return Verdict(True, f"d={depth}: {trials} perturbations, max mismatch {worst}",
                   details={"max_mismatch": worst, "trials": trials})


# memory ----------------------------------------------------------------------

@dataclass(frozen=True)
class ClosedFormRow:
    policy: str
    bubble_ratio: Optional[Fraction]  # None when the closed form is "approximately 0"
    weight_memory: Tuple[Fraction, Fraction]  # (low, high) in units of M_theta
    peak_activation: Fraction  # in units of M_a

    def bubble_text(self) -> str:
        return "~0" if self.bubble_ratio is None else fraction_str(self.bubble_ratio)

    def weight_text(self) -> str:
        lo, hi = self.weight_memory
        return fraction_str(lo) if lo == hi else f"[{fraction_str(lo)},{fraction_str(hi)}]"


def closed_form_row(policy: Policy, depth: int, n: int) -> ClosedFormRow:
    """Closed-form bubble ratio and memory columns (memory in units of M_theta / M_a)."""
    d = depth
    one, dd = Fraction(1), Fraction(d)
    if policy in (Policy.DAPPLE, Policy.GPIPE):
        # GPipe is not a row of the comparison table; it shares DAPPLE's bubble
        return ClosedFormRow(policy.value, Fraction(d - 1, n + d - 1), (one, one), Fraction(n))
    if policy is Policy.INTERLEAVED:
        return ClosedFormRow(policy.value, Fraction(d - 1, 2 * n + d - 1), (one, one), dd)
    if policy is Policy.CHIMERA:
        return ClosedFormRow(policy.value, Fraction(d - 2, 2 * n + d - 2), (Fraction(2), Fraction(2)), dd)
    if policy is Policy.PIPEDREAM:
        # steady state is bubble-free; the comparison table prints this as approximately 0
        return ClosedFormRow(policy.value, Fraction(0), (one, dd), dd)
    return ClosedFormRow(policy.value, None, (one, one), dd)


@dataclass(frozen=True)
class DeviceMemory:
    device: int
    replicas: int
    weight: Fraction
    peak_activation: Fraction
    gradient: Fraction
    optimizer_state: Fraction
    naive_optimizer_state: Fraction


@dataclass(frozen=True)
class MemoryReport:
    devices: Tuple[DeviceMemory, ...]
    closed_form: ClosedFormRow

    MEMORY_COLUMNS = ("device", "replicas", "weight", "peak_activation", "gradient",
                      "optimizer_state", "naive_optimizer_state")

    def csv_rows(self) -> List[List[str]]:
        rows = [list(self.MEMORY_COLUMNS)]
        for m in self.devices:
            rows.append([str(m.device), str(m.replicas), fraction_str(m.weight),
                         fraction_str(m.peak_activation), fraction_str(m.gradient),
                         fraction_str(m.optimizer_state), fraction_str(m.naive_optimizer_state)])
        return rows

    def to_dict(self) -> dict:
        return {
            "devices": [dict(zip(self.MEMORY_COLUMNS, row)) for row in self.csv_rows()[1:]],
            "closed_form": {
                "policy": self.closed_form.policy,
                "bubble_ratio": self.closed_form.bubble_text(),
                "weight_memory": self.closed_form.weight_text(),
                "peak_activation": fraction_str(self.closed_form.peak_activation),
            },
        }


def peak_live(intervals: Sequence[Tuple[Fraction, Fraction, Fraction]]) -> Fraction:
    """Maximum total weight of simultaneously live half-open intervals [a, b)."""
    points = []
    for a, b, w in intervals:
        points.append((a, 1, w))
        points.append((b, 0, -w))
    # at equal time, releases (0) are processed before acquisitions (1)
    points.sort(key=lambda p: (p[0], p[1]))
    cur = best = Fraction(0)
    for _, _, w in points:
        cur += w
        best = max(best, cur)
    return best


def memory_report(t: Timeline, policy: PolicyConfig, mem: MemoryModel) -> MemoryReport:
    """Per-device weight/activation/gradient/optimizer accounting plus the closed-form row."""
    d = t.cluster.depth
    scale = Fraction(d, t.num_stages)  # a virtual stage is 1/chunks of a model stage
    cfg = policy.resolved(d)
    ev = t.compute_events()
    hosted: Dict[int, set] = defaultdict(set)
    live: Dict[int, list] = defaultdict(list)
    for (kind, i, j), f in ev.items():
        if kind is not Kind.FORWARD:
            continue
        hosted[f.device].add((f.pipeline, i))
        b = ev.get((Kind.BACKWARD, i, j))
        end = b.end if b is not None else t.makespan
        live[f.device].append((f.start, end, mem.activation_per_stage_per_minibatch * scale))
    owned: Dict[int, int] = defaultdict(int)
    zero_owner = any(e.kind is Kind.REDUCE for e in t.events)
    if zero_owner:
        for e in t.events:
            if e.kind is Kind.REDUCE and e.window == 0:
                owned[e.device] += 1
    devices = []
    for dev in range(t.cluster.devices):
        replicas = len(hosted.get(dev, ()))
        weight = replicas * mem.weight_per_stage * scale
        naive_opt = weight * mem.optimizer_state_multiplier
        if zero_owner and cfg.zero_enabled:
            opt = owned.get(dev, 0) * mem.weight_per_stage * scale * mem.optimizer_state_multiplier
        else:
            opt = naive_opt
        devices.append(DeviceMemory(
            device=dev,
            replicas=replicas,
            weight=weight,
            peak_activation=peak_live(live.get(dev, [])),
            gradient=weight * mem.gradient_multiplier,
            optimizer_state=opt,
            naive_optimizer_state=naive_opt,
        ))
    n = cfg.injection_limit or cfg.accumulation_threshold or d
    return MemoryReport(devices=tuple(devices), closed_form=closed_form_row(cfg.policy, d, n))


def zero_optimizer_ratio(depth: int) -> Fraction:
    """Closed form: ZeRO leaves 2/d of the naive optimizer state on each device."""
    return Fraction(2, depth)


def reduce_broadcast_cost(replicas: int, nbytes) -> Tuple[Fraction, Fraction, Fraction]:
    """Per-device traffic of reduce, broadcast and all-reduce under the ring model."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    nbytes = Fraction(nbytes)
    phase = Fraction(replicas - 1, replicas) * nbytes
    return phase, phase, 2 * Fraction(replicas - 1, replicas) * nbytes


# export ------------------------------------------------------------------------

MISMATCH_COLUMNS = ("stage", "minibatch", "mismatch")
WINDOW_COLUMNS = ("window", "size", "update_count", "mismatched")


def mismatch_csv_rows(report: MismatchReport) -> List[List[str]]:
    rows = [list(MISMATCH_COLUMNS)]
    for (i, j), v in sorted(report.entries.items()):
        rows.append([str(i), str(j), str(v)])
    return rows


def window_csv_rows(report: WindowReport) -> List[List[str]]:
    rows = [list(WINDOW_COLUMNS)]
    for w in report.windows:
        rows.append([str(w.window), str(w.size), str(w.update_count),
                     " ".join(str(x) for x in sorted(w.mismatched))])
    return rows


def mismatch_to_dict(report: MismatchReport) -> dict:
    return {
        "entries": [{"stage": i, "minibatch": j, "mismatch": v} for (i, j), v in sorted(report.entries.items())],
        "max_per_stage": {str(i): v for i, v in sorted(report.max_per_stage.items())},
        "flagged": [list(p) for p in report.flagged],
    }


def window_to_dict(report: WindowReport) -> dict:
    return {
        "threshold": report.threshold,
        "windows": [{"window": w.window, "size": w.size, "update_count": w.update_count,
                     "mismatched": sorted(w.mismatched)} for w in report.windows],
    }


def rows_to_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
