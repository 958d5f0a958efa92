"""Verification checks shared by ``pipesched verify``.

Each check returns a :class:`CheckResult`; a failing check carries the
configuration that produced the failure as its witness.
"""

from __future__ import annotations

import dataclasses
import json
import random
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import analysis, optim
from .builder import TaskGraph, build, map_stage_to_device
from .engine import bubble_ratio, simulate, steady_state_bubble_ratio
from .model import (ClusterSpec, Kind, MemoryModel, Policy, PolicyConfig, TaskEvent, Timeline, causal_pairs,
                    fraction_str, validate_causality, validate_timeline)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    witness: Optional[dict] = None
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name}: {self.detail}"
        if self.witness is not None and not self.passed:
            text += " witness=" + json.dumps(self.witness, sort_keys=True, separators=(",", ":"), default=str)
        return text

    def to_dict(self) -> dict:
        # runtime is left out so reports stay byte-stable
        return {"name": self.name, "passed": self.passed, "detail": self.detail, "witness": self.witness}


@dataclass
class SuiteSettings:
    """Sizes of each check. The defaults are the full acceptance sizes."""

    checks: Tuple[str, ...] = ()  # empty means all
    mismatch_max_depth: int = 16
    amdp_max_depth: int = 16
    amdp_windows: int = 8
    topology_depths: Tuple[int, ...] = (4, 8)
    topology_trials: int = 1000
    fuzz_runs: int = 10000
    inversion_samples: int = 200
    scaling_etas: Tuple[float, ...] = optim.SCALING_ETAS
    scaling_T: int = 1000
    scaling_seeds: int = 10
    bound_T: int = 2000
    bound_seeds: int = 20
    fault: Optional[str] = None  # "drop-forward-backward-edge" injects a builder bug

    @classmethod
    def from_dict(cls, data: dict) -> "SuiteSettings":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown suite setting(s): {', '.join(unknown)}")
        kwargs = dict(data)
        for key in ("checks", "topology_depths", "scaling_etas"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


FAULTS = ("drop-forward-backward-edge",)


# random configurations ------------------------------------------------------------

def random_config(rng: random.Random) -> Tuple[PolicyConfig, ClusterSpec]:
    """A small random but valid (policy, cluster) cell."""
    policy = rng.choice(list(Policy))
    if policy in (Policy.AMDP, Policy.CHIMERA):
        d = rng.choice([2, 4, 6, 8])
    else:
        d = rng.randint(2, 8)
    den = rng.choice([1, 2, 3])
    fwd = tuple(Fraction(rng.randint(1, 4 * den), den) for _ in range(d))
    if rng.random() < 0.5:
        bwd = tuple(f * rng.choice([1, 2, 3]) for f in fwd)
    else:
        bwd = tuple(Fraction(rng.randint(1, 6 * den), den) for _ in range(d))
    cluster = ClusterSpec(
        depth=d, devices=d, fwd_cost=fwd, bwd_cost=bwd,
        update_cost=rng.choice([Fraction(0), Fraction(0), Fraction(1, 2), Fraction(1)]),
        comm_cost=rng.choice([Fraction(0), Fraction(0), Fraction(1, 4), Fraction(1)]),
    )
    zero = rng.random() < 0.3
    if policy is Policy.AMDP:
        thr = rng.choice([d, 2 * d, rng.randint(1, 2 * d)])
        cfg = PolicyConfig(policy, rng.randint(1, 3 * thr), accumulation_threshold=thr,
                           num_pipelines=rng.randint(1, d // 2), zero_enabled=zero)
    elif policy is Policy.PIPEDREAM:
        thr = rng.choice([1, 1, d, rng.randint(1, 2 * d)])
        cfg = PolicyConfig(policy, rng.randint(1, 4 * d), injection_limit=rng.randint(1, d),
                           accumulation_threshold=thr)
    elif policy is Policy.INTERLEAVED:
        thr = d * rng.randint(1, 2)
        cfg = PolicyConfig(policy, d * rng.randint(1, 2 * thr // d), accumulation_threshold=thr,
                           zero_enabled=zero)
    else:
        thr = rng.randint(1, 2 * d)
        cfg = PolicyConfig(policy, rng.randint(1, 2 * thr), accumulation_threshold=thr, zero_enabled=zero)
    return cfg, cluster


def config_witness(cfg: PolicyConfig, cluster: ClusterSpec) -> dict:
    return {"policy": cfg.to_dict(), "cluster": cluster.to_dict()}


def drop_forward_backward_edge(graph: TaskGraph) -> TaskGraph:
    """Fault injection: forget that the last stage's backward of minibatch 0 needs its forward."""
    last = graph.num_stages - 1
    idx = graph.compute_index()
    f, b = idx[(Kind.FORWARD, last, 0)], idx[(Kind.BACKWARD, last, 0)]
    return graph.without_edge((f.id, b.id))


def invert_pair(t: Timeline, pred: TaskEvent, succ: TaskEvent) -> Timeline:
    """Move ``pred`` so that it ends just after ``succ`` starts, breaking that one ordering."""
    shortest = min(e.duration for e in t.events if e.duration > 0)
    eps = shortest / 4
    gap = t.cluster.gap(pred.device, succ.device)
    moved = dataclasses.replace(pred, start=succ.start - gap - pred.duration + eps)
    events = tuple(moved if e is pred else e for e in t.events)
    return dataclasses.replace(t, events=events)


# checks --------------------------------------------------------------------------------

def check_mismatch_formula(s: SuiteSettings, seed: int) -> CheckResult:
    cells = 0
    for d in range(2, s.mismatch_max_depth + 1):
        for n in range(1, d + 1):
            v = analysis.verify_mismatch_formula(d, n)
            cells += 1
            if not v.passed:
                return CheckResult("mismatch-formula", False, v.message, {"depth": d, "injection_limit": n})
    return CheckResult("mismatch-formula", True, f"{cells} (d, n) cells match min(n, d-i)-1 at every stage")


def check_amdp_bound(s: SuiteSettings, seed: int) -> CheckResult:
    cells = 0
    for d in range(2, s.amdp_max_depth + 1, 2):
        for thr in (d, 2 * d, 4 * d):
            v = analysis.verify_amdp_bound(d, thr, windows=s.amdp_windows)
            cells += 1
            if not v.passed:
                return CheckResult("amdp-bound", False, v.message,
                                   {"depth": d, "threshold": thr, "windows": s.amdp_windows})
    return CheckResult("amdp-bound", True,
                       f"{cells} cells: mismatch <= 1, later windows mismatch exactly their first d minibatches")


def check_bubble(s: SuiteSettings, seed: int) -> CheckResult:
    for d in (4, 8):
        c = ClusterSpec.uniform(d, 1, 1)
        for n in (d, 2 * d, 4 * d):
            for policy in (Policy.DAPPLE, Policy.CHIMERA):
                t = simulate(build(PolicyConfig(policy, n, accumulation_threshold=n), c), c)
                got = bubble_ratio(t)
                want = analysis.closed_form_row(policy, d, n).bubble_ratio
                if got != want:
                    return CheckResult("bubble", False, f"{policy.value} bubble {got} != {want}",
                                       {"policy": policy.value, "depth": d, "n": n})
    d, windows = 8, 16
    c = ClusterSpec.uniform(d, 1, 2)
    pd = simulate(build(PolicyConfig(Policy.PIPEDREAM, windows * d, accumulation_threshold=d), c), c)
    pd_ratio = steady_state_bubble_ratio(pd)
    amdp = simulate(build(PolicyConfig(Policy.AMDP, windows * d), c), c)
    amdp_ratio = steady_state_bubble_ratio(amdp)
    ok = pd_ratio == 0 and amdp_ratio < Fraction(5, 100)
    detail = (f"DAPPLE and Chimera match the closed forms; PipeDreamAsync steady {fraction_str(pd_ratio)}, "
              f"AMDP steady {float(amdp_ratio):.4f}")
    return CheckResult("bubble", ok, detail, None if ok else {"depth": d, "windows": windows})


def check_chimera_mapping(s: SuiteSettings, seed: int) -> CheckResult:
    got = [[map_stage_to_device(j, i, 8) for i in range(8)] for j in (0, 1)]
    want = [list(range(8)), [3, 2, 1, 0, 7, 6, 5, 4]]
    ok = got == want
    return CheckResult("chimera-mapping", ok, f"d=8 pipelines 0 and 1 map to {got}",
                       None if ok else {"expected": want, "got": got})


def check_topology(s: SuiteSettings, seed: int) -> CheckResult:
    total = 0
    for d in s.topology_depths:
        v = analysis.verify_topology_invariance(d, s.topology_trials, seed)
        total += s.topology_trials
        if not v.passed:
            return CheckResult("topology", False, v.message, v.witness)
    return CheckResult("topology", True, f"{total} perturbed topologies, max mismatch <= 1")


def check_causality(s: SuiteSettings, seed: int) -> CheckResult:
    rng = random.Random(seed)
    fault = s.fault
    sampled = 0
    for run in range(s.fuzz_runs):
        cfg, cluster = random_config(rng)
        graph = build(cfg, cluster)
        if fault == "drop-forward-backward-edge":
            graph = drop_forward_backward_edge(graph)
        t = simulate(graph, cluster)
        problems = validate_causality(t) + validate_timeline(t)
        if problems:
            return CheckResult("causality", False, f"run {run}: {problems[0]}", config_witness(cfg, cluster))
        if sampled < s.inversion_samples and rng.random() < 0.1:
            sampled += 1
            pairs = list(causal_pairs(t))
            pred, succ = pairs[rng.randrange(len(pairs))]
            broken = validate_causality(invert_pair(t, pred, succ))
            names = {v.pair for v in broken}
            want = (f"{pred.kind.value}({pred.stage},{pred.minibatch})",
                    f"{succ.kind.value}({succ.stage},{succ.minibatch})")
            if want not in names:
                return CheckResult("causality", False, f"run {run}: inversion of {want} went undetected",
                                   config_witness(cfg, cluster))
    return CheckResult("causality", True,
                       f"{s.fuzz_runs} random simulations without violations; {sampled} injected inversions detected")


def check_zero(s: SuiteSettings, seed: int) -> CheckResult:
    for d in (4, 8, 16):
        c = ClusterSpec.uniform(d, 1, 2)
        cfg = PolicyConfig(Policy.AMDP, 2 * d, zero_enabled=True)
        t = simulate(build(cfg, c), c)
        rep = analysis.memory_report(t, cfg, MemoryModel())
        for m in rep.devices:
            if m.optimizer_state != m.naive_optimizer_state * Fraction(2, d):
                return CheckResult("zero", False,
                                   f"device {m.device}: optimizer state {m.optimizer_state} != "
                                   f"{m.naive_optimizer_state} x 2/{d}", {"depth": d})
    for r in range(2, 17):
        red, bc, allr = analysis.reduce_broadcast_cost(r, 1)
        if red + bc != allr:
            return CheckResult("zero", False, f"reduce+broadcast {red + bc} != all-reduce {allr}", {"replicas": r})
    return CheckResult("zero", True, "optimizer state is 2/d of naive for d in {4,8,16}; "
                                     "reduce+broadcast equals all-reduce for 2..16 replicas")


def check_scaling(s: SuiteSettings, seed: int) -> CheckResult:
    seeds = range(seed, seed + s.scaling_seeds)
    parts = []
    for obj in (optim.Objective.quadratic(10), optim.Objective.smooth_nonconvex(10)):
        for opt in (optim.OptimizerSpec(optim.OptKind.SGD, 0.1), optim.SCALING_ADAM):
            fit = optim.discrepancy_scaling(obj, opt, s.scaling_etas, s.scaling_T, seeds)
            ok = fit.slope is not None and 0.8 <= fit.slope <= 1.2 and fit.residual < 0.05
            parts.append(f"{obj.kind}/{opt.kind.value} slope {fit.slope:.3f} residual {fit.residual:.4f}")
            if not ok:
                return CheckResult("scaling", False, parts[-1],
                                   {"objective": obj.kind, "optimizer": opt.kind.value, "fit": fit.to_dict()})
    return CheckResult("scaling", True, "; ".join(parts))


def check_bound(s: SuiteSettings, seed: int) -> CheckResult:
    obj = optim.Objective.quadratic(10)
    opt = optim.OptimizerSpec(optim.OptKind.SGD, 0.05)
    r = optim.check_convergence_bound(obj, 1.0, opt, optim.default_theta0(10), 0.05, s.bound_T,
                                      seeds=range(seed, seed + s.bound_seeds))
    detail = f"lhs {r.lhs:.6f} <= rhs {r.rhs:.6f} (C = {r.constant:.6g})"
    return CheckResult("bound", r.passed, detail, None if r.passed else r.to_dict())


CHECKS: Dict[str, Callable[[SuiteSettings, int], CheckResult]] = {
    "mismatch-formula": check_mismatch_formula,
    "amdp-bound": check_amdp_bound,
    "bubble": check_bubble,
    "chimera-mapping": check_chimera_mapping,
    "topology": check_topology,
    "causality": check_causality,
    "zero": check_zero,
    "scaling": check_scaling,
    "bound": check_bound,
}


def run_suite(settings: SuiteSettings, seed: int = 0,
              extra: Sequence[Tuple[str, Callable[[], CheckResult]]] = ()) -> List[CheckResult]:
    names = list(settings.checks) or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS and n not in dict(extra)]
    if unknown:
        raise ValueError(f"unknown check(s): {', '.join(unknown)}")
    if settings.fault is not None and settings.fault not in FAULTS:
        raise ValueError(f"unknown fault {settings.fault!r}; known: {', '.join(FAULTS)}")
    results = []
    for name in names:
        if name not in CHECKS:
            continue
        t0 = time.perf_counter()
        res = CHECKS[name](settings, seed)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    for name, fn in extra:
        if not settings.checks or name in settings.checks:
            t0 = time.perf_counter()
            res = fn()
            res.seconds = time.perf_counter() - t0
            results.append(res)
    return results
