"""Task-graph construction for every supported pipeline policy.

A :class:`TaskGraph` holds three things:

* ``deps``: data dependencies. Between Forward/Backward tasks these are
  exactly the three causal orderings (forward -> backward of the same stage,
  forward chain downstream, backward chain upstream). The remaining edges
  attach gradient-accumulation windows to Reduce/Broadcast/Update tasks.
* ``lanes``: the per-(pipeline, stage) program order. A task is released only
  after its lane predecessor has finished; this is how each policy's warm-up
  depth (injection limit) and preloading are expressed.
* task attributes used by the engine's FIFO tie-break.

Lanes that share a device are merged at run time by the engine's FIFO rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

from .model import ClusterSpec, Kind, Policy, PolicyConfig, as_fraction, fraction_str


class ScheduleError(ValueError):
    """An unsupported (policy, depth) combination or invalid configuration."""

    def __init__(self, rule: str, message: str):
        super().__init__(f"{rule}: {message}")
        self.rule = rule
        self.message = message


@dataclass(frozen=True)
class Task:
    id: int
    kind: Kind
    stage: int
    minibatch: int
    pipeline: int
    device: int
    duration: Fraction
    window: int
    preloaded: bool = False

    @property
    def label(self) -> str:
        return f"{self.kind.value}(s{self.stage},m{self.minibatch},p{self.pipeline},d{self.device})"

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "kind": self.kind.value,
            "stage": self.stage,
            "minibatch": self.minibatch,
            "pipeline": self.pipeline,
            "device": self.device,
            "duration": fraction_str(self.duration),
            "window": self.window,
        }
        if self.preloaded:
            out["preloaded"] = True
        return out


@dataclass(frozen=True)
class TaskGraph:
    tasks: Tuple[Task, ...]
    deps: FrozenSet[Tuple[int, int]]
    lanes: Tuple[Tuple[int, ...], ...]
    policy: PolicyConfig
    num_stages: int
    device_map: Tuple[Tuple[int, ...], ...]
    owners: Tuple[int, ...]

    @property
    def fifo_hint(self) -> Dict[int, List[Tuple[int, ...]]]:
        """Per-device release programs: the lanes hosted on each device."""
        out: Dict[int, List[Tuple[int, ...]]] = {}
        for lane in self.lanes:
            if lane:
                out.setdefault(self.tasks[lane[0]].device, []).append(lane)
        return out

    def find(self, kind: Kind, stage: int, minibatch: int) -> Task:
        for task in self.tasks:
            if task.kind is kind and task.stage == stage and task.minibatch == minibatch:
                return task
        raise KeyError((kind, stage, minibatch))

    def compute_index(self) -> Dict[Tuple[Kind, int, int], Task]:
        return {(t.kind, t.stage, t.minibatch): t for t in self.tasks if t.kind.is_compute}

    def causal_edges(self) -> FrozenSet[Tuple[int, int]]:
        """The forward/backward causal edge set implied by the task set."""
        idx = self.compute_index()
        F, B = Kind.FORWARD, Kind.BACKWARD
        edges = set()
        for (kind, i, j), task in idx.items():
            if kind is F:
                edges.add((task.id, idx[(B, i, j)].id))
                if i + 1 < self.num_stages:
                    edges.add((task.id, idx[(F, i + 1, j)].id))
            elif i > 0:
                edges.add((task.id, idx[(B, i - 1, j)].id))
        return frozenset(edges)

    def without_edge(self, edge: Tuple[int, int]) -> "TaskGraph":
        """Copy of the graph with one dependency removed (fault injection)."""
        return TaskGraph(
            tasks=self.tasks,
            deps=self.deps - {edge},
            lanes=self.lanes,
            policy=self.policy,
            num_stages=self.num_stages,
            device_map=self.device_map,
            owners=self.owners,
        )

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.to_dict(),
            "num_stages": self.num_stages,
            "device_map": [list(row) for row in self.device_map],
            "owners": list(self.owners),
            "tasks": [t.to_dict() for t in self.tasks],
            "deps": sorted([a, b] for a, b in self.deps),
            "lanes": [list(lane) for lane in self.lanes],
        }


def map_stage_to_device(pipeline: int, stage: int, depth: int) -> int:
    """Device for ``stage`` of ``pipeline`` under the multi-directional mapping.

    Even pipelines run upward from device ``2j``; odd pipelines run downward
    from device ``(2j + d + 1) mod d``, so consecutive pipelines are
    counter-directed.
    """
    if depth % 2:
        raise ScheduleError("even-depth", f"multi-directional mapping is defined for even depth only (got d={depth})")
    if not 0 <= stage < depth:
        raise ScheduleError("stage-range", f"stage {stage} outside [0, {depth})")
    if not 0 <= pipeline < max(depth // 2, 1):
        raise ScheduleError("pipeline-range", f"pipeline {pipeline} outside [0, {depth // 2})")
    if pipeline % 2 == 0:
        return (2 * pipeline + stage) % depth
    return (2 * pipeline - stage + depth + 1) % depth


def default_num_pipelines(depth: int) -> int:
    if depth < 2 or depth % 2:
        raise ScheduleError(
            "even-depth",
            f"the pipeline-count rule d/2 needs an even depth >= 2 (got d={depth}); "
            "pick an even depth or run a single-direction policy",
        )
    return depth // 2


def active_ratio(injection_limit: int, depth: int) -> Fraction:
    """Fraction of time a single pipeline keeps a device busy."""
    if not 1 <= injection_limit <= depth:
        raise ValueError(f"injection limit must lie in [1, {depth}]")
    return Fraction(injection_limit, depth)


def preload_count(bwd, fwd) -> int:
    """Forwards injected at each segment boundary: floor(T_b / T_f)."""
    bwd, fwd = as_fraction(bwd), as_fraction(fwd)
    if fwd <= 0:
        raise ValueError("forward cost must be positive")
    return math.floor(bwd / fwd)


def lane_program(mbs: Sequence[int], leads: Sequence[int]) -> List[Tuple[Kind, int, int, int]]:
    """Interleave forwards and backwards of one stage.

    ``leads[k]`` is how many forwards (counting x_k itself) must have run
    before the backward of x_k. Returns ``(kind, minibatch, position, k)``
    where ``position`` is the lane index of the minibatch and ``k`` the index
    of the next backward when the op is issued.
    """
    ops: List[Tuple[Kind, int, int, int]] = []
    m = len(mbs)
    issued = 0
    for k in range(m):
        target = min(m, k + max(leads[k], 1))
        while issued < target:
            ops.append((Kind.FORWARD, mbs[issued], issued, k))
            issued += 1
        ops.append((Kind.BACKWARD, mbs[k], k, k))
    return ops


class _Graph:
    def __init__(self, cluster: ClusterSpec, policy: PolicyConfig, num_stages: int,
                 device_map: Sequence[Sequence[int]]):
        self.cluster = cluster
        self.policy = policy
        self.num_stages = num_stages
        self.device_map = tuple(tuple(row) for row in device_map)
        self.tasks: List[Task] = []
        self.deps = set()
        self.lanes: Dict[Tuple[int, int], List[int]] = {}
        self.index: Dict[Tuple[Kind, int, int], int] = {}

    def add(self, kind, stage, minibatch, pipeline, device, duration, window, preloaded=False) -> int:
        tid = len(self.tasks)
        self.tasks.append(Task(tid, kind, stage, minibatch, pipeline, device, duration, window, preloaded))
        if kind.is_compute:
            self.index[(kind, stage, minibatch)] = tid
        return tid

    def dep(self, a: int, b: int) -> None:
        self.deps.add((a, b))

    def lane(self, pipeline: int, stage: int) -> List[int]:
        return self.lanes.setdefault((pipeline, stage), [])

    def fb(self, kind: Kind, stage: int, minibatch: int) -> int:
        return self.index[(kind, stage, minibatch)]

    def add_causal_edges(self) -> None:
        F, B = Kind.FORWARD, Kind.BACKWARD
        for (kind, i, j), tid in list(self.index.items()):
            if kind is F:
                self.dep(tid, self.index[(B, i, j)])
                if i + 1 < self.num_stages:
                    self.dep(tid, self.index[(F, i + 1, j)])
            elif i > 0:
                self.dep(tid, self.index[(B, i - 1, j)])

    def finish(self, owners: Sequence[int]) -> TaskGraph:
        lanes = tuple(tuple(self.lanes[key]) for key in sorted(self.lanes))
        return TaskGraph(
            tasks=tuple(self.tasks),
            deps=frozenset(self.deps),
            lanes=lanes,
            policy=self.policy,
            num_stages=self.num_stages,
            device_map=self.device_map,
            owners=tuple(owners),
        )


def _costs(cluster: ClusterSpec, num_stages: int, chunks: int):
    d = cluster.depth

    def fwd(stage: int) -> Fraction:
        return cluster.fwd_cost[stage % d] / chunks

    def bwd(stage: int) -> Fraction:
        return cluster.bwd_cost[stage % d] / chunks

    return fwd, bwd


def _check(policy: PolicyConfig, cluster: ClusterSpec) -> None:
    from .model import validate_cluster

    problems = validate_cluster(cluster)
    if problems:
        raise ScheduleError("cluster", "; ".join(str(p) for p in problems))
    if policy.num_minibatches < 1:
        raise ScheduleError("num_minibatches", "at least one minibatch is required")
    if policy.accumulation_threshold is not None and policy.accumulation_threshold < 1:
        raise ScheduleError("accumulation_threshold", "threshold must be >= 1")
    if policy.injection_limit is not None and policy.injection_limit < 1:
        raise ScheduleError("injection_limit", "injection limit must be >= 1")


def build(
    policy: PolicyConfig,
    cluster: ClusterSpec,
    *,
    device_map: Optional[Sequence[Sequence[int]]] = None,
    preload: Optional[int] = None,
) -> TaskGraph:
    """Build the task graph of ``policy`` on ``cluster``.

    ``device_map[j][i]`` overrides the device of stage ``i`` in pipeline ``j``
    (used by topology perturbation tests). ``preload`` overrides the AMDP
    preload count, which otherwise is floor(T_b/T_f) of stage 0.
    """
    _check(policy, cluster)
    d = cluster.depth
    if policy.policy is Policy.AMDP:
        if d % 2:
            raise ScheduleError("even-depth", f"AMDP requires an even pipeline depth (got d={d})")
        if (policy.injection_limit not in (None, 2)) and not policy.allow_injection_override:
            raise ScheduleError("injection-limit", "AMDP fixes the injection limit to 2; set allow_injection_override")
    cfg = policy.resolved(d)
    builders = {
        Policy.AMDP: _build_amdp,
        Policy.PIPEDREAM: _build_pipedream,
        Policy.DAPPLE: _build_sync_1f1b,
        Policy.GPIPE: _build_sync_1f1b,
        Policy.CHIMERA: _build_chimera,
        Policy.INTERLEAVED: _build_interleaved,
    }
    kwargs = {}
    if cfg.policy is Policy.AMDP:
        kwargs["preload"] = preload
    return builders[cfg.policy](cfg, cluster, device_map, **kwargs)


def _validate_map(device_map, pipelines: int, num_stages: int, devices: int):
    if len(device_map) != pipelines or any(len(row) != num_stages for row in device_map):
        raise ScheduleError("device-map", f"device map must be {pipelines} x {num_stages}")
    for j, row in enumerate(device_map):
        if any(not 0 <= dev < devices for dev in row):
            raise ScheduleError("device-map", f"pipeline {j} maps a stage outside [0, {devices})")


def _add_window_updates(g: _Graph, windows: Dict[int, List[int]], replicas: Dict[int, List[int]],
                        gate: Callable[[int, int], List[int]], zero: bool,
                        lane_after: Optional[Callable[[int, int], Tuple[int, int]]] = None) -> None:
    """Attach one update per (stage, window).

    ``gate(stage, window)`` lists the compute tasks that must wait for the
    update of ``window`` at ``stage``. ``lane_after`` optionally places an
    Update into a lane (per-backward asynchronous updates).
    """
    cost = g.cluster.update_cost
    for i in range(g.num_stages):
        owner = g.owner(i)
        for w, members in sorted(windows.items()):
            backs = [g.fb(Kind.BACKWARD, i, x) for x in members]
            gated = gate(i, w)
            if zero:
                red = g.add(Kind.REDUCE, i, w, g.owner_pipeline(i), owner, cost, w)
                bc = g.add(Kind.BROADCAST, i, w, g.owner_pipeline(i), owner, Fraction(0), w)
                for b in backs:
                    g.dep(b, red)
                g.dep(red, bc)
                for t in gated:
                    g.dep(bc, t)
                continue
            for dev in replicas[i]:
                pipe = min(j for j, row in enumerate(g.device_map) if row[i] == dev)
                up = g.add(Kind.UPDATE, i, w, pipe, dev, cost, w)
                for b in backs:
                    g.dep(b, up)
                for t in gated:
                    if g.tasks[t].device == dev:
                        g.dep(up, t)
                if lane_after is not None:
                    lane_key, after_tid = lane_after(i, w)
                    lane = g.lanes[lane_key]
                    lane.insert(lane.index(after_tid) + 1, up)


def _replicas(device_map, num_stages) -> Dict[int, List[int]]:
    return {i: sorted({row[i] for row in device_map}) for i in range(num_stages)}


def _windows(mbs: Sequence[int], threshold: int) -> Dict[int, List[int]]:
    out: Dict[int, List[int]] = {}
    for x in mbs:
        out.setdefault(x // threshold, []).append(x)
    return out


def _attach_owner_helpers(g: _Graph) -> None:
    def owner(stage: int) -> int:
        return g.device_map[0][stage]

    def owner_pipeline(stage: int) -> int:
        return 0

    g.owner = owner
    g.owner_pipeline = owner_pipeline


def _add_lane(g: _Graph, pipeline: int, stage: int, mbs, leads, fwd, bwd, threshold, segment=None):
    """Append one stage program. With ``segment`` set, forwards issued ahead of
    the previous segment's last backward are flagged as preloaded."""
    device = g.device_map[pipeline][stage]
    lane = g.lane(pipeline, stage)
    for kind, x, pos, k in lane_program(mbs, leads):
        cost = fwd(stage) if kind is Kind.FORWARD else bwd(stage)
        pre = segment is not None and kind is Kind.FORWARD and pos // segment > k // segment
        lane.append(g.add(kind, stage, x, pipeline, device, cost, x // threshold, preloaded=pre))


def _build_pipedream(cfg: PolicyConfig, cluster: ClusterSpec, device_map) -> TaskGraph:
    d = cluster.depth
    n, thr = cfg.injection_limit, cfg.accumulation_threshold
    if not 1 <= n <= d:
        raise ScheduleError("injection-limit", f"PipeDreamAsync injection limit must lie in [1, {d}]")
    if cfg.num_pipelines != 1:
        raise ScheduleError("num-pipelines", "PipeDreamAsync runs a single pipeline")
    device_map = device_map or [list(range(d))]
    _validate_map(device_map, 1, d, cluster.devices)
    g = _Graph(cluster, cfg, d, device_map)
    _attach_owner_helpers(g)
    fwd, bwd = _costs(cluster, d, 1)
    mbs = list(range(cfg.num_minibatches))
    for i in range(d):
        lead = min(n, d - i)
        _add_lane(g, 0, i, mbs, [lead] * len(mbs), fwd, bwd, thr)
    g.add_causal_edges()
    windows = _windows(mbs, thr)

    def gate(i, w):
        return [g.fb(Kind.BACKWARD, i, x) for x in windows.get(w + 1, [])]

    def lane_after(i, w):
        lane = g.lanes[(0, i)]
        members = set(windows[w])
        last = max((tid for tid in lane if g.tasks[tid].kind is Kind.BACKWARD
                    and g.tasks[tid].minibatch in members), key=lane.index)
        return (0, i), last

    _add_window_updates(g, windows, _replicas(device_map, d), gate, zero=False, lane_after=lane_after)
    return g.finish([device_map[0][i] for i in range(d)])


def _build_sync_1f1b(cfg: PolicyConfig, cluster: ClusterSpec, device_map) -> TaskGraph:
    """DAPPLE (1F1B) and GPipe (all-forward-all-backward) with a flush per window."""
    d = cluster.depth
    thr = cfg.accumulation_threshold
    if cfg.num_pipelines != 1:
        raise ScheduleError("num-pipelines", f"{cfg.policy.value} runs a single pipeline")
    device_map = device_map or [list(range(d))]
    _validate_map(device_map, 1, d, cluster.devices)
    g = _Graph(cluster, cfg, d, device_map)
    _attach_owner_helpers(g)
    fwd, bwd = _costs(cluster, d, 1)
    mbs = list(range(cfg.num_minibatches))
    windows = _windows(mbs, thr)
    for i in range(d):
        leads = []
        for w, members in sorted(windows.items()):
            m = len(members)
            for k in range(m):
                # leads are expressed relative to the whole lane, capped at the window end
                lead = m - k if cfg.policy is Policy.GPIPE else min(d - i, m - k)
                leads.append(lead)
        _add_lane(g, 0, i, mbs, leads, fwd, bwd, thr)
    g.add_causal_edges()

    def gate(i, w):
        return [g.fb(Kind.FORWARD, i, x) for x in windows.get(w + 1, [])]

    _add_window_updates(g, windows, _replicas(device_map, d), gate, zero=cfg.zero_enabled)
    return g.finish([device_map[0][i] for i in range(d)])


def _build_chimera(cfg: PolicyConfig, cluster: ClusterSpec, device_map) -> TaskGraph:
    """Two counter-directed pipelines with a static per-device order.

    The order of each window is produced by greedy list scheduling on the
    window's causal DAG with backward-first priority, then replayed as one
    lane per device.
    """
    d = cluster.depth
    thr = cfg.accumulation_threshold
    if d % 2:
        raise ScheduleError("even-depth", f"Chimera requires an even pipeline depth (got d={d})")
    if cfg.num_pipelines != 2:
        raise ScheduleError("num-pipelines", "Chimera runs exactly two counter-directed pipelines")
    device_map = device_map or [list(range(d)), list(range(d - 1, -1, -1))]
    _validate_map(device_map, 2, d, cluster.devices)
    g = _Graph(cluster, cfg, d, device_map)
    _attach_owner_helpers(g)
    fwd, bwd = _costs(cluster, d, 1)
    mbs = list(range(cfg.num_minibatches))
    windows = _windows(mbs, thr)
    for w, members in sorted(windows.items()):
        order = _greedy_order(members, d, device_map, fwd, bwd, cluster)
        for dev, ops in sorted(order.items()):
            lane = g.lane(dev, -1)
            for kind, i, x in ops:
                cost = fwd(i) if kind is Kind.FORWARD else bwd(i)
                lane.append(g.add(kind, i, x, x % 2, dev, cost, w))
    g.add_causal_edges()

    def gate(i, w):
        return [g.fb(Kind.FORWARD, i, x) for x in windows.get(w + 1, [])]

    _add_window_updates(g, windows, _replicas(device_map, d), gate, zero=cfg.zero_enabled)
    return g.finish([device_map[0][i] for i in range(d)])


def _greedy_order(members, d, device_map, fwd, bwd, cluster) -> Dict[int, List[Tuple[Kind, int, int]]]:
    """Backward-first list schedule of one window; returns per-device op order."""
    F, B = Kind.FORWARD, Kind.BACKWARD
    ops = [(k, i, x) for x in members for i in range(d) for k in (F, B)]
    dev = {op: device_map[op[2] % 2][op[1]] for op in ops}
    dur = {op: fwd(op[1]) if op[0] is F else bwd(op[1]) for op in ops}
    preds: Dict[tuple, List[tuple]] = {op: [] for op in ops}
    for x in members:
        for i in range(d):
            preds[(B, i, x)].append((F, i, x))
            if i + 1 < d:
                preds[(F, i + 1, x)].append((F, i, x))
            if i > 0:
                preds[(B, i - 1, x)].append((B, i, x))
    finish: Dict[tuple, Fraction] = {}
    free = {k: Fraction(0) for k in set(dev.values())}
    order: Dict[int, List[Tuple[Kind, int, int]]] = {k: [] for k in free}
    left = set(ops)
    while left:
        best = None
        for op in left:
            if any(p not in finish for p in preds[op]):
                continue
            ready = max([finish[p] + cluster.gap(dev[p], dev[op]) for p in preds[op]], default=Fraction(0))
            begin = max(ready, free[dev[op]])
            key = (begin, op[0] is F, op[2], op[1], dev[op])
            if best is None or key < best[0]:
                best = (key, op)
        (begin, *_), op = best
        left.discard(op)
        finish[op] = begin + dur[op]
        free[dev[op]] = finish[op]
        order[dev[op]].append(op)
    return order


def _build_interleaved(cfg: PolicyConfig, cluster: ClusterSpec, device_map, chunks: int = 2) -> TaskGraph:
    d = cluster.depth
    thr = cfg.accumulation_threshold
    if cfg.num_pipelines != 1:
        raise ScheduleError("num-pipelines", "Interleaved1F1B runs a single pipeline")
    if thr % d:
        raise ScheduleError("interleaved-window", f"window size {thr} must be a multiple of depth {d}")
    if cfg.num_minibatches % d:
        raise ScheduleError("interleaved-window",
                            f"minibatch count {cfg.num_minibatches} must be a multiple of depth {d}")
    if device_map is not None:
        raise ScheduleError("device-map", "Interleaved1F1B uses the fixed round-robin chunk placement")
    num_stages = chunks * d
    device_map = [[s % d for s in range(num_stages)]]
    g = _Graph(cluster, cfg, num_stages, device_map)
    _attach_owner_helpers(g)
    fwd, bwd = _costs(cluster, num_stages, chunks)
    mbs = list(range(cfg.num_minibatches))
    windows = _windows(mbs, thr)
    for r in range(d):
        lane = g.lane(0, r)
        for w, members in sorted(windows.items()):
            for kind, x, s in _interleaved_order(members, d, r, chunks):
                cost = fwd(s) if kind is Kind.FORWARD else bwd(s)
                lane.append(g.add(kind, s, x, 0, r, cost, w))
    g.add_causal_edges()

    def gate(i, w):
        return [g.fb(Kind.FORWARD, i, x) for x in windows.get(w + 1, [])]

    _add_window_updates(g, windows, _replicas(device_map, num_stages), gate, zero=cfg.zero_enabled)
    return g.finish([device_map[0][s] for s in range(num_stages)])


def _interleaved_order(members: Sequence[int], d: int, rank: int, chunks: int):
    """Per-device operation order of the interleaved 1F1B schedule."""
    total = len(members) * chunks
    group = d * chunks

    def chunk_of(k: int, forward: bool) -> int:
        c = (k % group) // d
        return c if forward else chunks - 1 - c

    def mb_of(k: int) -> int:
        return members[(k // group) * d + k % d]

    warmup = min((d - rank - 1) * 2 + (chunks - 1) * d, total)
    ops = []

    def fw(k):
        c = chunk_of(k, True)
        ops.append((Kind.FORWARD, mb_of(k), c * d + rank))

    def bw(k):
        c = chunk_of(k, False)
        ops.append((Kind.BACKWARD, mb_of(k), c * d + rank))

    for k in range(warmup):
        fw(k)
    for k in range(total - warmup):
        fw(warmup + k)
        bw(k)
    for k in range(total - warmup, total):
        bw(k)
    return ops


def _build_amdp(cfg: PolicyConfig, cluster: ClusterSpec, device_map, preload: Optional[int] = None) -> TaskGraph:
    d = cluster.depth
    n, thr, pipes = cfg.injection_limit, cfg.accumulation_threshold, cfg.num_pipelines
    if pipes is None or pipes < 1:
        raise ScheduleError("num-pipelines", "AMDP needs at least one pipeline")
    if device_map is None:
        if pipes > d // 2:
            raise ScheduleError("num-pipelines", f"at most d/2 = {d // 2} pipelines have a defined mapping")
        device_map = [[map_stage_to_device(j, i, d) for i in range(d)] for j in range(pipes)]
    _validate_map(device_map, pipes, d, cluster.devices)
    if preload is None:
        preload = preload_count(cluster.bwd_cost[0], cluster.fwd_cost[0])
    g = _Graph(cluster, cfg, d, device_map)
    _attach_owner_helpers(g)
    fwd, bwd = _costs(cluster, d, 1)
    mbs = list(range(cfg.num_minibatches))
    seg = max(n, 1)
    windows = _windows(mbs, thr)
    leading = min(n * pipes, thr)
    allowed = set()
    for w, members in windows.items():
        allowed.update((w, x) for x in members)
        allowed.update((w, x) for x in windows.get(w + 1, [])[:leading])
    for j in range(pipes):
        mine = [x for x in mbs if x % pipes == j]
        leads = amdp_leads(len(mine), n, d, preload)
        # never issue a forward that the window gate below holds back
        for k, x in enumerate(mine):
            reach = k + 1
            while reach < len(mine) and (x // thr, mine[reach]) in allowed:
                reach += 1
            leads[k] = min(leads[k], reach - k)
        # stage 0 fixes the injection pattern; downstream stages follow FIFO
        _add_lane(g, j, 0, mine, leads, fwd, bwd, thr, segment=seg)
        for i in range(1, d):
            dev = device_map[j][i]
            for x in mine:
                g.add(Kind.FORWARD, i, x, j, dev, fwd(i), x // thr)
                g.add(Kind.BACKWARD, i, x, j, dev, bwd(i), x // thr)
    g.add_causal_edges()

    def gate(i, w):
        gated = [g.fb(Kind.BACKWARD, i, x) for x in windows.get(w + 1, [])]
        gated += [g.fb(Kind.FORWARD, i, x) for x in windows.get(w + 1, [])[leading:]]
        gated += [g.fb(Kind.FORWARD, i, x) for x in windows.get(w + 2, [])]
        return gated

    _add_window_updates(g, windows, _replicas(device_map, d), gate, zero=cfg.zero_enabled)
    return g.finish([device_map[0][i] for i in range(d)])


def amdp_leads(count: int, n: int, depth: int, preload: int) -> List[int]:
    """Forwards in flight before each backward of an AMDP stage-0 lane.

    The first segment reads ``n`` minibatches. From the first segment boundary
    on, ``preload`` forwards of the next segment are issued ahead of the
    boundary backward, and the lane keeps that depth (1F1B afterwards).
    """
    first = min(n, depth)
    steady = n - 1 + max(preload, 1)
    return [first if k < n - 1 else steady for k in range(count)]
