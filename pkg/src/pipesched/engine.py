"""Deterministic list-scheduling executor.

Each device runs one task at a time. A task is released once all of its
dependencies have finished (plus the transfer latency when a dependency ran
on another device) and its lane predecessor has finished. An idle device
starts the released task with the earliest release time; ties are broken by
(window, minibatch, kind order, pipeline, stage, task id): at equal
release time the earlier-read minibatch goes first.

Time is simulated in integer ticks: every duration and latency is scaled by
the least common multiple of their denominators, which keeps the arithmetic
exact and fast. Results are converted back to Fractions.
"""

from __future__ import annotations

import heapq
import math
from fractions import Fraction
from graphlib import CycleError, TopologicalSorter
from typing import Dict, List, Optional, Sequence

from .builder import Task, TaskGraph
from .model import ClusterSpec, Kind, TaskEvent, Timeline


class CycleDetected(RuntimeError):
    def __init__(self, witness: Sequence[str]):
        super().__init__("dependency cycle: " + " -> ".join(witness))
        self.witness = list(witness)


class Deadlock(RuntimeError):
    def __init__(self, blocked: Sequence[str]):
        shown = ", ".join(blocked[:12])
        more = f" (+{len(blocked) - 12} more)" if len(blocked) > 12 else ""
        super().__init__(f"no progress possible with {len(blocked)} pending tasks: {shown}{more}")
        self.blocked = list(blocked)


def _check_acyclic(graph: TaskGraph) -> None:
    ts = TopologicalSorter()
    for task in graph.tasks:
        ts.add(task.id)
    for a, b in graph.deps:
        ts.add(b, a)
    for lane in graph.lanes:
        for a, b in zip(lane, lane[1:]):
            ts.add(b, a)
    try:
        ts.prepare()
    except CycleError as exc:
        cycle = exc.args[1]
        raise CycleDetected([graph.tasks[t].label for t in cycle]) from None


def _tick_scale(graph: TaskGraph, cluster: ClusterSpec) -> int:
    dens = {t.duration.denominator for t in graph.tasks}
    dens.add(cluster.comm_cost.denominator)
    if cluster.inter_node_comm_cost is not None:
        dens.add(cluster.inter_node_comm_cost.denominator)
    scale = 1
    for den in dens:
        scale = scale * den // math.gcd(scale, den)
    return scale


def simulate(graph: TaskGraph, cluster: ClusterSpec, *, check_cycles: bool = True) -> Timeline:
    """Execute ``graph`` on ``cluster`` and return the resulting timeline."""
    if check_cycles:
        _check_acyclic(graph)
    tasks = graph.tasks
    ntask = len(tasks)
    scale = _tick_scale(graph, cluster)
    dur = [int(t.duration * scale) for t in tasks]

    gap_cache: Dict[tuple, int] = {}

    def gap(a: int, b: int) -> int:
        key = (a, b)
        if key not in gap_cache:
            gap_cache[key] = int(cluster.gap(a, b) * scale)
        return gap_cache[key]

    succs: List[List[int]] = [[] for _ in range(ntask)]
    pending = [0] * ntask
    for a, b in graph.deps:
        succs[a].append(b)
        pending[b] += 1
    lane_next = [-1] * ntask
    for lane in graph.lanes:
        for a, b in zip(lane, lane[1:]):
            lane_next[a] = b
            pending[b] += 1
    for s in succs:
        s.sort()

    ready_at = [0] * ntask
    release = [0] * ntask
    start = [0] * ntask
    seq = [0] * ntask
    dispatched = 0
    queues: Dict[int, list] = {}
    devices = sorted({t.device for t in tasks})
    busy_until = {dev: None for dev in devices}
    finish_heap: list = []
    future: list = []  # (release, device) wake-ups for queued-but-not-yet-released tasks

    def key(tid: int):
        t = tasks[tid]
        return (release[tid], t.window, t.minibatch, t.kind.order, t.pipeline, t.stage, tid)

    instant: list = []  # zero-duration barriers released at their ready time

    def make_ready(tid: int) -> None:
        release[tid] = ready_at[tid]
        if dur[tid] == 0:
            heapq.heappush(instant, (release[tid], tid))
            heapq.heappush(future, (release[tid], -1))
            return
        dev = tasks[tid].device
        heapq.heappush(queues.setdefault(dev, []), key(tid))
        heapq.heappush(future, (release[tid], dev))

    done = 0
    now = 0
    for tid in range(ntask):
        if pending[tid] == 0:
            make_ready(tid)

    def complete(tid: int, at: int) -> None:
        nonlocal done
        done += 1
        dev = tasks[tid].device
        for s in succs[tid]:
            cand = at + gap(dev, tasks[s].device)
            if cand > ready_at[s]:
                ready_at[s] = cand
            pending[s] -= 1
            if pending[s] == 0:
                make_ready(s)
        nxt = lane_next[tid]
        if nxt >= 0:
            if at > ready_at[nxt]:
                ready_at[nxt] = at
            pending[nxt] -= 1
            if pending[nxt] == 0:
                make_ready(nxt)

    while done < ntask:
        progress = True
        while progress:
            progress = False
            while instant and instant[0][0] <= now:
                tid = heapq.heappop(instant)[1]
                start[tid] = now
                seq[tid] = dispatched
                dispatched += 1
                complete(tid, now)
                progress = True
            for dev in devices:
                if busy_until[dev] is not None:
                    continue
                q = queues.get(dev)
                if not q or q[0][0] > now:
                    continue
                tid = heapq.heappop(q)[-1]
                start[tid] = now
                seq[tid] = dispatched
                dispatched += 1
                busy_until[dev] = now + dur[tid]
                heapq.heappush(finish_heap, (now + dur[tid], dev, tid))
        if done >= ntask:
            break
        # next instant: a task finishing or a queued task becoming released
        while future and future[0][0] <= now:
            heapq.heappop(future)
        candidates = []
        if finish_heap:
            candidates.append(finish_heap[0][0])
        if future:
            candidates.append(future[0][0])
        if not candidates:
            blocked = [tasks[t].label for t in range(ntask) if pending[t] > 0]
            raise Deadlock(blocked)
        now = min(candidates)
        while finish_heap and finish_heap[0][0] == now:
            _, dev, tid = heapq.heappop(finish_heap)
            busy_until[dev] = None
            complete(tid, now)

    inv = Fraction(1, scale)
    events = []
    for tid, t in enumerate(tasks):
        events.append(TaskEvent(
            kind=t.kind,
            stage=t.stage,
            minibatch=t.minibatch,
            pipeline=t.pipeline,
            device=t.device,
            start=start[tid] * inv,
            duration=t.duration,
            window=t.window,
            release=release[tid] * inv,
            preloaded=t.preloaded,
        ))
    order = sorted(range(ntask), key=lambda i: (tasks[i].device, start[i], seq[i]))
    events = tuple(events[i] for i in order)
    makespan = max((e.end for e in events), default=Fraction(0))
    return Timeline(events=events, makespan=makespan, cluster=cluster,
                    num_stages=graph.num_stages, policy=graph.policy)


def bubble_ratio(t: Timeline, warmup_windows: int = 0, cooldown_windows: int = 0) -> Fraction:
    """Idle device-time over total device-time in the measured span.

    The span starts at the first event of window ``warmup_windows`` and ends
    at the last backward finish of window ``last - cooldown_windows``.
    Busy time is clipped to the span.
    """
    compute = [e for e in t.events if e.kind.is_compute]
    if not compute:
        raise ValueError("timeline has no compute events")
    windows = sorted({e.window for e in compute})
    lo_idx = warmup_windows
    hi_idx = len(windows) - 1 - cooldown_windows
    if lo_idx > hi_idx:
        raise ValueError("measurement span is empty: not enough windows for the requested warm-up/cool-down")
    lo_w, hi_w = windows[lo_idx], windows[hi_idx]
    span_start = min(e.start for e in compute if e.window == lo_w)
    span_end = max(e.end for e in compute if e.kind is Kind.BACKWARD and e.window == hi_w)
    if span_end <= span_start:
        raise ValueError("measurement span is empty")
    busy = Fraction(0)
    for e in t.events:
        lo = max(e.start, span_start)
        hi = min(e.end, span_end)
        if hi > lo:
            busy += hi - lo
    total = (span_end - span_start) * t.cluster.devices
    return (total - busy) / total


def steady_state_bubble_ratio(t: Timeline) -> Fraction:
    """Bubble ratio excluding warm-up and cool-down.

    Whole windows are dropped at each end, at least one and enough to cover
    ``depth`` minibatches (small windows, as with per-minibatch updates, would
    otherwise leave the pipeline fill inside the measured span).
    """
    first = min(e.window for e in t.events if e.kind.is_compute)
    size = len({e.minibatch for e in t.events if e.kind.is_compute and e.window == first})
    skip = max(1, -(-t.cluster.depth // size))
    return bubble_ratio(t, warmup_windows=skip, cooldown_windows=skip)
