"""Reference implementations used only by the tests.

They share no code with the package: a time-stepped brute-force scheduler,
a literal ring all-reduce, and plain-float optimizer recursions.
"""

from fractions import Fraction
from typing import Dict, List, Tuple

import numpy as np


def brute_force_schedule(graph, cluster) -> Dict[int, Tuple[Fraction, Fraction]]:
    """(start, release) per task id, by scanning instants in increasing order.

    Same dispatch rule as the engine: an idle device starts the released task
    with the smallest (release, window, minibatch, kind order, pipeline, stage, id);
    zero-duration tasks complete the moment they are released.
    """
    tasks = graph.tasks
    preds: Dict[int, List[Tuple[int, bool]]] = {t.id: [] for t in tasks}
    for a, b in graph.deps:
        preds[b].append((a, True))
    for lane in graph.lanes:
        for a, b in zip(lane, lane[1:]):
            preds[b].append((a, False))
    start: Dict[int, Fraction] = {}
    finish: Dict[int, Fraction] = {}
    release: Dict[int, Fraction] = {}
    busy: Dict[int, Fraction] = {}

    def ready_time(tid):
        best = Fraction(0)
        for p, is_dep in preds[tid]:
            if p not in finish:
                return None
            when = finish[p]
            if is_dep:
                when += cluster.gap(tasks[p].device, tasks[tid].device)
            best = max(best, when)
        return best

    now = Fraction(0)
    while len(start) < len(tasks):
        changed = True
        while changed:
            changed = False
            for t in tasks:
                if t.id in start or t.duration != 0:
                    continue
                r = ready_time(t.id)
                if r is not None and r <= now:
                    start[t.id] = release[t.id] = r
                    finish[t.id] = r
                    changed = True
        for dev in sorted({t.device for t in tasks}):
            if busy.get(dev, Fraction(-1)) > now:
                continue
            cands = []
            for t in tasks:
                if t.device != dev or t.id in start or t.duration == 0:
                    continue
                r = ready_time(t.id)
                if r is not None and r <= now:
                    cands.append(((r, t.window, t.minibatch, t.kind.order, t.pipeline, t.stage, t.id), t, r))
            if cands:
                _, t, r = min(cands, key=lambda c: c[0])
                start[t.id], release[t.id] = now, r
                finish[t.id] = now + t.duration
                busy[dev] = finish[t.id]
        future = [f for f in finish.values() if f > now]
        for t in tasks:
            if t.id not in start:
                r = ready_time(t.id)
                if r is not None and r > now:
                    future.append(r)
        if len(start) == len(tasks):
            break
        if not future:
            raise RuntimeError("brute-force scheduler stalled")
        now = min(future)
    return {tid: (start[tid], release[tid]) for tid in start}


def ring_allreduce(vectors: List[np.ndarray]) -> Tuple[List[np.ndarray], List[int], List[int]]:
    """Literal ring reduce-scatter then all-gather.

    Returns the final vectors and the elements sent per device in each phase.
    """
    p = len(vectors)
    n = len(vectors[0])
    chunks = np.array_split(np.arange(n), p)
    data = [v.astype(float).copy() for v in vectors]
    sent_rs = [0] * p
    for step in range(p - 1):
        msgs = []
        for dev in range(p):
            c = (dev - step) % p
            msgs.append(((dev + 1) % p, c, data[dev][chunks[c]].copy()))
            sent_rs[dev] += len(chunks[c])
        for dst, c, payload in msgs:
            data[dst][chunks[c]] += payload
    sent_ag = [0] * p
    for step in range(p - 1):
        msgs = []
        for dev in range(p):
            c = (dev + 1 - step) % p
            msgs.append(((dev + 1) % p, c, data[dev][chunks[c]].copy()))
            sent_ag[dev] += len(chunks[c])
        for dst, c, payload in msgs:
            data[dst][chunks[c]] = payload
    return data, sent_rs, sent_ag


def scalar_quadratic_trace(theta0: float, eta: float, steps: int, delayed: bool) -> List[float]:
    """theta_{t+1} = theta_t - eta * theta_{t - tau}, tau = 1 for t >= 1 when delayed."""
    th = [theta0]
    for t in range(steps):
        src = th[t - 1] if delayed and t >= 1 else th[t]
        th.append(th[t] - eta * src)
    return th


def sgd_trace(grad, theta0, eta, noise, delayed: bool) -> List[List[float]]:
    """Plain-list SGD with optional one-step gradient delay; noise[t] is a list."""
    th = [list(theta0)]
    for t in range(len(noise)):
        src = th[t - 1] if delayed and t >= 1 else th[t]
        g = grad(src)
        th.append([x - eta * (gi + xi) for x, gi, xi in zip(th[t], g, noise[t])])
    return th


def adam_trace(grads: List[List[float]], beta1, beta2, eps, c_min, c_max):
    """Plain-float momentum and clipped preconditioner recursions."""
    p = len(grads[0])
    m, v = [0.0] * p, [0.0] * p
    ms, ps = [], []
    for g in grads:
        m = [beta1 * a + (1 - beta1) * b for a, b in zip(m, g)]
        v = [beta2 * a + (1 - beta2) * b * b for a, b in zip(v, g)]
        ps.append([min(max(1.0 / (a ** 0.5 + eps), c_min), c_max) for a in v])
        ms.append(list(m))
    return ms, ps
