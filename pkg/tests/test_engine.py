import random
from fractions import Fraction

import pytest

from oracles import brute_force_schedule
from pipesched import (ClusterSpec, CycleDetected, Deadlock, Kind, Policy, PolicyConfig, TaskGraph, build,
                       bubble_ratio, simulate, steady_state_bubble_ratio, validate_causality, validate_timeline)
from pipesched.builder import Task


def _hand_graph(durations, deps, lanes=(), device=0):
    tasks = tuple(Task(id=i, kind=k, stage=0, minibatch=mb, pipeline=0, device=device, duration=Fraction(dur),
                       window=0) for i, (k, mb, dur) in enumerate(durations))
    return TaskGraph(tasks=tasks, deps=frozenset(deps), lanes=tuple(tuple(l) for l in lanes),
                     policy=PolicyConfig(Policy.GPIPE, 3), num_stages=1, device_map=((device,),), owners=(device,))


def test_single_stage_serial_sum():
    F, B, U = Kind.FORWARD, Kind.BACKWARD, Kind.UPDATE
    spec = [(F, 0, 1), (B, 0, 2), (F, 1, 1), (B, 1, 2), (F, 2, 1), (B, 2, 2), (U, 2, 0)]
    deps = {(0, 1), (2, 3), (4, 5), (1, 6), (3, 6), (5, 6)}
    c = ClusterSpec(depth=1, devices=1, fwd_cost=(Fraction(1),), bwd_cost=(Fraction(2),))
    t = simulate(_hand_graph(spec, deps), c)
    assert t.makespan == 9
    assert bubble_ratio(t) == 0


def test_dapple_makespan_and_bubble():
    c = ClusterSpec.uniform(4, 1, 2)
    t = simulate(build(PolicyConfig(Policy.DAPPLE, 4, injection_limit=4), c), c)
    assert t.makespan == 21
    assert bubble_ratio(t) == Fraction(3, 7)


@pytest.mark.parametrize("d", [2, 4, 8])
@pytest.mark.parametrize("mult", [1, 2, 3, 4])
@pytest.mark.parametrize("bwd", [1, 2])
def test_dapple_matches_closed_form(d, mult, bwd):
    n = d * mult
    c = ClusterSpec.uniform(d, 1, bwd)
    t = simulate(build(PolicyConfig(Policy.DAPPLE, n, accumulation_threshold=n), c), c)
    assert bubble_ratio(t) == Fraction(d - 1, n + d - 1)


@pytest.mark.parametrize("d", [2, 4, 8])
@pytest.mark.parametrize("mult", [1, 2, 4])
def test_chimera_matches_closed_form(d, mult):
    n = d * mult
    c = ClusterSpec.uniform(d, 1, 1)
    t = simulate(build(PolicyConfig(Policy.CHIMERA, n, accumulation_threshold=n), c), c)
    assert bubble_ratio(t) == Fraction(d - 2, 2 * n + d - 2)


def test_amdp_gpu2_defers_the_later_backward():
    c = ClusterSpec.uniform(4, 1, 2)
    t = simulate(build(PolicyConfig(Policy.AMDP, 8), c), c)
    bwd = [e for e in t.by_device()[2] if e.kind is Kind.BACKWARD]
    first, second = bwd[1], bwd[2]
    assert (first.stage, first.minibatch, second.stage, second.minibatch) == (1, 1, 2, 2)
    assert first.release < second.release < first.end
    assert second.start == first.end


def test_pipedream_steady_state_is_bubble_free():
    c = ClusterSpec.uniform(8, 1, 2)
    t = simulate(build(PolicyConfig(Policy.PIPEDREAM, 128, accumulation_threshold=8), c), c)
    assert steady_state_bubble_ratio(t) == 0


def test_empty_span_is_an_error():
    c = ClusterSpec.uniform(4, 1, 2)
    t = simulate(build(PolicyConfig(Policy.DAPPLE, 4), c), c)
    with pytest.raises(ValueError):
        bubble_ratio(t, warmup_windows=1)


def test_cycle_is_reported_with_witness():
    F, B = Kind.FORWARD, Kind.BACKWARD
    g = _hand_graph([(F, 0, 1), (B, 0, 2)], {(0, 1), (1, 0)})
    c = ClusterSpec.uniform(1, 1, 2)
    with pytest.raises(CycleDetected) as err:
        simulate(g, c)
    assert len(err.value.witness) >= 2


def test_starvation_is_a_deadlock():
    F, B = Kind.FORWARD, Kind.BACKWARD
    g = _hand_graph([(F, 0, 1), (B, 0, 2)], {(0, 1)}, lanes=[(1, 0)])
    with pytest.raises(Deadlock) as err:
        simulate(g, ClusterSpec.uniform(1, 1, 2), check_cycles=False)
    assert len(err.value.blocked) == 2


def _random_case(rng):
    policy = rng.choice([Policy.AMDP, Policy.DAPPLE, Policy.GPIPE, Policy.CHIMERA, Policy.PIPEDREAM])
    d = rng.choice([2, 4]) if policy in (Policy.AMDP, Policy.CHIMERA) else rng.choice([2, 3, 4])
    fwd = [Fraction(rng.randint(1, 4), rng.choice([1, 2])) for _ in range(d)]
    bwd = [Fraction(rng.randint(1, 6), rng.choice([1, 2])) for _ in range(d)]
    c = ClusterSpec(depth=d, devices=d, fwd_cost=tuple(fwd), bwd_cost=tuple(bwd),
                    update_cost=Fraction(rng.randint(0, 1)), comm_cost=Fraction(rng.randint(0, 2), 2))
    m = rng.randint(1, 3) * d
    return build(PolicyConfig(policy, m), c), c


@pytest.mark.parametrize("seed", range(25))
def test_engine_agrees_with_brute_force(seed):
    g, c = _random_case(random.Random(seed))
    t = simulate(g, c)
    want = brute_force_schedule(g, c)
    got = {}
    lookup = {(e.kind, e.stage, e.minibatch, e.pipeline, e.device, e.window): e for e in t.events}
    for task in g.tasks:
        e = lookup[(task.kind, task.stage, task.minibatch, task.pipeline, task.device, task.window)]
        got[task.id] = (e.start, e.release)
    assert got == want


@pytest.mark.parametrize("seed", range(10))
def test_work_conservation_and_validity(seed):
    g, c = _random_case(random.Random(100 + seed))
    t = simulate(g, c)
    assert validate_causality(t) == [] and validate_timeline(t) == []
    for dev, evs in t.by_device().items():
        busy = [(e.start, e.end) for e in evs if e.duration > 0]
        for e in evs:
            if e.duration == 0 or e.start == e.release:
                continue
            # the device must be busy over the whole wait [release, start)
            cursor = e.release
            for lo, hi in sorted(busy):
                if lo <= cursor < hi:
                    cursor = hi
            assert cursor >= e.start


def test_simulation_is_deterministic():
    c = ClusterSpec.uniform(8, 1, 2, comm_cost=Fraction(1, 3))
    g = build(PolicyConfig(Policy.AMDP, 64, accumulation_threshold=16), c)
    assert simulate(g, c) == simulate(g, c)
