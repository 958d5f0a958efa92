import json

import pytest
from hypothesis import given, settings, strategies as st

from pipesched import (ClusterSpec, Kind, Policy, PolicyConfig, ScheduleError, active_ratio, build,
                       default_num_pipelines, map_stage_to_device, preload_count, simulate)
from pipesched.builder import amdp_leads, lane_program


def test_pipeline_zero_traverses_devices_in_order():
    assert [map_stage_to_device(0, i, 8) for i in range(8)] == list(range(8))


def test_pipeline_one_runs_in_reverse():
    assert [map_stage_to_device(1, i, 8) for i in range(8)] == [3, 2, 1, 0, 7, 6, 5, 4]
    assert map_stage_to_device(1, 0, 8) == 3 and map_stage_to_device(1, 4, 8) == 7


def test_minimal_depth_is_identity():
    assert [map_stage_to_device(0, k, 2) for k in (0, 1)] == [0, 1]


def test_mapping_rejects_odd_depth_and_ranges():
    with pytest.raises(ScheduleError) as err:
        map_stage_to_device(0, 0, 5)
    assert err.value.rule == "even-depth"
    with pytest.raises(ScheduleError):
        map_stage_to_device(4, 0, 8)
    with pytest.raises(ScheduleError):
        map_stage_to_device(0, 8, 8)


@settings(max_examples=50, deadline=None)
@given(half=st.integers(1, 16), data=st.data())
def test_mapping_is_a_bijection_and_counter_directed(half, data):
    d = 2 * half
    j = data.draw(st.integers(0, half - 1))
    devs = [map_stage_to_device(j, i, d) for i in range(d)]
    assert sorted(devs) == list(range(d))
    step = 1 if j % 2 == 0 else -1
    assert all((devs[i + 1] - devs[i]) % d == step % d for i in range(d - 1))
    if j + 1 < half:
        nxt = [map_stage_to_device(j + 1, i, d) for i in range(d)]
        other = -step
        assert all((nxt[i + 1] - nxt[i]) % d == other % d for i in range(d - 1))


def test_default_num_pipelines():
    assert [default_num_pipelines(d) for d in (8, 4, 2)] == [4, 2, 1]
    with pytest.raises(ScheduleError):
        default_num_pipelines(5)


def test_active_ratio():
    assert active_ratio(2, 8) == active_ratio(1, 4) == pytest.approx(0.25)
    assert active_ratio(6, 6) == 1
    with pytest.raises(ValueError):
        active_ratio(0, 4)


def test_preload_count():
    assert preload_count(2, 1) == 2
    assert preload_count(1, 1) == 1
    assert preload_count(3, 2) == 1


def test_lane_program_plain_1f1b():
    ops = lane_program([0, 1, 2, 3], [2, 2, 2, 2])
    text = [f"{k.value[0]}{x}" for k, x, _, _ in ops]
    assert text == ["F0", "F1", "B0", "F2", "B1", "F3", "B2", "B3"]


def test_amdp_leads_switch_to_preload_after_first_segment():
    assert amdp_leads(5, 2, 4, 2) == [2, 3, 3, 3, 3]
    assert amdp_leads(3, 2, 4, 1) == [2, 2, 2]


def _stage0_order(graph, timeline, pipeline):
    evs = [e for e in timeline.events
           if e.stage == 0 and e.pipeline == pipeline and e.kind.is_compute]
    return sorted(evs, key=lambda e: e.start)


def test_amdp_preloads_four_and_six_before_window_zero_finishes():
    cluster = ClusterSpec.uniform(4, 1, 2)
    g = build(PolicyConfig(Policy.AMDP, 7), cluster)
    preloaded = sorted(t.minibatch for t in g.tasks if t.preloaded and t.stage == 0 and t.pipeline == 0)
    assert preloaded == [4, 6]
    t = simulate(g, cluster)
    ev = t.compute_events()
    last_b0 = max(e.end for e in t.events if e.kind is Kind.BACKWARD and e.window == 0 and e.stage == 0)
    assert ev[(Kind.FORWARD, 0, 4)].start < last_b0
    assert ev[(Kind.FORWARD, 0, 6)].start < last_b0
    # the preloaded backwards belong to the next window and run after the boundary
    assert ev[(Kind.BACKWARD, 0, 4)].start >= last_b0


def test_pipedream_reads_n_minibatches_before_first_backward():
    cluster = ClusterSpec.uniform(4, 1, 2)
    g = build(PolicyConfig(Policy.PIPEDREAM, 12, injection_limit=4), cluster)
    t = simulate(g, cluster)
    order = _stage0_order(g, t, 0)
    first_b = next(k for k, e in enumerate(order) if e.kind is Kind.BACKWARD)
    assert first_b == 4


def test_amdp_at_depth_two_is_plain_1f1b():
    cluster = ClusterSpec.uniform(2, 1, 1)
    g = build(PolicyConfig(Policy.AMDP, 6), cluster)
    assert len(g.device_map) == 1 and g.policy.injection_limit == 2
    t = simulate(g, cluster)
    order = [f"{e.kind.value[0]}{e.minibatch}" for e in _stage0_order(g, t, 0)]
    assert order[:4] == ["F0", "F1", "B0", "F2"]


def test_odd_depth_amdp_is_rejected_with_rule():
    with pytest.raises(ScheduleError) as err:
        build(PolicyConfig(Policy.AMDP, 8), ClusterSpec.uniform(5, 1, 2))
    assert err.value.rule == "even-depth"


def test_amdp_injection_override_requires_flag():
    with pytest.raises(ScheduleError) as err:
        build(PolicyConfig(Policy.AMDP, 8, injection_limit=3), ClusterSpec.uniform(4, 1, 2))
    assert err.value.rule == "injection-limit"


def test_interleaved_needs_whole_windows():
    with pytest.raises(ScheduleError) as err:
        build(PolicyConfig(Policy.INTERLEAVED, 6), ClusterSpec.uniform(4, 1, 2))
    assert err.value.rule == "interleaved-window"


CONFIGS = [
    (Policy.AMDP, 4, {}),
    (Policy.AMDP, 8, {"accumulation_threshold": 16}),
    (Policy.AMDP, 6, {"zero_enabled": True}),
    (Policy.DAPPLE, 4, {"injection_limit": 4}),
    (Policy.GPIPE, 3, {"injection_limit": 6}),
    (Policy.CHIMERA, 4, {}),
    (Policy.INTERLEAVED, 4, {}),
    (Policy.PIPEDREAM, 5, {}),
]


@pytest.mark.parametrize("policy,d,extra", CONFIGS)
def test_forward_backward_deps_equal_causal_edges(policy, d, extra):
    cluster = ClusterSpec.uniform(d, 1, 2)
    g = build(PolicyConfig(policy, 4 * d, **extra), cluster)
    fb = {(a, b) for a, b in g.deps if g.tasks[a].kind.is_compute and g.tasks[b].kind.is_compute}
    assert fb == set(g.causal_edges())
    assert len(g.compute_index()) == 2 * g.num_stages * 4 * d


@pytest.mark.parametrize("d,bwd,thr_mult", [(4, 1, 1), (4, 2, 2), (8, 2, 1), (8, 1, 4), (6, 2, 2), (8, 3, 2)])
def test_amdp_stage0_never_runs_three_forwards_back_to_back(d, bwd, thr_mult):
    cluster = ClusterSpec.uniform(d, 1, bwd)
    g = build(PolicyConfig(Policy.AMDP, 6 * d * thr_mult, accumulation_threshold=d * thr_mult), cluster)
    t = simulate(g, cluster)
    for j in range(len(g.device_map)):
        run = {}
        for e in _stage0_order(g, t, j):
            if e.kind is Kind.FORWARD:
                run[e.window] = run.get(e.window, 0) + 1
                assert run[e.window] <= 2, (j, e.minibatch)
            else:
                run = {}


def test_round_robin_pipeline_assignment():
    g = build(PolicyConfig(Policy.AMDP, 16), ClusterSpec.uniform(8, 1, 2))
    for task in g.tasks:
        if task.kind.is_compute:
            assert task.pipeline == task.minibatch % 4


def test_graph_json_is_stable():
    cluster = ClusterSpec.uniform(4, 1, 2)
    a = json.dumps(build(PolicyConfig(Policy.AMDP, 8), cluster).to_dict(), sort_keys=True)
    b = json.dumps(build(PolicyConfig(Policy.AMDP, 8), cluster).to_dict(), sort_keys=True)
    assert a == b
    data = json.loads(a)
    assert {"policy", "tasks", "deps", "lanes", "device_map", "owners", "num_stages"} <= set(data)
