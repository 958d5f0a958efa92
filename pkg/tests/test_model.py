import json
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from pipesched import (ClusterSpec, Kind, MemoryModel, Policy, PolicyConfig, TaskEvent, Timeline,
                       validate_causality, validate_cluster, validate_timeline)
from pipesched.model import as_fraction, fraction_str


def _fields(violations):
    return [v.field for v in violations]


def test_well_formed_cluster_has_no_violations():
    assert validate_cluster(ClusterSpec.uniform(8, 1, 1)) == []


def test_depth_zero_is_rejected():
    assert "depth" in _fields(validate_cluster(ClusterSpec.uniform(0, 1, 1)))


def test_zero_forward_cost_names_the_field():
    c = ClusterSpec.uniform(8, 1, 1)
    fwd = list(c.fwd_cost)
    fwd[3] = Fraction(0)
    bad = ClusterSpec(depth=8, devices=8, fwd_cost=tuple(fwd), bwd_cost=c.bwd_cost)
    problems = validate_cluster(bad)
    assert _fields(problems) == ["fwd_cost"]
    assert "fwd_cost(3)" in problems[0].message


def test_negative_costs_and_bad_nodes():
    c = ClusterSpec(depth=2, devices=2, fwd_cost=(Fraction(1),) * 2, bwd_cost=(Fraction(1), Fraction(-1)),
                    update_cost=Fraction(-1), comm_cost=Fraction(-1), nodes=((0,), (0,)))
    assert set(_fields(validate_cluster(c))) == {"bwd_cost", "update_cost", "comm_cost", "nodes"}


def test_fraction_parsing():
    assert as_fraction("3/2") == Fraction(3, 2)
    assert as_fraction(4) == Fraction(4)
    assert as_fraction(0.5) == Fraction(1, 2)
    assert fraction_str(Fraction(6, 4)) == "3/2"
    assert fraction_str(Fraction(4)) == "4"
    with pytest.raises(TypeError):
        as_fraction(True)


def test_policy_parse_is_case_insensitive():
    assert Policy.parse("amdp") is Policy.AMDP
    assert Policy.parse("PipeDreamAsync") is Policy.PIPEDREAM
    with pytest.raises(ValueError):
        Policy.parse("ZB-V")


def test_amdp_forces_injection_limit_two():
    cfg = PolicyConfig(Policy.AMDP, 8, injection_limit=5).resolved(8)
    assert cfg.injection_limit == 2 and cfg.num_pipelines == 4 and cfg.accumulation_threshold == 8
    over = PolicyConfig(Policy.AMDP, 8, injection_limit=5, allow_injection_override=True).resolved(8)
    assert over.injection_limit == 5


def test_memory_model_rejects_nonpositive():
    with pytest.raises(ValueError):
        MemoryModel(weight_per_stage=0)
    assert MemoryModel(weight_per_stage="1/2").weight_per_stage == Fraction(1, 2)


fractions = st.fractions(min_value=0, max_value=20, max_denominator=12)


@settings(max_examples=60, deadline=None)
@given(depth=st.integers(2, 6), data=st.data())
def test_cluster_json_round_trip(depth, data):
    fwd = tuple(data.draw(fractions.filter(lambda f: f > 0)) for _ in range(depth))
    bwd = tuple(data.draw(fractions.filter(lambda f: f > 0)) for _ in range(depth))
    c = ClusterSpec(depth=depth, devices=depth, fwd_cost=fwd, bwd_cost=bwd,
                    update_cost=data.draw(fractions), comm_cost=data.draw(fractions),
                    nodes=((tuple(range(depth))),), inter_node_comm_cost=data.draw(st.none() | fractions))
    assert ClusterSpec.from_dict(json.loads(json.dumps(c.to_dict()))) == c


@settings(max_examples=40, deadline=None)
@given(policy=st.sampled_from(list(Policy)), m=st.integers(1, 50), n=st.none() | st.integers(1, 8),
       thr=st.none() | st.integers(1, 16), zero=st.booleans())
def test_policy_json_round_trip(policy, m, n, thr, zero):
    cfg = PolicyConfig(policy, m, injection_limit=n, accumulation_threshold=thr, zero_enabled=zero)
    assert PolicyConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def _ev(kind, stage, mb, device, start, dur):
    return TaskEvent(kind=kind, stage=stage, minibatch=mb, pipeline=0, device=device,
                     start=Fraction(start), duration=Fraction(dur))


def _timeline(events, depth=3, comm=0):
    cluster = ClusterSpec.uniform(depth, 1, 2, comm_cost=comm)
    events = tuple(sorted(events, key=lambda e: (e.device, e.start)))
    return Timeline(events=events, makespan=max(e.end for e in events), cluster=cluster, num_stages=depth)


def _valid_chain():
    F, B = Kind.FORWARD, Kind.BACKWARD
    return [_ev(F, 0, 0, 0, 0, 1), _ev(F, 1, 0, 1, 1, 1), _ev(F, 2, 0, 2, 2, 1),
            _ev(B, 2, 0, 2, 3, 2), _ev(B, 1, 0, 1, 5, 2), _ev(B, 0, 0, 0, 7, 2)]


def test_valid_chain_passes_both_validators():
    t = _timeline(_valid_chain())
    assert validate_causality(t) == [] and validate_timeline(t) == []


def test_backward_before_forward_is_one_violation():
    F, B = Kind.FORWARD, Kind.BACKWARD
    t = _timeline([_ev(B, 0, 0, 0, 0, 2), _ev(F, 0, 0, 0, 2, 1)], depth=1 + 1)
    problems = validate_causality(t)
    assert len(problems) == 1 and problems[0].pair == ("Forward(0,0)", "Backward(0,0)")


def test_forward_chain_inversion_is_one_violation():
    F = Kind.FORWARD
    t = _timeline([_ev(F, 1, 5, 1, 0, 1), _ev(F, 2, 5, 2, 0, 1)], depth=3)
    problems = validate_causality(t)
    assert [p.pair for p in problems] == [("Forward(1,5)", "Forward(2,5)")]


def test_comm_gap_is_enforced():
    F = Kind.FORWARD
    tight = _timeline([_ev(F, 0, 0, 0, 0, 1), _ev(F, 1, 0, 1, 1, 1)], depth=2, comm=Fraction(1, 2))
    assert len(validate_causality(tight)) == 1
    loose = _timeline([_ev(F, 0, 0, 0, 0, 1), _ev(F, 1, 0, 1, Fraction(3, 2), 1)], depth=2,
                      comm=Fraction(1, 2))
    assert validate_causality(loose) == []


def test_overlap_detected_but_zero_duration_barrier_allowed():
    F, B = Kind.FORWARD, Kind.BACKWARD
    t = _timeline([_ev(F, 0, 0, 0, 0, 2), _ev(F, 0, 1, 0, 1, 1)], depth=2)
    assert "overlap" in _fields(validate_timeline(t))
    barrier = _ev(Kind.UPDATE, 0, 0, 0, 1, 0)
    t = _timeline([_ev(F, 0, 0, 0, 0, 2), barrier, _ev(B, 0, 0, 0, 2, 2)], depth=2)
    assert validate_timeline(t) == []


def test_timeline_json_round_trip_and_csv_columns():
    t = _timeline(_valid_chain())
    again = Timeline.from_dict(json.loads(json.dumps(t.to_dict())))
    assert again == t
    rows = t.csv_rows()
    assert rows[0] == ["device", "kind", "stage", "minibatch", "pipeline", "start", "duration"]
    assert len(rows) == 1 + len(t.events)
