import xml.etree.ElementTree as ET

from pipesched import ClusterSpec, Policy, PolicyConfig, build, simulate
from pipesched.gantt import render_svg

NS = "{http://www.w3.org/2000/svg}"


def _amdp_timeline():
    c = ClusterSpec.uniform(4, 1, 2)
    return simulate(build(PolicyConfig(Policy.AMDP, 8), c), c)


def test_svg_is_well_formed_with_one_row_per_device():
    t = _amdp_timeline()
    root = ET.fromstring(render_svg(t, title="AMDP d=4 <8 minibatches>"))
    labels = [el.text for el in root.iter(NS + "text") if el.text and el.text.startswith("GPU ")]
    assert labels == [f"GPU {k}" for k in range(4)]


def test_every_compute_event_is_a_box_and_preloads_are_dashed():
    t = _amdp_timeline()
    root = ET.fromstring(render_svg(t))
    boxes = [el for el in root.iter(NS + "rect") if el.find(NS + "title") is not None]
    compute = [e for e in t.events if e.kind.is_compute]
    assert len(boxes) == len(compute)
    dashed = [el for el in boxes if el.get("stroke-dasharray")]
    assert len(dashed) == sum(1 for e in compute if e.preloaded) > 0
    hatched = [el for el in boxes if el.get("fill") == "url(#hatch)"]
    assert len(hatched) == len(compute) // 2


def test_rendering_is_deterministic():
    assert render_svg(_amdp_timeline()) == render_svg(_amdp_timeline())
