"""Domain types shared by the builder, the event engine and the analyzers.

All times are exact :class:`fractions.Fraction` values so that makespans and
bubble ratios compare bit-exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

Number = Union[int, Fraction, str]


def as_fraction(value: Number) -> Fraction:
    """Coerce an int, Fraction or ``"num/den"`` string to a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not time values")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        # floats are accepted only when they are exactly representable
        # short decimals; everything else must be given as "num/den"
        return Fraction(str(value))
    raise TypeError(f"cannot interpret {value!r} as a rational time value")


def fraction_str(value: Fraction) -> str:
    """Serialize a Fraction as an integer string or ``"num/den"``."""
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


class Policy(str, enum.Enum):
    AMDP = "AMDP"
    DAPPLE = "DAPPLE"
    GPIPE = "GPipe"
    INTERLEAVED = "Interleaved1F1B"
    CHIMERA = "Chimera"
    PIPEDREAM = "PipeDreamAsync"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        for member in cls:
            if member.value.lower() == name.lower() or member.name.lower() == name.lower():
                return member
        raise ValueError(f"unknown policy {name!r}; expected one of {[m.value for m in cls]}")

    @property
    def synchronous(self) -> bool:
        return self in (Policy.DAPPLE, Policy.GPIPE, Policy.INTERLEAVED, Policy.CHIMERA)


class Kind(str, enum.Enum):
    FORWARD = "Forward"
    BACKWARD = "Backward"
    REDUCE = "Reduce"
    BROADCAST = "Broadcast"
    UPDATE = "Update"

    @property
    def order(self) -> int:
        return _KIND_ORDER[self]

    @property
    def is_compute(self) -> bool:
        return self in (Kind.FORWARD, Kind.BACKWARD)


_KIND_ORDER = {
    Kind.FORWARD: 0,
    Kind.BACKWARD: 1,
    Kind.REDUCE: 2,
    Kind.BROADCAST: 3,
    Kind.UPDATE: 4,
}


@dataclass(frozen=True)
class ClusterSpec:
    """Pipeline depth, device count and per-stage costs.

    ``inter_node_comm_cost`` is used between devices in different groups of
    ``nodes``; it defaults to ``comm_cost``.
    """

    depth: int
    devices: int
    fwd_cost: Tuple[Fraction, ...]
    bwd_cost: Tuple[Fraction, ...]
    update_cost: Fraction = Fraction(0)
    comm_cost: Fraction = Fraction(0)
    nodes: Optional[Tuple[Tuple[int, ...], ...]] = None
    inter_node_comm_cost: Optional[Fraction] = None

    @classmethod
    def uniform(
        cls,
        depth: int,
        fwd: Number = 1,
        bwd: Number = 2,
        *,
        devices: Optional[int] = None,
        update_cost: Number = 0,
        comm_cost: Number = 0,
        nodes: Optional[Sequence[Sequence[int]]] = None,
        inter_node_comm_cost: Optional[Number] = None,
    ) -> "ClusterSpec":
        f, b = as_fraction(fwd), as_fraction(bwd)
        return cls(
            depth=depth,
            devices=depth if devices is None else devices,
            fwd_cost=tuple(f for _ in range(max(depth, 0))),
            bwd_cost=tuple(b for _ in range(max(depth, 0))),
            update_cost=as_fraction(update_cost),
            comm_cost=as_fraction(comm_cost),
            nodes=None if nodes is None else tuple(tuple(g) for g in nodes),
            inter_node_comm_cost=None if inter_node_comm_cost is None else as_fraction(inter_node_comm_cost),
        )

    def node_of(self, device: int) -> int:
        if self.nodes is None:
            return 0
        for idx, group in enumerate(self.nodes):
            if device in group:
                return idx
        raise ValueError(f"device {device} is not in any node group")

    def gap(self, src_device: int, dst_device: int) -> Fraction:
        """Transfer latency between two dependent events."""
        if src_device == dst_device:
            return Fraction(0)
        if self.nodes is not None and self.inter_node_comm_cost is not None:
            if self.node_of(src_device) != self.node_of(dst_device):
                return self.inter_node_comm_cost
        return self.comm_cost

    def to_dict(self) -> dict:
        out = {
            "depth": self.depth,
            "devices": self.devices,
            "fwd_cost": {str(i): fraction_str(c) for i, c in enumerate(self.fwd_cost)},
            "bwd_cost": {str(i): fraction_str(c) for i, c in enumerate(self.bwd_cost)},
            "update_cost": fraction_str(self.update_cost),
            "comm_cost": fraction_str(self.comm_cost),
            "nodes": None if self.nodes is None else [list(g) for g in self.nodes],
        }
        if self.inter_node_comm_cost is not None:
            out["inter_node_comm_cost"] = fraction_str(self.inter_node_comm_cost)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ClusterSpec":
        depth = int(data["depth"])
        devices = int(data.get("devices", depth))

        def _costs(raw, default) -> Tuple[Fraction, ...]:
            if raw is None:
                return tuple(as_fraction(default) for _ in range(depth))
            if isinstance(raw, Mapping):
                return tuple(as_fraction(raw[str(i)]) for i in range(depth))
            if isinstance(raw, (list, tuple)):
                return tuple(as_fraction(c) for c in raw)
            # a scalar applies to every stage
            return tuple(as_fraction(raw) for _ in range(depth))

        nodes = data.get("nodes")
        inter = data.get("inter_node_comm_cost")
        return cls(
            depth=depth,
            devices=devices,
            fwd_cost=_costs(data.get("fwd_cost"), 1),
            bwd_cost=_costs(data.get("bwd_cost"), 2),
            update_cost=as_fraction(data.get("update_cost", 0)),
            comm_cost=as_fraction(data.get("comm_cost", 0)),
            nodes=None if nodes is None else tuple(tuple(int(d) for d in g) for g in nodes),
            inter_node_comm_cost=None if inter is None else as_fraction(inter),
        )


@dataclass(frozen=True)
class PolicyConfig:
    policy: Policy
    num_minibatches: int
    injection_limit: Optional[int] = None
    num_pipelines: Optional[int] = None
    accumulation_threshold: Optional[int] = None
    zero_enabled: bool = False
    allow_injection_override: bool = False

    def resolved(self, depth: int) -> "PolicyConfig":
        """Fill unset fields with the per-policy defaults for ``depth``."""
        policy = self.policy
        n = self.injection_limit
        pipes = self.num_pipelines
        thr = self.accumulation_threshold
        if policy is Policy.AMDP:
            if n is None or not self.allow_injection_override:
                n = 2
            if pipes is None:
                pipes = depth // 2 if depth % 2 == 0 else None
            if thr is None:
                thr = depth
        elif policy is Policy.PIPEDREAM:
            n = depth if n is None else n
            pipes = 1 if pipes is None else pipes
            thr = 1 if thr is None else thr
        elif policy is Policy.CHIMERA:
            pipes = 2 if pipes is None else pipes
            thr = depth if thr is None else thr
            n = thr if n is None else n
        else:
            pipes = 1 if pipes is None else pipes
            thr = depth if thr is None else thr
            n = thr if n is None else n
        return PolicyConfig(
            policy=policy,
            num_minibatches=self.num_minibatches,
            injection_limit=n,
            num_pipelines=pipes,
            accumulation_threshold=thr,
            zero_enabled=self.zero_enabled,
            allow_injection_override=self.allow_injection_override,
        )

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "injection_limit": self.injection_limit,
            "num_pipelines": self.num_pipelines,
            "accumulation_threshold": self.accumulation_threshold,
            "num_minibatches": self.num_minibatches,
            "zero_enabled": self.zero_enabled,
            "allow_injection_override": self.allow_injection_override,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PolicyConfig":
        def _opt(key):
            value = data.get(key)
            return None if value is None else int(value)

        return cls(
            policy=Policy.parse(data["policy"]),
            num_minibatches=int(data["num_minibatches"]),
            injection_limit=_opt("injection_limit"),
            num_pipelines=_opt("num_pipelines"),
            accumulation_threshold=_opt("accumulation_threshold"),
            zero_enabled=bool(data.get("zero_enabled", False)),
            allow_injection_override=bool(data.get("allow_injection_override", False)),
        )


@dataclass(frozen=True)
class TaskEvent:
    """One executed unit of work on one device.

    For Update/Reduce/Broadcast events ``minibatch`` carries the window index.
    """

    kind: Kind
    stage: int
    minibatch: int
    pipeline: int
    device: int
    start: Fraction
    duration: Fraction
    window: int = 0
    release: Optional[Fraction] = None
    preloaded: bool = False

    @property
    def end(self) -> Fraction:
        return self.start + self.duration

    def to_dict(self) -> dict:
        out = {
            "device": self.device,
            "kind": self.kind.value,
            "stage": self.stage,
            "minibatch": self.minibatch,
            "pipeline": self.pipeline,
            "start": fraction_str(self.start),
            "duration": fraction_str(self.duration),
            "window": self.window,
        }
        if self.release is not None:
            out["release"] = fraction_str(self.release)
        if self.preloaded:
            out["preloaded"] = True
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TaskEvent":
        release = data.get("release")
        return cls(
            kind=Kind(data["kind"]),
            stage=int(data["stage"]),
            minibatch=int(data["minibatch"]),
            pipeline=int(data["pipeline"]),
            device=int(data["device"]),
            start=as_fraction(data["start"]),
            duration=as_fraction(data["duration"]),
            window=int(data.get("window", 0)),
            release=None if release is None else as_fraction(release),
            preloaded=bool(data.get("preloaded", False)),
        )


CSV_COLUMNS = ("device", "kind", "stage", "minibatch", "pipeline", "start", "duration")


@dataclass(frozen=True)
class Timeline:
    """Executed schedule: events sorted by (device, start)."""

    events: Tuple[TaskEvent, ...]
    makespan: Fraction
    cluster: ClusterSpec
    num_stages: int
    policy: Optional[PolicyConfig] = None

    def by_device(self) -> Dict[int, List[TaskEvent]]:
        out: Dict[int, List[TaskEvent]] = {d: [] for d in range(self.cluster.devices)}
        for ev in self.events:
            out.setdefault(ev.device, []).append(ev)
        return out

    def compute_events(self) -> Dict[Tuple[Kind, int, int], TaskEvent]:
        """Forward/Backward events keyed by (kind, stage, minibatch)."""
        return {(ev.kind, ev.stage, ev.minibatch): ev for ev in self.events if ev.kind.is_compute}

    def to_dict(self) -> dict:
        return {
            "makespan": fraction_str(self.makespan),
            "num_stages": self.num_stages,
            "cluster": self.cluster.to_dict(),
            "policy": None if self.policy is None else self.policy.to_dict(),
            "events": [ev.to_dict() for ev in self.events],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Timeline":
        policy = data.get("policy")
        return cls(
            events=tuple(TaskEvent.from_dict(e) for e in data["events"]),
            makespan=as_fraction(data["makespan"]),
            cluster=ClusterSpec.from_dict(data["cluster"]),
            num_stages=int(data["num_stages"]),
            policy=None if policy is None else PolicyConfig.from_dict(policy),
        )

    def csv_rows(self) -> List[List[str]]:
        rows = [list(CSV_COLUMNS)]
        for ev in self.events:
            rows.append([
                str(ev.device),
                ev.kind.value,
                str(ev.stage),
                str(ev.minibatch),
                str(ev.pipeline),
                fraction_str(ev.start),
                fraction_str(ev.duration),
            ])
        return rows


@dataclass(frozen=True)
class MismatchReport:
    entries: Dict[Tuple[int, int], int]
    max_per_stage: Dict[int, int]
    flagged: Tuple[Tuple[int, int], ...] = ()

    @property
    def max_mismatch(self) -> int:
        return max(self.max_per_stage.values(), default=0)


@dataclass(frozen=True)
class MemoryModel:
    weight_per_stage: Fraction = Fraction(1)
    activation_per_stage_per_minibatch: Fraction = Fraction(1)
    optimizer_state_multiplier: Fraction = Fraction(2)
    gradient_multiplier: Fraction = Fraction(1)

    def __post_init__(self):
        for name in ("weight_per_stage", "activation_per_stage_per_minibatch",
                     "optimizer_state_multiplier", "gradient_multiplier"):
            value = getattr(self, name)
            if not isinstance(value, Fraction):
                object.__setattr__(self, name, as_fraction(value))
            if getattr(self, name) <= 0:
                raise ValueError(f"MemoryModel.{name} must be positive")


@dataclass(frozen=True)
class Violation:
    """A broken invariant. ``field`` names the offending field or constraint."""

    field: str
    message: str
    pair: Optional[Tuple[str, str]] = None

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


def validate_cluster(spec: ClusterSpec) -> List[Violation]:
    violations: List[Violation] = []
    if spec.depth < 2:
        violations.append(Violation("depth", f"depth >= 2 required, got {spec.depth}"))
    if spec.devices < 1:
        violations.append(Violation("devices", f"devices must be positive, got {spec.devices}"))
    elif spec.depth >= 2 and spec.devices < spec.depth:
        violations.append(Violation("devices", f"devices ({spec.devices}) must cover depth ({spec.depth})"))
    if len(spec.fwd_cost) != spec.depth:
        violations.append(Violation("fwd_cost", f"expected {spec.depth} entries, got {len(spec.fwd_cost)}"))
    if len(spec.bwd_cost) != spec.depth:
        violations.append(Violation("bwd_cost", f"expected {spec.depth} entries, got {len(spec.bwd_cost)}"))
    for i, c in enumerate(spec.fwd_cost):
        if c <= 0:
            violations.append(Violation("fwd_cost", f"fwd_cost({i}) must be strictly positive, got {c}"))
    for i, c in enumerate(spec.bwd_cost):
        if c <= 0:
            violations.append(Violation("bwd_cost", f"bwd_cost({i}) must be strictly positive, got {c}"))
    if spec.update_cost < 0:
        violations.append(Violation("update_cost", "update_cost must be nonnegative"))
    if spec.comm_cost < 0:
        violations.append(Violation("comm_cost", "comm_cost must be nonnegative"))
    if spec.inter_node_comm_cost is not None and spec.inter_node_comm_cost < 0:
        violations.append(Violation("inter_node_comm_cost", "inter_node_comm_cost must be nonnegative"))
    if spec.nodes is not None:
        seen = sorted(d for g in spec.nodes for d in g)
        if seen != list(range(spec.devices)):
            violations.append(Violation("nodes", "node groups must partition the device set"))
    return violations


def _label(kind: Kind, stage: int, minibatch: int) -> str:
    return f"{kind.value}({stage},{minibatch})"


def causal_pairs(t: Timeline):
    """Yield every (pred, succ) pair of compute events the causal order requires."""
    ev = t.compute_events()
    F, B = Kind.FORWARD, Kind.BACKWARD
    for (kind, i, j), a in sorted(ev.items(), key=lambda kv: (kv[0][2], kv[0][1], kv[0][0].order)):
        if kind is F:
            nxt = ev.get((F, i + 1, j)) if i + 1 < t.num_stages else None
            if nxt is not None:
                yield a, nxt
            back = ev.get((B, i, j))
            if back is not None:
                yield a, back
        elif i > 0:
            prev = ev.get((B, i - 1, j))
            if prev is not None:
                yield a, prev


def validate_causality(t: Timeline) -> List[Violation]:
    """Check the forward->backward, forward-chain and backward-chain orderings.

    A dependent event on another device must additionally wait for the
    transfer latency between the two devices.
    """
    violations = []
    for a, b in causal_pairs(t):
        earliest = a.end + t.cluster.gap(a.device, b.device)
        if b.start < earliest:
            pa = _label(a.kind, a.stage, a.minibatch)
            pb = _label(b.kind, b.stage, b.minibatch)
            violations.append(Violation(
                "causality",
                f"{pb} starts at {fraction_str(b.start)} before {pa} is available at {fraction_str(earliest)}",
                pair=(pa, pb),
            ))
    return violations


def validate_timeline(t: Timeline) -> List[Violation]:
    """Per-device ordering and non-overlap; duration and start sanity.

    Zero-duration barrier events occupy no device time, so they may sit
    inside another event's interval.
    """
    violations = []
    for device, events in t.by_device().items():
        prev = None
        busy_end = None
        busy_ev = None
        for ev in events:
            if ev.start < 0:
                violations.append(Violation("start", f"negative start on device {device}"))
            if ev.kind.is_compute and ev.duration <= 0:
                violations.append(Violation("duration", f"{ev.kind.value} with non-positive duration"))
            if prev is not None and ev.start < prev.start:
                violations.append(Violation("order", f"device {device} events not sorted by start"))
            elif ev.duration > 0:
                if busy_end is not None and ev.start < busy_end:
                    violations.append(Violation(
                        "overlap",
                        f"device {device}: {_label(ev.kind, ev.stage, ev.minibatch)} overlaps "
                        f"{_label(busy_ev.kind, busy_ev.stage, busy_ev.minibatch)}",
                    ))
                if busy_end is None or ev.end > busy_end:
                    busy_end, busy_ev = ev.end, ev
            prev = ev
    return violations
