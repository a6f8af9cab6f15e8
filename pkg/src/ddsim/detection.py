"""Context graphs, canonical fingerprints and the CDS matching rule."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field

from .context import (
    CONTEXT_FIELDS,
    ContextField,
    ContextRecord,
    UpdateCounter,
    counter_at,
    generation_seed,
)

DEFAULT_STAGES = 4


class StageKind(enum.Enum):
    SENSE = 0
    PROCESS = 1
    ENCODE = 2
    TRANSMIT = 3
    RECEIVE = 4
    ACTUATE = 5


_MIDDLE_STAGES = (StageKind.PROCESS, StageKind.ENCODE, StageKind.RECEIVE, StageKind.ACTUATE)


class Source(enum.Enum):
    DEVICE = "Device"
    LDS = "LDS"
    SDS = "SDS"
    HGW = "HGW"


class Cause(enum.Enum):
    # declaration order is the reporting priority
    COUNTER_MISMATCH = "CounterMismatch"
    SIGNATURE_MISMATCH = "SignatureMismatch"
    TRAFFIC_MISMATCH = "TrafficMismatch"
    HEADER_MISMATCH = "HeaderMismatch"
    MEMORY_MISMATCH = "MemoryMismatch"
    ROUTE_MISMATCH = "RouteMismatch"
    MISSING_REPORT = "MissingReport"


CAUSE_PRIORITY = {c: i for i, c in enumerate(Cause)}

FIELD_CAUSE = {
    ContextField.SG: Cause.SIGNATURE_MISMATCH,
    ContextField.UC: Cause.COUNTER_MISMATCH,
    ContextField.TP: Cause.TRAFFIC_MISMATCH,
    ContextField.HL: Cause.HEADER_MISMATCH,
    ContextField.MR: Cause.MEMORY_MISMATCH,
    ContextField.RT: Cause.ROUTE_MISMATCH,
}


class DeviceMismatchError(ValueError):
    """Reports about different devices were handed to one check."""


@dataclass(frozen=True)
class Verdict:
    threat: bool
    cause: Cause | None = None

    def __post_init__(self):
        if self.threat != (self.cause is not None):
            raise ValueError("a threat verdict needs a cause and vice versa")

    @property
    def kind(self) -> str:
        return "Threat" if self.threat else "Consistent"

    def __str__(self):
        return f"Threat({self.cause.value})" if self.threat else "Consistent"


CONSISTENT = Verdict(False)


def threat(cause: Cause) -> Verdict:
    return Verdict(True, cause)


@dataclass(frozen=True)
class ProcedureStage:
    index: int
    kind: StageKind


@dataclass(frozen=True)
class ContextEdgeLabel:
    field: ContextField
    encoded_value: bytes


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    label: ContextEdgeLabel | None = None

    def sort_key(self):
        if self.label is None:
            return (self.src, self.dst, "", b"")
        return (self.src, self.dst, self.label.field.value, self.label.encoded_value)


def encode_field(record: ContextRecord, fld: ContextField) -> bytes:
    if fld is ContextField.SG:
        return struct.pack(">QQ", record.signature.id, record.signature.issued_at)
    if fld is ContextField.UC:
        return struct.pack(">I", record.counter.value)
    if fld is ContextField.TP:
        return bytes([record.traffic_type.value])
    if fld is ContextField.HL:
        return struct.pack(">I", record.header_length_bits)
    if fld is ContextField.MR:
        return struct.pack(">II", *record.memory_range)
    if fld is ContextField.RT:
        return bytes([record.route.value])
    raise ValueError(fld)


def stage_kinds(stages: int) -> list[StageKind]:
    """Pipeline from sensing to transmission with the middle filled cyclically."""
    mid = [_MIDDLE_STAGES[i % len(_MIDDLE_STAGES)] for i in range(stages - 2)]
    return [StageKind.SENSE, *mid, StageKind.TRANSMIT]


@dataclass(frozen=True)
class ContextGraph:
    device_id: int
    vertices: tuple
    edges: tuple
    fingerprint: bytes = field(default=b"", compare=False)

    def __post_init__(self):
        if len(self.vertices) < 2:
            raise ValueError("a context graph needs at least 2 stages")
        if [v.index for v in self.vertices] != list(range(len(self.vertices))):
            raise ValueError("stage indices must be consecutive from 0")
        labelled = [e.label.field for e in self.edges if e.label is not None]
        if sorted(f.value for f in labelled) != sorted(f.value for f in CONTEXT_FIELDS):
            raise ValueError("each context field must label exactly one edge")
        if not self.fingerprint:
            object.__setattr__(self, "fingerprint", fingerprint(self))

    @property
    def labels(self) -> dict:
        return {e.label.field: e.label.encoded_value for e in self.edges if e.label is not None}

    @property
    def counter_value(self) -> int:
        return struct.unpack(">I", self.labels[ContextField.UC])[0]

    def with_counter(self, counter: UpdateCounter) -> "ContextGraph":
        enc = struct.pack(">I", counter.value)
        edges = tuple(
            Edge(e.src, e.dst, ContextEdgeLabel(ContextField.UC, enc))
            if e.label is not None and e.label.field is ContextField.UC else e
            for e in self.edges
        )
        return ContextGraph(self.device_id, self.vertices, edges)


def build_graph(record: ContextRecord, stages: int = DEFAULT_STAGES,
                device_id: int | None = None) -> ContextGraph:
    """Context graph for ``record``.

    ``device_id`` is the identity the observer attributes the record to
    (the link it arrived on); it defaults to the record's own signature.
    """
    if stages < 2:
        raise ValueError(f"stages must be >= 2, got {stages}")
    vertices = tuple(ProcedureStage(i, k) for i, k in enumerate(stage_kinds(stages)))
    edges = [Edge(i, i + 1) for i in range(stages - 1)]
    for j, fld in enumerate(CONTEXT_FIELDS):
        v = j % stages
        edges.append(Edge(v, v, ContextEdgeLabel(fld, encode_field(record, fld))))
    did = record.device_id if device_id is None else device_id
    return ContextGraph(did, vertices, tuple(edges))


def fingerprint(graph: ContextGraph) -> bytes:
    """128-bit digest over the canonically ordered graph."""
    h = hashlib.blake2b(digest_size=16, person=b"ddsim-graph")
    h.update(struct.pack(">QI", graph.device_id, len(graph.vertices)))
    for v in graph.vertices:
        h.update(struct.pack(">IB", v.index, v.kind.value))
    for e in sorted(graph.edges, key=Edge.sort_key):
        h.update(struct.pack(">II", e.src, e.dst))
        if e.label is None:
            h.update(b"\x00")
        else:
            fb = e.label.field.value.encode()
            h.update(b"\x01" + fb + struct.pack(">I", len(e.label.encoded_value)))
            h.update(e.label.encoded_value)
    return h.digest()


def _report_causes(expected: ContextGraph, graph: ContextGraph, counter_value: int):
    causes = set()
    if graph.counter_value != counter_value:
        causes.add(Cause.COUNTER_MISMATCH)
    if graph.fingerprint != expected.fingerprint:
        want, got = expected.labels, graph.labels
        diff = {FIELD_CAUSE[f] for f in CONTEXT_FIELDS
                if f is not ContextField.UC and want[f] != got[f]}
        if not diff and Cause.COUNTER_MISMATCH not in causes:
            # same labels, different stage structure: not the registered device
            diff.add(Cause.SIGNATURE_MISMATCH)
        causes |= diff
    return causes


def mutual_exclusion_check(stored: ContextGraph, reports, expected_counter: UpdateCounter,
                           required=None) -> Verdict:
    """Match every independent view of a device against the CDS's model.

    ``reports`` is a list of ``(Source, ContextGraph | None)``; a ``None``
    graph marks a source that reported it has nothing for this device.
    ``required`` is the set of sources that must be present; by default
    every source appearing in ``reports``.
    """
    for _, g in reports:
        if g is not None and g.device_id != stored.device_id:
            raise DeviceMismatchError(
                f"report for device {g.device_id:#x} checked against {stored.device_id:#x}")
    expected = stored.with_counter(expected_counter)
    causes = set()
    present = set()
    for src, g in reports:
        if g is None:
            continue
        present.add(src)
        causes |= _report_causes(expected, g, expected_counter.value)
    if required is None:
        required = {src for src, _ in reports}
    if set(required) - present or not present:
        causes.add(Cause.MISSING_REPORT)
    if not causes:
        return CONSISTENT
    return threat(min(causes, key=CAUSE_PRIORITY.__getitem__))


def expected_counter_for(device_id: int, epoch: int, seed: int,
                         generation: int = 0) -> UpdateCounter:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return counter_at(generation_seed(seed, generation), device_id, epoch)
