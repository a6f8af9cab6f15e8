"""Per-entity state machines: devices, diagnosis nodes (LDS/SDS) and the CDS."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .config import Mode
from .context import (
    ContextField,
    ContextRecord,
    CounterSchedule,
    FirmwareVersion,
    Route,
    UpdateCounter,
    generation_seed,
    tamper_record,
)
from .detection import (
    ContextGraph,
    Source,
    Verdict,
    build_graph,
    mutual_exclusion_check,
)


class Role(enum.Enum):
    CDS = "CDS"
    LDS = "LDS"
    SDS = "SDS"
    HGW = "HGW"
    AP = "AP"
    DEVICE = "Device"


class Trust(enum.Enum):
    TRUSTED = "Trusted"
    SUSPECT = "Suspect"
    ELIMINATED = "Eliminated"


class RegistrationError(Exception):
    pass


class UnknownDeviceError(KeyError):
    pass


def device_name(device_id: int) -> str:
    return f"dev:{device_id:016x}"


@dataclass
class RegistryEntry:
    graph: ContextGraph
    firmware: FirmwareVersion
    route: Route
    header_bytes: int
    gateway: str | None = None
    diag: str | None = None
    last_epoch: int = 0
    trust: Trust = Trust.TRUSTED
    generation: int = 0
    base_tick: int = 0
    previous: tuple | None = None  # (generation, base_tick) in force before base_tick


@dataclass
class Report:
    """One observer's view of a device for one epoch."""
    source: Source
    device_id: int
    epoch: int
    graph: ContextGraph | None

    @property
    def missing(self) -> bool:
        return self.graph is None


# ---------------------------------------------------------------------------
# Device
# ---------------------------------------------------------------------------

@dataclass
class DeviceState:
    record: ContextRecord  # as registered, counter at epoch 0
    seed: int
    firmware: FirmwareVersion = field(default_factory=FirmwareVersion)
    compromised: bool = False
    malicious: bool = False
    tamper_profile: frozenset | None = None
    frozen_counter: UpdateCounter | None = None
    generation: int = 0
    base_tick: int = 0
    pending_generation: tuple | None = None  # (generation, base_tick) not yet in force
    eliminated: bool = False

    def __post_init__(self):
        self._schedule = CounterSchedule(generation_seed(self.seed, self.generation),
                                         self.device_id)
        self._check()

    def _check(self):
        if not self.compromised and self.tamper_profile is not None:
            raise ValueError("an uncompromised device cannot carry a tamper profile")

    @property
    def device_id(self) -> int:
        return self.record.device_id

    @property
    def name(self) -> str:
        return device_name(self.device_id)

    def epoch_at(self, tick: int) -> int:
        self._roll_generation(tick)
        return tick - self.base_tick

    def counter(self, epoch: int) -> UpdateCounter:
        return self._schedule.at(epoch)

    def compromise(self, profile, epoch: int, malicious: bool = False):
        self.compromised = True
        self.malicious = malicious
        self.tamper_profile = frozenset(profile)
        self.frozen_counter = self.counter(epoch)

    def apply_patch(self, vuln_id: str, effective: bool) -> bool:
        """Install a patch. Returns True if the exploit was removed."""
        if self.malicious or not effective:
            return False
        self.firmware = self.firmware.patched(vuln_id)
        self.compromised = False
        self.tamper_profile = None
        self.frozen_counter = None
        return True

    def reregister(self, generation: int, base_tick: int):
        self.pending_generation = (generation, base_tick)

    def _roll_generation(self, tick: int):
        if self.pending_generation and tick >= self.pending_generation[1]:
            self.generation, self.base_tick = self.pending_generation
            self.pending_generation = None
            self._schedule = CounterSchedule(generation_seed(self.seed, self.generation),
                                             self.device_id)

    def emit_context(self, epoch: int) -> ContextRecord:
        return device_emit_context(self, epoch)


def device_emit_context(dev: DeviceState, epoch: int) -> ContextRecord:
    honest = dev.record.with_counter(dev.counter(epoch))
    if not dev.compromised or not dev.tamper_profile:
        return honest
    return tamper_record(honest, dev.tamper_profile, dev.seed, dev.frozen_counter)


# ---------------------------------------------------------------------------
# Diagnosis roles
# ---------------------------------------------------------------------------

class RoleState:
    def __init__(self, role: Role, entity_id: int, name: str):
        self.role = role
        self.entity_id = entity_id
        self.name = name
        self.registry: dict[int, RegistryEntry] = {}
        self.pending_reports: dict[tuple, list] = {}
        self.messages_received = 0

    def __repr__(self):
        return f"<{self.role.value} {self.name} devices={len(self.registry)}>"


class Forwarder(RoleState):
    """HGW or AP: relays traffic, holds no diagnosis logic."""

    def __init__(self, role: Role, entity_id: int, name: str):
        if role not in (Role.HGW, Role.AP):
            raise ValueError(role)
        super().__init__(role, entity_id, name)
        self.bytes_forwarded = 0


class DiagnosisNode(RoleState):
    """LDS (behind a home gateway) or SDS (behind an access point)."""

    def __init__(self, role: Role, entity_id: int, name: str, stages: int):
        if role not in (Role.LDS, Role.SDS):
            raise ValueError(role)
        super().__init__(role, entity_id, name)
        self.stages = stages
        self.expected: dict[int, tuple[int, int]] = {}  # device -> (epoch, counter value)
        self.graphs: dict[int, ContextGraph] = {}       # latest locally built graph

    @property
    def source(self) -> Source:
        return Source.LDS if self.role is Role.LDS else Source.SDS

    def install(self, device_id: int, entry: RegistryEntry):
        self.registry[device_id] = entry

    def remove(self, device_id: int):
        self.registry.pop(device_id, None)
        self.graphs.pop(device_id, None)
        self.expected.pop(device_id, None)

    def period_start(self, device_id: int, epoch: int, counter_value: int):
        self.expected[device_id] = (epoch, counter_value)

    def local_diagnose(self, record: ContextRecord, device_id: int, epoch: int):
        """Build the graph locally; return ``(graph, report)`` for the CDS.

        A device this node does not manage yields ``graph=None`` and a report
        the CDS treats as missing.
        """
        if device_id not in self.registry:
            return None, Report(self.source, device_id, epoch, None)
        graph = build_graph(record, self.stages, device_id=device_id)
        self.graphs[device_id] = graph
        return graph, Report(self.source, device_id, epoch, graph)


def local_diagnose(node: DiagnosisNode, record: ContextRecord, device_id: int, epoch: int):
    return node.local_diagnose(record, device_id, epoch)


ROUTE_SOURCE = {Route.VIA_LDS: Source.LDS, Route.VIA_SDS: Source.SDS, Route.DIRECT_CDS: Source.DEVICE}


class CDS(RoleState):
    def __init__(self, seed: int, stages: int, mode: Mode, period_ms: int = 2000,
                 sizes: dict | None = None, entity_id: int = 0, name: str = "cds"):
        super().__init__(Role.CDS, entity_id, name)
        if mode is Mode.BOTH:
            raise ValueError("a CDS runs in exactly one mode")
        self.seed = seed
        self.stages = stages
        self.mode = mode
        self.period_ms = period_ms
        self.sizes = sizes  # message body sizes by kind name; None = defaults
        self.nodes: dict[str, DiagnosisNode] = {}
        self.rounds: dict[int, object] = {}     # device -> open ProtocolRound
        self.closed_rounds: list = []
        self._schedules: dict[tuple, CounterSchedule] = {}

    def add_node(self, node: DiagnosisNode):
        self.nodes[node.name] = node

    def required_sources(self, device_id: int) -> set:
        if self.mode is Mode.CENTRALIZED:
            return {Source.DEVICE}
        return {ROUTE_SOURCE[self.registry[device_id].route]}

    def expected_counter(self, device_id: int, tick: int) -> tuple[int, UpdateCounter]:
        """``(epoch, counter)`` the device must report at period ``tick``."""
        e = self.registry[device_id]
        gen, base = e.generation, e.base_tick
        if e.previous is not None and tick < e.base_tick:
            gen, base = e.previous
        key = (device_id, gen)
        sched = self._schedules.get(key)
        if sched is None:
            sched = self._schedules[key] = CounterSchedule(
                generation_seed(self.seed, gen), device_id)
        epoch = tick - base
        return epoch, sched.at(epoch)

    def register_device(self, record: ContextRecord, stages: int | None = None, now: int = 0,
                        gateway: str | None = None, diag: str | None = None,
                        via_reregister: bool = False) -> RegistryEntry:
        did = record.device_id
        old = self.registry.get(did)
        if old is not None:
            if old.trust is Trust.ELIMINATED:
                raise RegistrationError(f"device {did:#x} was eliminated")
            if not via_reregister:
                raise RegistrationError(f"device {did:#x} is already registered")
        elif via_reregister:
            raise RegistrationError(f"device {did:#x} was never registered")
        if record.signature.issued_at > now:
            raise RegistrationError("signature issued after registration time")
        if diag is not None and diag not in self.nodes:
            raise RegistrationError(f"unknown diagnosis node {diag!r}")
        stages = self.stages if stages is None else stages
        entry = RegistryEntry(
            graph=build_graph(record, stages),
            firmware=FirmwareVersion(),
            route=record.route,
            header_bytes=record.header_bytes,
            gateway=gateway,
            diag=diag,
        )
        self.registry[did] = entry
        if diag is not None:
            self.nodes[diag].install(did, RegistryEntry(
                entry.graph, entry.firmware, entry.route, entry.header_bytes, gateway, diag))
        return entry

    def accepts(self, device_id: int) -> bool:
        e = self.registry.get(device_id)
        return e is not None and e.trust is not Trust.ELIMINATED

    def decide(self, device_id: int, reports, tick: int) -> Verdict:
        return cds_decide(self, device_id, reports, tick)


def cds_decide(cds: CDS, device_id: int, reports, tick: int) -> Verdict:
    """Apply the matching rule for one device and period, updating trust.

    A Threat on a Trusted device moves it to Suspect; the caller opens the
    protocol round. Verdicts on a device already under a round leave trust
    unchanged.
    """
    entry = cds.registry.get(device_id)
    if entry is None or entry.trust is Trust.ELIMINATED:
        raise UnknownDeviceError(device_id)
    epoch, expected = cds.expected_counter(device_id, tick)
    pairs = [(r.source, r.graph) for r in reports]
    verdict = mutual_exclusion_check(entry.graph, pairs, expected,
                                     required=cds.required_sources(device_id))
    if verdict.threat:
        if entry.trust is Trust.TRUSTED:
            entry.trust = Trust.SUSPECT
    elif entry.trust is Trust.TRUSTED:
        entry.last_epoch = epoch
    return verdict
