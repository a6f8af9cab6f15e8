"""Critical context/data sharing protocol run by the CDS after a threat.

A round walks Alarmed -> Patching -> Revalidating -> Resolved, where the
resolution is either a re-registration of the repaired device or its
elimination. Rounds time out into elimination so every round terminates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .context import Route, generation_seed, new_counter
from .detection import Source, Verdict, mutual_exclusion_check
from .roles import CDS, RegistryEntry, Report, Trust, device_name

ROUND_PERIODS = 4


class MessageKind(enum.Enum):
    CONTEXT_SHARE = "ContextShare"
    DIGEST_REPORT = "DigestReport"
    PERIOD_START = "PeriodStart"
    ALARM = "Alarm"
    PATCH_DISPATCH = "PatchDispatch"
    TRUST_REVALIDATE = "TrustRevalidate"
    TRUST_ACK = "TrustAck"
    RE_REGISTER = "ReRegister"
    ELIMINATE = "Eliminate"


DEFAULT_SIZES = {
    "ContextShare": 64, "DigestReport": 24, "PeriodStart": 16, "Alarm": 32,
    "PatchDispatch": 128, "TrustRevalidate": 16, "TrustAck": 24,
    "ReRegister": 64, "Eliminate": 16,
}


class ProtocolError(RuntimeError):
    pass


@dataclass
class ProtocolMessage:
    kind: MessageKind
    src: str
    dst: str
    device_id: int
    payload_bytes: int
    sent_at: int
    body: object = field(default=None, compare=False, repr=False)


def make_message(kind: MessageKind, src: str, dst: str, device_id: int, header_bytes: int,
                 sent_at: int, sizes=None, body=None) -> ProtocolMessage:
    sizes = DEFAULT_SIZES if sizes is None else sizes
    return ProtocolMessage(kind, src, dst, device_id, header_bytes + sizes[kind.value],
                           sent_at, body)


class RoundState(enum.Enum):
    ALARMED = "Alarmed"
    PATCHING = "Patching"
    REVALIDATING = "Revalidating"
    RE_REGISTERED = "Resolved(ReRegistered)"
    ELIMINATED = "Resolved(Eliminated)"

    @property
    def resolved(self) -> bool:
        return self in (RoundState.RE_REGISTERED, RoundState.ELIMINATED)


_ORDER = list(RoundState)


@dataclass
class ProtocolRound:
    device_id: int
    opened_at: int
    deadline: int
    verdict: Verdict
    state: RoundState = RoundState.ALARMED
    transcript: list = field(default_factory=list)
    expected_acks: set = field(default_factory=set)
    acks: dict = field(default_factory=dict)
    revalidation_tick: int | None = None
    resolved_at: int | None = None

    def advance(self, new: RoundState):
        if self.state.resolved:
            raise ProtocolError(f"round for {self.device_id:#x} already {self.state.value}")
        if _ORDER.index(new) <= _ORDER.index(self.state) and not new.resolved:
            raise ProtocolError(f"cannot move from {self.state.value} to {new.value}")
        self.state = new

    def record_ack(self, report: Report):
        if self.state is not RoundState.REVALIDATING:
            raise ProtocolError("acks are only accepted while revalidating")
        self.acks[report.source] = report

    @property
    def acks_complete(self) -> bool:
        return self.expected_acks <= set(self.acks)


def transcript_ok(rnd: ProtocolRound) -> bool:
    """Alarm* -> PatchDispatch -> TrustRevalidate* -> (ReRegister | Eliminate).

    A round that timed out before patching or revalidation may skip the
    later phases but must still end with Eliminate.
    """
    kinds = [m.kind for m in rnd.transcript]
    i = 0
    while i < len(kinds) and kinds[i] is MessageKind.ALARM:
        i += 1
    if i < len(kinds) and kinds[i] is MessageKind.PATCH_DISPATCH:
        i += 1
        while i < len(kinds) and kinds[i] is MessageKind.TRUST_REVALIDATE:
            i += 1
    rest = kinds[i:]
    if rnd.state is RoundState.RE_REGISTERED:
        return rest == [MessageKind.RE_REGISTER] and MessageKind.PATCH_DISPATCH in kinds
    if rnd.state is RoundState.ELIMINATED:
        return rest == [MessageKind.ELIMINATE]
    return rest == []


def _msg(cds: CDS, kind, dst, device_id, now, body=None):
    e = cds.registry[device_id]
    return make_message(kind, cds.name, dst, device_id, e.header_bytes, now,
                        cds.sizes or DEFAULT_SIZES, body)


def _open_round(cds: CDS, device_id: int) -> ProtocolRound:
    rnd = cds.rounds.get(device_id)
    if rnd is None:
        raise ProtocolError(f"no open round for device {device_id:#x}")
    return rnd


def raise_alarm(cds: CDS, device_id: int, verdict: Verdict, now: int) -> list:
    entry = cds.registry.get(device_id)
    if entry is None or entry.trust is not Trust.SUSPECT:
        raise ProtocolError(f"device {device_id:#x} is not Suspect")
    if not verdict.threat:
        raise ProtocolError("alarms need a threat verdict")
    if device_id in cds.rounds:
        raise ProtocolError(f"round already open for device {device_id:#x}")
    rnd = ProtocolRound(device_id, now, now + ROUND_PERIODS * cds.period_ms, verdict)
    cds.rounds[device_id] = rnd
    out = []
    # fixed fan-out order: threat info to SDS, trust info to HGW, device info to LDS
    if entry.route is Route.VIA_SDS and entry.diag is not None:
        out.append(_msg(cds, MessageKind.ALARM, entry.diag, device_id, now, "threat"))
    if entry.route is Route.VIA_LDS:
        if entry.gateway is not None:
            out.append(_msg(cds, MessageKind.ALARM, entry.gateway, device_id, now, "trust"))
        if entry.diag is not None:
            out.append(_msg(cds, MessageKind.ALARM, entry.diag, device_id, now, "device"))
    rnd.transcript.extend(out)
    return out


def dispatch_patch(cds: CDS, device_id: int, now: int, vuln_id: str = "zero-day"):
    rnd = _open_round(cds, device_id)
    if rnd.state is not RoundState.ALARMED:
        raise ProtocolError(f"patch dispatch needs Alarmed, round is {rnd.state.value}")
    msg = _msg(cds, MessageKind.PATCH_DISPATCH, device_name(device_id), device_id, now, vuln_id)
    rnd.transcript.append(msg)
    rnd.advance(RoundState.PATCHING)
    return msg


def revalidate_trust(cds: CDS, rnd: ProtocolRound, now: int, tick: int) -> list:
    """Ask each diagnosis subordinate on the route for fresh context.

    Without a subordinate (centralized mode or a DirectCDS device) the
    request goes to the device, which answers with a full context share.
    """
    if rnd.state is not RoundState.PATCHING:
        raise ProtocolError(f"revalidation needs Patching, round is {rnd.state.value}")
    entry = cds.registry[rnd.device_id]
    if entry.diag is not None:
        dst = entry.diag
        rnd.expected_acks = {cds.nodes[dst].source}
    else:
        dst = device_name(rnd.device_id)
        rnd.expected_acks = {Source.DEVICE}
    rnd.revalidation_tick = tick
    msg = _msg(cds, MessageKind.TRUST_REVALIDATE, dst, rnd.device_id, now, tick)
    rnd.transcript.append(msg)
    rnd.advance(RoundState.REVALIDATING)
    return [msg]


def resolve(cds: CDS, rnd: ProtocolRound, fresh_reports, now: int, base_tick: int | None = None):
    """Re-register the device if its fresh context matches, otherwise eliminate it.

    Returns ``(round, [message])``. ``base_tick`` is the first period at
    which the re-seeded counter is in force.
    """
    entry = cds.registry.get(rnd.device_id)
    if entry is None or entry.trust is Trust.ELIMINATED or rnd.state.resolved:
        raise ProtocolError(f"device {rnd.device_id:#x} cannot be resolved again")
    if rnd.state is not RoundState.REVALIDATING:
        raise ProtocolError(f"resolve needs Revalidating, round is {rnd.state.value}")
    _, expected = cds.expected_counter(rnd.device_id, rnd.revalidation_tick)
    pairs = [(r.source, r.graph) for r in fresh_reports]
    verdict = mutual_exclusion_check(entry.graph, pairs, expected, required=rnd.expected_acks)
    if verdict.threat:
        return rnd, [_eliminate(cds, rnd, now)]
    if base_tick is None:
        base_tick = now // cds.period_ms + 1
    gen = entry.generation + 1
    entry.previous = (entry.generation, entry.base_tick)
    entry.generation, entry.base_tick = gen, base_tick
    fresh = new_counter(generation_seed(cds.seed, gen), rnd.device_id)
    entry.graph = entry.graph.with_counter(fresh)
    entry.firmware = entry.firmware.patched("zero-day")
    entry.trust = Trust.TRUSTED
    entry.last_epoch = 0
    if entry.diag is not None:
        node = cds.nodes[entry.diag]
        node.install(rnd.device_id, RegistryEntry(
            entry.graph, entry.firmware, entry.route, entry.header_bytes, entry.gateway, entry.diag))
    msg = _msg(cds, MessageKind.RE_REGISTER, device_name(rnd.device_id), rnd.device_id, now,
               (gen, base_tick))
    rnd.transcript.append(msg)
    _close(cds, rnd, RoundState.RE_REGISTERED, now)
    return rnd, [msg]


def expire(cds: CDS, rnd: ProtocolRound, now: int) -> list:
    """Deadline reached without resolution: eliminate."""
    if rnd.state.resolved:
        return []
    return [_eliminate(cds, rnd, now)]


def _eliminate(cds: CDS, rnd: ProtocolRound, now: int):
    entry = cds.registry[rnd.device_id]
    dst = entry.diag or entry.gateway or device_name(rnd.device_id)
    msg = _msg(cds, MessageKind.ELIMINATE, dst, rnd.device_id, now)
    entry.trust = Trust.ELIMINATED
    if entry.diag is not None:
        cds.nodes[entry.diag].remove(rnd.device_id)
    rnd.transcript.append(msg)
    _close(cds, rnd, RoundState.ELIMINATED, now)
    return msg


def _close(cds: CDS, rnd: ProtocolRound, state: RoundState, now: int):
    rnd.advance(state)
    rnd.resolved_at = now
    cds.rounds.pop(rnd.device_id, None)
    cds.closed_rounds.append(rnd)
