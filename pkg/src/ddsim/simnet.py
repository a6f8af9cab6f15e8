"""Deterministic discrete-event simulation of the diagnosis fleet.

Events run in ``(time, sequence)`` order; every random choice is drawn at
topology build time from the scenario seed, so a run is a pure function of
its configuration.
"""

from __future__ import annotations

import enum
import heapq
import logging
import random
from dataclasses import dataclass, field

from .config import Mode, ScenarioConfig
from .context import (
    CONTEXT_FIELDS,
    MASK64,
    ContextRecord,
    DeviceSignature,
    Route,
    TrafficType,
    keyed_u64,
    new_counter,
)
from .detection import Source, build_graph
from .metrics import RunMetrics, Transcript, compute_metrics
from .protocol import (
    MessageKind,
    ProtocolMessage,
    RoundState,
    dispatch_patch,
    expire,
    make_message,
    raise_alarm,
    resolve,
    revalidate_trust,
    transcript_ok,
)
from .roles import (
    CDS,
    DeviceState,
    DiagnosisNode,
    Forwarder,
    Report,
    Role,
    Trust,
    cds_decide,
    device_name,
)

log = logging.getLogger(__name__)

REPORT_TIMEOUT_PERIODS = 2
ROUTES = (Route.VIA_LDS, Route.VIA_SDS, Route.DIRECT_CDS)


class InvariantError(AssertionError):
    pass


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackTimeline:
    discovery_at: int
    exploit_at: int
    patch_available_at: int

    def __post_init__(self):
        if not (self.discovery_at <= self.exploit_at and self.discovery_at <= self.patch_available_at):
            raise ValueError(f"inconsistent attack timeline {self}")


@dataclass(frozen=True)
class Attack:
    profile: frozenset
    timeline: AttackTimeline
    malicious: bool = False


@dataclass
class Topology:
    cds: str
    aps: list
    hgws: list
    lds_nodes: list
    sds_nodes: list
    devices: list                      # DeviceState, in build order
    attach: dict                       # device_id -> (gateway, diagnosis node or None)
    links: dict                        # (a, b) -> latency ms, both directions
    attacks: dict = field(default_factory=dict)  # device_id -> Attack
    parent: dict = field(default_factory=dict)

    def route_counts(self) -> dict:
        counts = {r: 0 for r in ROUTES}
        for d in self.devices:
            counts[d.record.route] += 1
        return counts

    def path(self, src: str, dst: str) -> list:
        """Entity sequence from ``src`` to ``dst`` through the gateway tree."""
        up = [src]
        while up[-1] in self.parent:
            up.append(self.parent[up[-1]])
        down = [dst]
        while down[-1] in self.parent:
            down.append(self.parent[down[-1]])
        common = set(up) & set(down)
        i = next(k for k, n in enumerate(up) if n in common)
        j = down.index(up[i])
        return up[:i + 1] + down[:j][::-1]

    def latency(self, src: str, dst: str) -> int:
        p = self.path(src, dst)
        return sum(self.links[(a, b)] for a, b in zip(p, p[1:]))

    def crosses_backhaul(self, src: str, dst: str) -> bool:
        p = self.path(src, dst)
        return any(self.cds in (a, b) for a, b in zip(p, p[1:]))

    def check(self):
        for lat in self.links.values():
            if lat < 0:
                raise InvariantError("negative link latency")
        for d in self.devices:
            gw, diag = self.attach[d.device_id]
            kind = gw.split(":")[0]
            r = d.record.route
            ok = ((r is Route.VIA_LDS and kind == "hgw" and diag and diag.startswith("lds"))
                  or (r is Route.VIA_SDS and kind == "ap" and diag and diag.startswith("sds"))
                  or (r is Route.DIRECT_CDS and kind == "ap" and diag is None))
            if not ok:
                raise InvariantError(f"device {d.name} attached inconsistently with {r}")
            if self.latency(d.name, self.cds) <= 0:
                raise InvariantError(f"device {d.name} has no positive-latency path to the CDS")


def _route_split(n: int, mix, rng: random.Random) -> list:
    counts = [int(n * f) for f in mix]
    leftover = n - sum(counts)
    eligible = [i for i, f in enumerate(mix) if f > 0]
    rng.shuffle(eligible)
    for i in range(leftover):
        counts[eligible[i % len(eligible)]] += 1
    routes = [r for r, c in zip(ROUTES, counts) for _ in range(c)]
    rng.shuffle(routes)
    return routes


def draw_attacks(cfg: ScenarioConfig, devices: list, rng: random.Random) -> dict:
    n_att = round(cfg.attacker_fraction * len(devices))
    if n_att == 0:
        return {}
    chosen = rng.sample(range(len(devices)), n_att)
    n_mal = round(cfg.malicious_share_of_attackers * n_att)
    half = max(cfg.duration_ms // 2, 2)
    attacks = {}
    for k, idx in enumerate(chosen):
        mask = rng.randrange(1, 1 << len(CONTEXT_FIELDS))
        profile = frozenset(f for b, f in enumerate(CONTEXT_FIELDS) if mask >> b & 1)
        exploit = rng.randrange(1, half)
        discovery = rng.randrange(0, exploit + 1)
        patch_at = rng.randrange(discovery, exploit + cfg.period_ms + 1)
        attacks[devices[idx].device_id] = Attack(
            profile, AttackTimeline(discovery, exploit, patch_at), malicious=k < n_mal)
    return attacks


def build_topology(cfg: ScenarioConfig, attack_plan: dict | None = None) -> Topology:
    """Deterministic fleet layout for ``cfg``.

    ``attack_plan`` maps device *index* to an :class:`Attack` and replaces the
    seeded attacker draw (used to force specific tamper profiles).
    """
    if cfg.devices < 1:
        raise ValueError("a scenario needs at least one device")
    rng = random.Random(keyed_u64(b"topology", cfg.seed))
    cds = "cds"
    hgws = [f"hgw:{i}" for i in range(cfg.hgws)]
    aps = [f"ap:{i}" for i in range(cfg.aps)]
    lds = [f"lds:{i}" for i in range(cfg.hgws)]
    sds = [f"sds:{i}" for i in range(cfg.aps)]
    links, parent = {}, {}

    def link(child, par, lat):
        parent[child] = par
        links[(child, par)] = links[(par, child)] = lat

    for g, d in zip(hgws, lds):
        link(g, cds, cfg.lat_gateway_cds_ms)
        link(d, g, cfg.lat_gateway_diag_ms)
    for g, d in zip(aps, sds):
        link(g, cds, cfg.lat_gateway_cds_ms)
        link(d, g, cfg.lat_gateway_diag_ms)

    routes = _route_split(cfg.devices, cfg.route_mix, rng)
    seen = set()
    devices, attach = [], {}
    rr = {Route.VIA_LDS: 0, Route.VIA_SDS: 0, Route.DIRECT_CDS: 0}
    for route in routes:
        did = rng.getrandbits(64)
        while did in seen:
            did = rng.getrandbits(64)
        seen.add(did)
        lo = rng.randrange(16, 128)
        record = ContextRecord(
            signature=DeviceSignature(did, 0),
            counter=new_counter(cfg.seed, did),
            traffic_type=rng.choice(list(TrafficType)),
            header_length_bits=rng.choice(cfg.header_bits),
            memory_range=(lo, lo + rng.randrange(64, 1024)),
            route=route,
        )
        dev = DeviceState(record, cfg.seed)
        i = rr[route]
        rr[route] += 1
        if route is Route.VIA_LDS:
            gw, diag = hgws[i % len(hgws)], lds[i % len(lds)]
        elif route is Route.VIA_SDS:
            gw, diag = aps[i % len(aps)], sds[i % len(sds)]
        else:
            gw, diag = aps[i % len(aps)], None
        link(dev.name, gw, cfg.lat_device_gateway_ms)
        devices.append(dev)
        attach[did] = (gw, diag)

    if attack_plan is None:
        attacks = draw_attacks(cfg, devices, rng)
    else:
        attacks = {devices[i].device_id: a for i, a in attack_plan.items()}
    topo = Topology(cds, aps, hgws, lds, sds, devices, attach, links, attacks, parent)
    topo.check()
    return topo


# ---------------------------------------------------------------------------
# Mode pipelines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pipeline:
    mode: Mode
    graphs_built_at: str           # "diagnosis" or "cds"
    cds_report_kind: MessageKind
    period_start: bool


def mode_pipeline(mode: Mode) -> Pipeline:
    if mode is Mode.CENTRALIZED:
        return Pipeline(mode, "cds", MessageKind.CONTEXT_SHARE, False)
    if mode is Mode.DISTRIBUTED:
        return Pipeline(mode, "diagnosis", MessageKind.DIGEST_REPORT, True)
    raise ValueError(f"no single pipeline for mode {mode}")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

class Ev(enum.IntEnum):
    DELIVER = 0
    TICK = 1
    COMPROMISE = 2
    PATCH_AVAILABLE = 3
    BUILD_DONE = 4
    REPORT_TIMEOUT = 5
    PATCH = 6
    REVALIDATE = 7
    DEADLINE = 8


class Simulation:
    """One run of one mode.

    ``drop`` is an optional predicate over :class:`ProtocolMessage`; messages
    for which it returns True are sent (and accounted) but never delivered.
    """

    def __init__(self, cfg: ScenarioConfig, mode: Mode | None = None,
                 attack_plan: dict | None = None, drop=None):
        mode = cfg.mode if mode is None else mode
        self.cfg = cfg
        self.mode = mode
        self.pipeline = mode_pipeline(mode)
        self.topo = build_topology(cfg, attack_plan)
        self.drop = drop
        self.sizes = {k: cfg.body_size(k) for k in (m.value for m in MessageKind)}
        self.cds = CDS(cfg.seed, cfg.stages, mode, cfg.period_ms, self.sizes)
        self.nodes: dict[str, DiagnosisNode] = {}
        self.forwarders: dict[str, Forwarder] = {}
        for g in self.topo.hgws:
            self.forwarders[g] = Forwarder(Role.HGW, len(self.forwarders) + 1, g)
        for g in self.topo.aps:
            self.forwarders[g] = Forwarder(Role.AP, len(self.forwarders) + 1, g)
        if mode is Mode.DISTRIBUTED:
            for i, n in enumerate(self.topo.lds_nodes + self.topo.sds_nodes):
                role = Role.LDS if n.startswith("lds") else Role.SDS
                node = DiagnosisNode(role, 1000 + i, n, cfg.stages)
                self.nodes[n] = node
                self.cds.add_node(node)
        self.devices = {d.device_id: d for d in self.topo.devices}
        self.order = [d.device_id for d in self.topo.devices]
        self.busy: dict[str, int] = {}
        self.pending: dict[tuple, list] = {}     # (device, tick) -> reports
        self.patch_ready: dict[int, int] = {}
        self.round_count: dict[int, int] = {}
        self.max_latency = cfg.lat_device_gateway_ms + cfg.lat_gateway_cds_ms
        self.queue: list = []
        self.seq = 0
        self.now = 0
        self.transcript = Transcript(mode.value, cfg.devices, cfg.seed, cfg.period_ms)
        self.suspect_at: dict[int, int] = {}
        self.compromised_at: dict[int, int] = {}

    # -- plumbing ----------------------------------------------------------

    def schedule(self, at: int, ev: Ev, *payload):
        if at < self.now:
            raise InvariantError(f"event scheduled in the past ({at} < {self.now})")
        heapq.heappush(self.queue, (at, self.seq, ev, payload))
        self.seq += 1

    def send(self, msg: ProtocolMessage):
        lat = self.topo.latency(msg.src, msg.dst)
        if lat <= 0:
            raise InvariantError(f"non-positive latency {msg.src} -> {msg.dst}")
        backhaul = self.topo.crosses_backhaul(msg.src, msg.dst)
        dropped = bool(self.drop and self.drop(msg))
        at = msg.sent_at + lat
        self.transcript.message(msg, -1 if dropped else at, backhaul)
        for hop in self.topo.path(msg.src, msg.dst)[1:-1]:
            fw = self.forwarders.get(hop)
            if fw is not None:
                fw.bytes_forwarded += msg.payload_bytes
        if not dropped:
            self.schedule(at, Ev.DELIVER, msg)

    def msg(self, kind: MessageKind, src: str, dst: str, device_id: int, body=None):
        hb = self.devices[device_id].record.header_bytes
        return make_message(kind, src, dst, device_id, hb, self.now, self.sizes, body)

    def compute(self, where: str, *payload):
        start = max(self.now, self.busy.get(where, 0))
        done = start + self.cfg.graph_build_ms
        self.busy[where] = done
        self.schedule(done, Ev.BUILD_DONE, where, *payload)

    def tick_of(self, t: int) -> int:
        """Index of the latest period tick at or before ``t``."""
        return t // self.cfg.period_ms

    # -- run ---------------------------------------------------------------

    def run(self) -> RunMetrics:
        for did in self.order:
            gw, diag = self.topo.attach[did]
            self.cds.register_device(self.devices[did].record, self.cfg.stages, 0,
                                     gateway=gw, diag=diag if self.nodes else None)
        for did in self.order:
            atk = self.topo.attacks.get(did)
            if atk is not None:
                self.schedule(atk.timeline.exploit_at, Ev.COMPROMISE, did)
                self.schedule(atk.timeline.patch_available_at, Ev.PATCH_AVAILABLE, did)
        self.schedule(self.cfg.period_ms, Ev.TICK, 1)
        handlers = {
            Ev.DELIVER: self._deliver, Ev.TICK: self._tick, Ev.COMPROMISE: self._compromise,
            Ev.PATCH_AVAILABLE: self._patch_available, Ev.BUILD_DONE: self._build_done,
            Ev.REPORT_TIMEOUT: self._report_timeout, Ev.PATCH: self._patch,
            Ev.REVALIDATE: self._revalidate, Ev.DEADLINE: self._deadline,
        }
        while self.queue:
            at, _, ev, payload = heapq.heappop(self.queue)
            self.now = at
            handlers[ev](*payload)
        self._final_checks()
        return compute_metrics(self.transcript)

    def _final_checks(self):
        if self.cds.rounds:
            raise InvariantError(f"{len(self.cds.rounds)} protocol rounds never resolved")
        for rnd in self.cds.closed_rounds:
            if not transcript_ok(rnd):
                raise InvariantError(f"bad round transcript for {rnd.device_id:#x}")
            if rnd.resolved_at - rnd.opened_at > 4 * self.cfg.period_ms:
                raise InvariantError(f"round for {rnd.device_id:#x} outlived its deadline")
        for did, e in self.cds.registry.items():
            if e.trust is Trust.ELIMINATED:
                if any(did in n.registry for n in self.nodes.values()):
                    raise InvariantError(f"eliminated device {did:#x} still registered")

    # -- handlers ----------------------------------------------------------

    def _tick(self, k: int):
        t = self.now
        self.transcript.tick(t, k)
        for did in self.order:
            dev = self.devices[did]
            if dev.eliminated or not self.cds.accepts(did):
                continue
            gw, diag = self.cds.registry[did].gateway, self.cds.registry[did].diag
            epoch = dev.epoch_at(k)
            if self.pipeline.period_start and diag is not None:
                cds_epoch, expected = self.cds.expected_counter(did, k)
                self.send(self.msg(MessageKind.PERIOD_START, self.cds.name, diag, did,
                                   (cds_epoch, expected.value)))
            record = dev.emit_context(epoch)
            dst = diag if diag is not None else self.cds.name
            self.send(self.msg(MessageKind.CONTEXT_SHARE, dev.name, dst, did,
                               ("period", k, record)))
            self.pending[(did, k)] = []
            self.schedule(t + REPORT_TIMEOUT_PERIODS * self.cfg.period_ms,
                          Ev.REPORT_TIMEOUT, did, k)
        nxt = (k + 1) * self.cfg.period_ms
        if nxt <= self.cfg.duration_ms:
            self.schedule(nxt, Ev.TICK, k + 1)

    def _compromise(self, did: int):
        dev = self.devices[did]
        atk = self.topo.attacks[did]
        if dev.eliminated:
            return
        # epoch in force just before the exploit instant
        epoch = dev.epoch_at(self.tick_of(self.now - 1)) if self.now > 0 else 0
        dev.compromise(atk.profile, max(epoch, 0), atk.malicious)
        self.compromised_at[did] = self.now
        self.transcript.compromise(self.now, did, atk.profile, atk.malicious)

    def _patch_available(self, did: int):
        self.patch_ready[did] = self.now

    def _deliver(self, msg: ProtocolMessage):
        kind, did = msg.kind, msg.device_id
        if msg.dst in self.forwarders:
            self.forwarders[msg.dst].messages_received += 1
            return
        if msg.dst in self.nodes:
            node = self.nodes[msg.dst]
            node.messages_received += 1
            if kind in (MessageKind.CONTEXT_SHARE, MessageKind.PERIOD_START) \
                    and did not in node.registry:
                self.transcript.rejected(self.now, msg)
                return
            if kind is MessageKind.CONTEXT_SHARE:
                self.compute(node.name, did, msg.body)
            elif kind is MessageKind.PERIOD_START:
                node.period_start(did, *msg.body)
            elif kind is MessageKind.TRUST_REVALIDATE:
                self.send(self.msg(MessageKind.TRUST_REVALIDATE, node.name,
                                   device_name(did), did, msg.body))
            return
        if msg.dst == self.cds.name:
            self.cds.messages_received += 1
            if not self.cds.accepts(did):
                self.transcript.rejected(self.now, msg)
                return
            if kind is MessageKind.CONTEXT_SHARE:
                self.compute(self.cds.name, did, msg.body)
            elif kind is MessageKind.DIGEST_REPORT:
                k, report = msg.body
                self._add_report(did, k, report)
            elif kind is MessageKind.TRUST_ACK:
                self._ack(did, msg.body)
            return
        dev = self.devices.get(did)
        if dev is None or msg.dst != dev.name:
            raise InvariantError(f"undeliverable message {msg}")
        if kind is MessageKind.PATCH_DISPATCH:
            self._apply_patch(dev, msg)
        elif kind is MessageKind.TRUST_REVALIDATE:
            if dev.eliminated:
                return
            tick = msg.body
            record = dev.emit_context(dev.epoch_at(tick))
            self.send(self.msg(MessageKind.CONTEXT_SHARE, dev.name, msg.src, did,
                               ("revalidate", tick, record)))
        elif kind is MessageKind.RE_REGISTER:
            dev.reregister(*msg.body)

    def _apply_patch(self, dev: DeviceState, msg: ProtocolMessage):
        n = self.round_count.get(dev.device_id, 0)
        u = keyed_u64(b"efficacy", self.cfg.seed, dev.device_id, n) / float(MASK64 + 1)
        if dev.apply_patch(msg.body, u < self.cfg.patch_efficacy):
            self.transcript.patched(self.now, dev.device_id)

    def _build_done(self, where: str, did: int, body):
        purpose, k, record = body
        if where == self.cds.name:
            if not self.cds.accepts(did):
                return
            graph = build_graph(record, self.cfg.stages, device_id=did)
            report = Report(Source.DEVICE, did, k, graph)
            if purpose == "period":
                self._add_report(did, k, report)
            else:
                self._ack(did, report)
            return
        node = self.nodes[where]
        if did not in node.registry:
            return
        _, report = node.local_diagnose(record, did, k)
        if purpose == "period":
            self.send(self.msg(MessageKind.DIGEST_REPORT, node.name, self.cds.name, did,
                               (k, report)))
        else:
            self.send(self.msg(MessageKind.TRUST_ACK, node.name, self.cds.name, did, report))

    def _add_report(self, did: int, k: int, report: Report):
        reports = self.pending.get((did, k))
        if reports is None:
            return  # already decided by timeout
        reports.append(report)
        have = {r.source for r in reports}
        if self.cds.required_sources(did) <= have:
            self._decide(did, k)

    def _report_timeout(self, did: int, k: int):
        if (did, k) in self.pending:
            self._decide(did, k)

    def _decide(self, did: int, k: int):
        reports = self.pending.pop((did, k))
        if not self.cds.accepts(did):
            return
        was = self.cds.registry[did].trust
        verdict = cds_decide(self.cds, did, reports, k)
        self.transcript.decision(k * self.cfg.period_ms, self.now, k, did, verdict)
        if verdict.threat and was is Trust.TRUSTED:
            self.suspect_at.setdefault(did, self.now)
            self.transcript.suspect(self.now, did, verdict)
            self._open_round(did, verdict)

    # -- protocol ------------------------------------------------------------

    def _open_round(self, did: int, verdict):
        self.round_count[did] = self.round_count.get(did, 0) + 1
        for m in raise_alarm(self.cds, did, verdict, self.now):
            self.send(m)
        rnd = self.cds.rounds[did]
        ready = self.patch_ready.get(did)
        atk = self.topo.attacks.get(did)
        if atk is not None and ready is None:
            ready = atk.timeline.patch_available_at
        at = max(self.now, ready or 0)
        self.schedule(at, Ev.PATCH, did, rnd.opened_at)
        self.schedule(rnd.deadline, Ev.DEADLINE, did, rnd.opened_at)

    def _live_round(self, did: int, opened_at: int):
        rnd = self.cds.rounds.get(did)
        if rnd is None or rnd.opened_at != opened_at:
            return None
        return rnd

    def _patch(self, did: int, opened_at: int):
        rnd = self._live_round(did, opened_at)
        if rnd is None:
            return
        self.send(dispatch_patch(self.cds, did, self.now))
        at = self.now + self.cfg.period_ms
        self.schedule(min(at, rnd.deadline), Ev.REVALIDATE, did, opened_at)

    def _revalidate(self, did: int, opened_at: int):
        rnd = self._live_round(did, opened_at)
        if rnd is None:
            return
        for m in revalidate_trust(self.cds, rnd, self.now, self.tick_of(self.now)):
            self.send(m)

    def _ack(self, did: int, report: Report):
        rnd = self.cds.rounds.get(did)
        if rnd is None or rnd.state is not RoundState.REVALIDATING:
            return
        rnd.record_ack(report)
        if rnd.acks_complete:
            base = (self.now + self.max_latency) // self.cfg.period_ms + 1
            rnd, msgs = resolve(self.cds, rnd, list(rnd.acks.values()), self.now, base)
            self._after_resolve(rnd, msgs)

    def _deadline(self, did: int, opened_at: int):
        rnd = self._live_round(did, opened_at)
        if rnd is None:
            return
        self._after_resolve(rnd, expire(self.cds, rnd, self.now))

    def _after_resolve(self, rnd, msgs):
        for m in msgs:
            self.send(m)
        if rnd.state is RoundState.ELIMINATED:
            self.devices[rnd.device_id].eliminated = True
        self.transcript.resolved(self.now, rnd.device_id, rnd.state.value, rnd.opened_at)


def run(cfg: ScenarioConfig, mode: Mode | None = None, attack_plan: dict | None = None,
        drop=None, keep: bool = False):
    """Run one mode. Returns RunMetrics, or ``(RunMetrics, Simulation)`` if ``keep``."""
    mode = cfg.mode if mode is None else mode
    if mode is Mode.BOTH:
        raise ValueError("run() executes a single mode; use compare_modes for both")
    sim = Simulation(cfg, mode, attack_plan, drop)
    metrics = sim.run()
    return (metrics, sim) if keep else metrics
