import math

import pytest

from ddsim.config import Mode
from ddsim.context import ContextField, Route
from ddsim.protocol import MessageKind
from ddsim.roles import Trust
from ddsim.simnet import (
    Attack,
    AttackTimeline,
    build_topology,
    mode_pipeline,
    run,
)

from conftest import small_config

BOTH = (Mode.CENTRALIZED, Mode.DISTRIBUTED)


def records(sim, tag):
    return [r for r in sim.transcript.records if r[0] == tag]


def suspects(sim):
    return {r[2] for r in records(sim, "S")}


def attack(profile, exploit, patch=None, malicious=False):
    patch = exploit if patch is None else patch
    return Attack(frozenset(profile), AttackTimeline(0, exploit, patch), malicious)


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

def test_route_mix_counts():
    topo = build_topology(small_config(devices=500, route_mix=(0.6, 0.3, 0.1)))
    assert topo.route_counts() == {Route.VIA_LDS: 300, Route.VIA_SDS: 150, Route.DIRECT_CDS: 50}


def test_remainders_go_to_eligible_routes():
    topo = build_topology(small_config(devices=7, route_mix=(0.5, 0.5, 0.0)))
    counts = topo.route_counts()
    assert sum(counts.values()) == 7
    assert counts[Route.DIRECT_CDS] == 0
    assert sorted(counts.values())[1:] == [3, 4]


def test_single_device_chain():
    cfg = small_config(devices=1, route_mix=(1.0, 0.0, 0.0), hgws=1, aps=1)
    topo = build_topology(cfg)
    (dev,) = topo.devices
    assert dev.record.route is Route.VIA_LDS
    assert topo.path(dev.name, "cds") == [dev.name, "hgw:0", "cds"]
    assert topo.path(dev.name, "lds:0") == [dev.name, "hgw:0", "lds:0"]
    assert topo.latency(dev.name, "cds") == 45
    assert not topo.crosses_backhaul(dev.name, "lds:0")
    assert topo.crosses_backhaul("lds:0", "cds")


def test_topology_deterministic():
    cfg = small_config(devices=50)
    a, b = build_topology(cfg), build_topology(cfg)
    assert [d.record for d in a.devices] == [d.record for d in b.devices]
    assert a.links == b.links and a.attach == b.attach
    assert [d.record for d in build_topology(cfg.with_(seed=2)).devices] != \
        [d.record for d in a.devices]


def test_device_ids_unique():
    topo = build_topology(small_config(devices=2000))
    assert len({d.device_id for d in topo.devices}) == 2000


def test_attack_draw_respects_timeline():
    cfg = small_config(devices=200, attacker_fraction=0.2, malicious_share_of_attackers=0.5)
    topo = build_topology(cfg)
    assert len(topo.attacks) == 40
    assert sum(a.malicious for a in topo.attacks.values()) == 20
    for a in topo.attacks.values():
        t = a.timeline
        assert a.profile
        assert 1 <= t.exploit_at < cfg.duration_ms // 2
        assert t.discovery_at <= t.exploit_at and t.discovery_at <= t.patch_available_at
        assert t.patch_available_at <= t.exploit_at + cfg.period_ms


def test_bad_timeline_rejected():
    with pytest.raises(ValueError):
        AttackTimeline(10, 5, 20)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode", BOTH)
def test_clean_run_is_sound(mode):
    m, sim = run(small_config(devices=40), mode, keep=True)
    assert m.threat_verdicts == 0
    assert not sim.cds.closed_rounds
    assert m.detections.false_positives == 0
    assert m.rounds.re_registered == m.rounds.eliminated == 0


@pytest.mark.parametrize("mode", BOTH)
def test_micro_scenario_resolves_within_four_periods(mode):
    cfg = small_config(devices=10, attacker_fraction=0.2, malicious_share_of_attackers=0.5)
    m, sim = run(cfg, mode, keep=True)
    attackers = sim.topo.attacks
    assert len(attackers) == 2
    resolved = {r[2]: r for r in records(sim, "R")}
    for did, atk in attackers.items():
        r = resolved[f"{did:016x}"]
        assert r[1] - atk.timeline.exploit_at <= 4 * cfg.period_ms
    assert m.rounds.re_registered == 1 and m.rounds.eliminated == 1
    assert m.detections.true_detections == 2 and m.detections.missed == 0


def test_run_deterministic():
    cfg = small_config(devices=30, attacker_fraction=0.3)
    (m1, s1), (m2, s2) = run(cfg, Mode.DISTRIBUTED, keep=True), run(cfg, Mode.DISTRIBUTED, keep=True)
    assert m1 == m2
    assert s1.transcript.dumps() == s2.transcript.dumps()


def test_run_rejects_both():
    with pytest.raises(ValueError):
        run(small_config(), Mode.BOTH)


def test_mode_pipeline_sizes():
    cfg = small_config(devices=1, route_mix=(1.0, 0.0, 0.0), hgws=1, aps=1)
    bodies = {}
    for mode in BOTH:
        assert mode_pipeline(mode).mode is mode
        _, sim = run(cfg, mode, keep=True)
        hdr = sim.topo.devices[0].record.header_bytes
        to_cds = [r for r in records(sim, "M") if r[5] == "cds" and r[3] in
                  (MessageKind.CONTEXT_SHARE.value, MessageKind.DIGEST_REPORT.value)]
        bodies[mode] = {r[7] - hdr for r in to_cds}
    assert bodies == {Mode.CENTRALIZED: {64}, Mode.DISTRIBUTED: {24}}
    with pytest.raises(ValueError):
        mode_pipeline(Mode.BOTH)


@pytest.mark.parametrize("n,k", [(12, 1), (12, 3), (13, 4), (40, 5)])
def test_compute_queue_arithmetic(n, k):
    cfg = small_config(devices=n, route_mix=(1.0, 0.0, 0.0), hgws=k, aps=1)
    first = {}
    for mode in BOTH:
        _, sim = run(cfg, mode, keep=True)
        first[mode] = max(r[2] - r[1] for r in records(sim, "D") if r[3] == 1)
    build = cfg.graph_build_ms
    assert first[Mode.DISTRIBUTED] == 5 + math.ceil(n / k) * build + 40
    assert first[Mode.CENTRALIZED] == 5 + 40 + n * build


def test_mode_invariance_of_suspects():
    cfg = small_config(devices=60, attacker_fraction=0.3, duration_ms=16000)
    c = run(cfg, Mode.CENTRALIZED, keep=True)[1]
    d = run(cfg, Mode.DISTRIBUTED, keep=True)[1]
    assert suspects(c) == suspects(d)
    assert len(suspects(c)) == 18


@pytest.mark.parametrize("mode", BOTH)
def test_causality(mode):
    cfg = small_config(devices=30, attacker_fraction=0.3)
    _, sim = run(cfg, mode, keep=True)
    for r in records(sim, "M"):
        assert r[2] > r[1], r
    times = [r[1] for r in sim.transcript.records if r[0] in "TCPRS"]
    ticks = [r[1] for r in records(sim, "T")]
    assert ticks == sorted(ticks)
    assert min(times) >= 0


@pytest.mark.parametrize("mode", BOTH)
def test_detection_within_two_periods(mode):
    cfg = small_config(devices=4)
    plan = {2: attack({ContextField.HL}, exploit=2500)}
    _, sim = run(cfg, mode, plan, keep=True)
    did = sim.topo.devices[2].device_id
    assert sim.suspect_at[did] - 2500 <= 2 * cfg.period_ms


def test_dropped_acks_eliminate_at_deadline():
    cfg = small_config(devices=4, route_mix=(1.0, 0.0, 0.0))
    plan = {1: attack({ContextField.TP}, exploit=1500)}
    m, sim = run(cfg, Mode.DISTRIBUTED, plan, keep=True,
                 drop=lambda msg: msg.kind is MessageKind.TRUST_ACK)
    did = sim.topo.devices[1].device_id
    (r,) = records(sim, "R")
    assert r[3] == "Resolved(Eliminated)"
    assert r[1] == r[4] + 4 * cfg.period_ms
    assert sim.cds.registry[did].trust is Trust.ELIMINATED
    assert all(did not in n.registry for n in sim.nodes.values())
    assert m.rounds.eliminated == 1


def test_reregistered_device_stays_consistent():
    cfg = small_config(devices=4, duration_ms=20000)
    plan = {0: attack({ContextField.UC, ContextField.MR}, exploit=1200)}
    for mode in BOTH:
        _, sim = run(cfg, mode, plan, keep=True)
        did = f"{sim.topo.devices[0].device_id:016x}"
        (r,) = records(sim, "R")
        assert r[3] == "Resolved(ReRegistered)"
        later = [d for d in records(sim, "D") if d[4] == did and d[1] > r[1]]
        assert later and all(d[5] == "Consistent" for d in later)
