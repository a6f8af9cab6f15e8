import pytest

from ddsim.config import ScenarioConfig
from ddsim.context import ContextRecord, DeviceSignature, Route, TrafficType, new_counter
from ddsim.detection import CAUSE_PRIORITY, CONSISTENT, Cause, threat


def make_record(device_id=7, seed=42, traffic=TrafficType.TELEMETRY, header_bits=64,
                memory=(32, 512), route=Route.VIA_LDS):
    return ContextRecord(
        signature=DeviceSignature(device_id, 0),
        counter=new_counter(seed, device_id),
        traffic_type=traffic,
        header_length_bits=header_bits,
        memory_range=memory,
        route=route,
    )


def small_config(**kw):
    base = dict(devices=10, attacker_fraction=0.0, period_ms=1000, duration_ms=12000,
                hgws=2, aps=2, route_mix=(0.6, 0.3, 0.1))
    base.update(kw)
    return ScenarioConfig(**base)


def oracle_verdict(stored: ContextRecord, reports, expected_value: int, required):
    """Field-by-field comparison of raw records; never touches graphs."""
    causes = set()
    present = set()
    for src, rec in reports:
        if rec is None:
            continue
        present.add(src)
        if rec.counter.value != expected_value:
            causes.add(Cause.COUNTER_MISMATCH)
        if rec.signature != stored.signature:
            causes.add(Cause.SIGNATURE_MISMATCH)
        if rec.traffic_type != stored.traffic_type:
            causes.add(Cause.TRAFFIC_MISMATCH)
        if rec.header_length_bits != stored.header_length_bits:
            causes.add(Cause.HEADER_MISMATCH)
        if rec.memory_range != stored.memory_range:
            causes.add(Cause.MEMORY_MISMATCH)
        if rec.route != stored.route:
            causes.add(Cause.ROUTE_MISMATCH)
    if set(required) - present or not present:
        causes.add(Cause.MISSING_REPORT)
    if not causes:
        return CONSISTENT
    return threat(min(causes, key=CAUSE_PRIORITY.__getitem__))


@pytest.fixture
def record():
    return make_record()
