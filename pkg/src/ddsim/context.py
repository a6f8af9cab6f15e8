"""Strategic context records, device identity and the keyed update counter.

The update counter is the only context field that changes on an honest
device. Its evolution is a pure function of ``(seed, device_id, epoch)`` so
the CDS, the diagnosis nodes and the device itself can all compute the
expected value without exchanging it.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace

MASK32 = (1 << 32) - 1
MASK64 = (1 << 64) - 1


class TrafficType(enum.Enum):
    TELEMETRY = 0
    CONTROL = 1
    MEDIA = 2
    BULK = 3


class Route(enum.Enum):
    VIA_LDS = 0
    VIA_SDS = 1
    DIRECT_CDS = 2


class ContextField(enum.Enum):
    SG = "Sg"
    UC = "Uc"
    TP = "Tp"
    HL = "Hl"
    MR = "Mr"
    RT = "Rt"


CONTEXT_FIELDS = tuple(ContextField)


class ContextError(ValueError):
    pass


def keyed_u64(tag: bytes, *parts: int) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"ddsim-ctx")
    h.update(tag)
    for p in parts:
        h.update(struct.pack(">Q", p & MASK64))
    return int.from_bytes(h.digest(), "big")


def generation_seed(seed: int, generation: int) -> int:
    """Seed used for a device's counter after ``generation`` re-registrations."""
    if generation == 0:
        return seed & MASK64
    return keyed_u64(b"generation", seed, generation)


@dataclass(frozen=True)
class DeviceSignature:
    id: int
    issued_at: int = 0

    def __post_init__(self):
        if not 0 <= self.id <= MASK64:
            raise ContextError(f"signature id out of 64-bit range: {self.id}")
        if self.issued_at < 0:
            raise ContextError("issued_at must be >= 0")


@dataclass(frozen=True)
class UpdateCounter:
    value: int
    epoch: int = 0

    def __post_init__(self):
        if not 0 <= self.value <= MASK32:
            raise ContextError(f"counter value out of 32-bit range: {self.value}")
        if self.epoch < 0:
            raise ContextError("epoch must be >= 0")


@dataclass(frozen=True)
class FirmwareVersion:
    version: int = 1
    patched_against: frozenset = frozenset()

    def patched(self, vuln_id: str) -> "FirmwareVersion":
        return FirmwareVersion(self.version + 1, self.patched_against | {vuln_id})


@dataclass(frozen=True)
class ContextRecord:
    signature: DeviceSignature
    counter: UpdateCounter
    traffic_type: TrafficType
    header_length_bits: int
    memory_range: tuple[int, int]
    route: Route

    def __post_init__(self):
        lo, hi = self.memory_range
        if lo < 0 or lo > hi:
            raise ContextError(f"invalid memory range {self.memory_range}")
        if self.header_length_bits <= 0 or self.header_length_bits % 8:
            raise ContextError(
                f"header length must be a positive multiple of 8 bits, "
                f"got {self.header_length_bits}")
        if not isinstance(self.route, Route):
            raise ContextError(f"route must be a Route, got {self.route!r}")
        if not isinstance(self.traffic_type, TrafficType):
            raise ContextError(f"traffic type must be a TrafficType, got {self.traffic_type!r}")

    @property
    def device_id(self) -> int:
        return self.signature.id

    @property
    def header_bytes(self) -> int:
        return self.header_length_bits // 8

    def with_counter(self, counter: UpdateCounter) -> "ContextRecord":
        return replace(self, counter=counter)


# ---------------------------------------------------------------------------
# Counter schedule
# ---------------------------------------------------------------------------

def new_counter(seed: int, device_id: int) -> UpdateCounter:
    return UpdateCounter(keyed_u64(b"counter", seed, device_id) & MASK32, 0)


def next_delta(seed: int, device_id: int, epoch: int) -> int:
    """Nonzero 32-bit increment applied when moving from ``epoch`` to ``epoch + 1``."""
    attempt = 0
    while True:
        d = keyed_u64(b"delta", seed, device_id, epoch, attempt) & MASK32
        if d:
            return d
        attempt += 1


def advance_counter(c: UpdateCounter, delta: int) -> UpdateCounter:
    return UpdateCounter((c.value + delta) & MASK32, c.epoch + 1)


def counter_at(seed: int, device_id: int, epoch: int) -> UpdateCounter:
    c = new_counter(seed, device_id)
    for k in range(epoch):
        c = advance_counter(c, next_delta(seed, device_id, k))
    return c


class CounterSchedule:
    """Memoised ``counter_at`` for one (seed, device) pair.

    Simulations query consecutive epochs, so caching the walk keeps the
    per-period cost constant.
    """

    def __init__(self, seed: int, device_id: int):
        self.seed = seed
        self.device_id = device_id
        self._values = [new_counter(seed, device_id)]

    def at(self, epoch: int) -> UpdateCounter:
        if epoch < 0:
            raise ContextError("epoch must be >= 0")
        vals = self._values
        while len(vals) <= epoch:
            k = len(vals) - 1
            vals.append(advance_counter(vals[k], next_delta(self.seed, self.device_id, k)))
        return vals[epoch]


# ---------------------------------------------------------------------------
# Deterministic tampering
# ---------------------------------------------------------------------------

def tamper_mask(seed: int, device_id: int, fld: ContextField) -> int:
    return keyed_u64(b"tamper:" + fld.value.encode(), seed, device_id)


def tamper_record(record: ContextRecord, profile, seed: int,
                  frozen_counter: UpdateCounter | None = None) -> ContextRecord:
    """Apply an attacker's mutations to ``record``.

    Every field in ``profile`` except Uc is guaranteed to differ from the
    honest value. The counter is not XORed; an attacker that owns Uc reports
    ``frozen_counter`` (the value at its compromise epoch), which only
    diverges once the schedule moves past that epoch.
    """
    r = record
    did = record.device_id
    for fld in CONTEXT_FIELDS:
        if fld not in profile:
            continue
        m = tamper_mask(seed, did, fld)
        if fld is ContextField.SG:
            new_id = r.signature.id ^ (m or 1)
            r = replace(r, signature=replace(r.signature, id=new_id))
        elif fld is ContextField.UC:
            if frozen_counter is None:
                raise ContextError("Uc tampering needs the frozen counter")
            r = replace(r, counter=frozen_counter)
        elif fld is ContextField.TP:
            idx = r.traffic_type.value ^ (1 + m % 3)
            r = replace(r, traffic_type=TrafficType(idx))
        elif fld is ContextField.HL:
            hb = r.header_bytes
            x = 1 + m % 15
            if hb ^ x == 0:
                x = (x % 15) + 1
            r = replace(r, header_length_bits=(hb ^ x) * 8)
        elif fld is ContextField.MR:
            lo, hi = r.memory_range
            lo2, hi2 = lo ^ (1 + m % 63), hi ^ (1 + (m >> 8) % 63)
            r = replace(r, memory_range=(min(lo2, hi2), max(lo2, hi2)))
            if r.memory_range == record.memory_range:
                r = replace(r, memory_range=(lo, hi + 1))
        elif fld is ContextField.RT:
            idx = (r.route.value + 1 + m % 2) % 3
            r = replace(r, route=Route(idx))
    return r
