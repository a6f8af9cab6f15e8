"""Run transcripts and the metrics derived from them.

RunMetrics is a pure function of the transcript, so a persisted transcript
reproduces the metrics of the run that wrote it.

Byte overhead counts the diagnosis traffic carried on the backhaul (every
gateway <-> CDS link). Traffic between a device and the diagnosis node
co-located with its gateway stays local and only appears in ``bytes_all``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

TRANSCRIPT_MAGIC = "# ddsim-transcript v1"

CSV_HEADER = ("mode,devices,seed,cost_total_ms,cost_mean_ms,msgs,bytes,"
              "detected,missed,false_pos,re_registered,eliminated")


def _hex(x: int) -> str:
    return f"{x:016x}"


class Transcript:
    """Append-only event log of one run.

    Records are tuples whose first element is a one-letter tag:

    ``T`` tick, ``M`` message, ``D`` decision, ``S`` new suspect,
    ``C`` compromise, ``P`` patch applied, ``R`` round resolved,
    ``X`` message rejected by a registry.
    """

    def __init__(self, mode: str, devices: int, seed: int, period_ms: int):
        self.mode = mode
        self.devices = devices
        self.seed = seed
        self.period_ms = period_ms
        self.records: list[tuple] = []

    def __eq__(self, other):
        return isinstance(other, Transcript) and self.dumps() == other.dumps()

    # writers; every field is an int or a string without tabs

    def tick(self, t, k):
        self.records.append(("T", t, k))

    def message(self, msg, delivered_at, backhaul):
        self.records.append(("M", msg.sent_at, delivered_at, msg.kind.value, msg.src, msg.dst,
                             _hex(msg.device_id), msg.payload_bytes, int(backhaul)))

    def decision(self, tick_time, decide_time, k, device_id, verdict):
        self.records.append(("D", tick_time, decide_time, k, _hex(device_id), str(verdict)))

    def suspect(self, t, device_id, verdict):
        self.records.append(("S", t, _hex(device_id), verdict.cause.value))

    def compromise(self, t, device_id, profile, malicious):
        fields_ = ",".join(sorted(f.value for f in profile)) or "-"
        self.records.append(("C", t, _hex(device_id), fields_, int(malicious)))

    def patched(self, t, device_id):
        self.records.append(("P", t, _hex(device_id)))

    def resolved(self, t, device_id, outcome, opened_at):
        self.records.append(("R", t, _hex(device_id), outcome, opened_at))

    def rejected(self, t, msg):
        self.records.append(("X", t, msg.kind.value, msg.src, msg.dst, _hex(msg.device_id)))

    # persistence

    def dumps(self) -> str:
        out = io.StringIO()
        out.write(f"{TRANSCRIPT_MAGIC}\tmode={self.mode}\tdevices={self.devices}"
                  f"\tseed={self.seed}\tperiod_ms={self.period_ms}\n")
        for rec in self.records:
            out.write("\t".join(str(x) for x in rec))
            out.write("\n")
        return out.getvalue()

    def dump(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Transcript":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(TRANSCRIPT_MAGIC):
            raise ValueError("not a ddsim transcript")
        head = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
        tr = cls(head["mode"], int(head["devices"]), int(head["seed"]), int(head["period_ms"]))
        for n, line in enumerate(lines[1:], 2):
            parts = line.split("\t")
            tag = parts[0]
            ints = _INT_FIELDS.get(tag)
            if ints is None:
                raise ValueError(f"line {n}: unknown record tag {tag!r}")
            rec = tuple(int(p) if i in ints else p for i, p in enumerate(parts))
            tr.records.append(rec)
        return tr

    @classmethod
    def load(cls, path) -> "Transcript":
        return cls.loads(Path(path).read_text())


# positions of integer fields per record tag
_INT_FIELDS = {
    "T": {1, 2},
    "M": {1, 2, 7, 8},
    "D": {1, 2, 3},
    "S": {1},
    "C": {1, 4},
    "P": {1},
    "R": {1, 4},
    "X": {1},
}


@dataclass(frozen=True)
class CostStats:
    mean_per_decision: float = 0.0
    total: int = 0
    decisions: int = 0


@dataclass(frozen=True)
class Overhead:
    messages: int = 0
    bytes: int = 0
    bytes_all: int = 0


@dataclass(frozen=True)
class Detections:
    true_detections: int = 0
    missed: int = 0
    false_positives: int = 0


@dataclass(frozen=True)
class Rounds:
    re_registered: int = 0
    eliminated: int = 0


@dataclass(frozen=True)
class PeriodStats:
    period: int
    decisions: int = 0
    cost_total: int = 0
    threats: int = 0
    messages: int = 0
    bytes: int = 0


@dataclass(frozen=True)
class RunMetrics:
    mode: str
    devices: int
    seed: int
    cost_of_operation_ms: CostStats
    comm_overhead: Overhead
    detections: Detections
    rounds: Rounds
    per_period: tuple = field(default=())
    threat_verdicts: int = 0

    def csv_row(self) -> str:
        c, o, d, r = self.cost_of_operation_ms, self.comm_overhead, self.detections, self.rounds
        return ",".join(str(x) for x in (
            self.mode, self.devices, self.seed, c.total, f"{c.mean_per_decision:.6f}",
            o.messages, o.bytes, d.true_detections, d.missed, d.false_positives,
            r.re_registered, r.eliminated))


def cost_of_operation(transcript: Transcript) -> CostStats:
    costs = [rec[2] - rec[1] for rec in transcript.records if rec[0] == "D"]
    if not costs:
        return CostStats()
    total = sum(costs)
    return CostStats(total / len(costs), total, len(costs))


def comm_overhead(transcript: Transcript) -> Overhead:
    msgs = [rec for rec in transcript.records if rec[0] == "M"]
    return Overhead(
        messages=len(msgs),
        bytes=sum(m[7] for m in msgs if m[8]),
        bytes_all=sum(m[7] for m in msgs),
    )


def compute_metrics(transcript: Transcript) -> RunMetrics:
    recs = transcript.records
    compromised = {r[2]: r[3] for r in recs if r[0] == "C"}
    suspects = {r[2] for r in recs if r[0] == "S"}
    detections = Detections(
        true_detections=len(suspects & compromised.keys()),
        missed=len(compromised.keys() - suspects),
        false_positives=len(suspects - compromised.keys()),
    )
    outcomes = [r[3] for r in recs if r[0] == "R"]
    rounds = Rounds(outcomes.count("Resolved(ReRegistered)"),
                    outcomes.count("Resolved(Eliminated)"))

    period = transcript.period_ms
    buckets: dict[int, dict] = {}

    def bucket(k):
        return buckets.setdefault(k, {"decisions": 0, "cost_total": 0, "threats": 0,
                                      "messages": 0, "bytes": 0})

    threats = 0
    for r in recs:
        if r[0] == "D":
            b = bucket(r[3])
            b["decisions"] += 1
            b["cost_total"] += r[2] - r[1]
            if r[5] != "Consistent":
                b["threats"] += 1
                threats += 1
        elif r[0] == "M":
            b = bucket(r[1] // period)
            b["messages"] += 1
            if r[8]:
                b["bytes"] += r[7]
    per_period = tuple(PeriodStats(k, **buckets[k]) for k in sorted(buckets))
    return RunMetrics(
        mode=transcript.mode,
        devices=transcript.devices,
        seed=transcript.seed,
        cost_of_operation_ms=cost_of_operation(transcript),
        comm_overhead=comm_overhead(transcript),
        detections=detections,
        rounds=rounds,
        per_period=per_period,
        threat_verdicts=threats,
    )


# ---------------------------------------------------------------------------
# mode comparison
# ---------------------------------------------------------------------------

def reduction_pct(centralized: float, distributed: float) -> float:
    if centralized == 0:
        return 0.0
    return 100.0 * (centralized - distributed) / centralized


@dataclass(frozen=True)
class Comparison:
    centralized: RunMetrics
    distributed: RunMetrics

    @property
    def cost_reduction_pct(self) -> float:
        return reduction_pct(self.centralized.cost_of_operation_ms.total,
                             self.distributed.cost_of_operation_ms.total)

    @property
    def overhead_reduction_pct(self) -> float:
        return reduction_pct(self.centralized.comm_overhead.bytes,
                             self.distributed.comm_overhead.bytes)

    @property
    def mean_cost_reduction_pct(self) -> float:
        return reduction_pct(self.centralized.cost_of_operation_ms.mean_per_decision,
                             self.distributed.cost_of_operation_ms.mean_per_decision)

    @property
    def message_reduction_pct(self) -> float:
        return reduction_pct(self.centralized.comm_overhead.messages,
                             self.distributed.comm_overhead.messages)


def compare_modes(cfg) -> Comparison:
    from .config import Mode
    from .simnet import run

    return Comparison(run(cfg, Mode.CENTRALIZED), run(cfg, Mode.DISTRIBUTED))
