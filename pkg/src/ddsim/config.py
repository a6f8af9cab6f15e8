"""Scenario configuration and its flat ``key=value`` file format.

Grammar: one ``key=value`` per line, blank lines ignored, ``#`` starts a
comment. Lists (``route_mix``, ``header_bits``) are comma separated. Keys
not present take the defaults below, which describe a 500-device fleet with
20% attackers compared in both modes.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, fields
from pathlib import Path


class Mode(enum.Enum):
    CENTRALIZED = "centralized"
    DISTRIBUTED = "distributed"
    BOTH = "both"


class ConfigError(ValueError):
    pass


# message kind -> config key holding its body size in bytes
SIZE_KEYS = {
    "ContextShare": "size_context_share",
    "DigestReport": "size_digest_report",
    "PeriodStart": "size_period_start",
    "Alarm": "size_alarm",
    "PatchDispatch": "size_patch_dispatch",
    "TrustRevalidate": "size_trust_revalidate",
    "TrustAck": "size_trust_ack",
    "ReRegister": "size_re_register",
    "Eliminate": "size_eliminate",
}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 1
    mode: Mode = Mode.BOTH
    devices: int = 500
    attacker_fraction: float = 0.2
    malicious_share_of_attackers: float = 0.5
    route_mix: tuple = (0.8, 0.2, 0.0)  # ViaLDS, ViaSDS, DirectCDS
    hgws: int = 1
    aps: int = 4
    period_ms: int = 2000
    duration_ms: int = 40000
    stages: int = 4
    header_bits: tuple = (48, 64, 80)
    patch_efficacy: float = 1.0
    # latency table (ms); calibration defaults
    lat_device_gateway_ms: int = 5
    lat_gateway_cds_ms: int = 40
    lat_gateway_diag_ms: int = 0
    graph_build_ms: int = 2
    # message body sizes (bytes, excluding the per-device header)
    size_context_share: int = 64
    size_digest_report: int = 24
    size_period_start: int = 16
    size_alarm: int = 32
    size_patch_dispatch: int = 128
    size_trust_revalidate: int = 16
    size_trust_ack: int = 24
    size_re_register: int = 64
    size_eliminate: int = 16

    def __post_init__(self):
        validate(self)

    def body_size(self, kind_name: str) -> int:
        return getattr(self, SIZE_KEYS[kind_name])

    def with_(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


_FRACTIONS = ("attacker_fraction", "malicious_share_of_attackers", "patch_efficacy")
_POSITIVE = ("devices", "hgws", "aps", "period_ms", "duration_ms",
             "lat_device_gateway_ms", "lat_gateway_cds_ms")
_NON_NEGATIVE = ("lat_gateway_diag_ms", "graph_build_ms", *SIZE_KEYS.values())


def validate(cfg: ScenarioConfig) -> None:
    for k in _FRACTIONS:
        v = getattr(cfg, k)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{k}: must be in [0, 1], got {v}")
    for k in _POSITIVE:
        if getattr(cfg, k) < 1:
            raise ConfigError(f"{k}: must be >= 1, got {getattr(cfg, k)}")
    for k in _NON_NEGATIVE:
        if getattr(cfg, k) < 0:
            raise ConfigError(f"{k}: must be >= 0, got {getattr(cfg, k)}")
    if not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError(f"seed: must fit in 64 unsigned bits, got {cfg.seed}")
    if not isinstance(cfg.mode, Mode):
        raise ConfigError(f"mode: expected a Mode, got {cfg.mode!r}")
    if len(cfg.route_mix) != 3 or any(not 0.0 <= f <= 1.0 for f in cfg.route_mix):
        raise ConfigError(f"route_mix: need three fractions in [0, 1], got {cfg.route_mix}")
    if not math.isclose(sum(cfg.route_mix), 1.0, abs_tol=1e-9):
        raise ConfigError(f"route_mix: fractions must sum to 1, got {sum(cfg.route_mix)}")
    if cfg.stages < 2:
        raise ConfigError(f"stages: must be >= 2, got {cfg.stages}")
    if not cfg.header_bits or any(b <= 0 or b % 8 for b in cfg.header_bits):
        raise ConfigError(f"header_bits: need positive multiples of 8, got {cfg.header_bits}")
    if cfg.duration_ms < 2 * cfg.period_ms:
        raise ConfigError(
            f"duration_ms: must be >= 2 * period_ms ({2 * cfg.period_ms}), got {cfg.duration_ms}")


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_FIELDS = {f.name: f for f in fields(ScenarioConfig)}
_DEFAULT = None


def default_config() -> ScenarioConfig:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = ScenarioConfig()
    return _DEFAULT


def _parse_value(key: str, raw: str):
    default = getattr(default_config(), key)
    try:
        if key == "mode":
            return Mode(raw.strip().lower())
        if key == "route_mix":
            return tuple(float(x) for x in raw.split(","))
        if key == "header_bits":
            return tuple(int(x) for x in raw.split(","))
        if isinstance(default, float):
            return float(raw)
        return int(raw, 0)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def _format_value(v) -> str:
    if isinstance(v, Mode):
        return v.value
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return ScenarioConfig(**values)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def serialize_config(cfg: ScenarioConfig) -> str:
    return "".join(f"{name}={_format_value(getattr(cfg, name))}\n" for name in _FIELDS)
