"""
scenario.py
-----------
Scenario files: TOML documents describing the field, the node population,
radio, mobility, protocol knobs, defenses, trust bootstrap, adversaries,
traffic and scheduled failures.

Times are written in seconds and stored in integer microseconds. Every key is
validated; unknown keys are rejected and errors name the dotted key and the
line it appears on.

Usage:
    from scenario import load_config
    cfg = load_config("scenarios/baseline.toml")
"""

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import toml

from defense import AdversaryKind, AdversaryProfile
from discovery import ContentionConfig, DiscoveryConfig
from kernel import SPEED_OF_LIGHT, RadioModel
from model import TRUST_MAX, NodeId, Position, SimTime, seconds_to_micros
from neighbors import VerifyConfig
from trust import SECURITY_LEVELS, ModeFlag
from vhr import VhrConfig


class ConfigError(ValueError):
    """Invalid scenario; ``key`` is the dotted key, ``line`` the 1-based line (or None)."""

    def __init__(self, key: str, problem: str, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}: {problem}{where}")


@dataclass(frozen=True)
class TrafficFlow:
    source: NodeId
    destination: NodeId
    start: SimTime
    packets: int = 10
    interval: SimTime = 100_000
    mode: Optional[ModeFlag] = None
    security_level: Optional[str] = None
    data_start: Optional[SimTime] = None

    @property
    def first_packet_at(self) -> SimTime:
        """Data starts with discovery unless a later start is configured."""
        return self.start if self.data_start is None else max(self.start, self.data_start)


@dataclass(frozen=True)
class ScriptedMove:
    node: NodeId
    at: SimTime
    target: Position
    speed: float


@dataclass(frozen=True)
class Failure:
    node: NodeId
    at: SimTime


@dataclass(frozen=True)
class Defenses:
    watchdog: bool = True
    path_selector: bool = True
    sybil_probe: bool = True
    alerts: bool = True
    authenticate_source: bool = False
    handshake: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    duration: SimTime
    width: float
    height: float
    node_count: int
    radio: RadioModel
    mode: ModeFlag = ModeFlag.TRUSTED
    placements: Tuple[Position, ...] = ()
    servers: Optional[Tuple[NodeId, ...]] = None
    mobility_model: str = "static"
    mobile: Optional[Tuple[NodeId, ...]] = None
    min_speed: float = 1.0
    max_speed: float = 20.0
    pause: SimTime = 0
    mobility_step: SimTime = 100_000
    moves: Tuple[ScriptedMove, ...] = ()
    beacon_interval: SimTime = 1_000_000
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    vhr: Optional[VhrConfig] = None
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    watchdog_timeout: SimTime = 50_000
    watchdog_threshold: int = 3
    probe_timeout: SimTime = 10_000
    probe_tolerance: float = 10.0
    service_latency: SimTime = 1_000
    trust_request_timeout: SimTime = 20_000
    defenses: Defenses = field(default_factory=Defenses)
    trust_floor: int = 3
    granted_trust: int = 3
    trust_levels: Dict[NodeId, int] = field(default_factory=dict)
    adversaries: Tuple[AdversaryProfile, ...] = ()
    traffic: Tuple[TrafficFlow, ...] = ()
    failures: Tuple[Failure, ...] = ()

    def node_ids(self) -> List[NodeId]:
        return [NodeId(i) for i in range(self.node_count)]

    def vhr_config(self) -> VhrConfig:
        if self.vhr is not None:
            return self.vhr
        return VhrConfig(self.width, self.height, 0.4 * min(self.width, self.height))


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

_MISSING = object()
_ARRAY_HEADER = re.compile(r"^\[\[\s*([\w.]+)\s*\]\]")
_TABLE_HEADER = re.compile(r"^\[\s*([\w.]+)\s*\]")
_KEY = re.compile(r'^"?([\w-]+)"?\s*=')

LineIndex = Dict[Tuple[str, int], Dict[str, int]]


def _index_lines(text: str) -> LineIndex:
    """Map (table, occurrence) -> {key: first line} for error reporting."""
    index: LineIndex = {("", 0): {}}
    counts: Dict[str, int] = {}
    current = ("", 0)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = _ARRAY_HEADER.match(line)
        if m:
            name = m.group(1)
            current = (name, counts.get(name, 0))
            counts[name] = current[1] + 1
            index.setdefault(current, {})["__header__"] = lineno
            continue
        m = _TABLE_HEADER.match(line)
        if m:
            current = (m.group(1), 0)
            index.setdefault(current, {})["__header__"] = lineno
            continue
        m = _KEY.match(line)
        if m:
            index.setdefault(current, {}).setdefault(m.group(1), lineno)
    return index


class _Table:
    """One TOML table plus what is needed to complain about it precisely."""

    def __init__(self, data: Dict[str, Any], label: str, table: str, occurrence: int, lines: LineIndex):
        self.data = data
        self.label = label
        self.lines = lines.get((table, occurrence), {})
        self.used: List[str] = []

    def line(self, key: Optional[str] = None) -> Optional[int]:
        if key is not None and key in self.lines:
            return self.lines[key]
        return self.lines.get("__header__")

    def error(self, key: str, problem: str) -> ConfigError:
        return ConfigError(f"{self.label}.{key}" if self.label else key, problem, self.line(key))

    def take(
        self,
        key: str,
        kind: str,
        default: Any = _MISSING,
        check: Optional[Callable[[Any], Optional[str]]] = None,
    ) -> Any:
        self.used.append(key)
        if key not in self.data:
            if default is _MISSING:
                raise ConfigError(f"{self.label}.{key}", "missing mandatory key", self.line())
            return default
        value = _coerce(self.data[key], kind)
        if value is _MISSING:
            raise self.error(key, f"expected {kind}, got {self.data[key]!r}")
        if check is not None:
            problem = check(value)
            if problem:
                raise self.error(key, problem)
        return value

    def reject_unknown(self) -> None:
        for key in self.data:
            if key not in self.used:
                raise self.error(key, "unknown key")


def _coerce(value: Any, kind: str) -> Any:
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return _MISSING
        return float(value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            return _MISSING
        return value
    if kind == "bool":
        return value if isinstance(value, bool) else _MISSING
    if kind == "str":
        return value if isinstance(value, str) else _MISSING
    if kind == "list":
        return value if isinstance(value, list) else _MISSING
    if kind == "table":
        return value if isinstance(value, dict) else _MISSING
    raise ValueError(f"unknown kind {kind}")


def _positive(v: float) -> Optional[str]:
    return None if v > 0 else "must be positive"


def _non_negative(v: float) -> Optional[str]:
    return None if v >= 0 else "must be non-negative"


def _at_least_one(v: int) -> Optional[str]:
    return None if v >= 1 else "must be at least 1"


def _probability(v: float) -> Optional[str]:
    return None if 0.0 <= v <= 1.0 else "must be in [0, 1]"


def _trust(v: int) -> Optional[str]:
    return None if 0 <= v <= TRUST_MAX else f"must be in [0, {TRUST_MAX}]"


def _mode(v: int) -> Optional[str]:
    return None if v in (1, 2) else "mode must be 1 or 2"


def _us(seconds: float) -> SimTime:
    return seconds_to_micros(seconds)


_SECTIONS = {
    "scenario", "field", "nodes", "radio", "mobility", "protocol",
    "defenses", "trust", "adversaries", "traffic", "failures",
}


# ---------------------------------------------------------------------------
# parse_config
# ---------------------------------------------------------------------------

def parse_config(text: str) -> ScenarioConfig:
    """Parse and fully validate a scenario document."""
    try:
        doc = toml.loads(text)
    except toml.TomlDecodeError as exc:
        raise ConfigError("<document>", f"not valid TOML: {exc.msg}", getattr(exc, "lineno", None)) from exc

    lines = _index_lines(text)
    for name in doc:
        if name not in _SECTIONS:
            raise ConfigError(name, "unknown section", lines.get((name, 0), {}).get("__header__"))

    def table(name: str, mandatory: bool = False) -> _Table:
        data = doc.get(name)
        if data is None:
            if mandatory:
                raise ConfigError(name, "missing mandatory section")
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(name, "must be a table", lines.get((name, 0), {}).get("__header__"))
        return _Table(data, name, name, 0, lines)

    def array(name: str) -> List[_Table]:
        items = doc.get(name, [])
        if not isinstance(items, list):
            raise ConfigError(name, "must be an array of tables ([[...]])")
        return [_Table(item, f"{name}[{i}]", name, i, lines) for i, item in enumerate(items)]

    # [scenario]
    sc = table("scenario", mandatory=True)
    name = sc.take("name", "str", "scenario")
    seed = sc.take("seed", "int", check=lambda v: None if 0 <= v < 2**64 else "must be a 64-bit unsigned integer")
    duration = _us(sc.take("duration", "float", check=_positive))
    mode = ModeFlag(sc.take("mode", "int", 1, check=_mode))
    sc.reject_unknown()

    # [field]
    fd = table("field", mandatory=True)
    width = fd.take("width", "float", check=_positive)
    height = fd.take("height", "float", check=_positive)
    fd.reject_unknown()

    def inside(v: List[Any]) -> Optional[str]:
        if len(v) != 2 or any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in v):
            return "must be [x, y]"
        if not (0 <= v[0] <= width and 0 <= v[1] <= height):
            return f"({v[0]}, {v[1]}) lies outside the {width:g}x{height:g} field"
        return None

    # [nodes]
    nd = table("nodes", mandatory=True)
    count = nd.take("count", "int", check=_at_least_one)

    def known(v: int) -> Optional[str]:
        return None if 0 <= v < count else f"unknown node {v}"

    raw_places = nd.take("placements", "list", [])
    if len(raw_places) > count:
        raise nd.error("placements", f"{len(raw_places)} placements for {count} nodes")
    for p in raw_places:
        problem = inside(p) if isinstance(p, list) else "must be [x, y]"
        if problem:
            raise nd.error("placements", problem)
    placements = tuple(Position(float(p[0]), float(p[1])) for p in raw_places)
    raw_servers = nd.take("servers", "list", None)
    servers: Optional[Tuple[NodeId, ...]] = None
    if raw_servers is not None:
        for s in raw_servers:
            problem = known(s) if isinstance(s, int) and not isinstance(s, bool) else "must be node ids"
            if problem:
                raise nd.error("servers", problem)
        servers = tuple(NodeId(s) for s in raw_servers)
    nd.reject_unknown()

    # [radio]
    rd = table("radio", mandatory=True)
    radio = RadioModel(
        r=rd.take("range", "float", check=_positive),
        c=rd.take("propagation_speed", "float", SPEED_OF_LIGHT, check=_positive),
    )
    rd.reject_unknown()

    # [mobility]
    mb = table("mobility")
    model = mb.take(
        "model", "str", "static",
        check=lambda v: None if v in ("static", "random_waypoint") else "must be static or random_waypoint",
    )
    max_speed = mb.take("max_speed", "float", 20.0, check=_positive)
    min_speed = mb.take(
        "min_speed", "float", min(1.0, max_speed),
        check=lambda v: None if 0 < v <= max_speed else "must be in (0, max_speed]",
    )
    pause = _us(mb.take("pause", "float", 0.0, check=_non_negative))
    step = _us(mb.take("step", "float", 0.1, check=_positive))
    raw_mobile = mb.take("nodes", "list", None)
    mobile = None
    if raw_mobile is not None:
        for n in raw_mobile:
            if not isinstance(n, int) or known(n):
                raise mb.error("nodes", f"unknown node {n}")
        mobile = tuple(NodeId(n) for n in raw_mobile)
    raw_moves = mb.take("moves", "list", [])
    mb.reject_unknown()
    moves = []
    for i, raw in enumerate(raw_moves):
        mv = _Table(raw, f"mobility.moves[{i}]", "mobility.moves", i, lines)
        node = mv.take("node", "int", check=known)
        at = _us(mv.take("at", "float", check=_non_negative))
        target = mv.take("to", "list", check=inside)
        speed = mv.take(
            "speed", "float", check=lambda v: None if 0 < v <= max_speed else f"must be in (0, {max_speed:g}]"
        )
        mv.reject_unknown()
        moves.append(ScriptedMove(NodeId(node), at, Position(float(target[0]), float(target[1])), speed))

    # [protocol]
    pr = table("protocol")
    beacon_interval = _us(pr.take("beacon_interval", "float", 1.0, check=_positive))
    verify = VerifyConfig(
        range_threshold=pr.take("range_threshold", "float", radio.r, check=_positive),
        max_speed=max_speed,
        trust_penalty=pr.take("trust_penalty", "int", 1, check=_at_least_one),
        initial_trust=pr.take("initial_trust", "int", 5, check=_trust),
        processing_delay=_us(pr.take("processing_delay", "float", 0.0, check=_non_negative)),
    )
    update_threshold = pr.take("update_threshold", "float", 50.0, check=_positive)
    region_radius = pr.take(
        "region_radius", "float", 0.4 * min(width, height),
        check=lambda v: None if 0 < v < min(width, height) / 2 else "must be in (0, min(width, height) / 2)",
    )
    vhr = VhrConfig(width, height, region_radius, update_threshold)
    contention = ContentionConfig(
        n_priority_slots=pr.take("n_priority_slots", "int", 4, check=_at_least_one),
        n_elim_slots=pr.take("n_elim_slots", "int", 12, check=_at_least_one),
        n_yield_slots=pr.take("n_yield_slots", "int", 14, check=_at_least_one),
        slot_duration=max(1, _us(pr.take("slot_duration", "float", 10e-6, check=_positive))),
    )
    class_width = pr.take("class_width", "float", None, check=_positive)
    retry_budget = pr.take("retry_budget", "int", 3, check=_non_negative)
    retry_backoff = _us(pr.take("retry_backoff", "float", 0.025, check=_positive))
    handshake_timeout = _us(pr.take("handshake_timeout", "float", 0.05, check=_positive))
    candidate_paths = pr.take("candidate_paths", "int", 3, check=_at_least_one)
    candidate_spacing = _us(pr.take("candidate_spacing", "float", 0.06, check=_non_negative))
    wait_window = _us(pr.take("wait_window", "float", 0.2, check=_positive))
    alert_threshold = pr.take("alert_threshold", "float", update_threshold, check=_positive)
    backward_fallback = pr.take("backward_fallback", "bool", False)
    watchdog_timeout = _us(pr.take("watchdog_timeout", "float", 0.05, check=_positive))
    watchdog_threshold = pr.take("watchdog_threshold", "int", 3, check=_at_least_one)
    probe_timeout = _us(pr.take("probe_timeout", "float", 0.01, check=_positive))
    probe_tolerance = pr.take("probe_tolerance", "float", 10.0, check=_positive)
    service_latency = _us(pr.take("service_latency", "float", 0.001, check=_positive))
    trust_request_timeout = _us(pr.take("trust_request_timeout", "float", 0.02, check=_positive))
    pr.reject_unknown()

    # [defenses]
    df = table("defenses")
    defenses = Defenses(
        watchdog=df.take("watchdog", "bool", True),
        path_selector=df.take("path_selector", "bool", True),
        sybil_probe=df.take("sybil_probe", "bool", True),
        alerts=df.take("alerts", "bool", True),
        authenticate_source=df.take("authenticate_source", "bool", False),
        handshake=df.take("handshake", "bool", True),
    )
    df.reject_unknown()

    # [trust]
    tr = table("trust")
    trust_floor = tr.take("floor", "int", 3, check=_trust)
    default_unknown = tr.take("default_unknown", "int", 0, check=_trust)
    granted = tr.take("granted_level", "int", trust_floor, check=_trust)
    raw_levels = tr.take("levels", "table", {})
    tr.reject_unknown()
    trust_levels: Dict[NodeId, int] = {}
    for key, level in raw_levels.items():
        if not str(key).isdigit() or known(int(key)):
            raise tr.error("levels", f"unknown node {key}")
        if isinstance(level, bool) or not isinstance(level, int) or _trust(level):
            raise tr.error("levels", f"trust level of node {key} must be in [0, {TRUST_MAX}]")
        trust_levels[NodeId(int(key))] = level

    discovery = DiscoveryConfig(
        contention=contention,
        retry_budget=retry_budget,
        retry_backoff=retry_backoff,
        handshake_timeout=handshake_timeout,
        candidate_paths=candidate_paths,
        candidate_spacing=candidate_spacing,
        wait_window=wait_window,
        alerts=defenses.alerts,
        alert_threshold=alert_threshold,
        class_width=class_width,
        backward_fallback=backward_fallback,
        authenticate_source=defenses.authenticate_source,
        default_unknown_trust=default_unknown,
    )

    # [[adversaries]]
    adversaries = []
    seen: Dict[int, str] = {}
    for adv in array("adversaries"):
        node = adv.take("node", "int", check=known)
        if node in seen:
            raise adv.error("node", f"node {node} already has an adversary profile")
        kind = adv.take(
            "kind", "str", check=lambda v: None if v in ("dropper", "sybil") else "must be dropper or sybil"
        )
        if kind == "dropper":
            profile = AdversaryProfile(NodeId(node), AdversaryKind.DROPPER, adv.take("p", "float", 1.0, check=_probability))
        else:
            claimed = adv.take("claimed", "list", check=inside)
            profile = AdversaryProfile(NodeId(node), AdversaryKind.SYBIL, claimed_pos=Position(float(claimed[0]), float(claimed[1])))
        adv.reject_unknown()
        seen[node] = kind
        adversaries.append(profile)

    # [[traffic]]
    traffic = []
    for tf in array("traffic"):
        source = tf.take("source", "int", check=known)
        dest = tf.take("destination", "int", check=known)
        if dest == source:
            raise tf.error("destination", "must differ from source")
        flow_mode = tf.take("mode", "int", None, check=_mode)
        level = tf.take(
            "security_level", "str", None,
            check=lambda v: None if v in SECURITY_LEVELS else f"must be one of {sorted(SECURITY_LEVELS)}",
        )
        data_start = tf.take("data_start", "float", None, check=_non_negative)
        traffic.append(
            TrafficFlow(
                source=NodeId(source),
                destination=NodeId(dest),
                start=_us(tf.take("start", "float", 0.0, check=_non_negative)),
                packets=tf.take("packets", "int", 10, check=_non_negative),
                interval=_us(tf.take("interval", "float", 0.1, check=_positive)),
                mode=ModeFlag(flow_mode) if flow_mode is not None else None,
                security_level=level,
                data_start=_us(data_start) if data_start is not None else None,
            )
        )
        tf.reject_unknown()

    # [[failures]]
    failures = []
    for fl in array("failures"):
        failures.append(Failure(NodeId(fl.take("node", "int", check=known)), _us(fl.take("at", "float", check=_non_negative))))
        fl.reject_unknown()

    return ScenarioConfig(
        name=name,
        seed=seed,
        duration=duration,
        width=width,
        height=height,
        node_count=count,
        radio=radio,
        mode=mode,
        placements=placements,
        servers=servers,
        mobility_model=model,
        mobile=mobile,
        min_speed=min_speed,
        max_speed=max_speed,
        pause=pause,
        mobility_step=step,
        moves=tuple(moves),
        beacon_interval=beacon_interval,
        verify=verify,
        vhr=vhr,
        discovery=discovery,
        watchdog_timeout=watchdog_timeout,
        watchdog_threshold=watchdog_threshold,
        probe_timeout=probe_timeout,
        probe_tolerance=probe_tolerance,
        service_latency=service_latency,
        trust_request_timeout=trust_request_timeout,
        defenses=defenses,
        trust_floor=trust_floor,
        granted_trust=granted,
        trust_levels=trust_levels,
        adversaries=tuple(adversaries),
        traffic=tuple(traffic),
        failures=tuple(failures),
    )


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
