"""
metrics.py
----------
Trace records, the trace sink, and the run metrics folded out of a trace.

Trace line format (one record per line, UTF-8, LF):

    t=<µs> ev=<kind> node=<actor> <key>=<value> ...

Metrics are computed only from trace records, so a trace file is enough to
re-derive every number a run reports.
"""

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import pandas as pd

from model import PseudoId, SimTime


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    if isinstance(value, PseudoId):
        return value.short()
    return str(value)


@dataclass(frozen=True)
class TraceRecord:
    time: SimTime
    seq: int
    event: str
    actor: str
    details: Tuple[Tuple[str, str], ...] = ()

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.details:
            if k == key:
                return v
        return default

    def line(self) -> str:
        parts = [f"t={self.time}", f"ev={self.event}", f"node={self.actor}"]
        parts.extend(f"{k}={v}" for k, v in self.details)
        return " ".join(parts)


class TraceSink:
    """Collects trace records in processing order; optionally mirrors them to a stream."""

    def __init__(self, stream: Optional[TextIO] = None):
        self.records: List[TraceRecord] = []
        self.stream = stream

    def record(self, time: SimTime, event: str, actor: str, **details: object) -> None:
        rec = TraceRecord(
            time=time,
            seq=len(self.records),
            event=event,
            actor=actor,
            details=tuple((k, format_value(v)) for k, v in details.items()),
        )
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(rec.line() + "\n")

    def events(self, event: str) -> List[TraceRecord]:
        return [r for r in self.records if r.event == event]

    def text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    def write(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.text())


def is_ordered(records: Sequence[TraceRecord]) -> bool:
    """True iff records are strictly increasing in (time, seq)."""
    return all((a.time, a.seq) < (b.time, b.seq) for a, b in zip(records, records[1:]))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    delivery_ratio: float = math.nan
    route_discovery_success: float = math.nan
    mean_hops: float = math.nan
    chosen_path_avg_trust: float = math.nan
    sybil_false_denial_rate: float = math.nan
    data_sent: int = 0
    data_delivered: int = 0
    data_unrouted: int = 0
    sessions: int = 0
    routes_selected: int = 0
    hrep_collisions: int = 0
    dead_ends: int = 0
    auth_failures: int = 0
    alerts_sent: int = 0
    position_service_failures: int = 0
    watchdog_true_positives: int = 0
    watchdog_false_positives: int = 0
    sybil_true_positives: int = 0
    sybil_false_positives: int = 0
    messages_total: int = 0
    control_overhead: Dict[str, int] = field(default_factory=dict)
    contention_rounds: Dict[int, int] = field(default_factory=dict)

    def as_row(self) -> Dict[str, object]:
        """Flat dict for batch tables (histograms flattened with dotted keys)."""
        row: Dict[str, object] = {}
        for name, value in _flatten(self):
            row[name] = value
        return row


_FLOAT_FIELDS = [f.name for f in fields(Metrics) if f.type in (float, "float")]
_DICT_FIELDS = ("control_overhead", "contention_rounds")


def _ratio(num: float, den: float) -> float:
    return round(num / den, 6) if den else math.nan


def _mean(series: pd.Series) -> float:
    values = pd.to_numeric(series, errors="coerce").dropna()
    return round(float(values.mean()), 6) if len(values) else math.nan


def trace_frame(records: Iterable[TraceRecord]) -> pd.DataFrame:
    rows = [{"time": r.time, "seq": r.seq, "event": r.event, "actor": r.actor, **dict(r.details)} for r in records]
    if not rows:
        return pd.DataFrame(columns=["time", "seq", "event", "actor"])
    return pd.DataFrame(rows)


def compute_metrics(
    records: Sequence[TraceRecord],
    droppers: Iterable[int] = (),
    sybils: Iterable[int] = (),
) -> Metrics:
    df = trace_frame(records)
    dropper_ids = {str(n) for n in droppers}
    sybil_ids = {str(n) for n in sybils}

    def ev(name: str) -> pd.DataFrame:
        return df[df["event"] == name]

    m = Metrics()
    m.data_sent = len(ev("data_sent"))
    m.data_delivered = len(ev("data_delivered"))
    m.data_unrouted = len(ev("data_unrouted"))
    m.delivery_ratio = _ratio(m.data_delivered, m.data_sent)

    m.sessions = len(ev("session_start"))
    selected = ev("route_selected")
    m.routes_selected = len(selected)
    m.route_discovery_success = _ratio(m.routes_selected, m.sessions)
    if len(selected):
        m.mean_hops = _mean(selected["hops"])
        m.chosen_path_avg_trust = _mean(selected["avg_trust"])

    m.hrep_collisions = len(ev("hrep_collision"))
    m.dead_ends = len(ev("dead_end"))
    m.auth_failures = len(ev("auth_failure"))
    m.alerts_sent = len(ev("alert_sent"))
    m.position_service_failures = len(ev("pos_service_failure"))

    sends = ev("send")
    m.messages_total = len(sends)
    if len(sends):
        counts = sends[sends["kind"] != "data"]["kind"].value_counts()
        m.control_overhead = {str(k): int(v) for k, v in sorted(counts.items())}

    hops = ev("hop_established")
    if len(hops):
        attempts = pd.to_numeric(hops["attempts"]).astype(int).value_counts()
        m.contention_rounds = {int(k): int(v) for k, v in sorted(attempts.items())}

    flagged = ev("watchdog_flag")
    if len(flagged):
        suspects = sorted(set(flagged["suspect"]))
        m.watchdog_true_positives = sum(1 for s in suspects if s in dropper_ids)
        m.watchdog_false_positives = len(suspects) - m.watchdog_true_positives

    checks = ev("validation")
    if len(checks):
        denied = checks[checks["verdict"] == "sybil"]
        m.sybil_true_positives = int(denied["actual"].isin(sybil_ids).sum())
        m.sybil_false_positives = len(denied) - m.sybil_true_positives
        honest = checks[~checks["actual"].isin(sybil_ids)]
        m.sybil_false_denial_rate = _ratio(m.sybil_false_positives, len(honest))
    return m


# ---------------------------------------------------------------------------
# Emission and parsing
# ---------------------------------------------------------------------------

def _flatten(m: Metrics) -> List[Tuple[str, object]]:
    out: List[Tuple[str, object]] = []
    for f in fields(m):
        value = getattr(m, f.name)
        if f.name in _DICT_FIELDS:
            for key in sorted(value):
                out.append((f"{f.name}.{key}", value[key]))
        else:
            out.append((f.name, value))
    return out


def _machine_value(value: object) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def emit_metrics(m: Metrics, fmt: str = "machine") -> str:
    """Render metrics as ``machine`` key = value lines or a ``human`` table."""
    items = _flatten(m)
    if fmt == "machine":
        return "".join(f"{k} = {_machine_value(v)}\n" for k, v in items)
    if fmt == "human":
        width = max(len(k) for k, _ in items)
        lines = [f"{'metric'.ljust(width)}  value", f"{'-' * width}  -----"]
        for k, v in items:
            shown = "nan (no samples)" if isinstance(v, float) and math.isnan(v) else _machine_value(v)
            lines.append(f"{k.ljust(width)}  {shown}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown metrics format '{fmt}' (expected machine or human)")


def parse_metrics(text: str) -> Metrics:
    """Inverse of ``emit_metrics(m, 'machine')``."""
    m = Metrics()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got '{raw}'")
        name, _, sub = key.partition(".")
        if name in _DICT_FIELDS:
            bucket = getattr(m, name)
            bucket[int(sub) if name == "contention_rounds" else sub] = int(value)
        elif name in _FLOAT_FIELDS:
            setattr(m, name, float(value))
        elif hasattr(m, name):
            setattr(m, name, int(value))
        else:
            raise ValueError(f"line {lineno}: unknown metric '{name}'")
    return m


def metrics_equal(a: Metrics, b: Metrics) -> bool:
    """Equality that treats nan as equal to nan."""
    for (ka, va), (kb, vb) in zip(_flatten(a), _flatten(b)):
        if ka != kb:
            return False
        if isinstance(va, float) and isinstance(vb, float) and math.isnan(va) and math.isnan(vb):
            continue
        if va != vb:
            return False
    return len(_flatten(a)) == len(_flatten(b))
