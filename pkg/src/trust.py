"""
trust.py
--------
Trust tables, source authentication, trust strings carried on route replies,
and the final route choice between the gathered candidates.

Mode 1 picks the candidate with the highest average trust digit, mode 2 the
fewest hops; each falls back on the other criterion and then on arrival order.
"""

import logging
import math
import struct
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Dict, Optional, Sequence, Tuple, TypeVar

from model import NodeId, PseudoId, SealError, SimTime, check_trust_level, seal, unseal

logger = logging.getLogger(__name__)


class ModeFlag(IntEnum):
    TRUSTED = 1
    SHORTEST = 2


SECURITY_LEVELS = {"high": ModeFlag.TRUSTED, "normal": ModeFlag.SHORTEST}


def mode_for(mode: Optional[int], security_level: Optional[str], default: ModeFlag) -> ModeFlag:
    """Flow mode: explicit mode wins, then the application's security level."""
    if mode is not None:
        return ModeFlag(mode)
    if security_level is not None:
        return SECURITY_LEVELS[security_level]
    return default


class AuthDecision(str, Enum):
    ACCEPT = "accept"
    DROP = "drop"
    PENDING = "pending"


class TrustTable:
    def __init__(self, levels: Optional[Dict[NodeId, int]] = None):
        self.levels: Dict[NodeId, int] = {}
        for node, level in (levels or {}).items():
            self.grant(node, level)

    def __contains__(self, node: object) -> bool:
        return node in self.levels

    def grant(self, node: NodeId, level: int) -> None:
        self.levels[node] = check_trust_level(level)

    def level_of(self, node: NodeId, default: int) -> int:
        return self.levels.get(node, default)


@dataclass(frozen=True)
class TrustString:
    digits: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for d in self.digits:
            check_trust_level(d)

    def __len__(self) -> int:
        return len(self.digits)

    def __str__(self) -> str:
        return "".join(str(d) for d in self.digits)

    def append(self, level: int) -> "TrustString":
        return TrustString(self.digits + (check_trust_level(level),))

    @classmethod
    def parse(cls, text: str) -> "TrustString":
        return cls(tuple(int(ch) for ch in text))


def avg_trust(s: TrustString) -> float:
    if not s.digits:
        raise ValueError("average trust of an empty trust string is undefined")
    return sum(s.digits) / len(s.digits)


RrepT = TypeVar("RrepT")


def append_trust(rrep: RrepT, forwarder_level: int) -> RrepT:
    """Copy of ``rrep`` with one more trust digit (any dataclass with ``trust_string``)."""
    return replace(rrep, trust_string=rrep.trust_string.append(forwarder_level))  # type: ignore[attr-defined]


@dataclass(frozen=True)
class RouteCandidate:
    request_id: int
    path: Tuple[PseudoId, ...]
    hop_count: int
    trust_string: TrustString
    arrival: int

    def __post_init__(self) -> None:
        if self.hop_count < 1:
            raise ValueError("a route has at least one hop")

    @property
    def average(self) -> float:
        return avg_trust(self.trust_string) if self.trust_string.digits else math.nan


def _trusted_key(c: RouteCandidate) -> Tuple[float, int, int]:
    return (-c.average, c.hop_count, c.arrival)


def _shortest_key(c: RouteCandidate) -> Tuple[int, float, int]:
    avg = c.average
    return (c.hop_count, math.inf if math.isnan(avg) else -avg, c.arrival)


def route_select(mode: ModeFlag, candidates: Sequence[RouteCandidate]) -> Optional[RouteCandidate]:
    """Best candidate for ``mode``; None when there is nothing to choose from."""
    if not candidates:
        return None
    if mode is ModeFlag.TRUSTED:
        rated = [c for c in candidates if c.trust_string.digits]
        if rated:
            return min(rated, key=_trusted_key)
        # only relay-free routes: nothing to rate, fall back to hop count
    return min(candidates, key=_shortest_key)


# ---------------------------------------------------------------------------
# Source authentication
# ---------------------------------------------------------------------------

def authenticate_source(table: TrustTable, source: NodeId, trust_floor: int) -> AuthDecision:
    if source not in table:
        return AuthDecision.PENDING
    if table.level_of(source, 0) >= trust_floor:
        return AuthDecision.ACCEPT
    return AuthDecision.DROP


@dataclass(frozen=True)
class TrustRequest:
    requester: NodeId
    subject: NodeId
    timestamp: SimTime


@dataclass(frozen=True)
class TrustResponse:
    requester: NodeId
    subject: NodeId
    verdict: bool
    timestamp: SimTime
    signature: bytes = b""

    LAYOUT = ">II?q"

    def body(self) -> bytes:
        return struct.pack(self.LAYOUT, self.requester, self.subject, self.verdict, self.timestamp)


def sign_response(secret_part: bytes, response: TrustResponse) -> TrustResponse:
    return replace(response, signature=seal(secret_part, response.body()))


def verify_response(public_part: bytes, response: TrustResponse) -> bool:
    try:
        return unseal(public_part, response.signature) == response.body()
    except SealError:
        return False


class SourceAuthenticator:
    """Tracks which sources have a trust request in flight.

    Requests from a pending source are dropped; the sender's next contention
    attempt is admitted once the grant is in.
    """

    def __init__(self, table: TrustTable, trust_floor: int, timeout: SimTime, granted_level: int):
        self.table = table
        self.trust_floor = trust_floor
        self.timeout = timeout
        self.granted_level = check_trust_level(granted_level)
        self.pending: Dict[NodeId, SimTime] = {}

    def decide(self, source: NodeId) -> AuthDecision:
        return authenticate_source(self.table, source, self.trust_floor)

    def park(self, source: NodeId, now: SimTime) -> bool:
        """Mark ``source`` pending; True if a trust request must go out for it."""
        if source in self.pending:
            return False
        self.pending[source] = now + self.timeout
        return True

    def resolve(self, response: TrustResponse, public_part: Optional[bytes], now: SimTime) -> bool:
        """Grant trust if a valid 'yes' arrived in time."""
        deadline = self.pending.get(response.subject)
        if deadline is None or now > deadline:
            return False
        del self.pending[response.subject]
        if not response.verdict or public_part is None or not verify_response(public_part, response):
            logger.info("trust response about %s rejected", response.subject)
            return False
        self.table.grant(response.subject, max(self.granted_level, self.trust_floor))
        return True

    def expire(self, source: NodeId, now: SimTime) -> bool:
        deadline = self.pending.get(source)
        if deadline is None or now < deadline:
            return False
        del self.pending[source]
        return True
