"""
neighbors.py
------------
Beacon-driven neighbor table with two position checks (acceptance range and
plausible speed) and the timed M1/M2 handshake that bounds a neighbor's
distance by the round-trip delay.
"""

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, Optional

from model import (
    MICROS_PER_SECOND,
    KeyAuthority,
    KeyToken,
    NodeId,
    Position,
    SealError,
    SimTime,
    check_trust_level,
    distance,
)

logger = logging.getLogger(__name__)


class Verdict(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"


@dataclass(frozen=True)
class VerifyConfig:
    range_threshold: float = 300.0
    max_speed: float = 20.0
    trust_penalty: int = 1
    initial_trust: int = 5
    processing_delay: SimTime = 0

    def __post_init__(self) -> None:
        if self.range_threshold <= 0:
            raise ValueError("range_threshold must be positive")
        if self.max_speed <= 0:
            raise ValueError("max_speed must be positive")
        if self.trust_penalty < 1:
            raise ValueError("trust_penalty must be at least 1")
        if self.processing_delay < 0:
            raise ValueError("processing_delay must be non-negative")
        check_trust_level(self.initial_trust)


@dataclass
class NeighborEntry:
    id: NodeId
    position: Position
    last_beacon_time: SimTime
    public_key: Optional[bytes] = None
    trust_value: int = 5
    tusn: int = 0


@dataclass(frozen=True)
class Beacon:
    sender: NodeId
    position: Position
    tusn: int

    LAYOUT = ">Iddq"

    def to_bytes(self) -> bytes:
        return struct.pack(self.LAYOUT, self.sender, self.position.x, self.position.y, self.tusn)


@dataclass(frozen=True)
class HandshakeResult:
    entry: Optional[NeighborEntry]
    outcome: str
    bound: float = 0.0
    claimed: float = 0.0

    @property
    def accepted(self) -> bool:
        return self.entry is not None


@dataclass(frozen=True)
class HelloM1:
    sender: NodeId
    certificate: bytes
    nonce: int


@dataclass(frozen=True)
class ReplyM2:
    responder: NodeId
    position: Position
    public_key: bytes
    certificate: bytes
    nonce: int


def distance_bound(t0: SimTime, t1: SimTime, c: float, slack: SimTime = 0) -> float:
    """Upper bound on a neighbor's distance from the M1/M2 round trip: (d/2)·c.

    ``slack`` is the responder's configured processing delay in µs; it widens
    the bound by the distance light covers in half that time.
    """
    d = max(0, t1 - t0)
    return (d + slack) * c / (2 * MICROS_PER_SECOND)


def answer_hello(authority: KeyAuthority, me: KeyToken, my_cert: bytes, position: Position, hello: HelloM1) -> Optional[ReplyM2]:
    """Reply to a hello only when its certificate checks out."""
    try:
        owner, _ = authority.verify(hello.certificate)
    except SealError:
        logger.debug("node %s: hello from %s carries a bad certificate", me.owner, hello.sender)
        return None
    if owner != hello.sender:
        logger.debug("node %s: certificate owner %s does not match sender %s", me.owner, owner, hello.sender)
        return None
    return ReplyM2(me.owner, position, me.public_part, my_cert, hello.nonce)


class NeighborTable:
    def __init__(self, owner: NodeId, config: VerifyConfig):
        self.owner = owner
        self.config = config
        self.entries: Dict[NodeId, NeighborEntry] = {}
        self._hellos: Dict[int, SimTime] = {}
        self._nonce = 0

    def __contains__(self, node: object) -> bool:
        return node in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[NeighborEntry]:
        return iter(self.entries.values())

    def get(self, node: NodeId) -> Optional[NeighborEntry]:
        return self.entries.get(node)

    def penalize(self, node: NodeId) -> None:
        entry = self.entries.get(node)
        if entry is not None:
            entry.trust_value = max(0, entry.trust_value - self.config.trust_penalty)

    def is_ignored(self, node: NodeId) -> bool:
        """Entries at trust 0 stay in the table but routing skips them."""
        entry = self.entries.get(node)
        return entry is not None and entry.trust_value == 0

    def _add(self, beacon: Beacon, now: SimTime) -> NeighborEntry:
        entry = NeighborEntry(
            id=beacon.sender,
            position=beacon.position,
            last_beacon_time=now,
            trust_value=self.config.initial_trust,
            tusn=beacon.tusn,
        )
        self.entries[beacon.sender] = entry
        return entry

    def within_range(self, own_pos: Position, claimed: Position) -> bool:
        return distance(own_pos, claimed) <= self.config.range_threshold

    def verify_beacon_range(self, own_pos: Position, beacon: Beacon, now: SimTime, update: bool = True) -> Verdict:
        if not self.within_range(own_pos, beacon.position):
            self.penalize(beacon.sender)
            return Verdict.REJECT
        if update:
            entry = self.entries.get(beacon.sender)
            if entry is None:
                self._add(beacon, now)
            else:
                entry.position = beacon.position
                entry.last_beacon_time = now
                entry.tusn = max(entry.tusn, beacon.tusn)
        return Verdict.ACCEPT

    def verify_beacon_mobility(self, beacon: Beacon, now: SimTime) -> Verdict:
        entry = self.entries.get(beacon.sender)
        if entry is None:
            self._add(beacon, now)
            return Verdict.ACCEPT
        moved = distance(entry.position, beacon.position)
        elapsed = now - entry.last_beacon_time
        if elapsed <= 0:
            ok = moved == 0.0
        else:
            ok = moved / (elapsed / MICROS_PER_SECOND) <= self.config.max_speed
        if not ok:
            self.penalize(beacon.sender)
            return Verdict.REJECT
        entry.position = beacon.position
        entry.last_beacon_time = now
        entry.tusn = max(entry.tusn, beacon.tusn)
        return Verdict.ACCEPT

    def process_beacon(self, own_pos: Position, beacon: Beacon, now: SimTime) -> Verdict:
        """Range check first as a gate, then the speed check applies the update."""
        if self.verify_beacon_range(own_pos, beacon, now, update=False) is Verdict.REJECT:
            return Verdict.REJECT
        return self.verify_beacon_mobility(beacon, now)

    def touch(self, node: NodeId, now: SimTime, position: Optional[Position] = None) -> None:
        """Refresh location and TUSN after an accepted request from ``node``."""
        entry = self.entries.get(node)
        if entry is None:
            return
        entry.tusn += 1
        entry.last_beacon_time = max(entry.last_beacon_time, now)
        if position is not None:
            entry.position = position

    # -- timed handshake ---------------------------------------------------

    def start_handshake(self, now: SimTime) -> int:
        self._nonce += 1
        self._hellos[self._nonce] = now
        return self._nonce

    def complete_handshake(
        self, authority: KeyAuthority, own_pos: Position, reply: ReplyM2, now: SimTime, c: float
    ) -> HandshakeResult:
        """Accept ``reply`` iff its certificate verifies, its claimed distance fits the
        timing bound and the claimed position lies within the range threshold."""
        t0 = self._hellos.get(reply.nonce)
        if t0 is None:
            logger.debug("node %s: reply from %s for unknown nonce %d", self.owner, reply.responder, reply.nonce)
            return HandshakeResult(None, "unknown_nonce")
        try:
            owner, public = authority.verify(reply.certificate)
        except SealError:
            return HandshakeResult(None, "bad_certificate")
        if owner != reply.responder or public != reply.public_key:
            return HandshakeResult(None, "bad_certificate")
        bound = distance_bound(t0, now, c, slack=self.config.processing_delay)
        claimed = distance(own_pos, reply.position)
        if claimed > bound:
            logger.info(
                "node %s: %s claims %.1f m but timing allows %.1f m; suspected wormhole",
                self.owner,
                reply.responder,
                claimed,
                bound,
            )
            return HandshakeResult(None, "suspected_wormhole", bound, claimed)
        if not self.within_range(own_pos, reply.position):
            logger.debug("node %s: %s claims %.1f m, beyond the range threshold", self.owner, reply.responder, claimed)
            return HandshakeResult(None, "out_of_range", bound, claimed)
        entry = self.entries.get(reply.responder)
        if entry is None:
            entry = NeighborEntry(
                id=reply.responder,
                position=reply.position,
                last_beacon_time=now,
                trust_value=self.config.initial_trust,
            )
            self.entries[reply.responder] = entry
        entry.public_key = reply.public_key
        entry.position = reply.position
        return HandshakeResult(entry, "accepted", bound, claimed)
