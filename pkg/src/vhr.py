"""
vhr.py
------
Virtual Home Region position service.

Every node ID hashes to a fixed center in the field; the servers that sit
within ``region_radius`` of that center hold the node's position record
(position, update time, auth code). Nodes push an update whenever they have
moved more than ``update_threshold`` meters since the last report, and
requesters query the nearest server inside the target's region.
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from model import NodeId, Position, SimTime, distance, hash_digest

logger = logging.getLogger(__name__)

MILLIMETERS = 1000


@dataclass(frozen=True)
class VhrConfig:
    field_width: float
    field_height: float
    region_radius: float
    update_threshold: float = 50.0

    def __post_init__(self) -> None:
        for name in ("field_width", "field_height", "region_radius", "update_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.region_radius >= min(self.field_width, self.field_height) / 2:
            raise ValueError("region_radius must be below half the smaller field dimension")


def vhr_center(node: NodeId, width: float, height: float) -> Position:
    """Center of ``node``'s home region: digest halves reduced modulo the field."""
    digest = hash_digest(b"vhr" + struct.pack(">I", node))
    hi = int.from_bytes(digest[:8], "big")
    lo = int.from_bytes(digest[8:], "big")
    # millimeter grid keeps the modulo exact in integers
    x = (hi % max(1, int(width * MILLIMETERS))) / MILLIMETERS
    y = (lo % max(1, int(height * MILLIMETERS))) / MILLIMETERS
    return Position(x, y)


def in_region(server_pos: Position, node: NodeId, cfg: VhrConfig) -> bool:
    center = vhr_center(node, cfg.field_width, cfg.field_height)
    return distance(server_pos, center) <= cfg.region_radius


def new_auth_code(rng: np.random.Generator) -> int:
    return int.from_bytes(rng.bytes(8), "big")


# ---------------------------------------------------------------------------
# Fixed-width payloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionRecord:
    node: NodeId
    pos: Position
    update_time: SimTime
    auth_code: int


@dataclass(frozen=True)
class PosUpdate:
    node: NodeId
    pos: Position
    time: SimTime
    auth_code: int

    LAYOUT = ">IddqQ"

    def to_bytes(self) -> bytes:
        return struct.pack(self.LAYOUT, self.node, self.pos.x, self.pos.y, self.time, self.auth_code)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PosUpdate":
        node, x, y, t, code = struct.unpack(cls.LAYOUT, raw)
        return cls(NodeId(node), Position(x, y), t, code)


@dataclass(frozen=True)
class PosRequest:
    requester: NodeId
    target: NodeId

    LAYOUT = ">II"

    def to_bytes(self) -> bytes:
        return struct.pack(self.LAYOUT, self.requester, self.target)


@dataclass(frozen=True)
class PosReply:
    target: NodeId
    found: bool
    pos: Optional[Position] = None
    update_time: SimTime = 0
    auth_code: int = 0

    LAYOUT = ">I?ddqQ"

    def to_bytes(self) -> bytes:
        x, y = (self.pos.x, self.pos.y) if self.pos else (0.0, 0.0)
        return struct.pack(self.LAYOUT, self.target, self.found, x, y, self.update_time, self.auth_code)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PosReply":
        target, found, x, y, t, code = struct.unpack(cls.LAYOUT, raw)
        return cls(NodeId(target), found, Position(x, y) if found else None, t, code)


@dataclass(frozen=True)
class MobilityAlert:
    """New destination position.

    On the reverse path it is addressed by ``request_id`` and carries no real
    ID; the copy sent to the home-region servers sets ``node``.
    """

    position: Position
    at: SimTime
    request_id: Optional[int] = None
    node: Optional[NodeId] = None


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------

@dataclass
class ServerState:
    server: NodeId
    records: Dict[NodeId, PositionRecord] = field(default_factory=dict)

    def store(self, update: PosUpdate) -> None:
        self.records[update.node] = PositionRecord(update.node, update.pos, update.time, update.auth_code)

    def prune(self, own_pos: Position, cfg: VhrConfig) -> List[NodeId]:
        """Drop records for nodes whose region no longer contains this server."""
        gone = [n for n in self.records if not in_region(own_pos, n, cfg)]
        for n in gone:
            del self.records[n]
        return gone


def handle_pos_request(server: ServerState, requester: NodeId, target: NodeId) -> PosReply:
    record = server.records.get(target)
    if record is None:
        logger.debug("server %s has no record for %s (asked by %s)", server.server, target, requester)
        return PosReply(target=target, found=False)
    return PosReply(
        target=target,
        found=True,
        pos=record.pos,
        update_time=record.update_time,
        auth_code=record.auth_code,
    )


def handle_mobility_notice(server: ServerState, alert: MobilityAlert) -> None:
    if alert.node is None:
        raise ValueError("mobility notice for a server must name the node")
    record = server.records.get(alert.node)
    if record is None:
        # no record yet: the notice is the first thing this server knows
        server.records[alert.node] = PositionRecord(alert.node, alert.position, alert.at, 0)
        return
    if alert.at < record.update_time:
        return
    server.records[alert.node] = PositionRecord(alert.node, alert.position, alert.at, record.auth_code)


def candidate_servers(
    target: NodeId,
    requester_pos: Position,
    servers: Iterable[Tuple[NodeId, Position]],
    cfg: VhrConfig,
) -> List[NodeId]:
    """Servers inside ``target``'s region, nearest first, ties by lowest id."""
    inside = [(distance(requester_pos, pos), sid) for sid, pos in servers if in_region(pos, target, cfg)]
    return [sid for _, sid in sorted(inside)]


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------

class PositionClient:
    """Per-node bookkeeping of what it reported and what it learned."""

    def __init__(self, node: NodeId, cfg: VhrConfig):
        self.node = node
        self.cfg = cfg
        self.last_reported: Optional[Position] = None
        self.auth_code: Optional[int] = None
        self.history: Dict[Tuple[float, float], int] = {}
        self.known: Dict[NodeId, PosReply] = {}

    def maybe_update_position(
        self, own_pos: Position, now: SimTime, rng: np.random.Generator
    ) -> Optional[PosUpdate]:
        if self.last_reported is not None and distance(own_pos, self.last_reported) <= self.cfg.update_threshold:
            return None
        code = new_auth_code(rng)
        self.last_reported = own_pos
        self.auth_code = code
        self.history[own_pos.key()] = code
        return PosUpdate(node=self.node, pos=own_pos, time=now, auth_code=code)

    def code_for(self, pos: Position) -> Optional[int]:
        """Auth code issued with ``pos``; None if this node never reported it."""
        return self.history.get(pos.key())

    def remember_alert_position(self, pos: Position, code: int) -> None:
        # a source that learned ``pos`` from an alert still holds ``code``
        self.history[pos.key()] = code
