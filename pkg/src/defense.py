"""
defense.py
----------
Adversary behaviors and the server-side defenses against them.

  * packet droppers and Sybil nodes (AdversaryProfile)
  * the watchdog: a per-server buffer of packets a node received for
    forwarding, with a failure count bumped when one times out
  * the path selector: denies route membership to flagged nodes
  * Sybil probing: a geocast to a claimed position; silence means Sybil
"""

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np

from model import NodeId, Position, SimTime, distance

logger = logging.getLogger(__name__)


class AdversaryKind(str, Enum):
    DROPPER = "dropper"
    SYBIL = "sybil"


class ForwardDecision(str, Enum):
    FORWARD = "forward"
    DROP = "drop"


class SelectorDecision(str, Enum):
    ALLOW = "allow"
    DENY = "deny"


class SybilVerdict(str, Enum):
    LEGITIMATE = "legitimate"
    SYBIL = "sybil"


@dataclass(frozen=True)
class AdversaryProfile:
    node: NodeId
    kind: AdversaryKind
    drop_probability: float = 0.0
    claimed_pos: Optional[Position] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"drop probability must be in [0, 1], got {self.drop_probability}")
        if self.kind is AdversaryKind.SYBIL and self.claimed_pos is None:
            raise ValueError("a sybil profile needs a claimed position")

    @property
    def is_dropper(self) -> bool:
        return self.kind is AdversaryKind.DROPPER

    @property
    def is_sybil(self) -> bool:
        return self.kind is AdversaryKind.SYBIL


def adversary_forward_decision(
    profile: Optional[AdversaryProfile], rng: np.random.Generator
) -> ForwardDecision:
    if profile is None or not profile.is_dropper:
        return ForwardDecision.FORWARD
    if rng.random() < profile.drop_probability:
        return ForwardDecision.DROP
    return ForwardDecision.FORWARD


class Watchdog:
    """Pending-packet buffer and failure counts kept by one server."""

    def __init__(self, timeout: SimTime = 50_000, threshold: int = 3):
        if timeout <= 0:
            raise ValueError("watchdog timeout must be positive")
        if threshold < 1:
            raise ValueError("watchdog threshold must be at least 1")
        self.timeout = timeout
        self.threshold = threshold
        self.pending: Dict[Tuple[NodeId, int], SimTime] = {}
        self.failure_rate: Dict[NodeId, int] = {}
        self.observed: Set[NodeId] = set()

    def observe_receive(self, node: NodeId, packet_id: int, now: SimTime) -> SimTime:
        deadline = now + self.timeout
        self.pending[(node, packet_id)] = deadline
        self.observed.add(node)
        return deadline

    def has_observed(self, node: NodeId) -> bool:
        return node in self.observed or node in self.failure_rate

    def observe_transmit(self, node: NodeId, packet_id: int) -> bool:
        if self.pending.pop((node, packet_id), None) is None:
            logger.debug("watchdog: transmit of packet %d by %s with nothing pending", packet_id, node)
            return False
        return True

    def expire(self, node: NodeId, packet_id: int, now: SimTime) -> bool:
        """Called at a deadline; counts a failure if the packet is still pending."""
        deadline = self.pending.get((node, packet_id))
        if deadline is None or deadline > now:
            return False
        del self.pending[(node, packet_id)]
        self.failure_rate[node] = self.failure_rate.get(node, 0) + 1
        return True

    def is_misbehaving(self, node: NodeId) -> bool:
        return self.failure_rate.get(node, 0) >= self.threshold


@dataclass
class PathSelector:
    """Gate between a contention winner and route membership.

    Ratings and watchdog failure counts are one and the same counter.
    """

    watchdogs: List[Watchdog] = field(default_factory=list)

    def rating(self, node: NodeId) -> int:
        return max((w.failure_rate.get(node, 0) for w in self.watchdogs), default=0)

    def check(self, candidate: Optional[NodeId]) -> SelectorDecision:
        if candidate is None or not any(w.has_observed(candidate) for w in self.watchdogs):
            logger.info("path selector: %s not observed yet, allowing", candidate)
            return SelectorDecision.ALLOW
        if any(w.is_misbehaving(candidate) for w in self.watchdogs):
            return SelectorDecision.DENY
        return SelectorDecision.ALLOW


def pathselector_check(watchdogs: Iterable[Watchdog], candidate: Optional[NodeId]) -> SelectorDecision:
    return PathSelector(list(watchdogs)).check(candidate)


# ---------------------------------------------------------------------------
# Sybil probing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SybilProbe:
    probe_id: int
    target: Position
    deadline: SimTime

    LAYOUT = ">Iddq"

    def to_bytes(self) -> bytes:
        return struct.pack(self.LAYOUT, self.probe_id, self.target.x, self.target.y, self.deadline)


@dataclass(frozen=True)
class SybilProbeReply:
    probe_id: int
    responder_pos: Position


@dataclass
class ProbeState:
    probe_id: int
    target: Position
    deadline: SimTime
    answered: bool = False
    verdict: Optional[SybilVerdict] = None


class SybilProber:
    def __init__(self, timeout: SimTime = 10_000, tolerance: float = 10.0):
        if timeout <= 0 or tolerance <= 0:
            raise ValueError("probe timeout and tolerance must be positive")
        self.timeout = timeout
        self.tolerance = tolerance
        self.probes: Dict[int, ProbeState] = {}
        self._next = 0

    def start(self, target: Position, now: SimTime) -> SybilProbe:
        self._next += 1
        state = ProbeState(self._next, target, now + self.timeout)
        self.probes[state.probe_id] = state
        return SybilProbe(state.probe_id, target, state.deadline)

    def on_reply(self, reply: SybilProbeReply, now: SimTime) -> Optional[SybilVerdict]:
        """First in-time reply settles the probe; returns the verdict once."""
        state = self.probes.get(reply.probe_id)
        if state is None or now > state.deadline:
            return None
        del self.probes[reply.probe_id]
        state.answered = True
        state.verdict = SybilVerdict.LEGITIMATE
        return state.verdict

    def on_timeout(self, probe_id: int) -> Optional[SybilVerdict]:
        state = self.probes.pop(probe_id, None)
        if state is None:
            return None
        state.verdict = SybilVerdict.SYBIL
        return state.verdict


def should_answer_probe(own_pos: Position, probe: SybilProbe, tolerance: float) -> bool:
    return distance(own_pos, probe.target) <= tolerance


# ---------------------------------------------------------------------------
# Server-side validation of a contention winner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidateRequest:
    validation_id: int
    requester: NodeId
    claimed_position: Position


@dataclass(frozen=True)
class ValidateVerdict:
    validation_id: int
    verdict: str
