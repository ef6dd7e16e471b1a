"""
discovery.py
------------
Anonymous position-based route discovery.

A hop works like this: the sender broadcasts an rreq under its pseudo ID;
every receiver classifies itself by the progress it offers toward the
destination; classes 0-3 run the prioritization / elimination / yield
contention; the unique winner answers with an hrep, the sender validates it,
sends cnfm and gets an ack. The winner then repeats the hop until the
destination (class 0) answers with an rrep sealed under its own key. The rrep
walks the reverse pseudo-ID path and picks up one trust digit per relay.

Routing tables hold pseudo IDs only. Link-layer bindings (pseudo ID to the
neighbor that sent it) are kept apart in ``RouteDiscovery.links``.
"""

import logging
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import (
    TYPE_CHECKING,
    Callable,
    Deque,
    Dict,
    Generic,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    TypeVar,
)

import numpy as np

from defense import ForwardDecision, adversary_forward_decision
from model import (
    Message,
    MessageKind,
    NodeId,
    Position,
    PseudoId,
    SealError,
    SimTime,
    SimulationError,
    decode_auth_code,
    distance,
    encode_auth_code,
    hash_digest,
    seal,
    unseal,
)
from trust import ModeFlag, RouteCandidate, TrustString, append_trust, route_select
from vhr import MobilityAlert, PosReply

if TYPE_CHECKING:  # pragma: no cover
    from kernel import Kernel
    from network import Node

logger = logging.getLogger(__name__)

K = TypeVar("K")

DESTINATION_CLASS = 0
BACKWARD_CLASS = 4


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContentionConfig:
    n_priority_slots: int = 4
    n_elim_slots: int = 12
    n_yield_slots: int = 14
    slot_duration: SimTime = 10

    def __post_init__(self) -> None:
        for name in ("n_priority_slots", "n_elim_slots", "n_yield_slots", "slot_duration"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


@dataclass(frozen=True)
class DiscoveryConfig:
    contention: ContentionConfig = field(default_factory=ContentionConfig)
    retry_budget: int = 3
    retry_backoff: SimTime = 25_000
    handshake_timeout: SimTime = 50_000
    candidate_paths: int = 3
    candidate_spacing: SimTime = 60_000
    wait_window: SimTime = 200_000
    alerts: bool = True
    alert_threshold: float = 50.0
    class_width: Optional[float] = None
    backward_fallback: bool = False
    authenticate_source: bool = False
    default_unknown_trust: int = 0
    recent_destinations: int = 32


# ---------------------------------------------------------------------------
# Pure pieces
# ---------------------------------------------------------------------------

def make_pseudo_id(pos: Position, t: SimTime) -> PseudoId:
    return PseudoId(hash_digest(b"pseudo" + struct.pack(">ddq", pos.x, pos.y, t)))


def classify_receiver(
    sender_to_dest: float,
    receiver_to_dest: float,
    r: float,
    is_destination: bool,
    class_width: Optional[float] = None,
) -> int:
    """Priority class of a receiver: 0 destination, 1-3 forward progress, 4 backward."""
    if is_destination:
        return DESTINATION_CLASS
    d = class_width if class_width is not None else r / 3.0
    progress = sender_to_dest - receiver_to_dest
    if progress > 2 * d:
        return 1
    if progress >= d:
        return 2
    if progress >= 0:
        return 3
    return BACKWARD_CLASS


def contention_prioritization(participants: Sequence[Tuple[K, int]]) -> List[K]:
    """Keep only the participants of the lowest class present."""
    if not participants:
        return []
    lowest = min(cls for _, cls in participants)
    return [key for key, cls in participants if cls == lowest]


def eliminate(survivors: Sequence[K], bursts: Sequence[int]) -> List[K]:
    longest = max(bursts)
    return [key for key, b in zip(survivors, bursts) if b == longest]


def contention_elimination(
    survivors: Sequence[K], rng: np.random.Generator, n_elim_slots: int = 12
) -> Tuple[List[K], List[int]]:
    if not survivors:
        raise ValueError("elimination needs at least one survivor")
    bursts = [int(b) for b in rng.integers(1, n_elim_slots + 1, size=len(survivors))]
    return eliminate(survivors, bursts), bursts


@dataclass(frozen=True)
class YieldOutcome(Generic[K]):
    winner: Optional[K]
    delays: Tuple[int, ...]

    @property
    def collision(self) -> bool:
        return self.winner is None

    @property
    def min_delay(self) -> int:
        return min(self.delays)


def resolve_yield(survivors: Sequence[K], delays: Sequence[int]) -> YieldOutcome[K]:
    shortest = min(delays)
    first = [key for key, y in zip(survivors, delays) if y == shortest]
    return YieldOutcome(first[0] if len(first) == 1 else None, tuple(delays))


def contention_yield(
    survivors: Sequence[K], rng: np.random.Generator, n_yield_slots: int = 14
) -> YieldOutcome[K]:
    if not survivors:
        raise ValueError("yield phase needs at least one survivor")
    delays = [int(y) for y in rng.integers(0, n_yield_slots, size=len(survivors))]
    return resolve_yield(survivors, delays)


# ---------------------------------------------------------------------------
# Wire payloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rreq:
    request_id: int
    session_id: int
    dest_pos: Position
    l: float  # sender-to-destination distance
    sender_pseudo: PseudoId
    hop_count: int
    round_id: int = 0
    attempt: int = 0
    excluded: Tuple[PseudoId, ...] = ()
    source_id: Optional[NodeId] = None


@dataclass(frozen=True)
class Hrep:
    round_id: int
    request_id: int
    receiver_pseudo: PseudoId
    claimed_position: Position
    node_class: int

    def __post_init__(self) -> None:
        if not 0 <= self.node_class <= 4:
            raise ValueError("node class must be in 0..4")


@dataclass(frozen=True)
class Cnfm:
    round_id: int
    request_id: int
    receiver_pseudo: PseudoId


@dataclass(frozen=True)
class Ack:
    round_id: int
    request_id: int


@dataclass(frozen=True)
class Rrep:
    request_id: int
    session_id: int
    sealed_auth: bytes
    trust_string: TrustString
    hop_count: int
    chain: Tuple[PseudoId, ...] = ()
    relayed: bool = False


@dataclass(frozen=True)
class DataPacket:
    packet_id: int
    request_id: int
    flow: int
    seq: int


@dataclass
class RoutingTableEntry:
    request_id: int
    prev_hop_pseudo: Optional[PseudoId]
    next_hop_pseudo: Optional[PseudoId]


def originate_rrep(
    secret_part: bytes, auth_code: int, rreq: Rreq, own_pseudo: PseudoId
) -> Rrep:
    return Rrep(
        request_id=rreq.request_id,
        session_id=rreq.session_id,
        sealed_auth=seal(secret_part, encode_auth_code(auth_code)),
        trust_string=TrustString(),
        hop_count=rreq.hop_count + 1,
        chain=(own_pseudo,),
    )


def verify_rrep(dest_public: bytes, rrep: Rrep, expected_code: Optional[int]) -> bool:
    """True iff the sealed code opens under the destination key and matches."""
    if expected_code is None:
        raise SimulationError("no auth code for this destination: the position lookup was skipped")
    try:
        return decode_auth_code(unseal(dest_public, rrep.sealed_auth)) == expected_code
    except SealError:
        return False


# ---------------------------------------------------------------------------
# Contention round bookkeeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Contender:
    node: NodeId
    node_class: int
    pseudo: PseudoId
    claimed: Position
    rreq: Optional[Rreq] = None


@dataclass
class ContentionRound:
    round_id: int
    sender: NodeId
    request_id: int
    hop: int
    attempt: int
    participants: List[Contender] = field(default_factory=list)
    open: bool = True

    def join(self, contender: Contender) -> bool:
        if not self.open:
            return False
        self.participants.append(contender)
        return True


@dataclass
class Winner:
    pseudo: PseudoId
    claimed: Position
    link: NodeId


@dataclass
class HopState:
    rreq: Rreq
    attempt: int = 0
    excluded: List[PseudoId] = field(default_factory=list)
    round: Optional[ContentionRound] = None
    winner: Optional[Winner] = None
    confirmed: Optional[Winner] = None


class SessionState(str, Enum):
    DISCOVERING = "discovering"
    READY = "ready"
    FAILED = "failed"


@dataclass
class Session:
    session_id: int
    flow: int
    destination: NodeId
    mode: ModeFlag
    started_at: SimTime
    dest_pos: Optional[Position] = None
    auth_code: Optional[int] = None
    state: SessionState = SessionState.DISCOVERING
    request_ids: List[int] = field(default_factory=list)
    candidates: List[RouteCandidate] = field(default_factory=list)
    chosen: Optional[RouteCandidate] = None
    stale: bool = False
    alert_pos: Optional[Position] = None
    buffered: List[Tuple[int, int]] = field(default_factory=list)


@dataclass
class AnsweredRequest:
    request_id: int
    prev: PseudoId
    auth_code: int
    anchor: Position


@dataclass(frozen=True)
class RecentDestination:
    request_id: int
    position: Optional[Position]
    seen_at: SimTime


# ---------------------------------------------------------------------------
# Per-node agent
# ---------------------------------------------------------------------------

class RouteDiscovery:
    """Everything one node does for route discovery, as source, relay or destination."""

    def __init__(self, node: "Node", cfg: DiscoveryConfig):
        self.node = node
        self.cfg = cfg
        self.routes: Dict[int, RoutingTableEntry] = {}
        self.links: Dict[PseudoId, NodeId] = {}
        self.pseudonyms: Dict[int, PseudoId] = {}
        self.request_sessions: Dict[int, int] = {}
        self.request_dest: Dict[int, Position] = {}
        self.joined_sessions: Set[int] = set()
        self.recent_destinations: Deque[RecentDestination] = deque(maxlen=cfg.recent_destinations)
        self.hops: Dict[int, HopState] = {}
        self.offers: Dict[int, Rreq] = {}
        self.answered: Dict[int, AnsweredRequest] = {}
        self.answers_per_session: Dict[int, int] = {}
        self.sessions: Dict[int, Session] = {}
        self.flow_sessions: Dict[int, int] = {}

    # -- helpers -----------------------------------------------------------

    @property
    def kernel(self) -> "Kernel":
        return self.node.kernel

    def _trace(self, event: str, **details: object) -> None:
        self.kernel.trace.record(self.kernel.now, event, str(self.node.id), **details)

    def pseudo_for(self, request_id: int) -> PseudoId:
        pseudo = self.pseudonyms.get(request_id)
        if pseudo is None:
            pseudo = make_pseudo_id(self.node.position, self.kernel.now)
            self.pseudonyms[request_id] = pseudo
        return pseudo

    def is_destination(self, dest_pos: Position) -> bool:
        return self.node.position_client.code_for(dest_pos) is not None

    def _send_to(self, request_id: int, pseudo: Optional[PseudoId], kind: MessageKind, payload: object) -> bool:
        link = self.links.get(pseudo) if pseudo is not None else None
        if link is None:
            self._trace("lost", kind=kind.value, req=request_id, reason="no_link")
            return False
        msg = Message(kind, self.pseudo_for(request_id), self.kernel.now, payload)
        return bool(self.kernel.unicast(self.node.id, link, msg))

    def _after(self, delay: SimTime, action: Callable[[], None], label: str) -> None:
        self.kernel.schedule_in(delay, action, label, self.node.id)

    # -- source: sessions --------------------------------------------------

    def start_flow(self, flow: int, destination: NodeId, mode: ModeFlag) -> Session:
        session = self._new_session(flow, destination, mode, reason="flow")
        self.node.lookup_position(destination, lambda reply: self._on_position(session, reply))
        return session

    def _new_session(self, flow: int, destination: NodeId, mode: ModeFlag, reason: str) -> Session:
        session = Session(
            session_id=self.node.network.next_session_id(),
            flow=flow,
            destination=destination,
            mode=mode,
            started_at=self.kernel.now,
        )
        self.sessions[session.session_id] = session
        self.flow_sessions[flow] = session.session_id
        self._trace("session_start", session=session.session_id, flow=flow, dest=destination, mode=int(mode), reason=reason)
        return session

    def _on_position(self, session: Session, reply: Optional[PosReply]) -> None:
        if reply is None or not reply.found:
            self._fail(session, "position_service")
            return
        session.dest_pos = reply.pos
        session.auth_code = reply.auth_code
        self._launch_session(session)

    def _launch_session(self, session: Session) -> None:
        for i in range(self.cfg.candidate_paths):
            self._after(i * self.cfg.candidate_spacing, lambda: self._launch_request(session), "launch")
        self._after(self.cfg.wait_window, lambda: self._select(session), "select")

    def _launch_request(self, session: Session) -> None:
        if session.state is not SessionState.DISCOVERING or session.dest_pos is None:
            return
        req = self.node.network.next_request_id()
        session.request_ids.append(req)
        self.request_sessions[req] = session.session_id
        self.request_dest[req] = session.dest_pos
        self.joined_sessions.add(session.session_id)
        pseudo = self.pseudo_for(req)
        self.routes[req] = RoutingTableEntry(req, None, None)
        rreq = Rreq(
            request_id=req,
            session_id=session.session_id,
            dest_pos=session.dest_pos,
            l=distance(self.node.position, session.dest_pos),
            sender_pseudo=pseudo,
            hop_count=0,
            source_id=self.node.id if self.cfg.authenticate_source else None,
        )
        self._begin_hop(rreq)

    def _fail(self, session: Session, reason: str) -> None:
        session.state = SessionState.FAILED
        self._trace("route_failure", session=session.session_id, reason=reason)
        for packet_id, seq in session.buffered:
            self._trace("data_unrouted", pkt=packet_id, flow=session.flow, seq=seq, reason=reason)
        session.buffered.clear()

    def _select(self, session: Session) -> None:
        if session.state is not SessionState.DISCOVERING:
            return
        chosen = route_select(session.mode, session.candidates)
        if chosen is None:
            self._fail(session, "no_candidate")
            return
        session.state = SessionState.READY
        session.chosen = chosen
        self._trace(
            "route_selected",
            session=session.session_id,
            req=chosen.request_id,
            mode=int(session.mode),
            hops=chosen.hop_count,
            trust=str(chosen.trust_string) or "-",
            avg_trust=chosen.average,
        )
        pending, session.buffered = session.buffered, []
        for packet_id, seq in pending:
            self._transmit(session, packet_id, seq)

    # -- hop handshake (sender side) ----------------------------------------

    def _begin_hop(self, rreq: Rreq) -> None:
        self.hops[rreq.request_id] = HopState(rreq=rreq)
        self._broadcast_round(rreq.request_id)

    def _broadcast_round(self, req: int) -> None:
        hop = self.hops[req]
        if hop.attempt > self.cfg.retry_budget:
            self._trace("dead_end", req=req, hop=hop.rreq.hop_count, attempts=hop.attempt)
            del self.hops[req]
            return
        hop.attempt += 1
        hop.winner = None
        round_ = self.node.network.open_round(self.node.id, req, hop.rreq.hop_count, hop.attempt)
        hop.round = round_
        rreq = replace(
            hop.rreq,
            round_id=round_.round_id,
            attempt=hop.attempt,
            excluded=tuple(hop.excluded),
            l=distance(self.node.position, hop.rreq.dest_pos),
        )
        heard = self.kernel.broadcast(self.node.id, Message(MessageKind.RREQ, self.pseudo_for(req), self.kernel.now, rreq))
        self._trace("rreq", req=req, session=rreq.session_id, hop=rreq.hop_count, attempt=hop.attempt, l=rreq.l, heard=heard)
        guard = self.kernel.radio.delay_us(self.kernel.radio.r) + 1
        self._after(guard, lambda: self._phase_priority(req, round_), "prio")

    def _current(self, req: int, round_: ContentionRound) -> Optional[HopState]:
        hop = self.hops.get(req)
        if hop is None or hop.round is not round_:
            return None
        return hop

    def _phase_priority(self, req: int, round_: ContentionRound) -> None:
        self.node.network.close_round(round_)
        if self._current(req, round_) is None:
            return
        survivors = contention_prioritization([(c, c.node_class) for c in round_.participants])
        self._trace(
            "contention", req=req, hop=round_.hop, attempt=round_.attempt, phase="prio",
            n=len(round_.participants), survivors=len(survivors),
        )
        if not survivors:
            self._after(self.cfg.retry_backoff, lambda: self._retry(req, round_), "retry")
            return
        slots = self.cfg.contention.n_priority_slots * self.cfg.contention.slot_duration
        self._after(slots, lambda: self._phase_elimination(req, round_, survivors), "elim")

    def _phase_elimination(self, req: int, round_: ContentionRound, survivors: List[Contender]) -> None:
        if self._current(req, round_) is None:
            return
        kept, _ = contention_elimination(survivors, self.kernel.rng, self.cfg.contention.n_elim_slots)
        self._trace(
            "contention", req=req, hop=round_.hop, attempt=round_.attempt, phase="elim",
            n=len(survivors), survivors=len(kept),
        )
        slots = (self.cfg.contention.n_elim_slots + 1) * self.cfg.contention.slot_duration
        self._after(slots, lambda: self._phase_yield(req, round_, kept), "yield")

    def _phase_yield(self, req: int, round_: ContentionRound, survivors: List[Contender]) -> None:
        if self._current(req, round_) is None:
            return
        outcome = contention_yield(survivors, self.kernel.rng, self.cfg.contention.n_yield_slots)
        slot = self.cfg.contention.slot_duration
        self._trace(
            "contention", req=req, hop=round_.hop, attempt=round_.attempt, phase="yield",
            n=len(survivors), survivors=0 if outcome.collision else 1,
        )
        if outcome.winner is None:
            self._trace("hrep_collision", req=req, hop=round_.hop, attempt=round_.attempt, n=len(survivors))
            self._after((outcome.min_delay + 1) * slot, lambda: self._retry(req, round_), "retry")
            return
        winner = outcome.winner
        delay = (outcome.delays[survivors.index(winner)] + 1) * slot
        peer = self.node.network.nodes[winner.node].discovery
        self.kernel.schedule_in(delay, lambda: peer.send_hrep(round_, winner), "hrep", winner.node)
        self._after(delay + self.cfg.handshake_timeout, lambda: self._handshake_expired(req, round_), "handshake")

    def _retry(self, req: int, round_: ContentionRound) -> None:
        hop = self._current(req, round_)
        if hop is None:
            return
        hop.round = None
        self._broadcast_round(req)

    def _handshake_expired(self, req: int, round_: ContentionRound) -> None:
        if self._current(req, round_) is None:
            return
        self._trace("handshake_timeout", req=req, hop=round_.hop, attempt=round_.attempt)
        self._retry(req, round_)

    def on_hrep(self, msg: Message, link_sender: NodeId) -> None:
        hrep: Hrep = msg.payload
        hop = self.hops.get(hrep.request_id)
        if hop is None or hop.round is None or hop.round.round_id != hrep.round_id or hop.winner is not None:
            return
        self.links[hrep.receiver_pseudo] = link_sender
        hop.winner = Winner(hrep.receiver_pseudo, hrep.claimed_position, link_sender)
        round_ = hop.round
        if self.node.neighbors.is_ignored(link_sender):
            self._deny(hrep.request_id, hop, "untrusted_neighbor")
            return
        if self.node.validation_enabled():
            self.node.request_validation(
                hrep.request_id,
                hrep.claimed_position,
                lambda verdict: self._on_verdict(hrep.request_id, round_, verdict),
            )
            return
        self._confirm(hrep.request_id, hop)

    def _on_verdict(self, req: int, round_: ContentionRound, verdict: str) -> None:
        hop = self._current(req, round_)
        if hop is None or hop.winner is None:
            return
        self._trace("validation", req=req, hop=round_.hop, verdict=verdict, actual=hop.winner.link)
        # a server that never answers does not block the hop
        if verdict in ("legitimate", "unverified"):
            self._confirm(req, hop)
        else:
            self._deny(req, hop, verdict)

    def _deny(self, req: int, hop: HopState, reason: str) -> None:
        assert hop.winner is not None and hop.round is not None
        self._trace("winner_denied", req=req, hop=hop.round.hop, reason=reason, actual=hop.winner.link)
        hop.excluded.append(hop.winner.pseudo)
        round_ = hop.round
        self._after(self.cfg.contention.slot_duration, lambda: self._retry(req, round_), "retry")

    def _confirm(self, req: int, hop: HopState) -> None:
        assert hop.winner is not None and hop.round is not None
        hop.confirmed = hop.winner
        cnfm = Cnfm(hop.round.round_id, req, hop.winner.pseudo)
        self._send_to(req, hop.winner.pseudo, MessageKind.CNFM, cnfm)

    def on_ack(self, msg: Message, link_sender: NodeId) -> None:
        """Ack from the current winner, or a repeat from one confirmed in an earlier round."""
        ack: Ack = msg.payload
        hop = self.hops.get(ack.request_id)
        if hop is None or hop.round is None or hop.round.round_id != ack.round_id:
            return
        successor = hop.winner if hop.winner is not None and msg.sender == hop.winner.pseudo else hop.confirmed
        if successor is None or msg.sender != successor.pseudo:
            return
        self.routes[ack.request_id].next_hop_pseudo = successor.pseudo
        self._trace(
            "hop_established", req=ack.request_id, hop=hop.rreq.hop_count, attempts=hop.attempt,
            next=successor.pseudo, actual=successor.link,
        )
        del self.hops[ack.request_id]

    # -- receiver side -----------------------------------------------------

    def on_rreq(self, msg: Message, link_sender: NodeId) -> None:
        rreq: Rreq = msg.payload
        req = rreq.request_id
        entry = self.routes.get(req)
        if entry is not None:
            # our predecessor is still contending: it never got our ack
            if entry.prev_hop_pseudo is not None and entry.prev_hop_pseudo == rreq.sender_pseudo:
                self._trace("ack_resent", req=req, hop=rreq.hop_count, attempt=rreq.attempt)
                self._send_to(req, rreq.sender_pseudo, MessageKind.ACK, Ack(rreq.round_id, req))
            return
        round_ = self.node.network.rounds.get(rreq.round_id)
        if round_ is None or not round_.open:
            return
        is_dest = self.is_destination(rreq.dest_pos)
        if is_dest:
            if self.answers_per_session.get(rreq.session_id, 0) >= self.cfg.candidate_paths:
                return
        elif rreq.session_id in self.joined_sessions:
            return
        if req not in self.pseudonyms:
            self._after(self.request_horizon(), lambda: self._forget(req), "forget")
        pseudo = self.pseudo_for(req)
        if pseudo in rreq.excluded:
            return
        if self.cfg.authenticate_source and rreq.source_id is not None and not self.node.admit_source(rreq.source_id, req):
            return
        claimed = self.node.claimed_position
        cls = classify_receiver(
            rreq.l, distance(claimed, rreq.dest_pos), self.kernel.radio.r, is_dest, self.cfg.class_width
        )
        if cls == BACKWARD_CLASS and not self.cfg.backward_fallback:
            return
        round_.join(Contender(self.node.id, cls, pseudo, claimed, rreq))

    def request_horizon(self) -> SimTime:
        """Longest a sender can keep re-contending one hop, plus the source's wait window."""
        c = self.cfg.contention
        guard = self.kernel.radio.delay_us(self.kernel.radio.r) + 1
        slots = (c.n_priority_slots + c.n_elim_slots + c.n_yield_slots + 3) * c.slot_duration
        attempt = guard + slots + max(self.cfg.handshake_timeout, self.cfg.retry_backoff)
        return (self.cfg.retry_budget + 1) * attempt + self.cfg.wait_window

    def _forget(self, req: int) -> None:
        """Drop the pseudonym of a request this node never joined."""
        if req in self.routes:
            return
        self.pseudonyms.pop(req, None)
        self.offers.pop(req, None)

    def send_hrep(self, round_: ContentionRound, me: Contender) -> None:
        req = round_.request_id
        rreq = me.rreq
        if rreq is None or req in self.routes:
            return
        self.offers[req] = rreq
        expiry = self.cfg.handshake_timeout + self.kernel.radio.delay_us(self.kernel.radio.r) + 1
        self._after(expiry, lambda: self._drop_offer(req, rreq), "offer")
        hrep = Hrep(round_.round_id, req, me.pseudo, me.claimed, me.node_class)
        msg = Message(MessageKind.HREP, me.pseudo, self.kernel.now, hrep)
        self.kernel.unicast(self.node.id, round_.sender, msg)

    def _drop_offer(self, req: int, rreq: Rreq) -> None:
        if self.offers.get(req) is rreq:
            del self.offers[req]

    def on_cnfm(self, msg: Message, link_sender: NodeId) -> None:
        cnfm: Cnfm = msg.payload
        req = cnfm.request_id
        if cnfm.receiver_pseudo != self.pseudonyms.get(req) or req in self.routes:
            return
        rreq = self.offers.pop(req, None)
        if rreq is None:
            return
        self.links[rreq.sender_pseudo] = link_sender
        self.routes[req] = RoutingTableEntry(req, rreq.sender_pseudo, None)
        self.joined_sessions.add(rreq.session_id)
        self.request_sessions[req] = rreq.session_id
        self.request_dest[req] = rreq.dest_pos
        self._send_to(req, rreq.sender_pseudo, MessageKind.ACK, Ack(cnfm.round_id, req))
        if self.is_destination(rreq.dest_pos):
            self._answer(rreq)
            return
        nxt = replace(
            rreq,
            sender_pseudo=self.pseudo_for(req),
            hop_count=rreq.hop_count + 1,
            round_id=0,
            attempt=0,
            excluded=(),
            source_id=rreq.source_id,
        )
        self._begin_hop(nxt)

    # -- destination -------------------------------------------------------

    def _answer(self, rreq: Rreq) -> None:
        req = rreq.request_id
        client = self.node.position_client
        code = client.code_for(rreq.dest_pos)
        if code is None:
            logger.warning("node %s: no code issued for %s, sealing the latest", self.node.id, rreq.dest_pos)
            code = client.auth_code or 0
        rrep = originate_rrep(self.node.key.secret_part, code, rreq, self.pseudo_for(req))
        self.answered[req] = AnsweredRequest(req, rreq.sender_pseudo, code, self.node.position)
        self.answers_per_session[rreq.session_id] = self.answers_per_session.get(rreq.session_id, 0) + 1
        self._trace("rrep_sent", req=req, session=rreq.session_id, hops=rrep.hop_count)
        self._send_to(req, rreq.sender_pseudo, MessageKind.RREP, rrep)

    def check_alerts(self) -> None:
        """After moving: tell every answered reverse path where this node is now."""
        if not self.cfg.alerts or not self.answered:
            return
        here = self.node.position
        now = self.kernel.now
        # home servers keep the latest code with the alerted position
        client_code = self.node.position_client.auth_code or 0
        notified = False
        for req, answered in self.answered.items():
            if distance(here, answered.anchor) <= self.cfg.alert_threshold:
                continue
            answered.anchor = here
            self.node.position_client.remember_alert_position(here, client_code)
            self._trace("alert_sent", req=req, x=here.x, y=here.y)
            self._send_to(req, answered.prev, MessageKind.MOBILITY_ALERT, MobilityAlert(here, now, req))
            notified = True
        if notified:
            self.node.notify_home_servers(MobilityAlert(here, now, None, self.node.id))

    # -- reverse path --------------------------------------------------------

    def on_rrep(self, msg: Message, link_sender: NodeId) -> None:
        rrep: Rrep = msg.payload
        req = rrep.request_id
        entry = self.routes.get(req)
        if entry is None or msg.sender != entry.next_hop_pseudo:
            return
        if rrep.relayed:
            level = self.node.trust.level_of(link_sender, self.cfg.default_unknown_trust)
            rrep = append_trust(rrep, level)
        if entry.prev_hop_pseudo is None:
            self._on_route_reply(rrep)
            return
        self.recent_destinations.append(RecentDestination(req, self.request_dest.get(req), self.kernel.now))
        forwarded = replace(rrep, chain=rrep.chain + (self.pseudo_for(req),), relayed=True)
        self._trace("rrep_forwarded", req=req, trust=str(forwarded.trust_string) or "-")
        self._send_to(req, entry.prev_hop_pseudo, MessageKind.RREP, forwarded)

    def _on_route_reply(self, rrep: Rrep) -> None:
        session = self.sessions.get(self.request_sessions.get(rrep.request_id, -1))
        if session is None or session.state is not SessionState.DISCOVERING:
            return
        public = self.node.network.public_key(session.destination)
        if not verify_rrep(public, rrep, session.auth_code):
            self._trace("auth_failure", session=session.session_id, req=rrep.request_id)
            return
        candidate = RouteCandidate(
            request_id=rrep.request_id,
            path=tuple(reversed(rrep.chain)),
            hop_count=rrep.hop_count,
            trust_string=rrep.trust_string,
            arrival=len(session.candidates),
        )
        session.candidates.append(candidate)
        self._trace(
            "route_candidate",
            session=session.session_id,
            req=rrep.request_id,
            hops=candidate.hop_count,
            trust=str(candidate.trust_string) or "-",
            avg_trust=candidate.average,
            path="-".join(p.short() for p in candidate.path),
        )

    def on_alert(self, msg: Message, link_sender: NodeId) -> None:
        alert: MobilityAlert = msg.payload
        req = alert.request_id
        entry = self.routes.get(req) if req is not None else None
        if entry is None:
            return
        if entry.prev_hop_pseudo is not None:
            self._trace("alert_forwarded", req=req)
            self._send_to(req, entry.prev_hop_pseudo, MessageKind.MOBILITY_ALERT, alert)
            return
        session = self.sessions.get(self.request_sessions.get(req, -1))
        if session is None:
            return
        session.stale = True
        session.alert_pos = alert.position
        self._trace("alert_received", session=session.session_id, req=req, x=alert.position.x, y=alert.position.y)

    # -- data plane ----------------------------------------------------------

    def send_data(self, flow: int, seq: int) -> None:
        packet_id = self.node.network.next_packet_id()
        session = self.sessions.get(self.flow_sessions.get(flow, -1))
        if session is None:
            self._trace("data_unrouted", pkt=packet_id, flow=flow, seq=seq, reason="no_session")
            return
        if session.state is SessionState.READY and session.stale and session.alert_pos is not None:
            session = self._rediscover(session)
        if session.state is SessionState.DISCOVERING:
            session.buffered.append((packet_id, seq))
        elif session.state is SessionState.FAILED:
            self._trace("data_unrouted", pkt=packet_id, flow=flow, seq=seq, reason="no_route")
        else:
            self._transmit(session, packet_id, seq)

    def _rediscover(self, old: Session) -> Session:
        """Fresh discovery after an alert; the home servers already hold the new position."""
        fresh = self._new_session(old.flow, old.destination, old.mode, reason="alert")
        old.stale = False
        self.node.lookup_position(old.destination, lambda reply: self._on_position(fresh, reply))
        return fresh

    def _transmit(self, session: Session, packet_id: int, seq: int) -> None:
        assert session.chosen is not None
        req = session.chosen.request_id
        entry = self.routes[req]
        self._trace("data_sent", pkt=packet_id, flow=session.flow, seq=seq, session=session.session_id, req=req)
        self._send_to(req, entry.next_hop_pseudo, MessageKind.DATA, DataPacket(packet_id, req, session.flow, seq))

    def on_data(self, msg: Message, link_sender: NodeId) -> None:
        packet: DataPacket = msg.payload
        req = packet.request_id
        entry = self.routes.get(req)
        if entry is None:
            self._trace("data_lost", pkt=packet.packet_id, reason="no_route")
            return
        if req in self.answered:
            self._trace("data_delivered", pkt=packet.packet_id, flow=packet.flow, seq=packet.seq)
            return
        if entry.next_hop_pseudo is None:
            self._trace("data_lost", pkt=packet.packet_id, reason="no_next_hop")
            return
        network = self.node.network
        network.watchdog_receive(self.node.id, packet.packet_id)
        if adversary_forward_decision(self.node.profile, self.kernel.rng) is ForwardDecision.DROP:
            self._trace("data_dropped", pkt=packet.packet_id)
            return
        network.watchdog_transmit(self.node.id, packet.packet_id)
        self._trace("data_forwarded", pkt=packet.packet_id)
        self._send_to(req, entry.next_hop_pseudo, MessageKind.DATA, packet)
