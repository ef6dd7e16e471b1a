"""
network.py
----------
Per-node protocol agents wired onto the kernel, plus the network that owns
them: placement, server selection, the key authority, id counters and the
idealized oracles (watchdog overhearing, position resolution) the servers
rely on.

A ``Node`` dispatches every delivered message by kind. Route discovery and
data live in ``RouteDiscovery``; this module handles beacons, the timed
neighbor handshake, the VHR position service, winner validation, Sybil
probes, source authentication and mobility notices.

Usage:
    from network import Network
    net = Network(cfg, TraceSink())
    net.run()
"""

import itertools
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

from defense import (
    AdversaryProfile,
    SelectorDecision,
    SybilProber,
    SybilProbeReply,
    SybilVerdict,
    ValidateRequest,
    ValidateVerdict,
    Watchdog,
    pathselector_check,
    should_answer_probe,
)
from discovery import ContentionRound, RouteDiscovery
from kernel import Event, Kernel, TraceSinkLike
from model import (
    KeyAuthority,
    Message,
    MessageKind,
    NodeId,
    Position,
    SimTime,
    SimulationError,
    distance,
    make_key_token,
)
from neighbors import Beacon, HelloM1, NeighborTable, ReplyM2, Verdict, answer_hello
from scenario import ScenarioConfig
from trust import AuthDecision, SourceAuthenticator, TrustRequest, TrustResponse, TrustTable, mode_for, sign_response
from vhr import (
    MobilityAlert,
    PosReply,
    PosRequest,
    PosUpdate,
    PositionClient,
    ServerState,
    candidate_servers,
    handle_mobility_notice,
    handle_pos_request,
    in_region,
)

logger = logging.getLogger(__name__)

HANDSHAKE_SPREAD: SimTime = 10_000
UNVERIFIED = "unverified"
DENIED = "denied"

VerdictCallback = Callable[[str], None]
LookupCallback = Callable[[Optional[PosReply]], None]


@dataclass
class PendingLookup:
    target: NodeId
    servers: List[NodeId]
    callbacks: List[LookupCallback]
    index: int = 0
    asking: Optional[NodeId] = None
    timer: Optional[Event] = None
    reason: str = "unreachable"


@dataclass
class PendingValidation:
    validation_id: int
    callback: VerdictCallback
    timer: Optional[Event] = None


@dataclass
class ServerRole:
    """State a node carries only while it acts as a VHR server."""

    records: ServerState
    watchdog: Watchdog
    prober: SybilProber
    probe_requests: Dict[int, ValidateRequest] = field(default_factory=dict)


class Node:
    def __init__(self, network: "Network", node_id: NodeId, is_server: bool, profile: Optional[AdversaryProfile]):
        cfg = network.cfg
        self.id = node_id
        self.network = network
        self.kernel: Kernel = network.kernel
        self.profile = profile
        self.key = make_key_token(node_id, network.salt)
        self.certificate = network.authority.certify(self.key)
        self.neighbors = NeighborTable(node_id, cfg.verify)
        self.trust = TrustTable(dict(cfg.trust_levels))
        self.authenticator = SourceAuthenticator(
            self.trust, cfg.trust_floor, cfg.trust_request_timeout, cfg.granted_trust
        )
        self.position_client = PositionClient(node_id, network.vhr)
        self.discovery = RouteDiscovery(self, cfg.discovery)
        self.server: Optional[ServerRole] = None
        if is_server:
            self.server = ServerRole(
                records=ServerState(node_id),
                watchdog=Watchdog(cfg.watchdog_timeout, cfg.watchdog_threshold),
                prober=SybilProber(cfg.probe_timeout, cfg.probe_tolerance),
            )
        self._tusn = 0
        self._lookups: Dict[NodeId, PendingLookup] = {}
        self._validations: Dict[int, PendingValidation] = {}
        self._handlers: Dict[MessageKind, Callable[[Message, NodeId], None]] = {
            MessageKind.BEACON: self.on_beacon,
            MessageKind.HELLO_M1: self.on_hello,
            MessageKind.REPLY_M2: self.on_reply_m2,
            MessageKind.RREQ: self.discovery.on_rreq,
            MessageKind.HREP: self.discovery.on_hrep,
            MessageKind.CNFM: self.discovery.on_cnfm,
            MessageKind.ACK: self.discovery.on_ack,
            MessageKind.RREP: self.discovery.on_rrep,
            MessageKind.DATA: self.discovery.on_data,
            MessageKind.MOBILITY_ALERT: self.on_mobility_alert,
            MessageKind.POS_UPDATE: self.on_pos_update,
            MessageKind.POS_REQUEST: self.on_pos_request,
            MessageKind.POS_REPLY: self.on_pos_reply,
            MessageKind.VALIDATE_REQUEST: self.on_validate_request,
            MessageKind.VALIDATE_VERDICT: self.on_validate_verdict,
            MessageKind.SYBIL_PROBE: self.on_sybil_probe,
            MessageKind.SYBIL_PROBE_REPLY: self.on_probe_reply,
            MessageKind.TRUST_REQUEST: self.on_trust_request,
            MessageKind.TRUST_RESPONSE: self.on_trust_response,
        }

    def __repr__(self) -> str:
        return f"Node({self.id}{', server' if self.is_server else ''})"

    # -- basics ------------------------------------------------------------

    @property
    def is_server(self) -> bool:
        return self.server is not None

    @property
    def position(self) -> Position:
        return self.kernel.positions[self.id]

    @property
    def claimed_position(self) -> Position:
        """Where this node says it is; a Sybil lies."""
        if self.profile is not None and self.profile.is_sybil and self.profile.claimed_pos is not None:
            return self.profile.claimed_pos
        return self.position

    @property
    def now(self) -> SimTime:
        return self.kernel.now

    def handle(self, msg: Message, link_sender: NodeId) -> None:
        handler = self._handlers.get(msg.kind)
        if handler is None:
            logger.warning("node %s: no handler for %s", self.id, msg.kind.value)
            return
        handler(msg, link_sender)

    def _trace(self, event: str, **details: object) -> None:
        self.kernel.trace.record(self.now, event, str(self.id), **details)

    def _service(self, dest: NodeId, kind: MessageKind, payload: object) -> bool:
        return self.kernel.service(self.id, dest, Message(kind, self.id, self.now, payload))

    def _timer(self, delay: SimTime, action: Callable[[], None], label: str) -> Event:
        return self.kernel.schedule_in(delay, action, label, self.id)

    # -- beacons -----------------------------------------------------------

    def send_beacon(self) -> None:
        self._tusn += 1
        beacon = Beacon(self.id, self.claimed_position, self._tusn)
        self.kernel.broadcast(self.id, Message(MessageKind.BEACON, self.id, self.now, beacon))
        self._timer(self.network.cfg.beacon_interval, self.send_beacon, "beacon")

    def on_beacon(self, msg: Message, link_sender: NodeId) -> None:
        beacon: Beacon = msg.payload
        if self.neighbors.process_beacon(self.position, beacon, self.now) is Verdict.REJECT:
            entry = self.neighbors.get(beacon.sender)
            self._trace("beacon_rejected", sender=beacon.sender, trust=entry.trust_value if entry else "-")

    # -- timed handshake ---------------------------------------------------

    def start_handshake(self) -> None:
        nonce = self.neighbors.start_handshake(self.now)
        hello = HelloM1(self.id, self.certificate, nonce)
        self.kernel.broadcast(self.id, Message(MessageKind.HELLO_M1, self.id, self.now, hello))

    def on_hello(self, msg: Message, link_sender: NodeId) -> None:
        hello: HelloM1 = msg.payload
        reply = answer_hello(self.network.authority, self.key, self.certificate, self.claimed_position, hello)
        if reply is None:
            self._trace("cert_rejected", peer=hello.sender)
            return
        delay = self.network.cfg.verify.processing_delay
        if delay:
            self._timer(delay, lambda: self._send_reply(link_sender, reply), "reply_m2")
        else:
            self._send_reply(link_sender, reply)

    def _send_reply(self, dest: NodeId, reply: ReplyM2) -> None:
        self.kernel.unicast(self.id, dest, Message(MessageKind.REPLY_M2, self.id, self.now, reply))

    def on_reply_m2(self, msg: Message, link_sender: NodeId) -> None:
        reply: ReplyM2 = msg.payload
        result = self.neighbors.complete_handshake(
            self.network.authority, self.position, reply, self.now, self.kernel.radio.c
        )
        if result.outcome == "suspected_wormhole":
            self._trace("suspected_wormhole", peer=reply.responder, claimed=result.claimed, bound=result.bound)
        elif result.outcome == "bad_certificate":
            self._trace("cert_rejected", peer=reply.responder)
        elif result.outcome == "out_of_range":
            self._trace("handshake_rejected", peer=reply.responder, claimed=result.claimed)

    # -- position service: client ------------------------------------------

    def report_position(self) -> None:
        update = self.position_client.maybe_update_position(self.position, self.now, self.kernel.rng)
        if update is None:
            return
        servers = self.network.home_servers(self.id)
        if not servers:
            logger.warning("node %s: no live server in its home region", self.id)
            self._trace("pos_service_failure", reason="no_server", target=self.id)
            return
        for server in servers:
            self._service(server, MessageKind.POS_UPDATE, update)

    def lookup_position(self, target: NodeId, callback: LookupCallback) -> None:
        """Ask the target's home servers, nearest first, until one knows it."""
        pending = self._lookups.get(target)
        if pending is not None:
            pending.callbacks.append(callback)
            return
        order = self.network.lookup_order(target, self.position)
        if not order:
            self._trace("pos_service_failure", reason="no_server", target=target)
            callback(None)
            return
        pending = PendingLookup(target, order, [callback])
        self._lookups[target] = pending
        self._ask_next(pending)

    def _ask_next(self, pending: PendingLookup) -> None:
        while pending.index < len(pending.servers):
            server = pending.servers[pending.index]
            pending.index += 1
            if self._service(server, MessageKind.POS_REQUEST, PosRequest(self.id, pending.target)):
                pending.asking = server
                pending.timer = self._timer(
                    self.network.lookup_timeout, lambda: self._lookup_expired(pending, server), "lookup"
                )
                return
        self._finish_lookup(pending, None)

    def _lookup_expired(self, pending: PendingLookup, server: NodeId) -> None:
        if self._lookups.get(pending.target) is not pending or pending.asking != server:
            return
        pending.reason = "timeout"
        self._ask_next(pending)

    def _finish_lookup(self, pending: PendingLookup, reply: Optional[PosReply]) -> None:
        del self._lookups[pending.target]
        if reply is None:
            self._trace("pos_service_failure", reason=pending.reason, target=pending.target)
        else:
            self.position_client.known[pending.target] = reply
        for callback in pending.callbacks:
            callback(reply)

    def on_pos_reply(self, msg: Message, link_sender: NodeId) -> None:
        reply: PosReply = msg.payload
        pending = self._lookups.get(reply.target)
        if pending is None or pending.asking != link_sender:
            return
        if pending.timer is not None:
            pending.timer.cancel()
        pending.asking = None
        if reply.found:
            self._finish_lookup(pending, reply)
        else:
            pending.reason = "not_found"
            self._ask_next(pending)

    # -- position service: server ------------------------------------------

    def on_pos_update(self, msg: Message, link_sender: NodeId) -> None:
        update: PosUpdate = msg.payload
        if self.server is None:
            return
        if not in_region(self.position, update.node, self.network.vhr):
            logger.debug("server %s: update for %s outside its region", self.id, update.node)
            return
        self.server.records.store(update)

    def on_pos_request(self, msg: Message, link_sender: NodeId) -> None:
        request: PosRequest = msg.payload
        if self.server is None:
            return
        reply = handle_pos_request(self.server.records, request.requester, request.target)
        self._service(request.requester, MessageKind.POS_REPLY, reply)

    # -- mobility ----------------------------------------------------------

    def on_moved(self) -> None:
        self.report_position()
        self.discovery.check_alerts()
        if self.server is not None:
            gone = self.server.records.prune(self.position, self.network.vhr)
            if gone:
                logger.info("server %s left the region of %s", self.id, gone)

    def notify_home_servers(self, alert: MobilityAlert) -> None:
        for server in self.network.home_servers(self.id):
            self._service(server, MessageKind.MOBILITY_ALERT, alert)

    def on_mobility_alert(self, msg: Message, link_sender: NodeId) -> None:
        alert: MobilityAlert = msg.payload
        if alert.node is None:
            self.discovery.on_alert(msg, link_sender)
            return
        if self.server is not None and in_region(self.position, alert.node, self.network.vhr):
            handle_mobility_notice(self.server.records, alert)

    # -- winner validation: sender side ------------------------------------

    def validation_enabled(self) -> bool:
        defenses = self.network.cfg.defenses
        return defenses.path_selector or defenses.sybil_probe

    def request_validation(self, request_id: int, claimed: Position, callback: VerdictCallback) -> None:
        server = self.network.serving_server(self.position)
        if server is None:
            callback(UNVERIFIED)
            return
        vid = self.network.next_validation_id()
        if not self._service(server, MessageKind.VALIDATE_REQUEST, ValidateRequest(vid, self.id, claimed)):
            callback(UNVERIFIED)
            return
        pending = PendingValidation(vid, callback)
        pending.timer = self._timer(self.network.validation_timeout, lambda: self._validation_expired(vid), "validate")
        self._validations[vid] = pending
        logger.debug("node %s: validating winner of request %d at %s via %s", self.id, request_id, claimed, server)

    def _validation_expired(self, validation_id: int) -> None:
        pending = self._validations.pop(validation_id, None)
        if pending is not None:
            pending.callback(UNVERIFIED)

    def on_validate_verdict(self, msg: Message, link_sender: NodeId) -> None:
        verdict: ValidateVerdict = msg.payload
        pending = self._validations.pop(verdict.validation_id, None)
        if pending is None:
            return
        if pending.timer is not None:
            pending.timer.cancel()
        pending.callback(verdict.verdict)

    # -- winner validation: server side ------------------------------------

    def on_validate_request(self, msg: Message, link_sender: NodeId) -> None:
        request: ValidateRequest = msg.payload
        if self.server is None:
            logger.warning("node %s got a validation request but is not a server", self.id)
            return
        defenses = self.network.cfg.defenses
        if defenses.path_selector:
            suspect = self.network.resolve_position(request.claimed_position)
            watchdogs = self.network.watchdogs_for(suspect) if suspect is not None else []
            if pathselector_check(watchdogs, suspect) is SelectorDecision.DENY:
                self._send_verdict(request, DENIED)
                return
        if not defenses.sybil_probe:
            self._send_verdict(request, SybilVerdict.LEGITIMATE.value)
            return
        prober = self.server.prober
        probe = prober.start(request.claimed_position, self.now)
        self.server.probe_requests[probe.probe_id] = request
        heard = self.kernel.geocast(
            self.id,
            request.claimed_position,
            prober.tolerance,
            Message(MessageKind.SYBIL_PROBE, self.id, self.now, probe),
        )
        if heard == 0:
            self._settle_probe(probe.probe_id, prober.on_timeout(probe.probe_id))
            return
        probe_id = probe.probe_id
        self.kernel.schedule(
            probe.deadline, lambda: self._settle_probe(probe_id, prober.on_timeout(probe_id)), "probe", self.id
        )

    def _settle_probe(self, probe_id: int, verdict: Optional[SybilVerdict]) -> None:
        if verdict is None or self.server is None:
            return
        request = self.server.probe_requests.pop(probe_id, None)
        if request is not None:
            self._send_verdict(request, verdict.value)

    def _send_verdict(self, request: ValidateRequest, verdict: str) -> None:
        self._service(request.requester, MessageKind.VALIDATE_VERDICT, ValidateVerdict(request.validation_id, verdict))

    def on_sybil_probe(self, msg: Message, link_sender: NodeId) -> None:
        probe = msg.payload
        if should_answer_probe(self.position, probe, self.network.cfg.probe_tolerance):
            self._service(link_sender, MessageKind.SYBIL_PROBE_REPLY, SybilProbeReply(probe.probe_id, self.position))

    def on_probe_reply(self, msg: Message, link_sender: NodeId) -> None:
        reply: SybilProbeReply = msg.payload
        if self.server is None:
            return
        self._settle_probe(reply.probe_id, self.server.prober.on_reply(reply, self.now))

    # -- watchdog ----------------------------------------------------------

    def watchdog_expire(self, suspect: NodeId, packet_id: int) -> None:
        if self.server is None:
            return
        watchdog = self.server.watchdog
        if not watchdog.expire(suspect, packet_id, self.now):
            return
        rate = watchdog.failure_rate[suspect]
        self._trace("watchdog_timeout", suspect=suspect, pkt=packet_id, rate=rate)
        if rate == watchdog.threshold:
            self._trace("watchdog_flag", suspect=suspect, rate=rate)

    # -- source authentication ---------------------------------------------

    def admit_source(self, source: NodeId, request_id: int) -> bool:
        """Gate an rreq on the trust table; unknown sources trigger a trust request."""
        decision = self.authenticator.decide(source)
        if decision is AuthDecision.ACCEPT:
            self.neighbors.touch(source, self.now)
            return True
        if decision is AuthDecision.DROP:
            self._trace("source_auth", source=source, req=request_id, result="drop")
            return False
        if self.authenticator.park(source, self.now):
            self._service(source, MessageKind.TRUST_REQUEST, TrustRequest(self.id, source, self.now))
            self._timer(self.authenticator.timeout, lambda: self._auth_expired(source), "trust")
            self._trace("source_auth", source=source, req=request_id, result="pending")
        return False

    def _auth_expired(self, source: NodeId) -> None:
        if self.authenticator.expire(source, self.now):
            self._trace("source_auth", source=source, result="timeout")

    def on_trust_request(self, msg: Message, link_sender: NodeId) -> None:
        request: TrustRequest = msg.payload
        response = TrustResponse(request.requester, request.subject, request.subject == self.id, self.now)
        self._service(request.requester, MessageKind.TRUST_RESPONSE, sign_response(self.key.secret_part, response))

    def on_trust_response(self, msg: Message, link_sender: NodeId) -> None:
        response: TrustResponse = msg.payload
        public = self.network.public_key(response.subject)
        if self.authenticator.resolve(response, public, self.now):
            self._trace("source_auth", source=response.subject, result="granted")


class Network:
    """All nodes of one scenario on one kernel."""

    def __init__(self, cfg: ScenarioConfig, trace: TraceSinkLike):
        self.cfg = cfg
        self.vhr = cfg.vhr_config()
        self.kernel = Kernel(
            cfg.radio,
            cfg.width,
            cfg.height,
            cfg.seed,
            trace,
            max_speed=cfg.max_speed,
            service_latency=cfg.service_latency,
            min_speed=cfg.min_speed,
            pause=cfg.pause,
        )
        self.salt = struct.pack(">Q", cfg.seed)
        self.authority = KeyAuthority(self.salt)
        self.lookup_timeout: SimTime = 3 * cfg.service_latency
        self.validation_timeout: SimTime = 4 * cfg.service_latency + cfg.probe_timeout
        self.rounds: Dict[int, ContentionRound] = {}
        self._round_ids: Iterator[int] = itertools.count(1)
        self._request_ids: Iterator[int] = itertools.count(1)
        self._session_ids: Iterator[int] = itertools.count(1)
        self._packet_ids: Iterator[int] = itertools.count(1)
        self._validation_ids: Iterator[int] = itertools.count(1)
        self._public: Dict[NodeId, bytes] = {}

        positions = self._place()
        servers = cfg.servers if cfg.servers is not None else self._auto_servers(positions)
        self.servers: Tuple[NodeId, ...] = tuple(sorted(set(servers)))
        profiles = {p.node: p for p in cfg.adversaries}
        self.nodes: Dict[NodeId, Node] = {}
        for nid, pos in positions:
            node = Node(self, nid, nid in self.servers, profiles.get(nid))
            self.nodes[nid] = node
            self.kernel.add_node(nid, pos, node.handle)
        self.kernel.after_mobility.append(self._on_mobility)
        self._started = False
        logger.info(
            "network '%s': %d nodes, servers %s, seed %d", cfg.name, len(self.nodes), list(self.servers), cfg.seed
        )

    # -- construction --------------------------------------------------------

    def _place(self) -> List[Tuple[NodeId, Position]]:
        """Explicit placements first, the rest uniform over the field."""
        placed = []
        rng = self.kernel.rng
        for nid in self.cfg.node_ids():
            if nid < len(self.cfg.placements):
                pos = self.cfg.placements[nid]
            else:
                pos = Position(float(rng.uniform(0.0, self.cfg.width)), float(rng.uniform(0.0, self.cfg.height)))
            placed.append((nid, pos))
        return placed

    def _auto_servers(self, positions: List[Tuple[NodeId, Position]]) -> List[NodeId]:
        """The node nearest each quadrant center."""
        w, h = self.cfg.width, self.cfg.height
        centers = [Position(w / 4, h / 4), Position(3 * w / 4, h / 4), Position(w / 4, 3 * h / 4), Position(3 * w / 4, 3 * h / 4)]
        chosen: List[NodeId] = []
        for center in centers:
            _, nid = min((distance(center, pos), nid) for nid, pos in positions)
            if nid not in chosen:
                chosen.append(nid)
        return chosen

    # -- ids -----------------------------------------------------------------

    def next_request_id(self) -> int:
        return next(self._request_ids)

    def next_session_id(self) -> int:
        return next(self._session_ids)

    def next_packet_id(self) -> int:
        return next(self._packet_ids)

    def next_validation_id(self) -> int:
        return next(self._validation_ids)

    def open_round(self, sender: NodeId, request_id: int, hop: int, attempt: int) -> ContentionRound:
        round_ = ContentionRound(next(self._round_ids), sender, request_id, hop, attempt)
        self.rounds[round_.round_id] = round_
        return round_

    def close_round(self, round_: ContentionRound) -> None:
        """No more joins; late rreq receivers find nothing to join."""
        round_.open = False
        self.rounds.pop(round_.round_id, None)

    # -- keys ----------------------------------------------------------------

    def public_key(self, node: NodeId) -> bytes:
        """Public half of ``node`` as certified by the authority."""
        public = self._public.get(node)
        if public is None:
            owner, public = self.authority.verify(self.nodes[node].certificate)
            if owner != node:
                raise SimulationError(f"certificate of node {node} names node {owner}")
            self._public[node] = public
        return public

    # -- servers -------------------------------------------------------------

    def live_servers(self) -> List[Node]:
        return [self.nodes[s] for s in self.servers if self.kernel.is_alive(s)]

    def home_servers(self, node: NodeId) -> List[NodeId]:
        """Live servers currently inside ``node``'s home region."""
        return [s.id for s in self.live_servers() if in_region(s.position, node, self.vhr)]

    def lookup_order(self, target: NodeId, requester_pos: Position) -> List[NodeId]:
        return candidate_servers(target, requester_pos, [(s.id, s.position) for s in self.live_servers()], self.vhr)

    def serving_server(self, pos: Position) -> Optional[NodeId]:
        """Nearest live server, ties by lowest id."""
        ranked = sorted((distance(pos, s.position), s.id) for s in self.live_servers())
        return ranked[0][1] if ranked else None

    def resolve_position(self, claimed: Position) -> Optional[NodeId]:
        """Node whose stored position lies nearest ``claimed``, within U + δ."""
        reach = self.vhr.update_threshold + self.cfg.probe_tolerance
        best: Optional[Tuple[float, NodeId]] = None
        for server in self.live_servers():
            assert server.server is not None
            for record in server.server.records.records.values():
                gap = distance(record.pos, claimed)
                if gap <= reach and (best is None or (gap, record.node) < best):
                    best = (gap, record.node)
        return best[1] if best is not None else None

    def watchdogs_for(self, node: NodeId) -> List[Watchdog]:
        return [self.nodes[s].server.watchdog for s in self.home_servers(node)]  # type: ignore[union-attr]

    # -- watchdog oracle -----------------------------------------------------

    def watchdog_receive(self, node: NodeId, packet_id: int) -> None:
        """Servers in ``node``'s home region see it take a packet for forwarding."""
        if not self.cfg.defenses.watchdog:
            return
        for sid in self.home_servers(node):
            server = self.nodes[sid]
            assert server.server is not None
            deadline = server.server.watchdog.observe_receive(node, packet_id, self.kernel.now)
            self.kernel.schedule(
                deadline, lambda s=server: s.watchdog_expire(node, packet_id), "watchdog", sid
            )

    def watchdog_transmit(self, node: NodeId, packet_id: int) -> None:
        if not self.cfg.defenses.watchdog:
            return
        for sid in self.home_servers(node):
            server = self.nodes[sid].server
            assert server is not None
            server.watchdog.observe_transmit(node, packet_id)

    # -- adversaries -----------------------------------------------------------

    def droppers(self) -> List[NodeId]:
        return [p.node for p in self.cfg.adversaries if p.is_dropper]

    def sybils(self) -> List[NodeId]:
        return [p.node for p in self.cfg.adversaries if p.is_sybil]

    # -- running -------------------------------------------------------------

    def _on_mobility(self, moved: List[NodeId]) -> None:
        for nid in moved:
            self.nodes[nid].on_moved()

    def start(self) -> None:
        if self._started:
            raise SimulationError("network already started")
        self._started = True
        cfg = self.cfg
        kernel = self.kernel
        for nid, node in self.nodes.items():
            kernel.schedule(0, node.report_position, "report", nid)
        for nid, node in self.nodes.items():
            kernel.schedule(int(kernel.rng.integers(0, cfg.beacon_interval)), node.send_beacon, "beacon", nid)
        if cfg.defenses.handshake:
            for nid, node in self.nodes.items():
                kernel.schedule(int(kernel.rng.integers(0, HANDSHAKE_SPREAD)), node.start_handshake, "handshake", nid)

        for flow_id, flow in enumerate(cfg.traffic, start=1):
            source = self.nodes[flow.source]
            mode = mode_for(flow.mode, flow.security_level, cfg.mode)
            kernel.schedule(
                flow.start,
                lambda s=source, fid=flow_id, d=flow.destination, m=mode: s.discovery.start_flow(fid, d, m),
                "flow",
                flow.source,
            )
            for seq in range(flow.packets):
                kernel.schedule(
                    flow.first_packet_at + seq * flow.interval,
                    lambda s=source, fid=flow_id, q=seq: s.discovery.send_data(fid, q),
                    "data",
                    flow.source,
                )

        for move in cfg.moves:
            kernel.schedule(move.at, lambda mv=move: kernel.move_to(mv.node, mv.target, mv.speed), "move", move.node)
        for failure in cfg.failures:
            kernel.schedule(failure.at, lambda n=failure.node: kernel.kill(n), "failure")

        roaming = cfg.mobility_model == "random_waypoint"
        if roaming:
            mobile = cfg.mobile if cfg.mobile is not None else [n for n in self.nodes if n not in self.servers]
            for nid in mobile:
                kernel.enable_random_waypoint(nid)
        if roaming or cfg.moves:
            kernel.start_mobility(cfg.mobility_step, cfg.duration)

    def run(self) -> None:
        self.start()
        self.kernel.run_until(self.cfg.duration)
