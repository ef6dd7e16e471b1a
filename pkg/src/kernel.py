"""
kernel.py
---------
Deterministic discrete-event engine: a (fire_at, seq) ordered heap, a
unit-disk radio channel, an idealized fixed-latency service channel, node
mobility (random waypoint, scripted moves, edge reflection) and the pinned
PCG64 random generator every protocol draw comes from.

The kernel is single-threaded. Protocol code runs only inside event actions.
"""

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Protocol, Tuple

import numpy as np

from model import MICROS_PER_SECOND, Message, NodeId, Position, SimTime, SimulationError, distance

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 3.0e8

Handler = Callable[[Message, NodeId], None]


class SchedulingError(SimulationError):
    """An event was scheduled before the current clock."""


def make_rng(seed: int) -> np.random.Generator:
    """The pinned generator: PCG64 seeded with the scenario seed."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(order=True)
class Event:
    fire_at: SimTime
    seq: int
    label: str = field(compare=False)
    target: Optional[NodeId] = field(compare=False, default=None)
    action: Callable[[], None] = field(compare=False, default=lambda: None, repr=False)
    cancelled: bool = field(compare=False, default=False)

    def cancel(self) -> None:
        self.cancelled = True


@dataclass(frozen=True)
class RadioModel:
    r: float
    c: float = SPEED_OF_LIGHT

    def __post_init__(self) -> None:
        if self.r <= 0:
            raise ValueError("radio range must be positive")
        if self.c <= 0:
            raise ValueError("propagation speed must be positive")

    def in_range(self, a: Position, b: Position) -> bool:
        return distance(a, b) <= self.r

    def delay_us(self, dist: float) -> SimTime:
        # 1e-9 absorbs float noise so that exactly 300 m stays 1 µs
        return max(1, math.ceil(dist * MICROS_PER_SECOND / self.c - 1e-9))


@dataclass
class MobilityState:
    velocity: Tuple[float, float] = (0.0, 0.0)
    speed: float = 0.0
    waypoints: Deque[Position] = field(default_factory=deque)
    random_waypoint: bool = False
    pause_until: SimTime = 0

    @property
    def moving(self) -> bool:
        return bool(self.waypoints) or self.velocity != (0.0, 0.0) or self.random_waypoint


def reflect(coord: float, velocity: float, limit: float) -> Tuple[float, float]:
    """Fold ``coord`` back into [0, limit], flipping ``velocity`` per bounce."""
    while coord < 0.0 or coord > limit:
        if coord < 0.0:
            coord = -coord
        else:
            coord = 2.0 * limit - coord
        velocity = -velocity
    return coord, velocity


class TraceSinkLike(Protocol):
    def record(self, time: SimTime, event: str, actor: str, **details: object) -> None: ...


class Kernel:
    def __init__(
        self,
        radio: RadioModel,
        field_width: float,
        field_height: float,
        seed: int,
        trace: TraceSinkLike,
        max_speed: float = 20.0,
        service_latency: SimTime = 1000,
        min_speed: float = 1.0,
        pause: SimTime = 0,
    ):
        if field_width <= 0 or field_height <= 0:
            raise ValueError("field dimensions must be positive")
        self.radio = radio
        self.width = field_width
        self.height = field_height
        self.trace = trace
        self.rng = make_rng(seed)
        self.max_speed = max_speed
        self.min_speed = min(min_speed, max_speed)
        self.pause = pause
        self.service_latency = service_latency
        self.now: SimTime = 0
        self._queue: List[Event] = []
        self._seq = 0
        self.positions: Dict[NodeId, Position] = {}
        self.alive: Dict[NodeId, bool] = {}
        self.handlers: Dict[NodeId, Handler] = {}
        self.mobility: Dict[NodeId, MobilityState] = {}
        self.after_mobility: List[Callable[[List[NodeId]], None]] = []
        self.after_event: List[Callable[[Event], None]] = []
        self.processed = 0

    # -- nodes -------------------------------------------------------------

    def add_node(self, node: NodeId, position: Position, handler: Handler) -> None:
        if node in self.positions:
            raise SimulationError(f"node {node} registered twice")
        self._check_inside(position)
        self.positions[node] = position
        self.alive[node] = True
        self.handlers[node] = handler
        self.mobility[node] = MobilityState()

    def is_alive(self, node: NodeId) -> bool:
        return self.alive.get(node, False)

    def kill(self, node: NodeId) -> None:
        if self.alive.get(node):
            self.alive[node] = False
            self.trace.record(self.now, "node_failed", str(node))
            logger.info("node %s failed at t=%d", node, self.now)

    def live_nodes(self) -> List[NodeId]:
        return [n for n, up in self.alive.items() if up]

    def _check_inside(self, p: Position) -> None:
        if not (0.0 <= p.x <= self.width and 0.0 <= p.y <= self.height):
            raise SimulationError(f"position ({p.x}, {p.y}) outside the {self.width}x{self.height} field")

    # -- scheduling --------------------------------------------------------

    def schedule(
        self,
        fire_at: SimTime,
        action: Callable[[], None],
        label: str,
        target: Optional[NodeId] = None,
    ) -> Event:
        if fire_at < self.now:
            raise SchedulingError(f"event '{label}' at t={fire_at} is before now={self.now}")
        event = Event(fire_at=fire_at, seq=self._seq, label=label, target=target, action=action)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def schedule_in(
        self, delay: SimTime, action: Callable[[], None], label: str, target: Optional[NodeId] = None
    ) -> Event:
        return self.schedule(self.now + delay, action, label, target)

    def pending(self) -> int:
        return len(self._queue)

    def run_until(self, t_end: SimTime) -> None:
        if t_end < self.now:
            raise SchedulingError(f"run horizon {t_end} is before now={self.now}")
        while self._queue and self._queue[0].fire_at <= t_end:
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = event.fire_at
            if event.target is not None and not self.is_alive(event.target):
                continue
            self.processed += 1
            event.action()
            for hook in self.after_event:
                hook(event)
        self.now = t_end

    # -- radio channel -----------------------------------------------------

    def _deliver(self, receiver: NodeId, msg: Message, link_sender: NodeId) -> None:
        if self.is_alive(receiver):
            self.handlers[receiver](msg, link_sender)

    def receivers_of(self, sender: NodeId) -> List[NodeId]:
        origin = self.positions[sender]
        return [
            v
            for v, up in self.alive.items()
            if up and v != sender and self.radio.in_range(origin, self.positions[v])
        ]

    def broadcast(self, sender: NodeId, msg: Message) -> int:
        """Schedule a delivery to every live node within r; return how many."""
        if not self.is_alive(sender):
            return 0
        origin = self.positions[sender]
        receivers = self.receivers_of(sender)
        for v in receivers:
            delay = self.radio.delay_us(distance(origin, self.positions[v]))
            self.schedule_in(delay, lambda v=v: self._deliver(v, msg, sender), msg.kind.value, v)
        self.trace.record(self.now, "send", str(sender), kind=msg.kind.value, to="*", n=len(receivers))
        return len(receivers)

    def unicast(self, sender: NodeId, dest: NodeId, msg: Message) -> bool:
        """Deliver iff ``dest`` is alive and within r now; otherwise the frame is lost."""
        if not self.is_alive(sender):
            return False
        self.trace.record(self.now, "send", str(sender), kind=msg.kind.value, to=dest)
        if dest not in self.positions or not self.is_alive(dest):
            logger.debug("unicast %s from %s lost: %s is down", msg.kind.value, sender, dest)
            self.trace.record(self.now, "lost", str(sender), kind=msg.kind.value, to=dest, reason="down")
            return False
        dist = distance(self.positions[sender], self.positions[dest])
        if dist > self.radio.r:
            logger.debug("unicast %s from %s lost: %s is %.1f m away", msg.kind.value, sender, dest, dist)
            self.trace.record(self.now, "lost", str(sender), kind=msg.kind.value, to=dest, reason="range")
            return False
        self.schedule_in(self.radio.delay_us(dist), lambda: self._deliver(dest, msg, sender), msg.kind.value, dest)
        return True

    # -- service channel ---------------------------------------------------

    def service(self, sender: NodeId, dest: NodeId, msg: Message) -> bool:
        """Fixed-latency delivery independent of the radio range."""
        if not self.is_alive(sender):
            return False
        self.trace.record(self.now, "send", str(sender), kind=msg.kind.value, to=dest, channel="service")
        if not self.is_alive(dest):
            self.trace.record(self.now, "lost", str(sender), kind=msg.kind.value, to=dest, reason="down")
            return False
        self.schedule_in(self.service_latency, lambda: self._deliver(dest, msg, sender), msg.kind.value, dest)
        return True

    def geocast(self, sender: NodeId, center: Position, radius: float, msg: Message) -> int:
        """Service delivery to every live node within ``radius`` of ``center``, sender included."""
        if not self.is_alive(sender):
            return 0
        targets = [v for v, up in self.alive.items() if up and distance(center, self.positions[v]) <= radius]
        self.trace.record(self.now, "send", str(sender), kind=msg.kind.value, to="geo", n=len(targets))
        for v in targets:
            self.schedule_in(self.service_latency, lambda v=v: self._deliver(v, msg, sender), msg.kind.value, v)
        return len(targets)

    # -- mobility ----------------------------------------------------------

    def set_velocity(self, node: NodeId, vx: float, vy: float) -> None:
        if math.hypot(vx, vy) > self.max_speed + 1e-9:
            raise SimulationError(f"speed of node {node} exceeds max_speed {self.max_speed}")
        state = self.mobility[node]
        state.velocity = (vx, vy)
        state.speed = math.hypot(vx, vy)

    def move_to(self, node: NodeId, target: Position, speed: float) -> None:
        """Queue a straight-line move toward ``target``."""
        if speed <= 0 or speed > self.max_speed + 1e-9:
            raise SimulationError(f"move speed {speed} must be in (0, {self.max_speed}]")
        self._check_inside(target)
        state = self.mobility[node]
        state.waypoints.append(target)
        state.speed = speed

    def enable_random_waypoint(self, node: NodeId) -> None:
        state = self.mobility[node]
        state.random_waypoint = True
        self._next_random_waypoint(node, state)

    def _next_random_waypoint(self, node: NodeId, state: MobilityState) -> None:
        target = Position(float(self.rng.uniform(0.0, self.width)), float(self.rng.uniform(0.0, self.height)))
        state.waypoints.append(target)
        state.speed = float(self.rng.uniform(self.min_speed, self.max_speed))

    def step_mobility(self, dt: SimTime) -> List[NodeId]:
        """Advance every node by ``dt`` µs; return the nodes that moved."""
        if dt <= 0:
            raise SimulationError("mobility step must be positive")
        moved = []
        for node, state in self.mobility.items():
            if not self.alive[node] or not state.moving:
                continue
            if self.now < state.pause_until:
                continue
            before = self.positions[node]
            if state.waypoints:
                after = self._advance_waypoint(node, state, dt / MICROS_PER_SECOND)
            else:
                after = self._advance_velocity(state, before, dt / MICROS_PER_SECOND)
            if after != before:
                self.positions[node] = after
                moved.append(node)
        return moved

    def _advance_velocity(self, state: MobilityState, p: Position, dt_s: float) -> Position:
        vx, vy = state.velocity
        x, vx = reflect(p.x + vx * dt_s, vx, self.width)
        y, vy = reflect(p.y + vy * dt_s, vy, self.height)
        state.velocity = (vx, vy)
        return Position(x, y)

    def _advance_waypoint(self, node: NodeId, state: MobilityState, dt_s: float) -> Position:
        p = self.positions[node]
        budget = state.speed * dt_s
        while state.waypoints and budget > 0:
            target = state.waypoints[0]
            gap = distance(p, target)
            if gap <= budget:
                p = target
                budget -= gap
                state.waypoints.popleft()
                if state.random_waypoint:
                    state.pause_until = self.now + self.pause
                    self._next_random_waypoint(node, state)
                    if self.pause:
                        break
                continue
            frac = budget / gap
            p = Position(p.x + (target.x - p.x) * frac, p.y + (target.y - p.y) * frac)
            budget = 0.0
        if state.waypoints:
            target = state.waypoints[0]
            gap = distance(p, target)
            if gap > 0:
                state.velocity = ((target.x - p.x) / gap * state.speed, (target.y - p.y) / gap * state.speed)
        else:
            state.velocity = (0.0, 0.0)
        return p

    def start_mobility(self, step: SimTime, horizon: SimTime) -> None:
        """Tick mobility every ``step`` µs up to ``horizon``."""

        def tick() -> None:
            moved = self.step_mobility(step)
            for hook in self.after_mobility:
                hook(moved)
            if self.now + step <= horizon:
                self.schedule_in(step, tick, "mobility")

        self.schedule_in(step, tick, "mobility")
