"""
model.py
--------
Shared value types and pure primitives for the routing simulator:
positions in meters, integer microsecond time, 128-bit digests, pseudo IDs,
trust levels, auth codes, simulation-grade key tokens and the message envelope.

Nothing in here touches the event loop; every function is pure.
"""

import hashlib
import hmac
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterator, NewType, Tuple, Union

NodeId = NewType("NodeId", int)
SimTime = int  # microseconds

MICROS_PER_SECOND = 1_000_000
DIGEST_SIZE = 16
TAG_SIZE = 8
TRUST_MIN = 0
TRUST_MAX = 9


class SimulationError(RuntimeError):
    """Root of every error raised by the simulator itself."""


class SealError(ValueError):
    """A sealed blob did not open under the given public half."""


def seconds_to_micros(value: float) -> SimTime:
    return int(round(value * MICROS_PER_SECOND))


def micros_to_seconds(value: SimTime) -> float:
    return value / MICROS_PER_SECOND


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"position must be finite, got ({self.x}, {self.y})")

    def encode(self) -> bytes:
        return struct.pack(">dd", self.x, self.y)

    def key(self) -> Tuple[float, float]:
        return (self.x, self.y)

    def __iter__(self) -> Iterator[float]:
        yield self.x
        yield self.y


def distance(a: Position, b: Position) -> float:
    """Euclidean distance in meters."""
    return math.hypot(a.x - b.x, a.y - b.y)


def hash_digest(data: bytes) -> bytes:
    """The network-wide 128-bit digest (BLAKE2b truncated to 16 bytes)."""
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


@dataclass(frozen=True)
class PseudoId:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != DIGEST_SIZE:
            raise ValueError(f"pseudo id must be {DIGEST_SIZE} bytes, got {len(self.digest)}")

    def short(self) -> str:
        return self.digest.hex()[:8]

    def __str__(self) -> str:
        return f"p:{self.short()}"


def check_trust_level(level: int) -> int:
    if not isinstance(level, int) or isinstance(level, bool):
        raise ValueError(f"trust level must be an integer, got {level!r}")
    if not TRUST_MIN <= level <= TRUST_MAX:
        raise ValueError(f"trust level must be in [{TRUST_MIN}, {TRUST_MAX}], got {level}")
    return level


def clamp_trust(level: int) -> int:
    return max(TRUST_MIN, min(TRUST_MAX, level))


def encode_auth_code(code: int) -> bytes:
    return struct.pack(">Q", code)


def decode_auth_code(raw: bytes) -> int:
    if len(raw) != 8:
        raise SealError(f"auth code must be 8 bytes, got {len(raw)}")
    return struct.unpack(">Q", raw)[0]


# ---------------------------------------------------------------------------
# Simulation-grade key tokens
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyToken:
    owner: NodeId
    secret_part: bytes
    public_part: bytes


def public_half(secret_part: bytes) -> bytes:
    return hash_digest(b"public" + secret_part)


def make_key_token(owner: NodeId, salt: bytes) -> KeyToken:
    secret = hash_digest(b"secret" + salt + struct.pack(">I", owner))
    return KeyToken(owner=owner, secret_part=secret, public_part=public_half(secret))


def _keystream(key: bytes, length: int) -> bytes:
    blocks = []
    counter = 0
    while 64 * counter < length:
        blocks.append(hashlib.blake2b(struct.pack(">Q", counter), key=key, digest_size=64).digest())
        counter += 1
    return b"".join(blocks)[:length]


def _xor(data: bytes, stream: bytes) -> bytes:
    if not data:
        return b""
    mixed = int.from_bytes(data, "big") ^ int.from_bytes(stream, "big")
    return mixed.to_bytes(len(data), "big")


def _tag(key: bytes, message: bytes) -> bytes:
    return hashlib.blake2b(message, key=key, digest_size=TAG_SIZE).digest()


def seal(secret_part: bytes, message: bytes) -> bytes:
    """Seal ``message`` so that only the matching public half opens it.

    Layout: 8-byte keyed tag followed by the keystream-masked body.
    Deterministic for equal inputs.
    """
    key = public_half(secret_part)
    return _tag(key, message) + _xor(message, _keystream(key, len(message)))


def unseal(public_part: bytes, sealed: bytes) -> bytes:
    """Inverse of :func:`seal`; raises SealError on any key mismatch."""
    if len(sealed) < TAG_SIZE:
        raise SealError("sealed blob shorter than its tag")
    tag, body = sealed[:TAG_SIZE], sealed[TAG_SIZE:]
    message = _xor(body, _keystream(public_part, len(body)))
    if not hmac.compare_digest(tag, _tag(public_part, message)):
        raise SealError("sealed blob does not open under this public key")
    return message


class KeyAuthority:
    """Scenario-level authority that certifies node public halves."""

    def __init__(self, salt: bytes):
        self.token = make_key_token(NodeId(0xFFFFFFFF), b"authority" + salt)

    @property
    def public_part(self) -> bytes:
        return self.token.public_part

    def certify(self, token: KeyToken) -> bytes:
        return seal(self.token.secret_part, struct.pack(">I", token.owner) + token.public_part)

    def verify(self, certificate: bytes) -> Tuple[NodeId, bytes]:
        raw = unseal(self.token.public_part, certificate)
        if len(raw) != 4 + DIGEST_SIZE:
            raise SealError("certificate body has the wrong length")
        (owner,) = struct.unpack(">I", raw[:4])
        return NodeId(owner), raw[4:]


# ---------------------------------------------------------------------------
# Message envelope
# ---------------------------------------------------------------------------

class MessageKind(str, Enum):
    BEACON = "beacon"
    RREQ = "rreq"
    HREP = "hrep"
    CNFM = "cnfm"
    ACK = "ack"
    RREP = "rrep"
    HELLO_M1 = "hello_m1"
    REPLY_M2 = "reply_m2"
    TRUST_REQUEST = "trust_request"
    TRUST_RESPONSE = "trust_response"
    POS_UPDATE = "pos_update"
    POS_REQUEST = "pos_request"
    POS_REPLY = "pos_reply"
    MOBILITY_ALERT = "mobility_alert"
    SYBIL_PROBE = "sybil_probe"
    SYBIL_PROBE_REPLY = "sybil_probe_reply"
    VALIDATE_REQUEST = "validate_request"
    VALIDATE_VERDICT = "validate_verdict"
    DATA = "data"


# Routing traffic on the anonymous path never names a real node.
ANONYMOUS_KINDS = frozenset(
    {
        MessageKind.RREQ,
        MessageKind.HREP,
        MessageKind.CNFM,
        MessageKind.ACK,
        MessageKind.RREP,
        MessageKind.DATA,
    }
)

SenderHandle = Union[NodeId, PseudoId]


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: SenderHandle
    sent_at: SimTime
    payload: Any = None

    def __post_init__(self) -> None:
        if self.kind in ANONYMOUS_KINDS and not isinstance(self.sender, PseudoId):
            raise ValueError(f"{self.kind.value} must be sent under a pseudo id")
        if self.sent_at < 0:
            raise ValueError("send timestamp must be non-negative")

    @property
    def sender_label(self) -> str:
        return str(self.sender)
