"""Message schemas and encrypted, authenticated framing for the IoT link.

Payloads use a fixed binary layout per message type: amounts are 8-byte
big-endian satoshi, points 33-byte compressed, hashes and scalars 32 bytes,
signatures 64 bytes (r || s). A trailing ``rest`` field swallows the remainder
of the payload, which is how threshold round payloads are carried.

Frame layout (all integers big-endian)::

    magic "LG" | version 0x01 | msg_type | payload_len u32 | nonce 16B
    | AES-256-CTR(payload) | HMAC-SHA256 tag 32B

The nonce is ``counter u64 || session_id u64`` and doubles as the initial CTR
counter block. The tag covers every preceding byte (encrypt-then-MAC).
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass, fields
from typing import ClassVar, Optional

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .ec import Point
from .signatures import EcdsaSignature

MAGIC = b"LG"
VERSION = 0x01
HEADER_SIZE = 2 + 1 + 1 + 4
NONCE_SIZE = 16
TAG_SIZE = 32
FRAME_OVERHEAD = HEADER_SIZE + NONCE_SIZE + TAG_SIZE
MAX_PAYLOAD = 1 << 20


class WireError(Exception):
    pass


class AuthFailure(WireError):
    pass


class BadMagic(WireError):
    pass


class UnknownType(WireError):
    pass


class NonceReplay(WireError):
    pass


class MalformedPayload(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


# ------------------------------------------------------------ field codecs


def _enc_field(kind: str, value) -> bytes:
    if kind == "u8":
        return struct.pack(">B", value)
    if kind == "u16":
        return struct.pack(">H", value)
    if kind == "u32":
        return struct.pack(">I", value)
    if kind == "u64":
        return struct.pack(">Q", value)
    if kind == "point":
        return value.serialize()
    if kind in ("hash", "scalar32"):
        if len(value) != 32:
            raise ValueError("expected 32 bytes")
        return value
    if kind == "sig":
        return value.to_bytes()
    if kind == "sigs":
        return struct.pack(">H", len(value)) + b"".join(s.to_bytes() for s in value)
    if kind == "rest":
        return bytes(value)
    raise ValueError(f"unknown field kind {kind}")


_FIXED = {"u8": 1, "u16": 2, "u32": 4, "u64": 8, "point": 33, "hash": 32, "scalar32": 32, "sig": 64}


def _dec_field(kind: str, data: bytes, off: int):
    if kind == "rest":
        return bytes(data[off:]), len(data)
    if kind == "sigs":
        if off + 2 > len(data):
            raise MalformedPayload("truncated signature list")
        (count,) = struct.unpack_from(">H", data, off)
        off += 2
        end = off + 64 * count
        if end > len(data):
            raise MalformedPayload("truncated signature list")
        sigs = tuple(EcdsaSignature.from_bytes(data[o : o + 64]) for o in range(off, end, 64))
        return sigs, end
    size = _FIXED[kind]
    if off + size > len(data):
        raise MalformedPayload(f"truncated {kind} field")
    raw = data[off : off + size]
    off += size
    if kind == "u8":
        return raw[0], off
    if kind in ("u16", "u32", "u64"):
        return int.from_bytes(raw, "big"), off
    if kind == "point":
        try:
            return Point.deserialize(raw), off
        except ValueError as exc:
            raise MalformedPayload(str(exc)) from None
    if kind in ("hash", "scalar32"):
        return bytes(raw), off
    return EcdsaSignature.from_bytes(raw), off


# ---------------------------------------------------------------- messages

_REGISTRY: dict[int, type["Message"]] = {}


class Message:
    """Base for every wire message; subclasses are frozen dataclasses."""

    TYPE: ClassVar[int]
    NAME: ClassVar[str]
    # Field kinds, in declaration order of the dataclass fields.
    KINDS: ClassVar[tuple[str, ...]] = ()

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "TYPE" in cls.__dict__:
            if cls.TYPE in _REGISTRY:
                raise TypeError(f"duplicate message type 0x{cls.TYPE:02x}")
            _REGISTRY[cls.TYPE] = cls

    def encode_payload(self) -> bytes:
        return b"".join(_enc_field(k, getattr(self, f.name)) for k, f in zip(self.KINDS, fields(self)))

    @classmethod
    def decode_payload(cls, data: bytes) -> "Message":
        off = 0
        values = []
        for kind in cls.KINDS:
            value, off = _dec_field(kind, data, off)
            values.append(value)
        if off != len(data):
            raise MalformedPayload(f"{len(data) - off} trailing bytes in {cls.NAME}")
        return cls(*values)

    @property
    def name(self) -> str:
        return self.NAME


def message_class(msg_type: int) -> type[Message]:
    try:
        return _REGISTRY[msg_type]
    except KeyError:
        raise UnknownType(f"unknown message type 0x{msg_type:02x}") from None


def all_message_classes() -> list[type[Message]]:
    return [_REGISTRY[t] for t in sorted(_REGISTRY)]


def encode_message(msg: Message) -> bytes:
    """Plain ``type || payload`` encoding, used on the unencrypted peer link."""
    return bytes([msg.TYPE]) + msg.encode_payload()


def decode_message(data: bytes) -> Message:
    if not data:
        raise MalformedPayload("empty message")
    return message_class(data[0]).decode_payload(data[1:])


class CloseReason(enum.IntEnum):
    IOT_REQUEST = 1
    GATEWAY_REQUEST = 2
    BRIDGE_CLOSE = 3
    BREACH = 4


class FailReason(enum.IntEnum):
    INSUFFICIENT_FUNDS = 1
    CHANNEL_UNAVAILABLE = 2
    ROUTE_PENDING = 3
    INSUFFICIENT_FEE_BALANCE = 4
    PENDING_HTLCS = 5


# LNGate control messages (IoT <-> gateway).


@dataclass(frozen=True)
class OpenChannelRequest(Message):
    capacity: int
    TYPE = 0x01
    NAME = "OpenChannelRequest"
    KINDS = ("u64",)


@dataclass(frozen=True)
class SendPayment(Message):
    amount: int
    destination: Point
    TYPE = 0x02
    NAME = "SendPayment"
    KINDS = ("u64", "point")


@dataclass(frozen=True)
class PaymentSuccess(Message):
    payment_hash: bytes
    TYPE = 0x03
    NAME = "PaymentSuccess"
    KINDS = ("hash",)


@dataclass(frozen=True)
class ChannelClosingRequest(Message):
    TYPE = 0x04
    NAME = "ChannelClosingRequest"


@dataclass(frozen=True)
class ChannelClosed(Message):
    reason: int
    TYPE = 0x05
    NAME = "ChannelClosed"
    KINDS = ("u8",)


@dataclass(frozen=True)
class FundingTxRequest(Message):
    """Gateway asks the IoT device to fund the channel from its own wallet."""

    capacity: int
    bridge_funding_key: Point
    fee: int
    TYPE = 0x06
    NAME = "FundingTxRequest"
    KINDS = ("u64", "point", "u64")


@dataclass(frozen=True)
class FundingTxSigned(Message):
    utxo_txid: bytes
    utxo_vout: int
    utxo_amount: int
    iot_key: Point
    sig: EcdsaSignature
    TYPE = 0x07
    NAME = "FundingTxSigned"
    KINDS = ("hash", "u32", "u64", "point", "sig")


@dataclass(frozen=True)
class RequestFailed(Message):
    reason: int
    TYPE = 0x08
    NAME = "RequestFailed"
    KINDS = ("u8",)


# Threshold transport (IoT <-> gateway).


@dataclass(frozen=True)
class ThresholdKeygen(Message):
    round: int
    payload: bytes
    TYPE = 0x10
    NAME = "ThresholdKeygen"
    KINDS = ("u8", "rest")


@dataclass(frozen=True)
class ThresholdSign(Message):
    round: int
    payload: bytes
    TYPE = 0x11
    NAME = "ThresholdSign"
    KINDS = ("u8", "rest")


@dataclass(frozen=True)
class ThresholdDerive(Message):
    round: int
    index: int
    tag: int
    payload: bytes
    TYPE = 0x12
    NAME = "ThresholdDerive"
    KINDS = ("u8", "u32", "u8", "rest")


# BOLT #2 subset (gateway <-> bridge).


@dataclass(frozen=True)
class OpenChannel(Message):
    funding_pubkey: Point
    capacity: int
    to_self_delay: int
    fee_key: Point
    TYPE = 0x20
    NAME = "open_channel"
    KINDS = ("point", "u64", "u16", "point")


@dataclass(frozen=True)
class AcceptChannel(Message):
    funding_pubkey: Point
    payment_key: Point
    delayed_key: Point
    first_point: Point
    TYPE = 0x21
    NAME = "accept_channel"
    KINDS = ("point", "point", "point", "point")


@dataclass(frozen=True)
class FundingCreated(Message):
    funding_txid: bytes
    funding_vout: int
    sig: EcdsaSignature
    iot_key: Point
    first_point: Point
    TYPE = 0x22
    NAME = "funding_created"
    KINDS = ("hash", "u32", "sig", "point", "point")


@dataclass(frozen=True)
class FundingSigned(Message):
    sig: EcdsaSignature
    TYPE = 0x23
    NAME = "funding_signed"
    KINDS = ("sig",)


@dataclass(frozen=True)
class FundingLocked(Message):
    next_point: Point
    TYPE = 0x24
    NAME = "funding_locked"
    KINDS = ("point",)


@dataclass(frozen=True)
class UpdateAddHtlc(Message):
    htlc_id: int
    amount: int
    payment_hash: bytes
    timeout: int
    route: Point
    # Extension field: the gateway's service fee, so the peer can rebuild the
    # four-output gateway commitment it countersigns.
    service_fee: int
    TYPE = 0x25
    NAME = "update_add_htlc"
    KINDS = ("u64", "u64", "hash", "u32", "point", "u64")


@dataclass(frozen=True)
class CommitmentSigned(Message):
    sig: EcdsaSignature
    htlc_sigs: tuple[EcdsaSignature, ...]
    TYPE = 0x26
    NAME = "commitment_signed"
    KINDS = ("sig", "sigs")


@dataclass(frozen=True)
class RevokeAndAck(Message):
    secret: bytes
    next_point: Point
    TYPE = 0x27
    NAME = "revoke_and_ack"
    KINDS = ("scalar32", "point")


@dataclass(frozen=True)
class UpdateFulfillHtlc(Message):
    htlc_id: int
    preimage: bytes
    TYPE = 0x28
    NAME = "update_fulfill_htlc"
    KINDS = ("u64", "hash")


@dataclass(frozen=True)
class UpdateFailHtlc(Message):
    htlc_id: int
    reason: int
    TYPE = 0x29
    NAME = "update_fail_htlc"
    KINDS = ("u64", "u8")


@dataclass(frozen=True)
class Shutdown(Message):
    TYPE = 0x2A
    NAME = "shutdown"


@dataclass(frozen=True)
class ClosingSigned(Message):
    fee: int
    sig: EcdsaSignature
    TYPE = 0x2B
    NAME = "closing_signed"
    KINDS = ("u64", "sig")


# ----------------------------------------------------------------- framing


@dataclass(frozen=True)
class WireKeys:
    enc_key: bytes
    mac_key: bytes

    def __post_init__(self):
        if len(self.enc_key) != 32 or len(self.mac_key) != 32:
            raise ValueError("enc and mac keys must be 32 bytes each")

    @classmethod
    def from_secret(cls, secret: bytes) -> "WireKeys":
        if len(secret) != 64:
            raise ValueError("pre-shared secret must be 64 bytes")
        return cls(secret[:32], secret[32:])


def make_nonce(counter: int, session_id: int) -> bytes:
    return struct.pack(">QQ", counter, session_id)


def split_nonce(nonce: bytes) -> tuple[int, int]:
    return struct.unpack(">QQ", nonce)


def _ctr(key: bytes, nonce: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
    return enc.update(data) + enc.finalize()


def encode_frame(msg: Message, keys: WireKeys, nonce: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 16 bytes")
    payload = msg.encode_payload()
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload too large")
    head = MAGIC + bytes([VERSION, msg.TYPE]) + struct.pack(">I", len(payload)) + nonce
    body = head + _ctr(keys.enc_key, nonce, payload)
    return body + hmac.new(keys.mac_key, body, hashlib.sha256).digest()


@dataclass(frozen=True)
class OpenedFrame:
    message: Message
    counter: int
    session_id: int
    size: int


def open_frame(data: bytes, keys: WireKeys) -> OpenedFrame:
    """Authenticate, then decrypt and parse. The MAC is checked before any parsing."""
    if data[:2] != MAGIC:
        raise BadMagic("frame does not start with 'LG'")
    if len(data) < FRAME_OVERHEAD:
        raise AuthFailure("frame shorter than header and tag")
    body, tag = data[:-TAG_SIZE], data[-TAG_SIZE:]
    if not hmac.compare_digest(hmac.new(keys.mac_key, body, hashlib.sha256).digest(), tag):
        raise AuthFailure("frame tag mismatch")
    version, msg_type = data[2], data[3]
    if version != VERSION:
        raise UnsupportedVersion(f"frame version {version}")
    (length,) = struct.unpack_from(">I", data, 4)
    if HEADER_SIZE + NONCE_SIZE + length + TAG_SIZE != len(data):
        raise MalformedPayload("payload length does not match frame size")
    nonce = data[HEADER_SIZE : HEADER_SIZE + NONCE_SIZE]
    cls = message_class(msg_type)
    payload = _ctr(keys.enc_key, nonce, data[HEADER_SIZE + NONCE_SIZE : -TAG_SIZE])
    counter, session_id = split_nonce(nonce)
    return OpenedFrame(cls.decode_payload(payload), counter, session_id, len(data))


def decode_frame(data: bytes, keys: WireKeys) -> Message:
    return open_frame(data, keys).message


def frame_size(msg: Message) -> int:
    return FRAME_OVERHEAD + len(msg.encode_payload())


_DIRECTION_BIT = 1 << 63


class WireSession:
    """One endpoint of the IoT link: nonce bookkeeping and byte counters.

    The two directions use session ids differing in the top bit, so the shared
    key never encrypts two frames under the same counter block.
    """

    def __init__(self, keys: WireKeys, session_id: int, initiator: bool):
        self.keys = keys
        base = session_id & ~_DIRECTION_BIT
        self.send_sid = base if initiator else base | _DIRECTION_BIT
        self.recv_sid = base | _DIRECTION_BIT if initiator else base
        self._send_counter = 0
        self._last_recv: Optional[int] = None
        self.bytes_sent = 0
        self.bytes_received = 0
        self.frames_sent = 0
        self.frames_received = 0

    def seal(self, msg: Message) -> bytes:
        frame = encode_frame(msg, self.keys, make_nonce(self._send_counter, self.send_sid))
        self._send_counter += 1
        self.bytes_sent += len(frame)
        self.frames_sent += 1
        return frame

    def open(self, data: bytes) -> Message:
        opened = open_frame(data, self.keys)
        if opened.session_id != self.recv_sid:
            raise NonceReplay("frame belongs to another session or direction")
        if self._last_recv is not None and opened.counter <= self._last_recv:
            raise NonceReplay(f"counter {opened.counter} not above {self._last_recv}")
        self._last_recv = opened.counter
        self.bytes_received += len(data)
        self.frames_received += 1
        return opened.message

    def session_metrics(self) -> dict:
        return {
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "frame_count": self.frames_sent + self.frames_received,
        }
