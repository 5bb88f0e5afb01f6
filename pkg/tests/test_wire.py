import hashlib
import hmac
import json
import random
import struct
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from lngate.ec import G, Q_ORDER
from lngate.signatures import EcdsaSignature
from lngate.wire import (
    FRAME_OVERHEAD,
    AuthFailure,
    BadMagic,
    ChannelClosingRequest,
    MalformedPayload,
    NonceReplay,
    OpenChannelRequest,
    SendPayment,
    UnknownType,
    WireError,
    WireKeys,
    WireSession,
    all_message_classes,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
    frame_size,
    make_nonce,
    message_class,
)

FIXTURES = Path(__file__).parent / "fixtures"
KEYS = WireKeys.from_secret(b"\x11" * 64)


def reference_frame(msg_type: int, payload: bytes, secret: bytes, nonce: bytes) -> bytes:
    """Frame built from AES block encryptions of the counter, not a CTR mode object."""
    enc_key, mac_key = secret[:32], secret[32:]
    ecb = Cipher(algorithms.AES(enc_key), modes.ECB()).encryptor()
    counter = int.from_bytes(nonce, "big")
    stream = b""
    while len(stream) < len(payload):
        stream += ecb.update(((counter + len(stream) // 16) % 2**128).to_bytes(16, "big"))
    ct = bytes(a ^ b for a, b in zip(payload, stream))
    body = b"LG\x01" + bytes([msg_type]) + struct.pack(">I", len(payload)) + nonce + ct
    return body + hmac.new(mac_key, body, hashlib.sha256).digest()


def random_value(kind: str, rng: random.Random):
    if kind == "u8":
        return rng.randrange(256)
    if kind == "u16":
        return rng.randrange(2**16)
    if kind == "u32":
        return rng.randrange(2**32)
    if kind == "u64":
        return rng.randrange(2**64)
    if kind == "point":
        return rng.randrange(1, 2**40) * G
    if kind in ("hash", "scalar32"):
        return rng.randbytes(32)
    if kind == "sig":
        return EcdsaSignature(rng.randrange(1, Q_ORDER), rng.randrange(1, Q_ORDER))
    if kind == "sigs":
        return tuple(random_value("sig", rng) for _ in range(rng.randrange(4)))
    if kind == "rest":
        return rng.randbytes(rng.randrange(300))
    raise AssertionError(kind)


def random_message(rng: random.Random):
    cls = rng.choice(all_message_classes())
    return cls(*(random_value(k, rng) for k in cls.KINDS))


def test_known_answer_vector():
    kat = json.loads((FIXTURES / "wire_kat.json").read_text())
    secret, nonce = bytes.fromhex(kat["secret"]), bytes.fromhex(kat["nonce"])
    frame = encode_frame(ChannelClosingRequest(), WireKeys.from_secret(secret), nonce)
    assert frame.hex() == kat["frame"]
    assert reference_frame(ChannelClosingRequest.TYPE, b"", secret, nonce).hex() == kat["frame"]


def test_reference_frame_matches_for_non_empty_payloads():
    rng = random.Random(9)
    for _ in range(50):
        msg = random_message(rng)
        nonce = rng.randbytes(16)
        expected = reference_frame(msg.TYPE, msg.encode_payload(), b"\x11" * 64, nonce)
        assert encode_frame(msg, KEYS, nonce) == expected


def test_frame_layout():
    msg = OpenChannelRequest(10**9)
    frame = encode_frame(msg, KEYS, make_nonce(7, 3))
    assert frame[:2] == b"LG" and frame[2] == 1 and frame[3] == 0x01
    assert struct.unpack(">I", frame[4:8])[0] == 8
    assert frame[8:24] == make_nonce(7, 3)
    assert len(frame) == FRAME_OVERHEAD + 8 == frame_size(msg)


def test_roundtrip_bijection_over_random_frames():
    rng = random.Random(1)
    seen = set()
    for i in range(1_000):
        msg = random_message(rng)
        frame = encode_frame(msg, KEYS, make_nonce(i, 1))
        assert decode_frame(frame, KEYS) == msg
        assert decode_message(encode_message(msg)) == msg
        seen.add(type(msg))
    assert seen == set(all_message_classes())


def test_single_byte_tampering_never_parses():
    rng = random.Random(2)
    for i in range(1_000):
        frame = bytearray(encode_frame(random_message(rng), KEYS, make_nonce(i, 1)))
        pos = rng.randrange(len(frame))
        frame[pos] ^= rng.randrange(1, 256)
        with pytest.raises((AuthFailure, BadMagic)):
            decode_frame(bytes(frame), KEYS)


def test_truncation_and_wrong_key():
    frame = encode_frame(SendPayment(5, 3 * G), KEYS, make_nonce(0, 0))
    with pytest.raises(AuthFailure):
        decode_frame(frame[:-1], KEYS)
    with pytest.raises(AuthFailure):
        decode_frame(frame[:10], KEYS)
    with pytest.raises(AuthFailure):
        decode_frame(frame, WireKeys.from_secret(b"\x22" * 64))


def test_authenticated_unknown_type_rejected():
    frame = reference_frame(0xEE, b"", b"\x11" * 64, bytes(16))
    with pytest.raises(UnknownType):
        decode_frame(frame, KEYS)
    with pytest.raises(UnknownType):
        message_class(0xEE)
    with pytest.raises(UnknownType):
        decode_message(b"\xee")


def test_authenticated_malformed_payload_rejected():
    frame = reference_frame(OpenChannelRequest.TYPE, b"\x00" * 7, b"\x11" * 64, bytes(16))
    with pytest.raises(MalformedPayload):
        decode_frame(frame, KEYS)
    with pytest.raises(MalformedPayload):
        decode_message(bytes([OpenChannelRequest.TYPE]) + b"\x00" * 9)


def test_key_and_nonce_validation():
    with pytest.raises(ValueError):
        WireKeys.from_secret(b"short")
    with pytest.raises(ValueError):
        encode_frame(ChannelClosingRequest(), KEYS, b"\x00" * 8)


def pair():
    return WireSession(KEYS, 5, initiator=True), WireSession(KEYS, 5, initiator=False)


def test_session_roundtrip_and_metrics():
    a, b = pair()
    assert a.session_metrics() == {"bytes_sent": 0, "bytes_received": 0, "frame_count": 0}
    f1 = a.seal(OpenChannelRequest(1))
    f2 = a.seal(ChannelClosingRequest())
    assert b.open(f1) == OpenChannelRequest(1) and b.open(f2) == ChannelClosingRequest()
    reply = b.seal(ChannelClosingRequest())
    a.open(reply)
    assert a.session_metrics() == {
        "bytes_sent": len(f1) + len(f2),
        "bytes_received": len(reply),
        "frame_count": 3,
    }
    assert b.session_metrics()["bytes_received"] == a.session_metrics()["bytes_sent"]


def test_session_counters_additive():
    a, b = pair()
    sizes = []
    for flow in range(3):
        before = a.session_metrics()["bytes_sent"]
        for _ in range(flow + 1):
            b.open(a.seal(OpenChannelRequest(flow)))
        sizes.append(a.session_metrics()["bytes_sent"] - before)
    assert sum(sizes) == a.session_metrics()["bytes_sent"]
    assert a.session_metrics()["frame_count"] == 6


def test_replay_and_reflection_rejected():
    a, b = pair()
    f = a.seal(OpenChannelRequest(1))
    b.open(f)
    with pytest.raises(NonceReplay):
        b.open(f)
    # A frame sent by b must not be accepted back by b.
    own = b.seal(OpenChannelRequest(2))
    with pytest.raises(NonceReplay):
        b.open(own)
    other = WireSession(KEYS, 6, initiator=True)
    with pytest.raises(NonceReplay):
        b.open(other.seal(OpenChannelRequest(3)))


def test_directions_never_share_a_nonce():
    a, b = pair()
    fa, fb = a.seal(ChannelClosingRequest()), b.seal(ChannelClosingRequest())
    assert fa[8:24] != fb[8:24]


def test_errors_share_a_base():
    for exc in (AuthFailure, BadMagic, UnknownType, NonceReplay, MalformedPayload):
        assert issubclass(exc, WireError)
