"""Two-party ECDSA with multiplicative key shares.

The server holds ``x1`` and a Paillier key; the client holds ``x2`` and
``c_key = Enc(x1)``. The joint key is ``Q = x1*x2*G``. Signing is a four-message
exchange whose output is an ordinary low-s ECDSA signature under ``Q``.

Every exchange is exposed as a pair of session objects (one per party) whose
round methods consume and return message dataclasses; the module-level
``keygen``/``sign``/``derive_commitment_point`` helpers run both sides
in-process.
"""
from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .ec import G, Q_ORDER, SECP256K1, GroupParams, Point, hash_to_scalar, scalar_to_bytes
from .paillier import (
    DEFAULT_BITS,
    PaillierPrivateKey,
    PaillierPublicKey,
    generate_keypair,
    minimum_bits,
)
from .signatures import (  # noqa: F401  re-exported
    EcdsaSignature,
    _sha256,
    message_scalar,
    normalize_s,
    sign_single,
    verify_standard,
)

q = Q_ORDER

# Placeholders for the Paillier well-formedness proof and the x1 range proof.
# A real proof would be carried in the same keygen message slot.
WELLFORMED_PROOF_TAG = b"lngate/paillier-wellformed/unproven-v1"
RANGE_PROOF_TAG = b"lngate/x1-range/unproven-v1"

Entropy = Union[None, int, bytes, str, random.Random]


class ThresholdError(Exception):
    pass


class ProofRejected(ThresholdError):
    pass


class ShareOutOfRange(ThresholdError):
    pass


class InvalidSignature(ThresholdError):
    pass


class TweakZero(ThresholdError):
    pass


class Party(enum.Enum):
    SERVER = 1
    CLIENT = 2


class KeyTag(enum.IntEnum):
    FUNDING_KEY = 0
    COMMITMENT_POINT = 1


def make_rng(entropy: Entropy) -> random.Random:
    """Seeded generator for deterministic test mode; OS CSPRNG when ``entropy`` is None."""
    if entropy is None:
        return random.SystemRandom()
    if isinstance(entropy, random.Random):
        return entropy
    return random.Random(entropy)


def _random_scalar(rng: random.Random) -> int:
    return rng.randrange(1, q)


def _check_share(x: int) -> int:
    if not 1 <= x <= q - 1:
        raise ShareOutOfRange("share must lie in [1, q-1]")
    return x


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class PartyShare:
    party: Party
    x: int = field(repr=False)
    Q_i: Point

    @classmethod
    def from_secret(cls, party: Party, x: int) -> "PartyShare":
        return cls(party, _check_share(x), x * G)


@dataclass(frozen=True)
class DlogProof:
    """Fiat-Shamir Schnorr proof of knowledge of ``x`` with ``Q_i = x*G``."""

    A: Point
    e: int
    z: int

    SIZE = 33 + 32 + 32

    def to_bytes(self) -> bytes:
        return self.A.serialize() + self.e.to_bytes(32, "big") + self.z.to_bytes(32, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "DlogProof":
        if len(data) != cls.SIZE:
            raise ValueError("bad proof length")
        return cls(
            Point.deserialize(data[:33]),
            int.from_bytes(data[33:65], "big"),
            int.from_bytes(data[65:97], "big"),
        )


@dataclass(frozen=True)
class ChildIndex:
    index: int
    tag: KeyTag = KeyTag.FUNDING_KEY

    def __post_init__(self):
        if not 0 <= self.index < 2**32:
            raise ValueError("child index must be an unsigned 32-bit value")

    def to_bytes(self) -> bytes:
        return bytes([int(self.tag)]) + struct.pack(">I", self.index)


@dataclass(frozen=True)
class JointKey:
    """One party's view of the joint key.

    ``share`` is the party's effective share: for a derived child on the client
    side it is the tweaked ``t*x2``. ``paillier_sk`` is set on the server view only.
    """

    share: PartyShare
    Q: Point
    peer_Q: Point
    c_key: int
    paillier_pk: PaillierPublicKey
    paillier_sk: Optional[PaillierPrivateKey] = field(default=None, repr=False)
    path: tuple[ChildIndex, ...] = ()
    transcript: tuple[bytes, ...] = ()

    @property
    def party(self) -> Party:
        return self.share.party


# ----------------------------------------------------------- dlog proofs


def _challenge(Q_i: Point, A: Point, context: bytes) -> int:
    return hash_to_scalar(b"lngate/dlog", G.serialize(), Q_i.serialize(), A.serialize(), context)


def prove_dlog(x: int, Q_i: Point, rng: Optional[random.Random] = None, context: bytes = b"") -> DlogProof:
    rng = rng or random.SystemRandom()
    a = _random_scalar(rng)
    A = a * G
    e = _challenge(Q_i, A, context)
    return DlogProof(A, e, (a + e * x) % q)


def verify_dlog(Q_i: Point, proof: DlogProof, context: bytes = b"") -> bool:
    try:
        if Q_i.is_infinity or proof.A.is_infinity:
            return False
        if not (0 <= proof.e < q and 0 <= proof.z < q):
            return False
        if proof.e != _challenge(Q_i, proof.A, context):
            return False
        return proof.z * G == proof.A + proof.e * Q_i
    except (AttributeError, TypeError, ValueError):
        return False


# ------------------------------------------------------------------- keygen


def _commit(blind: bytes, *parts: bytes) -> bytes:
    return _sha256(b"lngate/commit", blind, *parts)


@dataclass(frozen=True)
class KeygenMsg1:
    commitment: bytes

    def to_bytes(self) -> bytes:
        return self.commitment

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeygenMsg1":
        if len(data) != 32:
            raise ValueError("bad keygen round-1 payload")
        return cls(data)


@dataclass(frozen=True)
class KeygenMsg2:
    Q2: Point
    proof: DlogProof

    def to_bytes(self) -> bytes:
        return self.Q2.serialize() + self.proof.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeygenMsg2":
        if len(data) != 33 + DlogProof.SIZE:
            raise ValueError("bad keygen round-2 payload")
        return cls(Point.deserialize(data[:33]), DlogProof.from_bytes(data[33:]))


def _pack_int(value: int) -> bytes:
    raw = value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")
    return struct.pack(">H", len(raw)) + raw


def _unpack_int(data: bytes, offset: int) -> tuple[int, int]:
    (length,) = struct.unpack_from(">H", data, offset)
    offset += 2
    if offset + length > len(data):
        raise ValueError("truncated integer")
    return int.from_bytes(data[offset : offset + length], "big"), offset + length


def _pack_bytes(value: bytes) -> bytes:
    return struct.pack(">H", len(value)) + value


def _unpack_bytes(data: bytes, offset: int) -> tuple[bytes, int]:
    (length,) = struct.unpack_from(">H", data, offset)
    offset += 2
    if offset + length > len(data):
        raise ValueError("truncated field")
    return data[offset : offset + length], offset + length


@dataclass(frozen=True)
class KeygenMsg3:
    Q1: Point
    proof: DlogProof
    blind: bytes
    paillier_n: int
    c_key: int
    wellformed_proof: bytes = WELLFORMED_PROOF_TAG
    range_proof: bytes = RANGE_PROOF_TAG

    def to_bytes(self) -> bytes:
        return (
            self.Q1.serialize()
            + self.proof.to_bytes()
            + self.blind
            + _pack_int(self.paillier_n)
            + _pack_int(self.c_key)
            + _pack_bytes(self.wellformed_proof)
            + _pack_bytes(self.range_proof)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeygenMsg3":
        off = 33 + DlogProof.SIZE + 32
        Q1 = Point.deserialize(data[:33])
        proof = DlogProof.from_bytes(data[33 : 33 + DlogProof.SIZE])
        blind = data[33 + DlogProof.SIZE : off]
        n, off = _unpack_int(data, off)
        c_key, off = _unpack_int(data, off)
        wf, off = _unpack_bytes(data, off)
        rp, off = _unpack_bytes(data, off)
        if off != len(data):
            raise ValueError("trailing bytes in keygen round-3 payload")
        return cls(Q1, proof, blind, n, c_key, wf, rp)


class KeygenServer:
    def __init__(
        self,
        rng: Optional[random.Random] = None,
        paillier_bits: int = DEFAULT_BITS,
        x1: Optional[int] = None,
        allow_test_size: bool = False,
    ):
        self.rng = rng or random.SystemRandom()
        self.x1 = _check_share(x1) if x1 is not None else _random_scalar(self.rng)
        self.Q1 = self.x1 * G
        self.proof = prove_dlog(self.x1, self.Q1, self.rng, b"keygen/server")
        self.blind = self.rng.getrandbits(256).to_bytes(32, "big")
        self.pk, self.sk = generate_keypair(paillier_bits, self.rng, allow_test_size=allow_test_size)
        self.c_key = self.pk.encrypt(self.x1, self.rng)
        self._result: Optional[JointKey] = None

    def round1(self) -> KeygenMsg1:
        return KeygenMsg1(_commit(self.blind, self.Q1.serialize(), self.proof.to_bytes()))

    def round3(self, msg2: KeygenMsg2) -> KeygenMsg3:
        if not verify_dlog(msg2.Q2, msg2.proof, b"keygen/client"):
            raise ProofRejected("client dlog proof for Q2 rejected")
        Q = self.x1 * msg2.Q2
        self._result = JointKey(
            share=PartyShare(Party.SERVER, self.x1, self.Q1),
            Q=Q,
            peer_Q=msg2.Q2,
            c_key=self.c_key,
            paillier_pk=self.pk,
            paillier_sk=self.sk,
            transcript=(WELLFORMED_PROOF_TAG, RANGE_PROOF_TAG),
        )
        return KeygenMsg3(self.Q1, self.proof, self.blind, self.pk.n, self.c_key)

    def result(self) -> JointKey:
        if self._result is None:
            raise ThresholdError("keygen not finished")
        return self._result


class KeygenClient:
    def __init__(
        self,
        rng: Optional[random.Random] = None,
        x2: Optional[int] = None,
        allow_test_size: bool = False,
    ):
        self.rng = rng or random.SystemRandom()
        self.x2 = _check_share(x2) if x2 is not None else _random_scalar(self.rng)
        self.Q2 = self.x2 * G
        self.allow_test_size = allow_test_size
        self._commitment: Optional[bytes] = None

    def round2(self, msg1: KeygenMsg1) -> KeygenMsg2:
        self._commitment = msg1.commitment
        return KeygenMsg2(self.Q2, prove_dlog(self.x2, self.Q2, self.rng, b"keygen/client"))

    def finish(self, msg3: KeygenMsg3) -> JointKey:
        if self._commitment is None:
            raise ThresholdError("round 2 not run")
        if _commit(msg3.blind, msg3.Q1.serialize(), msg3.proof.to_bytes()) != self._commitment:
            raise ProofRejected("server decommitment does not match")
        if not verify_dlog(msg3.Q1, msg3.proof, b"keygen/server"):
            raise ProofRejected("server dlog proof for Q1 rejected")
        if msg3.paillier_n.bit_length() < minimum_bits(self.allow_test_size):
            raise ProofRejected("Paillier modulus too small")
        if msg3.wellformed_proof != WELLFORMED_PROOF_TAG or msg3.range_proof != RANGE_PROOF_TAG:
            raise ProofRejected("unexpected proof transcript")
        pk = PaillierPublicKey(msg3.paillier_n)
        if not 0 < msg3.c_key < pk.n2:
            raise ProofRejected("c_key out of range")
        return JointKey(
            share=PartyShare(Party.CLIENT, self.x2, self.Q2),
            Q=self.x2 * msg3.Q1,
            peer_Q=msg3.Q1,
            c_key=msg3.c_key,
            paillier_pk=pk,
            transcript=(msg3.wellformed_proof, msg3.range_proof),
        )


def keygen(
    server_entropy: Entropy = None,
    client_entropy: Entropy = None,
    params: GroupParams = SECP256K1,
    paillier_bits: int = DEFAULT_BITS,
    x1: Optional[int] = None,
    x2: Optional[int] = None,
    allow_test_size: bool = False,
) -> tuple[JointKey, JointKey]:
    """Run both sides of key generation; returns ``(server_view, client_view)``."""
    if params != SECP256K1:
        raise ValueError("only secp256k1 is supported")
    server = KeygenServer(make_rng(server_entropy), paillier_bits, x1, allow_test_size)
    client = KeygenClient(make_rng(client_entropy), x2, allow_test_size)
    m1 = server.round1()
    m2 = client.round2(m1)
    m3 = server.round3(m2)
    client_view = client.finish(m3)
    return server.result(), client_view


# ----------------------------------------------------------------- signing


@dataclass(frozen=True)
class SignMsg1:
    digest: bytes
    commitment: bytes

    def to_bytes(self) -> bytes:
        return self.digest + self.commitment

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignMsg1":
        if len(data) != 64:
            raise ValueError("bad sign round-1 payload")
        return cls(data[:32], data[32:])


@dataclass(frozen=True)
class SignMsg2:
    R2: Point
    proof: DlogProof

    def to_bytes(self) -> bytes:
        return self.R2.serialize() + self.proof.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignMsg2":
        if len(data) != 33 + DlogProof.SIZE:
            raise ValueError("bad sign round-2 payload")
        return cls(Point.deserialize(data[:33]), DlogProof.from_bytes(data[33:]))


@dataclass(frozen=True)
class SignMsg3:
    R1: Point
    proof: DlogProof
    blind: bytes

    def to_bytes(self) -> bytes:
        return self.R1.serialize() + self.proof.to_bytes() + self.blind

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignMsg3":
        if len(data) != 33 + DlogProof.SIZE + 32:
            raise ValueError("bad sign round-3 payload")
        return cls(
            Point.deserialize(data[:33]),
            DlogProof.from_bytes(data[33 : 33 + DlogProof.SIZE]),
            data[33 + DlogProof.SIZE :],
        )


@dataclass(frozen=True)
class SignMsg4:
    c3: int

    def to_bytes(self) -> bytes:
        return _pack_int(self.c3)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignMsg4":
        c3, off = _unpack_int(data, 0)
        if off != len(data):
            raise ValueError("trailing bytes in sign round-4 payload")
        return cls(c3)


class SignServer:
    def __init__(self, key: JointKey, m: bytes, rng: Optional[random.Random] = None, k1: Optional[int] = None):
        if key.party is not Party.SERVER or key.paillier_sk is None:
            raise ThresholdError("server signing needs the server view")
        self.key = key
        self.m = m
        self.digest = _sha256(m)
        self.rng = rng or random.SystemRandom()
        self.k1 = _check_share(k1) if k1 is not None else _random_scalar(self.rng)
        self.R1 = self.k1 * G
        self.proof = prove_dlog(self.k1, self.R1, self.rng, b"sign/server" + self.digest)
        self.blind = self.rng.getrandbits(256).to_bytes(32, "big")
        self.r: Optional[int] = None

    def round1(self) -> SignMsg1:
        return SignMsg1(self.digest, _commit(self.blind, self.R1.serialize(), self.proof.to_bytes()))

    def round3(self, msg2: SignMsg2) -> SignMsg3:
        if not verify_dlog(msg2.R2, msg2.proof, b"sign/client" + self.digest):
            raise ProofRejected("client ephemeral proof rejected")
        R = self.k1 * msg2.R2
        self.r = R.x % q
        return SignMsg3(self.R1, self.proof, self.blind)

    def finish(self, msg4: SignMsg4) -> EcdsaSignature:
        if self.r is None:
            raise ThresholdError("round 3 not run")
        sk = self.key.paillier_sk
        s_prime = sk.decrypt(msg4.c3) % q
        s = normalize_s(s_prime * pow(self.k1, -1, q) % q)
        sig = EcdsaSignature(self.r, s)
        if s == 0 or not verify_standard(self.key.Q, self.m, sig):
            raise InvalidSignature("joint signature does not verify; client misbehaved")
        return sig


class SignClient:
    def __init__(self, key: JointKey, rng: Optional[random.Random] = None, k2: Optional[int] = None):
        if key.party is not Party.CLIENT:
            raise ThresholdError("client signing needs the client view")
        self.key = key
        self.rng = rng or random.SystemRandom()
        self.k2 = _check_share(k2) if k2 is not None else _random_scalar(self.rng)
        self.R2 = self.k2 * G
        self._msg1: Optional[SignMsg1] = None

    def round2(self, msg1: SignMsg1) -> SignMsg2:
        self._msg1 = msg1
        return SignMsg2(self.R2, prove_dlog(self.k2, self.R2, self.rng, b"sign/client" + msg1.digest))

    def round4(self, msg3: SignMsg3) -> SignMsg4:
        msg1 = self._msg1
        if msg1 is None:
            raise ThresholdError("round 2 not run")
        if _commit(msg3.blind, msg3.R1.serialize(), msg3.proof.to_bytes()) != msg1.commitment:
            raise ProofRejected("server ephemeral decommitment mismatch")
        if not verify_dlog(msg3.R1, msg3.proof, b"sign/server" + msg1.digest):
            raise ProofRejected("server ephemeral proof rejected")
        R = self.k2 * msg3.R1
        r = R.x % q
        if r == 0:
            raise ThresholdError("degenerate nonce")
        k2_inv = pow(self.k2, -1, q)
        pk = self.key.paillier_pk
        rho = self.rng.randrange(0, q * q)
        c1 = pk.encrypt((k2_inv * message_scalar(msg1.digest) + rho * q), self.rng)
        c2 = pk.scalar_mul(self.key.c_key, self.key.share.x * r * k2_inv % q)
        return SignMsg4(pk.add(c1, c2))


def sign(
    m: bytes,
    server_view: JointKey,
    client_view: JointKey,
    ephemeral_seeds: tuple[Entropy, Entropy] = (None, None),
    k1: Optional[int] = None,
    k2: Optional[int] = None,
) -> EcdsaSignature:
    """Run the four-message signing exchange in-process."""
    server = SignServer(server_view, m, make_rng(ephemeral_seeds[0]), k1)
    client = SignClient(client_view, make_rng(ephemeral_seeds[1]), k2)
    m1 = server.round1()
    m2 = client.round2(m1)
    m3 = server.round3(m2)
    m4 = client.round4(m3)
    return server.finish(m4)


# ------------------------------------------------------- child derivation


def child_tweak(Q: Point, idx: ChildIndex) -> int:
    return hash_to_scalar(Q.serialize(), idx.to_bytes())


def derive_child(joint: JointKey, idx: ChildIndex) -> JointKey:
    """Public multiplicative tweak: ``Q_idx = t*Q``; only the client share is scaled."""
    t = child_tweak(joint.Q, idx)
    if t == 0:
        raise TweakZero(f"tweak is zero for index {idx.index}; pick another index")
    if joint.party is Party.CLIENT:
        share = PartyShare(Party.CLIENT, joint.share.x * t % q, t * joint.share.Q_i)
        peer_Q = joint.peer_Q
    else:
        share = joint.share
        peer_Q = t * joint.peer_Q
    return replace(joint, share=share, Q=t * joint.Q, peer_Q=peer_Q, path=joint.path + (idx,))


# ---------------------------------------------- per-state commitment points
#
# Each party derives a hardened per-index scalar from its own share; the point
# is the product of both scalars times G, computed Diffie-Hellman style, so the
# secret a_n * b_n exists only once both scalars are released.


def commitment_share(joint: JointKey, index: int) -> int:
    idx = ChildIndex(index, KeyTag.COMMITMENT_POINT)
    label = b"lngate/cp/server" if joint.party is Party.SERVER else b"lngate/cp/client"
    s = hash_to_scalar(label, scalar_to_bytes(joint.share.x), joint.Q.serialize(), idx.to_bytes())
    if s == 0:
        raise TweakZero(f"commitment share is zero for index {index}")
    return s


@dataclass(frozen=True)
class DeriveMsg1:
    A: Point
    proof: DlogProof

    def to_bytes(self) -> bytes:
        return self.A.serialize() + self.proof.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeriveMsg1":
        if len(data) != 33 + DlogProof.SIZE:
            raise ValueError("bad derive round-1 payload")
        return cls(Point.deserialize(data[:33]), DlogProof.from_bytes(data[33:]))


@dataclass(frozen=True)
class DeriveMsg2:
    B: Point
    proof: DlogProof
    point: Point
    released_index: Optional[int] = None
    released_share: Optional[int] = None

    def to_bytes(self) -> bytes:
        out = self.B.serialize() + self.proof.to_bytes() + self.point.serialize()
        if self.released_index is not None:
            out += struct.pack(">I", self.released_index) + scalar_to_bytes(self.released_share)
        return out

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeriveMsg2":
        base = 33 + DlogProof.SIZE + 33
        if len(data) not in (base, base + 36):
            raise ValueError("bad derive round-2 payload")
        B = Point.deserialize(data[:33])
        proof = DlogProof.from_bytes(data[33 : 33 + DlogProof.SIZE])
        point = Point.deserialize(data[33 + DlogProof.SIZE : base])
        if len(data) == base:
            return cls(B, proof, point)
        (ri,) = struct.unpack_from(">I", data, base)
        return cls(B, proof, point, ri, int.from_bytes(data[base + 4 :], "big"))


def _derive_context(index: int) -> bytes:
    return ChildIndex(index, KeyTag.COMMITMENT_POINT).to_bytes()


class CommitmentPointServer:
    def __init__(self, key: JointKey, index: int, rng: Optional[random.Random] = None):
        self.key = key
        self.index = index
        self.a = commitment_share(key, index)
        self.A = self.a * G
        self.rng = rng or random.SystemRandom()

    def round1(self) -> DeriveMsg1:
        return DeriveMsg1(self.A, prove_dlog(self.a, self.A, self.rng, b"cp/server" + _derive_context(self.index)))

    def finish(self, msg2: DeriveMsg2) -> Point:
        if not verify_dlog(msg2.B, msg2.proof, b"cp/client" + _derive_context(self.index)):
            raise ProofRejected("client commitment-share proof rejected")
        if msg2.point != self.a * msg2.B:
            raise ProofRejected("client returned an inconsistent commitment point")
        return msg2.point


class CommitmentPointClient:
    def __init__(self, key: JointKey, rng: Optional[random.Random] = None):
        self.key = key
        self.rng = rng or random.SystemRandom()

    def round2(self, index: int, msg1: DeriveMsg1, release: Optional[int] = None) -> DeriveMsg2:
        if not verify_dlog(msg1.A, msg1.proof, b"cp/server" + _derive_context(index)):
            raise ProofRejected("server commitment-share proof rejected")
        b = commitment_share(self.key, index)
        B = b * G
        proof = prove_dlog(b, B, self.rng, b"cp/client" + _derive_context(index))
        if release is None:
            return DeriveMsg2(B, proof, b * msg1.A)
        return DeriveMsg2(B, proof, b * msg1.A, release, commitment_share(self.key, release))


def derive_commitment_point(server_view: JointKey, client_view: JointKey, index: int, rng: Entropy = None) -> Point:
    rng = make_rng(rng)
    server = CommitmentPointServer(server_view, index, rng)
    client = CommitmentPointClient(client_view, rng)
    return server.finish(client.round2(index, server.round1()))


def combine_commitment_secret(server_share: int, client_share: int) -> int:
    return server_share * client_share % q
