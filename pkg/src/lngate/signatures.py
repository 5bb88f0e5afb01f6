"""Plain single-key ECDSA over secp256k1 (SHA-256 message digest, low-s)."""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import Optional

from .ec import G, Q_ORDER, Point, scalar_to_bytes

q = Q_ORDER


def _sha256(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


def message_scalar(digest: bytes) -> int:
    return int.from_bytes(digest, "big") % q


@dataclass(frozen=True)
class EcdsaSignature:
    r: int
    s: int

    def to_bytes(self) -> bytes:
        return self.r.to_bytes(32, "big") + self.s.to_bytes(32, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> "EcdsaSignature":
        if len(data) != 64:
            raise ValueError("signature must be 64 bytes")
        return cls(int.from_bytes(data[:32], "big"), int.from_bytes(data[32:], "big"))

    @property
    def is_low_s(self) -> bool:
        return self.s <= (q - 1) // 2


def verify_standard(Q: Point, m: bytes, sig: EcdsaSignature) -> bool:
    """Textbook ECDSA verification of ``sig`` on SHA-256(m) under ``Q``."""
    r, s = sig.r, sig.s
    if not (0 < r < q and 0 < s < q) or Q.is_infinity:
        return False
    z = message_scalar(_sha256(m))
    w = pow(s, -1, q)
    X = (z * w % q) * G + (r * w % q) * Q
    if X.is_infinity:
        return False
    return X.x % q == r


def normalize_s(s: int) -> int:
    return q - s if s > (q - 1) // 2 else s


def sign_single(x: int, m: bytes, k: Optional[int] = None) -> EcdsaSignature:
    """Single-key ECDSA with a deterministic HMAC nonce unless ``k`` is given."""
    z = message_scalar(_sha256(m))
    counter = 0
    while True:
        if k is None:
            nonce_seed = hmac.new(scalar_to_bytes(x), _sha256(m) + counter.to_bytes(4, "big"), "sha256").digest()
            kk = int.from_bytes(nonce_seed, "big") % q
        else:
            kk = k % q
        if kk:
            R = kk * G
            r = R.x % q
            s = pow(kk, -1, q) * (z + r * x) % q
            if r and s:
                return EcdsaSignature(r, normalize_s(s))
        if k is not None:
            raise ValueError("supplied nonce yields a degenerate signature")
        counter += 1
