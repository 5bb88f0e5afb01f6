"""Paillier encryption with the additive homomorphism used by two-party signing.

Uses g = N + 1, so encryption is (1 + m*N) * r^N mod N^2 and decryption is a
single CRT exponentiation.
"""
from __future__ import annotations

import os
import random
from dataclasses import dataclass
from typing import Optional

import gmpy2

DEFAULT_BITS = 2048
TEST_BITS = 1024

# Setting this env var (to anything but "" or "0") allows 1024-bit moduli.
TEST_FLAG_ENV = "LNGATE_TEST_PAILLIER"


class PaillierError(Exception):
    pass


class PlaintextTooLarge(PaillierError):
    pass


class ModulusTooSmall(PaillierError):
    pass


def test_mode_enabled() -> bool:
    return os.environ.get(TEST_FLAG_ENV, "") not in ("", "0")


def minimum_bits(allow_test_size: bool = False) -> int:
    if allow_test_size or test_mode_enabled():
        return TEST_BITS
    return DEFAULT_BITS


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int

    @property
    def n2(self) -> int:
        return self.n * self.n

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    def encrypt(self, m: int, rng: Optional[random.Random] = None, r: Optional[int] = None) -> int:
        if not 0 <= m < self.n:
            raise PlaintextTooLarge(f"plaintext must lie in [0, N), got {m.bit_length()} bits")
        n2 = self.n2
        if r is None:
            rng = rng or random.SystemRandom()
            while True:
                r = rng.randrange(1, self.n)
                if gmpy2.gcd(r, self.n) == 1:
                    break
        rn = int(gmpy2.powmod(r, self.n, n2))
        return (1 + m * self.n) * rn % n2

    def add(self, c1: int, c2: int) -> int:
        """Ciphertext of the plaintext sum mod N."""
        return c1 * c2 % self.n2

    def scalar_mul(self, c: int, k: int) -> int:
        """Ciphertext of the plaintext times ``k`` mod N."""
        return int(gmpy2.powmod(c, k, self.n2))


@dataclass(frozen=True)
class PaillierPrivateKey:
    p: int
    q: int

    @property
    def public_key(self) -> PaillierPublicKey:
        return PaillierPublicKey(self.p * self.q)

    def decrypt(self, c: int) -> int:
        p, q = self.p, self.q
        n = p * q
        if not 0 <= c < n * n:
            raise PaillierError("ciphertext out of range")
        # Per-prime decryption: m_p = L_p(c^(p-1) mod p^2) * h_p mod p
        mp = _partial(c, p, q)
        mq = _partial(c, q, p)
        # CRT
        return int((mq + q * ((mp - mq) * gmpy2.invert(q, p) % p)) % n)


def _partial(c: int, p: int, other: int) -> int:
    # With g = N + 1, L_p(g^(p-1) mod p^2) reduces to -other mod p.
    p2 = p * p
    lp = (int(gmpy2.powmod(c, p - 1, p2)) - 1) // p
    hp = int(gmpy2.invert(-other % p, p))
    return lp * hp % p


def _random_prime(bits: int, rng: random.Random) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        prime = int(gmpy2.next_prime(candidate))
        if prime.bit_length() == bits:
            return prime


def generate_keypair(
    bits: int = DEFAULT_BITS,
    rng: Optional[random.Random] = None,
    allow_test_size: bool = False,
) -> tuple[PaillierPublicKey, PaillierPrivateKey]:
    if bits < minimum_bits(allow_test_size):
        raise ModulusTooSmall(
            f"{bits}-bit modulus below minimum {minimum_bits(allow_test_size)}"
            f" (set {TEST_FLAG_ENV}=1 for {TEST_BITS}-bit test keys)"
        )
    rng = rng or random.SystemRandom()
    half = bits // 2
    while True:
        p = _random_prime(half, rng)
        q = _random_prime(bits - half, rng)
        if p != q and (p * q).bit_length() == bits and gmpy2.gcd(p * q, (p - 1) * (q - 1)) == 1:
            sk = PaillierPrivateKey(p, q)
            return sk.public_key, sk
