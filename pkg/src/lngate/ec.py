"""secp256k1 group arithmetic.

Points are immutable affine values; scalar multiplication runs in Jacobian
coordinates, with a fixed-base window table for multiples of the generator.
Not constant time.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional


@dataclass(frozen=True)
class GroupParams:
    """Short Weierstrass curve y^2 = x^3 + a*x + b over F_p with a prime-order generator."""

    name: str
    p: int
    a: int
    b: int
    q: int
    gx: int
    gy: int

    @property
    def G(self) -> "Point":
        return Point(self.gx, self.gy)


SECP256K1 = GroupParams(
    name="secp256k1",
    p=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F,
    a=0,
    b=7,
    q=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141,
    gx=0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798,
    gy=0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8,
)

P = SECP256K1.p
Q_ORDER = SECP256K1.q

_Jac = tuple  # (X, Y, Z); Z == 0 is infinity


def _jac_double(pt: _Jac) -> _Jac:
    X1, Y1, Z1 = pt
    if Z1 == 0 or Y1 == 0:
        return (0, 1, 0)
    # a == 0
    YY = Y1 * Y1 % P
    S = 4 * X1 * YY % P
    M = 3 * X1 * X1 % P
    X3 = (M * M - 2 * S) % P
    Y3 = (M * (S - X3) - 8 * YY * YY) % P
    Z3 = 2 * Y1 * Z1 % P
    return (X3, Y3, Z3)


def _jac_add(p1: _Jac, p2: _Jac) -> _Jac:
    X1, Y1, Z1 = p1
    X2, Y2, Z2 = p2
    if Z1 == 0:
        return p2
    if Z2 == 0:
        return p1
    Z1Z1 = Z1 * Z1 % P
    Z2Z2 = Z2 * Z2 % P
    U1 = X1 * Z2Z2 % P
    U2 = X2 * Z1Z1 % P
    S1 = Y1 * Z2 * Z2Z2 % P
    S2 = Y2 * Z1 * Z1Z1 % P
    if U1 == U2:
        if S1 != S2:
            return (0, 1, 0)
        return _jac_double(p1)
    H = (U2 - U1) % P
    R = (S2 - S1) % P
    HH = H * H % P
    HHH = H * HH % P
    V = U1 * HH % P
    X3 = (R * R - HHH - 2 * V) % P
    Y3 = (R * (V - X3) - S1 * HHH) % P
    Z3 = H * Z1 * Z2 % P
    return (X3, Y3, Z3)


def _to_affine(pt: _Jac) -> Optional[tuple[int, int]]:
    X, Y, Z = pt
    if Z == 0:
        return None
    zinv = pow(Z, -1, P)
    zinv2 = zinv * zinv % P
    return (X * zinv2 % P, Y * zinv2 * zinv % P)


def _jac_mul(pt: _Jac, k: int) -> _Jac:
    result: _Jac = (0, 1, 0)
    for bit in bin(k)[2:]:
        result = _jac_double(result)
        if bit == "1":
            result = _jac_add(result, pt)
    return result


_WINDOW = 4


@lru_cache(maxsize=1)
def _generator_table() -> list[list[_Jac]]:
    # table[i][j] = j * 16^i * G
    table = []
    base: _Jac = (SECP256K1.gx, SECP256K1.gy, 1)
    for _ in range(256 // _WINDOW):
        row = [(0, 1, 0)]
        for _ in range((1 << _WINDOW) - 1):
            row.append(_jac_add(row[-1], base))
        table.append(row)
        for _ in range(_WINDOW):
            base = _jac_double(base)
    return table


def _generator_mul(k: int) -> _Jac:
    table = _generator_table()
    acc: _Jac = (0, 1, 0)
    i = 0
    while k:
        digit = k & ((1 << _WINDOW) - 1)
        if digit:
            acc = _jac_add(acc, table[i][digit])
        k >>= _WINDOW
        i += 1
    return acc


class Point:
    """A secp256k1 point; ``Point.infinity()`` is the identity."""

    __slots__ = ("x", "y")

    def __init__(self, x: Optional[int], y: Optional[int]):
        if (x is None) != (y is None):
            raise ValueError("both coordinates or neither")
        if x is not None and (y * y - x * x * x - SECP256K1.b) % P != 0:
            raise ValueError("point not on curve")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __setattr__(self, name, value):
        raise AttributeError("Point is immutable")

    @classmethod
    def infinity(cls) -> "Point":
        return cls(None, None)

    @property
    def is_infinity(self) -> bool:
        return self.x is None

    def _jac(self) -> _Jac:
        if self.x is None:
            return (0, 1, 0)
        return (self.x, self.y, 1)

    @classmethod
    def _from_jac(cls, pt: _Jac) -> "Point":
        aff = _to_affine(pt)
        if aff is None:
            return cls.infinity()
        obj = cls.__new__(cls)
        object.__setattr__(obj, "x", aff[0])
        object.__setattr__(obj, "y", aff[1])
        return obj

    def __add__(self, other: "Point") -> "Point":
        if not isinstance(other, Point):
            return NotImplemented
        return Point._from_jac(_jac_add(self._jac(), other._jac()))

    def __neg__(self) -> "Point":
        if self.is_infinity:
            return self
        return Point(self.x, (-self.y) % P)

    def __sub__(self, other: "Point") -> "Point":
        return self + (-other)

    def __mul__(self, k: int) -> "Point":
        if not isinstance(k, int):
            return NotImplemented
        k %= Q_ORDER
        if k == 0 or self.is_infinity:
            return Point.infinity()
        if self.x == SECP256K1.gx and self.y == SECP256K1.gy:
            return Point._from_jac(_generator_mul(k))
        return Point._from_jac(_jac_mul(self._jac(), k))

    __rmul__ = __mul__

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Point) and self.x == other.x and self.y == other.y

    def __hash__(self) -> int:
        return hash((self.x, self.y))

    def __repr__(self) -> str:
        if self.is_infinity:
            return "Point(infinity)"
        return f"Point({self.serialize().hex()})"

    def serialize(self) -> bytes:
        """33-byte compressed SEC1 encoding."""
        if self.is_infinity:
            raise ValueError("cannot serialize the point at infinity")
        return bytes([2 + (self.y & 1)]) + self.x.to_bytes(32, "big")

    @classmethod
    def deserialize(cls, data: bytes) -> "Point":
        if len(data) != 33 or data[0] not in (2, 3):
            raise ValueError("expected 33-byte compressed point")
        x = int.from_bytes(data[1:], "big")
        if x >= P:
            raise ValueError("x coordinate out of range")
        y2 = (pow(x, 3, P) + SECP256K1.b) % P
        y = pow(y2, (P + 1) // 4, P)
        if y * y % P != y2:
            raise ValueError("x is not on the curve")
        if (y & 1) != (data[0] & 1):
            y = P - y
        return cls(x, y)


G = SECP256K1.G


def scalar_from_bytes(data: bytes) -> int:
    return int.from_bytes(data, "big")


def scalar_to_bytes(k: int) -> bytes:
    return (k % Q_ORDER).to_bytes(32, "big")


def hash_to_scalar(*parts: bytes) -> int:
    """SHA-256 over the concatenated parts, reduced mod q."""
    return int.from_bytes(hashlib.sha256(b"".join(parts)).digest(), "big") % Q_ORDER
