"""Deterministic in-memory blockchain with predicate-level spend conditions.

Outputs carry one of a closed set of spending rules instead of script. A
spending input carries the matching witness; every signature is checked with
``verify_standard`` over the spending transaction's digest.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Union

from .ec import Point
from .signatures import EcdsaSignature, verify_standard

# Fixed on-chain fee table (satoshi).
OPEN_FEE = 222
CLOSE_FEE = 183
OTHER_FEE = 150

DEFAULT_TO_SELF_DELAY = 144
DEFAULT_HTLC_TIMEOUT = 40
DEFAULT_CONFIRMATION_DEPTH = 3
DUST_LIMIT = 546

COIN = 100_000_000


class TxRejected(Exception):
    reason = "rejected"


class BadWitness(TxRejected):
    reason = "BadWitness"


class UnknownOutpoint(TxRejected):
    reason = "UnknownOutpoint"


class DoubleSpend(TxRejected):
    reason = "DoubleSpend"


class PrematureSpend(TxRejected):
    reason = "PrematureSpend"


class ValueOverflow(TxRejected):
    reason = "ValueOverflow"


# ------------------------------------------------------------ conditions


@dataclass(frozen=True)
class KeySpend:
    owner: Point


@dataclass(frozen=True)
class DelayedKeySpend:
    owner: Point
    delay: int


@dataclass(frozen=True)
class RevocableDelayed:
    owner: Point
    delay: int
    revocation: Point


@dataclass(frozen=True)
class HtlcOffered:
    payment_hash: bytes
    recipient: Point
    refund: Point
    timeout: int


@dataclass(frozen=True)
class ThresholdFunding:
    """2-of-2 between the two-party threshold key and, optionally, a peer key."""

    joint: Point
    peer: Optional[Point] = None


SpendCondition = Union[KeySpend, DelayedKeySpend, RevocableDelayed, HtlcOffered, ThresholdFunding]


# ------------------------------------------------------------- witnesses


@dataclass(frozen=True)
class Sig:
    pubkey: Point
    sig: EcdsaSignature


@dataclass(frozen=True)
class RevocationSig:
    pubkey: Point
    sig: EcdsaSignature


@dataclass(frozen=True)
class Preimage:
    preimage: bytes
    sig: EcdsaSignature


@dataclass(frozen=True)
class Timeout:
    sig: EcdsaSignature


@dataclass(frozen=True)
class MultiSig:
    sigs: tuple[EcdsaSignature, ...]


Witness = Union[Sig, RevocationSig, Preimage, Timeout, MultiSig]


@dataclass(frozen=True)
class SpendContext:
    height: int
    digest: bytes
    confirmations: int


def verify_witness(cond: SpendCondition, wit: Optional[Witness], ctx: SpendContext) -> bool:
    """Pure predicate evaluation. Delays compare against the input's confirmations."""
    if wit is None:
        return False
    m = ctx.digest
    if isinstance(cond, KeySpend):
        return isinstance(wit, Sig) and wit.pubkey == cond.owner and verify_standard(cond.owner, m, wit.sig)
    if isinstance(cond, DelayedKeySpend):
        return (
            isinstance(wit, Sig)
            and wit.pubkey == cond.owner
            and ctx.confirmations >= cond.delay
            and verify_standard(cond.owner, m, wit.sig)
        )
    if isinstance(cond, RevocableDelayed):
        if isinstance(wit, RevocationSig):
            return wit.pubkey == cond.revocation and verify_standard(cond.revocation, m, wit.sig)
        return (
            isinstance(wit, Sig)
            and wit.pubkey == cond.owner
            and ctx.confirmations >= cond.delay
            and verify_standard(cond.owner, m, wit.sig)
        )
    if isinstance(cond, HtlcOffered):
        if isinstance(wit, Preimage):
            return (
                hashlib.sha256(wit.preimage).digest() == cond.payment_hash
                and verify_standard(cond.recipient, m, wit.sig)
            )
        if isinstance(wit, Timeout):
            return ctx.height >= cond.timeout and verify_standard(cond.refund, m, wit.sig)
        return False
    if isinstance(cond, ThresholdFunding):
        if not isinstance(wit, MultiSig):
            return False
        keys = [cond.joint] if cond.peer is None else [cond.joint, cond.peer]
        return len(wit.sigs) == len(keys) and all(verify_standard(k, m, s) for k, s in zip(keys, wit.sigs))
    return False


def _timing_violation(cond: SpendCondition, wit: Witness, ctx: SpendContext) -> bool:
    if isinstance(cond, DelayedKeySpend):
        return ctx.confirmations < cond.delay
    if isinstance(cond, RevocableDelayed) and isinstance(wit, Sig):
        return ctx.confirmations < cond.delay
    if isinstance(cond, HtlcOffered) and isinstance(wit, Timeout):
        return ctx.height < cond.timeout
    return False


# ---------------------------------------------------------- serialization


def _cond_bytes(cond: SpendCondition) -> bytes:
    if isinstance(cond, KeySpend):
        return b"\x01" + cond.owner.serialize()
    if isinstance(cond, DelayedKeySpend):
        return b"\x02" + cond.owner.serialize() + struct.pack(">I", cond.delay)
    if isinstance(cond, RevocableDelayed):
        return b"\x03" + cond.owner.serialize() + struct.pack(">I", cond.delay) + cond.revocation.serialize()
    if isinstance(cond, HtlcOffered):
        return (
            b"\x04"
            + cond.payment_hash
            + cond.recipient.serialize()
            + cond.refund.serialize()
            + struct.pack(">I", cond.timeout)
        )
    if isinstance(cond, ThresholdFunding):
        peer = cond.peer.serialize() if cond.peer is not None else b"\x00" * 33
        return b"\x05" + cond.joint.serialize() + peer
    raise TypeError(f"unknown condition {cond!r}")


def _witness_bytes(wit: Optional[Witness]) -> bytes:
    if wit is None:
        return b"\x00"
    if isinstance(wit, Sig):
        return b"\x01" + wit.pubkey.serialize() + wit.sig.to_bytes()
    if isinstance(wit, RevocationSig):
        return b"\x02" + wit.pubkey.serialize() + wit.sig.to_bytes()
    if isinstance(wit, Preimage):
        return b"\x03" + wit.preimage + wit.sig.to_bytes()
    if isinstance(wit, Timeout):
        return b"\x04" + wit.sig.to_bytes()
    if isinstance(wit, MultiSig):
        return b"\x05" + bytes([len(wit.sigs)]) + b"".join(s.to_bytes() for s in wit.sigs)
    raise TypeError(f"unknown witness {wit!r}")


def condition_to_json(cond: SpendCondition) -> dict:
    out: dict = {"type": type(cond).__name__}
    for f in cond.__dataclass_fields__:
        value = getattr(cond, f)
        if isinstance(value, Point):
            value = value.serialize().hex()
        elif isinstance(value, bytes):
            value = value.hex()
        out[f] = value
    return out


# ----------------------------------------------------------- transactions


@dataclass(frozen=True)
class Outpoint:
    txid: bytes
    vout: int

    def __str__(self) -> str:
        return f"{self.txid.hex()}:{self.vout}"


@dataclass(frozen=True)
class TxOut:
    amount: int
    condition: SpendCondition


@dataclass(frozen=True)
class TxIn:
    outpoint: Outpoint
    witness: Optional[Witness] = None


@dataclass(frozen=True)
class SimTx:
    inputs: tuple[TxIn, ...]
    outputs: tuple[TxOut, ...]
    fee: int = 0
    label: str = field(default="", compare=False)

    def __post_init__(self):
        for out in self.outputs:
            if not isinstance(out.amount, int) or out.amount < 0:
                raise ValueError("output amounts must be non-negative integer satoshi")
        if self.fee < 0:
            raise ValueError("fee must be non-negative")

    def serialize(self, include_witness: bool = True) -> bytes:
        parts = [b"LGTX", struct.pack(">H", len(self.inputs))]
        for txin in self.inputs:
            parts.append(txin.outpoint.txid + struct.pack(">I", txin.outpoint.vout))
            parts.append(_witness_bytes(txin.witness) if include_witness else b"\x00")
        parts.append(struct.pack(">H", len(self.outputs)))
        for out in self.outputs:
            parts.append(struct.pack(">Q", out.amount) + _cond_bytes(out.condition))
        parts.append(struct.pack(">Q", self.fee))
        return b"".join(parts)

    @property
    def txid(self) -> bytes:
        """Hash of the witness-stripped serialization, stable across signing."""
        return hashlib.sha256(self.serialize(include_witness=False)).digest()

    @property
    def digest(self) -> bytes:
        """Signing digest: the serialization with every witness zeroed."""
        return hashlib.sha256(b"sighash" + self.serialize(include_witness=False)).digest()

    def with_witnesses(self, witnesses: Iterable[Optional[Witness]]) -> "SimTx":
        witnesses = list(witnesses)
        if len(witnesses) != len(self.inputs):
            raise ValueError("one witness per input")
        inputs = tuple(TxIn(i.outpoint, w) for i, w in zip(self.inputs, witnesses))
        return replace(self, inputs=inputs)

    def outpoint(self, vout: int) -> Outpoint:
        return Outpoint(self.txid, vout)

    @property
    def total_out(self) -> int:
        return sum(o.amount for o in self.outputs)


@dataclass
class Block:
    height: int
    txids: list[bytes]


@dataclass
class _TxRecord:
    tx: SimTx
    height: Optional[int] = None  # inclusion height


class SimChain:
    """Single-owner chain state. Mining is manual and includes the mempool FIFO."""

    def __init__(self):
        self.blocks: list[Block] = []
        self.utxos: dict[Outpoint, TxOut] = {}
        self.mempool: list[bytes] = []
        self._txs: dict[bytes, _TxRecord] = {}
        self._mempool_spent: dict[Outpoint, bytes] = {}
        self.spent_by: dict[Outpoint, bytes] = {}
        self.total_minted = 0
        self.total_fees = 0
        self._mint_counter = 0

    @property
    def height(self) -> int:
        return len(self.blocks)

    def get_tx(self, txid: bytes) -> SimTx:
        return self._txs[txid].tx

    def inclusion_height(self, txid: bytes) -> Optional[int]:
        rec = self._txs.get(txid)
        return rec.height if rec else None

    def confirmations(self, txid: bytes) -> int:
        rec = self._txs.get(txid)
        if rec is None or rec.height is None:
            return 0
        return self.height - rec.height + 1

    def faucet(self, amount: int, condition: SpendCondition) -> Outpoint:
        """Mint ``amount`` to ``condition`` in a freshly mined block."""
        self._mint_counter += 1
        # The null-txid input numbered by a counter keeps identical mints apart.
        mint_in = TxIn(Outpoint(b"\x00" * 32, self._mint_counter))
        tx = SimTx((mint_in,), (TxOut(amount, condition),), label=f"mint#{self._mint_counter}")
        self._txs[tx.txid] = _TxRecord(tx)
        self.total_minted += amount
        self.mempool.append(tx.txid)
        self.mine_block()
        return tx.outpoint(0)

    def _is_mint(self, tx: SimTx) -> bool:
        return len(tx.inputs) == 1 and tx.inputs[0].outpoint.txid == b"\x00" * 32

    def validate(self, tx: SimTx) -> None:
        if not tx.inputs:
            raise ValueOverflow("transaction has no inputs")
        seen = set()
        total_in = 0
        digest = tx.digest
        for txin in tx.inputs:
            op = txin.outpoint
            if op in seen:
                raise DoubleSpend(f"{op} spent twice in one transaction")
            seen.add(op)
            if op in self.spent_by or op in self._mempool_spent:
                raise DoubleSpend(f"{op} already spent")
            prev = self.utxos.get(op)
            if prev is None:
                raise UnknownOutpoint(f"{op} is not a confirmed unspent output")
            ctx = SpendContext(self.height, digest, self.confirmations(op.txid))
            if not verify_witness(prev.condition, txin.witness, ctx):
                if txin.witness is not None and _timing_violation(prev.condition, txin.witness, ctx):
                    raise PrematureSpend(f"{op} is timelocked at height {self.height}")
                raise BadWitness(f"witness does not satisfy {type(prev.condition).__name__} at {op}")
            total_in += prev.amount
        if tx.total_out + tx.fee > total_in:
            raise ValueOverflow(f"outputs {tx.total_out} + fee {tx.fee} exceed inputs {total_in}")

    def broadcast(self, tx: SimTx) -> bytes:
        """Validate and queue ``tx``; raises a ``TxRejected`` subclass on failure."""
        txid = tx.txid
        if txid in self._txs:
            raise DoubleSpend("transaction already known")
        self.validate(tx)
        self._txs[txid] = _TxRecord(tx)
        self.mempool.append(txid)
        for txin in tx.inputs:
            self._mempool_spent[txin.outpoint] = txid
        return txid

    def mine_block(self) -> int:
        height = self.height + 1
        included = list(self.mempool)
        self.mempool.clear()
        for txid in included:
            tx = self._txs[txid].tx
            total_in = 0
            if not self._is_mint(tx):
                for txin in tx.inputs:
                    prev = self.utxos.pop(txin.outpoint)
                    total_in += prev.amount
                    self.spent_by[txin.outpoint] = txid
                    self._mempool_spent.pop(txin.outpoint, None)
                self.total_fees += total_in - tx.total_out
            for vout, out in enumerate(tx.outputs):
                self.utxos[Outpoint(txid, vout)] = out
            self._txs[txid].height = height
        self.blocks.append(Block(height, included))
        return height

    def mine(self, n: int) -> int:
        for _ in range(n):
            self.mine_block()
        return self.height

    def block_txs(self, height: int) -> list[SimTx]:
        return [self._txs[t].tx for t in self.blocks[height - 1].txids]

    def fee_paid(self, txid: bytes) -> int:
        tx = self.get_tx(txid)
        if self._is_mint(tx):
            return 0
        total_in = 0
        for txin in tx.inputs:
            prev_tx = self.get_tx(txin.outpoint.txid)
            total_in += prev_tx.outputs[txin.outpoint.vout].amount
        return total_in - tx.total_out

    def utxo_total(self) -> int:
        return sum(o.amount for o in self.utxos.values())

    def conserved(self) -> bool:
        return self.utxo_total() + self.total_fees == self.total_minted

    def balance_of(self, pubkey: Point) -> int:
        """Satoshi in confirmed outputs whose only key is ``pubkey``."""
        return sum(
            o.amount
            for o in self.utxos.values()
            if isinstance(o.condition, (KeySpend, DelayedKeySpend)) and o.condition.owner == pubkey
        )

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for block in self.blocks:
            h.update(struct.pack(">I", block.height))
            for t in block.txids:
                h.update(t)
        for op in sorted(self.utxos, key=lambda o: (o.txid, o.vout)):
            h.update(op.txid + struct.pack(">I", op.vout))
        return h.hexdigest()

    def to_json(self) -> dict:
        blocks = []
        for block in self.blocks:
            blocks.append(
                {
                    "height": block.height,
                    "txs": [
                        {
                            "txid": t.hex(),
                            "label": self._txs[t].tx.label,
                            "hex": self._txs[t].tx.serialize().hex(),
                        }
                        for t in block.txids
                    ],
                }
            )
        utxos = [
            {"outpoint": str(op), "amount": out.amount, "condition": condition_to_json(out.condition)}
            for op, out in sorted(self.utxos.items(), key=lambda kv: (kv[0].txid, kv[0].vout))
        ]
        return {
            "height": self.height,
            "blocks": blocks,
            "utxos": utxos,
            "mempool": [t.hex() for t in self.mempool],
            "total_minted": self.total_minted,
            "total_fees": self.total_fees,
        }

    def dump(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
