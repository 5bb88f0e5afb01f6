"""Payment-channel state machine for a gateway-operated, IoT-funded channel.

Balances are integer satoshi. A state is immutable; every transition returns a
new state with ``state_num`` advanced by one. Transaction builders produce
unsigned ``SimTx`` values (or signed ones where a single local key suffices).

The gateway's commitment uses the four-output layout:

1. IoT balance, spendable only by the IoT key,
2. bridge balance, spendable by the bridge immediately,
3. one output per pending HTLC,
4. collected service fees, spendable by the gateway after ``to_self_delay``
   or by the bridge with the revocation key once the state is revoked.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional

from .chain_sim import (
    CLOSE_FEE,
    DEFAULT_CONFIRMATION_DEPTH,
    DEFAULT_HTLC_TIMEOUT,
    DEFAULT_TO_SELF_DELAY,
    DUST_LIMIT,
    OPEN_FEE,
    OTHER_FEE,
    HtlcOffered,
    KeySpend,
    Outpoint,
    Preimage,
    RevocableDelayed,
    RevocationSig,
    Sig,
    SimTx,
    ThresholdFunding,
    Timeout,
    TxIn,
    TxOut,
)
from .ec import G, Q_ORDER, Point, hash_to_scalar
from .signatures import sign_single


class ChannelError(Exception):
    pass


class InsufficientFunds(ChannelError):
    pass


class WrongPreimage(ChannelError):
    pass


class TimeoutNotReached(ChannelError):
    pass


class NotYetSuperseded(ChannelError):
    pass


class NotRevoked(ChannelError):
    pass


class NothingToPenalize(ChannelError):
    pass


class PendingHtlcs(ChannelError):
    pass


class InsufficientFeeBalance(ChannelError):
    pass


class InvalidSecret(ChannelError):
    pass


class UnknownHtlc(ChannelError):
    pass


PPM = 1_000_000


@dataclass(frozen=True)
class ChannelParams:
    capacity: int
    to_self_delay: int = DEFAULT_TO_SELF_DELAY
    htlc_timeout: int = DEFAULT_HTLC_TIMEOUT
    confirmation_depth: int = DEFAULT_CONFIRMATION_DEPTH
    service_fee_ppm: int = 0
    base_fee: int = 2
    open_fee: int = OPEN_FEE
    close_fee: int = CLOSE_FEE
    other_fee: int = OTHER_FEE
    # The IoT balance never drops below this, so a close can always be paid.
    iot_reserve: int = CLOSE_FEE

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if not 0 <= self.service_fee_ppm < PPM:
            raise ValueError("service fee must lie in [0, 1)")
        if self.to_self_delay < 0 or self.htlc_timeout < 0:
            raise ValueError("delays must be non-negative")


def service_fee(amount: int, fee_ppm: int) -> int:
    """``round(amount * fee)`` with halves rounded up, in integer arithmetic."""
    return (amount * fee_ppm + PPM // 2) // PPM


@dataclass(frozen=True)
class Htlc:
    htlc_id: int
    amount: int
    payment_hash: bytes
    timeout: int
    destination: bytes
    fee: int = 0

    def __post_init__(self):
        if self.amount <= 0:
            raise ValueError("HTLC amount must be positive")
        if len(self.payment_hash) != 32:
            raise ValueError("payment hash must be 32 bytes")

    def to_json(self) -> dict:
        return {
            "htlc_id": self.htlc_id,
            "amount": self.amount,
            "payment_hash": self.payment_hash.hex(),
            "timeout": self.timeout,
            "destination": self.destination.hex(),
            "fee": self.fee,
        }


@dataclass(frozen=True)
class ChannelState:
    state_num: int
    capacity: int
    iot_balance: int
    bridge_balance: int = 0
    gateway_fee_balance: int = 0
    pending_htlcs: tuple[Htlc, ...] = ()
    onchain_fees: int = 0
    next_htlc_id: int = 0
    commitment_point: Optional[Point] = field(default=None, compare=False)

    @property
    def htlc_total(self) -> int:
        return sum(h.amount for h in self.pending_htlcs)

    def conserved(self) -> bool:
        return (
            self.iot_balance + self.bridge_balance + self.gateway_fee_balance + self.htlc_total + self.onchain_fees
            == self.capacity
        )

    def find_htlc(self, htlc_id: int) -> Htlc:
        for h in self.pending_htlcs:
            if h.htlc_id == htlc_id:
                return h
        raise UnknownHtlc(f"no pending HTLC with id {htlc_id}")

    def to_json(self) -> dict:
        return {
            "state_num": self.state_num,
            "capacity": self.capacity,
            "iot_balance": self.iot_balance,
            "bridge_balance": self.bridge_balance,
            "gateway_fee_balance": self.gateway_fee_balance,
            "pending_htlcs": [h.to_json() for h in self.pending_htlcs],
            "onchain_fees": self.onchain_fees,
        }


def initial_state(params: ChannelParams, commitment_point: Optional[Point] = None) -> ChannelState:
    return ChannelState(0, params.capacity, params.capacity, commitment_point=commitment_point)


def _advance(state: ChannelState, **changes) -> ChannelState:
    changes.setdefault("commitment_point", None)
    return replace(state, state_num=state.state_num + 1, **changes)


def apply_payment(
    state: ChannelState,
    amount: int,
    destination: bytes,
    payment_hash: bytes,
    params: ChannelParams,
    height: int = 0,
) -> tuple[ChannelState, Htlc]:
    """Charge the service fee and offer the rest of ``amount`` as an HTLC."""
    if amount <= 0:
        raise ValueError("payment amount must be positive")
    if amount > state.iot_balance - params.iot_reserve:
        raise InsufficientFunds(
            f"payment of {amount} sat exceeds spendable IoT balance "
            f"{max(0, state.iot_balance - params.iot_reserve)} sat"
        )
    fee = service_fee(amount, params.service_fee_ppm)
    if amount - fee <= 0:
        raise InsufficientFunds("payment does not cover the service fee")
    htlc = Htlc(
        htlc_id=state.next_htlc_id,
        amount=amount - fee,
        payment_hash=payment_hash,
        timeout=height + params.htlc_timeout,
        destination=destination,
        fee=fee,
    )
    return add_htlc(state, htlc), htlc


def add_htlc(state: ChannelState, htlc: Htlc) -> ChannelState:
    """Debit ``htlc.amount + htlc.fee`` from the IoT side and lock the HTLC.

    This is the transition the peer replays from ``update_add_htlc``.
    """
    if htlc.htlc_id != state.next_htlc_id:
        raise ChannelError(f"expected HTLC id {state.next_htlc_id}, got {htlc.htlc_id}")
    if htlc.amount + htlc.fee > state.iot_balance:
        raise InsufficientFunds("HTLC exceeds the IoT balance")
    return _advance(
        state,
        iot_balance=state.iot_balance - htlc.amount - htlc.fee,
        gateway_fee_balance=state.gateway_fee_balance + htlc.fee,
        pending_htlcs=state.pending_htlcs + (htlc,),
        next_htlc_id=state.next_htlc_id + 1,
    )


def settle_htlc(state: ChannelState, preimage: bytes) -> ChannelState:
    digest = hashlib.sha256(preimage).digest()
    for h in state.pending_htlcs:
        if h.payment_hash == digest:
            remaining = tuple(x for x in state.pending_htlcs if x.htlc_id != h.htlc_id)
            return _advance(state, bridge_balance=state.bridge_balance + h.amount, pending_htlcs=remaining)
    raise WrongPreimage("preimage matches no pending HTLC")


def fail_htlc(state: ChannelState, height: int, htlc_id: Optional[int] = None) -> ChannelState:
    """Return an expired HTLC and its service fee to the IoT balance.

    Without ``htlc_id`` the oldest pending HTLC is failed.
    """
    if htlc_id is None:
        if not state.pending_htlcs:
            raise UnknownHtlc("no pending HTLC")
        htlc_id = state.pending_htlcs[0].htlc_id
    h = state.find_htlc(htlc_id)
    if height < h.timeout:
        raise TimeoutNotReached(f"HTLC {htlc_id} times out at height {h.timeout}, now {height}")
    remaining = tuple(x for x in state.pending_htlcs if x.htlc_id != htlc_id)
    return _advance(
        state,
        iot_balance=state.iot_balance + h.amount + h.fee,
        gateway_fee_balance=state.gateway_fee_balance - h.fee,
        pending_htlcs=remaining,
    )


# ----------------------------------------------------------- keys & secrets


def revocation_pubkey(point: Point) -> Point:
    return point + hash_to_scalar(point.serialize(), b"rev") * G


def revocation_privkey(secret: int, point: Optional[Point] = None) -> int:
    point = point if point is not None else secret * G
    return (secret + hash_to_scalar(point.serialize(), b"rev")) % Q_ORDER


class LocalCommitmentSecrets:
    """Per-state secrets for a party that holds them alone (the bridge)."""

    def __init__(self, seed: bytes):
        self._seed = seed

    def secret(self, n: int) -> int:
        return hash_to_scalar(b"lngate/commitment-secret", self._seed, n.to_bytes(8, "big")) or 1

    def point(self, n: int) -> Point:
        return self.secret(n) * G

    def reveal(self, n: int, current_state: int) -> int:
        if n >= current_state:
            raise NotYetSuperseded(f"state {n} is not superseded (current {current_state})")
        return self.secret(n)


class PeerSecretStore:
    """Revealed secrets of the peer's revoked states, checked against known points."""

    def __init__(self):
        self._secrets: dict[int, int] = {}

    def add(self, n: int, secret: int, expected_point: Point) -> None:
        if secret * G != expected_point:
            raise InvalidSecret(f"secret for state {n} does not match its commitment point")
        self._secrets[n] = secret

    def get(self, n: int) -> int:
        if n not in self._secrets:
            raise NotRevoked(f"no revocation secret stored for state {n}")
        return self._secrets[n]

    def __contains__(self, n: int) -> bool:
        return n in self._secrets

    def revoked(self) -> list[int]:
        return sorted(self._secrets)

    def as_mapping(self) -> Mapping[int, int]:
        return dict(self._secrets)


# ------------------------------------------------------------ transactions


@dataclass(frozen=True)
class ChannelKeys:
    funding_joint: Point
    bridge_funding: Point
    iot: Point
    gateway_fee: Point
    bridge_payment: Point
    bridge_delayed: Point


@dataclass(frozen=True)
class ChannelSetup:
    params: ChannelParams
    keys: ChannelKeys
    funding_outpoint: Outpoint


@dataclass(frozen=True)
class CommitmentTx(SimTx):
    side: str = field(default="gateway", compare=False)
    state_num: int = field(default=0, compare=False)
    roles: tuple[tuple[str, int], ...] = field(default=(), compare=False)

    def vout(self, role: str) -> Optional[int]:
        for name, v in self.roles:
            if name == role:
                return v
        return None

    def role_of(self, vout: int) -> Optional[str]:
        for name, v in self.roles:
            if v == vout:
                return name
        return None

    def amount(self, role: str) -> int:
        v = self.vout(role)
        return 0 if v is None else self.outputs[v].amount


def _assemble(
    inputs: tuple[TxIn, ...], planned: Iterable[tuple[str, int, object]], fee: int
) -> tuple[tuple[TxOut, ...], tuple[tuple[str, int], ...], int]:
    outputs: list[TxOut] = []
    roles: list[tuple[str, int]] = []
    for role, amount, cond in planned:
        if amount <= 0:
            continue
        if amount < DUST_LIMIT:
            fee += amount
            continue
        roles.append((role, len(outputs)))
        outputs.append(TxOut(amount, cond))
    return tuple(outputs), tuple(roles), fee


def _htlc_outputs(state: ChannelState, keys: ChannelKeys) -> list[tuple[str, int, object]]:
    return [
        (f"htlc:{h.htlc_id}", h.amount, HtlcOffered(h.payment_hash, keys.bridge_payment, keys.iot, h.timeout))
        for h in state.pending_htlcs
    ]


def _charge_iot(state: ChannelState, fee: int) -> int:
    if fee > state.iot_balance:
        raise InsufficientFeeBalance(f"IoT balance {state.iot_balance} cannot cover fee {fee}")
    return state.iot_balance - fee


def build_gateway_commitment(
    state: ChannelState, setup: ChannelSetup, fee: int = 0, commitment_point: Optional[Point] = None
) -> CommitmentTx:
    """The gateway's four-output commitment for ``state``.

    ``fee`` is taken from the IoT output (the IoT device funded the channel);
    the default of zero gives the bare balance layout.
    """
    point = commitment_point if commitment_point is not None else state.commitment_point
    if point is None:
        raise ValueError("state has no commitment point")
    keys, params = setup.keys, setup.params
    planned = [
        ("iot", _charge_iot(state, fee), KeySpend(keys.iot)),
        ("bridge", state.bridge_balance, KeySpend(keys.bridge_payment)),
        *_htlc_outputs(state, keys),
        (
            "fees",
            state.gateway_fee_balance,
            RevocableDelayed(keys.gateway_fee, params.to_self_delay, revocation_pubkey(point)),
        ),
    ]
    inputs = (TxIn(setup.funding_outpoint),)
    outputs, roles, total_fee = _assemble(inputs, planned, fee)
    return CommitmentTx(
        inputs, outputs, total_fee, label=f"gateway-commitment#{state.state_num}",
        side="gateway", state_num=state.state_num, roles=roles,
    )


def build_bridge_commitment(state: ChannelState, setup: ChannelSetup, bridge_point: Point, fee: int = 0) -> CommitmentTx:
    """The bridge's standard commitment: its own balance is the revocable output."""
    keys, params = setup.keys, setup.params
    planned = [
        (
            "bridge",
            state.bridge_balance,
            RevocableDelayed(keys.bridge_delayed, params.to_self_delay, revocation_pubkey(bridge_point)),
        ),
        ("iot", _charge_iot(state, fee), KeySpend(keys.iot)),
        *_htlc_outputs(state, keys),
        ("fees", state.gateway_fee_balance, KeySpend(keys.gateway_fee)),
    ]
    inputs = (TxIn(setup.funding_outpoint),)
    outputs, roles, total_fee = _assemble(inputs, planned, fee)
    return CommitmentTx(
        inputs, outputs, total_fee, label=f"bridge-commitment#{state.state_num}",
        side="bridge", state_num=state.state_num, roles=roles,
    )


def htlc_signature_digest(commitment: SimTx, htlc_id: int) -> bytes:
    """Message the funding key signs to authorize one HTLC of a commitment."""
    return hashlib.sha256(b"lngate/htlc" + commitment.txid + htlc_id.to_bytes(8, "big")).digest()


def build_funding_tx(
    iot_utxo: Outpoint,
    utxo_amount: int,
    capacity: int,
    joint_funding_key: Point,
    bridge_funding_key: Optional[Point],
    iot_change_key: Point,
    fee: int = OPEN_FEE,
) -> SimTx:
    if utxo_amount < capacity + fee:
        raise InsufficientFunds(f"utxo of {utxo_amount} sat cannot fund {capacity} sat plus {fee} sat fee")
    planned = [
        ("funding", capacity, ThresholdFunding(joint_funding_key, bridge_funding_key)),
        ("change", utxo_amount - capacity - fee, KeySpend(iot_change_key)),
    ]
    inputs = (TxIn(iot_utxo),)
    outputs, _, total_fee = _assemble(inputs, planned, fee)
    return SimTx(inputs, outputs, total_fee, label="funding")


class Initiator(enum.Enum):
    IOT = "iot"
    GATEWAY = "gateway"


def build_closing_tx(state: ChannelState, initiator: Initiator, setup: ChannelSetup, fee: Optional[int] = None) -> SimTx:
    """Mutual close paying every balance to its owner's plain key."""
    fee = setup.params.close_fee if fee is None else fee
    if state.pending_htlcs:
        raise PendingHtlcs(f"{len(state.pending_htlcs)} HTLC(s) still pending")
    iot, fees = state.iot_balance, state.gateway_fee_balance
    if initiator is Initiator.IOT:
        if iot < fee:
            raise InsufficientFeeBalance(f"IoT balance {iot} below close fee {fee}")
        iot -= fee
    else:
        if fees < fee:
            raise InsufficientFeeBalance(f"gateway fee balance {fees} below close fee {fee}")
        fees -= fee
    keys = setup.keys
    planned = [
        ("iot", iot, KeySpend(keys.iot)),
        ("bridge", state.bridge_balance, KeySpend(keys.bridge_payment)),
        ("fees", fees, KeySpend(keys.gateway_fee)),
    ]
    inputs = (TxIn(setup.funding_outpoint),)
    outputs, _, total_fee = _assemble(inputs, planned, fee)
    return SimTx(inputs, outputs, total_fee, label=f"closing#{state.state_num}")


def apply_close(state: ChannelState, initiator: Initiator, fee: int) -> ChannelState:
    """Final bookkeeping state after a mutual close was confirmed."""
    if initiator is Initiator.IOT:
        return _advance(state, iot_balance=state.iot_balance - fee, onchain_fees=state.onchain_fees + fee)
    return _advance(
        state, gateway_fee_balance=state.gateway_fee_balance - fee, onchain_fees=state.onchain_fees + fee
    )


# --------------------------------------------------------- on-chain sweeps


def _sweep(
    commitment: SimTx,
    vouts: list[int],
    to_key: Point,
    fee: int,
    witness_for,
    label: str,
) -> SimTx:
    total = sum(commitment.outputs[v].amount for v in vouts)
    if total - fee < DUST_LIMIT:
        raise NothingToPenalize(f"{total} sat does not cover the {fee} sat sweep fee")
    inputs = tuple(TxIn(commitment.outpoint(v)) for v in vouts)
    unsigned = SimTx(inputs, (TxOut(total - fee, KeySpend(to_key)),), fee, label=label)
    return unsigned.with_witnesses(witness_for(v, unsigned.digest) for v in vouts)


def build_penalty_tx(
    revoked: CommitmentTx,
    secrets: Mapping[int, int] | PeerSecretStore,
    punisher_key: Point,
    fee: int = OTHER_FEE,
) -> SimTx:
    """Sweep every output of ``revoked`` guarded by the now-known revocation key."""
    if isinstance(secrets, PeerSecretStore):
        secret = secrets.get(revoked.state_num)
    else:
        if revoked.state_num not in secrets:
            raise NotRevoked(f"no revocation secret stored for state {revoked.state_num}")
        secret = secrets[revoked.state_num]
    point = secret * G
    rev_pub = revocation_pubkey(point)
    rev_priv = revocation_privkey(secret, point)
    vouts = [
        v
        for v, out in enumerate(revoked.outputs)
        if isinstance(out.condition, RevocableDelayed) and out.condition.revocation == rev_pub
    ]
    if not vouts:
        raise NothingToPenalize(f"state {revoked.state_num} commitment has no revocable output")
    return _sweep(
        revoked, vouts, punisher_key, fee,
        lambda v, digest: RevocationSig(rev_pub, sign_single(rev_priv, digest)),
        f"penalty#{revoked.side}-{revoked.state_num}",
    )


def build_htlc_success_tx(commitment: CommitmentTx, vout: int, preimage: bytes, recipient_priv: int, to_key: Point,
                          fee: int = OTHER_FEE) -> SimTx:
    return _sweep(
        commitment, [vout], to_key, fee,
        lambda v, digest: Preimage(preimage, sign_single(recipient_priv, digest)),
        f"htlc-success#{commitment.side}-{commitment.state_num}",
    )


def build_htlc_timeout_tx(commitment: CommitmentTx, vout: int, refund_priv: int, to_key: Point,
                          fee: int = OTHER_FEE) -> SimTx:
    return _sweep(
        commitment, [vout], to_key, fee,
        lambda v, digest: Timeout(sign_single(refund_priv, digest)),
        f"htlc-timeout#{commitment.side}-{commitment.state_num}",
    )


def build_delayed_sweep(commitment: CommitmentTx, vout: int, owner_priv: int, to_key: Point,
                        fee: int = OTHER_FEE) -> SimTx:
    owner = owner_priv * G
    return _sweep(
        commitment, [vout], to_key, fee,
        lambda v, digest: Sig(owner, sign_single(owner_priv, digest)),
        f"delayed-sweep#{commitment.side}-{commitment.state_num}",
    )
