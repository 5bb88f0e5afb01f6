"""The four actors and the orchestrated open, pay, settle and close flows.

Actors are reactive: ``handle``/``handle_peer`` consume one message and return
the replies. Links carry every message through its wire encoding and append it
to a shared ``Trace``; the IoT link additionally frames, encrypts and
authenticates. ``Simulation`` owns the chain and drives block production, and
each online actor inspects the chain after every mined block.
"""
from __future__ import annotations

import contextlib
import hashlib
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import chain_sim
from .bridge import BridgeNode
from .chain_sim import MultiSig, Outpoint, Sig, SimChain, SimTx, TxRejected
from .channel import (
    ChannelError,
    ChannelKeys,
    ChannelParams,
    ChannelSetup,
    ChannelState,
    InsufficientFeeBalance,
    InsufficientFunds,
    Initiator,
    NothingToPenalize,
    NotRevoked,
    PeerSecretStore,
    PendingHtlcs,
    apply_payment,
    build_closing_tx,
    build_delayed_sweep,
    build_funding_tx,
    build_gateway_commitment,
    build_penalty_tx,
    fail_htlc,
    htlc_signature_digest,
    initial_state,
    build_bridge_commitment,
    service_fee,
    settle_htlc,
)
from .ec import G, Q_ORDER, Point
from .threshold_ecdsa import (
    CommitmentPointClient,
    CommitmentPointServer,
    DeriveMsg1,
    DeriveMsg2,
    EcdsaSignature,
    JointKey,
    KeyTag,
    KeygenClient,
    KeygenMsg1,
    KeygenMsg2,
    KeygenMsg3,
    KeygenServer,
    SignClient,
    SignMsg1,
    SignMsg2,
    SignMsg3,
    SignMsg4,
    SignServer,
    ThresholdError,
    combine_commitment_secret,
    commitment_share,
    sign_single,
    verify_standard,
)
from .wire import (
    AcceptChannel,
    ChannelClosed,
    ChannelClosingRequest,
    ClosingSigned,
    CloseReason,
    CommitmentSigned,
    FailReason,
    FundingCreated,
    FundingLocked,
    FundingSigned,
    FundingTxRequest,
    FundingTxSigned,
    Message,
    OpenChannel,
    OpenChannelRequest,
    PaymentSuccess,
    RequestFailed,
    RevokeAndAck,
    SendPayment,
    Shutdown,
    ThresholdDerive,
    ThresholdKeygen,
    ThresholdSign,
    UpdateAddHtlc,
    UpdateFailHtlc,
    UpdateFulfillHtlc,
    WireKeys,
    WireSession,
    decode_message,
    encode_message,
)

q = Q_ORDER
FUNDING_WAIT_LIMIT = 12


class NodeError(Exception):
    pass


class KeygenFailed(NodeError):
    pass


class BridgeRejected(NodeError):
    pass


class FundingTimeout(NodeError):
    pass


class RouteFailure(NodeError):
    pass


class LinkDown(NodeError):
    pass


class FlowAborted(NodeError):
    pass


class ChannelUnavailable(NodeError):
    pass


# ------------------------------------------------------------- behaviours


@dataclass(frozen=True)
class Honest:
    pass


@dataclass(frozen=True)
class BroadcastRevoked:
    state_num: int


@dataclass(frozen=True)
class Ransom:
    pass


@dataclass(frozen=True)
class ColludeWithBridge:
    pass


@dataclass(frozen=True)
class Offline:
    blocks: int


# ------------------------------------------------------------------ trace


@dataclass(frozen=True)
class TraceEvent:
    flow: str
    src: str
    dst: str
    name: str
    link: str  # "iot", "peer", "chain" or "local"
    size: int = 0

    def key(self) -> tuple[str, str, str]:
        return (self.src, self.dst, self.name)

    def to_json(self) -> dict:
        return {"flow": self.flow, "src": self.src, "dst": self.dst, "name": self.name, "link": self.link,
                "size": self.size}


class Trace:
    def __init__(self):
        self.events: list[TraceEvent] = []
        self.current = "setup"
        self._counts: Counter = Counter()

    @contextlib.contextmanager
    def flow(self, name: str):
        self._counts[name] += 1
        label = f"{name}#{self._counts[name]}"
        outer, self.current = self.current, label
        try:
            yield label
        finally:
            self.current = outer

    def record(self, src: str, dst: str, name: str, link: str, size: int = 0) -> None:
        self.events.append(TraceEvent(self.current, src, dst, name, link, size))

    def local(self, actor: str, name: str) -> None:
        self.record(actor, actor, name, "local")

    def of(self, label: str) -> list[TraceEvent]:
        return [e for e in self.events if e.flow == label]

    def labels(self) -> list[str]:
        seen: list[str] = []
        for e in self.events:
            if e.flow not in seen:
                seen.append(e.flow)
        return seen

    def iot_bytes(self, label: str) -> int:
        return sum(e.size for e in self.of(label) if e.link == "iot")

    def iot_frames(self, label: str) -> int:
        return sum(1 for e in self.of(label) if e.link == "iot")


# ------------------------------------------------------------------ links


class IotLink:
    """IoT <-> gateway link: every message is sealed by the sender's session and
    opened by the receiver's. ``fail_after`` drops the link after that many
    further frames."""

    def __init__(self, iot: "IotDevice", keys: WireKeys, session_id: int, trace: Trace):
        self.iot = iot
        self.iot_session = WireSession(keys, session_id, initiator=True)
        self.gw_session = WireSession(keys, session_id, initiator=False)
        self.trace = trace
        self.up = True
        self.fail_after: Optional[int] = None
        self.delivered_to_iot: list[bytes] = []

    def _transmit(self, sender: WireSession, receiver: WireSession, msg: Message, src: str, dst: str) -> Message:
        if not self.up:
            raise LinkDown("IoT link is down")
        if self.fail_after is not None:
            if self.fail_after <= 0:
                self.up = False
                raise LinkDown("IoT link dropped")
            self.fail_after -= 1
        frame = sender.seal(msg)
        self.trace.record(src, dst, msg.NAME, "iot", len(frame))
        opened = receiver.open(frame)
        if dst == "iot":
            self.delivered_to_iot.append(encode_message(opened))
        return opened

    def reconnect(self) -> None:
        self.up = True
        self.fail_after = None

    def call(self, msg: Message) -> Optional[Message]:
        """Gateway to IoT; returns the IoT's reply if it sent one."""
        delivered = self._transmit(self.gw_session, self.iot_session, msg, "gateway", "iot")
        replies = self.iot.handle(delivered)
        reply = None
        for r in replies:
            reply = self._transmit(self.iot_session, self.gw_session, r, "iot", "gateway")
        return reply

    def from_iot(self, msg: Message) -> Message:
        return self._transmit(self.iot_session, self.gw_session, msg, "iot", "gateway")

    def metrics(self) -> dict:
        return self.iot_session.session_metrics()


class PeerLink:
    """Gateway <-> bridge link carrying plain BOLT-style encodings. ``send``
    delivers FIFO and keeps delivering replies until both sides are quiet."""

    def __init__(self, gateway: "Gateway", bridge: BridgeNode, trace: Trace):
        self.gateway = gateway
        self.bridge = bridge
        self.trace = trace
        self.bytes = 0

    def send(self, sender, msgs: Iterable[Message]) -> None:
        queue = deque((sender, m) for m in msgs)
        while queue:
            src, msg = queue.popleft()
            dst = self.bridge if src is self.gateway else self.gateway
            data = encode_message(msg)
            self.bytes += len(data)
            self.trace.record(src.name, dst.name, msg.NAME, "peer", len(data))
            for reply in dst.handle_peer(decode_message(data)):
                queue.append((dst, reply))


# ------------------------------------------------------------------ actors


class IotDevice:
    """Holds its threshold share, wire keys and wallet; no chain or channel state."""

    name = "iot"

    def __init__(self, rng: random.Random, allow_test_size: bool = False):
        self.rng = rng
        self.priv = rng.randrange(1, q)
        self.key = self.priv * G
        self.allow_test_size = allow_test_size
        self.utxos: list[tuple[Outpoint, int]] = []
        self.client_view: Optional[JointKey] = None
        self.channel_open = False
        self.last_derived = -1
        self.inbox: list[Message] = []
        self._keygen: Optional[KeygenClient] = None
        self._signer: Optional[SignClient] = None
        self.signatures_given = 0
        self.requested: list[int] = []

    # requests the device originates

    def wallet_total(self) -> int:
        return sum(a for _, a in self.utxos)

    def open_request(self, capacity: int) -> OpenChannelRequest:
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if not any(a >= capacity + chain_sim.OPEN_FEE for _, a in self.utxos):
            raise InsufficientFunds(f"no wallet output covers {capacity} sat plus the {chain_sim.OPEN_FEE} sat fee")
        return OpenChannelRequest(capacity)

    def payment_request(self, amount: int, destination: Point) -> SendPayment:
        if not self.channel_open:
            raise ChannelUnavailable("no open channel")
        self.requested.append(amount)
        return SendPayment(amount, destination)

    def close_request(self) -> ChannelClosingRequest:
        if not self.channel_open:
            raise ChannelUnavailable("no open channel")
        return ChannelClosingRequest()

    # reactive side

    def handle(self, msg: Message) -> list[Message]:
        if isinstance(msg, ThresholdKeygen):
            return self._on_keygen(msg)
        if isinstance(msg, ThresholdSign):
            return self._on_sign(msg)
        if isinstance(msg, ThresholdDerive):
            return self._on_derive(msg)
        if isinstance(msg, FundingTxRequest):
            return self._on_funding_request(msg)
        self.inbox.append(msg)
        if isinstance(msg, ChannelClosed):
            self.channel_open = False
        elif isinstance(msg, PaymentSuccess):
            self.channel_open = True
        return []

    def _on_keygen(self, msg: ThresholdKeygen) -> list[Message]:
        if msg.round == 1:
            self._keygen = KeygenClient(self.rng, allow_test_size=self.allow_test_size)
            return [ThresholdKeygen(2, self._keygen.round2(KeygenMsg1.from_bytes(msg.payload)).to_bytes())]
        if msg.round == 3 and self._keygen is not None:
            self.client_view = self._keygen.finish(KeygenMsg3.from_bytes(msg.payload))
            self._keygen = None
            self.last_derived = -1
            return []
        raise ThresholdError(f"unexpected keygen round {msg.round}")

    def _on_sign(self, msg: ThresholdSign) -> list[Message]:
        if self.client_view is None:
            raise ThresholdError("no key share")
        if msg.round == 1:
            self._signer = SignClient(self.client_view, self.rng)
            return [ThresholdSign(2, self._signer.round2(SignMsg1.from_bytes(msg.payload)).to_bytes())]
        if msg.round == 3 and self._signer is not None:
            out = self._signer.round4(SignMsg3.from_bytes(msg.payload))
            self._signer = None
            self.signatures_given += 1
            return [ThresholdSign(4, out.to_bytes())]
        raise ThresholdError(f"unexpected sign round {msg.round}")

    def _on_derive(self, msg: ThresholdDerive) -> list[Message]:
        if self.client_view is None or msg.round != 1 or msg.tag != KeyTag.COMMITMENT_POINT:
            raise ThresholdError("unexpected derive request")
        # Indices advance one at a time; the share two states back is released
        # only once the point two states ahead exists. Repeating the latest
        # index is allowed so a derive lost to a link drop can be retried.
        if msg.index not in (self.last_derived, self.last_derived + 1):
            raise ThresholdError(f"derive index {msg.index} out of order (last {self.last_derived})")
        release = msg.index - 2 if msg.index >= 2 else None
        client = CommitmentPointClient(self.client_view, self.rng)
        out = client.round2(msg.index, DeriveMsg1.from_bytes(msg.payload), release)
        self.last_derived = msg.index
        return [ThresholdDerive(2, msg.index, msg.tag, out.to_bytes())]

    def _on_funding_request(self, msg: FundingTxRequest) -> list[Message]:
        if self.client_view is None:
            raise ThresholdError("funding requested before key generation")
        for i, (op, amount) in enumerate(self.utxos):
            if amount >= msg.capacity + msg.fee:
                break
        else:
            raise InsufficientFunds("wallet cannot fund the channel")
        tx = build_funding_tx(op, amount, msg.capacity, self.client_view.Q, msg.bridge_funding_key, self.key, msg.fee)
        sig = sign_single(self.priv, tx.digest)
        del self.utxos[i]
        self.channel_open = True
        return [FundingTxSigned(op.txid, op.vout, amount, self.key, sig)]


class DestinationNode:
    """Issues invoices and reveals a preimage only for the exact invoiced amount."""

    def __init__(self, name: str, rng: random.Random):
        self.name = name
        self.priv = rng.randrange(1, q)
        self.node_id = self.priv * G
        self.rng = rng
        self._invoices: dict[bytes, tuple[bytes, int]] = {}
        self.received = 0
        self.payments: list[int] = []

    def invoice(self, amount: int) -> bytes:
        preimage = self.rng.getrandbits(256).to_bytes(32, "big")
        h = hashlib.sha256(preimage).digest()
        self._invoices[h] = (preimage, amount)
        return h

    def receive(self, payment_hash: bytes, amount: int) -> Optional[bytes]:
        entry = self._invoices.get(payment_hash)
        if entry is None or entry[1] != amount:
            return None
        del self._invoices[payment_hash]
        self.received += amount
        self.payments.append(amount)
        return entry[0]


@dataclass
class GatewayChannel:
    params: ChannelParams
    view: JointKey
    state: ChannelState
    history: list[ChannelState] = field(default_factory=list)
    pending: Optional[ChannelState] = None
    setup: Optional[ChannelSetup] = None
    funding_tx: Optional[SimTx] = None
    channel_id: str = ""
    status: str = "opening"
    local_points: dict[int, Point] = field(default_factory=dict)
    local_secrets: dict[int, int] = field(default_factory=dict)
    remote_points: dict[int, Point] = field(default_factory=dict)
    remote_secrets: PeerSecretStore = field(default_factory=PeerSecretStore)
    remote_sigs: dict[int, EcdsaSignature] = field(default_factory=dict)
    remote_htlc_sigs: dict[int, tuple[EcdsaSignature, ...]] = field(default_factory=dict)
    signed_remote: dict[int, bytes] = field(default_factory=dict)  # state -> bridge commitment txid
    bridge_funding_key: Optional[Point] = None
    bridge_payment_key: Optional[Point] = None
    bridge_delayed_key: Optional[Point] = None
    bridge_locked: bool = False
    closing_sig: Optional[EcdsaSignature] = None
    preimages: dict[bytes, bytes] = field(default_factory=dict)
    # Own commitment state whose predecessor still awaits revocation.
    revocation_due: Optional[int] = None
    close_txid: Optional[bytes] = None


@dataclass
class PaymentOutcome:
    status: str  # "success", "failed" or "dropped"
    payment_hash: Optional[bytes] = None
    reason: Optional[str] = None
    amount: int = 0
    fee: int = 0


class Gateway:
    """The untrusted LN gateway: runs every channel operation jointly with the IoT device."""

    name = "gateway"

    def __init__(
        self,
        rng: random.Random,
        chain: SimChain,
        paillier_bits: int,
        allow_test_size: bool = False,
        fee_ppm: int = 0,
        base_fee: int = 2,
        behavior=Honest(),
    ):
        self.rng = rng
        self.chain = chain
        self.paillier_bits = paillier_bits
        self.allow_test_size = allow_test_size
        self.fee_ppm = fee_ppm
        self.base_fee = base_fee
        self.behavior = behavior
        self.fee_priv = rng.randrange(1, q)
        self.fee_key = self.fee_priv * G
        self.channel: Optional[GatewayChannel] = None
        self.iot_link: Optional[IotLink] = None
        self.peer: Optional[PeerLink] = None
        self.wait_blocks: Callable[[int], None] = lambda n: None
        self.invoice_for: Callable[[bytes, int], Optional[bytes]] = lambda node, amount: None
        self.offline_until = 0
        self.dropped_requests: list[str] = []
        self.penalties: list[bytes] = []  # penalty txids broadcast
        self.breaches: set[bytes] = set()
        self.commitments_signed: Counter = Counter()

    # --------------------------------------------------------- threshold ops

    def _call_iot(self, msg: Message, expect: type, round_: int) -> Message:
        reply = self.iot_link.call(msg)
        if not isinstance(reply, expect) or reply.round != round_:
            raise ThresholdError(f"expected {expect.NAME} round {round_}")
        return reply

    def _t_keygen(self) -> JointKey:
        server = KeygenServer(self.rng, self.paillier_bits, allow_test_size=self.allow_test_size)
        r2 = self._call_iot(ThresholdKeygen(1, server.round1().to_bytes()), ThresholdKeygen, 2)
        m3 = server.round3(KeygenMsg2.from_bytes(r2.payload))
        self.iot_link.call(ThresholdKeygen(3, m3.to_bytes()))
        return server.result()

    def _t_sign(self, m: bytes) -> EcdsaSignature:
        server = SignServer(self.channel.view, m, self.rng)
        r2 = self._call_iot(ThresholdSign(1, server.round1().to_bytes()), ThresholdSign, 2)
        m3 = server.round3(SignMsg2.from_bytes(r2.payload))
        r4 = self._call_iot(ThresholdSign(3, m3.to_bytes()), ThresholdSign, 4)
        return server.finish(SignMsg4.from_bytes(r4.payload))

    def _t_derive(self, index: int) -> Point:
        ch = self.channel
        server = CommitmentPointServer(ch.view, index, self.rng)
        tag = int(KeyTag.COMMITMENT_POINT)
        reply = self._call_iot(ThresholdDerive(1, index, tag, server.round1().to_bytes()), ThresholdDerive, 2)
        msg2 = DeriveMsg2.from_bytes(reply.payload)
        point = server.finish(msg2)
        ch.local_points[index] = point
        if msg2.released_index is not None:
            n = msg2.released_index
            secret = combine_commitment_secret(commitment_share(ch.view, n), msg2.released_share)
            if secret * G != ch.local_points.get(n):
                raise ThresholdError(f"released share does not open commitment point {n}")
            ch.local_secrets[n] = secret
        return point

    # ---------------------------------------------------------- commitments

    def _own_commitment(self, state: ChannelState):
        ch = self.channel
        return build_gateway_commitment(state, ch.setup, fee=ch.params.close_fee,
                                        commitment_point=ch.local_points[state.state_num])

    def _remote_commitment(self, state: ChannelState):
        ch = self.channel
        return build_bridge_commitment(state, ch.setup, ch.remote_points[state.state_num], fee=ch.params.close_fee)

    def _sign_remote(self, state: ChannelState) -> CommitmentSigned:
        ch = self.channel
        if state.state_num in ch.signed_remote:
            raise ChannelError(f"bridge commitment {state.state_num} already signed")
        tx = self._remote_commitment(state)
        sig = self._t_sign(tx.digest)
        htlc_sigs = tuple(self._t_sign(htlc_signature_digest(tx, h.htlc_id)) for h in state.pending_htlcs)
        ch.signed_remote[state.state_num] = tx.txid
        self.commitments_signed[state.state_num] += 1
        return CommitmentSigned(sig, htlc_sigs)

    def _revoke_previous(self, m: int) -> RevokeAndAck:
        """Derive the point for ``m + 1``; the IoT releases its share of ``m - 1``."""
        ch = self.channel
        point = self._t_derive(m + 1)
        secret = ch.local_secrets[m - 1]
        ch.revocation_due = None
        return RevokeAndAck(secret.to_bytes(32, "big"), point)

    def _commit(self, state: ChannelState) -> None:
        ch = self.channel
        ch.state = state
        ch.pending = None
        ch.history.append(state)

    # ---------------------------------------------------------- IoT requests

    def handle_iot(self, msg: Message):
        if isinstance(self.behavior, Ransom):
            self.dropped_requests.append(msg.NAME)
            return PaymentOutcome("dropped", reason="ransom")
        if isinstance(msg, OpenChannelRequest):
            return self.open_channel(msg.capacity)
        if isinstance(msg, SendPayment):
            return self.send_payment(msg.amount, msg.destination)
        if isinstance(msg, ChannelClosingRequest):
            return self.close(Initiator.IOT)
        raise NodeError(f"unexpected IoT message {msg.NAME}")

    def open_channel(self, capacity: int) -> str:
        trace = self.iot_link.trace
        try:
            view = self._t_keygen()
        except (ThresholdError, ValueError) as exc:
            raise KeygenFailed(str(exc)) from exc
        params = ChannelParams(capacity, service_fee_ppm=self.fee_ppm, base_fee=self.base_fee)
        self.channel = ch = GatewayChannel(params, view, initial_state(params))
        self.peer.send(self, [OpenChannel(view.Q, capacity, params.to_self_delay, self.fee_key)])
        if ch.bridge_funding_key is None:
            raise BridgeRejected("bridge did not accept the channel")
        reply = self.iot_link.call(FundingTxRequest(capacity, ch.bridge_funding_key, params.open_fee))
        if not isinstance(reply, FundingTxSigned):
            raise NodeError("IoT did not fund the channel")
        utxo = Outpoint(reply.utxo_txid, reply.utxo_vout)
        unsigned = build_funding_tx(utxo, reply.utxo_amount, capacity, view.Q, ch.bridge_funding_key,
                                    reply.iot_key, params.open_fee)
        ch.funding_tx = unsigned.with_witnesses([Sig(reply.iot_key, reply.sig)])
        self._t_derive(0)
        self._t_derive(1)
        funding_op = ch.funding_tx.outpoint(0)
        ch.channel_id = str(funding_op)
        keys = ChannelKeys(view.Q, ch.bridge_funding_key, reply.iot_key, self.fee_key,
                           ch.bridge_payment_key, ch.bridge_delayed_key)
        ch.setup = ChannelSetup(params, keys, funding_op)
        ch.state = initial_state(params, ch.local_points[0])
        trace.local(self.name, "create_commitments")
        signed = self._sign_remote(ch.state)
        self.peer.send(self, [FundingCreated(funding_op.txid, funding_op.vout, signed.sig, reply.iot_key,
                                             ch.local_points[0])])
        if 0 not in ch.remote_sigs:
            raise BridgeRejected("bridge did not sign the first commitment")
        ch.history.append(ch.state)
        self.chain.broadcast(ch.funding_tx)
        trace.record(self.name, "chain", "broadcast_funding", "chain")
        for _ in range(FUNDING_WAIT_LIMIT):
            if self.chain.confirmations(ch.funding_tx.txid) >= params.confirmation_depth:
                break
            self.wait_blocks(1)
        else:
            raise FundingTimeout("funding transaction did not reach the required depth")
        self.peer.send(self, [FundingLocked(ch.local_points[1])])
        if not ch.bridge_locked:
            raise FundingTimeout("bridge did not lock the channel")
        ch.status = "active"
        return ch.channel_id

    def send_payment(self, amount: int, destination: Point) -> PaymentOutcome:
        ch = self.channel
        if ch is None or ch.status != "active":
            self.iot_link.call(RequestFailed(FailReason.CHANNEL_UNAVAILABLE))
            return PaymentOutcome("failed", reason="ChannelUnavailable", amount=amount)
        params = ch.params
        fee = service_fee(amount, params.service_fee_ppm)
        payment_hash = self.invoice_for(destination.serialize(), amount - fee - params.base_fee)
        if payment_hash is None:
            # Unknown destination: the HTLC is still offered and expires unpaid.
            payment_hash = hashlib.sha256(self.rng.getrandbits(256).to_bytes(32, "big")).digest()
        try:
            new, htlc = apply_payment(ch.state, amount, destination.serialize(), payment_hash, params,
                                      self.chain.height)
        except (InsufficientFunds, ValueError):
            self.iot_link.call(RequestFailed(FailReason.INSUFFICIENT_FUNDS))
            return PaymentOutcome("failed", reason="InsufficientFunds", amount=amount)
        self.iot_link.trace.local(self.name, "add_htlc")
        ch.pending = new
        self.peer.send(self, [UpdateAddHtlc(htlc.htlc_id, htlc.amount, payment_hash, htlc.timeout, destination,
                                            htlc.fee)])
        try:
            signed = self._sign_remote(new)
        except LinkDown:
            ch.pending = None
            self.peer.bridge.drop_uncommitted()
            raise FlowAborted("IoT link dropped while signing; rolled back") from None
        try:
            self.peer.send(self, [signed])
        except LinkDown:
            # Both new commitments are signed; only our revocation is outstanding.
            self._commit(new)
            ch.revocation_due = new.state_num
            raise FlowAborted("IoT link dropped before revocation; state kept, revocation pending") from None
        self.iot_link.call(PaymentSuccess(payment_hash))
        return PaymentOutcome("success", payment_hash, amount=amount, fee=fee)

    def resume_revocation(self) -> None:
        """Finish a revocation interrupted by a link drop."""
        ch = self.channel
        if ch is not None and ch.revocation_due is not None:
            self.peer.send(self, [self._revoke_previous(ch.revocation_due)])

    # --------------------------------------------------------------- peer side

    def handle_peer(self, msg: Message) -> list[Message]:
        ch = self.channel
        if isinstance(msg, AcceptChannel):
            ch.bridge_funding_key = msg.funding_pubkey
            ch.bridge_payment_key = msg.payment_key
            ch.bridge_delayed_key = msg.delayed_key
            ch.remote_points[0] = msg.first_point
            return []
        if isinstance(msg, FundingSigned):
            tx = self._own_commitment(ch.state)
            if not verify_standard(ch.bridge_funding_key, tx.digest, msg.sig):
                raise BridgeRejected("bad signature on our first commitment")
            ch.remote_sigs[0] = msg.sig
            ch.remote_htlc_sigs[0] = ()
            return []
        if isinstance(msg, FundingLocked):
            ch.remote_points[1] = msg.next_point
            ch.bridge_locked = True
            return []
        if isinstance(msg, CommitmentSigned):
            return self._on_commitment_signed(msg)
        if isinstance(msg, RevokeAndAck):
            m = max(ch.signed_remote)
            secret = int.from_bytes(msg.secret, "big")
            ch.remote_secrets.add(m - 1, secret, ch.remote_points[m - 1])
            ch.remote_points[m + 1] = msg.next_point
            return []
        if isinstance(msg, UpdateFulfillHtlc):
            htlc = ch.state.find_htlc(msg.htlc_id)
            ch.pending = settle_htlc(ch.state, msg.preimage)
            ch.preimages[htlc.payment_hash] = msg.preimage
            return []
        if isinstance(msg, UpdateFailHtlc):
            ch.pending = fail_htlc(ch.state, self.chain.height, msg.htlc_id)
            return []
        if isinstance(msg, Shutdown):
            return []
        if isinstance(msg, ClosingSigned):
            ch.closing_sig = msg.sig
            return []
        raise NodeError(f"unexpected peer message {msg.NAME}")

    def _on_commitment_signed(self, msg: CommitmentSigned) -> list[Message]:
        ch = self.channel
        state = ch.pending if ch.pending is not None else ch.state
        m = state.state_num
        tx = self._own_commitment_for(state)
        if not verify_standard(ch.bridge_funding_key, tx.digest, msg.sig):
            raise BridgeRejected(f"bad bridge signature on commitment {m}")
        if len(msg.htlc_sigs) != len(state.pending_htlcs) or not all(
            verify_standard(ch.bridge_funding_key, htlc_signature_digest(tx, h.htlc_id), s)
            for h, s in zip(state.pending_htlcs, msg.htlc_sigs)
        ):
            raise BridgeRejected(f"bad bridge HTLC signatures on commitment {m}")
        ch.remote_sigs[m] = msg.sig
        ch.remote_htlc_sigs[m] = msg.htlc_sigs
        self._commit(state)
        out: list[Message] = [self._revoke_previous(m)]
        if m not in ch.signed_remote:
            out.append(self._sign_remote(state))
        return out

    def _own_commitment_for(self, state: ChannelState):
        ch = self.channel
        if state.state_num not in ch.local_points:
            raise ChannelError(f"no commitment point for state {state.state_num}")
        return self._own_commitment(state)

    # ----------------------------------------------------------------- closes

    def close(self, initiator: Initiator, mode: str = "mutual") -> str:
        ch = self.channel
        if ch is None or ch.status != "active":
            self.iot_link.call(RequestFailed(FailReason.CHANNEL_UNAVAILABLE))
            raise ChannelUnavailable("no active channel")
        if initiator is Initiator.GATEWAY and mode != "mutual":
            raise ValueError("a gateway-initiated close is mutual so the gateway can pay its fee")
        reason = CloseReason.IOT_REQUEST if initiator is Initiator.IOT else CloseReason.GATEWAY_REQUEST
        if mode == "mutual":
            try:
                closing = build_closing_tx(ch.state, initiator, ch.setup)
            except (PendingHtlcs, InsufficientFeeBalance) as exc:
                code = FailReason.PENDING_HTLCS if isinstance(exc, PendingHtlcs) else FailReason.INSUFFICIENT_FEE_BALANCE
                if initiator is Initiator.IOT:
                    self.iot_link.call(RequestFailed(code))
                raise
            if initiator is Initiator.GATEWAY:
                self.iot_link.call(ChannelClosingRequest())
            self.peer.send(self, [Shutdown()])
            sig = self._t_sign(closing.digest)
            self.peer.send(self, [ClosingSigned(ch.setup.params.close_fee, sig)])
            if ch.closing_sig is None:
                raise BridgeRejected("bridge did not sign the closing transaction")
            tx = closing.with_witnesses([MultiSig((sig, ch.closing_sig))])
        elif mode == "unilateral":
            tx = self.signed_own_commitment(ch.state.state_num)
        else:
            raise ValueError(f"unknown close mode {mode!r}")
        ch.status = "closing"
        ch.close_txid = self.chain.broadcast(tx)
        self.iot_link.trace.record(self.name, "chain", "broadcast_close", "chain")
        self.wait_blocks(1)
        ch.status = "closed"
        self.iot_link.call(ChannelClosed(reason))
        return ch.close_txid.hex()

    def signed_own_commitment(self, state_num: int) -> SimTx:
        """Our commitment for ``state_num`` with the joint signature attached.

        The IoT device keeps no channel history, so it co-signs whatever
        commitment digest the gateway presents.
        """
        ch = self.channel
        tx = self._own_commitment(ch.history[state_num])
        sig = self._t_sign(tx.digest)
        self.commitments_signed[("own", state_num)] += 1
        return tx.with_witnesses([MultiSig((sig, ch.remote_sigs[state_num]))])

    def broadcast_revoked(self, state_num: int) -> bytes:
        ch = self.channel
        if state_num >= ch.state.state_num:
            raise NotRevoked(f"state {state_num} is the latest state")
        txid = self.chain.broadcast(self.signed_own_commitment(state_num))
        self.iot_link.trace.record(self.name, "chain", "broadcast_revoked", "chain")
        ch.status = "closing"
        ch.close_txid = txid
        return txid

    # -------------------------------------------------------------- watching

    def on_block(self, height: int) -> list[Message]:
        ch = self.channel
        if ch is None or ch.funding_tx is None or height < self.offline_until:
            return []
        funding_op = ch.setup.funding_outpoint
        spender = self.chain.spent_by.get(funding_op)
        if spender is None:
            return []
        if ch.status in ("active", "opening"):
            ch.status = "closed"
            ch.close_txid = spender
            reason = CloseReason.BRIDGE_CLOSE
            revoked = [s for s, t in ch.signed_remote.items() if t == spender and s < ch.state.state_num]
            if revoked:
                reason = CloseReason.BREACH
            self.iot_link.call(ChannelClosed(reason))
        elif ch.status == "closing":
            # Our own broadcast confirmed.
            ch.status = "closed"
        self._penalize(spender)
        self._sweep_own(spender)
        return []

    def _penalize(self, spender: bytes) -> None:
        ch = self.channel
        if isinstance(self.behavior, ColludeWithBridge) or spender in self.breaches:
            return
        states = [s for s, t in ch.signed_remote.items() if t == spender]
        if not states or states[0] not in ch.remote_secrets:
            return
        commitment = self._remote_commitment(ch.history[states[0]])
        try:
            penalty = build_penalty_tx(commitment, ch.remote_secrets, self.fee_key, ch.params.other_fee)
        except NothingToPenalize:
            self.breaches.add(spender)
            return
        try:
            self.penalties.append(self.chain.broadcast(penalty))
        except TxRejected:
            return
        self.breaches.add(spender)

    def _sweep_own(self, spender: bytes) -> None:
        ch = self.channel
        tx = self.chain.get_tx(spender)
        for vout, out in enumerate(tx.outputs):
            cond = out.condition
            op = tx.outpoint(vout)
            if (
                isinstance(cond, chain_sim.RevocableDelayed)
                and cond.owner == self.fee_key
                and op in self.chain.utxos
                and op not in self.chain.spent_by
                and self.chain.confirmations(spender) >= cond.delay
            ):
                try:
                    self.chain.broadcast(build_delayed_sweep(tx, vout, self.fee_priv, self.fee_key,
                                                             ch.params.other_fee))
                except (TxRejected, ChannelError):
                    pass


# ------------------------------------------------------------- simulation


@dataclass
class SimConfig:
    seed: int = 0
    fee_ppm: int = 0
    base_fee: int = 2
    paillier_bits: int = 2048
    allow_test_size: bool = False
    gateway_behavior: object = field(default_factory=Honest)
    bridge_behavior: object = field(default_factory=Honest)


class Simulation:
    """Deterministic single-channel world: chain, four actors and two links."""

    def __init__(self, config: Optional[SimConfig] = None):
        self.config = cfg = config or SimConfig()
        self.chain = SimChain()
        self.trace = Trace()

        def rng(label: str) -> random.Random:
            return random.Random(f"lngate/{cfg.seed}/{label}")

        self._rng = rng
        self.iot = IotDevice(rng("iot"), cfg.allow_test_size)
        self.gateway = Gateway(rng("gateway"), self.chain, cfg.paillier_bits, cfg.allow_test_size,
                               cfg.fee_ppm, cfg.base_fee, cfg.gateway_behavior)
        self.bridge = BridgeNode(rng("bridge"), self.chain, cfg.base_fee, cfg.bridge_behavior)
        self.destinations: dict[str, DestinationNode] = {}
        secret = rng("wire").getrandbits(512).to_bytes(64, "big")
        session_id = rng("session").getrandbits(63)
        self.iot_link = IotLink(self.iot, WireKeys.from_secret(secret), session_id, self.trace)
        self.peer = PeerLink(self.gateway, self.bridge, self.trace)
        self.gateway.iot_link = self.iot_link
        self.gateway.peer = self.peer
        self.gateway.wait_blocks = self.mine
        self.gateway.invoice_for = self._invoice_for
        self.bridge.route = self._route
        self.payments: list[PaymentOutcome] = []

    # fixtures

    def add_destination(self, name: str) -> DestinationNode:
        dest = DestinationNode(name, self._rng(f"dest/{name}"))
        self.destinations[name] = dest
        return dest

    def fund_iot(self, amount: int) -> Outpoint:
        op = self.chain.faucet(amount, chain_sim.KeySpend(self.iot.key))
        self.iot.utxos.append((op, amount))
        return op

    def _by_node_id(self, node_id: bytes) -> Optional[DestinationNode]:
        for d in self.destinations.values():
            if d.node_id.serialize() == node_id:
                return d
        return None

    def _invoice_for(self, node_id: bytes, amount: int) -> Optional[bytes]:
        dest = self._by_node_id(node_id)
        return dest.invoice(amount) if dest is not None and amount > 0 else None

    def _route(self, node_id: bytes, payment_hash: bytes, amount: int) -> Optional[bytes]:
        dest = self._by_node_id(node_id)
        return None if dest is None else dest.receive(payment_hash, amount)

    # time

    def mine(self, n: int = 1) -> int:
        for _ in range(n):
            height = self.chain.mine_block()
            for actor in (self.gateway, self.bridge):
                msgs = actor.on_block(height)
                if msgs:
                    with self.trace.flow("watch"):
                        self.peer.send(actor, msgs)
        return self.chain.height

    # flows

    def open_channel(self, capacity: int) -> str:
        return open_channel_flow(self, capacity)

    def pay(self, amount: int, destination: str) -> PaymentOutcome:
        return send_payment_flow(self, amount, destination)

    def settle(self) -> int:
        return settle_flow(self)

    @property
    def channel(self) -> Optional[GatewayChannel]:
        return self.gateway.channel


def open_channel_flow(sim: Simulation, capacity: int) -> str:
    request = sim.iot.open_request(capacity)
    with sim.trace.flow("open"):
        return sim.gateway.handle_iot(sim.iot_link.from_iot(request))


def send_payment_flow(sim: Simulation, amount: int, destination: str, settle: bool = True) -> PaymentOutcome:
    dest = sim.destinations.get(destination)
    node_id = dest.node_id if dest is not None else _unknown_node(destination)
    request = sim.iot.payment_request(amount, node_id)
    with sim.trace.flow("pay"):
        outcome = sim.gateway.handle_iot(sim.iot_link.from_iot(request))
    sim.payments.append(outcome)
    if outcome.status == "failed" and outcome.reason == "InsufficientFunds":
        raise InsufficientFunds(f"payment of {amount} sat rejected")
    if settle and outcome.status == "success":
        settle_flow(sim)
    return outcome


def settle_flow(sim: Simulation) -> int:
    """Bridge forwards committed HTLCs; each fulfilled one is settled in its own update."""
    settled = 0
    while True:
        msgs = sim.bridge.forward_next()
        if not msgs:
            return settled
        with sim.trace.flow("settle"):
            sim.peer.send(sim.bridge, msgs)
        settled += 1


def close_channel_iot(sim: Simulation, mode: str = "mutual") -> str:
    request = sim.iot.close_request()
    with sim.trace.flow("close_iot"):
        delivered = sim.iot_link.from_iot(request)
        if isinstance(sim.gateway.behavior, Ransom):
            sim.gateway.handle_iot(delivered)
            return ""
        return sim.gateway.close(Initiator.IOT, mode)


def close_channel_gateway(sim: Simulation) -> str:
    with sim.trace.flow("close_gateway"):
        return sim.gateway.close(Initiator.GATEWAY, "mutual")


def close_channel_bridge(sim: Simulation) -> str:
    with sim.trace.flow("close_bridge"):
        txid = sim.bridge.force_close()
        sim.trace.record(sim.bridge.name, "chain", "broadcast_close", "chain")
        sim.mine(1)
    return txid.hex()


def adversary_act(sim: Simulation, actor: str, action: str, arg: int = 0):
    """Apply one adversarial action; outcomes are inspected by the caller."""
    with sim.trace.flow(f"adversary_{actor}"):
        if actor == "gateway" and action == "broadcast_revoked":
            return sim.gateway.broadcast_revoked(arg)
        if actor == "bridge" and action == "broadcast_revoked":
            return sim.bridge.broadcast_revoked(arg)
        if action == "offline":
            target = sim.gateway if actor == "gateway" else sim.bridge
            target.offline_until = sim.chain.height + arg + 1
            return target.offline_until
    raise ValueError(f"unknown adversary action {actor} {action}")


def _unknown_node(label: str) -> Point:
    return (int.from_bytes(hashlib.sha256(b"lngate/unknown/" + label.encode()).digest(), "big") % Q_ORDER or 1) * G
