"""The bridge node: an ordinary channel peer with single-key signing.

Nothing here knows that the counterparty's funding key is shared between two
parties; the joint signatures it receives are checked like any other ECDSA
signature under the funding public key.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .chain_sim import HtlcOffered, MultiSig, Outpoint, RevocableDelayed, SimChain, SimTx, TxRejected
from .channel import (
    ChannelError,
    ChannelKeys,
    ChannelParams,
    ChannelSetup,
    ChannelState,
    CommitmentTx,
    Htlc,
    Initiator,
    LocalCommitmentSecrets,
    NothingToPenalize,
    NotRevoked,
    PeerSecretStore,
    add_htlc,
    build_bridge_commitment,
    build_closing_tx,
    build_delayed_sweep,
    build_gateway_commitment,
    build_htlc_success_tx,
    build_penalty_tx,
    fail_htlc,
    htlc_signature_digest,
    initial_state,
    settle_htlc,
)
from .ec import G, Q_ORDER
from .signatures import EcdsaSignature, sign_single, verify_standard
from .wire import (
    AcceptChannel,
    ClosingSigned,
    CommitmentSigned,
    FailReason,
    FundingCreated,
    FundingLocked,
    FundingSigned,
    Message,
    OpenChannel,
    RevokeAndAck,
    Shutdown,
    UpdateAddHtlc,
    UpdateFailHtlc,
    UpdateFulfillHtlc,
)


@dataclass(frozen=True)
class ColludeWithGateway:
    """Bridge behaviour: never penalize the gateway's revoked commitments."""


@dataclass
class BridgeChannel:
    params: ChannelParams
    state: ChannelState
    gateway_funding_key: object
    gateway_fee_key: object
    history: list[ChannelState] = field(default_factory=list)
    pending: Optional[ChannelState] = None
    setup: Optional[ChannelSetup] = None
    status: str = "opening"
    remote_points: dict = field(default_factory=dict)
    remote_secrets: PeerSecretStore = field(default_factory=PeerSecretStore)
    local_sigs: dict[int, EcdsaSignature] = field(default_factory=dict)
    local_htlc_sigs: dict[int, tuple] = field(default_factory=dict)
    signed_remote: dict[int, bytes] = field(default_factory=dict)  # state -> gateway commitment txid
    to_forward: list[int] = field(default_factory=list)
    handled: set = field(default_factory=set)
    unroutable: set = field(default_factory=set)
    preimages: dict[bytes, bytes] = field(default_factory=dict)
    close_txid: Optional[bytes] = None


class BridgeNode:
    name = "bridge"

    def __init__(self, rng: random.Random, chain: SimChain, base_fee: int = 2, behavior=None):
        self.rng = rng
        self.chain = chain
        self.base_fee = base_fee
        self.behavior = behavior
        self.funding_priv = rng.randrange(1, Q_ORDER)
        self.payment_priv = rng.randrange(1, Q_ORDER)
        self.delayed_priv = rng.randrange(1, Q_ORDER)
        self.funding_key = self.funding_priv * G
        self.payment_key = self.payment_priv * G
        self.delayed_key = self.delayed_priv * G
        self.node_id = rng.randrange(1, Q_ORDER) * G
        self.secrets = LocalCommitmentSecrets(rng.getrandbits(256).to_bytes(32, "big"))
        self.channel: Optional[BridgeChannel] = None
        self.route: Callable[[bytes, bytes, int], Optional[bytes]] = lambda node, h, amount: None
        self.offline_until = 0
        self.forwarding_fees = 0
        self.paid_out = 0
        self.penalties: list[bytes] = []  # penalty txids broadcast
        self.breaches: set[bytes] = set()
        self.claims: list[bytes] = []

    # ---------------------------------------------------------- commitments

    def _own_commitment(self, state: ChannelState) -> CommitmentTx:
        ch = self.channel
        return build_bridge_commitment(state, ch.setup, self.secrets.point(state.state_num), fee=ch.params.close_fee)

    def _remote_commitment(self, state: ChannelState) -> CommitmentTx:
        ch = self.channel
        return build_gateway_commitment(state, ch.setup, fee=ch.params.close_fee,
                                        commitment_point=ch.remote_points[state.state_num])

    def _sign_remote(self, state: ChannelState) -> CommitmentSigned:
        ch = self.channel
        tx = self._remote_commitment(state)
        sig = sign_single(self.funding_priv, tx.digest)
        htlc_sigs = tuple(sign_single(self.funding_priv, htlc_signature_digest(tx, h.htlc_id))
                          for h in state.pending_htlcs)
        ch.signed_remote[state.state_num] = tx.txid
        return CommitmentSigned(sig, htlc_sigs)

    def _commit(self, state: ChannelState) -> None:
        ch = self.channel
        ch.state = state
        ch.pending = None
        ch.history.append(state)

    def drop_uncommitted(self) -> None:
        """Reconnection: updates not yet covered by a commitment are forgotten."""
        if self.channel is not None:
            self.channel.pending = None

    # ----------------------------------------------------------- messages

    def handle_peer(self, msg: Message) -> list[Message]:
        ch = self.channel
        if isinstance(msg, OpenChannel):
            if msg.capacity <= 0:
                return []
            params = ChannelParams(msg.capacity, to_self_delay=msg.to_self_delay, base_fee=self.base_fee)
            self.channel = BridgeChannel(params, initial_state(params), msg.funding_pubkey, msg.fee_key)
            return [AcceptChannel(self.funding_key, self.payment_key, self.delayed_key, self.secrets.point(0))]
        if isinstance(msg, FundingCreated):
            return self._on_funding_created(msg)
        if isinstance(msg, FundingLocked):
            ch.remote_points[1] = msg.next_point
            if self.chain.confirmations(ch.setup.funding_outpoint.txid) < ch.params.confirmation_depth:
                return []
            ch.status = "active"
            return [FundingLocked(self.secrets.point(1))]
        if isinstance(msg, UpdateAddHtlc):
            htlc = Htlc(msg.htlc_id, msg.amount, msg.payment_hash, msg.timeout, msg.route.serialize(),
                        msg.service_fee)
            ch.pending = add_htlc(ch.pending or ch.state, htlc)
            return []
        if isinstance(msg, CommitmentSigned):
            return self._on_commitment_signed(msg)
        if isinstance(msg, RevokeAndAck):
            m = max(ch.signed_remote)
            ch.remote_secrets.add(m - 1, int.from_bytes(msg.secret, "big"), ch.remote_points[m - 1])
            ch.remote_points[m + 1] = msg.next_point
            for h in ch.state.pending_htlcs:
                if h.htlc_id not in ch.handled and h.htlc_id not in ch.to_forward:
                    ch.to_forward.append(h.htlc_id)
            return []
        if isinstance(msg, Shutdown):
            if ch.state.pending_htlcs:
                return []
            ch.status = "closing"
            return [Shutdown()]
        if isinstance(msg, ClosingSigned):
            return self._on_closing_signed(msg)
        raise ChannelError(f"bridge cannot handle {msg.NAME}")

    def _on_funding_created(self, msg: FundingCreated) -> list[Message]:
        ch = self.channel
        keys = ChannelKeys(ch.gateway_funding_key, self.funding_key, msg.iot_key, ch.gateway_fee_key,
                           self.payment_key, self.delayed_key)
        ch.setup = ChannelSetup(ch.params, keys, Outpoint(msg.funding_txid, msg.funding_vout))
        ch.remote_points[0] = msg.first_point
        tx = self._own_commitment(ch.state)
        if not verify_standard(ch.gateway_funding_key, tx.digest, msg.sig):
            return []
        ch.local_sigs[0] = msg.sig
        ch.local_htlc_sigs[0] = ()
        ch.history.append(ch.state)
        return [FundingSigned(self._sign_remote(ch.state).sig)]

    def _on_commitment_signed(self, msg: CommitmentSigned) -> list[Message]:
        ch = self.channel
        state = ch.pending if ch.pending is not None else ch.state
        m = state.state_num
        tx = self._own_commitment(state)
        if not verify_standard(ch.gateway_funding_key, tx.digest, msg.sig):
            raise ChannelError(f"bad signature on bridge commitment {m}")
        if len(msg.htlc_sigs) != len(state.pending_htlcs) or not all(
            verify_standard(ch.gateway_funding_key, htlc_signature_digest(tx, h.htlc_id), s)
            for h, s in zip(state.pending_htlcs, msg.htlc_sigs)
        ):
            raise ChannelError(f"bad HTLC signatures on bridge commitment {m}")
        ch.local_sigs[m] = msg.sig
        ch.local_htlc_sigs[m] = msg.htlc_sigs
        self._commit(state)
        secret = self.secrets.reveal(m - 1, m)
        out: list[Message] = [RevokeAndAck(secret.to_bytes(32, "big"), self.secrets.point(m + 1))]
        if m not in ch.signed_remote:
            out.append(self._sign_remote(state))
        return out

    def _on_closing_signed(self, msg: ClosingSigned) -> list[Message]:
        ch = self.channel
        for initiator in Initiator:
            try:
                tx = build_closing_tx(ch.state, initiator, ch.setup, fee=msg.fee)
            except ChannelError:
                continue
            if verify_standard(ch.gateway_funding_key, tx.digest, msg.sig):
                ch.status = "closed"
                return [ClosingSigned(msg.fee, sign_single(self.funding_priv, tx.digest))]
        return []

    # ----------------------------------------------------------- forwarding

    def forward_next(self) -> list[Message]:
        """Forward the next committed HTLC; returns the settle update if it was paid."""
        ch = self.channel
        if ch is None or ch.status != "active":
            return []
        while ch.to_forward:
            htlc_id = ch.to_forward.pop(0)
            htlc = ch.state.find_htlc(htlc_id)
            preimage = self.route(htlc.destination, htlc.payment_hash, htlc.amount - self.base_fee)
            if preimage is None:
                ch.unroutable.add(htlc_id)
                continue
            ch.handled.add(htlc_id)
            ch.preimages[htlc.payment_hash] = preimage
            self.forwarding_fees += self.base_fee
            self.paid_out += htlc.amount - self.base_fee
            ch.pending = settle_htlc(ch.state, preimage)
            return [UpdateFulfillHtlc(htlc_id, preimage), self._sign_remote(ch.pending)]
        return []

    def retry_unroutable(self) -> None:
        ch = self.channel
        if ch is not None:
            ch.to_forward.extend(sorted(ch.unroutable))
            ch.unroutable.clear()

    # ------------------------------------------------------------- on-chain

    def force_close(self) -> bytes:
        return self._broadcast_own(self.channel.state.state_num)

    def broadcast_revoked(self, state_num: int) -> bytes:
        if state_num >= self.channel.state.state_num:
            raise NotRevoked(f"state {state_num} is the latest state")
        return self._broadcast_own(state_num)

    def _broadcast_own(self, state_num: int) -> bytes:
        ch = self.channel
        tx = self._own_commitment(ch.history[state_num])
        own = sign_single(self.funding_priv, tx.digest)
        txid = self.chain.broadcast(tx.with_witnesses([MultiSig((ch.local_sigs[state_num], own))]))
        ch.status = "closed"
        ch.close_txid = txid
        return txid

    def on_block(self, height: int) -> list[Message]:
        ch = self.channel
        if ch is None or ch.setup is None or height < self.offline_until:
            return []
        spender = self.chain.spent_by.get(ch.setup.funding_outpoint)
        if spender is not None:
            ch.status = "closed"
            self._resolve_close(spender)
            return []
        if ch.status != "active" or ch.pending is not None:
            return []
        for htlc_id in sorted(ch.unroutable):
            htlc = ch.state.find_htlc(htlc_id)
            if height >= htlc.timeout:
                ch.unroutable.discard(htlc_id)
                ch.handled.add(htlc_id)
                ch.pending = fail_htlc(ch.state, height, htlc_id)
                return [UpdateFailHtlc(htlc_id, int(FailReason.ROUTE_PENDING)), self._sign_remote(ch.pending)]
        return []

    def _gateway_commitment(self, txid: bytes) -> tuple[Optional[int], Optional[CommitmentTx]]:
        ch = self.channel
        for s, t in ch.signed_remote.items():
            if t == txid:
                state = ch.history[s] if s < len(ch.history) else ch.pending
                return s, self._remote_commitment(state)
        return None, None

    def _resolve_close(self, spender: bytes) -> None:
        ch = self.channel
        s, commitment = self._gateway_commitment(spender)
        if commitment is not None and s < ch.state.state_num and not isinstance(self.behavior, ColludeWithGateway):
            self._penalize(commitment)
        self._claim_outputs(self.chain.get_tx(spender))

    def _spendable(self, op) -> bool:
        return op in self.chain.utxos and not self._in_mempool(op)

    def _in_mempool(self, op) -> bool:
        return any(
            i.outpoint == op for t in self.chain.mempool for i in self.chain.get_tx(t).inputs
        )

    def _penalize(self, commitment: CommitmentTx) -> None:
        if commitment.txid in self.breaches:
            return
        try:
            penalty = build_penalty_tx(commitment, self.channel.remote_secrets, self.payment_key,
                                       self.channel.params.other_fee)
        except (NothingToPenalize, NotRevoked):
            self.breaches.add(commitment.txid)
            return
        if all(self._spendable(i.outpoint) for i in penalty.inputs):
            self.penalties.append(self.chain.broadcast(penalty))
            self.breaches.add(commitment.txid)

    def _claim_outputs(self, tx: SimTx) -> None:
        ch = self.channel
        fee = ch.params.other_fee
        for vout, out in enumerate(tx.outputs):
            op = tx.outpoint(vout)
            if not self._spendable(op):
                continue
            cond = out.condition
            try:
                if isinstance(cond, HtlcOffered) and cond.recipient == self.payment_key:
                    preimage = ch.preimages.get(cond.payment_hash)
                    if preimage is not None:
                        self.chain.broadcast(build_htlc_success_tx(tx, vout, preimage, self.payment_priv,
                                                                   self.payment_key, fee))
                        self.claims.append(op.txid)
                elif (
                    isinstance(cond, RevocableDelayed)
                    and cond.owner == self.delayed_key
                    and self.chain.confirmations(tx.txid) >= cond.delay
                ):
                    self.chain.broadcast(build_delayed_sweep(tx, vout, self.delayed_priv, self.payment_key, fee))
                    self.claims.append(op.txid)
            except (TxRejected, ChannelError):
                continue
