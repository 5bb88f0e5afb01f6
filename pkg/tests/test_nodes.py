import ast
from pathlib import Path

import pytest

import golden
from conftest import make_sim, open_sim
from lngate import nodes
from lngate.chain_sim import COIN, OPEN_FEE, KeySpend, ThresholdFunding
from lngate.channel import InsufficientFeeBalance, InsufficientFunds, NotRevoked
from lngate.nodes import (
    BroadcastRevoked,
    ChannelUnavailable,
    ColludeWithBridge,
    FlowAborted,
    FundingTimeout,
    Ransom,
    adversary_act,
    close_channel_bridge,
    close_channel_gateway,
    close_channel_iot,
    send_payment_flow,
)
from lngate.threshold_ecdsa import verify_standard
from lngate.wire import ChannelClosed, CloseReason, PaymentSuccess, RequestFailed


@pytest.fixture(scope="module")
def paid():
    """Reference channel: 10 BTC, one settled 1 BTC payment at a 10 % service fee."""
    sim = open_sim()
    outcome = sim.pay(COIN, "dest")
    return sim, outcome


# ------------------------------------------------------------ golden traces


def test_open_trace_matches_golden(paid):
    sim, _ = paid
    assert golden.observed(sim.trace, "open#1") == golden.flatten(golden.OPEN_FLOW)
    assert golden.step_numbers(golden.OPEN_FLOW) == list(range(1, 14))
    assert sim.trace.iot_frames("open#1") == golden.iot_frames(golden.flatten(golden.OPEN_FLOW)) == 14


def test_pay_trace_matches_golden(paid):
    sim, _ = paid
    assert golden.observed(sim.trace, "pay#1") == golden.flatten(golden.PAY_FLOW)
    assert sorted(set(golden.step_numbers(golden.PAY_FLOW))) == list(range(1, 10))
    assert sim.trace.iot_frames("pay#1") == 12


def test_settle_trace(paid):
    sim, _ = paid
    assert golden.observed(sim.trace, "settle#1") == golden.SETTLE


def test_iot_link_bytes_equal_frame_sizes(paid):
    sim, _ = paid
    total = sum(e.size for e in sim.trace.events if e.link == "iot")
    m = sim.iot_link.metrics()
    assert m["bytes_sent"] + m["bytes_received"] == total
    assert m["frame_count"] == sum(1 for e in sim.trace.events if e.link == "iot")
    assert sim.trace.iot_bytes("pay#1") < 8192


# ----------------------------------------------------------------- opening


def test_funding_on_chain_and_commitment_signatures(paid):
    sim, _ = paid
    ch = sim.channel
    funding = sim.chain.get_tx(ch.funding_tx.txid)
    cond = funding.outputs[0].condition
    assert isinstance(cond, ThresholdFunding) and cond.joint == ch.view.Q == sim.iot.client_view.Q
    assert funding.outputs[0].amount == 10 * COIN and sim.chain.fee_paid(funding.txid) == OPEN_FEE
    assert sim.chain.confirmations(funding.txid) >= 3
    # Our commitment 0 carries the bridge's signature; the bridge's carries the joint one under Q.
    own0 = sim.gateway._own_commitment(ch.history[0])
    assert verify_standard(ch.bridge_funding_key, own0.digest, ch.remote_sigs[0])
    bch = sim.bridge.channel
    theirs0 = sim.bridge._own_commitment(bch.history[0])
    assert verify_standard(ch.view.Q, theirs0.digest, bch.local_sigs[0])


def test_open_without_funds_sends_nothing():
    sim = make_sim()
    sim.fund_iot(10 * COIN)
    with pytest.raises(InsufficientFunds):
        sim.open_channel(10 * COIN)
    assert sim.trace.events == [] and sim.iot_link.metrics()["frame_count"] == 0


def test_funding_timeout_when_no_blocks_arrive():
    sim = make_sim()
    sim.fund_iot(COIN + OPEN_FEE)
    sim.gateway.wait_blocks = lambda n: None
    with pytest.raises(FundingTimeout):
        sim.open_channel(COIN)


def test_iot_holds_no_channel_state(paid):
    sim, _ = paid
    for attr in ("chain", "channel", "history", "state"):
        assert not hasattr(sim.iot, attr)


# ---------------------------------------------------------------- payments


def test_payment_balances_and_forwarding(paid):
    sim, outcome = paid
    assert outcome.status == "success" and outcome.fee == COIN // 10
    st = sim.channel.state
    assert (st.iot_balance, st.bridge_balance, st.gateway_fee_balance) == (9 * COIN, 90_000_000, 10_000_000)
    assert sim.destinations["dest"].payments == [COIN - COIN // 10 - 2]
    assert sim.bridge.forwarding_fees == 2
    assert any(isinstance(m, PaymentSuccess) and m.payment_hash == outcome.payment_hash for m in sim.iot.inbox)


def test_honest_gateway_signs_each_commitment_once(paid):
    sim, _ = paid
    assert sim.gateway.commitments_signed and set(sim.gateway.commitments_signed.values()) == {1}


def test_insufficient_funds_payment():
    sim = open_sim(capacity=100_000)
    with pytest.raises(InsufficientFunds):
        send_payment_flow(sim, 200_000, "dest")
    assert isinstance(sim.iot.inbox[-1], RequestFailed)
    assert sim.channel.state.state_num == 0


def test_route_failure_stays_pending_then_fails_back():
    sim = open_sim()
    outcome = send_payment_flow(sim, COIN, "nobody")
    assert outcome.status == "success"  # committed with the bridge
    st = sim.channel.state
    assert len(st.pending_htlcs) == 1 and sim.destinations["dest"].payments == []
    sim.mine(45)
    st = sim.channel.state
    assert not st.pending_htlcs and st.iot_balance == 10 * COIN and st.gateway_fee_balance == 0


def test_two_payments_layout():
    sim = open_sim()
    sim.pay(COIN, "dest")
    send_payment_flow(sim, COIN, "dest", settle=False)
    tx = sim.gateway._own_commitment(sim.channel.state)
    assert tx.amount("iot") == 8 * COIN - 183
    assert (tx.amount("bridge"), tx.amount("htlc:1"), tx.amount("fees")) == (90_000_000, 90_000_000, 20_000_000)


# ---------------------------------------------------------------- closing


def test_iot_mutual_close():
    sim = open_sim()
    sim.pay(COIN, "dest")
    close_channel_iot(sim)
    assert sim.chain.balance_of(sim.iot.key) == 9 * COIN - 183
    assert sim.chain.balance_of(sim.bridge.payment_key) == 90_000_000
    assert sim.chain.balance_of(sim.gateway.fee_key) == 10_000_000
    assert isinstance(sim.iot.inbox[-1], ChannelClosed) and sim.iot.inbox[-1].reason == CloseReason.IOT_REQUEST
    with pytest.raises(ChannelUnavailable):
        sim.iot.payment_request(1, sim.destinations["dest"].node_id)


def test_iot_mutual_close_with_dust_fee_output():
    # 200 sat of service fees is below dust, so the closing tx folds it into the fee.
    sim = open_sim(seed=3, fee_ppm=10_000, capacity=1_000_000)
    for _ in range(2):
        send_payment_flow(sim, 10_000, "dest")
    close_channel_iot(sim)
    sim.mine(1)
    assert sim.chain.balance_of(sim.iot.key) == 980_000 - 183
    assert sim.chain.balance_of(sim.bridge.payment_key) == 19_800
    assert sim.chain.balance_of(sim.gateway.fee_key) == 0
    assert isinstance(sim.iot.inbox[-1], ChannelClosed)


def test_gateway_close_pays_fee_from_fees():
    sim = open_sim()
    sim.pay(COIN, "dest")
    close_channel_gateway(sim)
    assert sim.chain.balance_of(sim.iot.key) == 9 * COIN
    assert sim.chain.balance_of(sim.gateway.fee_key) == 10_000_000 - 183


def test_gateway_close_refused_without_fees():
    sim = open_sim(capacity=100_000, fee_ppm=50_000)
    sim.pay(2_000, "dest")
    assert sim.channel.state.gateway_fee_balance == 100
    with pytest.raises(InsufficientFeeBalance):
        close_channel_gateway(sim)
    assert sim.channel.status == "active"


def test_bridge_unilateral_close_notifies_iot():
    sim = open_sim()
    sim.pay(COIN, "dest")
    close_channel_bridge(sim)
    closed = [m for m in sim.iot.inbox if isinstance(m, ChannelClosed)]
    assert closed and closed[0].reason == CloseReason.BRIDGE_CLOSE
    assert sim.channel.status == "closed"
    assert sim.chain.balance_of(sim.iot.key) == 9 * COIN - 183
    with pytest.raises(ChannelUnavailable):
        sim.iot.close_request()


# -------------------------------------------------------------- adversaries


def test_gateway_revoked_broadcast_is_penalized():
    sim = open_sim()
    send_payment_flow(sim, COIN, "dest", settle=False)  # state 1 has the fee output
    sim.settle()
    with pytest.raises(NotRevoked):
        adversary_act(sim, "gateway", "broadcast_revoked", sim.channel.state.state_num)
    txid = adversary_act(sim, "gateway", "broadcast_revoked", 1)
    sim.mine(2)
    assert len(sim.bridge.penalties) == 1 and sim.channel.status == "closed"
    # Swept fee output plus the HTLC claimed with the preimage, each paying a 150 sat sweep fee.
    assert sim.chain.balance_of(sim.bridge.payment_key) == (10_000_000 - 150) + (90_000_000 - 150)
    tx = sim.chain.get_tx(txid)
    iot_out = tx.outputs[0]
    assert iot_out.condition == KeySpend(sim.iot.key) and iot_out.amount == 9 * COIN - 183
    assert sim.chain.conserved()


def test_bridge_revoked_broadcast_penalized_when_gateway_online():
    sim = open_sim()
    sim.pay(COIN, "dest")
    sim.pay(COIN, "dest")
    adversary_act(sim, "bridge", "broadcast_revoked", 2)
    sim.mine(2)
    assert len(sim.gateway.penalties) == 1
    # Bridge's revoked output swept, plus the gateway's own unconditional fee output.
    assert sim.chain.balance_of(sim.gateway.fee_key) == (90_000_000 - 150) + 10_000_000
    assert sim.chain.balance_of(sim.iot.key) == 9 * COIN - 183


def test_bridge_revoked_broadcast_with_gateway_offline():
    sim = open_sim()
    sim.pay(COIN, "dest")
    sim.pay(COIN, "dest")
    adversary_act(sim, "gateway", "offline", 150)
    adversary_act(sim, "bridge", "broadcast_revoked", 2)
    sim.mine(155)
    assert sim.gateway.penalties == []
    assert sim.chain.balance_of(sim.iot.key) == 9 * COIN - 183


def test_ransom_drops_requests_without_moving_funds():
    sim = open_sim()
    sim.pay(COIN, "dest")
    before = sim.channel.state
    sim.gateway.behavior = Ransom()
    outcome = send_payment_flow(sim, COIN, "dest")
    close_channel_iot(sim)
    assert outcome.status == "dropped"
    assert sim.gateway.dropped_requests == ["SendPayment", "ChannelClosingRequest"]
    assert sim.channel.state == before and sim.channel.status == "active"


def test_behaviour_flags_exist():
    assert BroadcastRevoked(3).state_num == 3
    assert ColludeWithBridge() is not None


# ------------------------------------------------------------- disconnects


def test_link_drop_mid_signing_rolls_back():
    sim = open_sim()
    sim.iot_link.fail_after = 4  # SendPayment plus part of the first signature
    with pytest.raises(FlowAborted):
        send_payment_flow(sim, COIN, "dest")
    assert sim.channel.state.state_num == 0 and sim.channel.pending is None
    sim.iot_link.reconnect()
    sim.pay(COIN, "dest")
    assert sim.channel.state.bridge_balance == 90_000_000


def test_link_drop_before_revocation_resumes():
    sim = open_sim()
    sim.iot_link.fail_after = 9  # both signatures done, derive lost
    with pytest.raises(FlowAborted):
        send_payment_flow(sim, COIN, "dest")
    assert sim.channel.state.state_num == 1 and sim.channel.revocation_due == 1
    sim.iot_link.reconnect()
    sim.gateway.resume_revocation()
    sim.settle()
    assert sim.channel.state.state_num == 2 and sim.channel.state.bridge_balance == 90_000_000


# ----------------------------------------------------------------- structure


def test_bridge_imports_no_threshold_code():
    src = Path(nodes.__file__).with_name("bridge.py").read_text()
    imported = set()
    for node in ast.walk(ast.parse(src)):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
            imported.update(a.name for a in node.names)
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    banned = {"threshold_ecdsa", "paillier", "KeygenServer", "SignServer", "ThresholdSign", "ThresholdKeygen",
              "ThresholdDerive"}
    assert not imported & banned


def test_same_seed_same_trace():
    a, b = open_sim(seed=7), open_sim(seed=7)
    assert [e.to_json() for e in a.trace.events] == [e.to_json() for e in b.trace.events]
    assert a.chain.state_digest() == b.chain.state_digest()
