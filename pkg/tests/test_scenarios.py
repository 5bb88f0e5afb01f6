import json
from decimal import Decimal

import pytest

from lngate import scenarios
from lngate.chain_sim import KeySpend
from lngate.channel import CommitmentTx
from lngate.scenarios import (
    Amount,
    AssertionFailed,
    ScenarioParseError,
    build_report,
    check,
    dumps_report,
    execute,
    load_scenario,
    parse_scenario,
    report_bytes,
    resolve_path,
    scenario_names,
    usd_to_sat,
)
from lngate.chain_sim import COIN
from lngate.wire import WireSession

from conftest import open_sim

REQUIRED = {
    "open_channel", "single_payment", "close_iot", "close_gateway", "close_bridge", "gateway_cheat", "bridge_cheat",
    "collusion_1a", "collusion_1b", "collusion_2", "collusion_3", "ransom", "toll_month", "open_close_costs",
    "noop",
}


@pytest.fixture(scope="module")
def runs():
    return {name: execute(load_scenario(name)) for name in scenario_names()}


def test_catalogue_covers_required_cases():
    assert REQUIRED <= set(scenario_names())


@pytest.mark.parametrize("name", scenario_names())
def test_shipped_scenario_passes(runs, name):
    report = build_report(runs[name])
    failing = [a for a in report["assertions"] if not a["passed"]]
    assert report["assertions"] and not failing, failing


@pytest.mark.parametrize("name", scenario_names())
def test_end_state_invariants(runs, name):
    run = runs[name]
    report = build_report(run)
    assert report["chain"]["conserved"]
    safety = report["iot"]["safety"]
    if safety is not None:
        assert safety["holds"], safety
    if report["fees"]["ledger"] is not None:
        assert report["fees"]["ledger"]["conserved"]
    # Output 1 of every gateway commitment that reached the chain is the IoT's plain key.
    iot_key = KeySpend(run.sim.iot.key)
    for block in run.sim.chain.blocks:
        for tx in run.sim.chain.block_txs(block.height):
            if isinstance(tx, CommitmentTx) and tx.side == "gateway" and tx.vout("iot") is not None:
                assert tx.outputs[tx.vout("iot")].condition == iot_key


def test_reports_are_byte_identical():
    sc = load_scenario("gateway_cheat")
    assert dumps_report(scenarios.run(sc)) == dumps_report(scenarios.run(sc))


def test_seed_override_changes_chain_only_in_keys():
    sc = load_scenario("single_payment")
    a, b = scenarios.run(sc), scenarios.run(sc, seed=99)
    assert a["chain"]["digest"] != b["chain"]["digest"]
    assert a["passed"] and b["passed"]


def test_fee_override_can_fail_assertions():
    report = scenarios.run(load_scenario("single_payment"), fee_ppm=0)
    assert not report["passed"]
    with pytest.raises(AssertionFailed) as info:
        check(report)
    assert info.value.failures


def test_toll_month_arithmetic(runs):
    report = build_report(runs["toll_month"])
    per_payment = usd_to_sat("0.75")
    assert per_payment == 1376  # 0.75 / 54500 BTC
    fee = (per_payment * 50_000 + 500_000) // 1_000_000
    assert report["fees"]["service"] == 60 * fee == 4140
    # $2.25 is the unrounded figure; per-payment sat rounding lands within one payment fee of it.
    assert abs(report["fees"]["service"] - usd_to_sat("2.25")) < fee


def test_open_close_costs(runs):
    fees = build_report(runs["open_close_costs"])["fees"]["onchain"]
    assert (fees["open"], fees["close"]) == (222, 183)


def test_report_schema(runs):
    report = json.loads(dumps_report(build_report(runs["single_payment"])))
    for key in ("scenario", "seed", "params", "channel", "payments", "errors", "balances", "snapshots", "fees",
                "penalties", "gateway", "iot", "iot_link", "replay", "chain", "trace", "assertions", "passed"):
        assert key in report
    assert set(report["iot_link"]) >= {"bytes_sent", "bytes_received", "frame_count", "per_flow"}


# ------------------------------------------------------------------ bytes


def test_noop_has_no_bytes():
    assert report_bytes(load_scenario("noop")) == {}


def test_payment_bytes_equal_frame_size_sum(monkeypatch):
    sealed = []
    original = WireSession.seal

    def recording_seal(self, msg):
        sealed.append(msg)
        return original(self, msg)

    monkeypatch.setattr(WireSession, "seal", recording_seal)
    sim = open_sim()
    sealed.clear()
    sim.pay(COIN, "dest")
    # Oracle: header 8 + nonce 16 + tag 32 around each encoded payload.
    expected = sum(8 + 16 + 32 + len(m.encode_payload()) for m in sealed)
    m = sim.iot_link.metrics()
    assert sim.trace.iot_bytes("pay#1") + sim.trace.iot_bytes("settle#1") == expected < 8192
    assert m["frame_count"] == sim.trace.iot_frames("open#1") + len(sealed)
    assert report_bytes(load_scenario("single_payment"))["pay#1"] == sim.trace.iot_bytes("pay#1")


# ------------------------------------------------------------------ parser


def test_amount_units():
    assert Amount(Decimal("1"), "btc").to_sat(54_500) == 100_000_000
    assert Amount(Decimal("0.75"), "usd").to_sat(54_500) == 1376
    assert Amount(Decimal("5"), "sat").to_sat(1) == 5


def test_parse_minimal_and_comments():
    sc = parse_scenario("name = x  # trailing\nseed = 3\n[actions]\nopen 1 btc\n[assert]\nexpect a.open#1 == 2\n")
    assert sc.name == "x" and sc.seed == 3
    assert sc.actions[0].verb == "open"
    assert sc.assertions[0].path == "a.open#1"


@pytest.mark.parametrize(
    "text",
    [
        "seed = 1\n",  # no name
        "name = x\nbogus = 1\n",
        "name = x\nseed = one\n",
        "name = x\ngateway = evil\n",
        "name = x\n[weird]\n",
        "name = x\n[actions]\nfly 3\n",
        "name = x\n[actions]\nopen lots\n",
        "name = x\n[actions]\nopen 0.000000001 btc\n",
        "name = x\n[assert]\nexpect a ~ 1\n",
        "name = x\nname = y\n",
    ],
)
def test_parse_errors(text):
    with pytest.raises(ScenarioParseError):
        parse_scenario(text)


def test_parse_error_reports_line():
    with pytest.raises(ScenarioParseError) as info:
        parse_scenario("name = x\n[actions]\nopen 1 btc\nfly\n")
    assert info.value.line == 4


def test_unknown_scenario():
    with pytest.raises(FileNotFoundError):
        load_scenario("does_not_exist")


def test_load_from_path(tmp_path):
    p = tmp_path / "mine.scn"
    p.write_text("name = mine\n[assert]\nexpect iot_link.frame_count == 0\n")
    assert scenarios.run(load_scenario(str(p)))["passed"]


def test_resolve_path():
    report = {"a": [{"b": 1}, {"b": 2}], "c": {"d": "x"}}
    assert resolve_path(report, "a.-1.b") == 2
    assert resolve_path(report, "a.len") == 2
    assert resolve_path(report, "c.d") == "x"
    assert resolve_path(report, "c.e") is scenarios._MISSING


def test_missing_path_fails_assertion():
    sc = parse_scenario("name = x\n[assert]\nexpect no.such.path == 1\n")
    report = scenarios.run(sc)
    assert not report["passed"] and report["assertions"][0]["actual"] is None


def test_expected_outcome_errors_are_recorded():
    sc = parse_scenario("name = x\n[actions]\nfund 1000 sat\nopen 1 btc\n[assert]\nexpect errors.0.error == InsufficientFunds\n")
    report = scenarios.run(sc)
    assert report["passed"], report["assertions"]
