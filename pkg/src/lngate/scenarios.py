"""Plain-text scenario definitions and the deterministic report they produce.

A scenario file has three parts::

    # comment
    name = gateway_cheat
    seed = 1
    fee_ppm = 100000

    [actions]
    open 10 btc
    pay 1 btc dest nosettle

    [assert]
    expect balances.onchain.gateway == 0 sat

Amounts take a unit of ``sat`` (default), ``btc`` or ``usd``; dollar amounts are
converted at the configured BTC/USD rate when the scenario runs. Assertion
values may also be ``true``/``false``, a quoted string, or ``@path`` to compare
against another report field.
"""
from __future__ import annotations

import json
import operator
import os
import re
import shlex
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from . import chain_sim
from .bridge import ColludeWithGateway
from .chain_sim import COIN
from .channel import ChannelError
from .nodes import (
    ColludeWithBridge,
    Honest,
    NodeError,
    Ransom,
    Simulation,
    SimConfig,
    adversary_act,
    close_channel_bridge,
    close_channel_gateway,
    close_channel_iot,
    send_payment_flow,
    settle_flow,
)
from .threshold_ecdsa import ThresholdError

DEFAULT_BTC_USD = 54_500
TEST_PAILLIER_ENV = "LNGATE_TEST_PAILLIER"


class ScenarioParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<scenario>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


class AssertionFailed(AssertionError):
    """Raised by ``check`` with every failing assertion listed."""

    def __init__(self, failures: list[dict]):
        super().__init__("; ".join(f"line {f['line']}: {f['expect']} (actual {f['actual']!r})" for f in failures))
        self.failures = failures


# ------------------------------------------------------------------ values


@dataclass(frozen=True)
class Amount:
    value: Decimal
    unit: str = "sat"

    def to_sat(self, btc_usd: int) -> int:
        if self.unit == "sat":
            sat = self.value
        elif self.unit == "btc":
            sat = self.value * COIN
        else:
            sat = self.value * COIN / Decimal(btc_usd)
        return int(sat.quantize(Decimal(1), rounding=ROUND_HALF_UP))

    def __str__(self) -> str:
        return f"{self.value} {self.unit}"


UNITS = ("sat", "btc", "usd")


def usd_to_sat(usd: Union[str, Decimal], btc_usd: int = DEFAULT_BTC_USD) -> int:
    return Amount(Decimal(usd), "usd").to_sat(btc_usd)


def parse_amount(tokens: list[str], line: int = 0, source: str = "<scenario>") -> tuple[Amount, list[str]]:
    """Parse ``<number> [unit]`` from the front of ``tokens``; returns the rest."""
    if not tokens:
        raise ScenarioParseError("missing amount", line, source)
    try:
        value = Decimal(tokens[0])
    except InvalidOperation:
        raise ScenarioParseError(f"bad amount {tokens[0]!r}", line, source) from None
    if not value.is_finite() or value < 0:
        raise ScenarioParseError(f"bad amount {tokens[0]!r}", line, source)
    rest = tokens[1:]
    unit = "sat"
    if rest and rest[0].lower() in UNITS:
        unit = rest[0].lower()
        rest = rest[1:]
    if unit != "usd" and (value * (COIN if unit == "btc" else 1)) % 1:
        raise ScenarioParseError(f"{tokens[0]} {unit} is not a whole number of satoshi", line, source)
    return Amount(value, unit), rest


# --------------------------------------------------------------- structure


@dataclass(frozen=True)
class Action:
    verb: str
    args: tuple
    line: int
    text: str


@dataclass(frozen=True)
class Expectation:
    path: str
    op: str
    value: object
    line: int
    text: str


@dataclass
class Scenario:
    name: str
    description: str = ""
    seed: int = 0
    fee_ppm: int = 0
    base_fee: int = 2
    btc_usd: int = DEFAULT_BTC_USD
    paillier_bits: int = 2048
    gateway: str = "honest"
    bridge: str = "honest"
    destinations: tuple[str, ...] = ("dest",)
    actions: list[Action] = field(default_factory=list)
    assertions: list[Expectation] = field(default_factory=list)
    source: str = "<scenario>"


BEHAVIOURS = {
    "gateway": {"honest": Honest, "ransom": Ransom, "collude": ColludeWithBridge},
    "bridge": {"honest": Honest, "collude": ColludeWithGateway},
}
INT_KEYS = ("seed", "fee_ppm", "base_fee", "btc_usd", "paillier_bits")
_COMMENT = re.compile(r"(^|\s)#.*$")
OPS = {"==": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


def _parse_action(tokens: list[str], line: int, text: str, source: str) -> Action:
    verb, args = tokens[0].lower(), tokens[1:]

    def fail(msg: str):
        raise ScenarioParseError(f"{verb}: {msg}", line, source)

    def integer(tok: str) -> int:
        try:
            return int(tok)
        except ValueError:
            fail(f"expected an integer, got {tok!r}")

    if verb in ("open", "fund"):
        amount, rest = parse_amount(args, line, source)
        if rest:
            fail(f"unexpected {' '.join(rest)!r}")
        return Action(verb, (amount,), line, text)
    if verb == "pay":
        amount, rest = parse_amount(args, line, source)
        if not rest:
            fail("missing destination")
        dest, rest = rest[0], rest[1:]
        times, settle = 1, True
        for tok in rest:
            if tok.startswith("x") and tok[1:].isdigit():
                times = int(tok[1:])
            elif tok == "nosettle":
                settle = False
            else:
                fail(f"unknown option {tok!r}")
        return Action(verb, (amount, dest, times, settle), line, text)
    if verb in ("settle", "reconnect", "resume"):
        if args:
            fail("takes no arguments")
        return Action(verb, (), line, text)
    if verb == "close":
        if not args or args[0] not in ("iot", "gateway", "bridge"):
            fail("expected iot, gateway or bridge")
        mode = args[1] if len(args) > 1 else "mutual"
        if mode not in ("mutual", "unilateral") or len(args) > 2:
            fail(f"bad close mode {' '.join(args[1:])!r}")
        return Action(verb, (args[0], mode), line, text)
    if verb in ("revoked", "offline"):
        if len(args) != 2 or args[0] not in ("gateway", "bridge"):
            fail("expected <gateway|bridge> <n>")
        return Action(verb, (args[0], integer(args[1])), line, text)
    if verb == "behavior":
        if len(args) != 2 or args[0] not in BEHAVIOURS or args[1] not in BEHAVIOURS[args[0]]:
            fail(f"unknown behaviour {' '.join(args)!r}")
        return Action(verb, (args[0], args[1]), line, text)
    if verb in ("mine", "drop_link_after"):
        if len(args) != 1:
            fail("expected one integer")
        return Action(verb, (integer(args[0]),), line, text)
    if verb == "snapshot":
        if len(args) != 1:
            fail("expected a label")
        return Action(verb, (args[0],), line, text)
    raise ScenarioParseError(f"unknown action {verb!r}", line, source)


def _parse_value(tokens: list[str], line: int, source: str):
    if len(tokens) == 1:
        tok = tokens[0]
        low = tok.lower()
        if low in ("true", "false"):
            return low == "true"
        if low in ("null", "none"):
            return None
        if tok.startswith("@"):
            return ("ref", tok[1:])
        if tok[0] in "\"'":
            return tok[1:-1] if len(tok) > 1 and tok[-1] == tok[0] else tok[1:]
        try:
            Decimal(tok)
        except InvalidOperation:
            return tok
    amount, rest = parse_amount(tokens, line, source)
    if rest:
        raise ScenarioParseError(f"unexpected {' '.join(rest)!r} after value", line, source)
    return amount


def _parse_expect(tokens: list[str], line: int, text: str, source: str) -> Expectation:
    if len(tokens) < 4 or tokens[0] != "expect":
        raise ScenarioParseError("expected 'expect <path> <op> <value>'", line, source)
    path, op = tokens[1], tokens[2]
    if op not in OPS:
        raise ScenarioParseError(f"unknown operator {op!r}", line, source)
    return Expectation(path, op, _parse_value(tokens[3:], line, source), line, text)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    fields: dict[str, str] = {}
    actions: list[Action] = []
    assertions: list[Expectation] = []
    section = "header"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("actions", "assert"):
                raise ScenarioParseError(f"unknown section [{section}]", lineno, source)
            continue
        if section == "header":
            key, sep, value = line.partition("=")
            key = key.strip().lower()
            if not sep or not key:
                raise ScenarioParseError(f"expected 'key = value', got {line!r}", lineno, source)
            if key in fields:
                raise ScenarioParseError(f"duplicate key {key!r}", lineno, source)
            fields[key] = value.strip()
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ScenarioParseError(str(exc), lineno, source) from None
        if section == "actions":
            actions.append(_parse_action(tokens, lineno, line, source))
        else:
            assertions.append(_parse_expect(tokens, lineno, line, source))

    if "name" not in fields:
        raise ScenarioParseError("missing 'name'", None, source)
    kwargs: dict = {"name": fields.pop("name"), "description": fields.pop("description", "")}
    for key in INT_KEYS:
        if key in fields:
            try:
                kwargs[key] = int(fields.pop(key))
            except ValueError:
                raise ScenarioParseError(f"{key} must be an integer", None, source) from None
    for actor in ("gateway", "bridge"):
        if actor in fields:
            value = fields.pop(actor)
            if value not in BEHAVIOURS[actor]:
                raise ScenarioParseError(f"unknown {actor} behaviour {value!r}", None, source)
            kwargs[actor] = value
    if "destinations" in fields:
        kwargs["destinations"] = tuple(d.strip() for d in fields.pop("destinations").split(",") if d.strip())
    if fields:
        raise ScenarioParseError(f"unknown keys {sorted(fields)}", None, source)
    return Scenario(**kwargs, actions=actions, assertions=assertions, source=source)


# ---------------------------------------------------------------- catalogue


def scenario_names() -> list[str]:
    root = resources.files("lngate") / "data" / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".scn"))


def load_scenario(name_or_path: str) -> Scenario:
    """Load a shipped scenario by name, or any ``.scn`` file by path."""
    path = Path(name_or_path)
    if path.suffix == ".scn" and path.exists():
        return parse_scenario(path.read_text(), str(path))
    res = resources.files("lngate") / "data" / "scenarios" / f"{name_or_path}.scn"
    if not res.is_file():
        raise FileNotFoundError(f"no scenario named {name_or_path!r}")
    return parse_scenario(res.read_text(), f"{name_or_path}.scn")


# ------------------------------------------------------------------ running


def _test_paillier() -> bool:
    return os.environ.get(TEST_PAILLIER_ENV) == "1"


@dataclass
class Run:
    """A finished scenario: the simulation plus everything the report needs."""

    scenario: Scenario
    sim: Simulation
    errors: list[dict]
    snapshots: dict[str, dict]
    fund_total: int


# Expected, reportable outcomes; anything else is a bug and propagates.
OUTCOME_ERRORS = (ChannelError, NodeError, ThresholdError, chain_sim.TxRejected)


def execute(scenario: Scenario) -> Run:
    test_size = _test_paillier()
    config = SimConfig(
        seed=scenario.seed,
        fee_ppm=scenario.fee_ppm,
        base_fee=scenario.base_fee,
        paillier_bits=min(scenario.paillier_bits, 1024) if test_size else scenario.paillier_bits,
        allow_test_size=test_size,
        gateway_behavior=BEHAVIOURS["gateway"][scenario.gateway](),
        bridge_behavior=BEHAVIOURS["bridge"][scenario.bridge](),
    )
    sim = Simulation(config)
    for dest in scenario.destinations:
        sim.add_destination(dest)
    run = Run(scenario, sim, [], {}, 0)
    for action in scenario.actions:
        try:
            _apply(run, action)
        except OUTCOME_ERRORS as exc:
            run.errors.append({"line": action.line, "action": action.text, "error": type(exc).__name__,
                               "message": str(exc)})
    return run


def _apply(run: Run, action: Action) -> None:
    sim, rate = run.sim, run.scenario.btc_usd
    verb, args = action.verb, action.args
    if verb == "fund":
        amount = args[0].to_sat(rate)
        sim.fund_iot(amount)
        run.fund_total += amount
    elif verb == "open":
        capacity = args[0].to_sat(rate)
        if not sim.iot.utxos:
            sim.fund_iot(capacity + chain_sim.OPEN_FEE)
            run.fund_total += capacity + chain_sim.OPEN_FEE
        sim.open_channel(capacity)
    elif verb == "pay":
        amount, dest, times, settle = args
        for _ in range(times):
            send_payment_flow(sim, amount.to_sat(rate), dest, settle=settle)
    elif verb == "settle":
        settle_flow(sim)
    elif verb == "close":
        who, mode = args
        if who == "iot":
            close_channel_iot(sim, mode)
        elif who == "gateway":
            close_channel_gateway(sim)
        else:
            close_channel_bridge(sim)
    elif verb == "revoked":
        adversary_act(sim, args[0], "broadcast_revoked", args[1])
    elif verb == "offline":
        adversary_act(sim, args[0], "offline", args[1])
    elif verb == "behavior":
        target = sim.gateway if args[0] == "gateway" else sim.bridge
        target.behavior = BEHAVIOURS[args[0]][args[1]]()
    elif verb == "mine":
        sim.mine(args[0])
    elif verb == "drop_link_after":
        sim.iot_link.fail_after = args[0]
    elif verb == "reconnect":
        sim.iot_link.reconnect()
        sim.bridge.drop_uncommitted()
    elif verb == "resume":
        sim.gateway.resume_revocation()
    elif verb == "snapshot":
        run.snapshots[args[0]] = _balances(run)
    else:  # pragma: no cover - the parser rejects unknown verbs
        raise ValueError(verb)


# ------------------------------------------------------------------ report


def _fee_category(label: str) -> str:
    if label == "funding":
        return "open"
    if label.startswith(("gateway-commitment", "bridge-commitment", "closing")):
        return "close"
    if label.startswith("penalty"):
        return "penalty"
    return "sweep"


def onchain_fees(chain: chain_sim.SimChain) -> dict[str, int]:
    fees = {"open": 0, "close": 0, "penalty": 0, "sweep": 0}
    for block in chain.blocks:
        for txid in block.txids:
            tx = chain.get_tx(txid)
            if not tx.label.startswith("mint"):
                fees[_fee_category(tx.label)] += chain.fee_paid(txid)
    fees["total"] = sum(fees.values())
    return fees


def _wallet_total(sim: Simulation) -> int:
    return sum(amount for op, amount in sim.iot.utxos if op in sim.chain.utxos)


def _balances(run: Run) -> dict:
    sim = run.sim
    chain = sim.chain
    ch = sim.channel
    onchain = {
        "iot": chain.balance_of(sim.iot.key),
        "gateway": chain.balance_of(sim.gateway.fee_key),
        "bridge": chain.balance_of(sim.bridge.payment_key) + chain.balance_of(sim.bridge.delayed_key),
        "locked": chain.utxo_total() - sum(
            chain.balance_of(k) for k in (sim.iot.key, sim.gateway.fee_key, sim.bridge.payment_key,
                                          sim.bridge.delayed_key)
        ),
    }
    channel = None
    if ch is not None:
        state = ch.state
        channel = {
            "iot": state.iot_balance,
            "bridge": state.bridge_balance,
            "gateway_fees": state.gateway_fee_balance,
            "htlcs": state.htlc_total,
        }
    return {
        "onchain": onchain,
        "channel": channel,
        "offchain": {
            "bridge_forwarding_fees": sim.bridge.forwarding_fees,
            "bridge_paid_out": sim.bridge.paid_out,
            "destinations": {name: d.received for name, d in sorted(sim.destinations.items())},
        },
    }


def _replay(sim: Simulation) -> Optional[dict]:
    """Prior states in which a colluder would hold strictly more than now."""
    ch = sim.channel
    if ch is None or not ch.history:
        return None
    latest = ch.state

    def bridge_claim(s):
        return s.bridge_balance + s.htlc_total

    prior = [s for s in ch.history if s.state_num < latest.state_num]
    return {
        "states": len(ch.history),
        "bridge_better": [s.state_num for s in prior if bridge_claim(s) > bridge_claim(latest)],
        "gateway_better": [s.state_num for s in prior if s.gateway_fee_balance > latest.gateway_fee_balance],
        "iot_better": [s.state_num for s in prior if s.iot_balance > latest.iot_balance],
    }


def _iot_safety(run: Run) -> Optional[dict]:
    """IoT's recoverable satoshi against capacity minus payments and fees owed."""
    sim = run.sim
    ch = sim.channel
    if ch is None or ch.setup is None:
        return None
    params = ch.params
    # The device only knows what it asked for and which requests were refused.
    refused = sum(p.amount for p in sim.payments if p.status != "success")
    committed = sum(sim.iot.requested) - refused
    floor = params.capacity - committed - params.close_fee
    if ch.close_txid is not None and sim.chain.inclusion_height(ch.close_txid) is not None:
        recoverable = sim.chain.balance_of(sim.iot.key) - _wallet_total(sim)
        source = "onchain"
    else:
        recoverable = ch.state.iot_balance - params.close_fee
        source = "latest_state"
    return {"recoverable": recoverable, "floor": floor, "source": source, "holds": recoverable >= floor}


def build_report(run: Run) -> dict:
    sim, sc = run.sim, run.scenario
    ch = sim.channel
    chain = sim.chain
    fees = onchain_fees(chain)
    state = ch.state if ch is not None else None
    service = state.gateway_fee_balance if state is not None else 0
    ledger = None
    if state is not None:
        parts = {
            "iot": state.iot_balance,
            "bridge": state.bridge_balance,
            "service_fees": state.gateway_fee_balance,
            "htlcs": state.htlc_total,
            "onchain_fees": state.onchain_fees,
        }
        ledger = {**parts, "capacity": state.capacity, "sum": sum(parts.values()),
                  "conserved": sum(parts.values()) == state.capacity}
    per_flow = {
        label: {"bytes": sim.trace.iot_bytes(label), "frames": sim.trace.iot_frames(label)}
        for label in sim.trace.labels()
    }
    bridge_id = sim.bridge.node_id.serialize()
    report = {
        "scenario": sc.name,
        "seed": sc.seed,
        "params": {
            "fee_ppm": sc.fee_ppm,
            "base_fee": sc.base_fee,
            "btc_usd": sc.btc_usd,
            "paillier_bits": sim.config.paillier_bits,
        },
        "channel": {
            "status": ch.status if ch is not None else "none",
            "state": state.to_json() if state is not None else None,
            "history": len(ch.history) if ch is not None else 0,
        },
        "payments": [
            {"status": p.status, "amount": p.amount, "fee": p.fee, "reason": p.reason}
            for p in sim.payments
        ],
        "errors": run.errors,
        "balances": _balances(run),
        "snapshots": run.snapshots,
        "fees": {
            "service": service,
            "service_usd": float(Decimal(service) * sc.btc_usd / COIN),
            "forwarding": sim.bridge.forwarding_fees,
            "onchain": fees,
            "ledger": ledger,
        },
        "penalties": {"gateway": len(sim.gateway.penalties), "bridge": len(sim.bridge.penalties)},
        "gateway": {
            "dropped_requests": list(sim.gateway.dropped_requests),
            "own_commitments_signed": sum(v for k, v in sim.gateway.commitments_signed.items()
                                          if isinstance(k, tuple)),
        },
        "iot": {
            "notifications": [m.NAME for m in sim.iot.inbox],
            "signatures_given": sim.iot.signatures_given,
            "knows_bridge_node_id": any(bridge_id in p for p in sim.iot_link.delivered_to_iot),
            "safety": _iot_safety(run),
        },
        "iot_link": {**sim.iot_link.metrics(), "per_flow": per_flow},
        "replay": _replay(sim),
        "chain": {
            "height": chain.height,
            "digest": chain.state_digest(),
            "conserved": chain.conserved(),
            "transactions": [chain.get_tx(t).label for b in chain.blocks for t in b.txids],
        },
        "trace": [e.to_json() for e in sim.trace.events],
    }
    results = [_evaluate(report, e, sc.btc_usd) for e in sc.assertions]
    report["assertions"] = results
    report["passed"] = all(r["passed"] for r in results)
    return report


_MISSING = object()


def resolve_path(report: dict, path: str):
    """Dotted lookup; integer segments index lists and ``len`` gives a length."""
    node = report
    for seg in path.split("."):
        if seg == "len" and isinstance(node, (list, dict, str)):
            node = len(node)
        elif isinstance(node, dict) and seg in node:
            node = node[seg]
        elif isinstance(node, list) and seg.lstrip("-").isdigit() and -len(node) <= int(seg) < len(node):
            node = node[int(seg)]
        else:
            return _MISSING
    return node


def _evaluate(report: dict, exp: Expectation, btc_usd: int) -> dict:
    expected = exp.value
    if isinstance(expected, Amount):
        expected = expected.to_sat(btc_usd)
    elif isinstance(expected, tuple) and expected[:1] == ("ref",):
        expected = resolve_path(report, expected[1])
    actual = resolve_path(report, exp.path)
    if actual is _MISSING or expected is _MISSING:
        passed = False
    else:
        try:
            passed = bool(OPS[exp.op](actual, expected))
        except TypeError:
            passed = False
    return {
        "line": exp.line,
        "expect": exp.text,
        "expected": None if expected is _MISSING else expected,
        "actual": None if actual is _MISSING else actual,
        "passed": passed,
    }


def run(scenario: Scenario, seed: Optional[int] = None, fee_ppm: Optional[int] = None,
        btc_usd: Optional[int] = None) -> dict:
    """Execute ``scenario`` (with optional overrides) and return its report."""
    overrides = {k: v for k, v in (("seed", seed), ("fee_ppm", fee_ppm), ("btc_usd", btc_usd)) if v is not None}
    run_ = execute(replace(scenario, **overrides))
    return build_report(run_)


def run_with_chain(scenario: Scenario, **overrides) -> tuple[dict, chain_sim.SimChain]:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    run_ = execute(replace(scenario, **overrides))
    return build_report(run_), run_.sim.chain


def check(report: dict) -> None:
    failures = [r for r in report["assertions"] if not r["passed"]]
    if failures:
        raise AssertionFailed(failures)


def report_bytes(scenario: Scenario) -> dict[str, int]:
    """IoT-link bytes per flow label, e.g. ``{"open#1": ..., "pay#1": ...}``."""
    report = run(scenario)
    return {label: v["bytes"] for label, v in report["iot_link"]["per_flow"].items() if v["frames"]}


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
