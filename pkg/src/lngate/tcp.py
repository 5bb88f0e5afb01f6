"""Demo transport: the IoT link over a real TCP socket.

The gateway listens and hosts everything except the device (chain, bridge,
destination); the IoT device connects and drives open, pay and close. Both
ends build their fixtures from the same seed, which stands in for pairing
(pre-shared wire key, session id, the IoT's funding UTXO and the destination
id a QR code would carry).

On the socket each wire frame travels as a ``u32`` length-prefixed record. An
empty record marks the end of the gateway's handling of one request; the
protocol itself has no such message because opening ends without one.
"""
from __future__ import annotations

import logging
import socket
import struct
from dataclasses import dataclass
from typing import Optional

from .chain_sim import OPEN_FEE
from .channel import ChannelError
from .nodes import LinkDown, NodeError, SimConfig, Simulation, settle_flow
from .wire import (
    ChannelClosed,
    ChannelClosingRequest,
    FundingTxRequest,
    Message,
    PaymentSuccess,
    RequestFailed,
    SendPayment,
    ThresholdDerive,
    ThresholdKeygen,
    ThresholdSign,
    WireSession,
    encode_message,
)

log = logging.getLogger(__name__)

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 9735
MAX_RECORD = 1 << 20


def send_record(sock: socket.socket, data: bytes) -> None:
    sock.sendall(struct.pack(">I", len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise LinkDown("peer closed the connection")
        buf += chunk
    return bytes(buf)


def recv_record(sock: socket.socket) -> bytes:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_RECORD:
        raise LinkDown(f"record of {length} bytes exceeds limit")
    return _recv_exact(sock, length) if length else b""


def expects_reply(msg: Message) -> bool:
    """Gateway messages the device answers; everything else is one-way."""
    if isinstance(msg, FundingTxRequest):
        return True
    if isinstance(msg, ThresholdKeygen | ThresholdDerive):
        return msg.round == 1
    if isinstance(msg, ThresholdSign):
        return msg.round in (1, 3)
    return False


@dataclass
class DemoConfig:
    seed: int = 0
    capacity: int = 1_000_000
    fee_ppm: int = 10_000
    paillier_bits: int = 2048
    allow_test_size: bool = False


def _world(cfg: DemoConfig) -> Simulation:
    sim = Simulation(SimConfig(seed=cfg.seed, fee_ppm=cfg.fee_ppm, paillier_bits=cfg.paillier_bits,
                               allow_test_size=cfg.allow_test_size))
    sim.add_destination("dest")
    sim.fund_iot(cfg.capacity + OPEN_FEE)
    return sim


class SocketGatewayLink:
    """Gateway end of the IoT link, with the same ``call`` contract as ``IotLink``."""

    def __init__(self, sock: socket.socket, session: WireSession, trace):
        self.sock = sock
        self.session = session
        self.trace = trace
        self.delivered_to_iot: list[bytes] = []

    def call(self, msg: Message) -> Optional[Message]:
        frame = self.session.seal(msg)
        self.trace.record("gateway", "iot", msg.NAME, "iot", len(frame))
        send_record(self.sock, frame)
        self.delivered_to_iot.append(encode_message(msg))
        if not expects_reply(msg):
            return None
        return self.receive()

    def receive(self) -> Message:
        frame = recv_record(self.sock)
        msg = self.session.open(frame)
        self.trace.record("iot", "gateway", msg.NAME, "iot", len(frame))
        return msg

    def metrics(self) -> dict:
        return self.session.session_metrics()


def serve_gateway(cfg: DemoConfig, host: str = DEFAULT_HOST, port: int = DEFAULT_PORT,
                  listener: Optional[socket.socket] = None) -> dict:
    """Accept one IoT connection and serve its requests until it closes the channel
    or disconnects. Returns the gateway-side link metrics."""
    sim = _world(cfg)
    own = listener is None
    if own:
        listener = socket.create_server((host, port))
    try:
        log.info("gateway listening on %s:%d", *listener.getsockname()[:2])
        conn, addr = listener.accept()
    finally:
        if own:
            listener.close()
    with conn:
        log.info("IoT device connected from %s:%d", *addr[:2])
        link = SocketGatewayLink(conn, sim.iot_link.gw_session, sim.trace)
        sim.gateway.iot_link = link
        while True:
            try:
                request = link.receive()
            except LinkDown:
                break
            try:
                with sim.trace.flow(request.NAME):
                    result = sim.gateway.handle_iot(request)
                if isinstance(request, SendPayment):
                    settle_flow(sim)
            except (ChannelError, NodeError) as exc:
                # The device has already been sent RequestFailed where one applies.
                result = f"{type(exc).__name__}: {exc}"
            log.info("%s -> %s", request.NAME, result)
            send_record(conn, b"")
            if isinstance(request, ChannelClosingRequest):
                break
    return link.metrics()


def run_iot(cfg: DemoConfig, payments: list[int], host: str = DEFAULT_HOST, port: int = DEFAULT_PORT,
            close: bool = True) -> dict:
    """Connect, open the channel, make ``payments`` and optionally close."""
    sim = _world(cfg)
    iot = sim.iot
    session = sim.iot_link.iot_session
    dest = sim.destinations["dest"].node_id
    with socket.create_connection((host, port)) as sock:

        def request(msg: Message) -> None:
            send_record(sock, session.seal(msg))
            while True:
                frame = recv_record(sock)
                if not frame:
                    return
                for reply in iot.handle(session.open(frame)):
                    send_record(sock, session.seal(reply))

        request(iot.open_request(cfg.capacity))
        for amount in payments:
            request(iot.payment_request(amount, dest))
        if close:
            request(iot.close_request())
    notes = [m.NAME for m in iot.inbox if isinstance(m, PaymentSuccess | ChannelClosed | RequestFailed)]
    return {**session.session_metrics(), "notifications": notes}

