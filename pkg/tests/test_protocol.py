"""
Tests for message framing and the session state machine.
"""

import struct

import numpy as np
import pytest

from src.error_handler import ProtocolError
from src.params import ParameterSet
from src.protocol import (
    LENGTH_PREFIX,
    ClientUpdateMessage,
    GlobalWeights,
    Hello,
    MessageType,
    SessionStateMachine,
    Shutdown,
    Stage,
    check_frame_length,
    decode_message,
    encode_frame,
)
from src.tensor import DType, Tensor
from src.weights_format import serialize_weights


def weights() -> ParameterSet:
    return ParameterSet([("classifier.out.bias", Tensor(np.array([0.5, -1.0, 2.0]), DType.F32))])


class TestFraming:
    """Frame layout and decoding."""

    def test_hello_layout(self) -> None:
        frame = encode_frame(Hello("client-0", 12, Stage.DOWNSTREAM))
        assert frame == struct.pack(">IB", 1 + 2 + 8 + 5, 1) + b"\x00\x08client-0" + struct.pack(">IB", 12, 1)

    @pytest.mark.parametrize(
        "message",
        [
            Hello("client-2", 7, Stage.PRETRAIN),
            GlobalWeights.of(3, weights()),
            ClientUpdateMessage(3, "client-1", 40, serialize_weights(weights())),
            Shutdown(),
        ],
    )
    def test_decode_inverts_encode(self, message) -> None:
        frame = encode_frame(message)
        (length,) = LENGTH_PREFIX.unpack(frame[:4])
        assert length == len(frame) - 4
        assert decode_message(frame[4:]) == message

    def test_weights_payload_is_embedded_verbatim(self) -> None:
        message = GlobalWeights.of(0, weights())
        assert encode_frame(message).endswith(serialize_weights(weights()))
        assert message.weights().bitwise_equal(weights())

    def test_oversized_frame_rejected(self) -> None:
        with pytest.raises(ProtocolError):
            encode_frame(GlobalWeights.of(0, weights()), max_frame_bytes=16)
        with pytest.raises(ProtocolError):
            check_frame_length(257 * 1024 * 1024)
        check_frame_length(256 * 1024 * 1024)

    def test_unknown_type(self) -> None:
        with pytest.raises(ProtocolError):
            decode_message(b"\x09")

    def test_truncated_body(self) -> None:
        with pytest.raises(ProtocolError):
            decode_message(bytes([MessageType.HELLO]) + b"\x00\x05ab")

    def test_extra_bytes_after_shutdown(self) -> None:
        with pytest.raises(ProtocolError):
            decode_message(bytes([MessageType.SHUTDOWN]) + b"\x00")

    def test_unknown_stage_code(self) -> None:
        with pytest.raises(ProtocolError):
            Stage.from_code(7)


class TestSession:
    """Legal message order on one connection."""

    def test_normal_session(self) -> None:
        session = SessionStateMachine("peer")
        session.observe(Hello("client-0", 3, Stage.PRETRAIN))
        assert session.is_active()
        assert session.client_id == "client-0"
        session.observe(GlobalWeights.of(0, weights()))
        session.observe(ClientUpdateMessage(0, "client-0", 3, b""))
        session.observe(Shutdown())
        assert session.is_closed()

    def test_second_hello_rejected(self) -> None:
        session = SessionStateMachine()
        session.observe(Hello("client-0", 3, Stage.PRETRAIN))
        with pytest.raises(ProtocolError):
            session.observe(Hello("client-0", 3, Stage.PRETRAIN))

    def test_weights_before_hello_rejected(self) -> None:
        with pytest.raises(ProtocolError):
            SessionStateMachine().observe(GlobalWeights.of(0, weights()))

    def test_nothing_after_shutdown(self) -> None:
        session = SessionStateMachine()
        session.observe(Shutdown())
        with pytest.raises(ProtocolError):
            session.observe(Hello("client-0", 1, Stage.PRETRAIN))
