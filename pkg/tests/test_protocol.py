import struct
import threading
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvqkdsim import protocol as proto
from cvqkdsim.config import SystemConfig
from cvqkdsim.physics import DriftState
from cvqkdsim.pipeline import distill_block
from cvqkdsim.protocol import (
    AbortReason,
    Frame,
    FrameDecodeError,
    MsgType,
    Phase,
    ProtocolError,
    Role,
    SessionFailed,
    SessionState,
    decode_frame,
    encode_frame,
    loopback_pair,
    run_session,
)


def small_cfg(**kwargs) -> SystemConfig:
    # a generous sampling fraction keeps the per-block error estimate
    # usable at this reduced block size
    return SystemConfig(block_size_pulses=100_000, sample_fraction=0.2,
                        **kwargs)


def noiseless_cfg(**kwargs) -> SystemConfig:
    return small_cfg(force_sigma_snu=1e-9, **kwargs)


def run_pair(cfg, transports=None, **kwargs):
    """Drive both roles over a loopback pair; returns {role: result|exception}."""
    if transports is None:
        transports = loopback_pair()
    ta, tb = transports
    out = {}

    def go(role, transport):
        try:
            out[role] = run_session(role, transport, cfg, **kwargs)
        except SessionFailed as exc:
            out[role] = exc
        finally:
            transport.close()

    t = threading.Thread(target=go, args=(Role.BOB, tb))
    t.start()
    go(Role.ALICE, ta)
    t.join()
    return out


_frame_strategies = st.one_of(
    st.builds(lambda bits: Frame(MsgType.BASIS_ANNOUNCE,
                                 bits=np.array(bits, dtype=np.uint8)),
              st.lists(st.integers(0, 1), min_size=8, max_size=64).map(
                  lambda xs: xs[:len(xs) - len(xs) % 8])
              .filter(lambda xs: len(xs) >= 8)),
    st.builds(lambda idx: Frame(MsgType.SAMPLE_INDICES,
                                indices=np.array(sorted(set(idx)),
                                                 dtype=np.int64)),
              st.lists(st.integers(0, 2 ** 32 - 1), min_size=0, max_size=32)),
    st.builds(lambda v: Frame(MsgType.QBER_REPORT, value=v),
              st.floats(min_value=0.0, max_value=0.5)),
    st.builds(lambda a, b: Frame(MsgType.PARITY_REQ, start=min(a, b),
                                 end=max(a, b)),
              st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 32 - 1)),
    st.builds(lambda p: Frame(MsgType.PARITY_RSP, parity=p),
              st.integers(0, 1)),
    st.builds(lambda s, n: Frame(MsgType.HASH_SEED, seed=s, out_len=n),
              st.integers(0, 2 ** 64 - 1), st.integers(0, 2 ** 32 - 1)),
    st.builds(lambda d: Frame(MsgType.KEY_CONFIRM, digest=bytes(d)),
              st.binary(min_size=32, max_size=32)),
    st.builds(lambda r: Frame(MsgType.ABORT, reason=r),
              st.sampled_from([int(r) for r in AbortReason])),
)


class TestFraming:
    @settings(max_examples=200, deadline=None)
    @given(_frame_strategies)
    def test_round_trip(self, frame):
        assert decode_frame(encode_frame(frame)) == frame

    def test_pinned_basis_announce(self):
        # bits 0100 1101 pack to 0x4D, pulse 0 in the MSB
        frame = Frame(MsgType.BASIS_ANNOUNCE,
                      bits=np.array([0, 1, 0, 0, 1, 1, 0, 1], dtype=np.uint8))
        assert encode_frame(frame) == b"\x00\x00\x00\x01\x01\x4d"

    def test_abort_frame_is_seven_bytes(self):
        data = encode_frame(Frame(MsgType.ABORT,
                                  reason=int(AbortReason.TIMEOUT)))
        assert len(data) == 7
        assert data == b"\x00\x00\x00\x02\x0a\x00\x03"

    def test_header_is_big_endian(self):
        data = encode_frame(Frame(MsgType.QBER_REPORT, value=0.25))
        length, raw_type = struct.unpack(">IB", data[:5])
        assert length == 8
        assert raw_type == 0x05

    def test_decode_rejects_unknown_type(self):
        with pytest.raises(FrameDecodeError):
            decode_frame(b"\x00\x00\x00\x00\x7f")

    def test_decode_rejects_length_mismatch(self):
        with pytest.raises(FrameDecodeError):
            decode_frame(b"\x00\x00\x00\x05\x05\x00")

    def test_decode_rejects_truncated_header(self):
        with pytest.raises(FrameDecodeError):
            decode_frame(b"\x00\x00")

    def test_key_confirm_digest_size_enforced(self):
        with pytest.raises(ProtocolError):
            encode_frame(Frame(MsgType.KEY_CONFIRM, digest=b"short"))


class TestStateMachine:
    def test_phases_advance_in_order(self):
        state = SessionState(role=Role.ALICE)
        for phase in (Phase.QUANTUM_EXCHANGE, Phase.SIFTING,
                      Phase.POST_SELECTION, Phase.ESTIMATION,
                      Phase.RECONCILIATION, Phase.AMPLIFICATION, Phase.DONE):
            state.advance(phase)
        assert state.phase == Phase.DONE

    def test_illegal_transition_rejected(self):
        state = SessionState(role=Role.BOB)
        with pytest.raises(ProtocolError):
            state.advance(Phase.RECONCILIATION)

    def test_failed_reachable_from_anywhere(self):
        state = SessionState(role=Role.BOB)
        state.advance(Phase.QUANTUM_EXCHANGE)
        state.advance(Phase.FAILED)
        assert state.phase == Phase.FAILED


class TestSession:
    def test_noiseless_keys_identical_and_qber_zero(self):
        out = run_pair(noiseless_cfg())
        ra, rb = out[Role.ALICE], out[Role.BOB]
        assert ra.report.qber == 0.0
        assert rb.report.qber == 0.0
        assert ra.key_bits.size > 0
        assert np.array_equal(ra.key_bits, rb.key_bits)
        assert ra.state.phase == Phase.DONE
        assert rb.state.phase == Phase.DONE

    def test_default_noise_keys_identical(self):
        out = run_pair(small_cfg())
        ra, rb = out[Role.ALICE], out[Role.BOB]
        assert np.array_equal(ra.key_bits, rb.key_bits)
        assert ra.report == rb.report

    def test_matches_in_process_distillation(self):
        cfg = small_cfg()
        out = run_pair(cfg)
        local = distill_block(cfg, 0, DriftState(cfg.drift.efficiency_mean,
                                                 cfg.drift.phase_mean_rad))
        assert out[Role.ALICE].report == local.report
        assert np.array_equal(out[Role.ALICE].key_bits, local.key_bits)

    def test_blocks_differ_by_id(self):
        cfg = noiseless_cfg()
        a = run_pair(cfg, block_id=0)[Role.ALICE]
        b = run_pair(cfg, block_id=1)[Role.ALICE]
        assert a.key_bits.size > 0
        assert b.key_bits.size > 0
        assert not np.array_equal(a.key_bits, b.key_bits)

    def test_transcripts_deterministic(self, tmp_path):
        cfg = small_cfg()
        captures = []
        for run in range(2):
            pa = tmp_path / f"alice{run}.bin"
            pb = tmp_path / f"bob{run}.bin"
            run_pair(cfg, transports=loopback_pair(transcripts=(pa, pb)))
            captures.append((pa.read_bytes(), pb.read_bytes()))
        assert captures[0] == captures[1]
        assert len(captures[0][0]) > 0


class _CorruptingTransport(proto.StreamTransport):
    """Flips the type byte of the first outgoing frame to an unknown value."""

    def __init__(self, sock, timeout_s):
        super().__init__(sock, timeout_s)
        self.armed = True

    def send_frame(self, frame):
        data = encode_frame(frame)
        if self.armed and frame.msg_type != MsgType.ABORT:
            data = data[:4] + b"\x7f" + data[5:]
            self.armed = False
        self.sock.sendall(data)


class TestFaultInjection:
    def test_corrupted_frame_fails_both_ends_matching_reason(self):
        import socket
        sa, sb = socket.socketpair()
        ta = _CorruptingTransport(sa, 5.0)
        tb = proto.StreamTransport(sb, 5.0)
        out = run_pair(small_cfg(), transports=(ta, tb))
        assert isinstance(out[Role.ALICE], SessionFailed)
        assert isinstance(out[Role.BOB], SessionFailed)
        assert out[Role.BOB].reason == AbortReason.DECODE_ERROR
        assert out[Role.ALICE].reason == out[Role.BOB].reason

    def test_unexpected_message_aborts_peer(self):
        ta, tb = loopback_pair(timeout_s=5.0)
        cfg = small_cfg()
        result = {}

        def bob():
            try:
                run_session(Role.BOB, tb, cfg)
            except SessionFailed as exc:
                result["bob"] = exc

        t = threading.Thread(target=bob)
        t.start()
        # consume Bob's opening frames, then answer out of order
        for _ in range(3):
            ta.recv_frame()
        ta.send_frame(Frame(MsgType.QBER_REPORT, value=0.1))
        abort = ta.recv_frame()
        t.join()
        ta.close()
        tb.close()
        assert abort.msg_type == MsgType.ABORT
        assert abort.reason == int(AbortReason.UNEXPECTED_MESSAGE)
        assert result["bob"].reason == AbortReason.UNEXPECTED_MESSAGE

    def test_timeout_fails_session(self):
        ta, tb = loopback_pair(timeout_s=0.2)
        cfg = SystemConfig(block_size_pulses=5000)
        with pytest.raises(SessionFailed) as exc_info:
            run_session(Role.BOB, tb, cfg)  # nobody answers
        assert exc_info.value.reason == AbortReason.TIMEOUT
        ta.close()
        tb.close()

    def test_closed_peer_fails_session(self):
        ta, tb = loopback_pair(timeout_s=5.0)
        ta.close()
        with pytest.raises(SessionFailed) as exc_info:
            run_session(Role.ALICE, tb, SystemConfig(block_size_pulses=5000))
        assert exc_info.value.reason == AbortReason.TRANSPORT_CLOSED
        tb.close()
