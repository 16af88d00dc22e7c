"""Classical-channel protocol between Alice and Bob.

Length-prefixed binary frames over any reliable ordered byte stream:

    [4 bytes  payload length, big-endian]
    [1 byte   message type]
    [N bytes  payload]

All integers on the wire are big-endian.  Packed bit fields put pulse 0 in
the most significant bit of the first byte.  The quantum exchange itself is
simulated locally on both endpoints from the shared config seed, so no
quantum data travels over this channel.
"""

from __future__ import annotations

import enum
import hashlib
import math
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from . import postprocess as pp
from .physics import CalibrationError, DriftState, fiber_transmittance
from .pipeline import simulate_quantum_exchange

__all__ = [
    "MsgType",
    "AbortReason",
    "Frame",
    "ProtocolError",
    "FrameDecodeError",
    "SessionFailed",
    "Role",
    "Phase",
    "SessionState",
    "SessionResult",
    "StreamTransport",
    "loopback_pair",
    "encode_frame",
    "decode_frame",
    "run_session",
]

MAX_PAYLOAD = 2 ** 32 - 1
HEADER_SIZE = 5
DEFAULT_TIMEOUT_S = 30.0


class MsgType(enum.IntEnum):
    BASIS_ANNOUNCE = 0x01
    POSTSELECT_MASK = 0x02
    SAMPLE_INDICES = 0x03
    SAMPLE_BITS = 0x04
    QBER_REPORT = 0x05
    PARITY_REQ = 0x06
    PARITY_RSP = 0x07
    HASH_SEED = 0x08
    KEY_CONFIRM = 0x09
    ABORT = 0x0A


class AbortReason(enum.IntEnum):
    UNEXPECTED_MESSAGE = 1
    DECODE_ERROR = 2
    TIMEOUT = 3
    KEY_MISMATCH = 4
    CALIBRATION_FAILED = 5
    TRANSPORT_CLOSED = 6


class ProtocolError(RuntimeError):
    pass


class FrameDecodeError(ProtocolError):
    pass


class SessionFailed(ProtocolError):
    def __init__(self, reason: AbortReason, detail: str = ""):
        super().__init__(f"session failed: {reason.name} {detail}".strip())
        self.reason = reason


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def _unpack_bits(payload: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(payload, dtype=np.uint8))


@dataclass
class Frame:
    """A decoded wire message: its type plus the parsed fields.

    Bit-array payloads come back padded to a whole number of bytes; the
    consumer truncates to the pulse count it already knows.
    """

    msg_type: MsgType
    bits: np.ndarray | None = None        # BASIS_ANNOUNCE / POSTSELECT_MASK / SAMPLE_BITS
    indices: np.ndarray | None = None     # SAMPLE_INDICES
    value: float | None = None            # QBER_REPORT
    start: int | None = None              # PARITY_REQ
    end: int | None = None
    parity: int | None = None             # PARITY_RSP
    seed: int | None = None               # HASH_SEED
    out_len: int | None = None
    digest: bytes | None = None           # KEY_CONFIRM
    reason: int | None = None             # ABORT

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        if self.msg_type != other.msg_type:
            return False
        for name in ("value", "start", "end", "parity", "seed", "out_len",
                     "digest", "reason"):
            if getattr(self, name) != getattr(other, name):
                return False
        for name in ("bits", "indices"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def encode_frame(frame: Frame) -> bytes:
    t = MsgType(frame.msg_type)
    if t in (MsgType.BASIS_ANNOUNCE, MsgType.POSTSELECT_MASK, MsgType.SAMPLE_BITS):
        payload = _pack_bits(frame.bits)
    elif t == MsgType.SAMPLE_INDICES:
        idx = np.asarray(frame.indices, dtype=">u4")
        payload = struct.pack(">I", idx.size) + idx.tobytes()
    elif t == MsgType.QBER_REPORT:
        payload = struct.pack(">d", frame.value)
    elif t == MsgType.PARITY_REQ:
        payload = struct.pack(">II", frame.start, frame.end)
    elif t == MsgType.PARITY_RSP:
        payload = struct.pack(">B", frame.parity & 1)
    elif t == MsgType.HASH_SEED:
        payload = struct.pack(">QI", frame.seed, frame.out_len)
    elif t == MsgType.KEY_CONFIRM:
        if len(frame.digest) != 32:
            raise ProtocolError("KEY_CONFIRM digest must be 32 bytes")
        payload = bytes(frame.digest)
    elif t == MsgType.ABORT:
        payload = struct.pack(">H", frame.reason)
    else:  # pragma: no cover - enum is exhaustive
        raise ProtocolError(f"unencodable message type {t!r}")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError("payload too large")
    return struct.pack(">IB", len(payload), t) + payload


def decode_frame(data: bytes) -> Frame:
    """Decode one complete frame (header + payload)."""
    if len(data) < HEADER_SIZE:
        raise FrameDecodeError("truncated header")
    length, raw_type = struct.unpack(">IB", data[:HEADER_SIZE])
    payload = data[HEADER_SIZE:]
    if len(payload) != length:
        raise FrameDecodeError(
            f"length mismatch: header says {length}, got {len(payload)}")
    try:
        t = MsgType(raw_type)
    except ValueError:
        raise FrameDecodeError(f"unknown message type {raw_type:#04x}")
    try:
        if t in (MsgType.BASIS_ANNOUNCE, MsgType.POSTSELECT_MASK, MsgType.SAMPLE_BITS):
            return Frame(t, bits=_unpack_bits(payload))
        if t == MsgType.SAMPLE_INDICES:
            (count,) = struct.unpack(">I", payload[:4])
            idx = np.frombuffer(payload[4:], dtype=">u4")
            if idx.size != count:
                raise FrameDecodeError("index count mismatch")
            return Frame(t, indices=idx.astype(np.int64))
        if t == MsgType.QBER_REPORT:
            return Frame(t, value=struct.unpack(">d", payload)[0])
        if t == MsgType.PARITY_REQ:
            start, end = struct.unpack(">II", payload)
            return Frame(t, start=start, end=end)
        if t == MsgType.PARITY_RSP:
            return Frame(t, parity=payload[0] & 1)
        if t == MsgType.HASH_SEED:
            seed, out_len = struct.unpack(">QI", payload)
            return Frame(t, seed=seed, out_len=out_len)
        if t == MsgType.KEY_CONFIRM:
            if len(payload) != 32:
                raise FrameDecodeError("KEY_CONFIRM payload must be 32 bytes")
            return Frame(t, digest=bytes(payload))
        if t == MsgType.ABORT:
            return Frame(t, reason=struct.unpack(">H", payload)[0])
    except struct.error as exc:
        raise FrameDecodeError(str(exc))
    raise FrameDecodeError(f"unhandled message type {t!r}")  # pragma: no cover


class StreamTransport:
    """Blocking framed I/O over a socket-like object, with an optional
    transcript file recording every frame in endpoint event order."""

    def __init__(self, sock, timeout_s: float = DEFAULT_TIMEOUT_S,
                 transcript_path=None):
        self.sock = sock
        self.sock.settimeout(timeout_s)
        self._transcript = open(transcript_path, "wb") if transcript_path else None

    def send_frame(self, frame: Frame) -> None:
        data = encode_frame(frame)
        if self._transcript:
            self._transcript.write(data)
        self.sock.sendall(data)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise SessionFailed(AbortReason.TRANSPORT_CLOSED,
                                    "peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def recv_frame(self) -> Frame:
        try:
            header = self._recv_exact(HEADER_SIZE)
            length, _ = struct.unpack(">IB", header)
            payload = self._recv_exact(length)
        except socket.timeout:
            raise SessionFailed(AbortReason.TIMEOUT, "receive timed out")
        data = header + payload
        if self._transcript:
            self._transcript.write(data)
        return decode_frame(data)

    def close(self) -> None:
        if self._transcript:
            self._transcript.close()
            self._transcript = None
        self.sock.close()


def loopback_pair(timeout_s: float = DEFAULT_TIMEOUT_S,
                  transcripts: tuple | None = None):
    """In-process transport pair (Alice end, Bob end)."""
    a, b = socket.socketpair()
    ta = StreamTransport(a, timeout_s, transcripts[0] if transcripts else None)
    tb = StreamTransport(b, timeout_s, transcripts[1] if transcripts else None)
    return ta, tb


class Role(enum.Enum):
    ALICE = "alice"
    BOB = "bob"


class Phase(enum.Enum):
    IDLE = "idle"
    QUANTUM_EXCHANGE = "quantum_exchange"
    SIFTING = "sifting"
    POST_SELECTION = "post_selection"
    ESTIMATION = "estimation"
    RECONCILIATION = "reconciliation"
    AMPLIFICATION = "amplification"
    DONE = "done"
    FAILED = "failed"


_PHASE_ORDER = [Phase.IDLE, Phase.QUANTUM_EXCHANGE, Phase.SIFTING,
                Phase.POST_SELECTION, Phase.ESTIMATION, Phase.RECONCILIATION,
                Phase.AMPLIFICATION, Phase.DONE]


@dataclass
class SessionState:
    role: Role
    phase: Phase = Phase.IDLE
    block_id: int = 0

    def advance(self, new_phase: Phase) -> None:
        if new_phase == Phase.FAILED:
            self.phase = new_phase
            return
        if _PHASE_ORDER.index(new_phase) != _PHASE_ORDER.index(self.phase) + 1:
            raise ProtocolError(
                f"illegal phase transition {self.phase} -> {new_phase}")
        self.phase = new_phase


@dataclass
class SessionResult:
    state: SessionState
    report: pp.KeySessionReport
    key_bits: np.ndarray


class _SessionDriver:
    def __init__(self, role: Role, transport: StreamTransport, cfg,
                 drift: DriftState | None, block_id: int, n_pulses: int | None):
        self.role = role
        self.transport = transport
        self.cfg = cfg
        self.drift = drift if drift is not None else DriftState(
            cfg.drift.efficiency_mean, cfg.drift.phase_mean_rad)
        self.state = SessionState(role=role, block_id=block_id)
        self.n_pulses = n_pulses if n_pulses is not None else cfg.block_size_pulses

    def fail(self, reason: AbortReason, detail: str = "",
             notify: bool = True) -> SessionFailed:
        if notify:
            try:
                self.transport.send_frame(Frame(MsgType.ABORT, reason=int(reason)))
            except OSError:
                pass
        self.state.advance(Phase.FAILED)
        return SessionFailed(reason, detail)

    def expect(self, msg_type: MsgType) -> Frame:
        try:
            frame = self.transport.recv_frame()
        except FrameDecodeError as exc:
            raise self.fail(AbortReason.DECODE_ERROR, str(exc))
        except SessionFailed as exc:
            raise self.fail(exc.reason, str(exc), notify=exc.reason == AbortReason.TIMEOUT)
        if frame.msg_type == MsgType.ABORT:
            raise self.fail(AbortReason(frame.reason), "peer aborted", notify=False)
        if frame.msg_type != msg_type:
            raise self.fail(AbortReason.UNEXPECTED_MESSAGE,
                            f"expected {msg_type.name}, got {frame.msg_type.name}")
        return frame


def _derive_seed(cfg, block_id: int, tag: int) -> int:
    ss = np.random.SeedSequence((cfg.seed, block_id, tag))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run_session(role: Role, transport: StreamTransport, cfg,
                drift: DriftState | None = None, block_id: int = 0,
                n_pulses: int | None = None) -> SessionResult:
    """Drive one key-distillation block end to end over `transport`.

    Both endpoints reconstruct the quantum exchange from the shared config
    seed; each side only ever uses the data its role would physically hold.
    Raises SessionFailed (after emitting ABORT) on any protocol violation;
    on success both ends hold bit-identical keys, checked via KEY_CONFIRM.
    """
    d = _SessionDriver(role, transport, cfg, drift, block_id, n_pulses)
    st = d.state

    # Quantum exchange, simulated identically on both ends.
    st.advance(Phase.QUANTUM_EXCHANGE)
    try:
        phys = simulate_quantum_exchange(cfg, block_id, d.drift, d.n_pulses)
    except CalibrationError as exc:
        raise d.fail(AbortReason.CALIBRATION_FAILED, str(exc))
    batch = phys.batch
    n_sig = batch.count

    # Sifting: Bob announces his measured quadratures.
    st.advance(Phase.SIFTING)
    if role == Role.BOB:
        d.transport.send_frame(Frame(MsgType.BASIS_ANNOUNCE,
                                     bits=batch.bob_quadrature))
        quadratures = batch.bob_quadrature
    else:
        frame = d.expect(MsgType.BASIS_ANNOUNCE)
        quadratures = frame.bits[:n_sig].astype(np.int8)
    alice_bits = pp.sift_alice_bits(batch.alice_phase_index, quadratures)
    bob_bits = (batch.outcome_snu > 0.0).astype(np.uint8)

    # Post-selection: Bob sends the keep mask.
    st.advance(Phase.POST_SELECTION)
    if role == Role.BOB:
        mask = np.abs(batch.outcome_snu) >= cfg.x_th_snu
        d.transport.send_frame(Frame(MsgType.POSTSELECT_MASK,
                                     bits=mask.astype(np.uint8)))
    else:
        frame = d.expect(MsgType.POSTSELECT_MASK)
        mask = frame.bits[:n_sig].astype(bool)
    p_post = float(np.mean(mask))

    # Error estimation on a disclosed pseudo-random subset.
    st.advance(Phase.ESTIMATION)
    if role == Role.BOB:
        kept = np.nonzero(mask)[0]
        rng = np.random.default_rng(_derive_seed(cfg, block_id, 1))
        m = max(1, int(round(cfg.sample_fraction * kept.size)))
        sample = np.sort(rng.choice(kept, size=m, replace=False))
        d.transport.send_frame(Frame(MsgType.SAMPLE_INDICES, indices=sample))
        frame = d.expect(MsgType.SAMPLE_BITS)
        peer_sample_bits = frame.bits[:m]
        qber = float(np.mean(peer_sample_bits != bob_bits[sample]))
        d.transport.send_frame(Frame(MsgType.QBER_REPORT, value=qber))
    else:
        frame = d.expect(MsgType.SAMPLE_INDICES)
        sample = frame.indices
        d.transport.send_frame(Frame(MsgType.SAMPLE_BITS,
                                     bits=alice_bits[sample]))
        qber = float(d.expect(MsgType.QBER_REPORT).value)
    mask = mask.copy()
    mask[sample] = False
    disclosed = len(sample)
    kept = np.nonzero(mask)[0]
    n_kept = kept.size

    # Reverse reconciliation: Alice corrects toward Bob over PARITY_REQ/RSP.
    st.advance(Phase.RECONCILIATION)
    perms = pp.CascadePermutations(n_kept, cfg.cascade_passes,
                                   _derive_seed(cfg, block_id, 2))
    k1 = pp.cascade_block_size(max(qber, 1e-3), n_kept)
    if role == Role.ALICE:
        oracle = _RemoteParityOracle(d, perms)
        corrected, leak = pp.cascade_reconcile(alice_bits[kept], oracle,
                                               cfg.cascade_passes, k1, perms)
        d.transport.send_frame(Frame(MsgType.PARITY_REQ, start=0, end=0))
        key_source = corrected
    else:
        leak = _serve_parities(d, bob_bits[kept], perms)
        key_source = bob_bits[kept]

    # Privacy amplification and key confirmation.
    st.advance(Phase.AMPLIFICATION)
    t_chan = fiber_transmittance(cfg.fiber)
    i_ab, chi_e = pp.secret_fraction(qber, cfg.alpha, t_chan)
    if role == Role.BOB:
        out_len = pp.final_key_length(n_kept + disclosed, i_ab, chi_e,
                                      leak, disclosed)
        out_len = min(out_len, n_kept)
        hash_seed = _derive_seed(cfg, block_id, 3)
        d.transport.send_frame(Frame(MsgType.HASH_SEED, seed=hash_seed,
                                     out_len=out_len))
    else:
        frame = d.expect(MsgType.HASH_SEED)
        hash_seed, out_len = frame.seed, frame.out_len
    key = pp.toeplitz_hash(key_source, hash_seed, out_len)
    digest = hashlib.sha256(np.packbits(key).tobytes()).digest()

    if role == Role.BOB:
        d.transport.send_frame(Frame(MsgType.KEY_CONFIRM, digest=digest))
        peer_digest = d.expect(MsgType.KEY_CONFIRM).digest
    else:
        peer_digest = d.expect(MsgType.KEY_CONFIRM).digest
        d.transport.send_frame(Frame(MsgType.KEY_CONFIRM, digest=digest))
    if peer_digest != digest:
        raise d.fail(AbortReason.KEY_MISMATCH, "final keys differ")

    st.advance(Phase.DONE)
    skr = pp.compute_skr(phys.n_pulses_total, cfg.rep_rate_hz, cfg.f_cal,
                         p_post, i_ab, chi_e, leak, disclosed)
    report = pp.KeySessionReport(
        n_pulses=phys.n_pulses_total, p_post=p_post, qber=qber,
        i_ab_bits=i_ab, chi_e_bits=chi_e, leak_bits=leak,
        final_key_bits=int(key.size), skr_bits_per_s=skr)
    return SessionResult(state=st, report=report, key_bits=key)


class _RemoteParityOracle:
    """Alice-side oracle that fetches Bob's parities over the transport.

    Blocks are flattened into the virtual index space of
    CascadePermutations so a single (start, end) pair addresses any block
    of any pass; at most one request is outstanding at a time.
    """

    def __init__(self, driver: _SessionDriver, perms: pp.CascadePermutations):
        self.driver = driver
        self.perms = perms
        self.query_count = 0

    def parity(self, pass_index: int, start: int, end: int) -> int:
        vstart, vend = self.perms.flatten(pass_index, start, end)
        self.driver.transport.send_frame(
            Frame(MsgType.PARITY_REQ, start=vstart, end=vend))
        frame = self.driver.expect(MsgType.PARITY_RSP)
        self.query_count += 1
        return frame.parity


def _serve_parities(driver: _SessionDriver, bob_bits: np.ndarray,
                    perms: pp.CascadePermutations) -> int:
    """Bob-side loop answering parity requests until the (0, 0) sentinel.

    Returns the number of parities disclosed."""
    oracle = pp.LocalParityOracle(bob_bits, perms)
    while True:
        frame = driver.expect(MsgType.PARITY_REQ)
        if frame.start == 0 and frame.end == 0:
            return oracle.query_count
        try:
            p, a, b = perms.unflatten(frame.start, frame.end)
        except ValueError as exc:
            raise driver.fail(AbortReason.UNEXPECTED_MESSAGE, str(exc))
        driver.transport.send_frame(
            Frame(MsgType.PARITY_RSP, parity=oracle.parity(p, a, b)))
