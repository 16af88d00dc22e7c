"""Key distillation: sifting, post-selection, error estimation, Cascade
reverse reconciliation, Toeplitz privacy amplification and the secret-key
rate arithmetic under a collective beam-splitter-attack bound.

Bit conventions (pinned for interoperability):
  * Alice's bit for a pulse depends on Bob's announced quadrature: with the
    four states at phases (2k+1)*pi/4, the Q-quadrature sign is +1 for
    k in {0, 3} and the P-quadrature sign is +1 for k in {0, 1};
    alice_bit = (sign + 1) / 2.
  * bob_bit = 1 iff the homodyne outcome is positive.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate
from scipy.signal import fftconvolve

from .physics import PulseBatch
from .quantum import CoherentStateEnsemble, binary_entropy, holevo_bound

__all__ = [
    "SiftedFrame",
    "KeySessionReport",
    "ReconciliationError",
    "CascadePermutations",
    "LocalParityOracle",
    "DELTA_FIN_BITS",
    "KEY_FILE_MAGIC",
    "sift",
    "sift_alice_bits",
    "post_select",
    "qber_estimate",
    "expected_qber",
    "cascade_block_size",
    "cascade_reconcile",
    "toeplitz_hash",
    "secret_fraction",
    "final_key_length",
    "compute_skr",
    "write_key_file",
    "read_key_file",
]

DELTA_FIN_BITS = 100        # flat finite-size margin per block
KEY_FILE_MAGIC = b"CVQK"
KEY_FILE_VERSION = 1

# Q-sign is +1 for phase indices {0, 3}; P-sign is +1 for {0, 1}.
_ALICE_BIT_TABLE = np.array([[1, 0, 0, 1],   # quadrature Q
                             [1, 1, 0, 0]],  # quadrature P
                            dtype=np.uint8)


class ReconciliationError(RuntimeError):
    """Cascade could not converge (error rate too high)."""


@dataclass
class SiftedFrame:
    alice_bits: np.ndarray        # uint8
    bob_bits: np.ndarray          # uint8
    postselect_mask: np.ndarray   # bool, True = kept
    abs_outcomes_snu: np.ndarray  # float64
    disclosed_count: int = 0

    def __post_init__(self):
        n = len(self.alice_bits)
        if not (len(self.bob_bits) == len(self.postselect_mask)
                == len(self.abs_outcomes_snu) == n):
            raise ValueError("frame arrays must have equal length")
        if self.disclosed_count > n:
            raise ValueError("disclosed_count exceeds frame length")

    def __len__(self) -> int:
        return len(self.alice_bits)

    @property
    def kept_indices(self) -> np.ndarray:
        return np.nonzero(self.postselect_mask)[0]


@dataclass(frozen=True)
class KeySessionReport:
    n_pulses: int
    p_post: float
    qber: float
    i_ab_bits: float
    chi_e_bits: float
    leak_bits: int
    final_key_bits: int
    skr_bits_per_s: float


def sift_alice_bits(phase_index: np.ndarray,
                    quadrature: np.ndarray) -> np.ndarray:
    """Alice's key bit per pulse given Bob's announced quadrature."""
    return _ALICE_BIT_TABLE[np.asarray(quadrature, dtype=np.int8),
                            np.asarray(phase_index, dtype=np.int8)]


def sift(batch: PulseBatch) -> SiftedFrame:
    """Turn a signal batch into aligned bit strings.

    No pulses are discarded here; the post-selection mask starts all-kept.
    """
    if batch.blocked:
        raise ValueError("cannot sift a blocked calibration batch")
    alice = sift_alice_bits(batch.alice_phase_index, batch.bob_quadrature)
    bob = (batch.outcome_snu > 0.0).astype(np.uint8)
    mask = np.ones(batch.count, dtype=bool)
    return SiftedFrame(alice, bob, mask, np.abs(batch.outcome_snu))


def post_select(frame: SiftedFrame, x_th_snu: float) -> SiftedFrame:
    """Keep only pulses whose |outcome| reaches the threshold."""
    if x_th_snu < 0.0:
        raise ValueError(f"threshold must be >= 0, got {x_th_snu!r}")
    mask = frame.postselect_mask & (frame.abs_outcomes_snu >= x_th_snu)
    return replace(frame, postselect_mask=mask)


def qber_estimate(frame: SiftedFrame, sample_fraction: float,
                  rng: np.random.Generator) -> tuple[float, SiftedFrame]:
    """Disclose a pseudo-random subset of the kept bits and compare.

    The disclosed positions are removed from the key material and counted
    in disclosed_count.  Returns (qber, reduced frame).
    """
    if not 0.0 < sample_fraction < 1.0:
        raise ValueError(f"sample_fraction {sample_fraction!r} outside (0, 1)")
    kept = frame.kept_indices
    if kept.size == 0:
        raise ValueError("no kept bits to sample from")
    m = max(1, int(round(sample_fraction * kept.size)))
    sample = rng.choice(kept, size=m, replace=False)
    sample.sort()
    return apply_disclosure(frame, sample)


def apply_disclosure(frame: SiftedFrame,
                     sample: np.ndarray) -> tuple[float, SiftedFrame]:
    """Compare bits at the given (kept) positions and drop them."""
    mismatches = int(np.sum(frame.alice_bits[sample] != frame.bob_bits[sample]))
    qber = mismatches / len(sample)
    mask = frame.postselect_mask.copy()
    mask[sample] = False
    reduced = replace(frame, postselect_mask=mask,
                      disclosed_count=frame.disclosed_count + len(sample))
    return qber, reduced


def expected_qber(m_snu: float, var_snu: float, x_th: float) -> float:
    """Sign-decision error probability between N(+m, var) and N(-m, var)
    conditioned on |outcome| >= x_th, by adaptive quadrature."""
    if var_snu <= 0.0:
        raise ValueError(f"variance must be > 0, got {var_snu!r}")
    if m_snu == 0.0:
        return 0.5
    m = abs(m_snu)
    sig = math.sqrt(var_snu)

    def tail_density(t):
        # density of |x| for the symmetric +/-m mixture, t >= 0
        return (math.exp(-0.5 * ((t - m) / sig) ** 2)
                + math.exp(-0.5 * ((t + m) / sig) ** 2)) / (sig * math.sqrt(2 * math.pi))

    def err_weighted(t):
        z = 2.0 * m * t / var_snu
        if z > 700.0:
            return 0.0
        return tail_density(t) / (1.0 + math.exp(z))

    upper = max(x_th, m) + 12.0 * sig
    num, _ = integrate.quad(err_weighted, x_th, upper, epsabs=1e-12, limit=200)
    den, _ = integrate.quad(tail_density, x_th, upper, epsabs=1e-12, limit=200)
    if den <= 0.0:
        return 0.5
    return min(0.5, num / den)


def cascade_block_size(qber: float, n: int) -> int:
    """First-pass block size ceil(0.73 / qber), clamped into [2, n]."""
    if qber <= 0.0:
        return n
    return max(2, min(n, math.ceil(0.73 / qber)))


class CascadePermutations:
    """Per-pass shuffles shared by both endpoints, derived from a seed.

    Pass 0 uses the identity; later passes use seeded permutations.  A
    block in pass p is addressed as a half-open range in that pass's
    permuted order; ranges are flattened into a single virtual index space
    (pass p occupies [p*n, (p+1)*n)) so one (start, end) pair identifies
    any block on the wire.
    """

    def __init__(self, n: int, passes: int, seed: int):
        rng = np.random.default_rng(seed)
        self.n = n
        self.passes = passes
        self.perm = [np.arange(n)]
        for _ in range(1, passes):
            self.perm.append(rng.permutation(n))
        # position of each original index within each pass's order
        self.pos = []
        for p in range(passes):
            inv = np.empty(n, dtype=np.int64)
            inv[self.perm[p]] = np.arange(n)
            self.pos.append(inv)

    def flatten(self, pass_index: int, start: int, end: int) -> tuple[int, int]:
        return pass_index * self.n + start, pass_index * self.n + end

    def unflatten(self, vstart: int, vend: int) -> tuple[int, int, int]:
        p = vstart // self.n
        if vend - vstart > self.n or (vend - 1) // self.n != p:
            raise ValueError("parity range crosses a pass boundary")
        return p, vstart - p * self.n, vend - p * self.n


class LocalParityOracle:
    """Serves Bob's block parities for in-process reconciliation."""

    def __init__(self, bob_bits: np.ndarray, perms: CascadePermutations):
        self.bits = np.asarray(bob_bits, dtype=np.uint8)
        self.perms = perms
        self.query_count = 0

    def parity(self, pass_index: int, start: int, end: int) -> int:
        self.query_count += 1
        idx = self.perms.perm[pass_index][start:end]
        return int(np.bitwise_xor.reduce(self.bits[idx]))


def cascade_reconcile(alice_bits: np.ndarray, oracle, passes: int,
                      initial_block: int, perms: CascadePermutations,
                      ) -> tuple[np.ndarray, int]:
    """Cascade with binary search and back-propagation.

    Reverse reconciliation: Alice corrects her string toward Bob's, whose
    parities are served by `oracle` (never modified).  Returns the
    corrected string and the number of parity bits disclosed (= oracle
    queries made).
    """
    if passes < 2:
        raise ValueError(f"cascade needs >= 2 passes, got {passes}")
    n = len(alice_bits)
    if n == 0:
        raise ValueError("empty frame")
    if initial_block < 2:
        raise ValueError(f"initial block size must be >= 2, got {initial_block}")
    bits = np.array(alice_bits, dtype=np.uint8)
    block_sizes = [min(n, initial_block << p) for p in range(passes)]
    leak = 0

    def local_parity(p, a, b):
        idx = perms.perm[p][a:b]
        return int(np.bitwise_xor.reduce(bits[idx]))

    def query(p, a, b):
        nonlocal leak
        leak += 1
        return oracle.parity(p, a, b)

    def binary_correct(p, a, b):
        while b - a > 1:
            mid = (a + b) // 2
            if local_parity(p, a, mid) != query(p, a, mid):
                b = mid
            else:
                a = mid
        idx = int(perms.perm[p][a])
        bits[idx] ^= 1
        return idx

    def fix_block(p, blk, visible_passes):
        k = block_sizes[p]
        a, b = blk * k, min((blk + 1) * k, n)
        if local_parity(p, a, b) == query(p, a, b):
            return
        flipped = binary_correct(p, a, b)
        for p2 in visible_passes:
            if p2 != p:
                pos = int(perms.pos[p2][flipped])
                pending.append((p2, pos // block_sizes[p2]))

    for p in range(passes):
        visible = list(range(p + 1))
        pending: list[tuple[int, int]] = []
        for blk in range(math.ceil(n / block_sizes[p])):
            fix_block(p, blk, visible)
            while pending:
                p2, blk2 = pending.pop()
                fix_block(p2, blk2, visible)
    return bits, leak


def toeplitz_hash(bits: np.ndarray, seed: int, out_len: int) -> np.ndarray:
    """Binary Toeplitz hashing over GF(2).

    The (out_len + n - 1) diagonal bits (first column followed by the
    remainder of the first row) are drawn from a PCG64 generator seeded
    with `seed`; the product is evaluated with an FFT convolution.
    """
    x = np.asarray(bits, dtype=np.uint8)
    n = x.size
    if out_len > n:
        raise ValueError(f"out_len {out_len} exceeds input length {n}")
    if out_len <= 0:
        return np.zeros(0, dtype=np.uint8)
    diag = np.random.Generator(np.random.PCG64(seed)).integers(
        0, 2, size=out_len + n - 1, dtype=np.uint8)
    # T[i, j] = e[i - j + n - 1] with e = reversed first row ++ first column
    e = np.concatenate([diag[out_len:][::-1], diag[:out_len]]).astype(float)
    conv = fftconvolve(e, x.astype(float))
    return (np.rint(conv[n - 1:n - 1 + out_len]).astype(np.int64) % 2).astype(np.uint8)


def secret_fraction(qber: float, alpha: float,
                    transmittance: float) -> tuple[float, float]:
    """(I_AB, chi_E) in bits per post-selected pulse.

    I_AB = 1 - H2(qber).  Eve's information is bounded by the Holevo
    quantity of the beam-splitter ensemble {sqrt(1-T) * alpha * e^{i(2k+1)pi/4}},
    equiprobable, ignoring post-selection conditioning (the bound is
    evaluated on the unconditioned ensemble).
    """
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError(f"transmittance {transmittance!r} outside [0, 1]")
    i_ab = 1.0 - binary_entropy(qber)
    eve_modulus = math.sqrt(1.0 - transmittance) * alpha
    if eve_modulus == 0.0:
        chi_e = 0.0
    else:
        chi_e = holevo_bound(CoherentStateEnsemble.four_state(eve_modulus))
    return i_ab, chi_e


def final_key_length(n_post_selected: int, i_ab: float, chi_e: float,
                     leak_bits: int, disclosed_count: int) -> int:
    """Secret bits extractable from one block, floored at zero."""
    budget = (n_post_selected * max(0.0, i_ab - chi_e)
              - leak_bits - disclosed_count - DELTA_FIN_BITS)
    return max(0, int(math.floor(budget)))


def compute_skr(n_pulses: int, rep_rate_hz: float, f_cal: float,
                p_post: float, i_ab: float, chi_e: float,
                leak_bits: int, disclosed_count: int) -> float:
    """Secret key rate in bits per second for one block.

    skr = rep * (1 - f_cal) * p_post * max(0, i_ab - chi_e)
          - (leak + disclosed + Delta_fin) / block_duration, floored at 0.
    """
    duration_s = n_pulses / rep_rate_hz
    gross = rep_rate_hz * (1.0 - f_cal) * p_post * max(0.0, i_ab - chi_e)
    cost = (leak_bits + disclosed_count + DELTA_FIN_BITS) / duration_s
    return max(0.0, gross - cost)


def write_key_file(path, key_bits: np.ndarray) -> None:
    """Binary key file: 16-byte header (magic 'CVQK', version u8, reserved,
    bit length as u64 big-endian) followed by the packed key."""
    key_bits = np.asarray(key_bits, dtype=np.uint8)
    header = KEY_FILE_MAGIC + struct.pack(">B3xQ", KEY_FILE_VERSION,
                                          key_bits.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.packbits(key_bits).tobytes())


def read_key_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:4] != KEY_FILE_MAGIC:
            raise ValueError("not a key file")
        version, nbits = struct.unpack(">B3xQ", header[4:])
        if version != KEY_FILE_VERSION:
            raise ValueError(f"unsupported key file version {version}")
        packed = np.frombuffer(fh.read(), dtype=np.uint8)
    return np.unpackbits(packed)[:nbits]
