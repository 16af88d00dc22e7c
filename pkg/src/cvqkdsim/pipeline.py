"""Per-block simulation and in-process distillation.

The quantum exchange of a block is reproducible from (config seed,
block id) alone, which is what lets the two protocol endpoints in
protocol.py reconstruct the same physics without quantum data on the
wire.  distill_block() runs the identical distillation chain without a
transport and is what the experiment runners use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import postprocess as pp
from .physics import (
    DriftState,
    PulseBatch,
    calibrate_shot_noise,
    fiber_transmittance,
    prepare_and_measure,
)

__all__ = [
    "BlockPhysics",
    "BlockResult",
    "derive_seed",
    "simulate_quantum_exchange",
    "distill_block",
]


def derive_seed(cfg, block_id: int, tag: int) -> int:
    """Deterministic per-block sub-seed shared by both endpoints."""
    ss = np.random.SeedSequence((cfg.seed, block_id, tag))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class BlockPhysics:
    batch: PulseBatch        # signal frames, outcomes normalized to SNU
    shot_estimate: float     # raw blocked-frame variance estimate
    n_pulses_total: int      # signal + calibration pulses


@dataclass
class BlockResult:
    report: pp.KeySessionReport
    key_bits: np.ndarray
    variance_snu: float      # normalized signal variance (modulation included)
    qber_raw: float          # this block's own sample estimate
    residual_errors: int


def simulate_quantum_exchange(cfg, block_id: int, drift: DriftState,
                              n_pulses: int | None = None) -> BlockPhysics:
    """One block of pulses: blocked calibration frames first, then signal
    frames normalized by the measured shot noise."""
    n_total = n_pulses if n_pulses is not None else cfg.block_size_pulses
    rng = np.random.default_rng(derive_seed(cfg, block_id, 0))
    n_cal = max(1000, int(round(cfg.f_cal * n_total)))
    n_sig = n_total - n_cal
    if n_sig < 1:
        raise ValueError(f"block of {n_total} pulses leaves no signal frames")
    cal = prepare_and_measure(n_cal, cfg, drift, rng, blocked=True)
    shot = calibrate_shot_noise(cal)
    batch = prepare_and_measure(n_sig, cfg, drift, rng)
    batch.outcome_snu /= math.sqrt(shot)
    return BlockPhysics(batch=batch, shot_estimate=shot, n_pulses_total=n_total)


def distill_block(cfg, block_id: int, drift: DriftState,
                  n_pulses: int | None = None,
                  qber_used: float | None = None) -> BlockResult:
    """Full distillation of one block without a transport.

    `qber_used` substitutes a pooled error-rate estimate (e.g. a running
    average maintained by the experiment runner) for this block's own
    noisy sample in the key-length arithmetic; cascade still corrects
    the real errors either way.
    """
    phys = simulate_quantum_exchange(cfg, block_id, drift, n_pulses)
    batch = phys.batch
    variance = float(np.var(batch.outcome_snu))

    frame = pp.sift(batch)
    frame = pp.post_select(frame, cfg.x_th_snu)
    rng = np.random.default_rng(derive_seed(cfg, block_id, 1))
    qber_raw, frame = pp.qber_estimate(frame, cfg.sample_fraction, rng)
    qber = qber_raw if qber_used is None else qber_used

    kept = frame.kept_indices
    alice = frame.alice_bits[kept]
    bob = frame.bob_bits[kept]
    perms = pp.CascadePermutations(kept.size, cfg.cascade_passes,
                                   derive_seed(cfg, block_id, 2))
    oracle = pp.LocalParityOracle(bob, perms)
    k1 = pp.cascade_block_size(max(qber, 1e-3), kept.size)
    corrected, leak = pp.cascade_reconcile(alice, oracle, cfg.cascade_passes,
                                           k1, perms)
    residual = int(np.sum(corrected != bob))

    n_sig = batch.count
    disclosed = frame.disclosed_count
    p_post = (kept.size + disclosed) / n_sig
    i_ab, chi_e = pp.secret_fraction(qber, cfg.alpha,
                                     fiber_transmittance(cfg.fiber))
    out_len = pp.final_key_length(kept.size + disclosed, i_ab, chi_e,
                                  leak, disclosed)
    out_len = min(out_len, kept.size)
    if residual:
        # an uncorrected block yields no usable key
        out_len = 0
    key = pp.toeplitz_hash(bob, derive_seed(cfg, block_id, 3), out_len)

    skr = 0.0 if residual else pp.compute_skr(
        phys.n_pulses_total, cfg.rep_rate_hz, cfg.f_cal, p_post,
        i_ab, chi_e, leak, disclosed)
    report = pp.KeySessionReport(
        n_pulses=phys.n_pulses_total, p_post=p_post, qber=qber,
        i_ab_bits=i_ab, chi_e_bits=chi_e, leak_bits=leak,
        final_key_bits=int(key.size), skr_bits_per_s=skr)
    return BlockResult(report=report, key_bits=key, variance_snu=variance,
                       qber_raw=qber_raw, residual_errors=residual)
