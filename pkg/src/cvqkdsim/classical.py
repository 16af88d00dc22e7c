"""The classical side of the WDM link: PRBS15 pattern source and a
mid-bit-sampled NRZ eye-opening metric for the 12.5 Gbit/s OOK channels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Prbs15State",
    "EyeReport",
    "PRBS15_PERIOD",
    "prbs15_next",
    "prbs15_sequence",
    "simulate_ook_link",
]

PRBS15_PERIOD = 2 ** 15 - 1
_REG_MASK = 0x7FFF


@dataclass(frozen=True)
class Prbs15State:
    """15-bit LFSR register for the x^15 + x^14 + 1 sequence."""

    register: int = 0x0001

    def __post_init__(self):
        if not 0 < self.register <= _REG_MASK:
            raise ValueError(f"register {self.register:#x} outside 1..0x7fff")


def prbs15_next(state: Prbs15State) -> tuple[int, Prbs15State]:
    """Advance the LFSR one step; returns (output bit, new state).

    Fibonacci form with feedback from stages 15 and 14; the output is the
    low tap of the register.
    """
    reg = state.register
    feedback = ((reg >> 14) ^ (reg >> 13)) & 1
    reg = ((reg << 1) | feedback) & _REG_MASK
    return feedback, Prbs15State(reg)


def prbs15_sequence(n: int, seed: int = 0x0001) -> np.ndarray:
    """First `n` output bits starting from `seed`."""
    state = Prbs15State(seed)
    out = np.empty(n, dtype=np.uint8)
    for i in range(n):
        out[i], state = prbs15_next(state)
    return out


@dataclass(frozen=True)
class EyeReport:
    """Level statistics of mid-bit samples after the link.

    eye_opening = max(0, (mu1 - mu0 - 6*sigma) / (mu1 - mu0)).
    """

    eye_opening: float
    level_one_mean: float
    level_zero_mean: float
    noise_sigma: float


def simulate_ook_link(bits, snr_db: float, samples_per_bit: int,
                      rng: np.random.Generator,
                      cvqkd_on: bool = False) -> EyeReport:
    """NRZ OOK over an AWGN link, reported as mid-bit level statistics.

    snr_db sets the swing-to-noise ratio: sigma = (mu1 - mu0) / 10^(snr/20).
    The co-propagating quantum channel adds no measurable noise, so the
    report does not depend on `cvqkd_on`; the flag exists so callers can
    tag their output rows.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size == 0:
        raise ValueError("bit sequence must be nonempty")
    if samples_per_bit < 4:
        raise ValueError(f"samples_per_bit must be >= 4, got {samples_per_bit}")
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValueError(f"invalid snr_db {snr_db!r}")

    swing = 1.0
    sigma = 0.0 if snr_db == math.inf else swing / (10.0 ** (snr_db / 20.0))
    waveform = np.repeat(bits.astype(float), samples_per_bit)
    if sigma > 0.0:
        waveform = waveform + sigma * rng.standard_normal(waveform.size)

    mid = waveform[samples_per_bit // 2::samples_per_bit]
    ones = mid[bits == 1]
    zeros = mid[bits == 0]
    mu1 = float(np.mean(ones)) if ones.size else 1.0
    mu0 = float(np.mean(zeros)) if zeros.size else 0.0
    resid = np.concatenate([ones - mu1, zeros - mu0])
    sigma_hat = float(np.std(resid)) if resid.size > 1 else 0.0

    span = mu1 - mu0
    opening = max(0.0, (span - 6.0 * sigma_hat) / span) if span > 0.0 else 0.0
    return EyeReport(eye_opening=opening, level_one_mean=mu1,
                     level_zero_mean=mu0, noise_sigma=sigma_hat)
