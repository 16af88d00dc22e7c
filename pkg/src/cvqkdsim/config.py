"""System configuration: defaults, the key = value config-file format, and
validation.

The default operating point was fixed by a one-time calibration run so that
the no-WDM secret key rate at the default 10 km link sits inside the
20-50 kbit/s band (see README):

  alpha = 0.68, x_th = 2.7 SNU, sample_fraction = 0.02,
  epsilon_intrinsic = 2e-4 SNU, detector efficiency mean 0.99.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

from .physics import (
    QUANTUM_CHANNEL_INDEX,
    DriftParams,
    FiberSpec,
    WdmChannelSpec,
)

__all__ = [
    "SystemConfig",
    "ConfigError",
    "default_wdm_channels",
    "load_config",
    "parse_config_text",
    "dump_config",
    "SEED_ENV_VAR",
]

SEED_ENV_VAR = "CVQKD_SEED"

SPEED_OF_LIGHT_M_S = 299_792_458.0
QUANTUM_WAVELENGTH_NM = 1549.2
CHANNEL_SPACING_GHZ = 100.0


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"key {key!r}: "
        super().__init__(prefix + message)
        self.line = line
        self.key = key


def default_wdm_channels() -> list[WdmChannelSpec]:
    """Eight channels on a 100 GHz grid with the quantum signal in band 6
    at 1549.2 nm and the classical channels launched at -4.5 dBm."""
    f_quantum_ghz = SPEED_OF_LIGHT_M_S / (QUANTUM_WAVELENGTH_NM * 1e-9) / 1e9
    channels = []
    for idx in range(1, 9):
        f_ghz = f_quantum_ghz + (QUANTUM_CHANNEL_INDEX - idx) * CHANNEL_SPACING_GHZ
        wavelength_nm = SPEED_OF_LIGHT_M_S / (f_ghz * 1e9) * 1e9
        channels.append(WdmChannelSpec(
            index=idx,
            wavelength_nm=round(wavelength_nm, 4),
            launch_power_dbm=-4.5,
            enabled=idx != QUANTUM_CHANNEL_INDEX,
            modulated=True,
        ))
    return channels


@dataclass(frozen=True)
class SystemConfig:
    rep_rate_hz: float = 1.0e7
    alpha: float = 0.68
    epsilon_intrinsic_snu: float = 2.0e-4
    x_th_snu: float = 2.7
    f_cal: float = 0.1
    sample_fraction: float = 0.02
    qber_smoothing: float = 0.05     # EMA weight for the pooled qber estimate
    cascade_passes: int = 4
    block_size_pulses: int = 1_000_000
    seed: int = 12345
    fiber: FiberSpec = field(default_factory=FiberSpec)
    wdm: list[WdmChannelSpec] = field(default_factory=default_wdm_channels)
    drift: DriftParams = field(default_factory=lambda: DriftParams(
        efficiency_mean=0.99,
        efficiency_sigma=2.0e-4,
        phase_sigma=2.0e-4,
        reversion_rate=1.0 / 600.0,
    ))
    # Diagnostic override of the homodyne noise sigma; None in normal runs.
    force_sigma_snu: float | None = None

    def __post_init__(self):
        if self.rep_rate_hz <= 0:
            raise ConfigError("rep_rate_hz must be > 0", key="rep_rate_hz")
        if not 0.0 <= self.f_cal < 1.0:
            raise ConfigError(f"f_cal {self.f_cal!r} outside [0, 1)", key="f_cal")
        if not 0.0 < self.sample_fraction < 1.0:
            raise ConfigError("sample_fraction outside (0, 1)",
                              key="sample_fraction")
        if not 0.0 < self.qber_smoothing <= 1.0:
            raise ConfigError("qber_smoothing outside (0, 1]",
                              key="qber_smoothing")
        if self.alpha < 0.0 or not math.isfinite(self.alpha):
            raise ConfigError("alpha must be finite and >= 0", key="alpha")
        if self.x_th_snu < 0.0:
            raise ConfigError("x_th_snu must be >= 0", key="x_th_snu")
        if self.epsilon_intrinsic_snu < 0.0:
            raise ConfigError("epsilon_intrinsic_snu must be >= 0",
                              key="epsilon_intrinsic_snu")
        if self.cascade_passes < 2:
            raise ConfigError("cascade_passes must be >= 2",
                              key="cascade_passes")
        if self.block_size_pulses < 1000:
            raise ConfigError("block_size_pulses must be >= 1000",
                              key="block_size_pulses")
        quantum = [ch for ch in self.wdm if ch.is_quantum]
        if len(quantum) != 1:
            raise ConfigError("exactly one quantum channel (index 6) required")

    @property
    def classical_channels(self) -> list[WdmChannelSpec]:
        return [ch for ch in self.wdm if not ch.is_quantum]

    def with_wdm_enabled(self, enabled_indices) -> "SystemConfig":
        """Copy with only the listed classical channels enabled."""
        enabled = set(enabled_indices)
        wdm = [replace(ch, enabled=(ch.index in enabled))
               if not ch.is_quantum else ch
               for ch in self.wdm]
        return replace(self, wdm=wdm)


_BOOL_VALUES = {"true": True, "yes": True, "1": True,
                "false": False, "no": False, "0": False}

# key -> (target, attribute, converter); wdm channels are handled separately
def _scalar_fields():
    return {
        "rep_rate_hz": float,
        "alpha": float,
        "epsilon_intrinsic_snu": float,
        "x_th_snu": float,
        "f_cal": float,
        "sample_fraction": float,
        "qber_smoothing": float,
        "cascade_passes": int,
        "block_size_pulses": int,
        "seed": int,
        "force_sigma_snu": float,
        "fiber.length_km": float,
        "fiber.attenuation_db_per_km": float,
        "fiber.raman_coefficient_per_mw_km": float,
        "drift.efficiency_mean": float,
        "drift.efficiency_sigma": float,
        "drift.phase_mean_rad": float,
        "drift.phase_sigma": float,
        "drift.reversion_rate": float,
    }


_WDM_FIELDS = {
    "launch_power_dbm": float,
    "enabled": bool,
    "modulated": bool,
    "wavelength_nm": float,
}


def _convert(raw: str, conv, line: int, key: str):
    if conv is bool:
        try:
            return _BOOL_VALUES[raw.strip().lower()]
        except KeyError:
            raise ConfigError(f"expected a boolean, got {raw!r}", line, key)
    try:
        return conv(raw.strip())
    except ValueError:
        raise ConfigError(f"expected {conv.__name__}, got {raw!r}", line, key)


def parse_config_text(text: str) -> SystemConfig:
    """Parse the line-oriented `key = value` format with dotted section
    keys ('#' starts a comment).  Unknown keys are rejected; missing keys
    take the documented defaults."""
    scalars = _scalar_fields()
    top: dict = {}
    fiber: dict = {}
    drift: dict = {}
    wdm_overrides: dict[int, dict] = {}

    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {rawline!r}", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        parts = key.split(".")
        if parts[0] == "wdm":
            if len(parts) != 3 or parts[2] not in _WDM_FIELDS:
                raise ConfigError("unknown key", lineno, key)
            try:
                idx = int(parts[1])
            except ValueError:
                raise ConfigError("channel index must be an integer", lineno, key)
            if not 1 <= idx <= 8:
                raise ConfigError(f"channel index {idx} outside 1..8", lineno, key)
            wdm_overrides.setdefault(idx, {})[parts[2]] = _convert(
                value, _WDM_FIELDS[parts[2]], lineno, key)
            continue
        if key not in scalars:
            raise ConfigError("unknown key", lineno, key)
        converted = _convert(value, scalars[key], lineno, key)
        if parts[0] == "fiber":
            fiber[parts[1]] = converted
        elif parts[0] == "drift":
            drift[parts[1]] = converted
        else:
            top[key] = converted

    base = SystemConfig()
    wdm = []
    for ch in base.wdm:
        override = wdm_overrides.get(ch.index, {})
        if ch.is_quantum:
            # launch power of the quantum band is ignored by the model
            override.pop("launch_power_dbm", None)
        wdm.append(replace(ch, **override))

    try:
        cfg = SystemConfig(
            fiber=replace(base.fiber, **fiber),
            drift=replace(base.drift, **drift),
            wdm=wdm,
            **top,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc))
    return _apply_seed_env(cfg)


def _apply_seed_env(cfg: SystemConfig) -> SystemConfig:
    env = os.environ.get(SEED_ENV_VAR)
    if env is None:
        return cfg
    try:
        return replace(cfg, seed=int(env))
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")


def load_config(path) -> SystemConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: SystemConfig) -> str:
    """Fully-resolved config in the same format load_config accepts."""
    lines = [
        f"rep_rate_hz = {cfg.rep_rate_hz!r}",
        f"alpha = {cfg.alpha!r}",
        f"epsilon_intrinsic_snu = {cfg.epsilon_intrinsic_snu!r}",
        f"x_th_snu = {cfg.x_th_snu!r}",
        f"f_cal = {cfg.f_cal!r}",
        f"sample_fraction = {cfg.sample_fraction!r}",
        f"qber_smoothing = {cfg.qber_smoothing!r}",
        f"cascade_passes = {cfg.cascade_passes}",
        f"block_size_pulses = {cfg.block_size_pulses}",
        f"seed = {cfg.seed}",
        f"fiber.length_km = {cfg.fiber.length_km!r}",
        f"fiber.attenuation_db_per_km = {cfg.fiber.attenuation_db_per_km!r}",
        f"fiber.raman_coefficient_per_mw_km = {cfg.fiber.raman_coefficient_per_mw_km!r}",
        f"drift.efficiency_mean = {cfg.drift.efficiency_mean!r}",
        f"drift.efficiency_sigma = {cfg.drift.efficiency_sigma!r}",
        f"drift.phase_mean_rad = {cfg.drift.phase_mean_rad!r}",
        f"drift.phase_sigma = {cfg.drift.phase_sigma!r}",
        f"drift.reversion_rate = {cfg.drift.reversion_rate!r}",
    ]
    if cfg.force_sigma_snu is not None:
        lines.append(f"force_sigma_snu = {cfg.force_sigma_snu!r}")
    for ch in cfg.wdm:
        lines.append(f"wdm.{ch.index}.wavelength_nm = {ch.wavelength_nm!r}")
        if not ch.is_quantum:
            lines.append(f"wdm.{ch.index}.launch_power_dbm = {ch.launch_power_dbm!r}")
            lines.append(f"wdm.{ch.index}.enabled = {'true' if ch.enabled else 'false'}")
            lines.append(f"wdm.{ch.index}.modulated = {'true' if ch.modulated else 'false'}")
    return "\n".join(lines) + "\n"
