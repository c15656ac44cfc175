"""Column schema for the hourly plant record stream.

The raw stream carries 31 process variables plus 6 emission targets at a
fixed 1-hour period.  Physics-relevant columns are bound by name so the
conservation residuals can be evaluated on raw units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

# 31 process variables, in canonical order.
FEATURE_COLUMNS: list[str] = [
    "furnace_temp_zone1",      # °C
    "furnace_temp_zone2",      # °C
    "furnace_temp_avg",        # °C (T_furn_avg)
    "flue_gas_temp",           # °C
    "steam_flow_main",         # t/h (Q_s)
    "steam_pressure",          # kPa
    "steam_temp",              # °C
    "drum_pressure",           # kPa
    "feedwater_flow",          # t/h
    "primary_air_flow",        # m³/h (Q1)
    "secondary_air_flow",      # m³/h (Q2)
    "primary_air_temp",        # °C (T1)
    "secondary_air_temp",      # °C (T2)
    "primary_air_pressure",    # kPa
    "secondary_air_pressure",  # kPa
    "grate_speed_drying",      # %
    "grate_speed_combustion",  # %
    "grate_speed_burnout",     # %
    "feeder_speed",            # %
    "waste_feed_rate",         # t/h
    "o2_dry",                  # vol% dry basis
    "flue_gas_flow",           # m³/h (Q_fg)
    "flue_gas_velocity",       # m/s (v_fg)
    "flue_gas_pressure",       # kPa
    "furnace_pressure",        # kPa
    "reactor_tower_temp",      # °C (T_RT)
    "baghouse_outlet_temp",    # °C (T_BH_out)
    "economizer_temp",         # °C
    "superheater_temp",        # °C
    "induced_draft_fan_speed", # %
    "ambient_temp",            # °C
]

# 6 emission targets, in canonical prediction order.
TARGET_COLUMNS: list[str] = ["PM", "SO2", "NOx", "HCl", "CO", "CO2"]

TIMESTAMP_COLUMN = "timestamp"
PHASE_COLUMN = "phase"

PHASES: list[str] = ["drying", "pyrolysis", "combustion", "burnout"]
PHASE_TO_INDEX = {p: i for i, p in enumerate(PHASES)}

N_FEATURES = len(FEATURE_COLUMNS)
N_TARGETS = len(TARGET_COLUMNS)
N_PHASES = len(PHASES)

# Raw-column binding for the conservation residuals.
PHYSICS_COLUMNS: dict[str, str] = {
    "Q1": "primary_air_flow",
    "Q2": "secondary_air_flow",
    "Q_s": "steam_flow_main",
    "O2_dry": "o2_dry",
    "Q_fg": "flue_gas_flow",
    "T1": "primary_air_temp",
    "T2": "secondary_air_temp",
    "v_fg": "flue_gas_velocity",
    "T_furn_avg": "furnace_temp_avg",
    "T_RT": "reactor_tower_temp",
    "T_BH_out": "baghouse_outlet_temp",
}
PHYSICS_FIELDS: list[str] = list(PHYSICS_COLUMNS)

# Weights used to aggregate per-pollutant concentrations into the total
# concentration entering the mass-balance residual.  CO2 (vol%) is excluded
# from the mg/m³ aggregate by default.
DEFAULT_POLLUTANT_WEIGHTS: dict[str, float] = {
    "PM": 1.0, "SO2": 1.0, "NOx": 1.0, "HCl": 1.0, "CO": 1.0, "CO2": 0.0,
}


class SchemaMismatch(ValueError):
    """CSV header does not carry exactly the expected columns."""


class NonMonotonicTime(ValueError):
    """Timestamps are not strictly increasing."""


@dataclass
class RawSchema:
    """Names and ordering of the raw hourly record stream."""

    features: list[str] = field(default_factory=lambda: list(FEATURE_COLUMNS))
    targets: list[str] = field(default_factory=lambda: list(TARGET_COLUMNS))
    timestamp: str = TIMESTAMP_COLUMN
    phase: str = PHASE_COLUMN
    period_hours: int = 1

    def __post_init__(self):
        if len(self.features) != N_FEATURES:
            raise SchemaMismatch(
                f"expected {N_FEATURES} feature columns, got {len(self.features)}")
        if len(self.targets) != N_TARGETS:
            raise SchemaMismatch(
                f"expected {N_TARGETS} target columns, got {len(self.targets)}")

    @property
    def value_columns(self) -> list[str]:
        return self.features + self.targets

    def to_json(self) -> str:
        return json.dumps({
            "features": self.features,
            "targets": self.targets,
            "timestamp": self.timestamp,
            "phase": self.phase,
            "period_hours": self.period_hours,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RawSchema":
        d = json.loads(text)
        return cls(**d)
