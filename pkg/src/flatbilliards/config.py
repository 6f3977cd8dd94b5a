"""Experiment configuration.

A ``TableConfig`` fully determines one billiard table plus the numerical
knobs every downstream module reads (window constant, homogeneity cutoff,
tolerances, RNG seed, worker count).  Configs are plain frozen dataclasses;
JSON ingestion is strict: unknown keys are an error, as are out-of-range
values.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError

MODES = ("Rectangle", "Torus")


@dataclass(frozen=True)
class TableConfig:
    """Geometric and numerical parameters of one experiment.

    Attributes:
        beta: superellipse exponent (> 2); controls flatness of the four
            zero-curvature boundary points.
        scatterer_radius: semi-axis a of the scatterer |x|^b + |y|^b = a^b.
        rect_width: width of the rectangular cell.
        rect_height: height of the rectangular cell.
        epsilon0: window constant; the window at cell index m has arclength
            half-width epsilon0 * m^(-1/(beta-1)).
        k0: homogeneity cutoff; grazing strips are indexed k >= k0.
        mode: "Rectangle" (walls reflect) or "Torus" (periodic copies).
        newton_tol: root-polishing tolerance (length units).
        max_flight_cells: cap on cells traversed by a single free flight.
        seed: base RNG seed for all derived streams.
        threads: worker count for chunked estimators.
    """

    beta: float = 4.0
    scatterer_radius: float = 1.0
    rect_width: float = 4.0
    rect_height: float = 4.0
    epsilon0: float = 0.3
    k0: int = 5
    mode: str = "Rectangle"
    newton_tol: float = 1e-12
    max_flight_cells: int = 1_000_000
    seed: int = 424242
    threads: int = 8

    def __post_init__(self) -> None:
        if not self.beta > 2.0:
            raise ConfigError(f"beta must exceed 2, got {self.beta}")
        if self.scatterer_radius <= 0:
            raise ConfigError("scatterer_radius must be positive")
        if not 2.0 * self.scatterer_radius < min(self.rect_width, self.rect_height):
            raise ConfigError(
                "scatterer must fit strictly inside the cell: need "
                f"2a < min(width, height), got a={self.scatterer_radius}, "
                f"cell {self.rect_width} x {self.rect_height}"
            )
        if not 0.0 < self.epsilon0 < 0.5:
            raise ConfigError(f"epsilon0 must lie in (0, 1/2), got {self.epsilon0}")
        if self.k0 < 2:
            raise ConfigError(f"k0 must be >= 2, got {self.k0}")
        if self.newton_tol <= 0:
            raise ConfigError("newton_tol must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_flight_cells < 1:
            raise ConfigError("max_flight_cells must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def replace(self, **kwargs) -> "TableConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TableConfig)}
_INT_FIELDS = {"k0", "max_flight_cells", "seed", "threads"}


def config_from_dict(data: dict) -> TableConfig:
    """Build a config from a mapping, rejecting unknown keys."""
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    coerced = {}
    for key, value in data.items():
        if key == "mode":
            coerced[key] = value
        elif key in _INT_FIELDS:
            if isinstance(value, bool) or int(value) != value:
                raise ConfigError(f"config key {key} must be an integer, got {value!r}")
            coerced[key] = int(value)
        else:
            coerced[key] = float(value)
    return TableConfig(**coerced)


def load_config(path: str) -> TableConfig:
    """Load a strict-JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return config_from_dict(data)


def apply_overrides(config: TableConfig, overrides: dict) -> TableConfig:
    """Override selected keys (CLI --set); same strictness as ingestion."""
    merged = config.to_dict()
    unknown = set(overrides) - set(merged)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged.update(overrides)
    return config_from_dict(merged)
