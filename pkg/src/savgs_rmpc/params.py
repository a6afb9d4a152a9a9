"""Physical and tuning constants of the SAVGS quarter car.

All quantities are SI unless noted; single-link angles are stored in
degrees (as they are usually tabulated) and converted to radians by the
geometry code.  The defaults correspond to a GT-class quarter car with a
rotary single-link actuator.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

import yaml

__all__ = ["QuarterCarParams", "load_config"]

#: gravitational acceleration used throughout (m/s^2)
GRAVITY = 9.81


@dataclasses.dataclass(frozen=True)
class QuarterCarParams:
    """Quarter-car, actuator, uncertainty and controller constants.

    Field names mirror the conventional symbols: ``m_s``/``m_u`` sprung and
    unsprung masses, ``k_t``/``c_t`` tire stiffness and damping, ``k_eq``/
    ``c_eq_nom`` equivalent suspension stiffness and nominal damping,
    ``c_eq_dev`` the maximum damping deviation captured as structured
    uncertainty, single-link angle/torque/speed limits, actuator power
    limits, the road-velocity disturbance bound ``d_bar``, cost weights
    ``w1``..``w5``, prediction horizon ``N``, PI gains and sample time.
    """

    m_s: float = 320.0          # sprung mass (kg)
    m_u: float = 49.0           # unsprung mass (kg)
    k_t: float = 275000.0       # tire radial stiffness (N/m)
    c_t: float = 300.0          # tire radial damping (N s/m)
    k_eq: float = 59987.0       # equivalent spring stiffness (N/m)
    c_eq_nom: float = 2087.4    # nominal suspension damping (N s/m)
    c_eq_dev: float = 208.74    # damping deviation, 10% of nominal (N s/m)
    g: float = GRAVITY          # gravity (m/s^2)
    theta_max: float = 160.0    # upper bound of SL angle increment (deg)
    theta_min: float = 20.0     # lower bound of SL angle increment (deg)
    T_max: float = 97.0         # upper bound of continuous SL torque (N m)
    T_min: float = 0.0          # lower bound of SL torque (N m)
    omega_max: float = 13.0     # upper bound of SL angular velocity (rad/s)
    omega_min: float = -13.0    # lower bound of SL angular velocity (rad/s)
    P_max: float = 500.0        # actuator maximum (motoring) power (W)
    P_min: float = -1500.0      # actuator minimum (generating) power (W)
    d_bar: float = 0.15         # road-velocity disturbance bound (m/s)
    w1: float = 10.0 ** 0.5     # body acceleration weight
    w2: float = 10.0 ** 0.5     # tire deflection weight
    w3: float = 10.0 * 6.0 ** 0.5  # actuator energy weight
    w4: float = 20.0            # terminal body acceleration weight
    w5: float = 20.0            # terminal tire deflection weight
    N: int = 5                  # prediction horizon (steps)
    Kp: float = 5.0             # PI proportional gain (1/s)
    Ki: float = 1.0             # PI integral gain (1/s^2)
    Ts: float = 0.01            # controller sample time (s)

    def __post_init__(self) -> None:
        for name in ("m_s", "m_u", "k_t", "k_eq", "c_eq_nom"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.c_t < 0.0 or self.c_eq_dev < 0.0:
            raise ValueError("damping coefficients must be non-negative")
        if self.c_eq_dev >= self.c_eq_nom:
            raise ValueError("c_eq_dev must be smaller than c_eq_nom")
        if not self.theta_min < 90.0 < self.theta_max:
            raise ValueError("SL angle bounds must bracket the 90 deg nominal position")
        if not self.T_min <= 0.0 < self.T_max and not self.T_min == 0.0 < self.T_max:
            raise ValueError("torque bounds must satisfy T_min <= 0 < T_max")
        if not self.omega_min < 0.0 < self.omega_max:
            raise ValueError("speed bounds must bracket zero")
        if self.d_bar < 0.0:
            raise ValueError("d_bar must be non-negative")
        if self.Ts <= 0.0:
            raise ValueError("Ts must be positive")
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.w4 < self.w1 or self.w5 < self.w2:
            raise ValueError("terminal weights must not be smaller than stage weights")

    def replace(self, **changes: Any) -> "QuarterCarParams":
        """Return a copy with the given fields overridden."""
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "QuarterCarParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown parameter keys: {sorted(unknown)}")
        return cls(**data)


def _merge(base: dict, override: Mapping) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | Path) -> dict:
    """Load a YAML config file, resolving one level of ``include`` chains.

    An ``include`` key names another YAML file (relative to the including
    file) whose content is loaded first and then overridden by the local
    keys.  Returns the merged dictionary.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ValueError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    include = data.pop("include", None)
    if include is None:
        return data
    inc_path = Path(include)
    if not inc_path.is_absolute():
        inc_path = path.parent / inc_path
    base = load_config(inc_path)
    return _merge(base, data)


def default_config_path() -> Path:
    """Path of the packaged Table-style default parameter file."""
    return Path(__file__).parent / "data" / "defaults.yaml"
