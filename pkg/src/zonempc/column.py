"""Semidiscretized rate-based CO2 absorber model.

Five well-mixed stages, four components per phase plus two temperatures,
giving a 50-state ODE system.  Liquid enters at the top stage and advects
downward; gas enters at the bottom stage and advects upward (first-order
upwind in each phase's flow direction).  Interfacial transfer comes from a
pluggable property package.

State layout (fixed, everything downstream depends on it): stage-major,
stage 0 at the bottom, per stage [c_L(4), c_G(4), T_L, T_G] with the
component order CO2, N2, H2O, MEA.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .properties import (
    CO2,
    GAS_CONSTANT,
    N_COMPONENTS,
    DefaultPropertyPackage,
    PropertyPackage,
)

STAGE_WIDTH = 2 * N_COMPONENTS + 2  # flat entries per stage

# Positive fallback scales for states whose steady value is structurally
# zero (liquid N2, gas MEA): the matching phase total concentration.
TEMPERATURE_BOUNDS = (250.0, 450.0)


class ModelError(RuntimeError):
    """Raised for invalid model inputs or failed model computations."""


@dataclass(frozen=True)
class ColumnConfig:
    """Geometry of the packed column (defaults: the 0.43 m pilot column)."""

    internal_diameter: float = 0.43   # m
    packing_height: float = 6.1       # m
    n_stages: int = 5
    specific_area: float = 143.9      # m^2/m^3
    n_components: int = N_COMPONENTS

    def __post_init__(self):
        if self.n_stages < 2:
            raise ModelError("n_stages must be at least 2")
        if self.internal_diameter <= 0 or self.packing_height <= 0 or self.specific_area <= 0:
            raise ModelError("physical dimensions must be positive")
        if self.n_components != N_COMPONENTS:
            raise ModelError("model is wired for 4 components (CO2, N2, H2O, MEA)")

    @property
    def cross_section(self):
        """Flow area pi*D^2/4, so F/area is the phase velocity 4F/(pi D^2)."""
        return np.pi * self.internal_diameter**2 / 4.0

    @property
    def stage_height(self):
        return self.packing_height / self.n_stages

    @property
    def n_states(self):
        return self.n_stages * STAGE_WIDTH


def _check_fractions(fractions, label):
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (N_COMPONENTS,):
        raise ModelError(f"{label} mole fractions must have length {N_COMPONENTS}")
    if np.any(fr < 0) or np.any(fr > 1):
        raise ModelError(f"{label} mole fractions must lie in [0, 1]")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ModelError(f"{label} mole fractions must sum to 1 within 1e-9")
    return fr


@dataclass(frozen=True)
class GasInlet:
    temperature: float = 319.70       # K
    volumetric_flow: float = 0.0832   # m^3/s
    mole_fractions: tuple = (0.15, 0.80, 0.05, 0.0)

    def __post_init__(self):
        _check_fractions(self.mole_fractions, "gas inlet")
        if self.volumetric_flow < 0:
            raise ModelError("gas flow must be non-negative")


@dataclass(frozen=True)
class LiquidInlet:
    temperature: float = 314.0        # K
    mole_fractions: tuple = (0.0266, 0.0, 0.8630, 0.1104)

    def __post_init__(self):
        _check_fractions(self.mole_fractions, "liquid inlet")


@dataclass(frozen=True)
class StreamBoundary:
    """Inlet streams; the liquid flow is the control input, not stored here."""

    gas_inlet: GasInlet = field(default_factory=GasInlet)
    liquid_inlet: LiquidInlet = field(default_factory=LiquidInlet)

    def gas_concentrations(self, props: PropertyPackage):
        """Inlet gas concentrations, kmol/m^3, ideal gas at package pressure."""
        c_tot = props.gas_pressure / (GAS_CONSTANT * self.gas_inlet.temperature)
        return np.asarray(self.gas_inlet.mole_fractions) * c_tot

    def liquid_concentrations(self, props: PropertyPackage):
        """Inlet liquid concentrations, kmol/m^3, at package molar density."""
        return np.asarray(self.liquid_inlet.mole_fractions) * props.liquid_molar_density


@dataclass
class ColumnState:
    """Structured view of the 50-dimensional column state.

    c_l, c_g: (n_stages, 4) concentrations in kmol/m^3; t_l, t_g:
    (n_stages,) temperatures in K.  Stage 0 is the bottom of the column.
    """

    c_l: np.ndarray
    c_g: np.ndarray
    t_l: np.ndarray
    t_g: np.ndarray

    @property
    def n_stages(self):
        return self.c_l.shape[0]

    def flatten(self):
        ns = self.n_stages
        out = np.empty(ns * STAGE_WIDTH)
        for j in range(ns):
            base = j * STAGE_WIDTH
            out[base:base + 4] = self.c_l[j]
            out[base + 4:base + 8] = self.c_g[j]
            out[base + 8] = self.t_l[j]
            out[base + 9] = self.t_g[j]
        return out

    @classmethod
    def from_flat(cls, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size % STAGE_WIDTH:
            raise ModelError(f"flat state length must be a multiple of {STAGE_WIDTH}")
        ns = x.size // STAGE_WIDTH
        grid = x.reshape(ns, STAGE_WIDTH)
        return cls(
            c_l=grid[:, 0:4].copy(),
            c_g=grid[:, 4:8].copy(),
            t_l=grid[:, 8].copy(),
            t_g=grid[:, 9].copy(),
        )

    def validate(self):
        lo, hi = TEMPERATURE_BOUNDS
        if np.any(self.c_l < 0) or np.any(self.c_g < 0):
            raise ModelError("concentrations must be non-negative")
        for t in (self.t_l, self.t_g):
            if np.any(t <= lo) or np.any(t >= hi):
                raise ModelError(f"temperatures must lie in ({lo}, {hi}) K")
        return self


def rhs(x, u, boundary: StreamBoundary, config: ColumnConfig,
        props: PropertyPackage):
    """Time derivative of the flat column state.

    x is a flat state vector (or ColumnState), u the liquid volumetric
    flow in m^3/s.  Pure function; the compiled fast path in `kernels`
    must agree with this reference implementation bit-for-bit in exact
    arithmetic terms (it is tested against it).
    """
    if u < 0:
        raise ModelError("liquid flow must be non-negative")
    state = x if isinstance(x, ColumnState) else ColumnState.from_flat(x)
    ns = state.n_stages
    if ns != config.n_stages:
        raise ModelError("state and configuration disagree on stage count")

    a_l = (u / config.cross_section) / config.stage_height
    a_g = (boundary.gas_inlet.volumetric_flow / config.cross_section) / config.stage_height
    area = config.specific_area

    n_flux, q_l, q_g = props.transfer_rates(state.c_l, state.c_g, state.t_l, state.t_g)
    cp_l, cp_g = props.heat_capacities()

    c_l_in = boundary.liquid_concentrations(props)
    c_g_in = boundary.gas_concentrations(props)

    d_cl = np.empty_like(state.c_l)
    d_cg = np.empty_like(state.c_g)
    d_tl = np.empty_like(state.t_l)
    d_tg = np.empty_like(state.t_g)

    for j in range(ns):
        up_l = c_l_in if j == ns - 1 else state.c_l[j + 1]       # liquid falls
        up_g = c_g_in if j == 0 else state.c_g[j - 1]            # gas rises
        t_up_l = boundary.liquid_inlet.temperature if j == ns - 1 else state.t_l[j + 1]
        t_up_g = boundary.gas_inlet.temperature if j == 0 else state.t_g[j - 1]

        d_cl[j] = a_l * (up_l - state.c_l[j]) + n_flux[j] * area
        d_cg[j] = a_g * (up_g - state.c_g[j]) - n_flux[j] * area
        d_tl[j] = a_l * (t_up_l - state.t_l[j]) + q_l[j] * area / float(state.c_l[j] @ cp_l)
        d_tg[j] = a_g * (t_up_g - state.t_g[j]) + q_g[j] * area / float(state.c_g[j] @ cp_g)

    out = ColumnState(d_cl, d_cg, d_tl, d_tg).flatten()
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0]) // STAGE_WIDTH
        raise ModelError(f"non-finite derivative at stage {bad}; property package failed")
    return out


def efficiency(x, boundary: StreamBoundary, props: PropertyPackage,
               gas_flow=None):
    """CO2 absorption efficiency as a fraction in [0, 1].

    (CO2 molar flow in - CO2 molar flow out) / (CO2 molar flow in), with
    gas molar flows taken as boundary-stage concentration times the gas
    volumetric flow.  Passing gas_flow overrides the nominal inlet flow
    (the flow cancels, but the definition keeps it explicit).
    """
    state = x if isinstance(x, ColumnState) else ColumnState.from_flat(x)
    f_g = boundary.gas_inlet.volumetric_flow if gas_flow is None else gas_flow
    c_in = boundary.gas_concentrations(props)[CO2]
    flow_in = c_in * f_g
    if flow_in <= 0:
        raise ModelError("inlet CO2 molar flow must be positive")
    flow_out = state.c_g[-1, CO2] * f_g
    return (flow_in - flow_out) / flow_in


def co2_flux_imbalance(x, u, boundary: StreamBoundary, props: PropertyPackage):
    """Relative CO2 boundary-flux closure (in minus out over in).

    Zero at a steady state: gas-in + liquid-in = gas-out + liquid-out.
    """
    state = x if isinstance(x, ColumnState) else ColumnState.from_flat(x)
    f_g = boundary.gas_inlet.volumetric_flow
    c_g_in = boundary.gas_concentrations(props)[CO2]
    c_l_in = boundary.liquid_concentrations(props)[CO2]
    flow_in = c_g_in * f_g + c_l_in * u
    flow_out = state.c_g[-1, CO2] * f_g + state.c_l[0, CO2] * u
    return (flow_in - flow_out) / flow_in


@dataclass(frozen=True)
class Scaler:
    """Elementwise state/input scaling by a positive reference point."""

    x_scale: np.ndarray
    u_scale: float

    def __post_init__(self):
        if np.any(self.x_scale <= 0) or self.u_scale <= 0:
            raise ModelError("scaling reference must be strictly positive")

    def scale(self, x):
        return np.asarray(x, dtype=float) / self.x_scale

    def unscale(self, x_hat):
        return np.asarray(x_hat, dtype=float) * self.x_scale

    def scale_u(self, u):
        return u / self.u_scale

    def unscale_u(self, u_hat):
        return u_hat * self.u_scale


def make_scale_reference(x_ss, boundary: StreamBoundary, props: PropertyPackage):
    """Positive scale vector from a steady state.

    Coordinates whose steady value is structurally zero (liquid N2, gas
    MEA) fall back to the matching phase total concentration so the scale
    stays strictly positive.
    """
    state = ColumnState.from_flat(np.asarray(x_ss, dtype=float))
    c_l_tot = props.liquid_molar_density
    c_g_tot = props.gas_pressure / (GAS_CONSTANT * boundary.gas_inlet.temperature)
    floor_l = 1e-6 * c_l_tot
    floor_g = 1e-6 * c_g_tot
    c_l = np.where(state.c_l > floor_l, state.c_l, c_l_tot)
    c_g = np.where(state.c_g > floor_g, state.c_g, c_g_tot)
    return ColumnState(c_l, c_g, state.t_l.copy(), state.t_g.copy()).flatten()
