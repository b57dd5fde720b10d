"""Cell parameters, physical constants, and open-circuit potential curves."""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

FARADAY = 96485.33212       # C/mol, CODATA
GAS_CONSTANT = 8.314462618  # J/(mol K), CODATA


class OcpCurve(Enum):
    GRAPHITE_CHEN = "graphite_chen"
    NMC_CHEN = "nmc_chen"
    LFP_PRADA = "lfp_prada"


class FluxSign(Enum):
    AS_WRITTEN = "as_written"  # I > 0 delithiates the negative particle
    INVERTED = "inverted"      # both boundary-flux signs flipped


@dataclass(frozen=True)
class PhysicalConstants:
    temperature: float = 298.15
    faraday: float = FARADAY
    gas_constant: float = GAS_CONSTANT

    def __post_init__(self):
        if self.faraday != FARADAY or self.gas_constant != GAS_CONSTANT:
            raise ValueError("faraday and gas_constant are fixed CODATA values")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0 K, got {self.temperature}")

    @property
    def thermal_voltage(self) -> float:
        # 2RT/F [V]
        return 2.0 * self.gas_constant * self.temperature / self.faraday


@dataclass(frozen=True)
class ElectrodeParams:
    thickness: float            # L_k [m]
    volume_fraction: float      # solid-phase fraction eps_k [-]
    particle_radius: float      # R_k [m]
    diffusivity: float          # D_k [m^2/s], constant
    c_max: float                # [mol/m^3]
    ocp_curve: OcpCurve
    sto_window: tuple[float, float] = (0.05, 0.95)
    charge_transfer: float = 0.5  # alpha_k, stored but unused by the voltage map
    conductivity: float = 0.0     # sigma_k [S/m], stored but unused by the voltage map
    rate_prefactor: float = 1.0   # m_k in the asinh arguments, 1 evaluates the formula as printed

    def __post_init__(self):
        for name in ("thickness", "particle_radius", "diffusivity", "c_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 < self.volume_fraction < 1.0:
            raise ValueError(f"volume_fraction must be in (0,1), got {self.volume_fraction}")
        lo, hi = self.sto_window
        if not (0.0 <= lo <= 1.0 and 0.0 <= hi <= 1.0) or lo == hi:
            raise ValueError(f"sto_window endpoints must be distinct and in [0,1], got {self.sto_window}")

    @property
    def specific_area(self) -> float:
        # a_k = 3 eps_k / R_k [1/m], always derived, never stored
        return 3.0 * self.volume_fraction / self.particle_radius


@dataclass(frozen=True)
class CellParameters:
    negative: ElectrodeParams
    positive: ElectrodeParams
    capacity: float                             # nominal [Ah]; 1C current in A equals this value
    area: float = 0.1                           # cross-sectional area A [m^2]
    constants: PhysicalConstants = PhysicalConstants()
    flux_sign: FluxSign = FluxSign.AS_WRITTEN

    def __post_init__(self):
        if not self.area > 0:
            raise ValueError(f"area must be > 0, got {self.area}")
        if not self.capacity > 0:
            raise ValueError(f"capacity must be > 0, got {self.capacity}")

    @property
    def current_1c(self) -> float:
        # [A]
        return self.capacity

    def electrode(self, side: str) -> ElectrodeParams:
        if side == "n":
            return self.negative
        if side == "p":
            return self.positive
        raise ValueError(f"side must be 'n' or 'p', got {side!r}")

    def with_diffusivities(self, d_n: float, d_p: float) -> "CellParameters":
        return replace(self, negative=replace(self.negative, diffusivity=d_n),
                       positive=replace(self.positive, diffusivity=d_p))

    def with_radii(self, r_n: float, r_p: float) -> "CellParameters":
        return replace(self, negative=replace(self.negative, particle_radius=r_n),
                       positive=replace(self.positive, particle_radius=r_p))


def eval_ocp(curve: OcpCurve, sto, xp=np):
    """Equilibrium potential [V] at surface stoichiometry `sto`.

    Accepts scalars or arrays; values slightly outside [0,1] are evaluated
    as-is (training trajectories may overshoot). `xp` selects the math
    backend (numpy, or the autodiff module for differentiable evaluation).
    """
    if xp is np:
        if not np.all(np.isfinite(sto)):
            raise ValueError("sto must be finite")
        # railed stoichiometries overflow the exponentials to inf; that is the
        # domain flag's business, not a numerical error
        with np.errstate(over="ignore"):
            return _ocp_formula(curve, np.asarray(sto, dtype=float), np)
    return _ocp_formula(curve, sto, xp)


def _ocp_formula(curve: OcpCurve, sto, xp):
    if curve is OcpCurve.NMC_CHEN:
        return (-0.8090 * sto + 4.4875
                - 0.0428 * xp.tanh(18.5138 * (sto - 0.5542))
                - 17.7326 * xp.tanh(15.7890 * (sto - 0.3117))
                + 17.5842 * xp.tanh(15.9308 * (sto - 0.3120)))
    if curve is OcpCurve.GRAPHITE_CHEN:
        return (1.9793 * xp.exp(-39.3631 * sto) + 0.2482
                - 0.0909 * xp.tanh(29.8538 * (sto - 0.1234))
                - 0.04478 * xp.tanh(14.9159 * (sto - 0.2769))
                - 0.0205 * xp.tanh(30.4444 * (sto - 0.6103)))
    if curve is OcpCurve.LFP_PRADA:
        return (3.4077 - 0.020269 * sto
                + 0.5 * xp.exp(-150.0 * sto)
                - 0.9 * xp.exp(-30.0 * (1.0 - sto)))
    raise ValueError(f"unknown OCP curve {curve!r}")


def soc_to_stoichiometry(soc: float, electrode: ElectrodeParams, side: str) -> float:
    """Affine map from cell SOC to electrode stoichiometry.

    The window endpoints (a, b) are traversed a -> b by the negative
    electrode and b -> a by the positive as SOC goes 0 -> 1.
    """
    if not 0.0 <= soc <= 1.0:
        raise ValueError(f"soc must be in [0,1], got {soc}")
    a, b = electrode.sto_window
    if side == "n":
        return a + soc * (b - a)
    if side == "p":
        return b + soc * (a - b)
    raise ValueError(f"side must be 'n' or 'p', got {side!r}")


def chen_nmc_cell(**overrides) -> CellParameters:
    """LG M50-style NMC811/graphite parameter set."""
    neg = ElectrodeParams(
        thickness=8.52e-5, volume_fraction=0.25, particle_radius=5.86e-6,
        diffusivity=3.3e-14, c_max=33133.0, ocp_curve=OcpCurve.GRAPHITE_CHEN,
        charge_transfer=0.5, conductivity=215.0)
    pos = ElectrodeParams(
        thickness=7.56e-5, volume_fraction=0.335, particle_radius=5.22e-6,
        diffusivity=4.0e-15, c_max=63104.0, ocp_curve=OcpCurve.NMC_CHEN,
        charge_transfer=0.5, conductivity=0.18)
    return CellParameters(negative=neg, positive=pos, capacity=5.0, **overrides)


def prada_lfp_cell(**overrides) -> CellParameters:
    """LFP/graphite pouch-cell parameter set (reference chemistry)."""
    neg = ElectrodeParams(
        thickness=3.4e-5, volume_fraction=0.36, particle_radius=5.0e-6,
        diffusivity=3.0e-15, c_max=30555.0, ocp_curve=OcpCurve.GRAPHITE_CHEN,
        charge_transfer=0.5, conductivity=215.0)
    pos = ElectrodeParams(
        thickness=8.0e-5, volume_fraction=0.426, particle_radius=5.0e-8,
        diffusivity=5.9e-18, c_max=22806.0, ocp_curve=OcpCurve.LFP_PRADA,
        charge_transfer=0.5, conductivity=0.338)
    return CellParameters(negative=neg, positive=pos, capacity=2.3, **overrides)


CHEMISTRIES = {"chen_nmc": chen_nmc_cell, "prada_lfp": prada_lfp_cell}
