"""Reference single-particle solver: spherical diffusion + terminal voltage.

Each electrode is one spherical particle, discretized with uniform-shell
finite volumes (cell centers at (i+1/2)*dr) and advanced with Crank-Nicolson.
The scheme conserves lithium exactly: interior face fluxes telescope, so the
cell-total change per step equals -4*pi*R^2 * N_surf * dt up to round-off.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .params import CellParameters, ElectrodeParams, FluxSign, eval_ocp, soc_to_stoichiometry


class SingularOverpotentialError(ArithmeticError):
    """Exchange term hit zero with nonzero current."""


@dataclass(frozen=True)
class RadialGrid:
    n_r: int
    radius: float

    def __post_init__(self):
        if self.n_r < 4:
            raise ValueError(f"n_r must be >= 4, got {self.n_r}")
        if not self.radius > 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")

    @property
    def dr(self) -> float:
        return self.radius / self.n_r

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_r) + 0.5) * self.dr

    @property
    def faces(self) -> np.ndarray:
        return np.arange(self.n_r + 1) * self.dr

    @property
    def shell_volumes(self) -> np.ndarray:
        f = self.faces
        return 4.0 * np.pi / 3.0 * (f[1:] ** 3 - f[:-1] ** 3)

    @property
    def surface_area(self) -> float:
        return 4.0 * np.pi * self.radius**2


@dataclass
class ConcentrationState:
    c: np.ndarray  # [mol/m^3], one value per control volume

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        if not np.all(np.isfinite(self.c)):
            raise ValueError("concentration entries must be finite")

    def total_lithium(self, grid: RadialGrid) -> float:
        return float(self.c @ grid.shell_volumes)


@dataclass
class Field2D:
    values: np.ndarray  # (n_r, n_t) [mol/m^3]
    r_axis: np.ndarray  # [m]
    t_axis: np.ndarray  # [s]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.r_axis = np.asarray(self.r_axis, dtype=float)
        self.t_axis = np.asarray(self.t_axis, dtype=float)
        if self.values.shape != (self.r_axis.size, self.t_axis.size):
            raise ValueError(f"field shape {self.values.shape} does not match axes "
                             f"({self.r_axis.size}, {self.t_axis.size})")
        if np.any(np.diff(self.r_axis) <= 0) or np.any(np.diff(self.t_axis) <= 0):
            raise ValueError("axes must be strictly increasing")


@dataclass
class SimulationResult:
    field_n: Field2D
    field_p: Field2D
    voltage: np.ndarray      # [V] on t_axis
    current: "CurrentProfile"
    violated_domain: bool
    failed: bool = False     # singular overpotential hit somewhere on the trace

    @property
    def t_axis(self) -> np.ndarray:
        return self.field_n.t_axis


def exchange_term(surf_sto: float) -> float:
    """Dimensionless exchange-current factor sqrt(s(1-s)) at the surface.

    Stoichiometries outside [0,1] are evaluated on the clamped value rather
    than aborting; the excursion itself is recorded by the trajectory-level
    domain flag, not here.
    """
    if not np.isfinite(surf_sto):
        raise ValueError(f"surf_sto must be finite, got {surf_sto}")
    s = min(max(surf_sto, 0.0), 1.0)
    return float(np.sqrt(s * (1.0 - s)))


def surface_flux(I: float, electrode: ElectrodeParams, side: str, cell: CellParameters):
    """Prescribed outward flux N at r = R_k [mol/(m^2 s)].

    As written, N_n = +I R_n/(3 eps_n F L_n A) and N_p carries the opposite
    sign; FluxSign.INVERTED flips both.
    """
    mag = I * electrode.particle_radius / (
        3.0 * electrode.volume_fraction * cell.constants.faraday * electrode.thickness * cell.area)
    if side == "n":
        signed = mag
    elif side == "p":
        signed = -mag
    else:
        raise ValueError(f"side must be 'n' or 'p', got {side!r}")
    if cell.flux_sign is FluxSign.INVERTED:
        signed = -signed
    return signed


def terminal_voltage(surf_sto_n, surf_sto_p, I, cell: CellParameters,
                     xp=np, on_singular: str = "raise"):
    """Cell voltage: OCV minus the two asinh reaction overpotentials.

    Vectorizes over time when the stoichiometries and current are arrays.
    The exchange terms are evaluated on stoichiometries clamped to [0,1];
    a clamped endpoint with nonzero current is singular (on_singular
    'raise' -> SingularOverpotentialError, 'mark' -> +-inf samples).
    """
    ocv = eval_ocp(cell.positive.ocp_curve, surf_sto_p, xp=xp) \
        - eval_ocp(cell.negative.ocp_curve, surf_sto_n, xp=xp)
    j0_n = xp.sqrt(xp.clip(surf_sto_n, 0.0, 1.0) * (1.0 - xp.clip(surf_sto_n, 0.0, 1.0)))
    j0_p = xp.sqrt(xp.clip(surf_sto_p, 0.0, 1.0) * (1.0 - xp.clip(surf_sto_p, 0.0, 1.0)))
    # a_k L_k is dimensionless; m_k keeps the overpotential scale configurable
    s_n = cell.negative.specific_area * cell.negative.thickness * cell.negative.rate_prefactor
    s_p = cell.positive.specific_area * cell.positive.thickness * cell.positive.rate_prefactor
    if xp is np:
        with np.errstate(divide="ignore", invalid="ignore"):
            arg_p = np.where(np.equal(I, 0.0), 0.0, I / (s_p * j0_p))
            arg_n = np.where(np.equal(I, 0.0), 0.0, I / (s_n * j0_n))
            eta = cell.constants.thermal_voltage * (np.arcsinh(arg_p) + np.arcsinh(arg_n))
        v = ocv - eta
        if not np.all(np.isfinite(v)):
            if on_singular == "raise":
                raise SingularOverpotentialError("exchange term is zero at nonzero current")
            v = np.where(np.isfinite(v), v, np.where(np.less(eta, 0), np.inf, -np.inf))
        return v
    # differentiable path: caller is responsible for keeping j0 away from 0
    eta = cell.constants.thermal_voltage * (xp.asinh(I / (s_p * j0_p)) + xp.asinh(I / (s_n * j0_n)))
    return ocv - eta


def _banded_system(D: float, grid: RadialGrid, dt: float):
    # face conductances beta_i = 4 pi f_i^2 D / dr (beta_0 = beta_n = 0 here:
    # the center face carries no flux, the surface face is the source term)
    f = grid.faces
    beta = 4.0 * np.pi * f**2 * D / grid.dr
    beta[0] = 0.0
    beta[-1] = 0.0
    V = grid.shell_volumes
    lower = beta[1:-1] / V[1:]            # coefficient of c_{i-1} in row i
    upper = beta[1:-1] / V[:-1]           # coefficient of c_{i+1} in row i
    diag = -(beta[:-1] + beta[1:]) / V    # row i
    return lower, diag, upper


def step_diffusion(state: ConcentrationState, surf_flux: float, D: float,
                   grid: RadialGrid, dt: float) -> ConcentrationState:
    """One Crank-Nicolson step with zero flux at r=0 and prescribed flux at r=R."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if D < 0:
        raise ValueError(f"D must be >= 0, got {D}")
    n = grid.n_r
    lower, diag, upper = _banded_system(D, grid, dt)
    h = 0.5 * dt
    # rhs = (I + h M) c + dt s
    c = state.c
    rhs = c + h * diag * c
    rhs[1:] += h * lower * c[:-1]
    rhs[:-1] += h * upper * c[1:]
    rhs[-1] -= dt * grid.surface_area * surf_flux / grid.shell_volumes[-1]
    # lhs = (I - h M), banded (1,1) layout for solve_banded
    ab = np.zeros((3, n))
    ab[0, 1:] = -h * upper
    ab[1, :] = 1.0 - h * diag
    ab[2, :-1] = -h * lower
    c_new = solve_banded((1, 1), ab, rhs)
    assert np.all(np.isfinite(c_new)), "tridiagonal solve produced non-finite values"
    return ConcentrationState(c_new)


def domain_violated(result: SimulationResult, cell: CellParameters,
                    v_limits: tuple[float, float] = (2.5, 3.65)) -> bool:
    """Recompute the out-of-domain flag from the trace alone."""
    sto_n = result.field_n.values[-1, :] / cell.negative.c_max
    sto_p = result.field_p.values[-1, :] / cell.positive.c_max
    if np.any(sto_n < 0.0) or np.any(sto_n > 1.0) or np.any(sto_p < 0.0) or np.any(sto_p > 1.0):
        return True
    v = result.voltage[np.isfinite(result.voltage)]
    return bool(np.any(v < v_limits[0]) or np.any(v > v_limits[1]))


def simulate(cell: CellParameters, profile, soc0: float,
             grid_n: RadialGrid | None = None, grid_p: RadialGrid | None = None,
             dt: float = 30.0) -> SimulationResult:
    """Advance both particles under the shared current and record everything.

    The particles are independent given I(t); the surface flux for each step
    uses the midpoint current (keeps the scheme second order in time).
    Domain violations never abort; a singular overpotential marks the result
    failed and leaves +-inf at the affected voltage samples.
    """
    if not 0.0 <= soc0 <= 1.0:
        raise ValueError(f"soc0 must be in [0,1], got {soc0}")
    T = profile.t[-1]
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"horizon {T} s is not divisible into dt={dt} s steps")
    grid_n = grid_n or RadialGrid(30, cell.negative.particle_radius)
    grid_p = grid_p or RadialGrid(30, cell.positive.particle_radius)

    fields = {}
    for side, grid, el in (("n", grid_n, cell.negative), ("p", grid_p, cell.positive)):
        sto0 = soc_to_stoichiometry(soc0, el, side)
        state = ConcentrationState(np.full(grid.n_r, sto0 * el.c_max))
        vals = np.empty((grid.n_r, n_steps + 1))
        vals[:, 0] = state.c
        for k in range(n_steps):
            i_mid = profile.eval((k + 0.5) * dt)
            flux = surface_flux(i_mid, el, side, cell)
            state = step_diffusion(state, flux, el.diffusivity, grid, dt)
            vals[:, k + 1] = state.c
        fields[side] = vals

    t_axis = np.arange(n_steps + 1) * dt
    field_n = Field2D(fields["n"], grid_n.centers, t_axis)
    field_p = Field2D(fields["p"], grid_p.centers, t_axis)
    i_axis = profile.eval(t_axis)
    sto_n = fields["n"][-1, :] / cell.negative.c_max
    sto_p = fields["p"][-1, :] / cell.positive.c_max
    voltage = terminal_voltage(sto_n, sto_p, i_axis, cell, on_singular="mark")
    failed = bool(np.any(~np.isfinite(voltage)))

    result = SimulationResult(field_n=field_n, field_p=field_p, voltage=voltage,
                              current=profile, violated_domain=False, failed=failed)
    result.violated_domain = domain_violated(result, cell)
    return result
