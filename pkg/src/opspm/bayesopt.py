"""Bayesian identification of electrode diffusivities from a voltage trace.

A Matern-5/2 ARD Gaussian process models log10 of the relative-L2 voltage
loss over the unit-square image of Omega = [-18,-14]^2; expected improvement
picks each new evaluation. The forward model is either the reference solver
or a trained parameter-embedded surrogate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import qmc

from . import operators as nn
from .params import CellParameters
from .solver import RadialGrid, simulate

LOSS_FLOOR = 1e-16  # keeps log10(loss) finite at solver-determinism level


@dataclass
class SearchDomain:
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-18.0, -14.0],
                                                                 [-18.0, -14.0]]))

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float)
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ValueError("domain bounds need lo < hi per coordinate")

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    def to_unit(self, x):
        return (np.asarray(x) - self.bounds[:, 0]) / (self.bounds[:, 1] - self.bounds[:, 0])

    def from_unit(self, u):
        return self.bounds[:, 0] + np.asarray(u) * (self.bounds[:, 1] - self.bounds[:, 0])

    def clamp_unit(self, u):
        return np.clip(u, 0.0, 1.0)


def _matern52(x1, x2, length_scales, signal_var):
    d = (x1[:, None, :] - x2[None, :, :]) / length_scales
    r = np.sqrt(np.maximum((d * d).sum(-1), 0.0))
    s5r = np.sqrt(5.0) * r
    return signal_var * (1.0 + s5r + 5.0 * r * r / 3.0) * np.exp(-s5r)


@dataclass
class GpModel:
    x_unit: np.ndarray
    y: np.ndarray               # centered log10 losses
    y_mean: float
    length_scales: np.ndarray
    signal_var: float
    noise: float
    chol: tuple = None
    alpha: np.ndarray = None

    def posterior(self, xq_unit) -> tuple[np.ndarray, np.ndarray]:
        xq = np.atleast_2d(xq_unit)
        ks = _matern52(xq, self.x_unit, self.length_scales, self.signal_var)
        mu = self.y_mean + ks @ self.alpha
        v = cho_solve(self.chol, ks.T)
        var = self.signal_var - np.einsum("ij,ji->i", ks, v)
        return mu, np.maximum(var, 0.0)


def _neg_lml(log_params, x, y):
    ls = np.exp(log_params[:-1])
    sv = np.exp(log_params[-1])
    n = len(y)
    K = _matern52(x, x, ls, sv) + 1e-6 * sv * np.eye(n)
    try:
        c = cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        return 1e12
    alpha = cho_solve(c, y)
    return float(0.5 * y @ alpha + np.log(np.diag(c[0])).sum() + 0.5 * n * np.log(2 * np.pi))


def gp_fit(x_unit: np.ndarray, losses: np.ndarray, restarts: int = 8,
           seed: int = 0) -> GpModel:
    """Fit in log10-loss space; hyperparameters by best-of-restarts marginal likelihood.

    Non-finite losses are imputed as ten times the worst finite value so the
    GP stays defined on every evaluated point.
    """
    x_unit = np.atleast_2d(np.asarray(x_unit, dtype=float))
    losses = np.asarray(losses, dtype=float)
    if len(losses) < 2:
        raise ValueError("gp_fit needs at least 2 points")
    finite = np.isfinite(losses)
    if not finite.any():
        raise ValueError("all losses are non-finite")
    losses = losses.copy()
    losses[~finite] = losses[finite].max() * 10.0
    y_raw = np.log10(np.maximum(losses, LOSS_FLOOR))
    y_mean = float(y_raw.mean())
    y = y_raw - y_mean
    var = max(float(y.var()), 1e-4)
    d = x_unit.shape[1]

    rng = np.random.default_rng(seed)
    best = (np.inf, None)
    for k in range(restarts):
        if k == 0:
            start = np.concatenate([np.log(0.3 * np.ones(d)), [np.log(var)]])
        else:
            start = np.concatenate([np.log(rng.uniform(0.05, 2.0, d)),
                                    [np.log(var * rng.uniform(0.2, 5.0))]])
        res = minimize(_neg_lml, start, args=(x_unit, y), method="L-BFGS-B",
                       bounds=[(np.log(1e-2), np.log(10.0))] * d
                       + [(np.log(var * 1e-3), np.log(var * 1e3 + 1e-6))])
        if res.fun < best[0]:
            best = (res.fun, res.x)
    ls = np.exp(best[1][:-1])
    sv = float(np.exp(best[1][-1]))

    noise = 1e-10 * sv
    n = len(y)
    for _ in range(9):
        K = _matern52(x_unit, x_unit, ls, sv) + noise * np.eye(n)
        try:
            chol = cho_factor(K, lower=True)
            break
        except np.linalg.LinAlgError:
            noise *= 10.0
    else:
        raise RuntimeError("GP covariance not factorizable after jitter escalation")
    alpha = cho_solve(chol, y)
    return GpModel(x_unit=x_unit, y=y, y_mean=y_mean, length_scales=ls,
                   signal_var=sv, noise=noise, chol=chol, alpha=alpha)


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _norm_cdf(z):
    from scipy.special import ndtr
    return ndtr(z)


def expected_improvement(gp: GpModel, x_unit, best: float) -> np.ndarray:
    """Closed-form EI for minimization; best is the incumbent in GP target space."""
    mu, var = gp.posterior(x_unit)
    sigma = np.sqrt(var)
    improve = best - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, improve / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0, improve * _norm_cdf(z) + sigma * _norm_pdf(z),
                      np.maximum(improve, 0.0))
    return ei


def propose_next(gp: GpModel, domain: SearchDomain, seed: int,
                 evaluated_unit: np.ndarray | None = None) -> np.ndarray:
    """argmax EI over 1024 Sobol candidates plus local coordinate refinement.

    Ties break toward the lowest posterior mean, then lexicographic order; a
    proposal within 1e-9 of an evaluated point is replaced by the Sobol
    candidate with the largest posterior variance.
    """
    best_y = float(gp.y.min() + gp.y_mean)
    cand = qmc.Sobol(d=domain.dim, scramble=True, seed=seed).random(1024)
    ei = expected_improvement(gp, cand, best_y)
    mu, var = gp.posterior(cand)
    order = np.lexsort(tuple(cand[:, j] for j in reversed(range(domain.dim))) + (mu, -ei))
    x = cand[order[0]].copy()
    fx = ei[order[0]]
    step = 0.05
    for _ in range(20):
        improved = False
        for j in range(domain.dim):
            for sgn in (+1.0, -1.0):
                trial = x.copy()
                trial[j] = np.clip(trial[j] + sgn * step, 0.0, 1.0)
                ft = expected_improvement(gp, trial[None], best_y)[0]
                if ft > fx:
                    x, fx = trial, ft
                    improved = True
        if not improved:
            step *= 0.5
    if evaluated_unit is not None and len(evaluated_unit):
        dist = np.linalg.norm(np.atleast_2d(evaluated_unit) - x[None], axis=1)
        if dist.min() < 1e-9:
            x = cand[int(np.argmax(var))].copy()
    return domain.from_unit(x)


@dataclass
class IdentifyTrace:
    points: np.ndarray          # (n, 2) log10 diffusivities in evaluation order
    losses: np.ndarray          # (n,)
    best_so_far: np.ndarray     # (n,) running minimum
    rho_min: np.ndarray         # argmin point
    forward_tag: str            # "reference" or "surrogate"

    @property
    def final_loss(self) -> float:
        return float(self.best_so_far[-1])


def voltage_objective(rho, forward, v_data: np.ndarray) -> float:
    """Relative L2 voltage mismatch on the shared discrete grid; failures -> +inf."""
    try:
        v_pred = forward(np.asarray(rho, dtype=float))
    except (ArithmeticError, ValueError):
        return np.inf
    if v_pred is None or not np.all(np.isfinite(v_pred)):
        return np.inf
    return float(np.linalg.norm(v_pred - v_data) / np.linalg.norm(v_data))


class ReferenceForward:
    """SPM solver as the forward model; radii and soc0 are known inputs."""

    tag = "reference"

    def __init__(self, cell: CellParameters, profile, soc0: float,
                 n_r: int = 30, dt: float = 30.0):
        self.cell = cell
        self.profile = profile
        self.soc0 = soc0
        self.n_r = n_r
        self.dt = dt

    def __call__(self, rho) -> np.ndarray:
        cell = self.cell.with_diffusivities(10.0 ** rho[0], 10.0 ** rho[1])
        res = simulate(cell, self.profile, self.soc0,
                       grid_n=RadialGrid(self.n_r, cell.negative.particle_radius),
                       grid_p=RadialGrid(self.n_r, cell.positive.particle_radius),
                       dt=self.dt)
        return res.voltage


class SurrogateForward:
    """Trained PE-FNO as the forward model; voltage via the cell equation."""

    tag = "surrogate"

    def __init__(self, model, dataset_manifest: dict, cell: CellParameters,
                 profile, soc0: float):
        from .params import soc_to_stoichiometry

        self.model = model
        self.cell = cell
        self.profile = profile
        self.manifest = dataset_manifest
        self.ranges = {k: tuple(v) for k, v in dataset_manifest["ranges"].items()}
        pad = tuple(model.arch["pad"])
        n_r = dataset_manifest["grid"]["n_r"]
        self.images = {}
        for side, el in (("n", cell.negative), ("p", cell.positive)):
            sto0 = soc_to_stoichiometry(soc0, el, side)
            c0 = np.full(n_r, sto0 * el.c_max)
            img = nn.assemble_input(profile.resample(dataset_manifest["grid"]["n_t"]),
                                    c0, el.c_max, pad)
            self.images[side] = img.channels[None]

    def _pvec(self, side: str, log10_d: float) -> np.ndarray:
        from .excitation import _log_normalize
        el = self.cell.negative if side == "n" else self.cell.positive
        d_lo, d_hi = self.ranges["d_" + side]
        r_lo, r_hi = self.ranges["r_" + side]
        nd = 2.0 * (log10_d - np.log10(d_lo)) / (np.log10(d_hi) - np.log10(d_lo)) - 1.0
        nr = _log_normalize(el.particle_radius, r_lo, r_hi)
        return np.array([[nd, nr]])

    def __call__(self, rho) -> np.ndarray:
        fields = {}
        for side, log_d in (("n", rho[0]), ("p", rho[1])):
            out = self.model.forward(side, {"images": self.images[side],
                                            "pvec": self._pvec(side, log_d)})
            c_max = self.manifest["scaling"]["c_max_" + side]
            fields[side] = out.data[0] * c_max
        cell = self.cell.with_diffusivities(10.0 ** rho[0], 10.0 ** rho[1])
        v = nn.predict_voltage(fields["n"], fields["p"], self.profile, cell)
        return v.data


def identify(forward, v_data: np.ndarray, domain: SearchDomain | None = None,
             n_init: int = 12, n_total: int = 60, seed: int = 0) -> IdentifyTrace:
    """Sobol-initialize, then fit -> propose -> evaluate until the budget is spent."""
    domain = domain or SearchDomain()
    if n_total < n_init:
        raise ValueError(f"budget {n_total} smaller than init count {n_init}")
    init = qmc.Sobol(d=domain.dim, scramble=True, seed=seed).random(n_init)
    xs_unit = [u for u in init]
    losses = [voltage_objective(domain.from_unit(u), forward, v_data) for u in xs_unit]
    for it in range(n_total - n_init):
        gp = gp_fit(np.array(xs_unit), np.array(losses), seed=seed + 131 * it)
        x_next = propose_next(gp, domain, seed=seed + 977 * it + 1,
                              evaluated_unit=np.array(xs_unit))
        u_next = domain.to_unit(x_next)
        xs_unit.append(u_next)
        losses.append(voltage_objective(x_next, forward, v_data))
    losses = np.array(losses)
    if not np.any(np.isfinite(losses)):
        raise RuntimeError("identification failed: every objective evaluation diverged")
    points = domain.from_unit(np.array(xs_unit))
    best_so_far = np.minimum.accumulate(np.where(np.isfinite(losses), losses, np.inf))
    rho_min = points[int(np.nanargmin(np.where(np.isfinite(losses), losses, np.nan)))]
    return IdentifyTrace(points=points, losses=losses, best_so_far=best_so_far,
                         rho_min=rho_min, forward_tag=getattr(forward, "tag", "reference"))
