"""Synthetic excitation: four current families plus Sobol-sampled cell instances.

All generators are pure functions of (config, rng); the profile grid is
t_i = i/(n-1) * T_max and every emitted sample obeys |i| <= 1.5C.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import qmc


class Family(Enum):
    CC = "cc"
    TRI = "tri"
    PLS = "pls"
    GRF = "grf"


@dataclass
class CurrentProfile:
    t: np.ndarray            # [s], strictly increasing, t[0] = 0
    i: np.ndarray            # [A]
    c_rate_bound: float      # 1.5 * C_nom [A]

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.i = np.asarray(self.i, dtype=float)
        if self.t.size != self.i.size or self.t.size < 2:
            raise ValueError("t and i must be equal-length with at least 2 samples")
        if self.t[0] != 0.0 or np.any(np.diff(self.t) <= 0):
            raise ValueError("t must start at 0 and be strictly increasing")
        if np.any(np.abs(self.i) > self.c_rate_bound * (1 + 1e-12)):
            raise ValueError("profile exceeds the 1.5C amplitude bound")

    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    def eval(self, t):
        """Linear interpolation between the stored samples."""
        return np.interp(t, self.t, self.i)

    def resample(self, n: int) -> "CurrentProfile":
        t = np.linspace(0.0, self.horizon, n)
        return CurrentProfile(t, self.eval(t), self.c_rate_bound)


@dataclass
class FamilyConfig:
    family: Family
    t_max: float = 3600.0
    n: int = 121
    c_nom: float = 2.3        # [Ah]; 1C current in A
    tri_t1: float = 1800.0    # triangle knots [s]
    tri_t2: float = 3600.0
    grf_length_scale: float = 1.0

    def __post_init__(self):
        if self.n < 2 or self.t_max <= 0:
            raise ValueError("need n >= 2 and t_max > 0")
        if self.family is Family.TRI and not 0.0 < self.tri_t1 < self.tri_t2:
            raise ValueError(f"need 0 < t1 < t2, got ({self.tri_t1}, {self.tri_t2})")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.n)

    @property
    def amp_bound(self) -> float:
        return 1.5 * self.c_nom


@dataclass
class CellInstance:
    log10_dn: float
    log10_dp: float
    r_n: float               # [m]
    r_p: float               # [m]
    soc0: float
    normalized: np.ndarray   # (log Dn, log Dp, log Rn, log Rp) mapped to [-1,1]

    def __post_init__(self):
        self.normalized = np.asarray(self.normalized, dtype=float)
        if self.normalized.shape != (4,):
            raise ValueError("normalized must be a 4-vector")


# (lo, hi) for log-uniform Sobol sampling; the layout of the Sobol dimensions
# is fixed as (log10 D_n, log10 D_p, log10 R_n, log10 R_p, soc0)
DEFAULT_RANGES = {
    "d_n": (1e-18, 1e-14),
    "d_p": (1e-18, 1e-14),
    "r_n": (4e-6, 1.5e-5),
    "r_p": (1e-8, 1.5e-5),
}


def gen_cc(cfg: FamilyConfig, rng: np.random.Generator) -> CurrentProfile:
    amp = rng.uniform(-cfg.amp_bound, cfg.amp_bound)
    return CurrentProfile(cfg.grid, np.full(cfg.n, amp), cfg.amp_bound)


def gen_tri(cfg: FamilyConfig, rng: np.random.Generator) -> CurrentProfile:
    peak = rng.uniform(-cfg.amp_bound, cfg.amp_bound)
    t = cfg.grid
    up = peak * t / cfg.tri_t1
    down = peak * (cfg.tri_t2 - t) / (cfg.tri_t2 - cfg.tri_t1)
    i = np.where(t <= cfg.tri_t1, up, np.where(t <= cfg.tri_t2, down, 0.0))
    return CurrentProfile(t, i, cfg.amp_bound)


def gen_pulse(cfg: FamilyConfig, rng: np.random.Generator) -> CurrentProfile:
    n_h = rng.integers(1, 11)                       # pulses per hour
    n_p = max(1, int(np.floor(n_h * cfg.t_max / 3600.0)))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    amp = sign * rng.uniform(0.2, 1.5) * cfg.c_nom
    period = cfg.t_max / n_p
    duty = rng.uniform(0.2, 0.7)
    width = duty * period
    t = cfg.grid
    phase = np.mod(t, period)
    # pulses k = 0..n_p-1 live on [k*P, k*P + width); t = t_max starts a
    # phantom pulse n_p and stays off
    i = np.where((phase < width) & (t < cfg.t_max), amp, 0.0)
    return CurrentProfile(t, i, cfg.amp_bound)


def kernel_per(t, t_prime, t_max: float, length_scale: float = 1.0):
    """Periodic squared-exponential covariance with period t_max."""
    if not length_scale > 0:
        raise ValueError(f"length_scale must be > 0, got {length_scale}")
    return np.exp(-2.0 * np.sin(np.pi * (np.asarray(t) - np.asarray(t_prime)) / t_max) ** 2
                  / length_scale**2)


def grf_draw(cfg: FamilyConfig, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Pre-clipping GRF sample(s) on the profile grid, shape (size, n)."""
    if cfg.n > 4096:
        raise ValueError(f"GRF grid too large for dense Cholesky: n={cfg.n}")
    t = cfg.grid
    K = kernel_per(t[:, None], t[None, :], cfg.t_max, cfg.grf_length_scale)
    eps = 1e-3
    for _ in range(9):
        try:
            L = np.linalg.cholesky(K + eps**2 * np.eye(cfg.n))
            break
        except np.linalg.LinAlgError:
            eps *= 2.0
    else:
        raise RuntimeError("GRF covariance not factorizable after jitter escalation")
    z = rng.standard_normal((size, cfg.n))
    return z @ L.T


def gen_grf(cfg: FamilyConfig, rng: np.random.Generator) -> CurrentProfile:
    y = grf_draw(cfg, rng)[0]
    i = np.clip(y, -1.5, 1.5) * cfg.c_nom
    return CurrentProfile(cfg.grid, i, cfg.amp_bound)


_GENERATORS = {Family.CC: gen_cc, Family.TRI: gen_tri, Family.PLS: gen_pulse, Family.GRF: gen_grf}


def gen_profile(cfg: FamilyConfig, rng: np.random.Generator) -> CurrentProfile:
    return _GENERATORS[cfg.family](cfg, rng)


def _log_normalize(x, lo, hi):
    return 2.0 * (np.log10(x) - np.log10(lo)) / (np.log10(hi) - np.log10(lo)) - 1.0


def sample_parameters(count: int, ranges: dict | None = None,
                      seed: int = 0) -> list[CellInstance]:
    """Sobol points mapped log-uniformly onto the parameter ranges.

    soc0 rides in the fifth Sobol dimension and is rounded to the nearest
    0.01; the normalized 4-vector is the [-1,1] image of the log10 values.
    """
    ranges = dict(DEFAULT_RANGES, **(ranges or {}))
    for key, (lo, hi) in ranges.items():
        if not 0 < lo < hi:
            raise ValueError(f"range for {key} must satisfy 0 < lo < hi, got ({lo}, {hi})")
    sob = qmc.Sobol(d=5, scramble=True, seed=seed)
    # draw a power-of-two block (keeps the net balanced) and truncate
    u = sob.random(1 << max(0, int(np.ceil(np.log2(count))))) [:count]
    out = []
    keys = ("d_n", "d_p", "r_n", "r_p")
    for row in u:
        logs = [np.log10(ranges[k][0]) + row[j] * (np.log10(ranges[k][1]) - np.log10(ranges[k][0]))
                for j, k in enumerate(keys)]
        vals = [10.0**lg for lg in logs]
        norm = np.array([_log_normalize(vals[j], *ranges[k]) for j, k in enumerate(keys)])
        soc0 = round(float(row[4]) * 100.0) / 100.0
        out.append(CellInstance(log10_dn=logs[0], log10_dp=logs[1],
                                r_n=vals[2], r_p=vals[3], soc0=soc0, normalized=norm))
    return out


def child_seed(master: int, index: int) -> int:
    """Documented splitting rule for per-sample generator seeds."""
    return master ^ index
