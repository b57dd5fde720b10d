"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to watch the lines live;
the heavy criteria (training, identification) share session fixtures. Wall
times are asserted on this machine, so the whole module is budgeted to fit
inside the stated runtimes on a single CPU core.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from opspm import autodiff as ad
from opspm import bayesopt as bo
from opspm import operators as nn
from opspm import training as tr
from opspm.excitation import (CurrentProfile, Family, FamilyConfig, gen_grf, gen_profile,
                              grf_draw, kernel_per)
from opspm.params import OcpCurve, eval_ocp, prada_lfp_cell, soc_to_stoichiometry
from opspm.solver import RadialGrid, simulate, surface_flux

# desk-scale knobs (paper-scale counts stay available through the CLI)
FNO_ARCH = {"width": 16, "depth": 4, "modes": (8, 8)}
FNO_EPOCHS = 20
PEFNO_ARCH = {"width": 14, "depth": 4, "modes": (5, 10), "pe_width": 32}
PEFNO_EPOCHS = 12
SUPPORT_ARCH = {"width": 14, "depth": 4, "modes": (5, 10), "pe_width": 32}
SUPPORT_EPOCHS = 14
N_EXPERIMENTS = 20

RESULTS = []


def report(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print("\n" + line)
    RESULTS.append(line)
    assert ok, line


@pytest.fixture(scope="session")
def experiment_cell():
    # area chosen so a 1C, 1 h trace stays inside the stoichiometry window
    return replace(prada_lfp_cell(), area=1.0)


# ------------------------------------------------------------------------ C1

def test_c01_solver_conservation():
    t0 = time.monotonic()
    cell = prada_lfp_cell()
    worst = 0.0
    fams = [Family.CC, Family.TRI, Family.PLS, Family.GRF]
    for k in range(50):
        fam = fams[k % 4]
        profile = gen_profile(FamilyConfig(fam, c_nom=cell.capacity),
                              np.random.default_rng(5000 + k))
        res = simulate(cell, profile, 0.25 + 0.01 * k)
        for side, field in (("n", res.field_n), ("p", res.field_p)):
            el = cell.electrode(side)
            grid = RadialGrid(field.values.shape[0], el.particle_radius)
            totals = grid.shell_volumes @ field.values
            dt = field.t_axis[1] - field.t_axis[0]
            t_mid = field.t_axis[:-1] + dt / 2
            flux = np.array([surface_flux(profile.eval(t), el, side, cell) for t in t_mid])
            drift = -grid.surface_area * np.cumsum(flux) * dt
            err = np.abs(totals[1:] - (totals[0] + drift)) / totals[0]
            worst = max(worst, float(err.max()))
    el = time.monotonic() - t0
    report("C1 solver conservation",
           worst <= 1e-9 and el < 60.0,
           f"worst relative balance error {worst:.2e} over 50 profiles ({el:.0f}s)")


# ------------------------------------------------------------------------ C2

def _surface_functional(cell, n_r, dt):
    t_max = 1800.0
    n = int(t_max / dt) + 1
    t = np.linspace(0, t_max, n)
    profile = CurrentProfile(t, np.full(n, cell.capacity), 1.5 * cell.capacity)
    res = simulate(cell, profile, 0.5,
                   grid_n=RadialGrid(n_r, cell.negative.particle_radius),
                   grid_p=RadialGrid(n_r, cell.positive.particle_radius), dt=dt)
    el = cell.negative
    grid = RadialGrid(n_r, el.particle_radius)
    flux = surface_flux(cell.capacity, el, "n", cell)
    return res.field_n.values[-1, -1] + (grid.dr / 2) * (-flux / el.diffusivity)


def test_c02_solver_convergence(experiment_cell):
    t0 = time.monotonic()
    cell = experiment_cell
    sp = [_surface_functional(cell, n_r, 2.0) for n_r in (10, 20, 40)]
    p_space = math.log2(abs(sp[0] - sp[1]) / abs(sp[1] - sp[2]))
    tm = [_surface_functional(cell, 60, dt) for dt in (120.0, 60.0, 30.0)]
    p_time = math.log2(abs(tm[0] - tm[1]) / abs(tm[1] - tm[2]))
    el = time.monotonic() - t0
    report("C2 solver convergence",
           p_space >= 1.9 and p_time >= 1.9 and el < 60.0,
           f"observed orders: space {p_space:.2f}, time {p_time:.2f} ({el:.0f}s)")


# ------------------------------------------------------------------------ C3

def test_c03_ocv_identity():
    cell = prada_lfp_cell()
    t = np.linspace(0, 3600, 121)
    profile = CurrentProfile(t, np.zeros(121), 1.5 * cell.capacity)
    worst = 0.0
    for soc0 in (0.1, 0.45, 0.8):
        res = simulate(cell, profile, soc0)
        ocv = eval_ocp(cell.positive.ocp_curve, soc_to_stoichiometry(soc0, cell.positive, "p")) \
            - eval_ocp(cell.negative.ocp_curve, soc_to_stoichiometry(soc0, cell.negative, "n"))
        worst = max(worst, float(np.max(np.abs(res.voltage - ocv))))
    report("C3 OCV identity", worst <= 1e-12,
           f"max |V - (U_p - U_n)| = {worst:.2e} V at zero current")


# ------------------------------------------------------------------------ C4

def test_c04_ocp_closed_forms():
    from tests.test_params import ocp_oracle
    worst = 0.0
    for curve in OcpCurve:
        for sto in np.linspace(0.0, 1.0, 100):
            worst = max(worst, abs(eval_ocp(curve, float(sto)) - ocp_oracle(curve, float(sto))))
    report("C4 OCP closed forms", worst <= 1e-10,
           f"max |impl - scalar oracle| = {worst:.2e} V over 100 stoichiometries x 3 curves")


# ------------------------------------------------------------------------ C5

def test_c05_autodiff():
    t0 = time.monotonic()
    from tests.test_autodiff import build_everything_graph, make_leaves
    leaves = make_leaves()
    loss = build_everything_graph(leaves)
    tape = ad.Tape(loss)
    worst_fd = max(ad.finite_diff_check(tape, leaf, h=1e-5) for leaf in leaves)

    # adjoint consistency over every op kind, via the dedicated per-op tests
    import tests.test_autodiff as ta
    worst_adj = 0.0
    for name in dir(ta):
        if name.startswith("test_adjoint_"):
            getattr(ta, name)()   # each asserts <Ju,v> == <u,J^T v> to 1e-10
    el = time.monotonic() - t0
    report("C5 autodiff", worst_fd < 1e-5 and el < 120.0,
           f"max FD relative error {worst_fd:.2e}; all adjoint pairings within 1e-10 ({el:.0f}s)")


# ------------------------------------------------------------------------ C6

def test_c06_spectral_correctness():
    from tests.test_operators import dense_spectral_oracle
    rng = np.random.default_rng(12)
    worst = 0.0
    for kr, kt in ((4, 4), (5, 3), (6, 6)):
        v = rng.standard_normal((2, 3, 12, 12))
        modes = 0.4 * (rng.standard_normal((kr, kt, 3, 3))
                       + 1j * rng.standard_normal((kr, kt, 3, 3)))
        got = nn.spectral_conv(ad.constant(v), ad.constant(modes)).data
        ref = dense_spectral_oracle(v, modes, nn.kept_rows(kr, 12), np.arange(kt))
        worst = max(worst, float(np.abs(got - ref).max()))
    report("C6 spectral correctness", worst <= 1e-10,
           f"max |spectral_conv - dense DFT oracle| = {worst:.2e} on 12x12 grids")


# ------------------------------------------------------------------------ C7

def test_c07_discretization_consistency():
    from tests.test_operators import band_limited
    rng = np.random.default_rng(5)
    w = nn.init_fno(rng, width=10, depth=3, modes=(6, 8), pad=(0, 0))
    H, W = 16, 24
    x = band_limited(1, 4, H, W, 6, 8, rng)
    X = np.fft.fft(x, axis=-1)
    Xf = np.zeros((1, 4, H, 2 * W), dtype=complex)
    Xf[..., :W // 2] = X[..., :W // 2]
    Xf[..., -(W // 2):] = X[..., -(W // 2):]
    x_fine = 2.0 * np.fft.ifft(Xf, axis=-1).real
    coarse = nn.fno_forward(w, x).data
    fine = nn.fno_forward(w, x_fine).data
    rel = np.linalg.norm(fine[..., ::2] - coarse) / np.linalg.norm(coarse)
    report("C7 discretization consistency", rel < 0.02,
           f"nL2 gap between n_t and 2 n_t evaluations: {100 * rel:.3f}% (limit 2%)")


# ------------------------------------------------------------------------ C8

@pytest.fixture(scope="session")
def fno_training():
    t0 = time.monotonic()
    ds = tr.generate_dataset(tr.DatasetConfig(regime="fno", families=("cc", "tri"),
                                              count=500, seed=11))
    cfg = tr.TrainConfig(epochs=FNO_EPOCHS, batch_size=32, seed=0, arch=FNO_ARCH)
    model, hist = tr.train("fno", ds, cfg)
    return ds, model, hist, time.monotonic() - t0


@pytest.fixture(scope="session")
def pefno_training():
    t0 = time.monotonic()
    ds = tr.generate_dataset(tr.DatasetConfig(regime="pefno", families=("cc",),
                                              count=2000, seed=21))
    cfg = tr.TrainConfig(epochs=PEFNO_EPOCHS, batch_size=64, seed=0, arch=PEFNO_ARCH)
    model, hist = tr.train("pefno", ds, cfg)
    return ds, model, hist, time.monotonic() - t0


def test_c08_desk_scale_training(fno_training, pefno_training):
    _, _, hist_f, t_f = fno_training
    _, _, hist_p, t_p = pefno_training
    fno_nl2 = 0.5 * (hist_f["sides"]["n"]["best_test_nl2"]
                     + hist_f["sides"]["p"]["best_test_nl2"])
    pe_nl2 = 0.5 * (hist_p["sides"]["n"]["best_test_nl2"]
                    + hist_p["sides"]["p"]["best_test_nl2"])
    total = t_f + t_p
    report("C8 desk-scale training",
           fno_nl2 <= 0.02 and pe_nl2 <= 0.05 and total < 1800.0,
           f"FNO held-out nL2 {100 * fno_nl2:.2f}% (limit 2%), "
           f"PE-FNO {100 * pe_nl2:.2f}% (limit 5%), wall {total:.0f}s")


# ------------------------------------------------------------------------ C9

def test_c09_metric_formulas():
    m = tr.metric_suite(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    eps = 1e-12
    ok = (m["mae"] == 2.0 and m["rmse"] == 2.0
          and m["nl2"] == math.sqrt(8.0) / (5.0 + eps)
          and m["nlinf"] == 2.0 / (4.0 + eps))
    report("C9 metric formulas", ok,
           f"hand case -> MAE {m['mae']}, RMSE {m['rmse']}, nL2 {m['nl2']:.6f} "
           f"(= sqrt(8)/(5+eps)), nLinf {m['nlinf']:.6f} (= 2/(4+eps))")


# ----------------------------------------------------------------------- C10

def test_c10_grf_statistics():
    cfg = FamilyConfig(Family.GRF, n=61)
    draws = grf_draw(cfg, np.random.default_rng(42), size=5000)
    corr = float(np.corrcoef(draws[:, 0], draws[:, -1])[0, 1])
    t = cfg.grid
    emp = np.cov(draws.T, bias=True)
    worst = 0.0
    for lag in (3, 9, 17, 25, 30):
        want = kernel_per(t[0], t[lag], cfg.t_max, 1.0)
        got = np.mean([emp[i, i + lag] for i in range(cfg.n - lag)])
        worst = max(worst, abs(float(got) - float(want)))
    report("C10 GRF statistics", worst < 0.05 and corr >= 0.99,
           f"worst covariance gap {worst:.3f} over 5 lags; endpoint corr {corr:.4f}")


# ----------------------------------------------------------------------- C11

@pytest.fixture(scope="session")
def bo_experiments(experiment_cell):
    """Noiseless 1C CC and GRF traces; the truth comes from a 4x finer grid
    than the identification forward model (no inverse crime), subsampled onto
    the shared 121-point voltage grid."""
    cell = experiment_cell
    rng = np.random.default_rng(424242)
    out = []
    for k in range(N_EXPERIMENTS):
        fam = "cc" if k % 2 == 0 else "grf"
        rho_true = np.array([rng.uniform(-15.3, -14.2), rng.uniform(-17.5, -15.0)])
        if fam == "cc":
            t = np.linspace(0, 3600, 121)
            prof = CurrentProfile(t, np.full(121, cell.capacity), 1.5 * cell.capacity)
        else:
            prof = gen_grf(FamilyConfig(Family.GRF, c_nom=cell.capacity),
                           np.random.default_rng(1000 + k))
        truth_cell = cell.with_diffusivities(10 ** rho_true[0], 10 ** rho_true[1])
        fine = simulate(truth_cell, prof, 0.5,
                        grid_n=RadialGrid(120, truth_cell.negative.particle_radius),
                        grid_p=RadialGrid(120, truth_cell.positive.particle_radius),
                        dt=7.5)
        v_data = fine.voltage[::4]
        assert np.all(np.isfinite(v_data))
        out.append((fam, rho_true, prof, v_data))
    return out


@pytest.fixture(scope="session")
def bo_reference_runs(experiment_cell, bo_experiments):
    t0 = time.monotonic()
    traces = []
    for k, (fam, rho_true, prof, v_data) in enumerate(bo_experiments):
        fwd = bo.ReferenceForward(experiment_cell, prof, 0.5)
        traces.append(bo.identify(fwd, v_data, n_init=12, n_total=60, seed=9000 + k))
    return traces, time.monotonic() - t0


def test_c11_bo_recovery_reference(bo_experiments, bo_reference_runs):
    traces, elapsed = bo_reference_runs
    anode = [abs(t.rho_min[0] - e[1][0]) for t, e in zip(traces, bo_experiments)]
    cathode = [abs(t.rho_min[1] - e[1][1]) for t, e in zip(traces, bo_experiments)]
    monotone = all(np.all(t.best_so_far[1:] <= t.best_so_far[:-1]) for t in traces)
    med_a, med_c = float(np.median(anode)), float(np.median(cathode))
    report("C11 BO recovery (reference forward)",
           med_a <= 0.3 and monotone and med_c > med_a and elapsed < 1200.0,
           f"median anode error {med_a:.3f} dex (limit 0.3), median cathode "
           f"{med_c:.3f} dex, curves nonincreasing={monotone}, wall {elapsed:.0f}s")


# ----------------------------------------------------------------------- C12

@pytest.fixture(scope="session")
def support_surrogate(experiment_cell):
    ds = tr.generate_dataset(tr.DatasetConfig(
        regime="pefno", families=("cc", "grf"), count=700, seed=33,
        cell=experiment_cell, vary_radii=False, vary_soc0=False, soc0_fixed=0.5))
    cfg = tr.TrainConfig(epochs=SUPPORT_EPOCHS, batch_size=64, seed=0, arch=SUPPORT_ARCH)
    model, hist = tr.train("pefno", ds, cfg)
    return ds, model


def test_c12_bo_with_surrogate(experiment_cell, bo_experiments, bo_reference_runs,
                               support_surrogate):
    ds, model = support_surrogate
    ref_traces, _ = bo_reference_runs
    sur_losses = []
    for k, (fam, rho_true, prof, v_data) in enumerate(bo_experiments):
        fwd = bo.SurrogateForward(model, ds.manifest, experiment_cell, prof, 0.5)
        trace = bo.identify(fwd, v_data, n_init=12, n_total=60, seed=9000 + k)
        sur_losses.append(trace.final_loss)
    med_sur = float(np.median(sur_losses))
    med_ref = float(np.median([t.final_loss for t in ref_traces]))
    ratio = med_sur / med_ref
    report("C12 BO with surrogate forward", ratio <= 30.0,
           f"median final loss: surrogate {med_sur:.3e} vs reference {med_ref:.3e} "
           f"-> ratio {ratio:.1f} (limit 30)")


# ----------------------------------------------------------------------- C13

@pytest.fixture(scope="session")
def deeponet_for_bench():
    ds = tr.generate_dataset(tr.DatasetConfig(regime="deeponet", families=("cc",),
                                              count=300, seed=44))
    cfg = tr.TrainConfig(epochs=12, batch_size=32, seed=0,
                         arch={"width": 128, "depth": 5, "p": 16})
    model, hist = tr.train("deeponet", ds, cfg)
    return ds, model


def test_c13_speed_ordering(pefno_training, deeponet_for_bench):
    t0 = time.monotonic()
    ds_pe, model_pe, _, _ = pefno_training
    ds_do, model_do = deeponet_for_bench
    B = 50
    cell = tr.cell_from_dict(ds_pe.manifest["cell"])

    def run_reference():
        for i in range(B):
            inst = ds_pe.instance(i)
            c = cell.with_diffusivities(10 ** inst.log10_dn, 10 ** inst.log10_dp) \
                .with_radii(inst.r_n, inst.r_p)
            simulate(c, ds_pe.profile(i), inst.soc0,
                     grid_n=RadialGrid(30, inst.r_n), grid_p=RadialGrid(30, inst.r_p))

    def timed(fn, reps=3):
        fn()
        samples = []
        for _ in range(reps):
            s = time.monotonic()
            fn()
            samples.append(time.monotonic() - s)
        return float(np.median(samples)) / B

    ref = timed(run_reference)
    lanes = {}
    for tag, model, ds in (("pefno", model_pe, ds_pe), ("deeponet", model_do, ds_do)):
        idx = np.arange(min(B, len(ds)))
        inputs = {s: tr.assemble_inputs(model, ds, idx, s) for s in ("n", "p")}

        def run_surrogate():
            for s in ("n", "p"):
                model.forward(s, inputs[s])

        lanes[tag] = timed(run_surrogate) * B / len(idx)
    el = time.monotonic() - t0
    fastest = min(lanes.values())
    report("C13 speed ordering", fastest < ref and el < 300.0,
           f"per-trajectory: reference 1-thread {1e3 * ref:.2f} ms | "
           + " | ".join(f"{k} {1e3 * v:.2f} ms" for k, v in lanes.items())
           + f" ({el:.0f}s)")


def test_c99_summary():
    print("\n" + "=" * 72)
    for line in RESULTS:
        print(line)
    print("=" * 72)
