"""Command-line entry point: simulate / generate / train / eval / bench / identify."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import bayesopt as bo
from . import io as opio
from . import training as tr
from .excitation import Family, FamilyConfig, gen_profile
from .params import CHEMISTRIES, CellParameters, FluxSign, OcpCurve
from .solver import RadialGrid, simulate

CELL_SCHEMA = {
    "chemistry": str, "capacity": float, "area": float, "temperature": float,
    "flux_sign": str,
    **{f"{side}_{key}": float for side in ("neg", "pos")
       for key in ("thickness", "volume_fraction", "particle_radius", "diffusivity",
                   "c_max", "sto_lo", "sto_hi", "rate_prefactor")},
    "neg_ocp": str, "pos_ocp": str,
}


def load_cell(path=None, area=None) -> CellParameters:
    cfg = opio.parse_config_file(path, CELL_SCHEMA) if path else {}
    cell = CHEMISTRIES[cfg.pop("chemistry", "prada_lfp")]()
    for side in ("neg", "pos"):
        el = cell.negative if side == "neg" else cell.positive
        kw = {}
        for key in ("thickness", "volume_fraction", "particle_radius", "diffusivity",
                    "c_max", "rate_prefactor"):
            if f"{side}_{key}" in cfg:
                kw[key] = cfg.pop(f"{side}_{key}")
        lo = cfg.pop(f"{side}_sto_lo", el.sto_window[0])
        hi = cfg.pop(f"{side}_sto_hi", el.sto_window[1])
        if (lo, hi) != el.sto_window:
            kw["sto_window"] = (lo, hi)
        if f"{side}_ocp" in cfg:
            kw["ocp_curve"] = OcpCurve(cfg.pop(f"{side}_ocp"))
        if kw:
            el = replace(el, **kw)
        cell = replace(cell, **{"negative" if side == "neg" else "positive": el})
    if "capacity" in cfg:
        cell = replace(cell, capacity=cfg.pop("capacity"))
    if "temperature" in cfg:
        from .params import PhysicalConstants
        cell = replace(cell, constants=PhysicalConstants(temperature=cfg.pop("temperature")))
    if "flux_sign" in cfg:
        cell = replace(cell, flux_sign=FluxSign(cfg.pop("flux_sign")))
    if "area" in cfg:
        cell = replace(cell, area=cfg.pop("area"))
    if area is not None:
        cell = replace(cell, area=area)
    return cell


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _resolved_config(out: Path, name: str, args, extra=None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func" and v is not None}
    cfg.update(extra or {})
    opio.write_resolved_config(out / f"{name}.resolved.cfg", cfg)


def cmd_simulate(args) -> int:
    out = _outdir(args)
    cell = load_cell(args.params, area=args.area)
    fam_cfg = FamilyConfig(Family(args.family), t_max=args.t_max, n=args.n_profile,
                           c_nom=cell.capacity)
    rng = np.random.default_rng(args.seed)
    profile = gen_profile(fam_cfg, rng)
    res = simulate(cell, profile, args.soc0,
                   grid_n=RadialGrid(args.n_r, cell.negative.particle_radius),
                   grid_p=RadialGrid(args.n_r, cell.positive.particle_radius),
                   dt=args.dt)
    np.save(out / "field_n.npy", res.field_n.values)
    np.save(out / "field_p.npy", res.field_p.values)
    t = res.t_axis
    _write_csv(out / "voltage.csv", ["t_s", "current_a", "voltage_v"],
               [[f"{t[j]:.6f}", f"{profile.eval(t[j]):.9e}", f"{res.voltage[j]:.9e}"]
                for j in range(len(t))])
    _resolved_config(out, "simulate", args,
                     {"violated_domain": res.violated_domain, "failed": res.failed})
    print(f"simulate: wrote {out}/field_n.npy field_p.npy voltage.csv "
          f"(violated_domain={res.violated_domain})")
    return 0


def cmd_generate(args) -> int:
    out = _outdir(args)
    cell = load_cell(args.params, area=args.area)
    cfg = tr.DatasetConfig(regime=args.regime, families=tuple(args.families.split(",")),
                           count=args.count, seed=args.seed, cell=cell, n_r=args.n_r,
                           dt=args.dt, t_max=args.t_max, n_profile=args.n_profile,
                           soc0_fixed=args.soc0, vary_radii=not args.fixed_radii,
                           vary_soc0=not args.fixed_soc0)
    ds = tr.generate_dataset(cfg, out_path=out / "dataset.bin")
    with open(out / "dataset.manifest.json", "w", encoding="utf-8") as f:
        json.dump(ds.manifest, f, indent=1, sort_keys=True)
    _resolved_config(out, "generate", args,
                     {"written": len(ds), "failed": ds.manifest["count_failed"]})
    print(f"generate: {len(ds)} samples -> {out}/dataset.bin "
          f"(violated {int(ds.violated.sum())}, failed {ds.manifest['count_failed']})")
    return 0


def cmd_train(args) -> int:
    out = _outdir(args)
    ds = tr.Dataset.load(args.dataset)
    arch = {}
    if args.width:
        arch["width"] = args.width
    if args.depth:
        arch["depth"] = args.depth
    if args.modes:
        arch["modes"] = tuple(int(m) for m in args.modes.split(","))
    if args.p:
        arch["p"] = args.p
    cfg = tr.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         seed=args.seed, arch=arch)
    model, hist = tr.train(args.model, ds, cfg)
    model.save_checkpoint(out / "checkpoint.bin", opio.manifest_hash(ds.manifest))
    rows = []
    for side, h in hist["sides"].items():
        for e in h["history"]:
            rows.append([side, e["epoch"], f"{e['train_nl2']:.9e}", f"{e['test_nl2']:.9e}"])
    _write_csv(out / "history.csv", ["side", "epoch", "train_nl2", "test_nl2"], rows)
    _resolved_config(out, "train", args,
                     {"best_test_nl2_n": hist["sides"].get("n", {}).get("best_test_nl2"),
                      "best_test_nl2_p": hist["sides"].get("p", {}).get("best_test_nl2")})
    print(f"train: checkpoint -> {out}/checkpoint.bin; "
          + "; ".join(f"best test nL2 ({s}) {h['best_test_nl2']:.4f}"
                      for s, h in hist["sides"].items()))
    return 0


def cmd_eval(args) -> int:
    out = _outdir(args)
    ds = tr.Dataset.load(args.dataset)
    model = tr.SurrogateModel.from_checkpoint(args.checkpoint)
    report = tr.evaluate_metrics(model, ds)
    rows = [[r["family"], r["target"], r["count"], f"{r['mae']:.9e}", f"{r['rmse']:.9e}",
             f"{r['nl2']:.9e}", f"{r['nlinf']:.9e}"] for r in report.flat_rows()]
    _write_csv(out / "metrics.csv", ["family", "target", "count", "mae", "rmse", "nl2", "nlinf"], rows)
    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        json.dump({"per_family": report.per_family, "counts": report.counts,
                   "excluded": report.excluded}, f, indent=1, sort_keys=True)
    _resolved_config(out, "eval", args)
    print(f"eval: metrics -> {out}/metrics.csv ({report.excluded} out-of-domain excluded)")
    return 0


def _bench_sim_worker(payload) -> int:
    cell_d, prof_i, t_grid, cur_scale, inst, n_r, dt, soc0 = payload
    from .excitation import CurrentProfile
    cell = tr.cell_from_dict(cell_d)
    cell = cell.with_diffusivities(10.0 ** inst[0], 10.0 ** inst[1]).with_radii(inst[2], inst[3])
    profile = CurrentProfile(np.asarray(t_grid), np.asarray(prof_i), cur_scale)
    simulate(cell, profile, soc0, grid_n=RadialGrid(n_r, inst[2]),
             grid_p=RadialGrid(n_r, inst[3]), dt=dt)
    return 0


def cmd_bench(args) -> int:
    out = _outdir(args)
    ds = tr.Dataset.load(args.dataset)
    B = min(args.batch, len(ds))
    grid = ds.manifest["grid"]
    payloads = []
    for i in range(B):
        row = ds.instances[i]
        payloads.append((ds.manifest["cell"], ds.profiles_i[i], ds.t_profile,
                         ds.current_scale, (row[0], row[1], row[2], row[3]),
                         grid["n_r"], grid["dt"], float(row[4])))
    workers_list = [int(w) for w in args.workers.split(",")]
    cap = os.environ.get("OPSPM_THREADS")
    if cap:
        workers_list = [min(w, int(cap)) for w in workers_list]
    rows = []

    def timed(run, warmups=3, reps=5):
        for _ in range(warmups):
            run()
        samples = []
        for _ in range(reps):
            t0 = time.monotonic()
            run()
            samples.append(time.monotonic() - t0)
        return float(np.median(samples))

    for nw in sorted(set(workers_list)):
        if nw == 1:
            total = timed(lambda: [_bench_sim_worker(p) for p in payloads],
                          warmups=args.warmups, reps=args.repeats)
        else:
            ctx = get_context("fork")
            with ctx.Pool(nw) as pool:
                total = timed(lambda: pool.map(_bench_sim_worker, payloads),
                              warmups=args.warmups, reps=args.repeats)
        rows.append(["reference", nw, B, f"{total:.9f}", f"{total / B:.9f}"])

    if args.checkpoint:
        model = tr.SurrogateModel.from_checkpoint(args.checkpoint)
        idx = np.arange(B)
        inputs = {side: tr.assemble_inputs(model, ds, idx, side) for side in ("n", "p")}

        def run_surrogate():
            for side in ("n", "p"):
                model.forward(side, inputs[side])

        total = timed(run_surrogate, warmups=args.warmups, reps=args.repeats)
        rows.append(["surrogate", B, B, f"{total:.9f}", f"{total / B:.9f}"])

    _write_csv(out / "benchmark.csv",
               ["lane", "threads_or_batch", "trajectories", "total_s", "per_trajectory_s"],
               rows)
    _resolved_config(out, "bench", args)
    for r in rows:
        print(f"bench: {r[0]:10s} workers/batch={r[1]:>3} per-trajectory {r[4]} s")
    return 0


def cmd_identify(args) -> int:
    out = _outdir(args)
    cell = load_cell(args.params, area=args.area)
    fam_cfg = FamilyConfig(Family(args.family), t_max=args.t_max, n=args.n_profile,
                           c_nom=cell.capacity)
    rng = np.random.default_rng(args.seed)
    profile = gen_profile(fam_cfg, rng)
    if args.rho_true:
        rho_true = [float(x) for x in args.rho_true.split(",")]
    else:
        rho_true = [np.log10(cell.negative.diffusivity), np.log10(cell.positive.diffusivity)]
    data_fwd = bo.ReferenceForward(cell.with_diffusivities(10 ** rho_true[0], 10 ** rho_true[1]),
                                   profile, args.soc0, n_r=args.n_r, dt=args.dt)
    v_data = data_fwd(np.array(rho_true))
    if not np.all(np.isfinite(v_data)):
        print("identify: reference trace is singular for this experiment "
              "(surface stoichiometry railed); choose another seed/current/area",
              file=sys.stderr)
        return 1
    if args.forward == "reference":
        forward = bo.ReferenceForward(cell, profile, args.soc0, n_r=args.n_r, dt=args.dt)
    else:
        if not args.checkpoint or not args.dataset:
            print("identify: surrogate forward needs --checkpoint and --dataset",
                  file=sys.stderr)
            return 1
        ds = tr.Dataset.load(args.dataset)
        model = tr.SurrogateModel.from_checkpoint(args.checkpoint)
        forward = bo.SurrogateForward(model, ds.manifest, cell, profile, args.soc0)
    trace = bo.identify(forward, v_data, n_init=args.n_init, n_total=args.n_total,
                        seed=args.seed)
    _write_csv(out / "identify.csv",
               ["iteration", "log10_dn", "log10_dp", "loss", "best_so_far"],
               [[k, f"{trace.points[k][0]:.9f}", f"{trace.points[k][1]:.9f}",
                 f"{trace.losses[k]:.9e}", f"{trace.best_so_far[k]:.9e}"]
                for k in range(len(trace.losses))])
    summary = {"rho_min": list(trace.rho_min), "rho_true": rho_true,
               "final_loss": trace.final_loss, "forward": trace.forward_tag,
               "anode_error_dex": abs(trace.rho_min[0] - rho_true[0]),
               "cathode_error_dex": abs(trace.rho_min[1] - rho_true[1])}
    with open(out / "identify.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    _resolved_config(out, "identify", args, {"final_loss": trace.final_loss})
    print(f"identify: rho_min = {trace.rho_min} (true {rho_true}), "
          f"final loss {trace.final_loss:.3e} -> {out}/identify.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opspm",
                                 description="single-particle model, neural-operator "
                                             "surrogates, and Bayesian identification")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        p.add_argument("--params", default=None, help="cell parameter config file")
        p.add_argument("--area", type=float, default=None, help="override cell area [m^2]")
        p.add_argument("--n-r", type=int, default=30)
        p.add_argument("--dt", type=float, default=30.0)
        p.add_argument("--t-max", type=float, default=3600.0)
        p.add_argument("--n-profile", type=int, default=121)

    p = sub.add_parser("simulate", help="run the reference solver on one profile")
    common(p)
    p.add_argument("--family", default="cc", choices=[f.value for f in Family])
    p.add_argument("--soc0", type=float, default=0.5)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate", help="generate a training dataset container")
    common(p)
    p.add_argument("--regime", default="fno", choices=list(tr.REGIMES))
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--families", default="cc")
    p.add_argument("--soc0", type=float, default=0.5)
    p.add_argument("--fixed-radii", action="store_true",
                   help="pefno regime: keep radii at the cell values")
    p.add_argument("--fixed-soc0", action="store_true",
                   help="pefno regime: keep soc0 at --soc0")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a surrogate on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True, choices=list(tr.REGIMES))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--modes", default=None, help="k_r,k_t")
    p.add_argument("--p", type=int, default=None, help="deeponet basis count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-trajectory latency: solver vs surrogate")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--workers", default="1,8,16")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmups", type=int, default=3)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("identify", help="Bayesian diffusivity identification")
    common(p)
    p.add_argument("--forward", default="reference", choices=["reference", "surrogate"])
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--family", default="cc", choices=[f.value for f in Family])
    p.add_argument("--soc0", type=float, default=0.5)
    p.add_argument("--rho-true", default=None,
                   help="log10 diffusivity pair used to synthesize the data")
    p.add_argument("--n-init", type=int, default=12)
    p.add_argument("--n-total", type=int, default=60)
    p.set_defaults(func=cmd_identify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError, ArithmeticError) as exc:
        print(f"opspm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
