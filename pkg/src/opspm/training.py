"""Dataset generation, training loop, and the four-metric evaluation protocol."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import io as opio
from . import operators as nn
from .excitation import (CellInstance, CurrentProfile, DEFAULT_RANGES, Family, FamilyConfig,
                         child_seed, gen_profile, sample_parameters)
from .params import CellParameters, prada_lfp_cell
from .solver import RadialGrid, simulate

REGIMES = ("deeponet", "fno", "pefno")
DEFAULT_EPOCHS = {"deeponet": 15, "fno": 25, "pefno": 50}


# ------------------------------------------------------------------ dataset

@dataclass
class DatasetConfig:
    regime: str = "fno"
    families: tuple[str, ...] = ("cc",)
    count: int = 500
    seed: int = 0
    cell: CellParameters = field(default_factory=prada_lfp_cell)
    n_r: int = 30
    dt: float = 30.0
    t_max: float = 3600.0
    n_profile: int = 121
    soc0_fixed: float = 0.5      # used by the deeponet regime (and when vary_soc0 is off)
    vary_radii: bool = True      # pefno regime; off when radii are known a priori
    vary_soc0: bool = True       # fno/pefno regimes; off for identification support sets
    ranges: dict | None = None
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        for fam in self.families:
            Family(fam)


@dataclass
class Sample:
    profile: CurrentProfile
    instance: CellInstance
    field_n: np.ndarray
    field_p: np.ndarray
    voltage: np.ndarray
    violated_domain: bool

    @property
    def c0_n(self) -> np.ndarray:
        return self.field_n[:, 0]

    @property
    def c0_p(self) -> np.ndarray:
        return self.field_p[:, 0]


class Dataset:
    """In-memory view of one generated container."""

    def __init__(self, manifest: dict, arrays: dict):
        self.manifest = manifest
        self.profiles_i = arrays["profiles_i"]
        self.instances = arrays["instances"]
        self.field_n = arrays["field_n"]
        self.field_p = arrays["field_p"]
        self.voltage = arrays["voltage"]
        self.violated = np.asarray(arrays["violated"], dtype=bool)

    def __len__(self):
        return self.profiles_i.shape[0]

    @property
    def t_profile(self) -> np.ndarray:
        g = self.manifest["grid"]
        return np.linspace(0.0, g["t_max"], g["n_profile"])

    @property
    def current_scale(self) -> float:
        return self.manifest["scaling"]["current_scale"]

    def profile(self, i: int) -> CurrentProfile:
        return CurrentProfile(self.t_profile, self.profiles_i[i], self.current_scale)

    def instance(self, i: int) -> CellInstance:
        row = self.instances[i]
        return CellInstance(log10_dn=row[0], log10_dp=row[1], r_n=row[2], r_p=row[3],
                            soc0=row[4], normalized=row[5:9])

    def sample(self, i: int) -> Sample:
        return Sample(self.profile(i), self.instance(i), self.field_n[i],
                      self.field_p[i], self.voltage[i], bool(self.violated[i]))

    def family(self, i: int) -> str:
        return self.manifest["family_per_sample"][i]

    @property
    def test_indices(self) -> np.ndarray:
        return np.asarray(self.manifest["split"]["test_indices"], dtype=int)

    @property
    def train_indices(self) -> np.ndarray:
        test = set(self.manifest["split"]["test_indices"])
        return np.array([i for i in range(len(self)) if i not in test], dtype=int)

    def c_max(self, side: str) -> float:
        return self.manifest["scaling"]["c_max_" + side]

    def arrays(self) -> dict:
        return {"profiles_i": self.profiles_i, "instances": self.instances,
                "field_n": self.field_n, "field_p": self.field_p,
                "voltage": self.voltage, "violated": self.violated}

    @classmethod
    def load(cls, path) -> "Dataset":
        manifest, arrays = opio.read_container(path)
        return cls(manifest, arrays)

    def save(self, path) -> None:
        opio.write_container(path, self.manifest, self.arrays())


def _instance_row(inst: CellInstance) -> np.ndarray:
    return np.concatenate([[inst.log10_dn, inst.log10_dp, inst.r_n, inst.r_p, inst.soc0],
                           inst.normalized])


def _default_instance(cell: CellParameters, soc0: float, ranges: dict) -> CellInstance:
    from .excitation import _log_normalize
    logs = [np.log10(cell.negative.diffusivity), np.log10(cell.positive.diffusivity),
            np.log10(cell.negative.particle_radius), np.log10(cell.positive.particle_radius)]
    keys = ("d_n", "d_p", "r_n", "r_p")
    norm = np.array([_log_normalize(10.0 ** lg, *ranges[k]) for lg, k in zip(logs, keys)])
    return CellInstance(log10_dn=logs[0], log10_dp=logs[1],
                        r_n=cell.negative.particle_radius, r_p=cell.positive.particle_radius,
                        soc0=soc0, normalized=norm)


def generate_dataset(config: DatasetConfig, out_path=None) -> Dataset:
    """Simulate every sample; keep domain violators (flagged), skip failures.

    Deterministic under the master seed: per-sample profile generators use
    child_seed(master, i), and the Sobol block is drawn once up front.
    """
    cell = config.cell
    ranges = dict(DEFAULT_RANGES, **(config.ranges or {}))
    sobol = sample_parameters(config.count, ranges, seed=config.seed)
    rows, fams = [], []
    profiles, fields_n, fields_p, volts, violated = [], [], [], [], []
    n_failed = 0
    n_singular = 0
    for i in range(config.count):
        fam = config.families[i % len(config.families)]
        fam_cfg = FamilyConfig(Family(fam), t_max=config.t_max, n=config.n_profile,
                               c_nom=cell.capacity)
        rng = np.random.default_rng(child_seed(config.seed, i))
        profile = gen_profile(fam_cfg, rng)
        soc0 = sobol[i].soc0 if config.vary_soc0 else config.soc0_fixed
        if config.regime == "deeponet":
            inst = _default_instance(cell, config.soc0_fixed, ranges)
        elif config.regime == "fno":
            inst = _default_instance(cell, soc0, ranges)
        else:
            inst = sobol[i]
            if not config.vary_radii:
                base = _default_instance(cell, soc0, ranges)
                inst = CellInstance(log10_dn=inst.log10_dn, log10_dp=inst.log10_dp,
                                    r_n=base.r_n, r_p=base.r_p, soc0=soc0,
                                    normalized=np.concatenate([inst.normalized[:2],
                                                               base.normalized[2:]]))
            elif not config.vary_soc0:
                inst = CellInstance(log10_dn=inst.log10_dn, log10_dp=inst.log10_dp,
                                    r_n=inst.r_n, r_p=inst.r_p, soc0=soc0,
                                    normalized=inst.normalized)
        cell_i = cell.with_diffusivities(10.0 ** inst.log10_dn, 10.0 ** inst.log10_dp) \
            .with_radii(inst.r_n, inst.r_p)
        res = simulate(cell_i, profile, inst.soc0,
                       grid_n=RadialGrid(config.n_r, inst.r_n),
                       grid_p=RadialGrid(config.n_r, inst.r_p), dt=config.dt)
        # singular-overpotential traces (surface stoichiometry on a rail) are
        # domain violators and deliberately retained; only broken fields are
        # a failure
        if not (np.all(np.isfinite(res.field_n.values))
                and np.all(np.isfinite(res.field_p.values))):
            n_failed += 1
            continue
        n_singular += int(res.failed)
        rows.append(_instance_row(inst))
        fams.append(fam)
        profiles.append(profile.i)
        fields_n.append(res.field_n.values)
        fields_p.append(res.field_p.values)
        volts.append(res.voltage)
        violated.append(res.violated_domain)

    n = len(rows)
    split_rng = np.random.default_rng(config.seed + 7919)
    order = split_rng.permutation(n)
    n_test = max(1, int(round(config.test_fraction * n))) if n else 0
    test_idx = sorted(int(j) for j in order[:n_test])

    manifest = {
        "regime": config.regime,
        "families": list(config.families),
        "family_per_sample": fams,
        "count_requested": config.count,
        "count_written": n,
        "count_failed": n_failed,
        "count_singular_voltage": n_singular,
        "seed": config.seed,
        "grid": {"n_r": config.n_r, "dt": config.dt, "t_max": config.t_max,
                 "n_t": int(round(config.t_max / config.dt)) + 1,
                 "n_profile": config.n_profile},
        "scaling": {"c_max_n": cell.negative.c_max, "c_max_p": cell.positive.c_max,
                    "current_scale": 1.5 * cell.capacity},
        "cell": cell_to_dict(cell),
        "ranges": {k: list(v) for k, v in ranges.items()},
        "soc0_fixed": config.soc0_fixed,
        "vary_radii": config.vary_radii,
        "vary_soc0": config.vary_soc0,
        "split": {"fraction": config.test_fraction, "test_indices": test_idx},
    }
    arrays = {"profiles_i": np.array(profiles), "instances": np.array(rows),
              "field_n": np.array(fields_n), "field_p": np.array(fields_p),
              "voltage": np.array(volts), "violated": np.array(violated, dtype=bool)}
    ds = Dataset(manifest, arrays)
    if out_path is not None:
        ds.save(out_path)
    return ds


def cell_to_dict(cell: CellParameters) -> dict:
    def el(e):
        return {"thickness": e.thickness, "volume_fraction": e.volume_fraction,
                "particle_radius": e.particle_radius, "diffusivity": e.diffusivity,
                "c_max": e.c_max, "ocp_curve": e.ocp_curve.value,
                "sto_window": list(e.sto_window), "charge_transfer": e.charge_transfer,
                "conductivity": e.conductivity, "rate_prefactor": e.rate_prefactor}

    return {"negative": el(cell.negative), "positive": el(cell.positive),
            "capacity": cell.capacity, "area": cell.area,
            "temperature": cell.constants.temperature, "flux_sign": cell.flux_sign.value}


def cell_from_dict(d: dict) -> CellParameters:
    from .params import ElectrodeParams, FluxSign, OcpCurve, PhysicalConstants

    def el(e):
        e = dict(e)
        e["ocp_curve"] = OcpCurve(e["ocp_curve"])
        e["sto_window"] = tuple(e["sto_window"])
        return ElectrodeParams(**e)

    return CellParameters(negative=el(d["negative"]), positive=el(d["positive"]),
                          capacity=d["capacity"], area=d["area"],
                          constants=PhysicalConstants(temperature=d["temperature"]),
                          flux_sign=FluxSign(d["flux_sign"]))


# ------------------------------------------------------- scaling helpers

def normalize(sample: Sample, manifest: dict) -> Sample:
    """Concentrations to [0,1] (per-electrode c_max), currents to [-1,1] (1.5C)."""
    s = manifest["scaling"]
    prof = CurrentProfile(sample.profile.t, sample.profile.i / s["current_scale"], 1.0)
    return Sample(profile=prof, instance=sample.instance,
                  field_n=sample.field_n / s["c_max_n"],
                  field_p=sample.field_p / s["c_max_p"],
                  voltage=sample.voltage, violated_domain=sample.violated_domain)


def denormalize(sample: Sample, manifest: dict) -> Sample:
    s = manifest["scaling"]
    prof = CurrentProfile(sample.profile.t, sample.profile.i * s["current_scale"],
                          s["current_scale"])
    return Sample(profile=prof, instance=sample.instance,
                  field_n=sample.field_n * s["c_max_n"],
                  field_p=sample.field_p * s["c_max_p"],
                  voltage=sample.voltage, violated_domain=sample.violated_domain)


# ----------------------------------------------------------------- loss

def loss_nl2(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over the batch of ||pred - truth||_2 / ||truth||_2 (flattened per sample)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    p = pred.reshape(pred.shape[0], -1)
    t = truth.reshape(truth.shape[0], -1)
    norms = np.linalg.norm(t, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero truth norm in batch")
    return float(np.mean(np.linalg.norm(p - t, axis=1) / norms))


def loss_nl2_tensor(pred: ad.Tensor, truth: np.ndarray) -> ad.Tensor:
    truth = np.asarray(truth)
    axes = tuple(range(1, truth.ndim))
    norms = np.sqrt((truth ** 2).sum(axis=axes))
    if np.any(norms == 0):
        raise ValueError("zero truth norm in batch")
    diff = ad.sub(pred, ad.constant(truth))
    per = ad.sqrt(ad.sum_tensor(ad.square(diff), axes=axes))
    return ad.mean_tensor(ad.mul(per, ad.constant(1.0 / norms)))


# ------------------------------------------------------------- surrogates

@dataclass
class TrainConfig:
    epochs: int | None = None
    batch_size: int = 32
    eval_batch: int = 64
    lr_max: float = 1e-2
    lr_min: float = 1e-4
    seed: int = 0
    arch: dict = field(default_factory=dict)   # overrides Table-1 defaults


ARCH_DEFAULTS = {
    "fno": {"width": 32, "depth": 6, "modes": (10, 10), "pad": (2, 5)},
    "pefno": {"width": 64, "depth": 8, "modes": (5, 20), "pad": (2, 5), "pe_width": 32},
    "deeponet": {"width": 500, "depth": 11, "p": None},  # p resolved from the family mix
}


class SurrogateModel:
    """Both electrode networks of one architecture plus their shared config."""

    def __init__(self, kind: str, arch: dict, weights: dict):
        self.kind = kind
        self.arch = arch
        self.weights = weights  # side -> weight container

    @classmethod
    def init(cls, kind: str, dataset: Dataset, seed: int = 0, arch: dict | None = None):
        cfg = dict(ARCH_DEFAULTS[kind], **(arch or {}))
        if kind == "deeponet" and cfg.get("p") is None:
            fams = set(dataset.manifest["families"])
            cfg["p"] = 16 if fams <= {"cc", "tri"} else 64
        weights = {}
        for j, side in enumerate(("n", "p")):
            rng = np.random.default_rng(seed * 2 + j)
            if kind == "fno":
                weights[side] = nn.init_fno(rng, width=cfg["width"], depth=cfg["depth"],
                                            modes=tuple(cfg["modes"]), pad=tuple(cfg["pad"]))
            elif kind == "pefno":
                weights[side] = nn.init_pefno(rng, width=cfg["width"], depth=cfg["depth"],
                                              modes=tuple(cfg["modes"]), pad=tuple(cfg["pad"]),
                                              pe_width=cfg["pe_width"])
            elif kind == "deeponet":
                weights[side] = nn.init_deeponet(rng, p=cfg["p"], width=cfg["width"],
                                                 depth=cfg["depth"])
            else:
                raise ValueError(f"unknown model kind {kind!r}")
        return cls(kind, cfg, weights)

    def parameters(self, side: str):
        return self.weights[side].parameters()

    def forward(self, side: str, inputs: dict) -> ad.Tensor:
        if self.kind == "fno":
            return nn.fno_forward(self.weights[side], inputs["images"])
        if self.kind == "pefno":
            return nn.pefno_forward(self.weights[side], inputs["images"], inputs["pvec"])
        return nn.deeponet_forward(self.weights[side], inputs["branch"], inputs["queries"])

    def to_tensors(self) -> dict:
        out = {}
        for side in ("n", "p"):
            for name, t in self.parameters(side):
                out[f"{side}/{name}"] = t.data
        return out

    def load_tensors(self, tensors: dict) -> None:
        for side in ("n", "p"):
            for name, t in self.parameters(side):
                src = tensors[f"{side}/{name}"]
                if tuple(src.shape) != tuple(t.data.shape):
                    raise ValueError(f"checkpoint tensor {side}/{name} has shape "
                                     f"{src.shape}, expected {t.data.shape}")
                t.data = np.array(src)

    def config_echo(self) -> dict:
        cfg = dict(self.arch)
        for k in ("modes", "pad"):
            if k in cfg:
                cfg[k] = list(cfg[k])
        return {"kind": self.kind, "arch": cfg}

    @classmethod
    def from_checkpoint(cls, path, dataset: Dataset | None = None):
        arch, config, tensors, _ = opio.load_checkpoint(path)
        if arch != config.get("kind"):
            raise ValueError(f"checkpoint architecture tag {arch!r} does not match "
                             f"its config {config.get('kind')!r}")
        model = cls._blank(config["kind"], config["arch"])
        model.load_tensors(tensors)
        return model

    @classmethod
    def _blank(cls, kind: str, arch: dict):
        arch = dict(arch)
        for k in ("modes", "pad"):
            if k in arch:
                arch[k] = tuple(arch[k])
        dummy = Dataset({"families": ["cc"]}, {"profiles_i": np.zeros((0, 2)),
                        "instances": np.zeros((0, 9)), "field_n": np.zeros((0, 1, 1)),
                        "field_p": np.zeros((0, 1, 1)), "voltage": np.zeros((0, 1)),
                        "violated": np.zeros(0, dtype=bool)})
        return cls.init(kind, dummy, seed=0, arch=arch)

    def save_checkpoint(self, path, train_manifest_hash: str = "") -> None:
        opio.save_checkpoint(path, self.kind, self.config_echo(), self.to_tensors(),
                             train_manifest_hash)


def _pvec(dataset: Dataset, idx, side: str) -> np.ndarray:
    norm = dataset.instances[idx][:, 5:9]
    return norm[:, [0, 2]] if side == "n" else norm[:, [1, 3]]


def assemble_inputs(model: SurrogateModel, dataset: Dataset, idx: np.ndarray,
                    side: str) -> dict:
    """Precompute the network inputs for the given sample indices."""
    idx = np.asarray(idx, dtype=int)
    c_max = dataset.c_max(side)
    fields = dataset.field_n if side == "n" else dataset.field_p
    if model.kind in ("fno", "pefno"):
        pad = tuple(model.arch["pad"])
        images = []
        for i in idx:
            images.append(nn.assemble_input(dataset.profile(i), fields[i][:, 0],
                                             c_max, pad).channels)
        out = {"images": np.array(images)}
        if model.kind == "pefno":
            out["pvec"] = _pvec(dataset, idx, side)
        return out
    n_r, n_t = fields.shape[1:]
    branch = []
    for i in idx:
        sto0 = fields[i][0, 0] / c_max
        branch.append(nn.branch_input(dataset.profile(i), sto0))
    return {"branch": np.array(branch), "queries": nn.grid_queries(n_r, n_t)}


def _slice_inputs(inputs: dict, sl) -> dict:
    out = {}
    for k, v in inputs.items():
        out[k] = v if k == "queries" else v[sl]
    return out


def scaled_targets(model: SurrogateModel, dataset: Dataset, idx, side: str) -> np.ndarray:
    fields = (dataset.field_n if side == "n" else dataset.field_p)[np.asarray(idx, dtype=int)]
    t = fields / dataset.c_max(side)
    if model.kind == "deeponet":
        t = t.reshape(t.shape[0], -1)
    return t


def predict_scaled(model: SurrogateModel, dataset: Dataset, idx, side: str,
                   batch: int = 64, inputs: dict | None = None) -> np.ndarray:
    """Batched inference; returns scaled fields (B, n_r, n_t)."""
    idx = np.asarray(idx, dtype=int)
    if inputs is None:
        inputs = assemble_inputs(model, dataset, idx, side)
    n_r, n_t = dataset.field_n.shape[1:]
    outs = []
    for s in range(0, len(idx), batch):
        out = model.forward(side, _slice_inputs(inputs, slice(s, s + batch))).data
        outs.append(out.reshape(-1, n_r, n_t))
    return np.concatenate(outs) if outs else np.zeros((0, n_r, n_t))


def train(kind: str, dataset: Dataset, config: TrainConfig | None = None,
          sides: tuple[str, ...] = ("n", "p")) -> tuple[SurrogateModel, dict]:
    """Mini-batch Adam under the warmup+cosine schedule; keeps the best-test weights.

    The raw (unfiltered) test split is used for the per-epoch test loss;
    domain filtering only applies to the metrics report.
    """
    config = config or TrainConfig()
    epochs = config.epochs or DEFAULT_EPOCHS[kind]
    model = SurrogateModel.init(kind, dataset, seed=config.seed, arch=config.arch)
    train_idx = dataset.train_indices
    test_idx = dataset.test_indices
    history = {"epochs": epochs, "sides": {}}
    aborted = False
    for side in sides:
        inputs_tr = assemble_inputs(model, dataset, train_idx, side)
        targets_tr = scaled_targets(model, dataset, train_idx, side)
        inputs_te = assemble_inputs(model, dataset, test_idx, side)
        targets_te = scaled_targets(model, dataset, test_idx, side)
        params = [t for _, t in model.parameters(side)]
        state = ad.AdamState(params)
        rng = np.random.default_rng(config.seed + 1009)
        n_train = len(train_idx)
        steps_per_epoch = max(1, (n_train + config.batch_size - 1) // config.batch_size)
        total_steps = epochs * steps_per_epoch
        best = (np.inf, None)
        hist = []
        step = 0
        for epoch in range(epochs):
            order = rng.permutation(n_train)
            tr_losses = []
            for s in range(0, n_train, config.batch_size):
                sel = order[s:s + config.batch_size]
                pred = model.forward(side, _slice_inputs(inputs_tr, sel))
                loss = loss_nl2_tensor(pred, targets_tr[sel])
                if not np.isfinite(loss.data):
                    aborted = True
                    break
                tape = ad.Tape(loss)
                tape.backward()
                lr = ad.cosine_lr((step + 1) / total_steps, 1.0 / epochs,
                                  config.lr_max, config.lr_min)
                ad.adam_step(params, [p.grad for p in params], state, lr)
                tr_losses.append((float(loss.data), len(sel)))
                step += 1
            if aborted:
                break
            test_pred = predict_scaled(model, dataset, test_idx, side,
                                       batch=config.eval_batch, inputs=inputs_te)
            if model.kind == "deeponet":
                test_pred = test_pred.reshape(len(test_idx), -1)
            te = loss_nl2(test_pred, targets_te)
            tr = float(np.average([l for l, _ in tr_losses], weights=[w for _, w in tr_losses]))
            hist.append({"epoch": epoch, "train_nl2": tr, "test_nl2": te})
            if te < best[0]:
                best = (te, [np.array(p.data) for p in params])
        if best[1] is not None:
            for p, data in zip(params, best[1]):
                p.data = data
        history["sides"][side] = {"history": hist, "best_test_nl2": best[0],
                                  "aborted": aborted}
    return model, history


# ------------------------------------------------------------------ metrics

METRIC_EPS = 1e-12


def metric_suite(pred: np.ndarray, truth: np.ndarray) -> dict:
    """MAE, RMSE, nL2, nLinf for one sample (any shape, flattened)."""
    d = (np.asarray(pred) - np.asarray(truth)).ravel()
    t = np.asarray(truth).ravel()
    return {
        "mae": float(np.mean(np.abs(d))),
        "rmse": float(np.sqrt(np.mean(d * d))),
        "nl2": float(np.linalg.norm(d) / (np.linalg.norm(t) + METRIC_EPS)),
        "nlinf": float(np.max(np.abs(d)) / (np.max(np.abs(t)) + METRIC_EPS)),
    }


def _mean_metrics(entries: list[dict]) -> dict:
    return {k: float(np.mean([e[k] for e in entries])) for k in entries[0]}


@dataclass
class MetricsReport:
    per_family: dict           # family -> target -> metric -> value
    counts: dict               # family -> retained sample count
    excluded: int              # domain violators dropped before computing

    def flat_rows(self) -> list[dict]:
        rows = []
        for fam, targets in sorted(self.per_family.items()):
            for target, metrics in sorted(targets.items()):
                rows.append(dict({"family": fam, "target": target,
                                  "count": self.counts[fam]}, **metrics))
        return rows


def evaluate_metrics(model: SurrogateModel, dataset: Dataset,
                     indices=None, batch: int = 64) -> MetricsReport:
    """Per-family MAE/RMSE/nL2/nLinf on the filtered test set, physical units.

    Concentration metrics (mol/m^3) average the two electrode figures;
    voltage metrics are in mV, with the voltage derived from the predicted
    surface concentrations through the cell equation.
    """
    if indices is None:
        indices = dataset.test_indices
    indices = np.asarray(indices, dtype=int)
    keep = indices[~dataset.violated[indices]]
    excluded = len(indices) - len(keep)
    cell = cell_from_dict(dataset.manifest["cell"])
    by_family: dict = {}
    if len(keep):
        preds = {side: predict_scaled(model, dataset, keep, side, batch=batch)
                 for side in ("n", "p")}
        for j, i in enumerate(keep):
            fam = dataset.family(i)
            pred_n = preds["n"][j] * dataset.c_max("n")
            pred_p = preds["p"][j] * dataset.c_max("p")
            conc_n = metric_suite(pred_n, dataset.field_n[i])
            conc_p = metric_suite(pred_p, dataset.field_p[i])
            conc = {k: 0.5 * (conc_n[k] + conc_p[k]) for k in conc_n}
            inst = dataset.instance(i)
            cell_i = cell.with_diffusivities(10.0 ** inst.log10_dn, 10.0 ** inst.log10_dp) \
                .with_radii(inst.r_n, inst.r_p)
            v_pred = nn.predict_voltage(pred_n, pred_p, dataset.profile(i), cell_i).data
            volt = metric_suite(v_pred * 1e3, dataset.voltage[i] * 1e3)
            by_family.setdefault(fam, {"concentration": [], "voltage": []})
            by_family[fam]["concentration"].append(conc)
            by_family[fam]["voltage"].append(volt)
    per_family = {fam: {target: _mean_metrics(entries) for target, entries in d.items()}
                  for fam, d in by_family.items()}
    counts = {fam: len(d["concentration"]) for fam, d in by_family.items()}
    return MetricsReport(per_family=per_family, counts=counts, excluded=excluded)
