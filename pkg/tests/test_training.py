import hashlib

import numpy as np
import pytest

from opspm import training as tr
from opspm.params import prada_lfp_cell


@pytest.fixture(scope="module")
def tiny_ds():
    cfg = tr.DatasetConfig(regime="fno", families=("cc", "tri"), count=24, seed=5)
    return tr.generate_dataset(cfg)


@pytest.fixture(scope="module")
def pefno_ds():
    cfg = tr.DatasetConfig(regime="pefno", families=("grf",), count=16, seed=8)
    return tr.generate_dataset(cfg)


# ---------------------------------------------------------------- generation

def test_dataset_counts_and_flags(tiny_ds):
    assert len(tiny_ds) == 24
    assert tiny_ds.manifest["count_failed"] == 0
    assert tiny_ds.manifest["family_per_sample"][0] == "cc"
    assert tiny_ds.manifest["family_per_sample"][1] == "tri"


def test_fno_regime_fixes_parameters_varies_soc(tiny_ds):
    d = tiny_ds.instances
    assert np.ptp(d[:, 0]) == 0.0 and np.ptp(d[:, 1]) == 0.0  # diffusivities fixed
    assert np.ptp(d[:, 4]) > 0.0                              # soc0 varies
    cell = prada_lfp_cell()
    assert 10 ** d[0, 0] == pytest.approx(cell.negative.diffusivity, rel=1e-12)


def test_deeponet_regime_fixes_everything():
    cfg = tr.DatasetConfig(regime="deeponet", families=("cc",), count=6, seed=1,
                           soc0_fixed=0.37)
    ds = tr.generate_dataset(cfg)
    assert np.ptp(ds.instances[:, 4]) == 0.0
    assert ds.instances[0, 4] == 0.37


def test_pefno_regime_varies_everything(pefno_ds):
    d = pefno_ds.instances
    for col in (0, 1, 2, 3, 4):
        assert np.ptp(d[:, col]) > 0.0


def test_pefno_fixed_radii_mode():
    cfg = tr.DatasetConfig(regime="pefno", families=("cc",), count=6, seed=2,
                           vary_radii=False, vary_soc0=False, soc0_fixed=0.5)
    ds = tr.generate_dataset(cfg)
    cell = prada_lfp_cell()
    assert np.all(ds.instances[:, 2] == cell.negative.particle_radius)
    assert np.all(ds.instances[:, 4] == 0.5)
    assert np.ptp(ds.instances[:, 0]) > 0.0


def test_split_deterministic_and_disjoint(tiny_ds):
    cfg = tr.DatasetConfig(regime="fno", families=("cc", "tri"), count=24, seed=5)
    again = tr.generate_dataset(cfg)
    assert list(again.test_indices) == list(tiny_ds.test_indices)
    assert set(tiny_ds.test_indices).isdisjoint(set(tiny_ds.train_indices))
    assert len(tiny_ds.test_indices) + len(tiny_ds.train_indices) == len(tiny_ds)


def test_container_roundtrip_and_determinism(tiny_ds, tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    tiny_ds.save(p1)
    tiny_ds.save(p2)
    assert hashlib.sha256(p1.read_bytes()).digest() == hashlib.sha256(p2.read_bytes()).digest()
    back = tr.Dataset.load(p1)
    assert np.array_equal(back.field_n, tiny_ds.field_n)
    assert np.array_equal(back.voltage, tiny_ds.voltage)
    assert back.manifest["seed"] == 5


def test_container_rejects_corruption(tiny_ds, tmp_path):
    p = tmp_path / "c.bin"
    tiny_ds.save(p)
    raw = bytearray(p.read_bytes())
    raw[0] = 0x58
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        tr.Dataset.load(p)
    tiny_ds.save(p)
    p.write_bytes(p.read_bytes() + b"x")
    with pytest.raises(ValueError):
        tr.Dataset.load(p)


# ------------------------------------------------------------------- scaling

def test_normalize_roundtrip(tiny_ds):
    s = tiny_ds.sample(3)
    ns = tr.normalize(s, tiny_ds.manifest)
    assert ns.field_n.max() <= max(1.0, ns.field_n.max())  # scaled by c_max
    back = tr.denormalize(ns, tiny_ds.manifest)
    assert np.allclose(back.field_n, s.field_n, rtol=1e-14)
    assert np.allclose(back.profile.i, s.profile.i, rtol=1e-14)


def test_normalize_pins():
    cfg = tr.DatasetConfig(regime="fno", families=("cc",), count=4, seed=9)
    ds = tr.generate_dataset(cfg)
    s = ds.sample(0)
    s.field_n[:] = ds.c_max("n")
    ns = tr.normalize(s, ds.manifest)
    assert np.allclose(ns.field_n, 1.0)


# ---------------------------------------------------------------------- loss

def test_loss_nl2_cases():
    truth = np.ones((3, 4, 5))
    assert tr.loss_nl2(truth, truth) == 0.0
    assert tr.loss_nl2(2 * truth, truth) == pytest.approx(1.0)
    pred = truth.copy()
    pred[0] = 2 * truth[0]   # per-sample losses {1, 0, 0}
    assert tr.loss_nl2(pred, truth) == pytest.approx(1.0 / 3.0)
    with pytest.raises(ValueError):
        tr.loss_nl2(np.ones((2, 3)), np.zeros((2, 3)))


def test_loss_nl2_scale_invariant():
    rng = np.random.default_rng(0)
    pred, truth = rng.standard_normal((4, 7)), rng.standard_normal((4, 7))
    a = tr.loss_nl2(pred, truth)
    b = tr.loss_nl2(13.7 * pred, 13.7 * truth)
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_nl2_tensor_matches_numpy():
    rng = np.random.default_rng(1)
    pred = rng.standard_normal((5, 6, 7))
    truth = rng.standard_normal((5, 6, 7))
    from opspm import autodiff as ad
    t = tr.loss_nl2_tensor(ad.constant(pred), truth)
    assert float(t.data) == pytest.approx(tr.loss_nl2(pred, truth), rel=1e-12)


# ------------------------------------------------------------------- metrics

def test_metric_hand_case():
    m = tr.metric_suite(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert m["mae"] == pytest.approx(2.0)
    assert m["rmse"] == pytest.approx(2.0)
    assert m["nl2"] == pytest.approx(np.sqrt(8) / 5)
    assert m["nlinf"] == pytest.approx(0.5)


def test_metric_zero_error():
    y = np.array([1.0, -2.0, 3.0])
    m = tr.metric_suite(y, y)
    assert all(v == 0.0 for v in m.values())


def test_evaluate_filters_violators_and_reports_mv(tiny_ds):
    model = tr.SurrogateModel.init("fno", tiny_ds, seed=0,
                                   arch={"width": 6, "depth": 1, "modes": (2, 3)})
    report = tr.evaluate_metrics(model, tiny_ds, indices=np.arange(len(tiny_ds)))
    assert report.excluded == int(tiny_ds.violated.sum())
    total = sum(report.counts.values())
    assert total == len(tiny_ds) - report.excluded
    for fam, targets in report.per_family.items():
        assert set(targets) == {"concentration", "voltage"}


def test_evaluate_empty_family_absent(tiny_ds):
    model = tr.SurrogateModel.init("fno", tiny_ds, seed=0,
                                   arch={"width": 6, "depth": 1, "modes": (2, 3)})
    # evaluate on a single clean cc sample: tri must be absent, not zero
    clean = [i for i in range(len(tiny_ds))
             if not tiny_ds.violated[i] and tiny_ds.family(i) == "cc"]
    report = tr.evaluate_metrics(model, tiny_ds, indices=clean[:1])
    assert list(report.per_family) == ["cc"]


# ------------------------------------------------------------------ training

def test_train_lr_zero_keeps_weights(tiny_ds):
    cfg = tr.TrainConfig(epochs=2, batch_size=8, lr_max=0.0, lr_min=0.0, seed=0,
                         arch={"width": 6, "depth": 1, "modes": (2, 3)})
    model, hist = tr.train("fno", tiny_ds, cfg, sides=("n",))
    fresh = tr.SurrogateModel.init("fno", tiny_ds, seed=0,
                                   arch={"width": 6, "depth": 1, "modes": (2, 3)})
    for (_, a), (_, b) in zip(model.parameters("n"), fresh.parameters("n")):
        assert np.array_equal(a.data, b.data)


def test_train_deterministic_history(tiny_ds):
    cfg = tr.TrainConfig(epochs=2, batch_size=8, seed=3,
                         arch={"width": 6, "depth": 1, "modes": (2, 3)})
    _, h1 = tr.train("fno", tiny_ds, cfg, sides=("n",))
    _, h2 = tr.train("fno", tiny_ds, cfg, sides=("n",))
    assert h1["sides"]["n"]["history"] == h2["sides"]["n"]["history"]


def test_default_epochs_per_kind():
    assert tr.DEFAULT_EPOCHS == {"deeponet": 15, "fno": 25, "pefno": 50}


def test_overfit_eight_samples():
    from dataclasses import replace
    cell = replace(prada_lfp_cell(), area=1.0)   # keeps the 8 fields in-domain
    cfg = tr.DatasetConfig(regime="fno", families=("cc",), count=9, seed=3, cell=cell)
    ds = tr.generate_dataset(cfg)
    tcfg = tr.TrainConfig(epochs=200, batch_size=8, seed=0,
                          arch={"width": 12, "depth": 3, "modes": (6, 8)})
    model, hist = tr.train("fno", ds, tcfg, sides=("n",))
    trains = [h["train_nl2"] for h in hist["sides"]["n"]["history"]]
    assert min(trains) < 1e-2


def test_train_deeponet_and_pefno_smoke(pefno_ds):
    cfg = tr.TrainConfig(epochs=2, batch_size=8, seed=0,
                         arch={"width": 6, "depth": 2, "modes": (2, 3), "pe_width": 8})
    model, hist = tr.train("pefno", pefno_ds, cfg, sides=("n",))
    assert model.weights["n"].param_mlp[0][0].data.shape == (2, 8)
    dcfg = tr.DatasetConfig(regime="deeponet", families=("cc",), count=8, seed=4)
    dds = tr.generate_dataset(dcfg)
    cfg = tr.TrainConfig(epochs=2, batch_size=4, seed=0,
                         arch={"width": 24, "depth": 3, "p": 4})
    model, hist = tr.train("deeponet", dds, cfg, sides=("p",))
    assert np.isfinite(hist["sides"]["p"]["history"][-1]["test_nl2"])


def test_deeponet_p_defaults_from_families(tiny_ds, pefno_ds):
    m1 = tr.SurrogateModel.init("deeponet", tiny_ds, arch={"width": 20, "depth": 3})
    assert m1.arch["p"] == 16     # cc/tri mix
    m2 = tr.SurrogateModel.init("deeponet", pefno_ds, arch={"width": 20, "depth": 3})
    assert m2.arch["p"] == 64     # grf in the mix


# --------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact(tiny_ds, tmp_path):
    model = tr.SurrogateModel.init("fno", tiny_ds, seed=1,
                                   arch={"width": 6, "depth": 2, "modes": (2, 3)})
    path = tmp_path / "ck.bin"
    model.save_checkpoint(path, "abc123")
    again = tr.SurrogateModel.from_checkpoint(path)
    for side in ("n", "p"):
        for (na, a), (nb, b) in zip(model.parameters(side), again.parameters(side)):
            assert na == nb
            assert np.array_equal(a.data, b.data)
    from opspm import io as opio
    arch, config, tensors, mh = opio.load_checkpoint(path)
    assert arch == "fno" and mh == "abc123"
    path2 = tmp_path / "ck2.bin"
    again.save_checkpoint(path2, "abc123")
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_shape_mismatch_rejected(tiny_ds, tmp_path):
    model = tr.SurrogateModel.init("fno", tiny_ds, seed=1,
                                   arch={"width": 6, "depth": 2, "modes": (2, 3)})
    tensors = model.to_tensors()
    tensors["n/lift.w"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        model.load_tensors(tensors)


def test_train_aborts_on_nonfinite_loss(monkeypatch):
    cfg = tr.DatasetConfig(regime="fno", families=("cc",), count=6, seed=1)
    ds = tr.generate_dataset(cfg)
    real = tr.loss_nl2_tensor
    calls = {"n": 0}

    def poisoned(pred, truth):
        calls["n"] += 1
        out = real(pred, truth)
        if calls["n"] >= 3:
            out.data = np.array(np.inf)
        return out

    monkeypatch.setattr(tr, "loss_nl2_tensor", poisoned)
    tcfg = tr.TrainConfig(epochs=4, batch_size=4, seed=0,
                          arch={"width": 6, "depth": 2, "modes": (2, 3)})
    model, hist = tr.train("fno", ds, tcfg, sides=("n",))
    assert hist["sides"]["n"]["aborted"]
    # the returned weights are the finite best-so-far snapshot
    for _, t in model.parameters("n"):
        assert np.all(np.isfinite(t.data))
