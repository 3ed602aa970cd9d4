import json
import os

import numpy as np
import pytest

from mvcells import pipeline as pl
from mvcells.phantom import ANGLES, landmarks
from mvcells.registration import RigidTransform3D
from mvcells.semdeconv import TrainConfig
from mvcells.volume import Volume, load_markers_csv


def fast_config(**kw):
    cfg = pl.PipelineConfig(**kw)
    cfg.registration.fine = False
    cfg.detect.radius = 1.0
    cfg.grid.substack_dims = (32, 32, 32)
    cfg.grid.overlap = 16
    return cfg


def test_load_config_nested(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"workers": 3, "grid": {"substack_dims": [40, 40, 40]},
                                "sd": {"mode": "ifi", "train": {"epochs": 2}},
                                "registration": {"mi": {"n_samples": 5000}}}))
    cfg = pl.load_config(str(path))
    assert cfg.workers == 3
    assert cfg.grid.substack_dims == (40, 40, 40)
    assert cfg.sd.train.epochs == 2 and cfg.sd.mode == "ifi"
    assert cfg.registration.mi.n_samples == 5000
    again = pl._build(pl.PipelineConfig, pl.config_to_dict(cfg))
    assert pl.config_to_dict(again) == pl.config_to_dict(cfg)


@pytest.mark.parametrize("data", [{"bogus": 1}, {"sd": {"train": {"p_mask": 2.0}}}])
def test_bad_config_raises(tmp_path, data):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(data))
    with pytest.raises(pl.ConfigError):
        pl.load_config(str(path))


def test_validate():
    cfg = pl.PipelineConfig()
    cfg.sd.mode = "fancy"
    with pytest.raises(pl.ConfigError):
        cfg.validate(require_input=False)
    with pytest.raises(pl.ConfigError):
        pl.PipelineConfig(input_dir="/nonexistent").validate()


def test_coarse_register_recovers_truth(small_phantom):
    lms = landmarks(small_phantom, 15, seed=0)
    est = pl.coarse_register(lms)
    c = np.array([[23.5, 23.5, 23.5], [5, 5, 5], [40, 40, 40]])
    for a in ANGLES:
        err = np.linalg.norm(est[a].apply(c) - small_phantom.true_transforms[a].apply(c), axis=1)
        assert err.max() < 1.5, a


def test_correction_size_translation():
    t = RigidTransform3D(np.eye(3), [3.0, 4.0, 0.0])
    assert pl.correction_size(t, (10, 10, 10)) == pytest.approx(5.0)


def test_refine_trust_region(monkeypatch):
    monkeypatch.setattr(pl, "fine_register",
                        lambda ref, test, mi: RigidTransform3D(np.eye(3), [5.0, 0, 0]))
    vol = Volume.zeros((8, 8, 8))
    assert pl.correction_size(pl.refine(vol, vol, pl.RegistrationSection()), vol.dims) == 0
    monkeypatch.setattr(pl, "fine_register",
                        lambda ref, test, mi: RigidTransform3D(np.eye(3), [0.5, 0, 0]))
    assert np.allclose(pl.refine(vol, vol, pl.RegistrationSection()).translation, [0.5, 0, 0])


def test_black_pairs_skipped():
    subs = {a: Volume.zeros((12, 12, 12)) for a in ANGLES}
    pairs = pl.prepare_pairs(subs, pl.RegistrationSection())
    assert all(p.black for p in pairs.values())
    assert pl.deconvolve_pairs(pairs, "raw-ifi", {}, pl.SDSection()) == {}
    assert pl.correction_size(pl.t180_provider(subs, pl.RegistrationSection())(), (12, 12, 12)) == 0


def test_process_substack_reports_errors():
    rng = np.random.default_rng(0)
    subs = {a: Volume(rng.random((12, 12, 12))) for a in ANGLES}
    cfg = fast_config()
    res = pl.process_substack(pl.SubstackTask(0, subs, ("msd",), {}, cfg))
    assert res["error"] and "KeyError" in res["error"]


def test_required_kinds():
    assert pl.required_kinds(["svim", "msd", "raw-ifi"]) == ["msd", "single"]


def test_detect_world_worker_invariant(small_phantom):
    cfg = fast_config()
    prep = pl.prepare_phantom(small_phantom, cfg)
    out1, f1 = pl.detect_world(prep.registered, ["raw-ifi", "raw-svim"], {}, cfg)
    cfg.workers = 2
    out2, f2 = pl.detect_world(prep.registered, ["raw-ifi", "raw-svim"], {}, cfg)
    assert f1 == f2 == 0
    for m in out1:
        assert np.array_equal(out1[m].points, out2[m].points)
    assert len(out1["raw-ifi"]) > 0


def test_run_pipeline_on_disk(phantom_dir, tmp_path):
    cfg = fast_config(input_dir=phantom_dir, output_dir=str(tmp_path / "out"))
    cfg.sd.mode = "raw-ifi"
    summary = pl.run_pipeline(cfg, {})
    for name in ("world.csv", "world.ply", "transforms.json", "eval.json"):
        assert os.path.exists(tmp_path / "out" / name)
    assert summary["failed_substacks"] == 0
    assert summary["f1"] > 0.5
    assert len(load_markers_csv(str(tmp_path / "out" / "world.csv"))) == summary["detections"]


def test_run_pipeline_needs_nets(phantom_dir):
    cfg = fast_config(input_dir=phantom_dir)
    with pytest.raises(pl.ConfigError):
        pl.run_pipeline(cfg, {})


def test_register_dir_without_landmarks(phantom_dir, tmp_path):
    import shutil

    copy = tmp_path / "nolm"
    shutil.copytree(phantom_dir, copy)
    for a in ANGLES:
        os.remove(copy / f"landmarks_{a:03d}.csv")
    _, transforms = pl.register_dir(str(copy), fast_config())
    assert transforms[90].rotation_angle_deg() == pytest.approx(90.0)


def test_train_from_dirs_tiny(phantom_dir):
    cfg = fast_config()
    cfg.sd.half_width = 1
    cfg.sd.train = TrainConfig(epochs=1, patches_per_epoch=128, batch_size=64)
    nets, curves = pl.train_from_dirs([phantom_dir], ["msd", "single"], cfg)
    assert nets["msd"].arity == 2 and nets["single"].arity == 1
    assert nets["msd"].architecture == "columnar" and nets["single"].architecture == "flat"
    assert len(curves["msd"]) == 2
