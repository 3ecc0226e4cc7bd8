import json

import numpy as np
import pytest

import lfm

TINY = {
    "name": "tiny",
    "data": {"problem": "heat2d", "n": 16, "frames": 12, "dt": 0.2, "param_min": 0.02, "param_max": 0.05,
             "n_train": 3, "n_valid": 1, "n_test": 1, "seed": 1},
    "codec": {"fine_grid": [8, 8], "latent_channels": 2, "width": 8, "heads": 2, "kernel_hidden": 8},
    "denoiser": {"width": 8, "heads": 2, "depth": 2, "mlp_ratio": 1},
    "train_ae": {"steps": 3, "batch": 4, "warmup": 1},
    "train_fm": {"steps": 3, "batch": 4, "warmup": 1},
    "train_ar": {"steps": 3, "batch": 4, "warmup": 1},
}


def test_paths():
    p = lfm.DiffusionPath.flow_linear()
    assert p.alpha_sigma(0.25) == pytest.approx((0.75, 0.25))
    knots = p.grid(4)
    assert knots[0] == 0.0 and knots[-1] == 1.0 and len(knots) == 5
    e = lfm.DiffusionPath.exponential(1e-3)
    assert e.kind == "exponential"
    a, s = e.alpha_sigma(0.5)
    assert a * a + s * s == pytest.approx(1.0)
    assert lfm.DiffusionPath.from_dict(e.to_dict()).sigma_min == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        p.alpha_sigma(1.5)


def test_heat_decay_and_spectrum():
    t = lfm.gen_heat2d(nu=0.05, n=16, frames=3, dt=0.1, seed=4)
    u = t.data
    assert u.shape == (3, 16, 16, 1)
    e0, counts = lfm.energy_spectrum(u[0, :, :, 0])
    e2, _ = lfm.energy_spectrum(u[2, :, :, 0])
    assert sum(c * e for c, e in zip(counts, e2)) < sum(c * e for c, e in zip(counts, e0))
    field = np.mean(u[0, :, :, 0] ** 2)
    assert sum(c * e for c, e in zip(counts, e0)) == pytest.approx(field, rel=1e-10)
    assert lfm.nrmse(t, t, 0, 3) == 0.0


def test_trajectory_data_roundtrip():
    t = lfm.Trajectory()
    a = np.arange(2 * 4 * 1, dtype=float).reshape(2, 4, 1) + 1.0
    t.data = a
    assert t.frames == 2 and t.extents == [4] and t.channels == 1
    np.testing.assert_array_equal(t.data, a)


def test_pipeline(tmp_path):
    cfg = lfm.ExperimentConfig.from_dict(TINY)
    assert lfm.ExperimentConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()
    ds = lfm.generate_dataset(TINY["data"])
    assert len(ds) == 5 and ds.split("test") == [4]
    codec = lfm.train_autoencoder(cfg, ds)
    assert np.isfinite(codec.reconstruction_error(ds, "test"))
    flow = lfm.train_flow(cfg, codec, ds)
    assert flow.is_flow and flow.codec_digest == codec.digest()
    codec.save(tmp_path / "c.ckpt")
    flow.save(tmp_path / "f.ckpt")
    codec2 = lfm.load_codec(tmp_path / "c.ckpt")
    flow2 = lfm.load_dynamics(tmp_path / "f.ckpt")
    init = ds.trajectories[4]
    r1 = lfm.rollout(codec, flow, init, horizon=4, ensemble=2, seed=7)
    r2 = lfm.rollout(codec2, flow2, init, horizon=4, ensemble=2, seed=7)
    assert r1["frames"].shape == (2, 4, 16, 16, 1)
    np.testing.assert_array_equal(r1["frames"], r2["frames"])
    assert r1["encode_calls"] == 1
    assert r1["mean"].frames == 4

    other = lfm.train_autoencoder(lfm.ExperimentConfig.from_dict({**TINY, "train_ae": {**TINY["train_ae"], "seed": 9}}), ds)
    with pytest.raises(lfm.DigestMismatch):
        lfm.rollout(other, flow, init, horizon=2)


def test_cli(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert lfm.cli(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d.lfm")]) == 0
    ds = lfm.read_dataset(tmp_path / "d.lfm")
    assert ds.problem == "heat2d"
    assert lfm.cli(["frobnicate"]) == 2
