import json
import math

import numpy as np
import pytest

import measure_attention as ma


def test_spectrum_and_basis():
    s = ma.MercerSpectrum(1.0)
    assert s.modes == 16
    assert s.eigenvalue(1) == pytest.approx(math.exp(-1))
    assert s.eigenvalue(0) == 1.0
    assert s.basis(2, 0.25) == pytest.approx(math.sqrt(2))
    with pytest.raises(IndexError):
        s.eigenvalue(16)
    with pytest.raises(ValueError):
        s.basis(1, 2.0)


def test_density_is_a_pmf():
    s = ma.MercerSpectrum(1.0)
    z = [0.0] + list(np.random.default_rng(0).normal(size=15))
    p = np.array(ma.synth_density(s, z))
    assert p.shape == (32,)
    assert p.min() > 0
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    uniform = ma.synth_density(s, [0.0] * 16)
    assert np.allclose(uniform, 1 / 32)


def test_isometry_preserves_norm():
    s = ma.MercerSpectrum(1.0)
    b = [0.0] + list(np.random.default_rng(1).normal(size=15))
    out = ma.isometry_map(s, b, ball=1.0, source=-1.0, target=0.0)
    assert ma.gen_norm_sq(s, out, 0.0) == pytest.approx(ma.gen_norm_sq(s, b, -1.0), rel=1e-10)
    assert ma.truncation_bound(s, 3, -1.0, 1.0) == pytest.approx(math.exp(-4))


def test_measures_and_w1():
    mu = ma.DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    nu = ma.DiscreteMeasure.dirac(np.array([0.5]))
    assert ma.wasserstein1_1d(mu, nu) == pytest.approx(0.5)
    assert len(mu) == 2
    moved = mu.pushforward(lambda x: 2 * x)
    assert np.allclose(moved.support[:, 0], [0.0, 2.0])
    flat, query = ma.mixture([mu, nu], [np.array([1.0]), np.array([-1.0])], 0)
    assert flat.weights.sum() == pytest.approx(1.0)
    assert list(query) == [1.0, 0.0]
    with pytest.raises(ValueError):
        ma.DiscreteMeasure(np.array([[0.0]]), np.array([0.3]))


def test_softmax_two_atoms():
    one = np.ones((1, 1))
    head = ma.AttnHead(one, one, one, one)
    mu = ma.DiscreteMeasure.uniform(np.array([[0.2], [0.2 + math.log(3)]]))
    w = ma.softmax_weights(head, mu, np.array([1.0]))
    assert np.allclose(w, [0.25, 0.75])


def test_recall_mass():
    c = math.sqrt(math.log(100))
    params = ma.build_recall_params(2, 1, 1, c)
    assert params.dim == 4
    support = np.array([[1, 0, 0.2, 0.2], [0, 1, 0.4, 0.4]], dtype=float)
    nu = ma.DiscreteMeasure(support, np.array([0.5, 0.5]))
    w = ma.softmax_weights(params.heads[0], nu, np.array([1.0, 0, 0, 0]))
    assert w[0] / 0.5 == pytest.approx(200 / 101, abs=1e-10)
    out = ma.measure_attention(params, nu, np.array([1.0, 0, 0, 0]))
    assert out[3] == pytest.approx(w[0] * 0.2 + w[1] * 0.4)


def test_lipschitz_probe_small():
    r = ma.lipschitz_probe(200, seed=7)
    assert r["trials"] == 200
    assert r["violations"] == 0


def test_fit_rate_collinear():
    ns = [4, 8, 16, 32, 64]
    risks = [math.exp(1 - 2 * ma.transformed_axis(n, 1.0)) for n in ns]
    A, C, rms = ma.fit_rate(ns, risks, 1.0)
    assert A == pytest.approx(1.0, abs=1e-10)
    assert C == pytest.approx(2.0, abs=1e-10)
    assert rms < 1e-10


def test_verify_suites():
    assert "isometry" in ma.suite_names()
    ok, checks = ma.verify("isometry")
    assert ok and checks
    ok, checks = ma.verify("orthonormality", corrupt_basis=True)
    assert not ok
    assert any(not passed and "e_3" in name for name, passed, _ in checks)


def test_config_and_example():
    cfg = ma.config(reduced=True, n_tokens=50, train={"epochs": 2})
    assert cfg["n_tokens"] == 50
    assert cfg["train"]["epochs"] == 2
    assert cfg["train"]["lr0"] == 0.01
    ex = ma.gen_example(1.0, 3, cfg)
    assert ex["context"].shape == (50, 2)
    assert set(np.unique(ex["context"][:, 1])) <= {-1.0, 1.0}
    assert ex["query"][0] == 0.0
    with pytest.raises(ValueError):
        ma.config(n_list=[8, 4])


def test_cell_and_sweep(tmp_path):
    cfg = ma.config(alpha_list=[1.0], n_list=[4, 8], seeds=1, n_tokens=40, n_val=10, n_stats=10,
                    train={"epochs": 2})
    cell = ma.run_cell(1.0, 4, 0, cfg)
    assert cell["ok"]
    assert cell["val_mse"] >= 0
    assert cell == ma.run_cell(1.0, 4, 0, cfg)
    res = ma.sweep(cfg, tmp_path)
    assert res == {"cells": 2, "reused": 0, "failed": 0}
    assert ma.sweep(cfg, tmp_path)["reused"] == 2
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert "1" in fit
    assert (tmp_path / "risk_curve.csv").read_text().startswith("alpha,n,seed,val_mse\n")
