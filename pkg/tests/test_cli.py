import json
import os

import numpy as np
import pytest

import rewardalign as ra
from rewardalign.cli import main, reproduce_fig1


@pytest.fixture
def model_file(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({
        "type": "discrete", "atoms": [[0.0], [1.0]],
        "probs": [0.5, 0.5], "C": 1.0}))
    return str(path)


@pytest.fixture
def gmm_file(tmp_path):
    path = tmp_path / "gmm.json"
    path.write_text(json.dumps({
        "type": "gmm", "weights": [0.5, 0.5], "means": [[-2.0], [2.0]],
        "covs": [[[0.49]], [[0.49]]], "C": 8.0}))
    return str(path)


@pytest.fixture
def kl_reward_file(tmp_path):
    path = tmp_path / "reward.json"
    path.write_text(json.dumps({
        "type": "lowrank_maxaffine", "A": [[1.0]],
        "pieces": [[[1.0], 0.0]], "L": 1.0, "R": 1.0}))
    return str(path)


@pytest.fixture
def quad_reward_file(tmp_path):
    path = tmp_path / "quad.json"
    path.write_text(json.dumps({
        "type": "quadratic", "B": [[0.15]], "b": [0.6], "c": -0.6}))
    return str(path)


def test_estimate_z(model_file, capsys):
    rc = main(["estimate-z", "--model", model_file, "--v", "1.0",
               "--eta", "0.1", "--delta", "0.05", "--backend", "exact",
               "--seed", "0"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["value"] == pytest.approx((1 + np.e) / 2, rel=1e-12)
    assert out["method"] == "exact"


def test_prox_demo(quad_reward_file, capsys):
    rc = main(["prox-demo", "--reward", quad_reward_file, "--lambda", "0.15",
               "--y", "0.0", "--C", "10.0"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["T_lambda_y"] == pytest.approx([1.0], abs=1e-12)


def test_align_kl_run(model_file, kl_reward_file, tmp_path, capsys):
    out_dir = str(tmp_path / "out")
    rc = main(["align-kl", "--model", model_file, "--reward", kl_reward_file,
               "--eps", "0.1", "--delta", "0.05", "--n", "5000",
               "--seed", "7", "--backend", "exact", "--out", out_dir])
    assert rc == 0
    samples = np.loadtxt(os.path.join(out_dir, "samples.csv"), delimiter=",",
                         skiprows=1)
    assert len(samples) == 5000
    manifest = json.loads(open(os.path.join(out_dir, "manifest.json")).read())
    # manifest parameters equal an independent recomputation
    env = json.loads(open(os.path.join(out_dir, "envelope.json")).read())
    params = ra.compute_params(L=1.0, A_opnorm=1.0, C=1.0, m=env["m"],
                               eps=0.1)
    assert manifest["derived_parameters"]["N_rej"] == params.N_rej
    assert manifest["derived_parameters"]["a0"] == pytest.approx(params.a0)
    assert manifest["derived_parameters"]["B"] == pytest.approx(params.B)
    p1 = np.mean(samples > 0.5)
    assert abs(p1 - np.e / (1 + np.e)) < 0.03


def test_align_kl_byte_identical_reruns(model_file, kl_reward_file, tmp_path):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (out1, out2):
        rc = main(["align-kl", "--model", model_file, "--reward",
                   kl_reward_file, "--n", "500", "--seed", "3",
                   "--out", out])
        assert rc == 0
    b1 = open(os.path.join(out1, "samples.csv"), "rb").read()
    b2 = open(os.path.join(out2, "samples.csv"), "rb").read()
    assert b1 == b2
    m1 = json.loads(open(os.path.join(out1, "manifest.json")).read())
    m2 = json.loads(open(os.path.join(out2, "manifest.json")).read())
    m1.pop("wall_clock_seconds"), m2.pop("wall_clock_seconds")
    assert m1 == m2


def test_align_w2_run(gmm_file, quad_reward_file, tmp_path, capsys):
    out_dir = str(tmp_path / "w2")
    rc = main(["align-w2", "--model", gmm_file, "--reward", quad_reward_file,
               "--lambda", "0.15", "--n", "2000", "--seed", "1",
               "--backend", "quad", "--out", out_dir])
    assert rc == 0
    pairs = np.loadtxt(os.path.join(out_dir, "pairs.csv"), delimiter=",",
                       skiprows=1)
    ys, xs = pairs[:, 0], pairs[:, 1]
    assert np.max(np.abs(xs - (1 + ys / 2))) <= 1e-12


def test_align_w2_lowrank_manifest(tmp_path):
    model = tmp_path / "m.json"
    model.write_text(json.dumps({
        "type": "discrete", "atoms": [[0.5, 0.0], [-0.5, 0.3]],
        "probs": [0.5, 0.5], "C": 1.0}))
    reward = tmp_path / "r.json"
    reward.write_text(json.dumps({
        "type": "lowrank_maxaffine", "A": [[0.8, 0.0]],
        "pieces": [[[1.0], 0.0]], "L": 1.0, "R": 1.0}))
    out_dir = str(tmp_path / "lr")
    rc = main(["align-w2", "--model", str(model), "--reward", str(reward),
               "--lambda", "0.1", "--eps", "0.2", "--n", "50", "--seed", "4",
               "--backend", "lowrank", "--out", out_dir])
    assert rc == 0
    manifest = json.loads(open(os.path.join(out_dir, "manifest.json")).read())
    derived = manifest["derived_parameters"]
    params = ra.Alg2Params.from_problem(L=1.0, S=0.8, lam=0.1, C=1.0,
                                        eps=0.2, r_A=1)
    assert derived["h"] == pytest.approx(params.h)
    assert derived["eps_P"] == pytest.approx(params.eps_P)


def test_invalid_delta_no_partial_outputs(model_file, kl_reward_file,
                                          tmp_path, capsys):
    out_dir = str(tmp_path / "bad")
    rc = main(["align-kl", "--model", model_file, "--reward", kl_reward_file,
               "--delta", "1.5", "--n", "10", "--seed", "0",
               "--out", out_dir])
    assert rc == 2
    assert not os.path.exists(os.path.join(out_dir, "samples.csv"))
    assert not os.path.exists(os.path.join(out_dir, "manifest.json"))


def test_quadratic_reward_rejected_for_kl(model_file, quad_reward_file,
                                          tmp_path, capsys):
    rc = main(["align-kl", "--model", model_file, "--reward",
               quad_reward_file, "--out", str(tmp_path / "x")])
    assert rc == 2


def test_validate_suite(capsys, tmp_path):
    rc = main(["validate", "--suite", "oracles", "--seed", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    report = json.loads(open(tmp_path / "validate.json").read())
    assert report["passed"]


def test_reproduce_fig1_small(tmp_path):
    summary = reproduce_fig1(seed=0, n=20000, out_dir=str(tmp_path / "fig1"))
    assert summary["transport_map_max_dev"] <= 1e-12
    assert abs(summary["base_right_mode_mass"] - 0.5) <= 0.01
    assert abs(summary["kl_right_mode_mass"]
               - summary["kl_right_mode_mass_quadrature"]) <= 0.01
    # the reward peaks at x = 2: KL reweights toward the right mode, the
    # transport map shifts the mean from 0 to 1
    assert summary["kl_right_mode_mass"] > 0.7
    assert abs(summary["w2_mean"] - 1.0) < 0.02
    for name in ("base.csv", "kl.csv", "w2_pairs.csv", "histograms.json",
                 "manifest.json"):
        assert os.path.exists(os.path.join(str(tmp_path / "fig1"), name))


def test_constant_reward_base_shortcut(model_file, tmp_path):
    reward = tmp_path / "const.json"
    reward.write_text(json.dumps({"type": "linear", "theta": [0.0]}))
    out_dir = str(tmp_path / "const_out")
    rc = main(["align-kl", "--model", model_file, "--reward", str(reward),
               "--n", "3000", "--seed", "5", "--out", out_dir])
    assert rc == 0
    manifest = json.loads(open(os.path.join(out_dir, "manifest.json")).read())
    assert manifest["diagnostics"]["used_base_shortcut"]
    samples = np.loadtxt(os.path.join(out_dir, "samples.csv"), delimiter=",",
                         skiprows=1)
    assert abs(np.mean(samples > 0.5) - 0.5) < 0.03


def test_estimate_z_stochastic_backends(model_file, capsys):
    for backend in ("mc", "annealed"):
        rc = main(["estimate-z", "--model", model_file, "--v", "0.8",
                   "--eta", "0.2", "--delta", "0.1", "--backend", backend,
                   "--seed", "1"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        truth = (1 + np.exp(0.8)) / 2
        assert abs(out["value"] - truth) <= 0.4 * truth
        assert out["n_draws"] > 0


def test_linear_reward_adapter(model_file, tmp_path):
    reward = tmp_path / "lin.json"
    reward.write_text(json.dumps({"type": "linear", "theta": [1.0]}))
    out_dir = str(tmp_path / "lin_out")
    rc = main(["align-kl", "--model", model_file, "--reward", str(reward),
               "--n", "20000", "--seed", "2", "--out", out_dir])
    assert rc == 0
    samples = np.loadtxt(os.path.join(out_dir, "samples.csv"), delimiter=",",
                         skiprows=1)
    assert abs(np.mean(samples > 0.5) - np.e / (1 + np.e)) < 0.02
