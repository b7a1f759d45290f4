import json
import shutil
import subprocess

import numpy as np
import pytest

from igns.cli import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from igns.graphdata import read_dataset, read_manifest

SMALL_MODEL = {"latent_dim": 8, "hidden": 8, "forcing_layers": 1, "warmup": 1}
SMALL_TRAIN = {"iterations": 4, "eval_every": 2, "window": 4, "batch_size": 2}


@pytest.fixture(scope="module")
def configs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    (d / "model.json").write_text(json.dumps(SMALL_MODEL))
    (d / "train.json").write_text(json.dumps(SMALL_TRAIN))
    return d


@pytest.fixture(scope="module")
def trained(tiny_mass_spring, configs, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "ckpt"
    code = main(["train", "--data", str(tiny_mass_spring), "--model-config", str(configs / "model.json"),
                 "--train-config", str(configs / "train.json"), "--out", str(out), "--seed", "0"])
    assert code == EXIT_OK
    return out


def test_gen_echo_and_rerun(tmp_path, capsys):
    args = ["gen", "--task", "wave_balls_mini", "--count", "80", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["horizon"] == 50
    assert read_manifest(tmp_path / "a").horizon == 50
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_unknown_task(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--task", "ks2d", "--count", "5", "--out", str(tmp_path / "x")])
    assert exc.value.code == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_gen_refuses_non_empty_out(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    assert main(["gen", "--task", "diffusion_contrast", "--count", "3", "--out", str(tmp_path)]) == EXIT_USAGE
    assert (tmp_path / "keep.txt").exists()


def test_train_smoke_outputs(trained):
    assert (trained / "metrics.jsonl").is_file() and (trained / "best.ckpt").is_file()
    echo = json.loads((trained / "config.json").read_text())
    assert echo["model"]["latent_dim"] == 8 and echo["train"]["iterations"] == 4


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_train_unknown_config_key(tiny_mass_spring, tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"latent_dimm": 8}))
    code = main(["train", "--data", str(tiny_mass_spring), "--model-config", str(tmp_path / "m.json"),
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE


def _params(tiny_mass_spring, configs, tmp_path, variant):
    out = tmp_path / variant
    (tmp_path / "t1.json").write_text(json.dumps({**SMALL_TRAIN, "iterations": 1}))
    assert main(["train", "--data", str(tiny_mass_spring), "--model-config", str(configs / "model.json"),
                 "--train-config", str(tmp_path / "t1.json"), "--variant", variant, "--out", str(out)]) == EXIT_OK
    return json.loads((out / "config.json").read_text())["n_parameters"]


def test_variant_parameter_counts(tiny_mass_spring, configs, tmp_path):
    n_con = _params(tiny_mass_spring, configs, tmp_path, "graphcon")
    n_ph = _params(tiny_mass_spring, configs, tmp_path, "igns")
    assert n_con != n_ph
    # igns adds four time-varying blocks, two biases and a learned damping row (h = 4)
    h, te, ch = 4, 16, 16
    block = 3 * h * h + 2 * (te * ch + ch + ch * h + h)
    assert n_ph - n_con == 4 * block + 2 * h + h


def test_eval_oracle_zero(trained, tiny_mass_spring, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tiny_mass_spring),
                 "--oracle", "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "metrics.json").read_text())
    assert rep["mse"] == 0.0 and rep["mse10"] == 0.0


def test_eval_metrics_recomputed_from_dump(trained, tiny_mass_spring, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tiny_mass_spring),
                 "--warmup-override", "2", "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "metrics.json").read_text())
    m = read_manifest(tiny_mass_spring)
    assert len(rep["per_step"]) == m.horizon and rep["warmup"] == 2
    assert len(rep["energy"]) == m.horizon
    _, pred = read_dataset(out / "rollout")
    _, truth = read_dataset(tiny_mass_spring, m.splits["test"])
    err = [np.concatenate([p.q - t.q, p.v - t.v], axis=2)[1:] for p, t in zip(pred, truth)]
    assert rep["mse"] == pytest.approx(np.mean(np.square(err)), rel=1e-6)


def test_eval_empty_split(trained, tiny_mass_spring, tmp_path):
    d = tmp_path / "ds"
    shutil.copytree(tiny_mass_spring, d)
    obj = json.loads((d / "manifest.json").read_text())
    obj["splits"]["val"] = []
    (d / "manifest.json").write_text(json.dumps(obj))
    code = main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(d), "--split", "val",
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA


def test_eval_mismatched_dataset(trained, tmp_path):
    d = tmp_path / "diff"
    assert main(["gen", "--task", "diffusion_contrast", "--count", "3", "--out", str(d)]) == EXIT_OK
    code = main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(d),
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA


def test_rollout_export(trained, tiny_mass_spring, tmp_path):
    out = tmp_path / "ro"
    assert main(["rollout", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tiny_mass_spring),
                 "--index", "0", "--out", str(out)]) == EXIT_OK
    m, trs = read_dataset(out)
    assert m.n_trajectories == 1 and trs[0].horizon == read_manifest(tiny_mass_spring).horizon
    assert main(["rollout", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tiny_mass_spring),
                 "--index", "99", "--out", str(tmp_path / "bad")]) == EXIT_USAGE


def test_verify_quick_passes(capsys):
    assert main(["verify", "--quick"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "symplectic_det" in out and "PASS" in out


def test_verify_fault_named(capsys):
    assert main(["verify", "--quick", "--fault", "grad_q_sign"]) == EXIT_CHECK
    failed = capsys.readouterr().out.splitlines()[-1]
    assert failed.startswith("FAILED:") and "grad_hamiltonian" in failed


def test_console_script_help():
    exe = shutil.which("igns")
    if exe is None:
        pytest.skip("console script not installed")
    out = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "verify" in out.stdout
