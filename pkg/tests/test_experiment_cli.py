import json

import numpy as np
import pytest

from gcdlab import cli, cluster, synthdata
from gcdlab import experiment as ex
from gcdlab.experiment import ExperimentConfig


def small_config(**top) -> ExperimentConfig:
    base = {
        "dataset": {"num_classes": 6, "num_known": 3, "instances_total": 300, "ambient_dim": 12},
        "gcd": {"epochs": 6, "batch_size": 64, "hidden": 32, "embed_dim": 16},
        "downstream": {"epochs": 6},
        "seeds": [0],
    }
    base.update(top)
    return ExperimentConfig.from_dict(base).validate()


def write_config(tmp_path, cfg: ExperimentConfig):
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    return str(path)


# ---- config ----

def test_config_round_trip():
    cfg = small_config(reliability_arm="global_r:50", corruption_fraction=0.2)
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.dataset.test_fraction == 0.2


def test_default_config_is_valid():
    cfg = ExperimentConfig().validate()
    assert cfg.gcd.lam == 0.35 and cfg.downstream.epochs >= 1


@pytest.mark.parametrize("data", [{"bogus": 1}, {"gcd": {"bogus": 1}}, {"dataset": {"classes": 3}}])
def test_unknown_keys_raise(data):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(data)


@pytest.mark.parametrize("patch", [
    {"gcd": {"rho": 1.5}}, {"gcd": {"tau_min": 2.0}}, {"gcd": {"temperature_arm": "cosine"}},
    {"gcd": {"epochs": 2}}, {"reliability_arm": "global_r:150"}, {"seeds": []},
    {"corruption_fraction": 1.0}, {"dataset": {"test_fraction": 0.0}},
])
def test_validation_errors(patch):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(patch).validate()


def test_ts_schedule_examples():
    assert ex.ts_schedule_arm(0, 8, 0.07, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert ex.ts_schedule_arm(1, 8, 0.07, 1.0) == pytest.approx(0.535, abs=1e-12)
    assert ex.ts_schedule_arm(2, 8, 0.07, 1.0) == pytest.approx(0.07, abs=1e-12)
    assert ex.ts_schedule_arm(4, 8, 0.07, 1.0) == pytest.approx(1.0, abs=1e-12)
    for bad in (-1, 8):
        with pytest.raises(ValueError):
            ex.ts_schedule_arm(bad, 8, 0.07, 1.0)


# ---- pipeline ----

def test_arms_share_data_and_initialisation():
    cfg_a = small_config()
    cfg_b = small_config(gcd={**cfg_a.to_dict()["gcd"], "temperature_arm": "fixed_tau:0.07"})
    _, rec_a = ex.make_dataset(cfg_a, 3)
    _, rec_b = ex.make_dataset(cfg_b, 3)
    assert rec_a == rec_b
    da = cluster.train_gcd(rec_a, 6, cluster.GcdConfig(**{**cfg_a.to_dict()["gcd"], "epochs": 0}),
                           ex.stream(3, ex.STREAM_INIT), ex.stream(3, ex.STREAM_BATCH))
    db = cluster.train_gcd(rec_b, 6, cluster.GcdConfig(**{**cfg_b.to_dict()["gcd"], "epochs": 0}),
                           ex.stream(3, ex.STREAM_INIT), ex.stream(3, ex.STREAM_BATCH))
    assert all(np.array_equal(da.encoder[k], db.encoder[k]) for k in da.encoder.tensors)


def test_run_experiment_schema_and_determinism(tmp_path):
    cfg = small_config(seeds=[0, 1])
    a = ex.run_experiment(cfg, tmp_path / "a")
    b = ex.run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert a["aggregate"]["num_ok"] == 2
    for part in ("test", "pseudo_labels"):
        assert set(a["aggregate"][part]) == set(ex.SUMMARY_KEYS)
    seed_dir = tmp_path / "a" / "seed_0"
    for name in ("metrics.json", "per_class.csv", "pseudo_labels.csv", "reliability.csv",
                 "kappa_histogram.json", "projection.csv"):
        assert (seed_dir / name).exists(), name
    fixed = ex.run_experiment(small_config(seeds=[0, 1], gcd={"epochs": 6, "batch_size": 64, "hidden": 32,
                                                               "embed_dim": 16, "temperature_arm": "fixed_tau:0.07"}),
                              write=False)
    assert fixed.keys() == a.keys()
    assert fixed["per_seed"][0].keys() == a["per_seed"][0].keys()
    assert b == a


def test_failing_seed_does_not_abort_others(tmp_path, monkeypatch):
    real = ex.run_seed

    def flaky(config, seed, seed_dir=None):
        if seed == 1:
            raise cluster.NonFiniteLossError(17, "loss")
        return real(config, seed, seed_dir)

    monkeypatch.setattr(ex, "run_seed", flaky)
    out = ex.run_experiment(small_config(seeds=[0, 1, 2]), tmp_path)
    status = [r["status"] for r in out["per_seed"]]
    assert status == ["ok", "error", "ok"]
    assert out["per_seed"][1]["error"]["step"] == 17
    assert out["aggregate"]["num_ok"] == 2 and out["aggregate"]["num_failed"] == 1


def test_corrupted_run_reports_count():
    out = ex.run_seed(small_config(corruption_fraction=0.2), 0)
    assert out["corrupted"] > 0


def test_pca_is_sign_stable():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((40, 5)) * [5, 3, 1, 1, 1]
    P = ex.pca_2d(Z)
    assert P.shape == (40, 2)
    assert np.allclose(ex.pca_2d(Z[::-1]), P[::-1])
    assert abs(np.corrcoef(P[:, 0], P[:, 1])[0, 1]) < 1e-8


# ---- CLI ----

def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_stage_chain_matches_run_all(tmp_path, capsys):
    cfg_path = write_config(tmp_path, small_config(seeds=[2]))
    stages = tmp_path / "stages"
    for cmd in ("generate", "train-gcd", "reliability", "train-downstream", "evaluate"):
        code, out, err = run_cli(capsys, cmd, "--config", cfg_path, "--out-dir", str(stages))
        assert code == 0, err
        assert json.loads(out)["status"] == "ok"
    code, _, err = run_cli(capsys, "run-all", "--config", cfg_path, "--out-dir", str(tmp_path / "all"))
    assert code == 0, err
    staged = json.loads((stages / "metrics.json").read_text())
    whole = json.loads((tmp_path / "all" / "metrics.json").read_text())["per_seed"][0]["test"]
    assert staged == whole
    assert len(list((stages / "checkpoints").glob("epoch_*.json"))) == 3


def test_cli_seed_override_and_headness_dump(tmp_path, capsys):
    cfg_path = write_config(tmp_path, small_config())
    out_dir = tmp_path / "h"
    assert run_cli(capsys, "generate", "--config", cfg_path, "--out-dir", str(out_dir), "--seed", "5")[0] == 0
    summary = json.loads((out_dir / "dataset_summary.json").read_text())
    assert summary["seed"] == 5
    code, _, err = run_cli(capsys, "train-gcd", "--config", cfg_path, "--out-dir", str(out_dir),
                           "--seed", "5", "--dump-headness")
    assert code == 0, err
    lines = (out_dir / "headness.csv").read_text().splitlines()
    assert lines[0] == "epoch,id,h,tau" and len(lines) > 1


def test_cli_missing_inputs_give_error_json(tmp_path, capsys):
    cfg_path = write_config(tmp_path, small_config())
    for cmd in ("train-gcd", "reliability", "train-downstream", "evaluate"):
        code, out, err = run_cli(capsys, cmd, "--config", cfg_path, "--out-dir", str(tmp_path / "empty"))
        assert code != 0 and out == ""
        payload = json.loads(err)
        assert payload["status"] == "error" and payload["type"] == "FileNotFoundError"


def test_cli_bad_config_is_an_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"gcd": {"rho": 3.0}}))
    code, _, err = run_cli(capsys, "run-all", "--config", str(path), "--out-dir", str(tmp_path / "x"))
    assert code == 1 and json.loads(err)["type"] == "ValueError"


def test_cli_sam_demo(tmp_path, capsys):
    code, out, err = run_cli(capsys, "sam-demo", "--out-dir", str(tmp_path), "--steps", "60")
    assert code == 0, err
    result = json.loads(out)["result"]
    assert result["loss_final"] < result["loss_initial"]
    for k in range(2):
        for name in (f"sam_mask_{k}.pgm", f"sam_attention_{k}.pgm"):
            assert (tmp_path / name).read_bytes().startswith(b"P5")
    assert (tmp_path / "sam_losses.csv").read_text().count("\n") == 1 + 61  # header, initial loss, one per step
