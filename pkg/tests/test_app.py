import json

import pandas as pd
import pytest

from abmlens.app import build_parser, main
from abmlens.helpers.artifacts import MANIFEST_NAME


def _read(path):
    return json.loads(path.read_text())


def _artifact_bytes(directory):
    return {
        p.relative_to(directory).as_posix(): p.read_bytes()
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "sim.toml"
    path.write_text("n_elders = 12\ngrid_side = 2\nhorizon = 200\n")
    return path


def test_emachine_on_bundled_period_two_fixture(period2_dir, tmp_path):
    out = tmp_path / "machine"
    assert main(["emachine", "--input", str(period2_dir), "--history", "1", "--out", str(out)]) == 0
    machine = _read(out / "machine.json")
    invariants = _read(out / "invariants.json")
    assert len(machine["states"]) == 2
    assert invariants["entropy_rate"] == 0.0
    assert invariants["statistical_complexity"] == pytest.approx(1.0)
    assert (out / "machine.dot").exists()
    manifest = _read(out / MANIFEST_NAME)
    assert manifest["command"] == "emachine"
    assert sorted(manifest["outputs"]) == ["invariants.json", "machine.dot", "machine.json"]


def test_unknown_subcommand_exits_2(capsys):
    assert main(["launch"]) == 2
    assert "usage" in capsys.readouterr().err


def test_validation_error_exits_2_and_leaves_no_output(config_file, tmp_path, capsys):
    out = tmp_path / "sim"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_elders": 0}))
    assert main(["simulate", "--config", str(bad), "--out", str(out)]) == 2
    assert "n_elders" in capsys.readouterr().err
    assert not out.exists()
    assert list(tmp_path.glob(".sim.*")) == []


def test_missing_input_exits_2(tmp_path):
    assert main(["emachine", "--input", str(tmp_path / "nowhere.csv"), "--out", str(tmp_path / "m")]) == 2


def test_internal_error_exits_1_and_keeps_previous_output(config_file, tmp_path, monkeypatch):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(config_file), "--out", str(out)]) == 0
    before = _artifact_bytes(out)

    def explode(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr("abmlens.app.save_output", explode)
    assert main(["simulate", "--config", str(config_file), "--out", str(out)]) == 1
    assert _artifact_bytes(out) == before
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".sim.")] == []


def test_simulate_seed_flag_overrides_config(config_file, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(config_file), "--seed", "99", "--out", str(out)]) == 0
    assert _read(out / "config.json")["seed"] == 99
    assert _read(out / MANIFEST_NAME)["seeds"] == [99]


def test_rerun_reproduces_artifacts_byte_for_byte(config_file, tmp_path):
    first = tmp_path / "first"
    assert main(["sweep", "--config", str(config_file), "--param", "caregiver_capacity",
                 "--values", "0,8", "--replicates", "2", "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert main(["rerun", str(first / MANIFEST_NAME), "--out", str(second)]) == 0
    assert _artifact_bytes(first) == _artifact_bytes(second)
    assert _read(second / MANIFEST_NAME)["argv"][-1] == str(second)


def test_rerun_resolves_relative_paths_against_the_recorded_cwd(config_file, tmp_path, monkeypatch):
    work = config_file.parent
    monkeypatch.chdir(work)
    assert main(["simulate", "--config", config_file.name, "--out", "first"]) == 0
    assert _read(work / "first" / MANIFEST_NAME)["cwd"] == str(work)

    elsewhere = tmp_path / "elsewhere"
    elsewhere.mkdir()
    monkeypatch.chdir(elsewhere)
    assert main(["rerun", str(work / "first" / MANIFEST_NAME), "--out", "second"]) == 0
    assert _artifact_bytes(work / "first") == _artifact_bytes(elsewhere / "second")


def test_symbolize_then_emachine(config_file, tmp_path):
    sim, symbols, machine = tmp_path / "sim", tmp_path / "symbols", tmp_path / "machine"
    assert main(["simulate", "--config", str(config_file), "--out", str(sim)]) == 0
    assert main(["symbolize", "--input", str(sim), "--var", "mobility", "--bins", "2", "--out", str(symbols)]) == 0
    assert pd.read_csv(symbols / "symbols.csv")["symbol"].isin([0, 1]).all()
    assert main(["emachine", "--input", str(symbols), "--out", str(machine)]) == 0
    assert _read(machine / "invariants.json")["entropy_rate"] >= 0.0


def test_diffusion_train_sample_and_descriptors(tmp_path):
    samples = tmp_path / "data.csv"
    pd.DataFrame({"a": [0.1 * i for i in range(40)], "b": [(-1) ** i for i in range(40)]}).to_csv(samples, index=False)
    model, drawn, desc = tmp_path / "model", tmp_path / "drawn", tmp_path / "desc"
    assert main(["diffusion-train", "--input", str(samples), "--epochs", "2", "--hidden-width", "8",
                 "--steps", "20", "--out", str(model)]) == 0
    assert main(["diffusion-sample", "--model", str(model), "--n", "30", "--seed", "3", "--out", str(drawn)]) == 0
    assert pd.read_csv(drawn / "samples.csv").shape == (30, 2)
    assert main(["descriptors", "--input", str(samples), "--model", str(model), "--restarts", "2",
                 "--out", str(desc)]) == 0
    assert _read(desc / "descriptors.json")["mean_score_norm"] is not None


def test_sweep_surface_regimes_cluster_report(config_file, tmp_path):
    sweep_dir, surface, regimes, clusters, report = (
        tmp_path / name for name in ("sweep", "surface", "regimes", "clusters", "report")
    )
    assert main(["sweep", "--config", str(config_file), "--param", "caregiver_capacity",
                 "--grid", "0:9:4", "--out", str(sweep_dir)]) == 0
    fast = ["--epochs", "2", "--restarts", "2"]
    assert main(["surface", "--sweep", str(sweep_dir), *fast, "--out", str(surface)]) == 0
    assert main(["regimes", "--surface", str(surface), "--field", "mean_mobility", "--out", str(regimes)]) == 0
    assert "boundaries" in _read(regimes / "regimes.json")
    assert main(["cluster", "--surface", str(surface), "--k", "2", "--fields", "mean_mobility,mean_effort",
                 "--out", str(clusters)]) == 0
    assert len(_read(clusters / "clusters.json")["labels"]) == 4
    assert main(["report", "--sweep", str(sweep_dir), "--surface", str(surface), "--out", str(report)]) == 0
    summary = pd.read_csv(report / "summary.csv", float_precision="round_trip")
    long = pd.read_csv(surface / "surface.csv", float_precision="round_trip")
    h_mu = long[long["field"] == "h_mu"]["mean"].tolist()
    assert summary["h_mu"].tolist() == h_mu
    assert (report / "plot_h_mu.svg").exists()
    assert (report / "machine_000.dot").exists()


def test_scales_flag_rejects_garbage(tmp_path):
    assert main(["tensor", "--sweep", str(tmp_path), "--scales", "1,x", "--out", str(tmp_path / "t")]) == 2


def test_surface_takes_max_order_not_history(tmp_path, capsys):
    args = build_parser().parse_args(["surface", "--sweep", "s", "--max-order", "5", "--out", str(tmp_path)])
    assert args.max_order == 5
    assert main(["surface", "--sweep", "s", "--history", "2", "--out", str(tmp_path / "a")]) == 2
    assert "--history" in capsys.readouterr().err
