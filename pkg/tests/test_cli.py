import json

import numpy as np
import pytest

from flockident import storage
from flockident.cli import main

SMOKE = """
[workspace]
obstacle_centers = 2.5 2.5 -4
obstacle_half_widths = 1

[grid]
cells_per_axis = 5

[boids]
count = 8
dt = 0.002
total_time = 0.04
sample_every = 10
seed = 3

[initfit]
hidden_widths = 6
steps = 40
base_rate = 0.02
seed = 4

[ident]
max_newton = 1
max_cg = 2

[output]
directory = {out}
"""

TWIN = """
[grid]
cells_per_axis = 7

[twin]
enabled = true
tf = 0.08
obs_dt = 0.04
start_scale = 1.1

[ident]
max_newton = 1
max_cg = 2

[output]
directory = {out}
"""


def write_cfg(tmp_path, template, name="run.cfg"):
    out = tmp_path / "out"
    cfg = tmp_path / name
    cfg.write_text(template.format(out=out))
    return cfg, out


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("smoke")
    cfg, out = write_cfg(tmp_path, SMOKE)
    assert main(["generate", "--config", str(cfg)]) == 0
    assert main(["fit-init", "--config", str(cfg)]) == 0
    return cfg, out


class TestGenerate:
    def test_outputs_exist(self, smoke_run):
        _, out = smoke_run
        for name in ("trajectory.bin", "trajectory.csv", "histograms.bin",
                     "densities.bin", "momentum0.bin", "manifest.json"):
            assert (out / name).exists()

    def test_manifest_contents(self, smoke_run):
        _, out = smoke_run
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n_agents"] == 8
        assert manifest["seed"] == 3
        assert manifest["v_max"] > 0

    def test_dataset_is_consistent(self, smoke_run):
        _, out = smoke_run
        times, densities, spec = storage.read_density_series(out / "densities.bin")
        assert spec.cells_per_axis == 5
        assert len(times) == densities.shape[0]
        # every snapshot carries unit mass
        masses = densities.reshape(len(times), -1).sum(axis=1) * spec.cell_volume
        assert np.allclose(masses, 1.0)

    def test_rerun_is_byte_identical(self, smoke_run, tmp_path):
        cfg, out = smoke_run
        cfg2 = tmp_path / "again.cfg"
        out2 = tmp_path / "out2"
        cfg2.write_text(SMOKE.format(out=out2))
        assert main(["generate", "--config", str(cfg2)]) == 0
        for name in ("trajectory.bin", "histograms.bin", "densities.bin", "momentum0.bin"):
            assert (out / name).read_bytes() == (out2 / name).read_bytes()

    def test_seed_override_changes_data(self, smoke_run, tmp_path):
        cfg, out = smoke_run
        cfg2 = tmp_path / "seeded.cfg"
        out2 = tmp_path / "out3"
        cfg2.write_text(SMOKE.format(out=out2))
        assert main(["generate", "--config", str(cfg2), "--seed", "99"]) == 0
        assert (out / "trajectory.bin").read_bytes() != (out2 / "trajectory.bin").read_bytes()
        manifest = json.loads((out2 / "manifest.json").read_text())
        assert manifest["seed"] == 99


class TestFitInit:
    def test_outputs_exist(self, smoke_run):
        _, out = smoke_run
        assert (out / "checkpoint.bin").exists()
        assert (out / "fit_curve.csv").exists()

    def test_curve_loss_decreases(self, smoke_run):
        _, out = smoke_run
        lines = (out / "fit_curve.csv").read_text().splitlines()[1:]
        losses = [float(row.split(",")[1]) for row in lines]
        assert min(losses) <= losses[0]

    def test_checkpoint_loads(self, smoke_run):
        _, out = smoke_run
        wts = storage.read_checkpoint(out / "checkpoint.bin")
        assert wts.hidden_widths == (6,)


class TestIdentifyAndEvaluate:
    def test_full_chain(self, smoke_run):
        cfg, out = smoke_run
        assert main(["identify", "--config", str(cfg)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["theta"]) == 10
        assert len(report["params"]) == 10
        losses = report["loss_trace"]
        assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
        assert (out / "loss_trace.csv").exists()
        assert (out / "hellinger_trace.csv").exists()
        assert (out / "fields.bin").exists()

        assert main(["evaluate", "--config", str(cfg)]) == 0
        summary = json.loads((out / "evaluate_summary.json").read_text())
        assert summary["mass_drift"] <= 1e-10
        assert summary["min_density"] >= 0.0
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "time,hellinger_sq"


class TestTwinMode:
    def test_twin_identify(self, tmp_path):
        cfg, out = write_cfg(tmp_path, TWIN)
        assert main(["identify", "--config", str(cfg)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["twin_mode"] is True
        assert report["loss_trace"][-1] <= report["loss_trace"][0]


class TestErrorPaths:
    def test_bad_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[boids]\nwhatever = 1\n")
        assert main(["generate", "--config", str(cfg)]) == 2
        assert "whatever" in capsys.readouterr().err

    def test_missing_dataset_exits_4(self, tmp_path):
        cfg, out = write_cfg(tmp_path, SMOKE)
        assert main(["fit-init", "--config", str(cfg)]) == 4

    def test_out_override(self, tmp_path):
        cfg, out = write_cfg(tmp_path, SMOKE)
        alt = tmp_path / "alt"
        assert main(["generate", "--config", str(cfg), "--out", str(alt)]) == 0
        assert (alt / "manifest.json").exists()
