import dataclasses
import filecmp
import os

import numpy as np
import pytest

from irwri import cli
from irwri import config as cfgmod
from irwri.config import ConfigError, ExperimentConfig
from irwri.experiments import (Landscape, build_acquisition, build_grid, count_local_minima, emit_outputs,
                               inclusion_models, layered_models, read_pgm, run_inclusion, run_landscape_scan,
                               run_layered, spurious_minima_along_alpha)


def tiny_inclusion(**inv):
    cfg = ExperimentConfig()
    cfg.grid = cfgmod.GridSpec(nx=16, nz=16, spacing=0.04, pml_width=4)
    cfg.acquisition = dataclasses.replace(cfg.acquisition, n_sources=6)
    cfg.schedule = dataclasses.replace(cfg.schedule, frequencies=(3.0, 5.0))
    cfg.inversion = dataclasses.replace(cfg.inversion, k_max=2, **inv)
    return cfg


def tiny_layered():
    cfg = cfgmod.layered_defaults()
    cfg.grid = cfgmod.GridSpec(nx=30, nz=12, spacing=0.05, pml_width=4, free_surface=True)
    cfg.acquisition = dataclasses.replace(cfg.acquisition, source_spacing=0.5, receiver_spacing=0.1,
                                          source_depth=0.1, receiver_depth=0.05)
    cfg.schedule = dataclasses.replace(cfg.schedule, paths=(3.0, 3.5))
    cfg.inversion = dataclasses.replace(cfg.inversion, k_max=2)
    cfg.landscape = dataclasses.replace(cfg.landscape, n_alpha=5, n_beta=3)
    return cfg


# --- config ------------------------------------------------------------------

@pytest.mark.parametrize("make", [ExperimentConfig, cfgmod.layered_defaults, tiny_inclusion])
def test_config_round_trip(make):
    cfg = make()
    text = cfgmod.to_text(cfg)
    again = cfgmod.from_text(text)
    assert again == cfg
    assert cfgmod.to_text(again) == text


def test_config_rejects_unknown_entries():
    with pytest.raises(ConfigError):
        cfgmod.from_text("[grid]\nnx = 10\nwidth = 3\n")
    with pytest.raises(ConfigError):
        cfgmod.from_text("[gridd]\nnx = 10\n")
    with pytest.raises(ConfigError):
        cfgmod.from_text("[grid]\nnx = ten\n")
    with pytest.raises(ConfigError):
        cfgmod.from_text("[grid]\nfree_surface = maybe\n")


def test_config_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[inversion]\nactive = v0 eps\nk_max = 7\n[noise]\nsnr_db = 10\n")
    cfg = cfgmod.load(str(path))
    assert cfg.inversion.active == ("v0", "eps") and cfg.inversion.k_max == 7
    assert cfg.noise.snr_db == 10.0 and cfg.grid == cfgmod.GridSpec()


# --- model builders ----------------------------------------------------------

def test_inclusion_model_values():
    cfg = tiny_inclusion()
    grid = build_grid(cfg.grid)
    true, init, disc = inclusion_models(cfg.model, grid)
    assert disc.sum() > 0
    assert np.all(true.v0[disc] == 3.3) and np.all(true.epsilon[disc] == 0.1) and np.all(true.delta[disc] == 0.2)
    assert np.all(true.v0[~disc] == 3.0) and np.all(init.epsilon == 0.05)


def test_mono_eps_model_has_homogeneous_passives():
    cfg = tiny_inclusion()
    cfg.model = dataclasses.replace(cfg.model, anomaly_classes=("eps",))
    grid = build_grid(cfg.grid)
    true, _, disc = inclusion_models(cfg.model, grid)
    assert np.ptp(true.v0) == 0 and np.ptp(true.delta) == 0 and np.ptp(true.epsilon) > 0


def test_layered_model_structure():
    cfg = tiny_layered()
    grid = build_grid(cfg.grid)
    assert grid.free_surface_top and grid.interior_slices()[0].start == 0
    true, init, sdelta = layered_models(cfg.model, grid)
    # initial v0 is laterally invariant and spans the configured gradient
    np.testing.assert_allclose(np.ptp(init.v0, axis=1), 0.0, atol=1e-12)
    assert init.v0.min() == pytest.approx(1.5) and init.v0.max() == pytest.approx(3.2)
    assert np.ptp(init.epsilon) < np.ptp(true.epsilon)
    np.testing.assert_array_equal(sdelta, init.delta)
    acq = build_acquisition(cfg.acquisition, grid)
    assert acq.kind == "surface" and acq.n_receivers > acq.n_sources


# --- runs and outputs --------------------------------------------------------

def test_inclusion_run_and_emit_is_idempotent(tmp_path):
    rep = run_inclusion(tiny_inclusion())
    assert rep.metrics["iterations"] == len(rep.logs["final"]) <= 2
    a, b = tmp_path / "a", tmp_path / "b"
    paths = emit_outputs(rep, str(a))
    emit_outputs(rep, str(b))
    emit_outputs(rep, str(a))
    for p in paths:
        rel = os.path.relpath(p, a)
        if rel.startswith("timing_"):
            continue
        assert filecmp.cmp(p, b / rel, shallow=False), rel
    img = read_pgm(str(a / "final_v0.pgm"))
    assert img.shape == (rep.grid.nz, rep.grid.nx)
    lines = (a / "log_final.csv").read_text().splitlines()
    assert len(lines) - 1 == rep.metrics["iterations"]
    assert "wall_time" not in lines[0]


def test_inclusion_run_is_deterministic():
    r1 = run_inclusion(tiny_inclusion())
    r2 = run_inclusion(tiny_inclusion())
    np.testing.assert_array_equal(r1.models["final"].v0, r2.models["final"].v0)
    for a, b in zip(r1.logs["final"], r2.logs["final"]):
        assert a.data_residual == pytest.approx(b.data_residual, rel=1e-13)


def test_zero_anomaly_fixed_point():
    cfg = tiny_inclusion(active=("v0", "eps", "delta"))
    cfg.model = dataclasses.replace(cfg.model, anomaly_classes=())
    rep = run_inclusion(cfg)
    for name in ("v0", "eps", "delta"):
        np.testing.assert_allclose(rep.models["final"].field(name), rep.models["initial"].field(name), atol=1e-6)


def test_layered_runs_mono_and_joint():
    rep = run_layered(tiny_layered())
    assert {"v0", "v0_eps"} <= set(rep.models)
    # passive classes survive the m-space round trip up to rounding
    np.testing.assert_allclose(rep.models["v0"].epsilon, rep.models["initial"].epsilon, atol=1e-14)
    np.testing.assert_allclose(rep.models["v0_eps"].delta, rep.models["initial"].delta, atol=1e-14)
    assert "profile_x50" in rep.sections


def test_noisy_layered_is_reproducible():
    cfg = tiny_layered()
    cfg.noise = cfgmod.NoiseSpec(snr_db=10.0, seed=11)
    a = run_layered(cfg, [("v0",)])
    b = run_layered(cfg, [("v0",)])
    np.testing.assert_array_equal(a.models["v0"].v0, b.models["v0"].v0)


def test_landscape_endpoints():
    cfg = tiny_layered()
    cfg.landscape = dataclasses.replace(cfg.landscape, passive_delta="true")
    scape = run_landscape_scan(cfg, alphas=[-1.0, 0.0, 0.5, 1.0], betas=[0.0, 1.0])
    assert scape.fwi.shape == (2, 4)
    assert scape.fwi[0, 1] < 1e-20 * scape.fwi.max()  # true model reproduces noiseless data
    assert scape.fwi[0, 0] == pytest.approx(scape.fwi[0, 3], rel=1e-10)  # depends on |alpha|
    assert np.all(scape.wri >= 0) and np.all(scape.wri_penalty >= scape.wri)
    smooth = run_landscape_scan(tiny_layered(), alphas=[0.0], betas=[0.0])
    assert smooth.fwi[0, 0] > 0  # smoothed passive delta cannot fit the data exactly


def test_local_minimum_counter():
    assert count_local_minima([3, 2, 1, 2, 3]) == 1
    assert count_local_minima([0, 1, 2, 3]) == 0
    assert count_local_minima([0, 2, 1, 3, 4]) == 1
    assert count_local_minima([0, 2, 1.9999999, 3, 4], prominence=1e-3) == 0
    alpha = np.linspace(-1, 1, 9)
    line = np.abs(alpha) ** 2 + 0.3 * (np.abs(np.abs(alpha) - 0.5) < 0.2)
    scape = Landscape(alpha, np.array([1.0]), line[None], line[None], line[None])
    assert spurious_minima_along_alpha(scape, scape.fwi) == 0
    bumpy = np.where(np.isclose(np.abs(alpha), 0.5), 0.1, np.abs(alpha))
    assert spurious_minima_along_alpha(scape, bumpy[None]) == 1
    # a global minimum displaced off alpha = 0 is not spurious
    shifted = np.abs(np.abs(alpha) - 0.25)
    assert spurious_minima_along_alpha(scape, shifted[None]) == 0


def test_cli_parses_and_runs(tmp_path):
    p = cli.build_parser()
    args = p.parse_args(["inclusion", "--regularization", "dmp", "--active", "v0", "eps", "--seed", "3",
                         "--noise-snr", "12", "--out", str(tmp_path)])
    cfg = cli.resolve_config(args)
    assert cfg.inversion.regularization == "dmp" and cfg.inversion.active == ("v0", "eps")
    assert cfg.noise.seed == 3 and cfg.noise.snr_db == 12.0 and cfg.output.directory == str(tmp_path)
    with pytest.raises(SystemExit):
        p.parse_args(["inclusion", "--active", "eta"])
    conf = tmp_path / "tiny.ini"
    cfgmod.save(tiny_inclusion(), str(conf))
    assert cli.main(["forward", "--config", str(conf), "--out", str(tmp_path / "fw")]) == 0
    assert (tmp_path / "fw" / "data.manifest").exists()
