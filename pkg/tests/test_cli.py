import numpy as np
import pytest

from nmnist_snn.aer import decode_events, index_dataset
from nmnist_snn.cli import build_parser, fnv1a64, main, read_manifest
from nmnist_snn.config import RunConfig
from nmnist_snn.network import NetworkState, load_checkpoint
from nmnist_snn.preprocess import read_pgm

SUBCOMMANDS = ["decode", "collapse", "psth", "train", "eval", "ensemble", "dse", "inspect"]


@pytest.fixture(scope="module")
def cfg_file(synthetic_root, tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.cfg"
    path.write_text(f"n_exc=8\ndata_root={synthetic_root}\nn_train=30\nn_test=15\ndelta_theta=0.1\n")
    return path


@pytest.fixture(scope="module")
def trained(cfg_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.snnw"
    assert main(["train", "--config", str(cfg_file), "--out", str(out)]) == 0
    return out


def test_fnv1a64_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8
    assert fnv1a64(b"bar", fnv1a64(b"foo")) == fnv1a64(b"foobar")


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_every_subcommand_has_help(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1


def test_unknown_config_key_fails_before_work(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_exc=4\ntau_xpr=20\ndata_root=/does/not/exist\n")
    out = tmp_path / "m.snnw"
    assert main(["train", "--config", str(bad), "--out", str(out)]) == 1
    assert "tau_xpr" in capsys.readouterr().err
    assert not out.exists()
    assert main(["train", "--set", "eta=-3", "--out", str(out)]) == 1


def test_decode_csv_matches_decoder(synthetic_root, tmp_path, capsys):
    f = index_dataset(synthetic_root).train[0].path
    assert main(["decode", str(f), "--csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "t_us,x,y,polarity"
    stream = decode_events(f.read_bytes())
    assert len(lines) == len(stream) + 1
    for line, ev in zip(lines[1:50], stream):
        assert line == f"{ev.timestamp},{ev.x},{ev.y},{int(ev.polarity)}"
    assert main(["decode", str(f)]) == 0
    assert f"events={len(stream)}" in capsys.readouterr().out


def test_decode_bad_file_is_data_error(tmp_path):
    f = tmp_path / "bad.bin"
    f.write_bytes(b"\x01\x02\x03")
    assert main(["decode", str(f)]) == 2
    assert main(["decode", str(tmp_path / "missing.bin")]) == 2


def test_collapse_and_psth(synthetic_root, tmp_path, capsys):
    out = tmp_path / "frames"
    assert main(["collapse", str(synthetic_root), "--limit", "5", "--out", str(out)]) == 0
    files = sorted(out.glob("*.pgm"))
    assert len(files) == 5
    img = read_pgm(files[0].read_bytes())
    assert img.shape == (34, 34) and img.max() == 255
    assert "peak_is_one=5" in capsys.readouterr().out
    csv = tmp_path / "psth.csv"
    assert main(["psth", str(synthetic_root), "--out", str(csv), "--limit", "10"]) == 0
    rows = csv.read_text().splitlines()
    assert rows[0] == "t_ms,H" and len(rows) == 106


def test_collapse_missing_dataset_is_data_error(tmp_path):
    assert main(["collapse", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_train_zero_epochs_writes_seeded_initialisation(cfg_file, tmp_path):
    out = tmp_path / "init.snnw"
    assert main(["train", "--config", str(cfg_file), "--set", "epochs=0", "--set", "seed=4",
                 "--out", str(out)]) == 0
    w, theta, labels = load_checkpoint(out)
    init = NetworkState.initial(RunConfig.from_file(cfg_file).network_config(), seed=4)
    assert np.array_equal(w, init.weights)
    assert np.all(theta == 0) and np.all(labels == -1)


def test_train_writes_reproducible_manifest(trained, cfg_file, tmp_path):
    cfg, run = read_manifest(trained.with_name(trained.name + ".manifest"))
    assert cfg == RunConfig.from_file(cfg_file)
    assert run["mode"] == "trace" and len(run["dataset_fnv1a64"]) == 16
    again = tmp_path / "again.snnw"
    assert main(["train", "--config", str(trained) + ".manifest", "--out", str(again)]) == 0
    assert again.read_bytes() == trained.read_bytes()


def test_eval_inspect_and_ensemble(trained, synthetic_root, tmp_path, capsys):
    report = tmp_path / "report.csv"
    assert main(["eval", "--model", str(trained), "--test", str(synthetic_root), "--out", str(report)]) == 0
    assert "accuracy=" in capsys.readouterr().out
    assert report.read_text().startswith("pattern_id,true,pred,responsive\n")
    pgm, hist = tmp_path / "w.pgm", tmp_path / "h.csv"
    assert main(["inspect", "--model", str(trained), "--weights-pgm", str(pgm), "--hist", str(hist)]) == 0
    assert pgm.read_bytes().startswith(b"P5\n102 102\n255\n")
    assert "bimodality=" in hist.read_text()
    assert main(["ensemble", "--models", str(trained), str(trained), "--test", str(synthetic_root)]) == 0
    assert "ensemble: accuracy=" in capsys.readouterr().out


def test_other_modes_train(cfg_file, tmp_path):
    psth = tmp_path / "p.snnw"
    assert main(["train", "--config", str(cfg_file), "--mode", "psth", "--set", "calib_patterns=20",
                 "--out", str(psth)]) == 0
    assert (tmp_path / "p.snnw.h.csv").read_text().startswith("t_ms,h\n")
    cal = (tmp_path / "p.snnw.calibration.csv").read_text().splitlines()
    assert cal[0] == "a,b,rho,psth_mean_abs_dw,reference_mean_abs_dw,ratio"
    assert abs(float(cal[1].split(",")[-1]) - 1.0) < 1e-9
    fixed = tmp_path / "f.snnw"
    assert main(["train", "--config", str(cfg_file), "--mode", "fixedpost", "--set", "t_star=60",
                 "--out", str(fixed)]) == 0
    assert "run.t_star_ms=60" in (tmp_path / "f.snnw.manifest").read_text()


def test_dse_command(cfg_file, tmp_path, capsys):
    grid = tmp_path / "grid.cfg"
    grid.write_text(cfg_file.read_text() + "n_train=12\nn_test=6\n"
                    "tau_xpre_values=20,215\neta_values=0.05\ndelta_theta_values=0.1\n")
    out = tmp_path / "dse.csv"
    assert main(["dse", "--grid", str(grid), "--out", str(out), "--refine", "eta=0.02:2"]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "tau_xpre_ms,eta,delta_theta_mV,accuracy,unresponsive,seconds"
    assert len(rows) == 3
    refined = (tmp_path / "dse.csv.refined.csv").read_text().splitlines()
    assert len(refined) == 3
    assert "best:" in capsys.readouterr().out


def test_parser_lists_all_subcommands():
    text = build_parser().format_help()
    for cmd in SUBCOMMANDS:
        assert cmd in text
