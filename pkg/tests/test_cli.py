import json
import subprocess
import sys

import numpy as np
import pytest

from dipct import io
from dipct.cli import main

SUBCOMMANDS = ["generate-data", "reconstruct", "train", "benchmark", "report"]
TINY = ["--channels", "4", "--scales", "2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["generate-data", "--train", "3", "--val", "1", "--test", "2", "--seed", "7", "--image-size", "32", "--out", str(out)])
    assert rc == 0
    return out


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "--out" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["reconstruct", "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["reconstruct", "--method", "sart"]) == 2


def test_generate_data_layout(data):
    m = json.loads((data / "manifest.json").read_text())
    assert m["splits"] == {"train": 3, "validation": 1, "test": 2}
    assert (data / "test" / "000001_obs.bin").is_file()
    run = json.loads((data / "run_manifest.json").read_text())
    assert run["command"] == "generate-data" and run["seeds"] == {"dataset": 7}
    assert set(run["versions"]) >= {"numpy", "torch", "dipct"}


def test_generate_data_reference_sizes(tmp_path):
    out = tmp_path / "d"
    assert main(["generate-data", "--profile", "ellipses", "--train", "32", "--val", "3", "--test", "2", "--seed", "7", "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["splits"]["train"] == 32 and m["splits"]["validation"] == 3
    assert m["geometry"]["n_angles"] == 30 and m["geometry"]["image_size"] == 128


def test_missing_input_fails_cleanly(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["reconstruct", "--method", "fbp", "--input", str(tmp_path / "missing.bin"), "--out", str(out)]) == 1
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []
    assert "error" in capsys.readouterr().err


def test_reconstruct_fbp_outputs_and_determinism(data, tmp_path, capsys):
    runs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["reconstruct", "--method", "fbp", "--data", str(data), "--index", "1", "--out", str(out)]) == 0
        runs.append(out)
    printed = capsys.readouterr().out.split()
    assert str(runs[0] / "recon.bin") in printed
    for name in ("recon.bin", "recon.png", "recon.pgm"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
    assert io.load_array(runs[0] / "recon.bin").shape == (32, 32)
    manifest = json.loads((runs[0] / "run_manifest.json").read_text())
    assert manifest["outputs"]["recon.bin"] == io.sha256_file(runs[0] / "recon.bin")


def test_reconstruct_raw_sinogram(data, tmp_path):
    out = tmp_path / "raw"
    bad = tmp_path / "sino.bin"
    io.save_array(bad, np.zeros((4, 5)))
    assert main(["reconstruct", "--method", "fbp", "--input", str(bad), "--out", str(out)]) == 1
    assert not out.exists()


def test_reconstruct_dip_trace_and_snapshots(data, tmp_path):
    out = tmp_path / "dip"
    args = ["reconstruct", "--method", "diptv", "--data", str(data), "--iters", "20", "--trace-every", "5", "--snapshot-every", "2", "--alpha", "0.5"]
    assert main(args + TINY + ["--out", str(out)]) == 0
    lines = (out / "trace.csv").read_text().strip().split("\n")
    assert lines[0] == "iteration,loss,discrepancy,psnr,ssim" and len(lines) == 6
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == ["iter_000000.png", "iter_000010.png", "iter_000020.png"]


def test_reconstruct_dip_init_variants(data, tmp_path):
    init = tmp_path / "x0.bin"
    io.save_array(init, np.full((32, 32), 0.3))
    for src in ("fbp", "tv", str(init)):
        out = tmp_path / f"init_{abs(hash(src))}"
        args = ["reconstruct", "--method", "dip-init", "--data", str(data), "--iters", "5", "--init-iters", "5", "--init-from", src]
        assert main(args + TINY + ["--out", str(out)]) == 0
        m = json.loads((out / "run_manifest.json").read_text())
        assert m["timings"]["iterations_run"] <= 5
    assert main(["reconstruct", "--method", "dip-init", "--data", str(data), "--init-from", "nowhere", "--out", str(tmp_path / "bad")]) == 1


def test_train_then_init_from_checkpoint(data, tmp_path):
    ckpt = tmp_path / "models" / "pp.ckpt"
    assert main(["train", "--method", "fbp-unet", "--data", str(data), "--epochs", "2", "--out", str(ckpt)] + TINY) == 0
    assert ckpt.is_file() and (ckpt.parent / "pp_log.csv").is_file() and (ckpt.parent / "pp_manifest.json").is_file()
    out = tmp_path / "r"
    args = ["reconstruct", "--method", "dip-init", "--data", str(data), "--iters", "3", "--init-iters", "3", "--init-from", str(ckpt)]
    assert main(args + TINY + ["--out", str(out)]) == 0


def test_train_without_data_fails(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m.ckpt")]) == 1


def test_config_file_and_flag_override(data, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"method": "tv", "alpha": 3.0, "iters": 7}))
    assert main(["reconstruct", "--config", str(cfg), "--alpha", "0.5", "--show-config"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["method"] == "tv" and shown["alpha"] == 0.5 and shown["iters"] == 7
    assert shown["lr"] == 1e-3
    cfg.write_text(json.dumps({"colour": "red"}))
    assert main(["reconstruct", "--config", str(cfg)]) == 2


def test_manifest_config_reproduces_outputs(data, tmp_path):
    first = tmp_path / "a"
    assert main(["reconstruct", "--method", "tv", "--iters", "20", "--data", str(data), "--out", str(first)]) == 0
    manifest = json.loads((first / "run_manifest.json").read_text())
    cfg = tmp_path / "replay.json"
    cfg.write_text(json.dumps(manifest["config"]))
    second = tmp_path / "b"
    assert main(["reconstruct", "--config", str(cfg), "--out", str(second)]) == 0
    replay = json.loads((second / "run_manifest.json").read_text())
    for name in ("recon.bin", "recon.png", "trace.csv"):
        assert replay["outputs"][name] == manifest["outputs"][name]


def test_benchmark_and_report(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(
        json.dumps(
            {
                "methods": [{"name": "fbp"}, {"name": "tv", "fixed": {"iterations": 20}}],
                "sizes": [4],
                "n_test_samples": 2,
                "image_size": 32,
            }
        )
    )
    outs = []
    for k in range(2):
        out = tmp_path / f"bench{k}"
        assert main(["benchmark", "--spec", str(spec), "--omit-timing", "--jobs", "1", "--out", str(out)]) == 0
        outs.append(out)
    assert (outs[0] / "report.csv").read_bytes() == (outs[1] / "report.csv").read_bytes()
    assert (outs[0] / "report.png").read_bytes() == (outs[1] / "report.png").read_bytes()
    timings = json.loads((outs[0] / "run_manifest.json").read_text())["timings"]["per_cell"]
    assert set(timings) == {"fbp@0", "tv@0"} and all(t > 0 for t in timings.values())
    plot = tmp_path / "plots" / "fig.png"
    assert main(["report", "--in", str(outs[0] / "report.csv"), "--plot", str(plot)]) == 0
    assert plot.stat().st_size > 0


def test_benchmark_bad_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"methods": [{"name": "nope"}]}))
    assert main(["benchmark", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1
    assert main(["benchmark", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_report_rejects_missing(tmp_path):
    assert main(["report", "--in", str(tmp_path / "x.csv"), "--plot", str(tmp_path / "x.png")]) == 1


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "dipct.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "dipct" in res.stdout
