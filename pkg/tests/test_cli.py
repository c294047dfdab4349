import hashlib
import json
import subprocess
import time

import numpy as np
import pytest

from misstsm import checkpoint, cli, dataio, synthetic

TINY = {
    "L": 24, "S": 8, "stride": 2,
    "model": {"misstsm": {"D": 8, "d_k": 4, "h": 2},
              "backbone": {"enc_layers": 1, "dec_layers": 1, "enc_heads": 2, "dec_heads": 2,
                           "enc_dim": 8, "dec_dim": 8}},
    "train": {"epochs_pretrain": 2, "epochs_finetune": 2},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "out"))
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    return tmp_path, str(cfg)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_mask_twice_identical(workdir):
    tmp, cfg = workdir
    for d in ("a", "b"):
        assert cli.main(["mask", "--config", cfg, "--scheme", "mcar", "--p", "0.7", "--seed", "1",
                         "--out-dir", d]) == 0
    a, b = tmp / "out/a/mask.csv", tmp / "out/b/mask.csv"
    assert a.read_bytes() == b.read_bytes()
    mask = np.loadtxt(a, delimiter=",")
    assert mask.shape == (200, 4)
    manifest = json.loads((tmp / "out/a/mask.manifest.json").read_text())
    assert manifest["config"]["mask"]["seed"] == 1 and manifest["config"]["mask"]["p"] == 0.7


def test_periodic_mask_flags(workdir):
    tmp, cfg = workdir
    assert cli.main(["mask", "--config", cfg, "--scheme", "periodic", "--p", "0.6", "--alpha", "0.3",
                     "--freq", "0.6,0.9", "--phase", "0,3.14159", "--out", "pm/m.csv"]) == 0
    conf = json.loads((tmp / "out/pm/mask.manifest.json").read_text())["config"]["mask"]
    assert conf["freq_range"] == [0.6, 0.9] and conf["alpha"] == 0.3


def test_manifest_hash_is_git_blob_hash(workdir):
    tmp, cfg = workdir
    assert cli.main(["mask", "--config", cfg, "--out-dir", "m"]) == 0
    man = json.loads((tmp / "out/m/mask.manifest.json").read_text())
    (src, digest), = man["inputs"].items()
    git = subprocess.run(["git", "hash-object", src], capture_output=True, text=True)
    if git.returncode == 0:
        assert digest == git.stdout.strip()
    data = open(src, "rb").read()
    assert digest == hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
    assert man["config_fingerprint"] and man["seed"] == 0 and man["wall_clock_seconds"] >= 0


@pytest.mark.parametrize("argv_extra,config", [
    ([], {"bogus": 1}),
    ([], {"model": {"misstsm": {"D": 6}}}),
    ([], {"split": [0.5, 0.5]}),
    (["--set", "train.nope=3"], {}),
    (["--data", "/does/not/exist.csv"], {}),
])
def test_config_errors_exit_2(workdir, capsys, argv_extra, config):
    tmp, _ = workdir
    cfg = tmp / "bad.json"
    cfg.write_text(json.dumps(config))
    assert cli.main(["pretrain", "--config", str(cfg), *argv_extra]) == 2
    assert "config error" in capsys.readouterr().err


def test_runtime_error_exit_1(workdir, capsys):
    tmp, cfg = workdir
    bad = tmp / "junk.ckpt"
    bad.write_bytes(b"garbage!")
    assert cli.main(["evaluate", "--config", cfg, "--checkpoint", str(bad)]) == 1
    assert "bad magic" in capsys.readouterr().err


def test_flags_override_config(workdir):
    cfg = cli.load_config(workdir[1], {"seed": 9, "train.batch_size": 4})
    assert cfg["seed"] == 9 and cfg["train"]["batch_size"] == 4 and cfg["L"] == 24


def test_smoke_pipeline_fast_and_reproducible(workdir):
    tmp, cfg = workdir
    data = cli.SAMPLE_CSV
    before = sha(data)
    digests = []
    start = time.perf_counter()
    run = "r1"
    for attempt in range(2):
        assert cli.main(["impute", "--config", cfg, "--method", "locf", "--out-dir", run]) == 0
        imputed = tmp / "out" / run / "imputed_locf.csv"
        common = ["--config", cfg, "--data", str(imputed), "--set", 'mask.scheme="none"', "--out-dir", run]
        assert cli.main(["pretrain", *common]) == 0
        assert cli.main(["finetune", *common, "--checkpoint", str(tmp / "out" / run / "pretrained.ckpt")]) == 0
        assert cli.main(["evaluate", *common, "--checkpoint",
                         str(tmp / "out" / run / "finetuned_forecast.ckpt")]) == 0
        if attempt == 0:
            assert time.perf_counter() - start < 10.0
        names = ["imputed_locf.csv", "pretrained.ckpt", "finetuned_forecast.ckpt", "report.json"]
        digests.append([sha(tmp / "out" / run / n) for n in names])
    assert digests[0] == digests[1]
    assert sha(data) == before  # inputs never mutated
    report = json.loads((tmp / "out/r1/report.json").read_text())
    assert report["task"] == "forecast" and np.isfinite(report["metrics"]["mse"])


def test_evaluate_in_process_equals_reloaded(workdir):
    tmp, cfg_path = workdir
    cfg = cli.load_config(cfg_path, {})
    splits, norm, _ = cli._prepare(cfg)
    model = cli.run_pretrain(cfg, splits)
    cli.run_finetune(cfg, model, splits, None)
    direct = cli.evaluate_model(cfg, model, splits[2])
    checkpoint.save_model(tmp / "m.ckpt", model, norm)
    reloaded, _, _ = checkpoint.load_model(tmp / "m.ckpt")
    assert cli.evaluate_model(cfg, reloaded, splits[2]).to_json() == direct.to_json()


def test_classification_commands(workdir):
    tmp, _ = workdir
    segs = synthetic.frequency_classes(n_per_class=10, length=16, N=3, seed=0)
    dataio.save_classification(segs, tmp / "cls.csv")
    conf = {**TINY, "dataset": {"path": str(tmp / "cls.csv"), "format": "classification", "length": 16},
            "task": "classify", "mask": {"p": 0.5}}
    cfg = tmp / "cls.json"
    cfg.write_text(json.dumps(conf))
    assert cli.main(["pretrain", "--config", str(cfg), "--out-dir", "c"]) == 0
    assert cli.main(["finetune", "--config", str(cfg), "--out-dir", "c",
                     "--checkpoint", str(tmp / "out/c/pretrained.ckpt")]) == 0
    assert cli.main(["evaluate", "--config", str(cfg), "--out-dir", "c",
                     "--checkpoint", str(tmp / "out/c/finetuned_classify.ckpt")]) == 0
    metrics = json.loads((tmp / "out/c/report.json").read_text())["metrics"]
    assert {"f1", "auroc", "auprc"} <= metrics.keys()
    assert cli.main(["pretrain", "--config", str(cfg), "--task", "forecast"]) == 2


def test_benchmark_and_ablate(workdir):
    tmp, cfg = workdir
    assert cli.main(["benchmark", "--config", cfg, "--N", "4", "8", "--T", "16", "--reps", "2",
                     "--out-dir", "b"]) == 0
    assert (tmp / "out/b/benchmark.csv").read_text().startswith("N,mean_forward_seconds\n4,")
    assert cli.main(["ablate", "--config", cfg, "--dims", "4", "--set", "train.epochs_pretrain=1",
                     "--set", "train.epochs_finetune=1", "--out-dir", "ab"]) == 0
    summary = json.loads((tmp / "out/ab/ablate_summary.json").read_text())
    assert set(summary) == {"full", "no_tfi", "embed_dim_4"}
    assert cli.main(["ablate", "--config", cfg, "--dims", "6"]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(["misstsm", "--help"], capture_output=True, text=True)
    if proc.returncode != 0 and "not found" in proc.stderr:
        pytest.skip("console script not installed")
    assert proc.returncode == 0
    for cmd in ("mask", "impute", "pretrain", "finetune", "evaluate", "benchmark", "ablate"):
        assert cmd in proc.stdout
