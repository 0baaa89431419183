import subprocess
import sys
import time

import pytest

from ctxasr.cli import main

TINY_AM = ["--set", "utts_per_context=4", "--set", "heldout_per_context=2",
           "--set", "frames_per_utt=6", "--set", "n_classes=3"]
TINY_LM = ["--set", "lm_sentences_per_topic=15", "--set", "nbest_utts_per_topic=4"]
TINY_TRAIN = ["--epochs", "1", "--hidden", "8", "--layers", "1", "--adapt-epochs", "1",
              "--vat-epochs", "1", "--passes", "1"]


def _run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture(scope="module")
def am_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("am")
    assert main(["synth-am", "--out-dir", str(d), "--seed", "0", *TINY_AM]) == 0
    return d


@pytest.fixture(scope="module")
def lm_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("lm")
    assert main(["synth-lm", "--out-dir", str(d), "--seed", "0", *TINY_LM]) == 0
    return d


def test_acoustic_commands_end_to_end(am_dir, tmp_path, capsys):
    pca = tmp_path / "pca.ckpt"
    assert _run(["pca-fit", "--object", am_dir / "object.post", "--place", am_dir / "place.post",
                 "--manifest", am_dir / "train_manifest.txt", "--k", 5, "--seed", 0,
                 "--out", pca])[0] == 0
    ctx = tmp_path / "ctx.txt"
    assert _run(["context-table", "--object", am_dir / "object.post", "--place",
                 am_dir / "place.post", "--manifest", am_dir / "manifest.txt", "--pca", pca,
                 "--seed", 0, "--out", ctx])[0] == 0
    si = tmp_path / "si.ckpt"
    code, out = _run(["train-am", "--stage", "si", "--corpus", am_dir / "train.am", "--seed", 0,
                      "--out", si, *TINY_TRAIN], capsys)
    assert code == 0 and "SHA256" in out.out
    for stage, init in (("adapt", si), ("vat", tmp_path / "adapt.ckpt")):
        assert _run(["train-am", "--stage", stage, "--corpus", am_dir / "train.am", "--context",
                     ctx, "--init", init, "--seed", 0, "--out", tmp_path / f"{stage}.ckpt",
                     *TINY_TRAIN])[0] == 0
    report = tmp_path / "eval.txt"
    assert _run(["eval", "--model", tmp_path / "vat.ckpt", "--corpus", am_dir / "test.am",
                 "--context", ctx, "--out", report])[0] == 0
    assert report.read_text().startswith("FRAME_ACC\tall\t")


def test_lm_commands_end_to_end(lm_dir, tmp_path, capsys):
    out = tmp_path / "lm"
    common = ["--corpus", lm_dir / "lm_corpus.txt", "--seed", 0, "--folds", 2, "--epochs", 1,
              "--embed", 4, "--hidden", 4]
    assert _run(["train-lm", *common, "--context", lm_dir / "lm_context.txt", "--conditioned",
                 "--out-dir", out])[0] == 0
    assert (out / "fold1.ckpt").is_file() and (out / "train_lm.txt").is_file()
    report = tmp_path / "report.txt"
    args = ["rescore", "--nbest", lm_dir / "nbest.txt", "--refs", lm_dir / "refs.txt",
            "--groups", lm_dir / "groups.txt", "--lm-dir", out, "--report", report]
    code, res = _run(args, capsys)
    assert code == 2 and "--context" in res.err and not report.exists()
    assert _run(args + ["--context", lm_dir / "lm_context.txt"])[0] == 0
    assert "REL_REDUCTION\tother\t" in report.read_text()


def test_missing_context_for_conditioned_training(lm_dir, tmp_path, capsys):
    out = tmp_path / "never"
    code, res = _run(["train-lm", "--corpus", lm_dir / "lm_corpus.txt", "--conditioned",
                      "--seed", 0, "--out-dir", out], capsys)
    assert code == 2 and "--context" in res.err
    assert not out.exists()


def test_validation_errors_exit_2_before_writing(tmp_path, capsys):
    out = tmp_path / "run"
    for argv in (["run", "--out-dir", out, "--seed", 0, "--set", "am.lr=fast"],
                 ["run", "--out-dir", out, "--seed", 0, "--set", "nope=1"],
                 ["run", "--out-dir", out],
                 ["synth-am", "--out-dir", out, "--seed", 0, "--set", "shift=-1"],
                 ["train-am", "--stage", "si", "--corpus", tmp_path / "missing.am", "--seed", 0,
                  "--out", out / "x"],
                 ["frobnicate"]):
        code, res = _run(argv, capsys)
        assert code == 2, (argv, res.err)
        assert res.err.startswith("ctxasr: error:")
    assert not out.exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_data_and_numerical_errors(am_dir, tmp_path, capsys):
    bad = tmp_path / "bad.am"
    bad.write_text("this is not an acoustic corpus\n")
    code, _ = _run(["train-am", "--stage", "si", "--corpus", bad, "--seed", 0,
                    "--out", tmp_path / "m"], capsys)
    assert code == 3
    code, res = _run(["train-am", "--stage", "si", "--corpus", am_dir / "train.am", "--seed", 0,
                      "--out", tmp_path / "m", "--lr", "1e300", "--epochs", 3], capsys)
    assert code == 4, res.err


def test_config_file_and_flag_precedence(am_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# training settings\nstage = si\nseed = 0\nepochs = 1\nhidden = 8\n"
                   "layers = 1\nout = " + str(tmp_path / "from_file.ckpt") + "\n")
    assert main(["train-am", "--config", str(cfg), "--corpus", str(am_dir / "train.am")]) == 0
    assert (tmp_path / "from_file.ckpt").is_file()
    assert main(["train-am", "--config", str(cfg), "--corpus", str(am_dir / "train.am"),
                 "--out", str(tmp_path / "flag.ckpt")]) == 0
    assert (tmp_path / "flag.ckpt").is_file()
    # the seed comes from the file, so both checkpoints are identical
    assert (tmp_path / "flag.ckpt").read_bytes() == (tmp_path / "from_file.ckpt").read_bytes()
    cfg.write_text("bogus_key = 1\n")
    assert main(["train-am", "--config", str(cfg)]) == 2


def test_run_reduced_pipeline_via_console_script(tmp_path):
    out = tmp_path / "run"
    argv = [sys.executable, "-m", "ctxasr.cli", "run", "--out-dir", str(out), "--seed", "0"]
    for kv in ("synth.utts_per_context=4", "synth.heldout_per_context=2",
               "synth.frames_per_utt=6", "synth.n_classes=3", "synth.lm_sentences_per_topic=15",
               "synth.nbest_utts_per_topic=4", "pca_dim=5", "folds=2", "am.epochs=1",
               "am.hidden=8", "am.layers=1", "lm.epochs=1", "lm.embed=4", "lm.hidden=4"):
        argv += ["--set", kv]
    start = time.time()
    proc = subprocess.run(argv, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert time.time() - start < 60
    manifest = (out / "manifest.txt").read_text()
    assert "status = COMPLETE" in manifest and "sha256." in manifest
    metrics = (out / "metrics.txt").read_text()
    for key in ("FRAME_ACC_VAT", "PPL_COND", "WER_RESCORED_COND", "REL_REDUCTION"):
        assert key in metrics
