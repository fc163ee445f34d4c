import hashlib
import subprocess
import sys

import pytest

from cpcasr.cli import main

SMALL = """
n_utterances = 16
phone_dur_ms_min = 150
phone_dur_ms_max = 220
train_frac = 0.5
dev_frac = 0.2
enc_channels = 8,8,8
latent_dim = 8
context_dim = 12
K = 4
n_negatives = 5
window_samples = 1600
epochs = 2
probe_epochs = 3
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Run synth -> pretrain -> probe (mfcc, cpc) once and share the directory."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(SMALL + f"corpus_dir = {root / 'corpus'}\n"
                   f"train_manifest = {root / 'corpus' / 'train.tsv'}\n"
                   f"test_manifest = {root / 'corpus' / 'test.tsv'}\n")
    assert main(["synth", "--config", str(cfg), "--out", str(root / "synth")]) == 0
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "cpc")]) == 0
    common = ["--config", str(cfg), "--set", f"backbone={root / 'cpc' / 'backbone.ckpt'}"]
    assert main(["probe", *common, "--features", "mfcc", "--out", str(root / "mfcc")]) == 0
    assert main(["probe", *common, "--features", "cpc", "--out", str(root / "frozen")]) == 0
    return root, cfg, common


def test_synth_outputs(run):
    root, _, _ = run
    sizes = [len((root / "corpus" / f"{s}.tsv").read_text().splitlines()) for s in ("train", "dev", "test")]
    assert sizes == [8, 3, 5]
    assert (root / "synth" / "resolved_config.txt").exists()


def test_pretrain_outputs(run):
    root, _, _ = run
    lines = (root / "cpc" / "cpc_loss.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("epoch,l_1")


def test_determinism(run, tmp_path):
    root, cfg, common = run
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "cpc")]) == 0
    assert sha(tmp_path / "cpc" / "backbone.ckpt") == sha(root / "cpc" / "backbone.ckpt")
    assert (tmp_path / "cpc" / "cpc_loss.csv").read_text() == (root / "cpc" / "cpc_loss.csv").read_text()
    assert main(["probe", *common, "--features", "cpc", "--out", str(tmp_path / "frozen")]) == 0
    assert sha(tmp_path / "frozen" / "probe.ckpt") == sha(root / "frozen" / "probe.ckpt")
    assert (tmp_path / "frozen" / "eval.csv").read_text() == (root / "frozen" / "eval.csv").read_text()


def test_frozen_and_finetune_hashes(run, tmp_path):
    root, _, common = run
    before = sha(root / "cpc" / "backbone.ckpt")
    assert main(["probe", *common, "--features", "cpc", "--regime", "finetune", "--out", str(tmp_path)]) == 0
    assert sha(root / "cpc" / "backbone.ckpt") == before
    assert sha(tmp_path / "backbone_finetuned.ckpt") != before


def test_continue_pretraining(run, tmp_path):
    root, cfg, _ = run
    init = root / "cpc" / "backbone.ckpt"
    assert main(["pretrain", "--config", str(cfg), "--init", str(init), "--set", "epochs=1", "--out", str(tmp_path)]) == 0
    assert sha(tmp_path / "backbone.ckpt") != sha(init)


def test_transcribe_and_eval(run, capsys):
    root, cfg, common = run
    capsys.readouterr()
    assert main(["transcribe", *common, "--set", f"probe={root / 'mfcc' / 'probe.ckpt'}"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 5 and all("\t" in line for line in out)
    wav = next((root / "corpus" / "wav").iterdir())
    assert main(["transcribe", *common, "--set", f"probe={root / 'frozen' / 'probe.ckpt'}", str(wav)]) == 0
    assert main(["eval", *common, "--features", "cpc", "--set", f"probe={root / 'frozen' / 'probe.ckpt'}",
                 "--out", str(root / "eval")]) == 0
    # eval does not know the training budget; every scored field must still match
    cols = lambda path: [row.split(",")[4:] for row in path.read_text().splitlines()]
    assert cols(root / "eval" / "eval.csv") == cols(root / "frozen" / "eval.csv")


def test_report(run, capsys):
    root, _, _ = run
    capsys.readouterr()
    assert main(["report", str(root / "mfcc" / "eval.csv"), str(root / "frozen" / "eval.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "| Model | Pre-train | Frozen | synth |"
    assert lines[2].startswith("| Linear/MFCCs | No | N/A |")
    assert lines[3].startswith("| CPC | CPC | Yes |")
    a = main(["report", "--format", "csv", "--layout", "table2", str(root / "frozen" / "eval.csv")])
    assert a == 0 and capsys.readouterr().out.startswith("Model,Pre-train,Frozen,Transcribed data,synth\n")


def test_exit_codes(tmp_path, capsys):
    assert main(["synth", "--set", "bogus=1", "--set", "K=0", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "bogus" in err and "K" in err
    assert main(["pretrain", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["report", str(tmp_path / "missing.csv")]) == 2
    assert main(["probe", "--out", str(tmp_path)]) == 1  # no manifests configured
    (tmp_path / "blocker").write_text("x")
    assert main(["synth", "--set", "n_utterances=4", "--out", str(tmp_path / "blocker" / "sub")]) == 2


def test_gradcheck_and_fault_injection(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--inject-fault", "tanh"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cpcasr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "pretrain" in proc.stdout
