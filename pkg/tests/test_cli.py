import numpy as np
import pytest

from dualpath.cli import main
from dualpath.data import load_feature_table
from dualpath.training import load_checkpoint

SMALL = ["--set", "content_code_dim=8", "--set", "emotion_code_dim=8", "--set", "fused_dim=8",
         "--set", "content_hidden_dim=32", "--set", "emotion_hidden_dim=32"]


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "d"
    assert main(["synth", "--pairs", "40", "--seed", "7", "--out", str(out),
                 "--set", "video_content_dim=24", "--set", "music_content_dim=20",
                 "--set", "video_emotion_dim=8", "--set", "music_emotion_dim=6"]) == 0
    return out


@pytest.fixture
def run(tmp_path, dataset):
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--seed", "7", "--epochs", "2", "--out", str(out)] + SMALL) == 0
    return out


class TestHappyPath:
    def test_synth_writes_dataset(self, dataset):
        data = load_feature_table(dataset)
        assert len(data.pairs) == 40
        assert "seed=7" in (dataset / "synth_config.txt").read_text().splitlines()

    def test_train_artifacts(self, run):
        assert {p.name for p in run.iterdir()} == {"checkpoint.dpvm", "loss_log.csv", "loss_curves.png", "config.txt"}
        ckpt = load_checkpoint(run / "checkpoint.dpvm")
        assert ckpt.config.seed == 7 and ckpt.final_epoch == 2
        assert "# seed=7" in (run / "loss_log.csv").read_text().splitlines()

    def test_default_paper_run_shape(self, tmp_path, monkeypatch):
        # the documented invocation: synth then train with no --out
        monkeypatch.chdir(tmp_path)
        assert main(["synth", "--pairs", "100", "--seed", "7", "--out", "d/"]) == 0
        assert main(["train", "--data", "d/", "--seed", "7", "--epochs", "1"] + SMALL) == 0
        assert (tmp_path / "dualpath_run" / "checkpoint.dpvm").exists()

    def test_eval(self, tmp_path, run, dataset, capsys):
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(run / "checkpoint.dpvm"), "--data", str(dataset),
                     "--out", str(tmp_path / "ev")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [ln.split()[0] for ln in lines] == ["K=1", "K=5", "K=10", "K=15", "K=20", "K=25"]
        report = (tmp_path / "ev" / "report.txt").read_text()
        assert "# corpus=test" in report and "# learning_rate=0.0001" in report
        assert (tmp_path / "ev" / "recall.png").stat().st_size > 0

    def test_eval_twice_identical(self, tmp_path, run, dataset):
        for name in ("a", "b"):
            main(["eval", "--checkpoint", str(run / "checkpoint.dpvm"), "--data", str(dataset),
                  "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "report.txt").read_bytes() == (tmp_path / "b" / "report.txt").read_bytes()

    def test_query(self, run, dataset, capsys):
        vid = sorted(load_feature_table(dataset).videos)[0]
        capsys.readouterr()
        assert main(["query", "--checkpoint", str(run / "checkpoint.dpvm"), "--data", str(dataset),
                     "--video", vid, "--k", "3", "--corpus", "all"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "rank,music_id,similarity" and len(out) == 4
        sims = [float(ln.split(",")[2]) for ln in out[1:]]
        assert sims == sorted(sims, reverse=True)

    def test_train_is_reproducible(self, tmp_path, dataset):
        outs = []
        for name in ("a", "b"):
            assert main(["train", "--data", str(dataset), "--seed", "3", "--epochs", "1", "--metric", "ppml",
                         "--ablation", "splicing", "--out", str(tmp_path / name)] + SMALL) == 0
            outs.append(tmp_path / name)
        for f in ("checkpoint.dpvm", "loss_log.csv", "config.txt"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        ckpt = load_checkpoint(outs[0] / "checkpoint.dpvm")
        assert ckpt.config.ablation == "splicing" and ckpt.config.loss.metric_variant == "ppml"


class TestErrors:
    def test_batch_size_one(self, capsys):
        assert main(["train", "--batch-size", "1"]) == 1
        assert "metric losses need in-batch negatives" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["bogus"]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["train", "--bogus"]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_unknown_config_key(self, capsys):
        assert main(["train", "--set", "learnig_rate=1"]) == 1
        assert "learnig_rate" in capsys.readouterr().err

    def test_missing_data(self, capsys, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none")]) == 1
        assert "manifest not found" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, tmp_path, dataset):
        (tmp_path / "c.dpvm").write_bytes(b"junk")
        assert main(["eval", "--checkpoint", str(tmp_path / "c.dpvm"), "--data", str(dataset),
                     "--out", str(tmp_path / "ev")]) == 1
        assert not (tmp_path / "ev").exists()

    def test_runtime_error_exit_two(self, tmp_path, dataset):
        # poisoned features make the loss non-finite during training
        for f in (dataset / "features").iterdir():
            np.full(f.stat().st_size // 4, np.nan, dtype="<f4").tofile(f)
        assert main(["train", "--data", str(dataset), "--epochs", "1", "--out", str(tmp_path / "r")] + SMALL) == 2
        assert not (tmp_path / "r").exists()

    def test_help(self, capsys):
        assert main(["--help"]) == 0


@pytest.mark.slow
def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--seed", "3", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert out.strip().splitlines()[-1].endswith("PASS")
