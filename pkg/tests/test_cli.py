import numpy as np
import pytest

from fewshot_pixelcnn import cli
from fewshot_pixelcnn.io import pgm_read


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["make-data", "--task", "omniglot", "--out",
                     str(root / "og"), "--alphabets", "4",
                     "--test-alphabets", "1", "--chars", "3",
                     "--images-per-char", "5", "--seed", "0"]) == 0
    assert cli.main(["make-data", "--task", "flip", "--out",
                     str(root / "flip"), "--images", "12", "--seed", "0"]) == 0
    return root


def _train_args(data, out, variant="baseline", extra=()):
    return ["train", "--task", "omniglot", "--variant", variant,
            "--shots", "2", "--steps", "2", "--batch", "2",
            "--data", str(data), "--out", str(out),
            "--eval-episodes", "2", "--eval-every", "2",
            "--checkpoint-every", "2", "--seed", "3", *extra]


@pytest.fixture(scope="module")
def baseline_run(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_base")
    assert cli.main(_train_args(corpus / "og", out)) == 0
    return out


@pytest.fixture(scope="module")
def attention_run(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_attn")
    assert cli.main(_train_args(corpus / "og", out, "attention")) == 0
    return out


def test_train_writes_expected_layout(baseline_run):
    ck = baseline_run / "checkpoint"
    assert (ck / "manifest").is_file()
    assert any((ck / "params").glob("*.fsta"))
    lines = (baseline_run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,train_nll,eval_nll,wall_seconds"
    assert len(lines) >= 3


def test_train_deterministic_checkpoints(corpus, tmp_path, baseline_run):
    out2 = tmp_path / "again"
    assert cli.main(_train_args(corpus / "og", out2)) == 0
    ref = baseline_run / "checkpoint" / "params"
    for f in sorted(ref.glob("*.fsta")):
        assert f.read_bytes() == (out2 / "checkpoint" / "params" /
                                  f.name).read_bytes(), f.name


def test_train_zero_steps(corpus, tmp_path):
    out = tmp_path / "zero"
    args = _train_args(corpus / "og", out)
    args[args.index("--steps") + 1] = "0"
    assert cli.main(args) == 0
    assert (out / "checkpoint" / "manifest").is_file()


def test_train_flag_validation_exit_2(corpus, tmp_path):
    bad = _train_args(corpus / "og", tmp_path / "x",
                      extra=["--inner-lr", "0.2"])
    assert cli.main(bad) == 2
    bad = _train_args(corpus / "og", tmp_path / "x",
                      extra=["--second-order", "off"])
    assert cli.main(bad) == 2
    flip_bad = ["train", "--task", "flip", "--shots", "2", "--steps", "1",
                "--batch", "1", "--data", str(corpus / "flip"),
                "--out", str(tmp_path / "y")]
    assert cli.main(flip_bad) == 2


def test_train_missing_data_exit_4(tmp_path):
    args = _train_args(tmp_path / "nonexistent", tmp_path / "out")
    assert cli.main(args) == 4


def test_train_diverged_exit_3(monkeypatch, corpus, tmp_path):
    from fewshot_pixelcnn.harness import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged("non-finite training NLL at step 1")

    monkeypatch.setattr(cli.harness, "train", boom)
    assert cli.main(_train_args(corpus / "og", tmp_path / "out")) == 3


def test_eval_reports_table(baseline_run, corpus, capsys):
    args = ["eval", str(baseline_run / "checkpoint"), "--data",
            str(corpus / "og"), "--eval-episodes", "2"]
    assert cli.main(args) == 0
    out1 = capsys.readouterr().out
    assert "shots" in out1 and "test(train)" in out1
    assert "\n    1  " in out1 and "\n    2  " in out1
    assert cli.main(args) == 0
    assert capsys.readouterr().out == out1  # deterministic


def test_eval_corrupt_checkpoint_exit_4(tmp_path, corpus):
    bad = tmp_path / "ck"
    bad.mkdir()
    (bad / "manifest").write_text("variant=baseline\n")
    assert cli.main(["eval", str(bad), "--data", str(corpus / "og")]) == 4


def test_sample_grid_layout(baseline_run, corpus, tmp_path):
    out = tmp_path / "samples"
    assert cli.main(["sample", str(baseline_run / "checkpoint"),
                     "--data", str(corpus / "og"), "--out", str(out),
                     "--episodes", "2", "--samples", "2", "--seed", "1"]) == 0
    grid = pgm_read(out / "sample_grid.pgm")
    s, r, g = 2, 2, 2  # shots, samples, episodes
    assert grid.shape == (g * 26 + (g - 1), (s + 1 + r) * 26 + (s + r))


def test_sample_deterministic(baseline_run, corpus, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["sample", str(baseline_run / "checkpoint"),
                         "--data", str(corpus / "og"), "--out", str(out),
                         "--episodes", "1", "--samples", "1",
                         "--seed", "5"]) == 0
        outs.append((out / "sample_grid.pgm").read_bytes())
    assert outs[0] == outs[1]


def test_dump_attention_outputs(attention_run, corpus, tmp_path):
    out = tmp_path / "trace"
    assert cli.main(["dump-attention", str(attention_run / "checkpoint"),
                     "--data", str(corpus / "og"), "--out", str(out),
                     "--seed", "2"]) == 0
    rows = (out / "attention_trace.csv").read_text().splitlines()
    assert rows[0] == "pixel_index,support_index,patch_row,patch_col,weight"
    body = np.array([r.split(",") for r in rows[1:]], dtype=object)
    pix = body[:, 0].astype(int)
    w = body[:, 4].astype(float)
    for t in range(26 * 26):
        gsum = w[pix == t].sum()
        assert abs(gsum - 1.0) < 1e-6, t
    overlays = sorted(out.glob("overlay_*.pgm"))
    assert overlays
    assert pgm_read(overlays[0]).shape == (26, 26)
    assert (out / "sample.pgm").is_file()


def test_dump_attention_rejects_baseline(baseline_run, corpus, tmp_path):
    assert cli.main(["dump-attention", str(baseline_run / "checkpoint"),
                     "--data", str(corpus / "og"),
                     "--out", str(tmp_path / "t")]) == 2


def test_flip_train_and_eval(corpus, tmp_path):
    out = tmp_path / "fliprun"
    args = ["train", "--task", "flip", "--variant", "baseline", "--steps", "1",
            "--batch", "1", "--data", str(corpus / "flip"), "--out", str(out),
            "--eval-episodes", "1", "--seed", "0"]
    assert cli.main(args) == 0
    assert cli.main(["eval", str(out / "checkpoint"), "--data",
                     str(corpus / "flip"), "--eval-episodes", "1"]) == 0


def test_meta_cli_train(corpus, tmp_path, capsys):
    out = tmp_path / "metarun"
    args = ["train", "--task", "omniglot", "--variant", "meta", "--shots", "2",
            "--steps", "1", "--batch", "1", "--data", str(corpus / "og"),
            "--out", str(out), "--eval-episodes", "1", "--inner-lr", "0.1",
            "--second-order", "on", "--seed", "0"]
    assert cli.main(args) == 0
    assert cli.main(["eval", str(out / "checkpoint"), "--data",
                     str(corpus / "og"), "--eval-episodes", "1"]) == 0
    assert "pre-adaptation" in capsys.readouterr().out
