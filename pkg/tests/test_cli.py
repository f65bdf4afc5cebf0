import csv

import numpy as np
import pytest

from oracles import brute_eer, brute_min_dcf, table1_shape_sum
from sparsetdnn import cli
from sparsetdnn.frontend import PcmSignal, read_features, write_features, write_wav
from sparsetdnn.model import load_checkpoint

DESK = ["--preset", "desk", "--epochs", "1", "--batch-size", "8", "--segment-min", "0.3", "--segment-max", "0.4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", d / "train", "--speakers", 4, "--utts", 4, "--min-frames", 40,
               "--max-frames", 60) == 0
    assert run("--seed", 1, "synth", "--out", d / "eval", "--speakers", 4, "--utts", 4, "--min-frames", 40,
               "--max-frames", 60, "--speaker-offset", 50, "--trials", 60) == 0
    assert run("train-baseline", "--data", d / "train", "--out", d / "base.ckpt", "--scale", 0.0625,
               "--metrics", d / "m.csv", *DESK) == 0
    return d


def test_synth_outputs(work):
    assert len((work / "train" / "utt2spk").read_text().splitlines()) == 16
    assert len((work / "eval" / "trials.txt").read_text().splitlines()) == 60


def test_metrics_csv(work):
    rows = list(csv.DictReader(open(work / "m.csv")))
    assert rows[0]["stage"] == "baseline" and float(rows[0]["lr"]) == 0.05


def test_deterministic_given_seed(work):
    assert run("train-baseline", "--data", work / "train", "--out", work / "again.ckpt", "--scale", 0.0625,
               *DESK) == 0
    assert (work / "again.ckpt").read_bytes() == (work / "base.ckpt").read_bytes()


def test_full_size_lambda_zero(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "d", "--speakers", 2, "--utts", 2, "--min-frames", 30,
               "--max-frames", 30) == 0
    assert run("train-baseline", "--data", tmp_path / "d", "--out", tmp_path / "b.ckpt", *DESK) == 0
    assert run("sparsify", "--data", tmp_path / "d", "--init", tmp_path / "b.ckpt", "--out", tmp_path / "s.ckpt",
               "--lambda", 0, "--tau", 0, *DESK) == 0
    capsys.readouterr()
    assert run("finetune", "--data", tmp_path / "d", "--init", tmp_path / "s.ckpt", "--out", tmp_path / "f.ckpt",
               *DESK) == 0
    total = capsys.readouterr().out.strip().splitlines()[-1].split(",")
    assert total[0] == "total" and float(total[4]) == 0.0
    assert int(total[5]) == table1_shape_sum()


def test_sparsify_finetune_freeze(work):
    assert run("sparsify", "--data", work / "train", "--init", work / "base.ckpt", "--out", work / "s.ckpt",
               "--lambda", 3.0, "--granularity", "chunk8", "--tau", 0.01, *DESK) == 0
    assert (work / "s.ckpt.mask").exists()
    assert run("finetune", "--data", work / "train", "--init", work / "s.ckpt", "--out", work / "f.ckpt",
               "--val", work / "eval", "--trials", work / "eval" / "trials.txt", *DESK) == 0
    from sparsetdnn.sparsity import load_mask
    mask = load_mask(work / "s.ckpt.mask")
    fine = load_checkpoint(work / "f.ckpt")
    assert sum(mask.zero_counts()) > 0
    for layer, m in mask.element_masks().items():
        assert np.all(fine.weight(layer)[m] == 0)


def test_sweep_and_report(work, capsys):
    out = work / "sweep.csv"
    assert run("sweep", "--data", work / "train", "--val", work / "eval", "--trials", work / "eval" / "trials.txt",
               "--init", work / "base.ckpt", "--lambdas", "0,1,8", "--granularity", "chunk8", "--tau", 0.01,
               "--out", out, *DESK) == 0
    rows = list(csv.DictReader(open(out)))
    assert [float(r["lambda"]) for r in rows] == [0, 1, 8]
    assert list(rows[0]) == cli.SWEEP_FIELDS
    sizes = [int(r["nonzero_params"]) for r in rows]
    assert all(b <= a for a, b in zip(sizes, sizes[1:]))
    assert sizes[-1] < sizes[0]
    capsys.readouterr()
    assert run("report", "--sweep-csv", out, "--svg", work / "fig.svg") == 0
    text = capsys.readouterr().out
    assert "chunk8" in text and (work / "fig.svg").read_text().lstrip().startswith("<?xml")


def test_export_embed_score_eval(work, capsys):
    assert run("export", "--init", work / "f.ckpt", "--scheme", "int16c8", "--out", work / "f.pk") == 0
    assert (work / "f.pk").read_bytes()[:4] == b"SPKP"
    for model, name in ((work / "f.pk", "e_pk.txt"), (work / "f.ckpt", "e_ck.txt")):
        assert run("embed", "--model", model, "--data", work / "eval", "--out", work / name) == 0
    a = cli.read_embeddings(work / "e_pk.txt")
    b = cli.read_embeddings(work / "e_ck.txt")
    assert set(a) == set(b) and len(a) == 16
    for k in a:
        assert np.max(np.abs(a[k] - b[k])) < 1e-3 * np.abs(b[k]).max()
    assert run("score", "--embeddings", work / "e_pk.txt", "--trials", work / "eval" / "trials.txt",
               "--out", work / "scores.txt") == 0
    capsys.readouterr()
    assert run("eval", "--scores", work / "scores.txt") == 0
    assert "EER" in capsys.readouterr().out


def test_bench(work, capsys):
    assert run("bench", "--packed", work / "f.pk", "--frames", 60, "--repeats", 10, "--out", work / "b.csv") == 0
    rows = list(csv.DictReader(open(work / "b.csv")))
    assert int(rows[0]["sparse_macs"]) < int(rows[0]["dense_macs"])
    assert run("report", "--sweep-csv", work / "sweep.csv", "--bench-csv", work / "b.csv") == 0
    assert "speedup" in capsys.readouterr().out


def test_eval_hand_built(tmp_path, capsys):
    scores = [0.9, 0.35, 0.4, 0.1]
    labels = [True, True, False, False]
    lines = [f"e{i} t{i} {'target' if l else 'nontarget'} {s}" for i, (s, l) in enumerate(zip(scores, labels))]
    (tmp_path / "s.txt").write_text("\n".join(lines) + "\n")
    assert run("eval", "--scores", tmp_path / "s.txt") == 0
    out = capsys.readouterr().out.splitlines()
    assert float(out[0].rsplit("=", 1)[1].split()[0]) == pytest.approx(brute_eer(scores, labels), abs=1e-4)
    assert float(out[1].rsplit("=", 1)[1]) == pytest.approx(brute_min_dcf(scores, labels), abs=1e-4)


def test_features(tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "a.wav").write_bytes(write_wav(PcmSignal(rng.integers(-999, 999, 16000).astype(np.int16), 16000)))
    assert run("features", tmp_path / "a.wav", "--out", tmp_path / "f") == 0
    feats = read_features(tmp_path / "f" / "a.ftmx")
    assert feats.shape == (98, 40)
    assert np.allclose(feats.mean(axis=0), 0, atol=1e-4)


class TestConfigAndErrors:
    def test_config_file_and_override(self, work, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# desk run\npreset = desk\nepochs = 1\nbatch-size = 8\nscale = 0.0625\n"
                       "segment_min = 0.3\nsegment_max = 0.4\n")
        args = cli.parse_args(["--config", str(cfg), "train-baseline", "--data", "x", "--out", "y",
                               "--epochs", "3"])
        assert args.epochs == 3 and args.batch_size == 8 and args.scale == 0.0625 and args.preset == "desk"
        assert run("--config", cfg, "train-baseline", "--data", work / "train", "--out", tmp_path / "c.ckpt") == 0
        assert (tmp_path / "c.ckpt").read_bytes() == (work / "base.ckpt").read_bytes()

    def test_unknown_key(self, tmp_path):
        (tmp_path / "bad.cfg").write_text("learning_rate = 3\n")
        assert run("--config", tmp_path / "bad.cfg", "eval", "--scores", "x") == 1

    def test_malformed_config(self, tmp_path):
        (tmp_path / "bad.cfg").write_text("just words\n")
        assert run("--config", tmp_path / "bad.cfg", "eval", "--scores", "x") == 1

    def test_usage_errors(self):
        assert run("eval") == 1
        assert run("no-such-command") == 1
        assert run("--help") == 0
        assert run("export", "--init", "a", "--out", "b", "--scheme", "int4") == 1

    def test_data_errors(self, tmp_path):
        assert run("eval", "--scores", tmp_path / "missing.txt") == 2
        (tmp_path / "junk.pk").write_bytes(b"SPKP" + b"\0" * 20)
        assert run("embed", "--model", tmp_path / "junk.pk", "--data", tmp_path, "--out", tmp_path / "e") == 2
        (tmp_path / "t.txt").write_text("a b target\n")
        (tmp_path / "e.txt").write_text("a 1 0\n")
        assert run("score", "--embeddings", tmp_path / "e.txt", "--trials", tmp_path / "t.txt",
                   "--out", tmp_path / "s") == 2

    def test_divergence_exit_code(self, work, tmp_path):
        import shutil
        shutil.copytree(work / "train", tmp_path / "nan")
        for f in (tmp_path / "nan").glob("*.ftmx"):
            x = read_features(f)
            x[:] = np.nan
            write_features(x, f)
        assert run("train-baseline", "--data", tmp_path / "nan", "--out", tmp_path / "n.ckpt", "--scale", 0.0625,
                   *DESK) == 3
