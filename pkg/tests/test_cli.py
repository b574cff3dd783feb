import csv

import pytest

from polydpo.cli import main
from polydpo.config import from_text, to_text

TINY = """\
[model]
hidden = [8]
[pretrain]
n_steps = 60
batch_size = 32
[sft]
n_steps = 20
batch_size = 32
[trainer]
n_steps = 12
batch_size = 16
beta = 50
[data]
n_pairs = 120
[sweep]
n_seeds = 1
n_eval = 15
"""


@pytest.fixture
def run(tmp_path, capsys):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)

    def _run(*argv):
        code = main([argv[0], "--config", str(cfg), *argv[1:]])
        out = capsys.readouterr()
        return code, out.out, out.err

    _run.dir = tmp_path
    return _run


def test_gen_clean_prints_unit_consistency(run):
    out_path = run.dir / "clean.jsonl"
    code, out, _ = run("gen-data", "--regime", "clean", "--seed", "3", "--out", str(out_path))
    assert code == 0
    assert "consistency_rate\t1.000000" in out
    first = out_path.read_bytes()
    run("gen-data", "--regime", "clean", "--seed", "3", "--out", str(out_path))
    assert out_path.read_bytes() == first


def test_gen_conflicting_rate(run):
    code, out, _ = run("gen-data", "--regime", "conflicting", "--n", "5000", "--out", str(run.dir / "c.jsonl"))
    assert code == 0
    rate = float(next(line for line in out.splitlines() if line.startswith("consistency_rate")).split("\t")[1])
    assert abs(rate - 0.21) <= 0.03


def test_gen_oversimple_from_winners(run):
    src = run.dir / "clean.jsonl"
    run("gen-data", "--regime", "clean", "--out", str(src))
    code, _, _ = run("gen-data", "--regime", "oversimple", "--winners", str(src), "--out", str(run.dir / "o.jsonl"))
    assert code == 0


def test_invalid_regime_exits_nonzero(run):
    with pytest.raises(SystemExit) as err:
        run("gen-data", "--regime", "messy", "--out", str(run.dir / "x.jsonl"))
    assert err.value.code != 0


def test_unwritable_path(run):
    (run.dir / "plain_file").write_text("")
    target = run.dir / "plain_file" / "x.jsonl"
    code, _, err = run("gen-data", "--regime", "clean", "--out", str(target))
    assert code == 1 and "gen-data" in err
    assert not target.exists()


def test_analyze_reports_line_number(run):
    good = run.dir / "clean.jsonl"
    run("gen-data", "--regime", "clean", "--out", str(good))
    lines = good.read_text().splitlines()
    lines[4] = lines[4][:-10]
    bad = run.dir / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    code, _, err = run("analyze", str(bad))
    assert code == 1 and "line 5" in err
    code, out, _ = run("analyze", str(good), "--out", str(run.dir / "report.tsv"))
    assert code == 0 and (run.dir / "report.tsv").read_text() == out


def test_bad_config_value(run):
    code, _, err = run("show-config", "--set", "trainer.beta=-3")
    assert code == 1 and "beta" in err


def test_show_config_is_canonical(run):
    code, out, _ = run("show-config", "--alpha", "2", "--seed", "9")
    assert code == 0
    cfg = from_text(out)
    assert cfg.trainer.alpha == 2.0 and cfg.seed == 9 and to_text(cfg) == out


def test_grad_curve_example(run):
    path = run.dir / "curve.csv"
    code, _, _ = run("grad-curve", "--grid", "0", "--n-points", "3", "--out", str(path))
    assert code == 0
    rows = list(csv.DictReader(path.open()))
    assert [(float(r["p"]), float(r["magnitude"])) for r in rows] == [(0.25, 0.75), (0.5, 0.5), (0.75, 0.25)]


def test_full_pipeline(run):
    d = run.dir
    assert run("gen-data", "--regime", "clean", "--out", str(d / "clean.jsonl"))[0] == 0
    assert run("pretrain", "--out", str(d / "base.ckpt"))[0] == 0
    assert (d / "base.ckpt.metrics.csv").exists()
    assert run("sft", "--data", str(d / "clean.jsonl"), "--init", str(d / "base.ckpt"), "--out", str(d / "sft.ckpt"))[0] == 0
    assert (d / "sft.ckpt.metrics.csv").read_text().startswith("step,loss,samples\n")

    common = ["--data", str(d / "clean.jsonl"), "--init", str(d / "sft.ckpt"), "--alpha", "0"]
    assert run("train", *common, "--out", str(d / "poly.ckpt"))[0] == 0
    assert run("train", *common, "--diffusion-dpo", "--out", str(d / "dpo.ckpt"))[0] == 0
    assert (d / "poly.ckpt.metrics.csv").read_bytes() == (d / "dpo.ckpt.metrics.csv").read_bytes()
    assert (d / "poly.ckpt").read_bytes() == (d / "dpo.ckpt").read_bytes()

    # same inputs, same bytes
    assert run("train", *common, "--out", str(d / "poly2.ckpt"))[0] == 0
    assert (d / "poly2.ckpt").read_bytes() == (d / "poly.ckpt").read_bytes()

    code, out, _ = run("evaluate", "--init", str(d / "poly.ckpt"))
    assert code == 0 and out.splitlines()[-1].startswith("composite\t")

    code, out, _ = run("sweep", "--data", str(d / "clean.jsonl"), "--init", str(d / "sft.ckpt"), "--grid", "0,2", "--out", str(d / "sweep.csv"))
    assert code == 0 and "best_alpha=" in out
    rows = list(csv.DictReader((d / "sweep.csv").open()))
    assert [r["seed"] for r in rows] == ["0", "0", "mean", "mean"]


def test_train_requires_existing_init(run):
    d = run.dir
    run("gen-data", "--regime", "clean", "--out", str(d / "clean.jsonl"))
    code, _, err = run("train", "--data", str(d / "clean.jsonl"), "--init", str(d / "nope.ckpt"), "--out", str(d / "p.ckpt"))
    assert code == 1 and "not found" in err
    assert not (d / "p.ckpt").exists()


def test_corrupt_checkpoint(run):
    d = run.dir
    run("gen-data", "--regime", "clean", "--out", str(d / "clean.jsonl"))
    (d / "junk.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 40)
    code, _, err = run("train", "--data", str(d / "clean.jsonl"), "--init", str(d / "junk.ckpt"), "--out", str(d / "p.ckpt"))
    assert code == 1 and not (d / "p.ckpt").exists()
