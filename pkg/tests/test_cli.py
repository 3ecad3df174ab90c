import csv
import json

import pytest

from desklst import experiments as X
from desklst.cli import main
from desklst.config import build_config


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return code, out


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    """Tiny world with ctc/mt foundations and a stage-1 run."""
    root = tmp_path_factory.mktemp("cli")
    t = ["--preset", "tiny"]
    assert main(["gen-data", *t, "--out", str(root / "data")]) == 0
    assert main(["pretrain-frontend", *t, "--tier", "ctc", "--data", str(root / "data"),
                 "--out", str(root / "foundation")]) == 0
    assert main(["pretrain-backend", *t, "--tier", "mt", "--data", str(root / "data"),
                 "--out", str(root / "foundation")]) == 0
    assert main(["train", *t, "--stage", "1", "--corpora", str(root / "data"),
                 "--frontend", str(root / "foundation/frontend-ctc.ckpt"),
                 "--backend", str(root / "foundation/backend-mt.ckpt"), "--out", str(root / "s1")]) == 0
    return root


def test_gen_data_refuses_nonempty_dir_and_is_reproducible(prepared, tmp_path, capsys):
    code, _ = run(capsys, "gen-data", "--preset", "tiny", "--out", str(prepared / "data"))
    assert code == 2
    code, out = run(capsys, "gen-data", "--preset", "tiny", "--out", str(tmp_path / "again"))
    assert code == 0 and len(out) == 1 and out[0].startswith("manifest=")
    for name in ("st/train.jsonl", "asr/train.jsonl", "text/dev.jsonl", "manifest.json"):
        assert (tmp_path / "again" / name).read_bytes() == (prepared / "data" / name).read_bytes()


def test_gen_data_unwritable_dir_exits_2(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _ = run(capsys, "gen-data", "--preset", "tiny", "--out", str(blocker / "sub"))
    assert code == 2


def test_stage1_csv_and_stage2_init_rule(prepared, tmp_path, capsys):
    with open(prepared / "s1" / "stage1.metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {r["stage"] for r in rows} == {"1"}
    code, _ = run(capsys, "train", "--preset", "tiny", "--stage", "2", "--corpora", str(prepared / "data"),
                  "--out", str(tmp_path / "s2"))
    assert code == 2
    code, out = run(capsys, "train", "--preset", "tiny", "--stage", "2", "--corpora", str(prepared / "data"),
                    "--init", str(prepared / "s1" / "stage1.final.ckpt"), "--out", str(tmp_path / "s2"))
    assert code == 0 and out[0].startswith("checkpoint=")
    code, _ = run(capsys, "train", "--preset", "tiny", "--stage", "2", "--allow-cold-start",
                  "--corpora", str(prepared / "data"), "--out", str(tmp_path / "cold"))
    assert code == 0
    code, _ = run(capsys, "train", "--preset", "tiny", "--stage", "2", "--corpora", str(prepared / "data"),
                  "--init", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "s2b"))
    assert code == 2


def test_eval_oracle_buckets_and_missing_files(prepared, tmp_path, capsys):
    test = str(prepared / "data" / "st" / "test.jsonl")
    code, out = run(capsys, "eval", "--preset", "tiny", "--oracle", "--corpus", test, "--out", str(tmp_path / "o"))
    assert code == 0 and out == ["BLEU=100.00"]
    code, out = run(capsys, "eval", "--preset", "tiny", "--ckpt", str(prepared / "s1" / "stage1.final.ckpt"),
                    "--corpus", test, "--out", str(tmp_path / "e"))
    assert code == 0 and len(out) == 1 and out[0].startswith("BLEU=")
    lines = (tmp_path / "e" / "buckets.tsv").read_text().splitlines()
    assert len(lines) == 1 + 5
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert set(report) >= {"bleu", "precisions", "bp", "hyp_len", "ref_len", "buckets"}
    code, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--corpus", test)
    assert code == 2
    code, _ = run(capsys, "eval", "--oracle", "--corpus", str(tmp_path / "nope.jsonl"))
    assert code == 2


def test_decode_beam1_and_beam4(prepared, tmp_path, capsys):
    ck, test = str(prepared / "s1" / "stage1.final.ckpt"), str(prepared / "data" / "st" / "test.jsonl")
    scores = {}
    for beam in (1, 4):
        code, out = run(capsys, "decode", "--preset", "tiny", "--ckpt", ck, "--corpus", test,
                        "--beam", str(beam), "--out", str(tmp_path / f"b{beam}"))
        assert code == 0 and out[0].startswith("decoded=10")
        with open(tmp_path / f"b{beam}" / "hyps.tsv") as fh:
            scores[beam] = [float(r["logprob"]) for r in csv.DictReader(fh, delimiter="\t")]
    assert len(scores[1]) == len(scores[4]) == 10


def test_avg_ckpt_and_curves(prepared, tmp_path, capsys):
    s1 = prepared / "s1"
    ckpts = sorted(str(p) for p in s1.glob("stage1.*.ckpt"))
    code, out = run(capsys, "avg-ckpt", ckpts[0], ckpts[0], "--out", str(tmp_path / "avg.ckpt"))
    assert code == 0 and out[0].startswith("checkpoint=")
    code, _ = run(capsys, "avg-ckpt", ckpts[0], "--out", str(tmp_path / "one.ckpt"))
    assert code == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    code, _ = run(capsys, "curves", str(s1 / "stage1.metrics.csv"), str(bad), "--out", str(tmp_path / "c.csv"))
    assert code == 2
    code, out = run(capsys, "curves", str(s1 / "stage1.metrics.csv"), "--out", str(tmp_path / "c.csv"))
    assert code == 0 and out[0].startswith("curves=")


def test_usage_and_config_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["train", "--stage", "3"]) == 2
    assert main(["gen-data", "--preset", "tiny", "--set", "beam=0", "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-data", "--set", "nonsense=1", "--out", str(tmp_path / "y")]) == 2
    capsys.readouterr()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exits_3(prepared, tmp_path, capsys):
    code, _ = run(capsys, "train", "--preset", "tiny", "--set", "stage1_lr=1e30", "--stage", "1",
                  "--corpora", str(prepared / "data"), "--out", str(tmp_path / "nan"))
    assert code == 3


def test_train_rerun_is_bitwise_identical(prepared, tmp_path, capsys):
    args = ["train", "--preset", "tiny", "--stage", "2", "--corpora", str(prepared / "data"),
            "--init", str(prepared / "s1" / "stage1.final.ckpt")]
    for name in ("r1", "r2"):
        assert main(args + ["--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    files = sorted(p.name for p in (tmp_path / "r1").iterdir())
    assert "stage2.final.ckpt" in files and "stage2.metrics.csv" in files
    for f in files:
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes(), f


def test_ablation_commands_report_structure(tmp_path, capsys):
    ws = str(tmp_path / "ws")
    code, _ = run(capsys, "ablate-strategies", "--preset", "tiny", "--out", ws)
    assert code == 2  # prerequisites missing
    code, out = run(capsys, "ablate-strategies", "--preset", "tiny", "--prepare", "--out", ws)
    assert code == 0 and len(out) == 1
    assert " a=" in out[0] and "b=-/" in out[0]
    rep = json.loads((tmp_path / "ws" / "reports" / "strategies.json").read_text())
    rows = {r["name"]: r for r in rep["rows"]}
    assert sorted(rows) == ["a", "b", "c", "d"]
    assert rows["a"]["mean_stage2"] is None and rows["a"]["mean_stage1"] is not None
    assert rows["b"]["mean_stage1"] is None and rows["c"]["mean_stage1"] is None
    # strategy a reuses strategy d's stage-1 runs
    assert [r["stage1_checkpoint"] for r in rows["a"]["per_seed"]] == \
        [r["stage1_checkpoint"] for r in rows["d"]["per_seed"]]
    code, out = run(capsys, "ablate-frontend", "--preset", "tiny", "--prepare", "--out", ws)
    assert code == 0
    rep = json.loads((tmp_path / "ws" / "reports" / "frontend.json").read_text())
    prov = {r["name"]: r["provenance"]["frontend"] for r in rep["rows"]}
    assert prov == {"ctc": "pretrained", "ssl": "pretrained", "random": "init-only"}
    code, out = run(capsys, "ablate-backend", "--preset", "tiny", "--prepare", "--out", ws, "--seed", "2")
    assert code == 0
    rep = json.loads((tmp_path / "ws" / "reports" / "backend.json").read_text())
    assert rep["seeds"] == [2] and [r["backend"] for r in rep["rows"]] == ["mt", "lm", "random"]


def test_cached_cells_match_fresh_runs(tmp_path):
    cfg = build_config("tiny", seeds=(1,))
    ws = X.Workspace(tmp_path / "ws", cfg)
    ws.prepare(("ctc",), ("mt",))
    first = X.run_pipeline(ws, "ctc", "mt", "d", 1)
    cached = X.run_pipeline(ws, "ctc", "mt", "d", 1)
    fresh = X.run_pipeline(ws, "ctc", "mt", "d", 1, force=True)
    assert first["stage2"] == cached["stage2"] == fresh["stage2"]
    with pytest.raises(X.PrerequisiteError):
        X.run_pipeline(ws, "ssl", "mt", "d", 1)
