import json

import pytest

from nestdiff import cli
from nestdiff.metrics import read_csv

from conftest import tiny_overrides


def _sets(**extra):
    out = []
    for k, v in tiny_overrides(**extra).items():
        out += ["--set", f"{k}={v if isinstance(v, str) else json.dumps(v)}"]
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--out", str(out), *_sets()]) == 0
    return out


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for key in ("diffusion.alpha_first", "ensemble.temperature", "train.seed", "data.class_sep"):
        assert key in text


def test_train_outputs(trained):
    manifest = json.loads((trained / "train_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert set(manifest["versions"]) >= {"python", "torch", "numpy", "nestdiff"}
    assert manifest["seeds"] == {"data": 0, "train": 0}
    assert (trained / cli.CHECKPOINT_NAME).is_file()


def test_train_replays_from_manifest(trained, tmp_path):
    assert cli.main(["train", "--config", str(trained / "train_manifest.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / cli.CHECKPOINT_NAME).read_bytes() == (trained / cli.CHECKPOINT_NAME).read_bytes()


def test_resume_of_finished_run_is_a_no_op(trained, tmp_path):
    ck = trained / cli.CHECKPOINT_NAME
    assert cli.main(["train", "--resume", str(ck), "--out", str(tmp_path), *_sets()]) == 0
    assert (tmp_path / cli.CHECKPOINT_NAME).read_bytes() == ck.read_bytes()


def test_infer_eval_and_replay(trained, tmp_path):
    ck = str(trained / cli.CHECKPOINT_NAME)
    assert cli.main(["infer", "--checkpoint", ck, "--out", str(tmp_path / "r"), "--perturb", "gaussian:0.5"]) == 0
    rdir = tmp_path / "r"
    for name in ("predictions.jsonl", "summary.csv", "piw_pv.csv", "bins.csv", "manifest.json"):
        assert (rdir / name).is_file()
    rows = [json.loads(line) for line in (rdir / "predictions.jsonl").read_text().splitlines()]
    assert set(rows[0]) >= {"index", "true", "class", "proba", "piw", "pv"}
    assert len(read_csv(rdir / "bins.csv")) == 10
    assert len(read_csv(rdir / "piw_pv.csv")) == 4

    assert cli.main(["infer", "--manifest", str(rdir / "manifest.json"), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2" / "predictions.jsonl").read_bytes() == (rdir / "predictions.jsonl").read_bytes()

    assert cli.main(["eval", str(rdir), str(tmp_path / "r2"), "--out", str(tmp_path / "eval.csv")]) == 0
    ev = read_csv(tmp_path / "eval.csv")
    assert len(ev) == 2 and ev[0]["perturb"] == "gaussian:0.5" and ev[0]["ece10"] == ev[1]["ece10"]


def test_infer_override_changes_sampling_only(trained, tmp_path):
    ck = str(trained / cli.CHECKPOINT_NAME)
    assert cli.main(["infer", "--checkpoint", ck, "--out", str(tmp_path / "m1"),
                     "--set", "ensemble.M=1", "--set", "model.K=1"]) == 2
    assert cli.main(["infer", "--checkpoint", ck, "--out", str(tmp_path / "m1"), "--set", "ensemble.M=1"]) == 0


def test_probe(trained, tmp_path):
    assert cli.main(["probe", "--checkpoint", str(trained / cli.CHECKPOINT_NAME), "--out",
                     str(tmp_path / "drift.csv")]) == 0
    rows = read_csv(tmp_path / "drift.csv")
    assert [int(r["block"]) for r in rows] == [1, 2, 3, 4, 5, 6]


def test_sweep_over_perturbations(trained, tmp_path):
    ck = str(trained / cli.CHECKPOINT_NAME)
    assert cli.main(["sweep", "--checkpoint", ck, "--perturb", "contrast:0.7", "--perturb", "fgsm:0.03",
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert [r["perturb"] for r in rows] == ["clean", "contrast:0.7", "fgsm:0.03"]


def test_sweep_grid_retrains(tmp_path):
    args = ["sweep", "--grid", "model.K=1,2", "--out", str(tmp_path), *_sets(**{"data.n": 60})]
    assert cli.main(args) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert [(r["param"], r["value"]) for r in rows] == [("model.K", "1"), ("model.K", "2")]


@pytest.mark.parametrize("argv, code", [
    (["train", "--set", "bogus.key=1"], 2),
    (["train", "--set", "ensemble.M=0"], 2),
    (["infer", "--checkpoint", "/nonexistent/ck.ndck"], 4),
    (["infer"], 2),
    (["eval", "/nonexistent"], 4),
    (["sweep", "--grid", "model.K"], 2),
])
def test_exit_codes(argv, code, tmp_path, capsys):
    assert cli.main(argv) == code
    assert capsys.readouterr().err


def test_corrupt_checkpoint_exit_code(tmp_path):
    bad = tmp_path / "bad.ndck"
    bad.write_bytes(b"garbage")
    assert cli.main(["infer", "--checkpoint", str(bad)]) == 4


def test_divergence_exit_code(tmp_path):
    argv = ["train", "--out", str(tmp_path), *_sets(**{"train.lr": 1e30, "train.optimizer": "sgd"})]
    assert cli.main(argv) == 3


def test_verify_subset(capsys):
    assert cli.main(["verify", "--only", "4 schedule"]) == 0
    assert "[PASS] 4 schedule invariants" in capsys.readouterr().out
