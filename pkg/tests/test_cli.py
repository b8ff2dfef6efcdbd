import json
import subprocess
import sys

import pytest
import yaml

from afrn import checkpoint
from afrn.cli import main
from afrn.data import load_grids
from afrn.metrics import all_pairs, tar_at_far
from afrn.training import embed


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out / "cfg.yaml", {"model": {**_toy_model()},
                                          "data": {"noise": 0.0},
                                          "optim": {"max_steps": 60}})
    assert main(["train", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
    return out


def _toy_model():
    return {"H": 3, "W": 3, "D": 16, "L": 32, "L_att": 32, "C": 16, "E": 32,
            "n_identities": 8, "K": 27}


def test_train_outputs(trained):
    for name in ("config.yaml", "checkpoint.afrn", "report.json", "summary.jsonl",
                 "train.grids", "validation.grids"):
        assert (trained / name).exists(), name
    report = json.loads((trained / "report.json").read_text())
    assert report["seed"] == 3 and report["config"]["seed"] == 3
    assert report["config"]["model"]["K"] == 27
    echo = yaml.safe_load((trained / "config.yaml").read_text())
    assert echo == report["config"]
    last = (trained / "summary.jsonl").read_text().splitlines()[-1]
    assert json.loads(last)["metric"] == "val_verification_accuracy"


def test_missing_field_exit_code(tmp_path, capsys):
    model = _toy_model()
    del model["D"]
    cfg = write_config(tmp_path / "c.yaml", {"model": model})
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "D" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {"modle": {}})
    assert main(["train", "--config", cfg, "--preset", "toy", "--out", str(tmp_path)]) == 1


def test_io_error_exit_code(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data",
                 str(tmp_path / "nope.grids")]) == 3
    assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 3


def test_eval_noise_free_prototypes(trained, tmp_path):
    out = tmp_path / "ev"
    rc = main(["eval", "--checkpoint", str(trained / "checkpoint.afrn"),
               "--data", str(trained / "train.grids"), "--out", str(out)])
    assert rc == 0
    recs = [json.loads(l) for l in (out / "verification_summary.jsonl").read_text().splitlines()]
    acc = next(r for r in recs if r["metric"] == "verification_accuracy")
    assert acc["value"] == 1.0


def test_eval_deterministic_and_consistent(trained, tmp_path):
    args = ["eval", "--checkpoint", str(trained / "checkpoint.afrn"),
            "--data", str(trained / "validation.grids"), "--far", "0,0.01,0.1,1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a/verification.csv").read_bytes()
    assert a == (tmp_path / "b/verification.csv").read_bytes()

    params, _, _ = checkpoint.load(trained / "checkpoint.afrn")
    data = load_grids(trained / "validation.grids")
    pts = tar_at_far(all_pairs(embed(params, data.grids), data.labels), [0, 0.01, 0.1, 1])
    recs = [json.loads(l) for l in (tmp_path / "a/verification_summary.jsonl").read_text()
            .splitlines() if '"tar_at_far"' in l]
    assert [r["value"] for r in recs] == [p.tar for p in pts]


def test_eval_identification(trained, tmp_path):
    rc = main(["eval", "--checkpoint", str(trained / "checkpoint.afrn"),
               "--data", str(trained / "validation.grids"), "--protocol", "identification",
               "--out", str(tmp_path)])
    assert rc == 0
    header = (tmp_path / "identification.csv").read_text().splitlines()[0]
    assert header == "target,threshold,tpir,fpir"
    metrics = {json.loads(l)["metric"] for l in
               (tmp_path / "identification_summary.jsonl").read_text().splitlines()}
    assert {"tpir_at_fpir", "rank_1", "rank_5"} <= metrics


def test_eval_shape_mismatch(trained, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", {"model": {**_toy_model(), "D": 4},
                                             "optim": {"max_steps": 1}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    rc = main(["eval", "--checkpoint", str(trained / "checkpoint.afrn"),
               "--data", str(tmp_path / "r/train.grids"), "--out", str(tmp_path)])
    assert rc == 1


def test_gradcheck_passes_and_fault_fails(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "model[selection=frozen]" in out and "FAIL" not in out
    assert main(["gradcheck", "--inject-fault", "softmax_flat"]) == 2
    captured = capsys.readouterr()
    assert "FAIL softmax_flat" in captured.out and "softmax_flat" in captured.err


def test_gradcheck_single_block(tmp_path):
    cfg = write_config(tmp_path / "n1.yaml", {"model": {
        "H": 1, "W": 1, "D": 3, "L": 4, "L_att": 4, "C": 3, "E": 5, "n_identities": 3, "K": 1}})
    assert main(["gradcheck", "--config", cfg]) == 0


def test_gradcheck_rejects_large_n():
    assert main(["gradcheck", "--preset", "toy"]) == 1


def test_ksweep_dedupes(tmp_path, capsys):
    cfg = write_config(tmp_path / "k.yaml", {"model": _toy_model(),
                                             "optim": {"max_steps": 8}})
    assert main(["ksweep", "--config", cfg, "--k", "9,9,200", "--out", str(tmp_path)]) == 0
    err = capsys.readouterr().err
    assert "duplicate" in err and "clamped" in err
    rows = (tmp_path / "ksweep.csv").read_text().splitlines()
    assert rows[0] == "K,accuracy,threshold,reference"
    assert [r.split(",")[0] for r in rows[1:]] == ["9", "81", "81"]
    assert rows[-1].endswith(",1")


def test_bench_counters(tmp_path):
    rc = main(["bench", "--n", "4,9", "--d", "3", "--l", "5", "--k", "3,16,81",
               "--repeats", "1", "--out", str(tmp_path)])
    assert rc == 0
    import csv
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    assert len(rows) == 6
    for r in rows:
        N, L, K = int(r["N"]), int(r["L"]), int(r["K"])
        assert int(r["naive_macs"]) == int(r["full_macs"]) == N * N * L
        assert int(r["selected_macs"]) == K * L
        if K == N * N:
            assert float(r["max_dev_selected"]) <= 1e-10
        assert float(r["max_dev_full"]) <= 1e-10


def test_console_script_exit_code():
    proc = subprocess.run([sys.executable, "-m", "afrn.cli", "gradcheck", "--inject-fault",
                           "relu"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "FAIL relu" in proc.stdout
