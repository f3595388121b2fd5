import csv

import pytest

from plastree.cli import build_parser, main
from plastree.harness import parse_config


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_verify_theorems_passes(tmp_path, capsys):
    assert main(["verify-theorems", "--trials", "20000", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "m=7.464102" in out and "FAIL" not in out
    assert len(rows(tmp_path / "theorems.csv")) == 10


def test_fault_injection_gives_nonzero_exit(tmp_path, capsys):
    code = main(["verify-theorems", "--trials", "50000", "--child-scale", "1.0",
                 "--out", str(tmp_path)])
    assert code == 1
    assert (tmp_path / "counterexamples.json").exists()
    assert "[FAIL] ac-propagation" in capsys.readouterr().out


def test_scaling_outputs_and_determinism(tmp_path):
    args = ["scaling", "--n", "256,512,1024,2^11", "--theta", "0.3", "--seed", "2"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    for name in ("aggregate.csv", "scaling.csv", "scaling_fit.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    agg = rows(tmp_path / "a" / "aggregate.csv")
    assert list(agg[0]) == ["n", "theta", "mean_first", "mean_subsequent", "total_work"]
    assert [int(r["n"]) for r in agg] == [256, 512, 1024, 2048]


def test_scaling_detail_csv(tmp_path):
    main(["scaling", "--n", "128,256,512,1024", "--out", str(tmp_path), "--detail"])
    detail = rows(tmp_path / "descents.csv")
    assert list(detail[0]) == ["step", "neuron_id", "descent_index", "nodes_inspected",
                               "stack_pushes"]
    assert all(int(r["nodes_inspected"]) <= 8 for r in detail if r["descent_index"] != "0")


def test_distributed_with_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nn = 1024\nranks = 1,2,4\nseed = 5\ntheta = 0.25\n")
    assert main(["distributed", "--config", str(cfg), "--ranks", "1,8",
                 "--out", str(tmp_path / "o")]) == 0
    ranks = rows(tmp_path / "o" / "ranks.csv")
    assert {r["p"] for r in ranks} == {"1", "8"}      # flag overrides the file
    assert list(ranks[0]) == ["p", "rank", "step", "messages_sent", "nodes_downloaded",
                              "local_work"]
    assert "pairwise 56" in capsys.readouterr().out


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PLASTREE_OUT", str(tmp_path / "env"))
    assert main(["simulate", "--n", "200", "--steps", "2", "--grow-axons", "1"]) == 0
    syn = rows(tmp_path / "env" / "synapses.csv")
    assert syn and all(r["source_id"] != r["target_id"] for r in syn)
    assert len(rows(tmp_path / "env" / "steps.csv")) == 2


def test_compare_oracle(tmp_path):
    code = main(["compare-oracle", "--n", "300", "--populations", "3", "--draws", "20000",
                 "--out", str(tmp_path)])
    assert code == 0
    assert rows(tmp_path / "oracle.csv")[0]["mode"] == "oracle_mode"


def test_bad_input_reports_error(tmp_path, capsys):
    assert main(["scaling", "--theta", "0.7", "--n", "64,128,256,512",
                 "--out", str(tmp_path)]) == 2
    assert "theta" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        build_parser().parse_args(["nonsense"])


def test_parse_config():
    assert parse_config("a = 1\n\n# x\nb-c=2 # trailing\n") == {"a": "1", "b_c": "2"}
    with pytest.raises(ValueError):
        parse_config("just words")
