import json

import pytest

from nsif.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_USAGE, run

SMALL = ["--n-train", "12", "--n-valid-seen", "4", "--n-valid-unseen", "4", "--seed", "0"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run(["gen", "--out", str(out)] + SMALL) == EXIT_OK
    return out


def test_gen_twice_is_byte_identical(data_dir, tmp_path):
    assert run(["gen", "--out", str(tmp_path)] + SMALL) == EXIT_OK
    for name in ("train.jsonl", "valid_seen.jsonl", "valid_unseen.jsonl", "config.json"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()
    first = json.loads((data_dir / "train.jsonl").read_text().splitlines()[0])
    assert "config_hash" in first["provenance"] and first["provenance"]["seed"] == 0


def test_parallel_gen_matches(data_dir, tmp_path):
    assert run(["gen", "--out", str(tmp_path), "--workers", "2"] + SMALL) == EXIT_OK
    assert (tmp_path / "valid_unseen.jsonl").read_bytes() == (data_dir / "valid_unseen.jsonl").read_bytes()


def test_eval_expert_report(data_dir, tmp_path, capsys):
    code = run(["eval", "--agent", "expert", "--split", "unseen", "--data", str(data_dir), "--out", str(tmp_path)])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    for col in ("Goto", "Pickup", "Slice", "Toggle"):
        assert col in text
    assert "100 (100)" in text
    assert (tmp_path / "results_expert_ValidUnseen.jsonl").exists()
    assert json.loads((tmp_path / "table1_expert.json").read_text())["kind"] == "subtask"


def test_train_eval_robustness_report(data_dir, tmp_path, capsys):
    out = str(tmp_path)
    for agent in ("nsif", "s2spm"):
        assert run(["train", "--agent", agent, "--data", str(data_dir), "--out", out, "--epochs", "2"]) == EXIT_OK
        assert (tmp_path / f"{agent}.npz").exists()
        log = json.loads((tmp_path / f"{agent}_loss.json").read_text())
        assert len(log["loss"]) == 2 and "config_hash" in log
        assert run(["eval", "--agent", agent, "--split", "both", "--data", str(data_dir), "--out", out]) == EXIT_OK
    assert run(["robustness", "--agent", "nsif", "--split", "unseen", "--data", str(data_dir), "--out", out]) == 0
    assert " / " in (tmp_path / "table2_nsif.txt").read_text()
    assert run(["report", "--out", out]) == EXIT_OK
    text = capsys.readouterr().out
    assert "nsif" in text and "s2spm" in text
    assert set(json.loads((tmp_path / "table1.json").read_text())["tables"]) == {"nsif", "s2spm"}


def test_config_file_overrides_flags(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_train": 3, "n_valid_seen": 1, "n_valid_unseen": 1}))
    assert run(["gen", "--out", str(tmp_path), "--config", str(cfg), "--n-train", "50"]) == EXIT_OK
    assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 3


def test_selftest_exit_zero(capsys):
    assert run(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 6


def test_exit_codes(tmp_path, capsys):
    assert run([]) == EXIT_USAGE
    assert run(["fly"]) == EXIT_USAGE
    assert run(["train", "--out", str(tmp_path)]) == EXIT_USAGE  # --agent is required
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["gen", "--out", str(tmp_path), "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text(json.dumps({"K": 0}))
    assert run(["gen", "--out", str(tmp_path), "--config", str(bad)]) == EXIT_CONFIG
    missing = tmp_path / "nowhere"
    assert run(["train", "--agent", "nsif", "--data", str(missing), "--out", str(tmp_path)]) == EXIT_IO
    assert run(["eval", "--agent", "nsif", "--out", str(tmp_path / "empty")]) == EXIT_IO
    err = capsys.readouterr().err
    assert "config error" in err and "I/O error" in err


def test_corrupt_checkpoint_is_config_error(data_dir, tmp_path):
    from nsif import neuralkit as nk

    nk.save_checkpoint(tmp_path / "nsif.npz", {"a": __import__("numpy").zeros(2)},
                       {"config": {"kind": "nsif"}, "vocab": ["<pad>", "<unk>", "<sep>"]})
    code = run(["eval", "--agent", "nsif", "--split", "seen", "--data", str(data_dir), "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
