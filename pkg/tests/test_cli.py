import json

import pytest

from tactigrasp.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines()], err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_gen_data_writes_samples_and_manifest(capsys, workdir):
    code, out, _ = run(capsys, "gen-data", "--kind", "slip", "--count", "20", "--seed", "42",
                       "--out", str(workdir / "slip"))
    assert code == 0 and out[0]["count"] == 20
    files = sorted(p.name for p in (workdir / "slip").iterdir())
    assert len(files) == 21 and "manifest.jsonl" in files


def test_train_then_eval_and_detector_load(capsys, workdir):
    d = workdir / "touch"
    assert run(capsys, "gen-data", "--kind", "touch", "--count", "24", "--out", str(d))[0] == 0
    code, out, _ = run(capsys, "train", "--data", str(d), "--out", str(workdir / "ck"), "--epochs", "1")
    assert code == 0 and out[0]["event"] == "epoch" and out[-1]["event"] == "train"
    code, out, _ = run(capsys, "eval", "--checkpoint", str(workdir / "ck"), "--data", str(d))
    assert code == 0 and out[0]["count"] == 24 and len(out[0]["confusion"]) == 2

    from tactigrasp.control import load_detectors

    code, _, _ = run(capsys, "train", "--data", str(workdir / "slip"), "--out", str(workdir / "sk"),
                     "--epochs", "1")
    assert code == 0
    det = load_detectors(workdir / "ck", workdir / "sk")
    assert det.frame_size == 64 and det.clip_factor == 2


def test_mismatched_eval_reports_geometry(capsys, workdir):
    d = workdir / "touch"
    if not d.exists():
        pytest.skip("depends on the training test's dataset")
    code, _, err = run(capsys, "eval", "--checkpoint", str(workdir / "sk"), "--data", str(d))
    assert code == 1 and err.startswith("error: geometry-mismatch:")


def test_episode_trace(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    code, out, _ = run(capsys, "episode", "--scenario", "fluid", "--seed", "7", "--trace", str(trace))
    assert code == 0
    last = json.loads(trace.read_text().splitlines()[-1])
    assert last["summary"] and last["final_state"] in ("Done", "Failed")
    assert out[0]["outcome"] == last["outcome"]


def test_config_override(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"timeout": 1.0}))
    code, out, _ = run(capsys, "episode", "--config", str(cfg))
    assert code == 0 and out[0]["reason"] == "timeout"
    cfg.write_text(json.dumps({"bogus": 1}))
    code, _, err = run(capsys, "episode", "--config", str(cfg))
    assert code == 1 and err.startswith("error: invalid-argument:")


def test_bench_one_variant(capsys):
    code, out, _ = run(capsys, "bench", "--variants", "AB3-4", "--repeat", "1")
    assert code == 0 and out[0]["variant"] == "AB3-4" and out[0]["forward_ms_median"] > 0


def test_error_categories(capsys, tmp_path):
    code, _, err = run(capsys, "bench", "--variants", "AB9")
    assert code == 1 and err.startswith("error: unknown-variant:")
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path))
    assert code == 1 and err.startswith("error: dataset-error:")


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--nope"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_log_level_from_environment(capsys, monkeypatch, tmp_path):
    import logging

    monkeypatch.setenv("TACTIGRASP_LOG", "debug")
    root = logging.getLogger()
    saved = root.handlers[:], root.level
    root.handlers = []
    try:
        run(capsys, "gen-data", "--kind", "touch", "--count", "2", "--out", str(tmp_path / "x"))
        assert root.level == logging.DEBUG
    finally:
        root.handlers, _ = saved
        root.setLevel(saved[1])
