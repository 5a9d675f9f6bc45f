import json
import os
from pathlib import Path

import pytest

from raysplat.cli import main

from cli_pipeline import run_pipeline

GOLDEN = Path(__file__).parent / "golden"
HELP_COMMANDS = [[], ["dataset", "gen"], ["train", "rf"], ["train", "decoder"], ["sample"],
                 ["pose-estimate"], ["nvs"], ["edit", "object"], ["edit", "stroke"], ["render"], ["eval"]]


def _help_text(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main([*argv, "--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("argv", HELP_COMMANDS, ids=lambda a: "-".join(a) or "top")
def test_help_matches_golden(argv, capsys):
    path = GOLDEN / ("help_" + ("_".join(argv) or "top") + ".txt")
    text = _help_text(argv, capsys)
    if os.environ.get("RAYSPLAT_UPDATE_GOLDEN"):
        path.parent.mkdir(exist_ok=True)
        path.write_text(text)
    assert text == path.read_text()


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_steps_zero_is_config_error(tmp_path, capsys):
    assert main(["sample", "--steps", "0", "--out", str(tmp_path)]) == 2
    e = _error(capsys)
    assert e["error"] == "config" and "--steps" in e["message"]


def test_bad_flag_values(tmp_path, capsys):
    assert main(["sample", "--t-stop", "300", "--out", str(tmp_path)]) == 2
    assert main(["sample", "--guidance", "1,2", "--out", str(tmp_path)]) == 2
    assert main(["dataset", "gen", "--size", "20", "--out", str(tmp_path)]) == 2
    assert main(["bogus"]) == 2
    assert main(["eval", "nope", "--out", str(tmp_path)]) == 2


def test_missing_inputs_are_config_errors(tmp_path, capsys):
    assert main(["sample", "--checkpoint", str(tmp_path / "none.sfrf"), "--out", str(tmp_path)]) == 2
    assert main(["eval", "pose", "--checkpoint", str(tmp_path / "none.sfrf"), "--out", str(tmp_path)]) == 2
    assert "train rf" in _error_last(capsys)


def _error_last(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]


def test_unknown_config_keys(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("steps = 3\ncolour = 1\n")
    assert main(["sample", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path)]) == 2
    assert "colour" in _error(capsys)["message"]
    (tmp_path / "e.json").write_text(json.dumps({"bogus": 1}))
    assert main(["eval", "pose", "--config", str(tmp_path / "e.json"), "--out", str(tmp_path)]) == 2


def test_config_file_sets_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"count": 1, "size": 16, "novel-views": 0}))
    assert main(["dataset", "gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["arguments"]["count"] == 1 and manifest["arguments"]["size"] == 16
    assert manifest["config_file"] == {"count": 1, "size": 16, "novel-views": 0}
    # explicit flags win over the file
    assert main(["dataset", "gen", "--config", str(tmp_path / "c.json"), "--count", "2",
                 "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p").glob("scene_*"))) == 2


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RAYSPLAT_OUTPUT", str(tmp_path / "env"))
    assert main(["dataset", "gen", "--count", "1", "--size", "16", "--novel-views", "0"]) == 0
    assert (tmp_path / "env" / "manifest.json").is_file()
    assert (tmp_path / "env" / "scene_00000" / "frames" / "000.png").is_file()


def test_runtime_failure_exit_code(tmp_path, capsys):
    (tmp_path / "bad.sfrf").write_bytes(b"junk")
    code = main(["sample", "--checkpoint", str(tmp_path / "bad.sfrf"), "--out", str(tmp_path / "o")])
    assert code == 1 and _error(capsys)["error"] == "runtime"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli"))


def test_every_command_is_deterministic(pipeline):
    for out, (m1, m2, r1, r2) in pipeline.items():
        assert m1 == m2, out
        assert r1 == r2, out


def test_manifest_contents(pipeline):
    m = json.loads(pipeline["smp"][0])
    assert m["command"] == "sample" and m["arguments"]["seed"] == 0
    assert "out" not in m["arguments"]
    assert set(m["inputs"]) == {"rf/rf.sfrf", "ext/rf.sfrf"}
    assert {"latent.sflt", "poses.json", "trace.jsonl", "frames/000.png"} <= set(m["outputs"])
    assert "timestamp" not in json.dumps(m)
    ev = json.loads(pipeline["evp"][0])
    assert "report.json" in ev["outputs"] and "timings.json" not in ev["outputs"]
    report = json.loads(pipeline["evp"][2])
    assert [r["method"] for r in report["rows"]] == ["random", "inpaint", "inpaint"]
