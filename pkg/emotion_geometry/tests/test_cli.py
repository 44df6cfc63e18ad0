import json
import logging
import os

import pytest
from filelock import FileLock

from emotion_geometry.cli import _layers, build_parser, main
from emotion_geometry.comprehension import extract_run
from emotion_geometry.registry import ModelRecord, run_dir_for
from emotion_geometry.stimuli import load_default_corpus
from emotion_geometry.tests.conftest import HiddenStateStub, StubHandle

RECORDS = [
    ModelRecord("stub/alpha-base", "alpha", "base", 0.5, 4, 16, "named_hook"),
    ModelRecord("stub/alpha-instruct", "alpha", "instruct", 0.5, 4, 16, "named_hook"),
    ModelRecord("stub/beta-base", "beta", "base", 1.0, 4, 24, "hidden_state_sequence"),
    ModelRecord("stub/beta-instruct", "beta", "instruct", 1.0, 4, 24, "hidden_state_sequence"),
]


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("runs"))
    corpus = load_default_corpus()
    for record in RECORDS:
        cls = StubHandle if record.backend_kind == "named_hook" else HiddenStateStub
        extract_run(cls(record), corpus, root)
    yield root


@pytest.mark.parametrize(
    "value,expected",
    [("3", [3]), ("3,5,9", [3, 5, 9]), ("4-7", [4, 5, 6, 7]), ("9,0-2,2", [0, 1, 2, 9])],
)
def test_layers(value, expected):
    assert _layers(value) == expected


def test_parser():
    args = build_parser().parse_args(
        ["gen-extract", "--condition", "D", "--model", "a/b", "--model", "c/d", "--layers", "1-2"]
    )
    assert args.command == "gen-extract"
    assert args.model == ["a/b", "c/d"]
    assert args.layers == [1, 2]
    with pytest.raises(SystemExit):
        build_parser().parse_args(["gen-extract", "--condition", "A"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["extract", "--precision", "int4"])


def test_invalid_config_exits_2(tmpdir):
    path = str(tmpdir.join("pipeline.json"))
    with open(path, "w") as f:
        json.dump({"unreliable": 0.5}, f)
    assert main(["analyze", "--config", path, "--out", str(tmpdir)]) == 2
    assert main(["analyze", "--models-table", "no/such.csv", "--out", str(tmpdir)]) == 2


def test_analyze_compare_report(run_root):
    assert main(["analyze", "--out", run_root]) == 0
    for record in RECORDS:
        assert os.path.exists(os.path.join(run_dir_for(run_root, record.model_id), "descriptors.json"))

    assert main(["compare", "--out", run_root]) == 0
    with open(os.path.join(run_root, "report", "rdm_of_rdms.json")) as f:
        assert len(json.load(f)["model_order"]) == 4

    # no steering, equivalence or decomposition yet
    assert main(["report", "--out", run_root]) == 3
    with open(os.path.join(run_root, "report", "missing.json")) as f:
        assert json.load(f)["missing"]


def test_decompose_without_conditions(run_root):
    assert main(["decompose", "--model", "stub/beta-base", "--out", run_root]) == 2


def test_steer_skips_hidden_state(run_root, caplog):
    with caplog.at_level(logging.WARNING, logger="emotion_geometry"):
        code = main(
            ["steer", "--model", "Qwen/Qwen2.5-1.5B", "--backend", "hidden_state_sequence", "--out", run_root]
        )
    assert code == 0
    assert "not available" in caplog.text


def test_locked_run_dir(tmpdir):
    out = str(tmpdir)
    run_dir = run_dir_for(out, "Qwen/Qwen2.5-1.5B")
    os.makedirs(run_dir)
    with FileLock(run_dir + ".lock"):
        assert main(["extract", "--model", "Qwen/Qwen2.5-1.5B", "--out", out]) == 2
