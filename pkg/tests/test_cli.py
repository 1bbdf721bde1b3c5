import json

import pytest

from conftest import chain
from graphveil.cli import main
from graphveil.graph import save_graph


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_bad_argument_value_is_usage_error(tmp_path):
    assert main(["obfuscate", "--in", "x", "--n", "2", "--k", "0", "--ngram", "n", "--bundle", "b", "--manifest", "m"]) == 2
    assert main(["corpus", "gen", "--out", str(tmp_path), "--depth-range", "5:3"]) == 2


def test_missing_manifest_is_domain_error(tmp_path, capsys):
    code = main(["deobfuscate", "--bundle", str(tmp_path), "--manifest", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "g.json"), "--json"])
    assert code == 1
    doc = json.loads(capsys.readouterr().out)
    assert doc["error"] == "missing_item"


def test_invalid_partition_count(tmp_path):
    path = tmp_path / "g.json"
    save_graph(chain("relu"), path)
    assert main(["partition", "--in", str(path), "--n", "9", "--out", str(tmp_path / "p")]) == 1


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "obfuscate" in capsys.readouterr().out


def test_pipeline_demo(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["pipeline", "demo", "--seed", "7", "--out", str(a), "--json"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert main(["pipeline", "demo", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert doc == printed
    assert doc["equivalence"]["passed"]
    assert int(doc["adversary"]["candidates"]) >= 10**6
    assert doc["nodes_deobfuscated"] <= doc["nodes_original"]
