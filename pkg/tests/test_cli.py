import json

import pytest

from crossfind.cli import main
from crossfind.config import EngineConfig, build_providers
from crossfind.core import FusionWeights, Query
from crossfind.errors import ConfigError
from crossfind.indexer import load_index
from crossfind.search import SearchRequest, search

CONFIG = """\
embeddings:
  default: {kind: mock, endpoint_url: "mock://embed", model_name: bag, dim: 32}
  qm: {kind: mock, endpoint_url: "mock://embed-text", model_name: bag-text, dim: 32, seed: 7}
generation: {kind: mock, endpoint_url: "mock://gen", model_name: echo}
index_path: out/toy.cfx
cache_path: cache
"""

RECORDS = [
    {"id": "sum", "query": "add two numbers", "code": "function add(a, b) returns sum of two numbers", "language": "solidity"},
    {"id": "owner", "query": "only owner modifier", "code": "modifier onlyOwner require msg sender owner", "language": "solidity"},
    {"id": "xfer", "query": "transfer tokens", "code": "function transfer(to, amount) tokens balance", "language": "solidity"},
]


@pytest.fixture
def ws(tmp_path):
    (tmp_path / "engine.yaml").write_text(CONFIG)
    data = tmp_path / "pairs.jsonl"
    data.write_text("".join(json.dumps(r) + "\n" for r in RECORDS))
    return tmp_path


def cli(ws, *args):
    return main([args[0], "--config", str(ws / "engine.yaml"), *args[1:]])


def last_json_err(text):
    return json.loads(text.strip().splitlines()[-1])


def test_index_then_cached_rerun(ws, capsys):
    assert cli(ws, "index", str(ws / "pairs.jsonl")) == 0
    err = capsys.readouterr().err
    assert "indexed 3 snippets" in err
    assert (ws / "out" / "toy.cfx").exists()
    assert cli(ws, "index", str(ws / "pairs.jsonl")) == 0
    assert "0 provider calls (cache hit)" in capsys.readouterr().err


def test_index_malformed_line_names_it(ws, capsys):
    bad = ws / "bad.jsonl"
    bad.write_text(json.dumps(RECORDS[0]) + "\n{oops\n")
    assert cli(ws, "index", str(bad)) == 2
    msg = last_json_err(capsys.readouterr().err)
    assert "line 2" in msg["message"]


def test_search_outputs_match_library(ws, capsys):
    cli(ws, "index", str(ws / "pairs.jsonl"))
    capsys.readouterr()
    assert cli(ws, "search", "transfer tokens", "--language", "solidity", "--query-id", "q1", "--format", "result") == 0
    got = json.loads(capsys.readouterr().out)

    cfg = EngineConfig.load(ws / "engine.yaml")
    providers = build_providers(cfg)
    index = load_index(cfg.index_path, providers)
    want = search(SearchRequest(Query("q1", "transfer tokens", "solidity"), 10), index, providers).result.to_dict()
    assert got == want
    assert got["results"][0]["candidate_id"] == "xfer"

    assert cli(ws, "search", "transfer tokens", "--language", "solidity", "--top-k", "2") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["rank"] == 1


def test_search_schema_flag_equals_unit_weights(ws, capsys):
    cli(ws, "index", str(ws / "pairs.jsonl"))
    capsys.readouterr()
    cli(ws, "search", "only owner", "--schema", "qm", "--format", "result")
    a = json.loads(capsys.readouterr().out)
    cli(ws, "search", "only owner", "--weights", "0,1,0", "--format", "result")
    assert json.loads(capsys.readouterr().out) == a


def test_search_bad_index_path_is_data_error(ws, capsys):
    assert cli(ws, "search", "x", "--index", str(ws / "missing.cfx")) == 2


def test_search_bad_weights_is_usage_error(ws, capsys):
    assert cli(ws, "search", "x", "--weights", "0.5,0.5,0.5") == 1
    assert cli(ws, "search", "x", "--weights", "abc") == 1


def test_calibrate(ws, capsys):
    out = ws / "report.json"
    csv = ws / "surface.csv"
    assert cli(ws, "calibrate", str(ws / "pairs.jsonl"), "--out", str(out), "--csv", str(csv)) == 0
    cap = capsys.readouterr()
    assert "evaluating 231 grid points" in cap.err
    best = json.loads(cap.out)
    assert best["grid_points"] == 231
    assert FusionWeights(best["alpha"], best["beta"], best["gamma"])
    assert len(json.loads(out.read_text())["surface"]) == 231
    assert len(csv.read_text().splitlines()) == 232


def test_calibrate_rejects_empty_and_bad_step(ws, capsys):
    empty = ws / "empty.jsonl"
    empty.write_text("")
    assert cli(ws, "calibrate", str(empty)) == 2
    assert "empty" in last_json_err(capsys.readouterr().err)["message"]
    assert cli(ws, "calibrate", str(ws / "pairs.jsonl"), "--step", "0.3") == 1


def test_evaluate(ws, capsys):
    out = ws / "eval.json"
    assert cli(ws, "evaluate", str(ws / "pairs.jsonl"), "--out", str(out), "--no-timing") == 0
    table = capsys.readouterr().out
    assert "fused:borda" in table and "query-comment" in table
    report = json.loads(out.read_text())
    assert "timing_ms" not in report
    assert set(report["strategies"]) == {"linear", "combsum", "combmnz", "rrf", "borda"}


def test_evaluate_schema_equals_unit_weights(ws, capsys):
    a, b = ws / "a.json", ws / "b.json"
    cli(ws, "evaluate", str(ws / "pairs.jsonl"), "--schema", "cg", "--out", str(a), "--no-timing")
    cli(ws, "evaluate", str(ws / "pairs.jsonl"), "--weights", "0,0,1", "--strategy", "linear", "--out", str(b), "--no-timing")
    assert json.loads(a.read_text())["fused"] == json.loads(b.read_text())["fused"]


def test_evaluate_unknown_strategy_is_usage_error(ws):
    assert cli(ws, "evaluate", str(ws / "pairs.jsonl"), "--strategy", "median") == 1


def test_config_env_interpolation(tmp_path, monkeypatch):
    monkeypatch.setenv("EMBED_URL", "mock://from-env")
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(CONFIG.replace('"mock://embed"', '"${EMBED_URL}"'))
    cfg = EngineConfig.load(cfg_path)
    assert cfg.embeddings["qc"].endpoint_url == "mock://from-env"
    assert cfg.index_path == (tmp_path / "out/toy.cfx").resolve()
    providers = build_providers(cfg)
    assert providers.qc is providers.cg and providers.qm is not providers.qc
    monkeypatch.delenv("EMBED_URL")
    with pytest.raises(ConfigError, match="EMBED_URL"):
        EngineConfig.load(cfg_path)


def test_missing_auth_env_fails_fast(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("CFX_TEST_TOKEN", raising=False)
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(CONFIG.replace(
        "generation: {kind: mock",
        "generation: {auth_secret_ref: CFX_TEST_TOKEN, kind: http",
    ))
    data = tmp_path / "p.jsonl"
    data.write_text(json.dumps(RECORDS[0]) + "\n")
    assert main(["index", "--config", str(cfg_path), str(data)]) == 1
    assert "CFX_TEST_TOKEN" in capsys.readouterr().err
