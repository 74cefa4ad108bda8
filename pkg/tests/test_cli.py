import json
import os

import pytest

from kvfuse.cli import BOS, EOS, decode_bytes, encode_bytes, main
from kvfuse.errors import ConfigError
from kvfuse.model import ModelConfig

MODEL = {"n_layers": 4, "n_heads": 2, "head_dim": 8, "d_ff": 32,
         "vocab_size": 300, "seed": 9}
CONTEXT = b"System: answer briefly. " + b"the quick brown fox jumps over the lazy dog. " * 6


def setup_store(tmp_path):
    model_path = tmp_path / "model.json"
    model_path.write_text(json.dumps(MODEL))
    (tmp_path / "context.txt").write_bytes(CONTEXT)
    manifest = tmp_path / "manifest.json"
    rc = main([
        "precompute", "--model", str(model_path), "--store", str(tmp_path / "store"),
        "--input", str(tmp_path / "context.txt"), "--chunk-len", "64",
        "--system-len", "24", "--manifest-out", str(manifest),
    ])
    assert rc == 0
    return manifest


def test_tokenizer_round_trip():
    cfg = ModelConfig(**MODEL)
    ids = encode_bytes(b"hi", cfg, bos=True, eos=True)
    assert list(ids) == [BOS, 104, 105, EOS]
    assert decode_bytes(ids) == b"hi"
    small = ModelConfig(**{**MODEL, "vocab_size": 64})
    with pytest.raises(ConfigError):
        encode_bytes(b"hi", small)


def test_precompute_is_idempotent(tmp_path, capsys):
    manifest = setup_store(tmp_path)
    first = json.loads(manifest.read_text())
    capsys.readouterr()
    assert main([
        "precompute", "--model", str(tmp_path / "model.json"),
        "--store", str(tmp_path / "store"),
        "--input", str(tmp_path / "context.txt"), "--chunk-len", "64",
        "--system-len", "24", "--manifest-out", str(manifest),
    ]) == 0
    out = capsys.readouterr().out
    assert "cached" in out and "stored" not in out
    assert json.loads(manifest.read_text()) == first
    # 24 system + 246 context bytes + BOS = 271 tokens -> 24 + 64*3 + 55
    lengths = [c["length"] for c in first["chunks"]]
    assert lengths[0] == 24 and sum(lengths) == len(CONTEXT) + 1


def test_precompute_multiple_inputs(tmp_path):
    (tmp_path / "model.json").write_text(json.dumps(MODEL))
    (tmp_path / "sys.txt").write_bytes(b"You are terse.")
    (tmp_path / "doc_a.txt").write_bytes(b"alpha " * 20)
    (tmp_path / "doc_b.txt").write_bytes(b"bravo " * 20)
    manifest = tmp_path / "m.json"
    rc = main([
        "precompute", "--model", str(tmp_path / "model.json"),
        "--store", str(tmp_path / "store"),
        "--input", str(tmp_path / "sys.txt"),
        "--input", str(tmp_path / "doc_a.txt"),
        "--input", str(tmp_path / "doc_b.txt"),
        "--chunk-len", "64", "--system-len", "15",
        "--manifest-out", str(manifest),
    ])
    assert rc == 0
    chunks = json.loads(manifest.read_text())["chunks"]
    # 15-token system (BOS + 14 bytes), then 120 bytes per document file,
    # each split on its own 64-token grid
    assert [c["length"] for c in chunks] == [15, 64, 56, 64, 56]
    rc = main([
        "generate", "--manifest", str(manifest), "--question-text", "alpha or bravo?",
        "--strategy", "none", "--gen-len", "3",
    ])
    assert rc == 0


def test_generate_all_strategies(tmp_path, capsys):
    manifest = setup_store(tmp_path)
    capsys.readouterr()
    outputs = {}
    for strategy in ("vanilla", "attention_aware", "kv_diff", "head_tail", "none", "full"):
        rc = main([
            "generate", "--manifest", str(manifest), "--question-text", "what does the fox do?",
            "--strategy", strategy, "--gen-len", "5",
        ])
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        tokens = [int(t) for t in lines[0].split()]
        assert len(tokens) == 5
        assert lines[1].startswith("bytes:")
        outputs[strategy] = tokens
    assert outputs["vanilla"][0] < MODEL["vocab_size"]


def test_generate_trace_and_eviction(tmp_path, capsys):
    manifest = setup_store(tmp_path)
    trace_path = tmp_path / "trace.json"
    rc = main([
        "generate", "--manifest", str(manifest), "--question-text", "fox?",
        "--strategy", "attention_aware", "--r", "0.2", "--gen-len", "4",
        "--evict", "--evict-capacity", "60", "--trace-out", str(trace_path),
    ])
    assert rc == 0
    trace = json.loads(trace_path.read_text())
    assert trace["strategy"] == "attention_aware"
    assert len(trace["tokens"]) == 4
    assert trace["eviction"]["capacity"] == 60
    assert trace["p"] == len(trace["selected"])
    rc = main([
        "generate", "--manifest", str(manifest), "--question-text", "fox?",
        "--strategy", "attention_aware", "--evict",
    ])
    assert rc == 1  # --evict without a capacity


def test_generate_vanilla_trace(tmp_path):
    manifest = setup_store(tmp_path)
    trace_path = tmp_path / "trace.json"
    assert main([
        "generate", "--manifest", str(manifest), "--question-text", "q",
        "--strategy", "vanilla", "--gen-len", "3", "--trace-out", str(trace_path),
    ]) == 0
    trace = json.loads(trace_path.read_text())
    assert trace["strategy"] == "vanilla" and len(trace["tokens"]) == 3


def test_inspect_good_and_corrupt(tmp_path, capsys):
    manifest = setup_store(tmp_path)
    data = json.loads(manifest.read_text())
    path = os.path.join(data["store"], data["chunks"][0]["id"])
    capsys.readouterr()
    assert main(["inspect", path]) == 0
    out = capsys.readouterr().out
    assert "magic: A3KV" in out and "integrity: ok" in out

    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 2] ^= 0x01
    bad = tmp_path / "bad.chunk"
    bad.write_bytes(bytes(blob))
    assert main(["inspect", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "corrupt" in err

    assert main(["inspect", str(tmp_path / "absent.chunk")]) == 2


def test_generate_missing_chunk(tmp_path):
    manifest = setup_store(tmp_path)
    data = json.loads(manifest.read_text())
    os.unlink(os.path.join(data["store"], data["chunks"][1]["id"]))
    rc = main([
        "generate", "--manifest", str(manifest), "--question-text", "q",
        "--strategy", "attention_aware", "--gen-len", "2",
    ])
    assert rc == 2


def bench_config(acceptance=None):
    return {
        "model": {"n_layers": 4, "n_heads": 2, "head_dim": 8, "d_ff": 32,
                  "vocab_size": 64, "seed": 5},
        "recipe": {"n_doc_chunks": 2, "chunk_len": 24, "system_len": 12,
                   "question_len": 6, "data_seed": 3},
        "gen_len": 8,
        "repetitions": 2,
        "warmup": 1,
        "seeds": [0, 1],
        "acceptance": acceptance or [],
    }


def test_bench_quick_writes_artifacts(tmp_path):
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps(bench_config(acceptance=[
        {"name": "vanilla agrees", "metric": "gen_agree_frac",
         "where": {"strategy": "vanilla"}, "op": ">=", "value": 1.0},
    ])))
    out_dir = tmp_path / "out"
    assert main(["bench", "--config", str(cfg), "--out-dir", str(out_dir), "--quick"]) == 0
    assert (out_dir / "report.csv").exists() and (out_dir / "report.json").exists()
    rows = json.loads((out_dir / "report.json").read_text())["rows"]
    assert len(rows) == 6


def test_bench_assertion_failure_exits_3(tmp_path, capsys):
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps(bench_config(acceptance=[
        {"name": "impossible", "metric": "gen_agree_frac",
         "where": {"strategy": "full"}, "op": ">", "value": 2.0},
    ])))
    assert main(["bench", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--quick"]) == 3
    out = capsys.readouterr().out
    assert "[FAIL] impossible" in out


def test_bench_malformed_config_exits_1(tmp_path):
    cfg = tmp_path / "bench.json"
    cfg.write_text("{not json")
    assert main(["bench", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1
    cfg.write_text(json.dumps({"model": MODEL}))  # missing recipe
    assert main(["bench", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1


def test_usage_errors_exit_1(tmp_path):
    assert main(["generate", "--manifest", "nope.json"]) == 1  # no question
    assert main(["frobnicate"]) == 1
    assert main(["precompute", "--model", "/does/not/exist.json", "--store", str(tmp_path),
                 "--input", "/also/missing", "--manifest-out", str(tmp_path / "m.json")]) == 1
