import csv
import json

import numpy as np
import pytest

from moefier import bench as B
from moefier.capture import capture_layers, synthetic_corpus
from moefier.checkpoint import block_path, load_block, load_model, save_block, save_model
from moefier.cli import main, parse_layers
from moefier.distill import TrainConfig, train_moe_block
from moefier.model import ToyTransformer, ToyTransformerConfig, init_moe_block
from moefier.policy import CorruptFileError, LayerPolicy

CFG = ToyTransformerConfig(n_layers=4, d_h=16, d_i=32, n_heads=2, vocab=40, seq_len=16)


@pytest.fixture(scope="module")
def dense():
    return ToyTransformer.random(CFG, 0)


@pytest.fixture(scope="module")
def corpus():
    return synthetic_corpus(6, 16, 40, seed=2)


@pytest.fixture(scope="module")
def blocks(dense):
    data = capture_layers(dense, synthetic_corpus(30, 16, 40, seed=1), range(4), 480)
    out = {}
    for l in range(4):
        teacher = dense.layers[l].ffn
        out[l], _ = train_moe_block(teacher, init_moe_block(teacher, 4, seed=l), data[l],
                                    TrainConfig(steps=100, learning_rate=1e-3, seed=l))
    return out


def test_top_layers():
    assert B.top_layers(8, 0) == [] and B.top_layers(8, 3) == [5, 6, 7]
    with pytest.raises(ValueError):
        B.top_layers(8, 9)


def test_empty_assembly_is_the_dense_model(dense, corpus):
    m = B.assemble(dense, {}, B.AssemblySpec([], 4))
    for seq in corpus:
        assert np.array_equal(m.forward(seq), dense.forward(seq))


def test_assembly_swaps_only_selected_layers(dense, blocks):
    m = B.assemble(dense, blocks, B.AssemblySpec([1, 3], 4, 1))
    assert m.moe_layers() == [1, 3]
    assert m.layers[3].ffn.policy == LayerPolicy.static(1)
    assert m.layers[0].ffn is dense.layers[0].ffn
    assert dense.moe_layers() == []


def test_assembly_errors(dense, blocks):
    with pytest.raises(KeyError):
        B.assemble(dense, {}, B.AssemblySpec([1], 4))
    with pytest.raises(ValueError):
        B.assemble(dense, blocks, B.AssemblySpec([1, 1], 4))
    with pytest.raises(ValueError):
        B.assemble(dense, blocks, B.AssemblySpec([7], 4))
    with pytest.raises(ValueError):
        B.assemble(dense, blocks, B.AssemblySpec([1], 8))
    with pytest.raises(ValueError):
        B.assemble(dense, blocks, B.AssemblySpec([1], 4, 5))


def test_split_block_with_renormalised_top_n_is_not_the_dense_ffn(dense, corpus):
    b = init_moe_block(dense.layers[3].ffn, 4)
    m = B.assemble(dense, {3: b}, B.AssemblySpec([3], 4, 4))
    assert not np.allclose(m.forward(corpus[0]), dense.forward(corpus[0]), atol=1e-4)


def test_bench_dense_against_itself(dense, corpus):
    rep = B.bench(dense, corpus, runs=3)
    assert rep.perplexity_ratio == 1.0
    assert rep.mse_sum == 0.0
    assert rep.tokens_per_sec > 0
    assert rep.flops.reduction_ratio == 0.0


def test_bench_reports_active_experts_for_dynamic_policy(dense, blocks, corpus):
    m = B.assemble(dense, blocks, B.AssemblySpec([2, 3], 4, 2, {3: LayerPolicy.dynamic(0.45, 0.3)}))
    rep = B.bench(m, corpus, dense, measure_throughput=False)
    assert rep.mean_active_experts[2] == 2.0
    assert 1.0 <= rep.mean_active_experts[3] <= 3.0
    assert rep.layer_mse[0] == 0.0 and rep.layer_mse[3] > 0


def test_sweep_monotone(dense, blocks, corpus):
    rows = B.sweep(dense, blocks, range(5), corpus, measure_throughput=False)
    flops = [r["ffn_flops_per_token_moe"] for r in rows]
    mse = [r["ffn_mse_sum"] for r in rows]
    assert all(a > b for a, b in zip(flops, flops[1:]))
    assert all(a <= b for a, b in zip(mse, mse[1:]))
    assert rows[0]["perplexity_ratio"] == 1.0 and rows[0]["ffn_mse_sum"] == 0.0


def test_write_csv_merges_columns(tmp_path):
    B.write_csv(tmp_path / "r.csv", [{"a": 1}, {"a": 2, "b": 3}])
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert rows[1] == {"a": "2", "b": "3"} and rows[0]["b"] == ""


# --- checkpoints ----------------------------------------------------------------------------


def test_model_checkpoint_roundtrip(tmp_path, dense, blocks):
    m = B.assemble(dense, blocks, B.AssemblySpec([2], 4, 2, {2: LayerPolicy.dynamic(0.6, 0.3)}))
    save_model(tmp_path / "m.ldmo", m, {"dense_source": "x"})
    back = load_model(tmp_path / "m.ldmo")
    assert back.config == m.config and back.moe_layers() == [2] and back.source == "x"
    assert back.layers[2].ffn.policy == m.layers[2].ffn.policy
    assert np.array_equal(back.forward([1, 2, 3]), m.forward([1, 2, 3]))


def test_block_checkpoint_roundtrip(tmp_path, blocks):
    p = block_path(tmp_path, 3)
    save_block(p, blocks[3], 3, note="x")
    back, header = load_block(p)
    assert header["layer"] == 3 and header["note"] == "x"
    for a, b in zip(back.params(), blocks[3].params()):
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_corruption(tmp_path, dense):
    p = tmp_path / "m.ldmo"
    save_model(p, dense)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(CorruptFileError):
        load_model(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(CorruptFileError):
        load_model(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptFileError):
        load_model(p)


# --- CLI ------------------------------------------------------------------------------------


def test_parse_layers():
    assert parse_layers("3") == [3]
    assert parse_layers("1,4,7") == [1, 4, 7]
    assert parse_layers("2-4") == [2, 3, 4]
    assert parse_layers("0..2,6") == [0, 1, 2, 6]


def test_cli_pipeline(tmp_path, capsys):
    d = tmp_path
    run = lambda *a: main([str(x) for x in a])
    assert run("init-model", "--n-layers", 3, "--d-h", 16, "--d-i", 32, "--n-heads", 2, "--vocab", 40,
               "--seq-len", 16, "--out", d / "dense.ldmo") == 0
    assert run("make-corpus", "--n-seqs", 20, "--seq-len", 16, "--vocab", 40, "--out", d / "c.txt") == 0
    assert run("capture", "--model", d / "dense.ldmo", "--corpus", d / "c.txt", "--layers", "1-2",
               "--out", d / "caps") == 0
    for l in (1, 2):
        assert run("train", "--teacher", d / "dense.ldmo", "--layer", l, "--data", d / f"caps/layer_{l:03d}.ldhs",
                   "--experts", 4, "--steps", 20, "--out", d / f"blocks/layer_{l:03d}.ldmo") == 0
        assert (d / f"blocks/layer_{l:03d}.csv").exists()
    assert run("assemble", "--dense", d / "dense.ldmo", "--blocks-dir", d / "blocks", "--layers", "1,2",
               "--out", d / "moe.ldmo") == 0
    assert run("profile", "--model", d / "moe.ldmo", "--corpus", d / "c.txt", "--out", d / "p.ldpr") == 0
    assert run("decide-policy", "--profile", d / "p.ldpr", "--out", d / "pol.json") == 0
    pols = json.loads((d / "pol.json").read_text())
    assert [r["layer"] for r in pols] == [1, 2]
    assert run("bench", "--model", d / "moe.ldmo", "--corpus", d / "c.txt", "--policy", d / "pol.json",
               "--report", d / "bench.csv") == 0
    row = next(csv.DictReader(open(d / "bench.csv")))
    assert float(row["dense_perplexity"]) > 0 and row["moe_layers"] == "1 2"
    assert run("sweep", "--dense", d / "dense.ldmo", "--blocks-dir", d / "blocks", "--m", "0..2",
               "--corpus", d / "c.txt", "--report", d / "sweep.csv") == 0
    rows = list(csv.DictReader(open(d / "sweep.csv")))
    assert [int(r["m"]) for r in rows] == [0, 1, 2]


def test_cli_reports_errors(tmp_path, capsys):
    assert main(["bench", "--model", str(tmp_path / "missing.ldmo"), "--corpus", "x", "--report", "y"]) == 1
    assert "error:" in capsys.readouterr().err
    (tmp_path / "bad.ldmo").write_bytes(b"junk")
    assert main(["profile", "--model", str(tmp_path / "bad.ldmo"), "--corpus", "x", "--out", "y"]) == 1
