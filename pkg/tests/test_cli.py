import json

import numpy as np
import pytest

from cwnm.cli import main
from cwnm.pruner import read_sparse
from cwnm.tensor import Layout, Tensor, read_tensor, write_tensor


def write_matrix(path, arr):
    write_tensor(Tensor.from_matrix(np.asarray(arr, dtype=np.float32)), path)


def make_model_dir(tmp_path, rng, auto=False):
    """Two-layer model: 3x3 sparse conv then 1x1 dense conv."""
    d = tmp_path / "model"
    d.mkdir()
    cin, mid, cout, hw = 4, 6, 5, 6
    w1 = (0.05 + 0.95 * rng.random((mid, cin * 9))).astype(np.float32)
    write_matrix(d / "w1.cwnm", w1)
    assert main(["prune", "--weights", str(d / "w1.cwnm"), "--out", str(d / "w1.cwsw"),
                 "--sparsity", "0.5", "--tile", "2"]) == 0
    w2 = (0.05 + 0.95 * rng.random((cout, mid))).astype(np.float32)
    write_matrix(d / "w2.cwnm", w2)
    bias = rng.random((1, cout)).astype(np.float32)
    write_tensor(Tensor.from_matrix(bias), d / "b2.cwnm")
    cfg1 = "auto" if auto else {"kind": "columnwise", "t": 2, "lmul": 2}
    cfg2 = "auto" if auto else {"kind": "dense", "t": 5, "lmul": 1}
    manifest = {
        "layers": [
            {"weights": "w1.cwsw", "kernel": [3, 3], "stride": 1, "padding": 1,
             "kernel_config": cfg1},
            {"weights": "w2.cwnm", "bias": "b2.cwnm", "kernel": 1, "stride": 1,
             "padding": 0, "kernel_config": cfg2},
        ]
    }
    (d / "manifest.json").write_text(json.dumps(manifest))
    x = rng.random((1, hw, hw, cin)).astype(np.float32)
    write_tensor(Tensor.from_nhwc(x), d / "input.cwnm")
    return d


def test_prune_reports_half_of_eight(tmp_path, rng, capsys):
    w = rng.standard_normal((4, 16)).astype(np.float32)
    write_matrix(tmp_path / "w.cwnm", w)
    rc = main(["prune", "--weights", str(tmp_path / "w.cwnm"),
               "--out", str(tmp_path / "w.cwsw"), "--sparsity", "0.5",
               "--m", "8", "--tile", "2"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "n=4 m=8" in out
    assert "achieved column sparsity:  0.5000" in out
    sw = read_sparse(tmp_path / "w.cwsw")
    assert (sw.n, sw.m, sw.tile_t) == (4, 8, 2)


def test_prune_three_quarters_of_sixteen(tmp_path, rng, capsys):
    w = rng.standard_normal((2, 16)).astype(np.float32)
    write_matrix(tmp_path / "w.cwnm", w)
    assert main(["prune", "--weights", str(tmp_path / "w.cwnm"),
                 "--out", str(tmp_path / "w.cwsw"), "--sparsity", "0.75",
                 "--m", "16", "--tile", "1"]) == 0
    assert "n=4 m=16" in capsys.readouterr().out


def test_prune_usage_error_n_bigger_than_m(tmp_path, rng, capsys):
    w = rng.standard_normal((2, 8)).astype(np.float32)
    write_matrix(tmp_path / "w.cwnm", w)
    rc = main(["prune", "--weights", str(tmp_path / "w.cwnm"),
               "--out", str(tmp_path / "w.cwsw"), "--n", "5", "--m", "4"])
    assert rc == 2


def test_prune_row_mode(tmp_path, rng):
    w = rng.standard_normal((3, 8)).astype(np.float32)
    write_matrix(tmp_path / "w.cwnm", w)
    assert main(["prune", "--weights", str(tmp_path / "w.cwnm"),
                 "--out", str(tmp_path / "w.cwsw"), "--n", "2", "--m", "4",
                 "--mode", "row"]) == 0
    assert read_sparse(tmp_path / "w.cwsw").tile_t == 1


def test_convert_round_trip(tmp_path, rng):
    t = Tensor.from_nhwc(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
    write_tensor(t, tmp_path / "in.cwnm")
    assert main(["convert", "--input", str(tmp_path / "in.cwnm"),
                 "--out", str(tmp_path / "c.cwnm"), "--layout", "cnhw"]) == 0
    assert main(["convert", "--input", str(tmp_path / "c.cwnm"),
                 "--out", str(tmp_path / "back.cwnm"), "--layout", "nhwc"]) == 0
    back = read_tensor(tmp_path / "back.cwnm")
    assert back.data.tobytes() == t.data.tobytes()


def test_conv_verify_identity(tmp_path, rng, capsys):
    d = tmp_path / "ident"
    d.mkdir()
    write_matrix(d / "w.cwnm", np.eye(3, dtype=np.float32))
    (d / "manifest.json").write_text(json.dumps({
        "layers": [{"weights": "w.cwnm", "kernel": 1,
                    "kernel_config": {"kind": "dense", "t": 3, "lmul": 1}}]
    }))
    x = Tensor.from_nhwc(rng.standard_normal((1, 4, 4, 3)).astype(np.float32))
    write_tensor(x, d / "input.cwnm")
    rc = main(["conv", "--manifest", str(d / "manifest.json"),
               "--input", str(d / "input.cwnm"), "--out", str(d / "out.cwnm"),
               "--threads", "1", "--verify"])
    assert rc == 0
    assert "max relative error vs reference: 0.000e+00" in capsys.readouterr().out
    out = read_tensor(d / "out.cwnm")
    assert out.data.tobytes() == x.data.tobytes()


def test_conv_verify_model(tmp_path, rng, capsys):
    d = make_model_dir(tmp_path, rng)
    rc = main(["conv", "--manifest", str(d / "manifest.json"),
               "--input", str(d / "input.cwnm"), "--out", str(d / "out.cwnm"),
               "--threads", "2", "--verify"])
    assert rc == 0


def test_conv_threads_deterministic(tmp_path, rng):
    d = make_model_dir(tmp_path, rng)
    for threads in ("1", "8"):
        assert main(["conv", "--manifest", str(d / "manifest.json"),
                     "--input", str(d / "input.cwnm"),
                     "--out", str(d / f"out{threads}.cwnm"),
                     "--threads", threads]) == 0
    a = (d / "out1.cwnm").read_bytes()
    b = (d / "out8.cwnm").read_bytes()
    assert a == b


def test_conv_env_var_overrides_threads(tmp_path, rng, monkeypatch, capsys):
    d = make_model_dir(tmp_path, rng)
    monkeypatch.setenv("CWNM_THREADS", "2")
    assert main(["conv", "--manifest", str(d / "manifest.json"),
                 "--input", str(d / "input.cwnm"), "--out", str(d / "out.cwnm"),
                 "--threads", "1"]) == 0
    assert "threads=2" in capsys.readouterr().out


def test_conv_dump_packed(tmp_path, rng):
    d = make_model_dir(tmp_path, rng)
    dump = d / "packed"
    assert main(["conv", "--manifest", str(d / "manifest.json"),
                 "--input", str(d / "input.cwnm"), "--out", str(d / "out.cwnm"),
                 "--threads", "1", "--dump-packed", str(dump)]) == 0
    dumped = sorted(p.name for p in dump.iterdir())
    assert dumped == ["layer0_packed.cwnm", "layer1_packed.cwnm"]
    t = read_tensor(dump / "layer0_packed.cwnm")
    assert len(t.dims) == 2
    # same result as the plain path
    assert main(["conv", "--manifest", str(d / "manifest.json"),
                 "--input", str(d / "input.cwnm"), "--out", str(d / "out2.cwnm"),
                 "--threads", "1"]) == 0
    assert (d / "out.cwnm").read_bytes() == (d / "out2.cwnm").read_bytes()


def test_conv_auto_without_cache_fails(tmp_path, rng):
    d = make_model_dir(tmp_path, rng, auto=True)
    with pytest.raises(Exception, match="tune"):
        main(["conv", "--manifest", str(d / "manifest.json"),
              "--input", str(d / "input.cwnm"), "--out", str(d / "out.cwnm"),
              "--cache", str(d / "cache.jsonl"), "--threads", "1"])


def test_tune_then_conv_auto(tmp_path, rng, capsys):
    d = make_model_dir(tmp_path, rng, auto=True)
    cache = d / "cache.jsonl"
    rc = main(["tune", "--manifest", str(d / "manifest.json"),
               "--input", str(d / "input.cwnm"), "--cache", str(cache),
               "--repeats", "3"])
    assert rc == 0
    assert "tuned 2 layers, reused 0" in capsys.readouterr().out

    # second run reuses every entry
    assert main(["tune", "--manifest", str(d / "manifest.json"),
                 "--input", str(d / "input.cwnm"), "--cache", str(cache),
                 "--repeats", "3"]) == 0
    assert "tuned 0 layers, reused 2" in capsys.readouterr().out

    assert main(["conv", "--manifest", str(d / "manifest.json"),
                 "--input", str(d / "input.cwnm"), "--out", str(d / "out.cwnm"),
                 "--cache", str(cache), "--threads", "1", "--verify"]) == 0


def test_tune_fingerprint_mismatch_retunes(tmp_path, rng, capsys):
    d = make_model_dir(tmp_path, rng, auto=True)
    cache = d / "cache.jsonl"
    assert main(["tune", "--manifest", str(d / "manifest.json"),
                 "--input", str(d / "input.cwnm"), "--cache", str(cache),
                 "--repeats", "3"]) == 0
    capsys.readouterr()
    # rewrite the fingerprints as if another host produced them
    records = [json.loads(l) for l in cache.read_text().splitlines()]
    for rec in records:
        rec["env"]["host"] = "elsewhere"
    cache.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    with pytest.warns(UserWarning, match="retune"):
        assert main(["tune", "--manifest", str(d / "manifest.json"),
                     "--input", str(d / "input.cwnm"), "--cache", str(cache),
                     "--repeats", "3"]) == 0
    assert "tuned 2 layers, reused 0" in capsys.readouterr().out


def tiny_shapes(tmp_path):
    doc = {
        "batch": 1,
        "shapes": [
            {"name": "stage1-conv2", "cin": 8, "cout": 8, "k": 3, "hw": 6,
             "stride": 1, "pad": 1},
            {"name": "stem-conv", "cin": 3, "cout": 8, "k": 7, "hw": 10,
             "stride": 2, "pad": 3},
        ],
    }
    path = tmp_path / "shapes.json"
    path.write_text(json.dumps(doc))
    return path


def test_bench_packing_suite(tmp_path, rng):
    shapes = tiny_shapes(tmp_path)
    out = tmp_path / "packing.json"
    assert main(["bench", "--suite", "packing", "--json", str(out),
                 "--shapes", str(shapes), "--repeats", "3"]) == 0
    doc = json.loads(out.read_text())
    assert doc["report_version"] == 1
    rows = doc["rows"]
    # 2 k>1 cases x 4 lmuls x 2 variants
    assert len(rows) == 16
    by_case = {}
    for row in rows:
        key = (row["case"], row["config"]["lmul"])
        by_case.setdefault(key, {})[row["config"]["variant"]] = row
    for (case, lmul), pair in by_case.items():
        assert pair["fused"]["counters"]["source_elem_reads"] < \
            pair["separate"]["counters"]["source_elem_reads"]


def test_bench_kernels_suite_row_count(tmp_path):
    out = tmp_path / "kernels.json"
    assert main(["bench", "--suite", "kernels", "--json", str(out),
                 "--repeats", "3"]) == 0
    doc = json.loads(out.read_text())
    legal = 31 + 15 + 7 + 3
    assert len(doc["rows"]) == 4 * legal * 2  # kinds x legal configs x cases
    lmuls = {r["config"]["lmul"] for r in doc["rows"]}
    assert lmuls == {1, 2, 4, 8}
    # report rows expose the t-fold data-traffic gap between the schedules
    loads = {}
    for r in doc["rows"]:
        key = (r["case"], r["config"]["t"], r["config"]["lmul"])
        loads.setdefault(key, {})[r["config"]["kind"]] = \
            r["counters"]["data_elem_loads"]
    for (case, t, lmul), kinds in loads.items():
        assert kinds["inner_nm"] == t * kinds["columnwise"], (case, t, lmul)
        if t == 8:
            assert kinds["inner_nm"] / kinds["columnwise"] == 8.0


def test_bench_stage_suite_small(tmp_path):
    shapes = tiny_shapes(tmp_path)
    out = tmp_path / "stage.json"
    assert main(["bench", "--suite", "stage-shapes", "--json", str(out),
                 "--shapes", str(shapes), "--repeats", "3"]) == 0
    doc = json.loads(out.read_text())
    names = [r["case"] for r in doc["rows"]]
    assert "stage1-conv2-layout-nhwc-to-cnhw" in names
    kinds = [r["config"].get("kind") for r in doc["rows"] if r["config"]]
    assert "columnwise" in kinds and "inner_nm" in kinds
