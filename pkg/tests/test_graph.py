"""Graph IR: validation, shape inference, execution and the model file format."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ispforge import ops, zoo
from ispforge.errors import ChecksumError, FormatError, SchemaError, ShapeError
from ispforge.graph import GraphBuilder, GraphModel, Node, execute, output_shapes, run, validate
from ispforge.serialize import load, load_tensor, save, save_tensor, weights_path


def _conv_w(rng, co, ci, k=3):
    return {"weight": rng.standard_normal((co, ci, k, k)).astype(np.float32) * 0.3,
            "bias": rng.standard_normal(co).astype(np.float32) * 0.1}


class TestShapes:
    def test_smallnet_full_hd(self):
        m = zoo.build_smallnet12(0)
        assert output_shapes(m, {"raw": (1, 4, 272, 480)})["rgb"] == (1, 3, 544, 960)

    def test_passthrough_graph(self):
        m = GraphModel([], {"x": (1, 2, 3, 3)}, {"y": ("x", 0)}, {})
        assert output_shapes(m)["y"] == (1, 2, 3, 3)
        x = np.ones((1, 2, 3, 3), np.float32)
        assert np.array_equal(run(m, x), x)

    def test_stride2(self, rng):
        b = GraphBuilder("s2", {"x": (1, 4, 256, 256)})
        c = b.add("conv2d", ["x"], {"stride": 2, "padding": 1}, _conv_w(rng, 8, 4))
        assert output_shapes(b.build({"y": c}))["y"] == (1, 8, 128, 128)

    def test_conflict_names_both_nodes(self, rng):
        b = GraphBuilder("bad", {"x": (1, 4, 8, 8)})
        a = b.add("conv2d", ["x"], weights=_conv_w(rng, 6, 4))
        c = b.add("conv2d", ["x"], weights=_conv_w(rng, 5, 4))
        s = b.add("branch_add", [a, c])
        with pytest.raises(ShapeError) as err:
            b.build({"y": s})
        msg = str(err.value)
        assert "conv2d1" in msg and "conv2d2" in msg and "6" in msg and "5" in msg

    def test_bad_weight_shape(self, rng):
        b = GraphBuilder("bad", {"x": (1, 4, 8, 8)})
        n = b.add("dense", [b.add("global_avg_pool", ["x"])], weights={"weight": np.ones((3, 5))})
        with pytest.raises(ShapeError):
            b.build({"y": n})


class TestValidation:
    def test_unknown_kind(self):
        m = GraphModel([Node("a", "warp", [("x", 0)])], {"x": (1, 1, 2, 2)}, {"y": ("a", 0)}, {})
        with pytest.raises(SchemaError, match="warp"):
            validate(m)

    def test_cycle(self):
        nodes = [Node("a", "relu", [("b", 0)]), Node("b", "relu", [("a", 0)])]
        with pytest.raises(SchemaError, match="cycle"):
            validate(GraphModel(nodes, {"x": (1, 1, 2, 2)}, {"y": ("a", 0)}, {}))

    def test_duplicate_ids(self):
        nodes = [Node("a", "relu", [("x", 0)]), Node("a", "relu", [("x", 0)])]
        with pytest.raises(SchemaError, match="duplicate"):
            validate(GraphModel(nodes, {"x": (1, 1, 2, 2)}, {"y": ("a", 0)}, {}))

    def test_dangling_weight(self):
        n = Node("c", "conv2d", [("x", 0)], {}, {"weight": "missing"})
        with pytest.raises(SchemaError, match="dangling"):
            validate(GraphModel([n], {"x": (1, 1, 2, 2)}, {"y": ("c", 0)}, {}))

    def test_bad_attr(self):
        b = GraphBuilder("x", {"x": (1, 4, 4, 4)})
        with pytest.raises(SchemaError):
            b.add("relu", ["x"], {"alpha": 0.1})

    def test_out_of_order_nodes_are_sorted(self):
        nodes = [Node("b", "relu", [("a", 0)]), Node("a", "tanh", [("x", 0)])]
        m = GraphModel(nodes, {"x": (1, 1, 2, 2)}, {"y": ("b", 0)}, {})
        x = -np.ones((1, 1, 2, 2), np.float32)
        assert np.array_equal(run(m, x), ops.relu(ops.tanh(x)))


class TestExecute:
    def test_single_relu(self, rng):
        b = GraphBuilder("r", {"x": (1, 2, 3, 3)})
        m = b.build({"y": b.add("relu", ["x"])})
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        assert np.array_equal(run(m, x), ops.relu(x))

    def test_parallel_branches(self, rng):
        b = GraphBuilder("p", {"x": (1, 3, 6, 6)})
        w1, w2 = _conv_w(rng, 4, 3), _conv_w(rng, 4, 3, 1)
        s = b.add("branch_add", [b.add("conv2d", ["x"], weights=w1), b.add("conv2d", ["x"], weights=w2)])
        m = b.build({"y": s})
        x = rng.random((1, 3, 6, 6), dtype=np.float32)
        ref = ops.conv2d(x, ops.ConvSpec(w1["weight"], w1["bias"])) + ops.conv2d(x, ops.ConvSpec(w2["weight"], w2["bias"]))
        np.testing.assert_allclose(run(m, x), ref, atol=1e-6)

    def test_deterministic(self, rng):
        m = zoo.build_ereopnet(0, 16)
        x = rng.random((1, 4, 8, 8), dtype=np.float32)
        assert run(m, x).tobytes() == run(m, x).tobytes()
        assert run(m, x, threads=3).tobytes() == run(m, x).tobytes()

    def test_missing_input(self):
        m = zoo.build_smallnet12(0, 16)
        with pytest.raises(ShapeError):
            execute(m, {"other": np.ones((1, 4, 8, 8), np.float32)})

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            run(zoo.build_smallnet12(0, 16), np.ones((1, 3, 8, 8), np.float32))

    def test_multi_output_slots(self, rng):
        b = GraphBuilder("d", {"x": (1, 2, 4, 4)})
        b.add("haar_dwt", ["x"], name="dwt")
        m = b.build({"ll": ("dwt", 0), "hh": ("dwt", 3)})
        x = rng.random((1, 2, 4, 4), dtype=np.float32)
        out = execute(m, x)
        ref = ops.haar_dwt(x)
        assert np.array_equal(out["ll"], ref[0]) and np.array_equal(out["hh"], ref[3])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["relu", "tanh", "sigmoid", "conv", "add", "mul"]),
                              st.integers(0, 100), st.integers(0, 100)), min_size=1, max_size=8),
           st.integers(0, 2 ** 31))
    def test_random_dag_matches_hand_composition(self, plan, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
        b = GraphBuilder("dag", {"x": (1, 3, 5, 5)})
        ids, vals = ["x"], [x]
        for kind, i, j in plan:
            a, c = i % len(ids), j % len(ids)
            if kind == "conv":
                w = _conv_w(rng, 3, 3)
                ids.append(b.add("conv2d", [ids[a]], weights=w))
                vals.append(ops.conv2d(vals[a], ops.ConvSpec(w["weight"], w["bias"])))
            elif kind == "add":
                ids.append(b.add("branch_add", [ids[a], ids[c]]))
                vals.append(ops.add(vals[a], vals[c]))
            elif kind == "mul":
                ids.append(b.add("multiply", [ids[a], ids[c]]))
                vals.append(ops.multiply(vals[a], vals[c]))
            else:
                ids.append(b.add(kind, [ids[a]]))
                vals.append(getattr(ops, kind)(vals[a]))
        m = b.build({"y": ids[-1]})
        assert np.array_equal(run(m, x), vals[-1])


class TestSerialize:
    @pytest.mark.parametrize("name", sorted(zoo.ZOO))
    def test_round_trip(self, tmp_path, name):
        m = zoo.build(name, seed=3, size=16)
        path = save(m, tmp_path / "m.ispm")
        back = load(path)
        assert [(n.id, n.kind, list(map(tuple, n.inputs)), n.weights) for n in back.nodes] == \
               [(n.id, n.kind, list(map(tuple, n.inputs)), n.weights) for n in m.nodes]
        assert back.inputs == m.inputs and back.outputs == m.outputs
        for k in m.weights:
            assert back.weights[k].tobytes() == m.weights[k].astype("<f4").tobytes()
        x = np.random.default_rng(0).random((1, 4, 8, 8), dtype=np.float32)
        assert run(back, x).tobytes() == run(m, x).tobytes()

    def test_manifest_is_versioned_text(self, tmp_path):
        path = save(zoo.build_smallnet12(0, 16), tmp_path / "m.ispm")
        manifest = json.loads(path.read_text())
        assert manifest["format"] == "ispforge-model/1"
        assert all(len(w["checksum"]) == 16 for w in manifest["weights"])
        assert weights_path(path).exists()

    def test_save_is_deterministic(self, tmp_path):
        m = zoo.build_smallnet12(0, 16)
        a, b = save(m, tmp_path / "a.ispm"), save(m, tmp_path / "b.ispm")
        assert weights_path(a).read_bytes() == weights_path(b).read_bytes()
        assert a.read_text().replace("a.ispw", "b.ispw") == b.read_text()

    def test_truncated_blob(self, tmp_path):
        path = save(zoo.build_smallnet12(0, 16), tmp_path / "m.ispm")
        blob = weights_path(path)
        blob.write_bytes(blob.read_bytes()[:-10])
        with pytest.raises(ChecksumError):
            load(path)

    def test_flipped_byte(self, tmp_path):
        path = save(zoo.build_smallnet12(0, 16), tmp_path / "m.ispm")
        blob = weights_path(path)
        data = bytearray(blob.read_bytes())
        data[5] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            load(path)

    def test_version_mismatch(self, tmp_path):
        path = save(zoo.build_smallnet12(0, 16), tmp_path / "m.ispm")
        manifest = json.loads(path.read_text())
        manifest["format"] = "ispforge-model/2"
        path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError, match="ispforge-model/2"):
            load(path)

    def test_unknown_kind_in_manifest(self, tmp_path):
        path = save(zoo.build_smallnet12(0, 16), tmp_path / "m.ispm")
        manifest = json.loads(path.read_text())
        manifest["nodes"][1]["kind"] = "hyperconv"
        path.write_text(json.dumps(manifest))
        with pytest.raises(SchemaError, match="hyperconv"):
            load(path)

    def test_dangling_ref_in_manifest(self, tmp_path):
        path = save(zoo.build_smallnet12(0, 16), tmp_path / "m.ispm")
        manifest = json.loads(path.read_text())
        manifest["nodes"][0]["weights"]["weight"] = "nowhere"
        path.write_text(json.dumps(manifest))
        with pytest.raises(SchemaError, match="dangling"):
            load(path)

    def test_garbage_manifest(self, tmp_path):
        p = tmp_path / "m.ispm"
        p.write_text("not json")
        with pytest.raises(FormatError):
            load(p)

    def test_tensor_blob(self, tmp_path, rng):
        x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        save_tensor(tmp_path / "t.bin", x)
        assert (tmp_path / "t.bin").read_bytes() == x.astype("<f4").tobytes()
        assert "dims: 2 3 4 5" in (tmp_path / "t.bin.hdr").read_text()
        assert np.array_equal(load_tensor(tmp_path / "t.bin"), x)
