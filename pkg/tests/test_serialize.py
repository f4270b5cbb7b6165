import json
import struct

import numpy as np
import pytest

from survfuse.exceptions import IncompatibleModel
from survfuse.fusion import FusionSpec, ModalitySpec, build_mfh, build_single_mlp
from survfuse.serialize import FORMAT_VERSION, MAGIC, ModelFile, load_model, save_model, spec_hash


def neural_model(seed=0):
    g = build_mfh(ModalitySpec("A", 3), ModalitySpec("B", 2), l=4)
    p = g.init_params(seed)
    return g, ModelFile(g.spec, p.arrays, {"fold": 2, "note": "x"}, g.spec_hash())


def test_round_trip_neural(tmp_path):
    g, mf = neural_model()
    save_model(tmp_path / "m.sfm", mf)
    back = load_model(tmp_path / "m.sfm")
    assert back.spec == g.spec and back.graph_hash == g.spec_hash()
    assert back.metadata == {"fold": 2, "note": "x"}
    assert list(back.arrays) == list(mf.arrays)
    for k in mf.arrays:
        assert np.array_equal(back.arrays[k], mf.arrays[k])


def test_round_trip_linear(tmp_path):
    spec = FusionSpec("LATE_LINEAR", [ModalitySpec("A", 2), ModalitySpec("B", 3)])
    arrays = {"A.beta": [0.5, -1.0], "A.center": [0, 0], "A.scale": [1, 2],
              "B.beta": [0, 0, 1e-300], "B.center": [1, 2, 3], "B.scale": [1, 1, 0]}
    save_model(tmp_path / "lin.sfm", ModelFile(spec, arrays))
    back = load_model(tmp_path / "lin.sfm")
    assert back.arrays["B.beta"][2] == 1e-300
    assert back.graph_hash == spec_hash(spec, {k: (len(v),) for k, v in arrays.items()})


def test_layout(tmp_path):
    _, mf = neural_model()
    save_model(tmp_path / "m.sfm", mf)
    data = (tmp_path / "m.sfm").read_bytes()
    assert data[:8] == MAGIC
    version, hlen = struct.unpack("<II", data[8:16])
    assert version == FORMAT_VERSION
    header = json.loads(data[16:16 + hlen])
    assert [p["name"] for p in header["params"]] == list(mf.arrays)
    first = header["params"][0]
    n = int(np.prod(first["shape"]))
    values = np.frombuffer(data[16 + hlen:16 + hlen + 8 * n], "<f8")
    assert np.array_equal(values, mf.arrays[first["name"]].ravel())
    assert len(data) == 16 + hlen + 8 * sum(a.size for a in mf.arrays.values())


def test_save_is_deterministic(tmp_path):
    _, mf = neural_model()
    save_model(tmp_path / "a.sfm", mf)
    save_model(tmp_path / "b.sfm", mf)
    assert (tmp_path / "a.sfm").read_bytes() == (tmp_path / "b.sfm").read_bytes()


def _corrupt(tmp_path, mutate):
    _, mf = neural_model()
    path = tmp_path / "m.sfm"
    save_model(path, mf)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(IncompatibleModel):
        load_model(path)


def test_bad_magic(tmp_path):
    _corrupt(tmp_path, lambda d: b"NOTMODEL" + d[8:])


def test_unknown_version(tmp_path):
    _corrupt(tmp_path, lambda d: d[:8] + struct.pack("<I", 99) + d[12:])


def test_truncated(tmp_path):
    _corrupt(tmp_path, lambda d: d[:-8])
    _corrupt(tmp_path, lambda d: d[:12])


def test_trailing_bytes(tmp_path):
    _corrupt(tmp_path, lambda d: d + b"\0" * 8)


def test_hash_mismatch(tmp_path):
    def swap_hash(d):
        hlen = struct.unpack("<I", d[12:16])[0]
        header = json.loads(d[16:16 + hlen])
        header["graph_hash"] = "0" * 64
        blob = json.dumps(header, sort_keys=True).encode()
        return d[:12] + struct.pack("<I", len(blob)) + blob + d[16 + hlen:]
    _corrupt(tmp_path, swap_hash)


def test_hash_matches_graph():
    g = build_single_mlp(ModalitySpec("PYRAD"))
    assert spec_hash(g.spec, g.param_shapes) == g.spec_hash()
