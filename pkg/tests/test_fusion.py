import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survfuse.exceptions import LengthMismatch, RowCountMismatch
from survfuse.fusion import (FusionSpec, ModalitySpec, build_block, build_concat_mlp, build_graph, build_if,
                             build_lf_mlp, build_mfh, build_single_mlp, build_sum, early_fuse, encoder_dims,
                             late_fuse_risks, rank_standardize)
from survfuse.nn.training import finite_difference_check, forward, predict
from survfuse.survival import SurvivalDataset, concordance_index

GEN, PYRAD, DN = ModalitySpec("GEN"), ModalitySpec("PYRAD"), ModalitySpec("DN")


def dense(i, o):
    return i * o + o


def enc_count(m):
    dims = encoder_dims(m)
    return sum(dense(a, b) for a, b in zip(dims, dims[1:]))


def relu(x):
    return np.maximum(x, 0.0)


# ------------------------------------------------------------------ specs


def test_modality_defaults():
    assert (GEN.dim, PYRAD.dim, DN.dim) == (500, 107, 1024)
    with pytest.raises(ValueError):
        ModalitySpec("CUSTOM")
    with pytest.raises(ValueError):
        ModalitySpec("X", 0)


def test_encoder_layouts():
    assert encoder_dims(GEN) == [500, 256, 64]
    assert encoder_dims(DN) == [1024, 256, 64]
    assert encoder_dims(PYRAD) == [107, 64]
    assert encoder_dims(ModalitySpec("X", 8)) == [8, 64]


@pytest.mark.parametrize("kind, n, ok", [
    ("SINGLE_MLP", 1, True), ("SINGLE_MLP", 2, False), ("IF", 2, True), ("IF", 1, False), ("MFH", 3, False),
    ("EARLY_LINEAR", 2, True), ("EARLY_LINEAR", 3, True), ("LATE_LINEAR", 1, False), ("COX", 1, True),
])
def test_spec_arity(kind, n, ok):
    mods = ["GEN", "PYRAD", "DN"][:n]
    if ok:
        assert FusionSpec(kind, mods).modalities[0] == GEN
    else:
        with pytest.raises(ValueError):
            FusionSpec(kind, mods)


def test_spec_rejects_duplicates_and_unknown_kinds():
    with pytest.raises(ValueError):
        FusionSpec("IF", ["GEN", "GEN"])
    with pytest.raises(ValueError):
        FusionSpec("TRANSFORMER", ["GEN", "PYRAD"])
    with pytest.raises(ValueError):
        FusionSpec("MFH", ["GEN", "PYRAD"], l=0)


def test_spec_dict_round_trip():
    spec = FusionSpec("BLOCK", [GEN, ModalitySpec("X", 7)], R=3, b=2, c=5, dropout=0.1)
    assert FusionSpec.from_dict(spec.to_dict()) == spec


# ------------------------------------------------------------------ parameter counts


def test_single_mlp_gen_count():
    # 500->256, 256->64, 64->1, each with biases
    assert build_single_mlp(GEN).n_params == (500 * 256 + 256) + (256 * 64 + 64) + (64 * 1 + 1) == 144_769


def test_single_mlp_layouts():
    g = build_single_mlp(PYRAD)
    assert g.param_shapes == {"enc_PYRAD.0.weight": (64, 107), "enc_PYRAD.0.bias": (64,),
                              "head.weight": (1, 64), "head.bias": (1,)}
    assert build_single_mlp(ModalitySpec("X", 8)).param_shapes["enc_X.0.weight"] == (64, 8)


@pytest.mark.parametrize("x, y", [(GEN, PYRAD), (GEN, DN), (PYRAD, DN)])
def test_closed_form_counts(x, y):
    e = enc_count(x) + enc_count(y)
    assert build_if(x, y).n_params == e + dense(128, 64) + dense(64, 1)
    assert build_concat_mlp(x, y).n_params == build_if(x, y).n_params
    assert build_sum(x, y).n_params == e + dense(64, 64) + dense(64, 1)
    assert build_lf_mlp(x, y).n_params == e + 2 * dense(64, 1) + dense(2, 1)
    assert build_mfh(x, y).n_params == e + 4 * dense(64, 1200) + dense(2400, 64) + dense(64, 1)
    R, b, c = 15, 4, 8
    assert build_block(x, y).n_params == e + R * (2 * 64 * b + b * b * c + 64 * c) + dense(64, 1)


def test_block_default_size_below_ten_if_baselines():
    assert build_block(GEN, PYRAD).n_params < 10 * build_if(GEN, PYRAD).n_params


def test_kind_specific_shapes():
    assert build_if(GEN, PYRAD).param_shapes["fuse.weight"] == (64, 128)
    assert build_mfh(GEN, PYRAD).param_shapes["fuse.weight"] == (64, 2400)
    assert build_mfh(GEN, PYRAD).param_shapes["mfh.proj2.weight"] == (1200, 64)
    shapes = build_block(GEN, PYRAD).param_shapes
    assert shapes["block.X"] == (15, 64, 4) and shapes["block.D"] == (15, 4, 4, 8) and shapes["block.T"] == (15, 64, 8)
    lf = build_lf_mlp(GEN, DN).param_shapes
    assert lf["head_GEN.weight"] == (1, 64) and lf["head_DN.weight"] == (1, 64) and lf["combine.weight"] == (1, 2)


@pytest.mark.parametrize("kind", ["SINGLE_MLP", "IF", "CONCAT_MLP", "SUM", "LF_MLP", "MFH", "BLOCK"])
def test_build_graph_dispatch_and_output_shape(kind):
    mods = [ModalitySpec("A", 5), ModalitySpec("B", 3)][: 1 if kind == "SINGLE_MLP" else 2]
    spec = FusionSpec(kind, mods, l=6, R=2)
    g = build_graph(spec)
    assert (g.spec.kind, g.spec.modalities) == (spec.kind, spec.modalities)
    x = {m.name: np.ones((4, m.dim)) for m in mods}
    out, _ = forward(g, g.init_params(0), x)
    assert out.shape == (4, 1)
    assert np.all(predict(g, g.zero_params(), x) == 0)


def test_linear_kinds_have_no_graph():
    with pytest.raises(ValueError):
        build_graph(FusionSpec("EARLY_LINEAR", ["GEN", "PYRAD"]))


def test_spec_hash_tracks_shapes():
    a, b = build_mfh(GEN, PYRAD, l=10), build_mfh(GEN, PYRAD, l=11)
    assert a.spec_hash() != b.spec_hash()
    assert a.spec_hash() == build_mfh(GEN, PYRAD, l=10).spec_hash()


# ------------------------------------------------------------------ hand-checked behaviour


def _x_y(seed=0, n=5):
    rng = np.random.default_rng(seed)
    return {"A": rng.normal(size=(n, 3)), "B": rng.normal(size=(n, 4))}


A3, B4 = ModalitySpec("A", 3), ModalitySpec("B", 4)


def test_if_swap_with_permuted_parameters():
    g1, g2 = build_if(A3, B4), build_if(B4, A3)
    p1 = g1.init_params(3)
    p2 = g2.zero_params()
    for name in p1:
        p2.arrays[name][...] = p1[name]
    W = p1["fuse.weight"]
    p2.arrays["fuse.weight"][...] = np.concatenate([W[:, 64:], W[:, :64]], axis=1)
    x = _x_y()
    np.testing.assert_allclose(predict(g1, p1, x), predict(g2, p2, x), rtol=1e-13, atol=1e-14)


def test_lf_mlp_mean_of_heads():
    g = build_lf_mlp(A3, B4, dropout=0.0)
    p = g.init_params(4)
    p.arrays["combine.weight"][...] = [[0.5, 0.5]]
    p.arrays["combine.bias"][...] = 0.0
    x = _x_y()
    heads = []
    for name in ("A", "B"):
        h = relu(x[name] @ p[f"enc_{name}.0.weight"].T + p[f"enc_{name}.0.bias"])
        heads.append(h @ p[f"head_{name}.weight"][0] + p[f"head_{name}.bias"][0])
    np.testing.assert_allclose(predict(g, p, x), (heads[0] + heads[1]) / 2, rtol=1e-12)
    # silencing one head leaves only the other modality in play
    p.arrays["head_B.weight"][...] = 0.0
    x2 = dict(x, B=x["B"] * 7 + 1)
    np.testing.assert_array_equal(predict(g, p, x), predict(g, p, x2))


def test_mfh_gating_by_zero_projection():
    g = build_mfh(A3, B4, l=5)
    p = g.init_params(5)
    p.arrays["mfh.proj2.weight"][...] = 0.0
    p.arrays["mfh.proj2.bias"][...] = 0.0
    x = _x_y()
    out = relu(p["fuse.bias"]) @ p["head.weight"][0] + p["head.bias"][0]
    np.testing.assert_allclose(predict(g, p, x), np.full(5, out), rtol=1e-13)


def test_mfh_scalar_products_by_hand():
    a, b, c, d = 0.7, 1.3, 2.0, 0.4
    g = build_mfh(A3, B4, l=1, dropout=0.0)
    p = g.zero_params()
    for i, v in enumerate((a, b, c, d), start=1):
        p.arrays[f"mfh.proj{i}.bias"][...] = v  # zero weights: each projection outputs its bias
    p.arrays["fuse.weight"][0, 0] = 1.0
    p.arrays["fuse.weight"][1, 1] = 1.0
    p.arrays["head.weight"][0, :2] = [1.0, 1000.0]
    out, tape = forward(g, p, _x_y())
    concat = [n for n in tape.nodes if n.value.shape == (5, 2)][-1]
    np.testing.assert_allclose(concat.value, np.tile([a * b, a * b * c * d], (5, 1)), rtol=1e-15)
    np.testing.assert_allclose(out.value[:, 0], a * b + 1000 * a * b * c * d, rtol=1e-14)


def test_block_zero_cores():
    g = build_block(A3, B4, R=3)
    p = g.init_params(6)
    p.arrays["block.D"][...] = 0.0
    x = _x_y()
    np.testing.assert_allclose(predict(g, p, x), np.full(5, p["head.bias"][0]))


def test_block_scalar_contraction_by_hand():
    g = build_block(A3, B4, R=1, b=1, c=1, dropout=0.0)
    p = g.init_params(7)
    x = _x_y()
    hx = relu(x["A"] @ p["enc_A.0.weight"].T + p["enc_A.0.bias"])
    hy = relu(x["B"] @ p["enc_B.0.weight"].T + p["enc_B.0.bias"])
    xv, yv, tv = p["block.X"][0, :, 0], p["block.Y"][0, :, 0], p["block.T"][0, :, 0]
    dv = p["block.D"][0, 0, 0, 0]
    fused = relu(np.outer(dv * (hx @ xv) * (hy @ yv), tv))
    expected = fused @ p["head.weight"][0] + p["head.bias"][0]
    np.testing.assert_allclose(predict(g, p, x), expected, rtol=1e-12)


def test_block_defaults():
    spec = build_block(GEN, PYRAD).spec
    assert (spec.R, spec.b, spec.c) == (15, 4, 8)
    assert build_mfh(GEN, PYRAD).spec.l == 1200


def test_sum_identity_and_symmetry():
    A, B = ModalitySpec("A", 3), ModalitySpec("B", 3)
    g = build_sum(A, B, dropout=0.0)
    p = g.init_params(8)
    rng = np.random.default_rng(9)
    x = {"A": rng.normal(size=(6, 3)), "B": rng.normal(size=(6, 3))}
    # shared encoder weights make the sum symmetric in its inputs
    p.arrays["enc_B.0.weight"][...] = p["enc_A.0.weight"]
    p.arrays["enc_B.0.bias"][...] = p["enc_A.0.bias"]
    np.testing.assert_allclose(predict(g, p, x), predict(g, p, {"A": x["B"], "B": x["A"]}), rtol=1e-13)
    # with the second encoding forced to zero only the first remains
    p.arrays["enc_B.0.weight"][...] = 0.0
    p.arrays["enc_B.0.bias"][...] = 0.0
    hx = relu(x["A"] @ p["enc_A.0.weight"].T + p["enc_A.0.bias"])
    z = relu(hx @ p["fuse.weight"].T + p["fuse.bias"])
    np.testing.assert_allclose(predict(g, p, x), z @ p["head.weight"][0] + p["head.bias"][0], rtol=1e-12)


def test_concat_mlp_matches_if():
    a, b = build_if(A3, B4), build_concat_mlp(A3, B4)
    assert a.param_shapes == b.param_shapes
    p = a.init_params(10)
    np.testing.assert_array_equal(predict(a, p, _x_y()), predict(b, p, _x_y()))


@pytest.mark.parametrize("make", [
    lambda: build_sum(A3, ModalitySpec("B", 3)), lambda: build_concat_mlp(A3, B4), lambda: build_mfh(A3, B4, l=20),
])
def test_graphs_pass_gradient_check(make):
    g = make()
    rng = np.random.default_rng(11)
    x = {m: rng.normal(size=(8, d)) for m, d in g.input_dims.items()}
    e = rng.random(8) < 0.6
    e[0] = True
    d = SurvivalDataset(e, rng.exponential(size=8) + 0.1)
    for loss in ("RANKING", "COX_NPLL"):
        assert finite_difference_check(g, g.init_params(rng), x, d, loss) <= 1e-4


# ------------------------------------------------------------------ linear fusion helpers


def test_early_fuse_dims():
    n = 4
    fused, prov = early_fuse([np.zeros((n, 500)), np.zeros((n, 107))])
    assert fused.shape == (n, 607)
    fused, _ = early_fuse([np.zeros((n, 500)), np.zeros((n, 107)), np.zeros((n, 1024))])
    assert fused.shape == (n, 1631)
    X = np.arange(12.0).reshape(4, 3)
    single, prov = early_fuse([X])
    assert np.array_equal(single, X) and prov == {0: slice(0, 3)}
    with pytest.raises(RowCountMismatch):
        early_fuse([np.zeros((3, 2)), np.zeros((4, 2))])


@settings(max_examples=30)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(1, 5), st.integers(0, 1000))
def test_early_fuse_provenance_round_trip(widths, n, seed):
    rng = np.random.default_rng(seed)
    mats = {f"m{k}": rng.normal(size=(n, w)) for k, w in enumerate(widths)}
    fused, prov = early_fuse(mats)
    for name, X in mats.items():
        assert np.array_equal(fused[:, prov[name]], X)


def test_late_fuse_examples():
    r = np.array([0.3, -1.0, 2.5, 0.0])
    assert np.array_equal(np.argsort(late_fuse_risks([r, r])), np.argsort(r))
    assert np.all(late_fuse_risks([[1, 2, 3, 4], [4, 3, 2, 1]]) == 0.5)
    out = late_fuse_risks([[1, 2, 3], [10, 20, 30]])
    assert out.tolist() == [0.0, 0.5, 1.0]
    assert late_fuse_risks([[1, 2, 3], [3, 2, 1]], weights=[3, 1]).tolist() == [0.25, 0.5, 0.75]
    with pytest.raises(LengthMismatch):
        late_fuse_risks([[1, 2], [1, 2, 3]])


def test_rank_standardize():
    assert rank_standardize([5.0, 1.0, 5.0]).tolist() == [0.75, 0.0, 0.75]
    assert rank_standardize([2.0]).tolist() == [0.5]


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.sampled_from([np.exp, np.arctan, lambda v: v ** 3, lambda v: 10 * v - 3]))
def test_late_fuse_monotone_invariance(seed, g):
    rng = np.random.default_rng(seed)
    risks = [rng.normal(size=12).round(1) for _ in range(3)]
    base = late_fuse_risks(risks)
    k = seed % 3
    moved = late_fuse_risks([g(r) if i == k else r for i, r in enumerate(risks)])
    np.testing.assert_allclose(moved, base, atol=1e-15)


def test_late_fuse_keeps_cindex_of_identical_inputs():
    rng = np.random.default_rng(12)
    d = SurvivalDataset(rng.random(30) < 0.6, rng.exponential(size=30) + 0.1)
    r = rng.normal(size=30)
    assert concordance_index(d, late_fuse_risks([r, 5 * r])).c_index == concordance_index(d, r).c_index
