import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dndrec import kernels
from dndrec.dataset import Sample, pad_batch
from dndrec.errors import ContractError, FormatError, StaleIndexError, UnsupportedDecoderError
from dndrec.retrieval import (CandidateIndex, augment, build_mips_index, load_index,
                              precompute_candidates, recommend, save_index, topl_exact,
                              topl_indexed)

from conftest import toy_batch, toy_model

BACKENDS = [kernels.fallback]
if kernels.BACKEND == "compiled":
    BACKENDS.append(kernels)


def oracle_topl(matrix, q, L):
    scores = matrix @ q
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:L]
    return np.array(order), scores[order]


# --------------------------------------------------------------- candidates


def test_linear_precompute_is_table_without_pad():
    model = toy_model("gru4rec", "linear")
    index = precompute_candidates(model)
    assert np.array_equal(index.matrix, model.input_table.data[:-1])
    assert index.num_items == model.num_items


def test_decoupled_precompute_matches_forward():
    model = toy_model("narm", "decoupled")
    index = precompute_candidates(model)
    batch = toy_batch()
    logits = model.session_vectors(batch) @ index.matrix.T
    ref = model.score(batch)
    got = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_precompute_deterministic_hash():
    model = toy_model("gru4rec", "decoupled")
    assert precompute_candidates(model).matrix_hash() == precompute_candidates(model).matrix_hash()


@pytest.mark.parametrize("decoder", ["mlp", "mos"])
def test_precompute_rejects_nonlinear(decoder):
    with pytest.raises(UnsupportedDecoderError):
        precompute_candidates(toy_model("gru4rec", decoder))


# -------------------------------------------------------------------- top-L


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__)
def test_topl_full_ranking_when_L_large(backend, rng):
    M = rng.normal(size=(7, 3))
    q = rng.normal(size=3)
    res = topl_exact(q, M, 50, backend)
    ids, vals = oracle_topl(M, q, 7)
    assert res.items.tolist() == ids.tolist()
    assert np.array_equal(res.scores, vals)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__)
def test_topl_ties_by_id(backend):
    res = topl_exact(np.ones(2), np.ones((6, 2)), 3, backend)
    assert res.items.tolist() == [0, 1, 2]


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__)
def test_topl_one_hot_query(backend, rng):
    M = rng.normal(size=(40, 5))
    q = np.eye(5)[2]
    res = topl_exact(q, M, 1, backend)
    assert res.items[0] == int(np.argmax(M[:, 2]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=60), st.integers(1, 70))
def test_topl_select_matches_sort_oracle(scores, L):
    arr = np.array(scores, dtype=np.float64)
    order = sorted(range(len(arr)), key=lambda i: (-arr[i], i))[:L]
    for backend in BACKENDS:
        ids, vals = backend.topl_select(arr, L)
        assert ids.tolist() == order
        assert vals.tolist() == arr[order].tolist()


def test_topl_rejects_bad_L(rng):
    with pytest.raises(ContractError):
        topl_exact(np.ones(2), np.ones((3, 2)), 0)


def test_topl_result_json(rng):
    res = topl_exact(rng.normal(size=3), rng.normal(size=(10, 3)), 4)
    out = res.to_json()
    assert len(out) == 4 and set(out[0]) == {"item", "score"}
    assert all(a["score"] >= b["score"] for a, b in zip(out, out[1:]))


# -------------------------------------------------------------- MIPS graph


def test_augmented_norms_equal(rng):
    M = rng.normal(size=(100, 6)) * rng.uniform(0.1, 3, size=(100, 1))
    aug, top = augment(M)
    np.testing.assert_allclose(np.linalg.norm(aug, axis=1), top, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_augmentation_turns_mips_into_nn(seed):
    g = np.random.default_rng(seed)
    M = g.normal(size=(30, 4)) * g.uniform(0.1, 3, size=(30, 1))
    q = g.normal(size=4)
    aug, _ = augment(M)
    qa = np.append(q, 0.0)
    dist = ((aug - qa) ** 2).sum(axis=1)
    assert np.argmin(dist) == np.argmax(M @ q)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__)
def test_single_item_index(backend):
    index = build_mips_index(np.array([[1.0, 2.0]]), backend=backend)
    assert index.search(np.array([0.3, -1.0]), 5).tolist() == [0]


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__)
def test_indexed_equals_exact_small(backend, rng):
    M = rng.normal(size=(1000, 8))
    index = CandidateIndex(M, "h")
    index.mips = build_mips_index(M, m=8, ef_construction=100, backend=backend)
    agree = 0
    for _ in range(20):
        q = rng.normal(size=8)
        a = topl_exact(q, index, 20, backend)
        b = topl_indexed(index, q, 20, backend=backend)
        agree += set(a.items) == set(b.items)
        assert b.items[0] == a.items[0] or b.scores[0] <= a.scores[0]
    assert agree == 20


def test_indexed_L1_and_repeatable(rng):
    M = rng.normal(size=(500, 6))
    index = CandidateIndex(M, "h").with_graph(m=8, ef_construction=80)
    q = rng.normal(size=6)
    one = topl_indexed(index, q, 1)
    assert one.items.tolist() == [int(np.argmax(M @ q))]
    again = topl_indexed(index, q, 10)
    assert np.array_equal(again.items, topl_indexed(index, q, 10).items)


def test_backends_build_identical_graphs(rng):
    if kernels.BACKEND != "compiled":
        pytest.skip("compiled extension not built")
    M = rng.normal(size=(300, 5))
    a = build_mips_index(M, m=6, ef_construction=40, backend=kernels).export()
    b = build_mips_index(M, m=6, ef_construction=40, backend=kernels.fallback).export()
    for key in a:
        assert np.array_equal(np.asarray(a[key]), np.asarray(b[key])), key


def test_stale_index_rejected(rng):
    index = CandidateIndex(rng.normal(size=(50, 4)), "old").with_graph(m=4)
    with pytest.raises(StaleIndexError):
        topl_indexed(index, rng.normal(size=4), 5, model_hash="new")


# --------------------------------------------------------------- end to end


def test_recommend_order_preserving():
    model = toy_model("gru4rec", "decoupled")
    index = precompute_candidates(model)
    res = recommend(model, index, [3, 4, 5], L=20)
    probs = np.exp(model.score(pad_batch([Sample((3, 4, 5), 0)], model.pad_id))[0])
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:20]
    assert res.items.tolist() == order
    assert len(res) == 20
    with pytest.raises(IndexError):
        recommend(model, index, [99])
    with pytest.raises(ContractError):
        recommend(model, index, [])


def test_recommend_with_graph_checks_model():
    model = toy_model("gru4rec", "linear", num_items=200)
    index = precompute_candidates(model).with_graph(m=8)
    exact = recommend(model, index, [1, 2], L=5, exact=True)
    graph = recommend(model, index, [1, 2], L=5)
    assert set(graph.items) == set(exact.items)
    other = toy_model("gru4rec", "linear", num_items=200, seed=5)
    with pytest.raises(StaleIndexError):
        recommend(other, index, [1, 2], L=5)


def test_index_file_roundtrip(tmp_path, rng):
    model = toy_model("gru4rec", "linear", num_items=300)
    index = precompute_candidates(model).with_graph(m=8, ef_construction=60)
    save_index(index, tmp_path / "i.sbri", {"note": 1})
    back, meta = load_index(tmp_path / "i.sbri")
    assert meta["model_hash"] == model.fingerprint() and meta["note"] == 1
    assert np.array_equal(back.matrix, index.matrix)
    for _ in range(5):
        q = rng.normal(size=8)
        assert np.array_equal(topl_indexed(back, q, 10).items, topl_indexed(index, q, 10).items)
    with pytest.raises(FormatError):
        from dndrec.dataset import load_corpus
        load_corpus(tmp_path / "i.sbri")


def test_exact_recommend_equals_evaluate_ranks():
    from dndrec.evaluation import batch_ranks
    model = toy_model("narm", "linear")
    batch = toy_batch()
    index = precompute_candidates(model)
    ranks = batch_ranks(model.score(batch), batch.targets)
    for i in range(len(batch)):
        q = model.session_vectors(batch)[i]
        top = topl_exact(q, index, 20).items.tolist()
        if ranks[i] <= 20:
            assert top.index(batch.targets[i]) + 1 == ranks[i]
