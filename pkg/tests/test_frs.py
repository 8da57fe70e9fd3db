import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fibalab import synth
from fibalab.errors import ChecksumError, ConsistencyError, DimensionError, FormatError, ParameterError
from fibalab.extractors import ExtractorSpec, build_extractor, embed
from fibalab.frs import (FeatureDatabase, authenticate, db_from_bytes, db_to_bytes, enroll,
                         enroll_embedding, load_db, match_embedding, natural_failure_rates, save_db)


@pytest.fixture(scope="module")
def model():
    return build_extractor(ExtractorSpec(seed=4))


def _db(k=4, threshold=0.35):
    return FeatureDatabase(bytes(32), k, threshold)


def test_match_uses_non_strict_threshold():
    db = _db(2, threshold=0.6)
    enroll_embedding(db, [1.0, 0.0], "a")
    v = np.array([0.6, 0.8])  # cos = 0.6 exactly
    assert match_embedding(db, v).accepted == {"a"}
    assert match_embedding(db, v, threshold=0.6000001).accepted == set()


def test_matches_sorted_best_first():
    db = _db(2, threshold=0.0)
    enroll_embedding(db, [1.0, 0.0], "a")
    enroll_embedding(db, [0.0, 1.0], "b")
    res = match_embedding(db, [0.2, 1.0])
    assert res.best == "b" and [m[0] for m in res.matches] == ["b", "a"]


def test_enroll_replaces_and_checks_dim():
    db = _db(2)
    enroll_embedding(db, [1.0, 0.0], 5)
    enroll_embedding(db, [0.0, 3.0], 5)
    assert len(db) == 1 and np.allclose(db.entries["5"], [0, 1])
    with pytest.raises(DimensionError):
        enroll_embedding(db, [1.0, 0.0, 0.0], 6)


def test_enrolled_image_authenticates_as_itself(model):
    img = synth.render_pool([3])[0]
    db = FeatureDatabase.for_model(model)
    enroll(db, img, "me", model)
    res = authenticate(db, img, model)
    assert res.best == "me" and res.scores["me"] == pytest.approx(1.0)


def test_empty_db_accepts_nobody(model):
    assert authenticate(FeatureDatabase.for_model(model), synth.render_pool([0])[0], model).matches == []


def test_wrong_model_is_rejected(model):
    db = FeatureDatabase.for_model(model)
    with pytest.raises(ConsistencyError):
        authenticate(db, synth.render_pool([0])[0], build_extractor(ExtractorSpec(seed=5)))


def test_natural_failure_rates_oracle():
    class Fixed:
        # stands in for a model whose embeddings are the images themselves
        pass
    db = _db(2, threshold=0.5)
    enroll_embedding(db, [1.0, 0.0], "a")
    enroll_embedding(db, [0.0, 1.0], "b")
    import fibalab.frs as frs
    probes = np.array([[1.0, 0.1], [0.2, 1.0], [1.0, 1.0]])
    orig = frs.embed
    frs.embed = lambda m, x: x / np.linalg.norm(x, axis=1, keepdims=True)
    try:
        db.check_model = lambda m: None
        unrec, misid = natural_failure_rates(db, probes, ["a", "a", "b"], Fixed())
    finally:
        frs.embed = orig
    # probe 2 scores 0.196 on its own id; probe 3 hits both ids at 0.707
    assert unrec == pytest.approx(1 / 3)
    assert misid == pytest.approx(2 / 3)


def test_unknown_probe_label(model):
    db = FeatureDatabase.for_model(model)
    enroll(db, synth.render_pool([0])[0], "0", model)
    with pytest.raises(ParameterError):
        natural_failure_rates(db, synth.render_pool([1]), ["1"], model)


@settings(max_examples=25)
@given(arrays(np.float64, (3, 6), elements=st.floats(-1, 1)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)), arrays(np.float64, (6,), elements=st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3))
def test_db_roundtrip_preserves_match_results(vecs, probe):
    db = FeatureDatabase(bytes(range(32)), 6, 0.2)
    for i, v in enumerate(vecs):
        enroll_embedding(db, v, f"id{i}")
    back = db_from_bytes(db_to_bytes(db))
    assert back.labels() == db.labels() and back.threshold == db.threshold
    assert np.allclose(back.matrix(), db.matrix(), atol=1e-6)
    a, b = match_embedding(db, probe), match_embedding(back, probe)
    assert [m[0] for m in a.matches if abs(m[1] - 0.2) > 1e-5] == [m[0] for m in b.matches if abs(m[1] - 0.2) > 1e-5]


def test_db_file_and_corruption(tmp_path, model):
    db = FeatureDatabase.for_model(model)
    enroll(db, synth.render_pool([2])[0], "ünï", model)
    save_db(db, tmp_path / "db.bin")
    assert load_db(tmp_path / "db.bin").labels() == ["ünï"]
    blob = bytearray((tmp_path / "db.bin").read_bytes())
    blob[60] ^= 0xFF
    with pytest.raises(ChecksumError):
        db_from_bytes(bytes(blob))
    with pytest.raises(FormatError):
        db_from_bytes(b"FBDX" + bytes(blob[4:]))


def test_false_match_rate_counts_wrong_comparisons():
    from fibalab.frs import false_match_rate
    model = build_extractor(ExtractorSpec(image_size=16, embedding_dim=8, seed=4))
    rng = np.random.default_rng(3)
    gallery = rng.uniform(size=(3, 1, 16, 16))
    db = FeatureDatabase.for_model(model, 0.35)
    for i, img in enumerate(gallery):
        enroll(db, img, i, model)
    probes = rng.uniform(size=(5, 1, 16, 16))
    labels = [0, 1, 2, 0, 1]
    sims = embed(model, probes) @ db.matrix().T
    naive = [sims[i, j] >= 0.35 for i in range(5) for j in range(3) if j != labels[i]]
    assert false_match_rate(db, probes, labels, model) == pytest.approx(np.mean(naive), abs=1e-12)
