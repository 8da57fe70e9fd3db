import numpy as np
import pytest

from fibalab import synth
from fibalab import tensor as T
from fibalab.errors import DimensionError, FormatError, ParameterError
from fibalab.extractors import (ARCHITECTURES, CosineHead, ExtractorSpec, LinearHead, build_extractor,
                                checkpoint_bytes, embed, extract_features, load_checkpoint, save_checkpoint,
                                train_extractor)


@pytest.fixture(scope="module")
def tiny():
    return synth.build_dataset(4, 4, seed=0, eval_per_id=1)


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_forward_shapes(arch):
    m = build_extractor(ExtractorSpec(arch=arch, embedding_dim=16))
    feats = m.features(np.zeros((2, 1, 48, 48)))
    assert feats[-1].shape == (2, 16)
    assert 30_000 < build_extractor(ExtractorSpec(arch=arch)).parameter_count() < 70_000


def test_unknown_arch_and_small_dim():
    with pytest.raises(ParameterError):
        build_extractor(ExtractorSpec(arch="arch-Z"))
    with pytest.raises(ParameterError):
        build_extractor(ExtractorSpec(embedding_dim=4))


def test_embeddings_are_unit_norm(tiny):
    e = embed(build_extractor(ExtractorSpec()), tiny.images)
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0)


def test_extract_features_checks_shape():
    with pytest.raises(DimensionError):
        extract_features(build_extractor(ExtractorSpec()), np.zeros((1, 32, 32)))


def test_frozen_blocks_parameter_gradients():
    m = build_extractor(ExtractorSpec())
    x = T.Tensor(np.full((1, 1, 48, 48), 0.3), requires_grad=True)
    with m.frozen():
        out = T.tsum(m(x))
    (gx,) = T.grad(out, [x])
    assert np.any(gx != 0)
    assert all(p.requires_grad for p in m.parameters())


@pytest.mark.parametrize("head_cls", [LinearHead, CosineHead])
def test_training_reduces_loss(tiny, head_cls):
    m = build_extractor(ExtractorSpec(seed=1))
    head = head_cls(64, tiny.n_classes, seed=1)
    _, hist = train_extractor(m, head, tiny, epochs=4, lr=3e-3, batch_size=4)
    assert hist.loss[-1] < hist.loss[0]
    assert len(hist.eval_accuracy) == 4


def test_training_is_deterministic(tiny):
    def run():
        m = build_extractor(ExtractorSpec(seed=2))
        train_extractor(m, LinearHead(64, tiny.n_classes, 2), tiny, epochs=1)
        return m.fingerprint()
    assert run() == run()


def test_checkpoint_roundtrip_is_exact(tmp_path, tiny):
    m = build_extractor(ExtractorSpec(arch="arch-B", seed=3))
    head = CosineHead(64, 4, seed=3, margin=0.3)
    save_checkpoint(m, tmp_path / "m.fbck", head=head)
    back, back_head = load_checkpoint(tmp_path / "m.fbck", with_head=True)
    assert back.fingerprint() == m.fingerprint()
    assert np.array_equal(embed(back, tiny.images), embed(m, tiny.images))
    assert isinstance(back_head, CosineHead) and back_head.margin == 0.3
    assert np.array_equal(back_head.w.data, head.w.data)


def test_fingerprint_changes_with_params():
    m = build_extractor(ExtractorSpec())
    before = m.fingerprint()
    m.params["fc.b"].data = m.params["fc.b"].data + 1.0
    assert m.fingerprint() != before and len(before) == 32


def test_corrupt_checkpoints(tmp_path):
    blob = checkpoint_bytes(build_extractor(ExtractorSpec()))
    (tmp_path / "a").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "b").write_bytes(blob[:-10])
    (tmp_path / "c").write_bytes(blob[:4] + bytes([7]) + blob[5:])
    for name in "abc":
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)
