import numpy as np
import pytest

from semsplat.codec import CodecConfig, DimensionMismatch, FeatureCodec, train_codec


def orthonormal_rows(k, d, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q[:k]


def test_codec_reconstructs_eight_row_codebook():
    book = orthonormal_rows(8, 64)
    codec, loss = train_codec(book, CodecConfig(latent_dim=8, iterations=3000, seed=0))
    assert loss < 0.01
    rec = codec.decode(codec.encode(book))
    nearest = np.argmin(((rec[:, None] - book[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(nearest, np.arange(8))


def test_dimension_mismatch():
    codec = FeatureCodec(16, 4)
    with pytest.raises(DimensionMismatch):
        codec.encode(np.zeros((2, 15)))
    with pytest.raises(DimensionMismatch):
        codec.decode(np.zeros((2, 5)))
    with pytest.raises(DimensionMismatch):
        train_codec([[1.0, 2.0], [1.0]])


@pytest.mark.parametrize("metric", ["l1", "l2"])
def test_reconstruction_gradients(metric):
    rng = np.random.default_rng(2)
    codec = FeatureCodec(5, 2, hidden=(6,), seed=1)
    for v in codec.params().values():
        v += rng.normal(scale=0.05, size=v.shape)
    phi = rng.normal(size=(4, 5))
    _, grads = codec.reconstruction_loss(phi, metric, with_grad=True)
    h = 1e-6
    for name, p in codec.params().items():
        flat = p.reshape(-1)
        for i in range(0, flat.size, 2):
            orig = flat[i]
            flat[i] = orig + h
            up = codec.reconstruction_loss(phi, metric)
            flat[i] = orig - h
            down = codec.reconstruction_loss(phi, metric)
            flat[i] = orig
            assert grads[name].reshape(-1)[i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)


def test_training_is_deterministic():
    book = orthonormal_rows(4, 16)
    a, la = train_codec(book, CodecConfig(latent_dim=3, iterations=200, seed=5))
    b, lb = train_codec(book, CodecConfig(latent_dim=3, iterations=200, seed=5))
    assert la == lb
    for k in a.params():
        assert np.array_equal(a.params()[k], b.params()[k])
