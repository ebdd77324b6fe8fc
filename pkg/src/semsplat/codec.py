"""Scene autoencoder that compresses high-dimensional semantic features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import Adam


class DimensionMismatch(ValueError):
    pass


class MLP:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {}
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(6.0 / (a + b))
            self.params[f"w{k}"] = rng.uniform(-bound, bound, size=(a, b))
            self.params[f"b{k}"] = np.zeros(b)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x, cache=False):
        acts = [x]
        pre = []
        h = x
        for k in range(self.n_layers):
            z = h @ self.params[f"w{k}"] + self.params[f"b{k}"]
            pre.append(z)
            h = np.maximum(z, 0.0) if k < self.n_layers - 1 else z
            acts.append(h)
        return (h, (acts, pre)) if cache else h

    def backward(self, cache, g_out):
        acts, pre = cache
        grads = {}
        g = g_out
        for k in reversed(range(self.n_layers)):
            if k < self.n_layers - 1:
                g = g * (pre[k] > 0)
            grads[f"w{k}"] = acts[k].T @ g
            grads[f"b{k}"] = g.sum(0)
            g = g @ self.params[f"w{k}"].T
        return grads, g


@dataclass
class CodecConfig:
    latent_dim: int = 8
    hidden: tuple = (128,)
    lr: float = 1e-3
    lr_final: float = 1e-5
    iterations: int = 3000
    batch_size: int = 256
    metric: str = "l1"
    seed: int = 0


class FeatureCodec:
    """Encoder D_hi -> n and decoder n -> D_hi."""

    def __init__(self, input_dim: int, latent_dim: int = 8, hidden=(128,), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(hidden)
        self.encoder = MLP((input_dim,) + self.hidden + (latent_dim,), rng)
        self.decoder = MLP((latent_dim,) + self.hidden[::-1] + (input_dim,), rng)

    def params(self) -> dict:
        p = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        p.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return p

    def set_params(self, params: dict):
        for k, v in params.items():
            net, name = k.split(".", 1)
            (self.encoder if net == "enc" else self.decoder).params[name] = np.asarray(v, dtype=np.float64)

    def encode(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape[-1] != self.input_dim:
            raise DimensionMismatch(f"expected {self.input_dim}-d input, got {phi.shape[-1]}")
        return self.encoder.forward(phi)

    def decode(self, latent):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape[-1] != self.latent_dim:
            raise DimensionMismatch(f"expected {self.latent_dim}-d latent, got {latent.shape[-1]}")
        return self.decoder.forward(latent)

    def reconstruction_loss(self, phi, metric="l1", with_grad=False):
        """Mean per-coordinate reconstruction error of decode(encode(phi))."""
        phi = np.asarray(phi, dtype=np.float64).reshape(-1, self.input_dim)
        z, enc_cache = self.encoder.forward(phi, cache=True)
        rec, dec_cache = self.decoder.forward(z, cache=True)
        r = rec - phi
        if metric == "l1":
            loss = float(np.mean(np.abs(r)))
            g = np.sign(r) / r.size
        elif metric == "l2":
            loss = float(np.mean(r * r))
            g = 2.0 * r / r.size
        else:
            raise ValueError(f"unknown metric {metric!r}")
        if not with_grad:
            return loss
        g_dec, g_z = self.decoder.backward(dec_cache, g)
        g_enc, _ = self.encoder.backward(enc_cache, g_z)
        grads = {f"enc.{k}": v for k, v in g_enc.items()}
        grads.update({f"dec.{k}": v for k, v in g_dec.items()})
        return loss, grads


def train_codec(features, config: CodecConfig | None = None):
    """Fit a codec to a set of feature vectors; returns (codec, final loss)."""
    config = config or CodecConfig()
    try:
        feats = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatch("feature vectors have different lengths") from exc
    if feats.ndim != 2 or len(feats) == 0:
        raise DimensionMismatch("expected a non-empty (M, D) array of feature vectors")
    codec = FeatureCodec(feats.shape[1], config.latent_dim, config.hidden, config.seed)
    rng = np.random.default_rng(config.seed)
    opt = Adam(eps=1e-8)
    params = codec.params()
    decay = (config.lr_final / config.lr) ** (1.0 / max(config.iterations, 1))
    for it in range(config.iterations):
        batch = feats if len(feats) <= config.batch_size else feats[rng.integers(0, len(feats), config.batch_size)]
        _, grads = codec.reconstruction_loss(batch, config.metric, with_grad=True)
        lr = config.lr * decay ** it
        opt.step(params, grads, {k: lr for k in grads})
    return codec, codec.reconstruction_loss(feats, config.metric)
