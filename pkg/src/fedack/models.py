"""Backbone extractor, discriminators and conditional generators.

All networks are small dense stacks over :mod:`fedack.numkit`. Forward
functions are pure: they read a ParamSet and never mutate it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numkit as nk
from .numkit import ParamSet, Tensor

N_CLASSES = 2


@dataclass(frozen=True)
class ExtractorConfig:
    prop_dim: int = 8
    embed_dim: int = 16
    hidden_dim: int = 32
    feature_dim: int = 16
    attention_dim: int = 16

    def __post_init__(self):
        if min(asdict(self).values()) < 1:
            raise ValueError(f"extractor dims must be positive: {self}")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")


@dataclass(frozen=True)
class DiscriminatorConfig:
    feature_dim: int = 16
    hidden: tuple = (32, 32)
    n_classes: int = N_CLASSES


@dataclass(frozen=True)
class GeneratorConfig:
    feature_dim: int = 16
    noise_dim: int = 16
    hidden: tuple = (32,)
    n_classes: int = N_CLASSES


@dataclass
class UserBatch:
    """Tensorised users: tweet vectors are already mean-pooled over tokens and
    padded to a common count, with ``mask`` marking real tweets."""

    props: np.ndarray  # (B, P)
    tweets: np.ndarray  # (B, M, d)
    mask: np.ndarray  # (B, M) bool
    labels: np.ndarray  # (B,) int

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return UserBatch(self.props[idx], self.tweets[idx], self.mask[idx], self.labels[idx])


@dataclass
class PseudoBatch:
    features: Tensor  # (N, F)
    labels: np.ndarray
    noise: np.ndarray


# ---------------------------------------------------------------- init


def _mlp_params(rng, prefix, widths, zero_final=False):
    entries = []
    last = len(widths) - 2
    for i, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
        w = np.zeros((fin, fout)) if zero_final and i == last else nk.glorot(rng, fin, fout)
        entries.append((f"{prefix}{i}.W", w))
        entries.append((f"{prefix}{i}.b", np.zeros(fout)))
    return entries


def init_extractor(cfg, rng):
    H, d = cfg.hidden_dim, cfg.embed_dim
    entries = _mlp_params(rng, "prop.", [cfg.prop_dim, H, H])
    entries.append(("att.W", nk.glorot(rng, d, cfg.attention_dim)))
    entries.append(("att.a", nk.glorot(rng, cfg.attention_dim, 1)))
    entries += _mlp_params(rng, "fuse.", [H + d, H, cfg.feature_dim])
    return ParamSet(entries)


def init_discriminator(cfg, rng, zero_final=False):
    widths = [cfg.feature_dim, *cfg.hidden, cfg.n_classes]
    return ParamSet(_mlp_params(rng, "mlp.", widths, zero_final=zero_final))


def init_generator(cfg, rng):
    widths = [cfg.noise_dim + cfg.n_classes, *cfg.hidden, cfg.feature_dim]
    return ParamSet(_mlp_params(rng, "mlp.", widths))


# ---------------------------------------------------------------- forwards


def _mlp(params, prefix, x, act, final_act=None):
    n = sum(1 for name in params.names() if name.startswith(prefix) and name.endswith(".W"))
    for i in range(n):
        x = nk.dense(x, params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"])
        if i < n - 1:
            x = act(x)
    return final_act(x) if final_act is not None else x


def attention_weights(params, tweets, mask):
    """Additive attention scores ``a . tanh(W h_j)`` softmaxed over each user's
    real tweets. ``tweets`` is (B, M, d)."""
    h = nk.as_tensor(tweets)
    B, M = mask.shape
    hidden = nk.tanh(nk.matmul(h, params["att.W"]))
    scores = nk.reshape(nk.matmul(hidden, params["att.a"]), (B, M))
    return nk.softmax(scores, axis=1, mask=mask)


def attention_aggregate(params, tweets, mask):
    """Attention-weighted sum of tweet vectors. Users without tweets get zeros."""
    w = attention_weights(params, tweets, mask)
    B, M = mask.shape
    weighted = nk.mul(nk.reshape(w, (B, M, 1)), nk.as_tensor(tweets))
    return nk.sum(weighted, axis=1)


def extractor_forward(params, batch):
    """User representations ``r_u`` for a :class:`UserBatch`; returns (B, F)."""
    r_p = _mlp(params, "prop.", nk.as_tensor(batch.props), nk.relu, nk.relu)
    r_t = attention_aggregate(params, batch.tweets, batch.mask)
    fused = nk.concat([r_p, r_t], axis=1)
    return _mlp(params, "fuse.", fused, nk.relu)


def discriminator_forward(params, x):
    """Raw class logits for features ``x`` of shape (B, F) or (F,)."""
    x = nk.as_tensor(x)
    fin = params["mlp.0.W"].shape[0]
    if x.shape[-1] != fin:
        raise ValueError(f"discriminator expects feature dim {fin}, got {x.shape}")
    return _mlp(params, "mlp.", x, nk.leaky_relu)


def onehot(labels, n=N_CLASSES):
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got {labels}")
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def generator_forward(params, z, labels):
    """Conditional pseudo-features in [-1, 1]^F from noise (N, Z) and labels."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    n_classes = params["mlp.0.W"].shape[0] - z.shape[1]
    inp = np.concatenate([z, onehot(labels, n_classes)], axis=1)
    feats = _mlp(params, "mlp.", nk.as_tensor(inp), nk.relu, nk.tanh)
    return PseudoBatch(feats, labels, z)


def predict(extractor, disc, batch):
    logits = discriminator_forward(disc.frozen(), extractor_forward(extractor.frozen(), batch))
    return np.argmax(logits.data, axis=1)


def accuracy(extractor, disc, batch):
    if len(batch) == 0:
        return 0.0
    return float(np.mean(predict(extractor, disc, batch) == batch.labels))


def tensorize(users, prop_dim, embed_dim):
    """Pack UserRecords into a padded :class:`UserBatch`. Each tweet becomes the
    mean of its token embeddings."""
    n = len(users)
    m = max((len(u.tweets) for u in users), default=0)
    m = max(m, 1)
    props = np.zeros((n, prop_dim))
    tweets = np.zeros((n, m, embed_dim))
    mask = np.zeros((n, m), dtype=bool)
    labels = np.zeros(n, dtype=int)
    for i, u in enumerate(users):
        props[i] = u.props
        labels[i] = u.label
        for j, tok in enumerate(u.tweets):
            tweets[i, j] = np.asarray(tok).mean(axis=0)
            mask[i, j] = True
    return UserBatch(props, tweets, mask, labels)


def represent(params, user, cfg):
    """Representation of a single user as a plain vector of length F."""
    batch = tensorize([user], cfg.prop_dim, cfg.embed_dim)
    return extractor_forward(params.frozen(), batch).data[0]
