"""Adversarial alignment of two context-embedding spaces.

A mapper with one branch per direction (source->target, target->source) is
trained against a least-squares discriminator on mean-pooled embeddings. An
embedding-space parallel term stands in for the decoder's translation loss,
which is not part of this package.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkit as nk
from .numkit import AdamState, ParamSet

SOURCE, TARGET = "source", "target"
_BRANCH = {SOURCE: "to_target.", TARGET: "to_source."}


@dataclass
class ContextEmbedding:
    tokens: np.ndarray  # (m, d)
    language: str = SOURCE

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=float))
        if self.language not in (SOURCE, TARGET):
            raise ValueError(f"unknown language tag {self.language!r}")


@dataclass
class BilingualPair:
    source: ContextEmbedding
    target: ContextEmbedding


@dataclass(frozen=True)
class AlignConfig:
    dim: int = 16
    mapper_hidden: tuple = ()
    disc_hidden: tuple = (32, 32)
    epochs: int = 200
    batch: int = 32
    lr: float = 0.01
    parallel_weight: float = 1.0
    holdout: float = 0.2


@dataclass
class MapperState:
    mapper: ParamSet
    disc: ParamSet
    mapper_opt: AdamState = field(default_factory=AdamState)
    disc_opt: AdamState = field(default_factory=AdamState)


@dataclass
class AlignmentReport:
    epochs: list
    initial_cosine: float
    final_cosine: float
    n_train: int
    n_heldout: int
    config: dict

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


# ---------------------------------------------------------------- networks


def _mlp_entries(rng, prefix, widths):
    out = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out += [(f"{prefix}{i}.W", nk.glorot(rng, a, b)), (f"{prefix}{i}.b", np.zeros(b))]
    return out


def init_mapper(cfg, rng, identity=False):
    widths = [cfg.dim, *cfg.mapper_hidden, cfg.dim]
    entries = []
    for branch in (_BRANCH[SOURCE], _BRANCH[TARGET]):
        entries += _mlp_entries(rng, branch, widths)
    ps = ParamSet(entries)
    if identity:
        if cfg.mapper_hidden:
            raise ValueError("identity init needs a linear mapper")
        for branch in _BRANCH.values():
            ps[f"{branch}0.W"].data = np.eye(cfg.dim)
    return ps


def init_align_disc(cfg, rng):
    return ParamSet(_mlp_entries(rng, "", [cfg.dim, *cfg.disc_hidden, 1]))


def init_state(cfg, rng, identity=False):
    return MapperState(init_mapper(cfg, rng, identity), init_align_disc(cfg, rng),
                       AdamState(learning_rate=cfg.lr), AdamState(learning_rate=cfg.lr))


def _apply(params, prefix, x):
    n = sum(1 for k in params.names() if k.startswith(prefix) and k.endswith(".W"))
    for i in range(n):
        x = nk.dense(x, params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"])
        if i < n - 1:
            x = nk.leaky_relu(x)
    return x


def apply_mapper(mapper, tokens, language):
    """Map tokens of ``language`` into the other space; any leading batch axes."""
    tokens = nk.as_tensor(tokens)
    dim = mapper[f"{_BRANCH[language]}0.W"].shape[0]
    if tokens.shape[-1] != dim:
        raise ValueError(f"mapper expects dim {dim}, got tokens of shape {tokens.shape}")
    return _apply(mapper, _BRANCH[language], tokens)


def disc_score(disc, pooled):
    """Probability that a pooled embedding is an original (not mapped) one; shape (B,)."""
    pooled = nk.as_tensor(pooled)
    out = nk.sigmoid(_apply(disc, "", pooled))
    return nk.reshape(out, out.shape[:-1])


# ---------------------------------------------------------------- ops


def mean_pool(emb):
    tokens = emb.tokens if isinstance(emb, ContextEmbedding) else np.asarray(emb)
    if tokens.shape[0] == 0:
        raise ValueError("cannot pool an embedding with no tokens")
    return tokens.mean(axis=0)


def map_context(state, emb):
    other = TARGET if emb.language == SOURCE else SOURCE
    out = apply_mapper(state.mapper.frozen(), emb.tokens, emb.language)
    return ContextEmbedding(out.data, other)


def align_disc_loss(disc, real_x, mapped_x, real_y, mapped_y):
    """Least-squares discriminator loss summed over both directions, batch-averaged:
    originals target 1, mapped embeddings target 0."""
    terms = [
        nk.square(nk.add(disc_score(disc, real_x), -1.0)),
        nk.square(disc_score(disc, mapped_x)),
        nk.square(nk.add(disc_score(disc, real_y), -1.0)),
        nk.square(disc_score(disc, mapped_y)),
    ]
    total = terms[0]
    for t in terms[1:]:
        total = nk.add(total, t)
    return nk.mean(total)


def align_gen_loss(disc, mapped_x, mapped_y):
    """Least-squares mapper loss: both mapped embeddings target 1."""
    a = nk.square(nk.add(disc_score(disc, mapped_x), -1.0))
    b = nk.square(nk.add(disc_score(disc, mapped_y), -1.0))
    return nk.mean(nk.add(a, b))


# ---------------------------------------------------------------- data


def hidden_map(d, seed):
    """The random orthogonal matrix ``synth_bilingual`` uses for ``seed``."""
    rng = np.random.default_rng([seed, 11])
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def synth_bilingual(n_pairs, d=16, tokens_per_side=8, noise_sigma=0.01, seed=0):
    """Parallel pairs: source tokens ~ N(0, I); target token = A @ source token + noise."""
    if d < 2:
        raise ValueError("d must be >= 2")
    A = hidden_map(d, seed)
    rng = np.random.default_rng([seed, 12])
    pairs = []
    for _ in range(n_pairs):
        src = rng.standard_normal((tokens_per_side, d))
        tgt = src @ A.T + noise_sigma * rng.standard_normal((tokens_per_side, d))
        pairs.append(BilingualPair(ContextEmbedding(src, SOURCE), ContextEmbedding(tgt, TARGET)))
    return pairs


def save_pairs(pairs, path):
    with Path(path).open("w") as fh:
        for p in pairs:
            fh.write(json.dumps({"src": p.source.tokens.tolist(), "tgt": p.target.tokens.tolist()}) + "\n")


def load_pairs(path):
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pairs.append(BilingualPair(ContextEmbedding(rec["src"], SOURCE), ContextEmbedding(rec["tgt"], TARGET)))
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"{path}:{lineno}: malformed pair: {e}") from None
    return pairs


def _pad(embs):
    m = max(e.tokens.shape[0] for e in embs)
    d = embs[0].tokens.shape[1]
    out = np.zeros((len(embs), m, d))
    mask = np.zeros((len(embs), m))
    for i, e in enumerate(embs):
        out[i, : len(e.tokens)] = e.tokens
        mask[i, : len(e.tokens)] = 1.0
    return out, mask


def _masked_mean(x, mask):
    w = mask / mask.sum(axis=1, keepdims=True)
    return nk.sum(nk.mul(x, w[:, :, None]), axis=1)


def heldout_cosine(mapper, pairs):
    """Mean cosine between source tokens and the target tokens mapped back into
    the source space (pooled vectors when token counts differ)."""
    if not pairs:
        return float("nan")
    vals = []
    for p in pairs:
        mapped = apply_mapper(mapper.frozen(), p.target.tokens, TARGET).data
        src = p.source.tokens
        if mapped.shape != src.shape:
            src, mapped = src.mean(axis=0, keepdims=True), mapped.mean(axis=0, keepdims=True)
        vals.append(nk.cosine_similarity(src, mapped).data)
    return float(np.mean(np.concatenate(vals)))


def train_alignment(pairs, cfg=AlignConfig(), seed=0, identity_init=False):
    """Alternate a discriminator step and a mapper step per minibatch for
    ``cfg.epochs`` epochs. Returns (MapperState, AlignmentReport)."""
    if len(pairs) < 2:
        raise ValueError("train_alignment needs at least 2 pairs")
    rng = np.random.default_rng([seed, 13])
    state = init_state(cfg, rng, identity_init)
    order = rng.permutation(len(pairs))
    n_hold = max(1, int(round(cfg.holdout * len(pairs))))
    held = [pairs[i] for i in order[:n_hold]]
    train = [pairs[i] for i in order[n_hold:]]
    xs, xmask = _pad([p.source for p in train])
    ys, ymask = _pad([p.target for p in train])
    zx_all = _masked_mean(nk.Tensor(xs), xmask).data
    zy_all = _masked_mean(nk.Tensor(ys), ymask).data

    initial = heldout_cosine(state.mapper, held)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train))
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(train), cfg.batch):
            idx = perm[start:start + cfg.batch]
            zx, zy = zx_all[idx], zy_all[idx]

            # discriminator step on detached mapped embeddings
            frozen_m = state.mapper.frozen()
            mx = _masked_mean(apply_mapper(frozen_m, ys[idx], TARGET), ymask[idx])
            my = _masked_mean(apply_mapper(frozen_m, xs[idx], SOURCE), xmask[idx])
            d_loss = align_disc_loss(state.disc, zx, mx, zy, my)
            nk.backward(d_loss)
            nk.adam_step(state.disc, state.disc_opt)

            # mapper step against the frozen discriminator
            mx = _masked_mean(apply_mapper(state.mapper, ys[idx], TARGET), ymask[idx])
            my = _masked_mean(apply_mapper(state.mapper, xs[idx], SOURCE), xmask[idx])
            g_loss = align_gen_loss(state.disc.frozen(), mx, my)
            par = nk.mean(nk.sum(nk.add(nk.square(nk.add(mx, -zx)), nk.square(nk.add(my, -zy))), axis=1))
            total = nk.add(g_loss, nk.mul(par, cfg.parallel_weight))
            nk.backward(total)
            nk.adam_step(state.mapper, state.mapper_opt)

            vals = (float(d_loss.data), float(g_loss.data), float(par.data))
            if not all(math.isfinite(v) for v in vals):
                raise FloatingPointError(f"non-finite alignment loss at epoch {epoch}: {vals}")
            sums += vals
            n_batches += 1
        sums /= max(n_batches, 1)
        history.append({"epoch": epoch + 1, "disc_loss": float(sums[0]), "gen_loss": float(sums[1]),
                        "parallel_loss": float(sums[2])})

    report = AlignmentReport(
        epochs=history,
        initial_cosine=initial,
        final_cosine=heldout_cosine(state.mapper, held),
        n_train=len(train),
        n_heldout=len(held),
        config=asdict(cfg),
    )
    return state, report
