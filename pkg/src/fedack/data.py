"""Synthetic social-bot accounts, JSONL I/O and Dirichlet non-IID partitioning."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import N_CLASSES

log = logging.getLogger(__name__)

HUMAN, BOT = 0, 1


@dataclass
class UserRecord:
    id: str
    label: int
    props: np.ndarray
    tweets: list = field(default_factory=list)  # each (Q_j, d)

    def __eq__(self, other):
        if not isinstance(other, UserRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.props, other.props)
            and len(self.tweets) == len(other.tweets)
            and all(np.array_equal(a, b) for a, b in zip(self.tweets, other.tweets))
        )


@dataclass
class Dataset:
    prop_dim: int
    embed_dim: int
    users: list = field(default_factory=list)
    n_classes: int = N_CLASSES

    def __len__(self):
        return len(self.users)

    @property
    def labels(self):
        return np.array([u.label for u in self.users], dtype=int)

    def subset(self, idx):
        return Dataset(self.prop_dim, self.embed_dim, [self.users[i] for i in idx], self.n_classes)

    def validate(self):
        ids = [u.id for u in self.users]
        if len(set(ids)) != len(ids):
            raise ValueError("user ids are not unique")
        for u in self.users:
            if u.label not in range(self.n_classes):
                raise ValueError(f"user {u.id}: label {u.label} out of range")
            if np.shape(u.props) != (self.prop_dim,):
                raise ValueError(f"user {u.id}: props shape {np.shape(u.props)} != ({self.prop_dim},)")
            for t in u.tweets:
                if np.ndim(t) != 2 or np.shape(t)[1] != self.embed_dim:
                    raise ValueError(f"user {u.id}: tweet shape {np.shape(t)} vs embed dim {self.embed_dim}")


@dataclass(frozen=True)
class PartitionSpec:
    concentration: float = 0.5
    n_clients: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.concentration > 0:
            raise ValueError("Dirichlet concentration must be > 0")
        if self.n_clients < 1:
            raise ValueError("need at least one client")


@dataclass
class LabelStats:
    counts: np.ndarray  # (K, C) int

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def p_y(self):
        col = self.counts.sum(axis=0).astype(float)
        return col / col.sum() if col.sum() > 0 else np.full(len(col), 1.0 / len(col))

    @property
    def ratios(self):
        """``counts[k, y] / sum_j counts[j, y]``; 0 for labels with no samples."""
        col = self.counts.sum(axis=0).astype(float)
        return np.divide(self.counts, col, out=np.zeros(self.counts.shape), where=col > 0)


# ---------------------------------------------------------------- synthesis


def _unit(rng, n):
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def synth_dataset(n_users, prop_dim=8, embed_dim=16, tweets_range=(1, 6), tokens_range=(4, 10),
                  class_sep=2.0, seed=0):
    """Two-class accounts: props ~ N(+-sep*mu, I), tokens ~ N(+-sep*nu, I), bots on
    the + side. Labels alternate so classes are balanced within one."""
    if n_users < 2:
        raise ValueError("n_users must be >= 2")
    if class_sep < 0:
        raise ValueError("class_sep must be >= 0")
    rng = np.random.default_rng(seed)
    mu = _unit(rng, prop_dim)
    nu = _unit(rng, embed_dim)
    labels = np.arange(n_users) % 2
    rng.shuffle(labels)
    users = []
    for i, y in enumerate(labels):
        sign = 1.0 if y == BOT else -1.0
        props = sign * class_sep * mu + rng.standard_normal(prop_dim)
        n_tweets = int(rng.integers(tweets_range[0], tweets_range[1] + 1))
        tweets = []
        for _ in range(n_tweets):
            q = int(rng.integers(tokens_range[0], tokens_range[1] + 1))
            tweets.append(sign * class_sep * nu + rng.standard_normal((q, embed_dim)))
        users.append(UserRecord(f"u{i:05d}", int(y), props, tweets))
    return Dataset(prop_dim, embed_dim, users)


def train_test_split(dataset, test_fraction=0.2, seed=0):
    """Stratified split; returns (train, test) index arrays in ascending order."""
    rng = np.random.default_rng([seed, 7])
    labels = dataset.labels
    train, test = [], []
    for y in range(dataset.n_classes):
        idx = np.flatnonzero(labels == y)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


# ---------------------------------------------------------------- partition


def _largest_remainder(props, n):
    raw = props * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset, spec):
    """Split ``dataset`` across ``spec.n_clients`` shards with per-class client
    proportions drawn from Dir(concentration). Returns (shards, LabelStats)."""
    if len(dataset) == 0:
        raise ValueError("cannot partition an empty dataset")
    K = spec.n_clients
    if K > len(dataset):
        log.warning("%d clients for %d users: some shards will be empty", K, len(dataset))
    rng = np.random.default_rng(spec.seed)
    labels = dataset.labels
    shards = [[] for _ in range(K)]
    counts = np.zeros((K, dataset.n_classes), dtype=int)
    for y in range(dataset.n_classes):
        idx = np.flatnonzero(labels == y)
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(K, spec.concentration))
        if not np.all(np.isfinite(props)):
            props = np.full(K, 1.0 / K)
        per_client = _largest_remainder(props, len(idx))
        start = 0
        for k, c in enumerate(per_client):
            shards[k].extend(idx[start:start + c].tolist())
            counts[k, y] = c
            start += c
    shards = [sorted(s) for s in shards]
    empty = sum(1 for s in shards if not s)
    if empty:
        log.warning("%d of %d shards are empty", empty, K)
    return shards, LabelStats(counts)


def label_counts(shards, labels, n_classes=N_CLASSES):
    counts = np.zeros((len(shards), n_classes), dtype=int)
    for k, s in enumerate(shards):
        if len(s):
            counts[k] = np.bincount(np.asarray(labels)[list(s)], minlength=n_classes)
    return LabelStats(counts)


# ---------------------------------------------------------------- JSONL


def save_jsonl(dataset, path):
    path = Path(path)
    with path.open("w") as fh:
        header = {"type": "header", "prop_dim": dataset.prop_dim, "embed_dim": dataset.embed_dim,
                  "n_classes": dataset.n_classes}
        fh.write(json.dumps(header) + "\n")
        for u in dataset.users:
            rec = {"id": u.id, "label": int(u.label), "props": np.asarray(u.props).tolist(),
                   "tweets": [np.asarray(t).tolist() for t in u.tweets]}
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path):
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
        ds = Dataset(int(header["prop_dim"]), int(header["embed_dim"]),
                     n_classes=int(header.get("n_classes", N_CLASSES)))
    except (ValueError, KeyError, TypeError) as e:
        raise ValueError(f"{path}:1: bad header: {e}") from None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            props = np.asarray(rec["props"], dtype=float)
            for raw in rec["tweets"]:
                if any(len(row) != ds.embed_dim for row in raw):
                    raise ValueError(f"token width != embed_dim {ds.embed_dim}")
            tweets = [np.asarray(t, dtype=float).reshape(-1, ds.embed_dim) for t in rec["tweets"]]
            user = UserRecord(str(rec["id"]), int(rec["label"]), props, tweets)
            if props.shape != (ds.prop_dim,):
                raise ValueError(f"props length {props.size} != prop_dim {ds.prop_dim}")
            if user.label not in range(ds.n_classes):
                raise ValueError(f"label {user.label} out of range")
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"{path}:{lineno}: malformed record: {e}") from None
        ds.users.append(user)
    ds.validate()
    return ds


def save_partition(spec, shards, dataset, path):
    obj = {"spec": {"concentration": spec.concentration, "n_clients": spec.n_clients, "seed": spec.seed},
           "shards": [[dataset.users[i].id for i in s] for s in shards]}
    Path(path).write_text(json.dumps(obj, indent=1))


def load_partition(path, dataset):
    obj = json.loads(Path(path).read_text())
    pos = {u.id: i for i, u in enumerate(dataset.users)}
    spec = PartitionSpec(**obj["spec"])
    shards = [sorted(pos[i] for i in s) for s in obj["shards"]]
    return spec, shards
