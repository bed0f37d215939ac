"""Experiment orchestration: config, seeded runs, metrics files, feature export,
sweeps and the summary statistics used to compare methods."""
from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .client import ClientState
from .losses import LossWeights
from .models import (
    DiscriminatorConfig,
    ExtractorConfig,
    GeneratorConfig,
    extractor_forward,
    init_discriminator,
    init_extractor,
    init_generator,
    tensorize,
)
from .numkit import AdamState
from .server import RoundConfig, SelectionPolicy, ServerState, baseline_round, run_round

log = logging.getLogger(__name__)

METHODS = ("fedack", "fedack_a", "fedavg", "fedprox")
METRICS_HEADER = ["round", "accuracy", "mean_loss", "participants"]
FEATURES_HEADER = ["client_id", "user_id", "f1", "f2", "label"]
UNREACHED = "unreached"


@dataclass
class DataConfig:
    path: str | None = None
    n_users: int = 2000
    prop_dim: int = 8
    embed_dim: int = 16
    class_sep: float = 2.0
    tweets_range: tuple = (1, 6)
    tokens_range: tuple = (4, 10)
    seed: int = 0
    test_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    method: str = "fedack"
    n_clients: int = 10
    concentration: float = 0.5
    partition_seed: int | None = None  # None: follow the run seed
    fraction: float = 0.5
    rounds: int = 100
    epochs: int = 5
    batch: int = 64
    lr: float = 0.01
    alpha_kd: float = 1.0
    gamma: float = 0.5
    mu: float = 0.5
    tau: float = 0.5
    hidden_dim: int = 32
    feature_dim: int = 16
    attention_dim: int = 16
    disc_hidden: tuple = (32, 32)
    local_disc_hidden: tuple | None = None  # None: same as disc_hidden
    gen_hidden: tuple = (32,)
    noise_dim: int = 16
    prox_rho: float = 0.01
    distill_steps: int | None = None
    distill_batch: int = 64
    finetune_global_disc: bool = False
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    targets: list = field(default_factory=lambda: [0.7, 0.8])
    output_dir: str | None = None
    checkpoint_every: int = 1
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        for name in ("disc_hidden", "gen_hidden", "local_disc_hidden"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, tuple(v))
        self.data.tweets_range = tuple(self.data.tweets_range)
        self.data.tokens_range = tuple(self.data.tokens_range)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.rounds < 1 or self.epochs < 1 or self.batch < 1:
            raise ValueError("rounds, epochs and batch must all be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.loss_weights()

    def loss_weights(self):
        mu = 0.0 if self.method == "fedack_a" else self.mu
        return LossWeights(self.alpha_kd, self.gamma, mu, self.tau)

    def extractor_config(self):
        return ExtractorConfig(self.data.prop_dim, self.data.embed_dim, self.hidden_dim, self.feature_dim,
                               self.attention_dim)

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data_known = {f.name for f in dataclasses.fields(DataConfig)}
        bad = set(obj.get("data", {})) - data_known
        if bad:
            raise ValueError(f"unknown data config keys: {sorted(bad)}")
        return cls(**dict(obj))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes):
        obj = self.to_dict()
        for k, v in changes.items():
            if k.startswith("data."):
                obj["data"][k[5:]] = v
            else:
                obj[k] = v
        return ExperimentConfig.from_dict(obj)

    def hash(self):
        obj = self.to_dict()
        for k in ("output_dir", "workers", "seeds"):
            obj.pop(k)
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunResult:
    method: str
    seed: int
    curve: list
    max_accuracy: float
    final_accuracy: float
    rounds_to_target: dict
    wall_clock: float
    config_hash: str

    def to_dict(self):
        return asdict(self)


@dataclass
class RunOutcome:
    """Everything a finished run leaves behind, for in-process analysis."""

    result: RunResult
    reports: list
    server: ServerState
    clients: list
    test_batch: object
    test_ids: list
    final_participants: list


def rounds_to_target(curve, target):
    """First 1-based round whose accuracy reaches ``target``, else ``"unreached"``."""
    if not len(curve):
        raise ValueError("empty accuracy curve")
    for i, acc in enumerate(curve, start=1):
        if acc >= target:
            return i
    return UNREACHED


# ---------------------------------------------------------------- setup


@functools.lru_cache(maxsize=8)
def _synth_cached(n_users, prop_dim, embed_dim, tweets_range, tokens_range, class_sep, seed):
    return D.synth_dataset(n_users, prop_dim, embed_dim, tweets_range, tokens_range, class_sep, seed)


def load_dataset(dcfg):
    if dcfg.path:
        return D.load_jsonl(dcfg.path)
    return _synth_cached(dcfg.n_users, dcfg.prop_dim, dcfg.embed_dim, tuple(dcfg.tweets_range),
                         tuple(dcfg.tokens_range), float(dcfg.class_sep), dcfg.seed)


def build_federation(cfg, seed, dataset=None):
    """Split, partition and initialise server + clients for one seeded run."""
    dataset = load_dataset(cfg.data) if dataset is None else dataset
    train_idx, test_idx = D.train_test_split(dataset, cfg.data.test_fraction, cfg.data.seed)
    train = dataset.subset(train_idx)
    test = dataset.subset(test_idx)
    pseed = seed if cfg.partition_seed is None else cfg.partition_seed
    shards, _ = D.dirichlet_partition(train, D.PartitionSpec(cfg.concentration, cfg.n_clients, pseed))

    ecfg = cfg.extractor_config()
    dcfg = DiscriminatorConfig(cfg.feature_dim, cfg.disc_hidden)
    d2cfg = DiscriminatorConfig(cfg.feature_dim, cfg.local_disc_hidden or cfg.disc_hidden)
    gcfg = GeneratorConfig(cfg.feature_dim, cfg.noise_dim, cfg.gen_hidden)

    rng = np.random.default_rng([seed, 1])
    extractor = init_extractor(ecfg, rng)
    disc = init_discriminator(dcfg, rng)
    gen = init_generator(gcfg, np.random.default_rng([seed, 3]))
    server = ServerState(extractor.copy(), disc.copy(), gen, AdamState(learning_rate=cfg.lr),
                         AdamState(learning_rate=cfg.lr))

    clients = []
    for k, shard in enumerate(shards):
        crng = np.random.default_rng([seed, 2, k])
        clients.append(ClientState(
            client_id=k,
            shard=tensorize(train.subset(shard).users, ecfg.prop_dim, ecfg.embed_dim),
            extractor=extractor.copy(),
            d1=disc.copy(),
            d2=init_discriminator(d2cfg, crng),
            local_gen=init_generator(gcfg, crng),
            extractor_prev=extractor.copy(),
            noise_dim=cfg.noise_dim,
        ))
    test_batch = tensorize(test.users, ecfg.prop_dim, ecfg.embed_dim)
    return server, clients, test_batch, [u.id for u in test.users]


def round_config(cfg):
    return RoundConfig(cfg.epochs, cfg.batch, cfg.lr, cfg.loss_weights(), cfg.distill_steps, cfg.distill_batch,
                       cfg.prox_rho, cfg.finetune_global_disc, cfg.workers)


# ---------------------------------------------------------------- outputs


def _fmt(x):
    return repr(float(x))


def write_checkpoint(out_dir, t, server, cfg, seed, clients=None, participants=()):
    rdir = Path(out_dir) / f"round_{t}"
    rdir.mkdir(parents=True, exist_ok=True)
    header = {"extractor": asdict(cfg.extractor_config()), "disc_hidden": list(cfg.disc_hidden),
              "gen_hidden": list(cfg.gen_hidden), "noise_dim": cfg.noise_dim, "seed": seed}
    nets = {"extractor": server.global_extractor, "disc": server.global_disc, "gen": server.global_gen}
    for name, ps in nets.items():
        if ps is not None:
            (rdir / f"global_{name}.json").write_text(json.dumps({"config": header, "params": ps.to_dict()}))
    if clients is not None:
        cdir = rdir / "clients"
        cdir.mkdir(exist_ok=True)
        for k in participants:
            (cdir / f"client_{k}_extractor.json").write_text(
                json.dumps({"config": header, "params": clients[k].extractor.to_dict()}))
    return rdir


def run_experiment(cfg, seed, out_dir=None, dataset=None):
    """Run ``cfg.rounds`` rounds of ``cfg.method`` for one seed.

    With ``out_dir`` set, writes metrics.csv (row per round, flushed as it goes),
    checkpoints and result.json there.
    """
    t0 = time.perf_counter()
    server, clients, test_batch, test_ids = build_federation(cfg, seed, dataset)
    rcfg = round_config(cfg)
    policy = SelectionPolicy(cfg.fraction, seed)
    reports = []
    out = Path(out_dir) if out_dir else None
    fh = writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
        fh = (out / "metrics.csv").open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        fh.flush()
    try:
        for t in range(1, cfg.rounds + 1):
            if cfg.method in ("fedack", "fedack_a"):
                server, report = run_round(server, clients, rcfg, policy, test_batch, seed)
            else:
                server, report = baseline_round(server, clients, cfg.method, rcfg, policy, test_batch, seed)
            if not math.isfinite(report.mean_loss) and any(clients[k].n_samples for k in report.participants):
                raise FloatingPointError(f"non-finite mean loss at round {t}")
            reports.append(report)
            if writer:
                writer.writerow([t, _fmt(report.accuracy), _fmt(report.mean_loss),
                                 ";".join(str(k) for k in report.participants)])
                fh.flush()
                every = cfg.checkpoint_every
                last = t == cfg.rounds
                if last or (every and t % every == 0):
                    write_checkpoint(out, t, server, cfg, seed, clients if last else None,
                                     report.participants if last else ())
                    (out / f"round_{t}" / "report.json").write_text(json.dumps(report.to_dict()))
    finally:
        if fh:
            fh.close()

    curve = [r.accuracy for r in reports]
    result = RunResult(
        method=cfg.method,
        seed=seed,
        curve=curve,
        max_accuracy=max(curve),
        final_accuracy=curve[-1],
        rounds_to_target={str(tg): rounds_to_target(curve, tg) for tg in cfg.targets},
        wall_clock=time.perf_counter() - t0,
        config_hash=cfg.hash(),
    )
    if out:
        (out / "result.json").write_text(json.dumps(result.to_dict(), indent=1))
    return RunOutcome(result, reports, server, clients, test_batch, test_ids, reports[-1].participants)


# ---------------------------------------------------------------- features


def export_features(extractors, test_batch, test_ids):
    """Rows ``(client_id, user_id, f1, f2, label)`` for every test user pushed
    through each client's extractor. Extractors must emit 2-D features."""
    rows = []
    for k in sorted(extractors):
        feats = extractor_forward(extractors[k].frozen(), test_batch).data
        if feats.shape[1] != 2:
            raise ValueError(f"feature export needs feature_dim=2, extractor emits {feats.shape[1]}; "
                             "retrain with feature_dim 2")
        for uid, f, y in zip(test_ids, feats, test_batch.labels):
            rows.append((int(k), uid, float(f[0]), float(f[1]), int(y)))
    return rows


def write_features_csv(rows, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURES_HEADER)
        for k, uid, f1, f2, y in rows:
            w.writerow([k, uid, _fmt(f1), _fmt(f2), y])


def read_features_csv(path):
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != FEATURES_HEADER:
            raise ValueError(f"{path}: expected header {FEATURES_HEADER}, got {header}")
        return [(int(k), uid, float(a), float(b), int(y)) for k, uid, a, b, y in reader]


def class_means(rows):
    """``{(client, label): mean feature vector}``."""
    acc = {}
    for k, _, f1, f2, y in rows:
        acc.setdefault((k, y), []).append((f1, f2))
    return {key: np.mean(np.array(v), axis=0) for key, v in acc.items()}


def _cos(a, b):
    na, nb = float(a @ a), float(b @ b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b) / math.sqrt(na * nb)


def feature_consistency_score(rows):
    """Mean over classes of the mean pairwise cosine between clients' per-class
    feature means. Pairs where a client lacks the class are skipped."""
    means = class_means(rows)
    clients = sorted({k for k, _ in means})
    labels = sorted({y for _, y in means})
    if len(clients) < 2:
        raise ValueError("consistency needs features from at least 2 clients")
    per_class = []
    for y in labels:
        sims = [_cos(means[(a, y)], means[(b, y)]) for a, b in itertools.combinations(clients, 2)
                if (a, y) in means and (b, y) in means]
        if sims:
            per_class.append(float(np.mean(sims)))
    if not per_class:
        raise ValueError("no class is shared by two clients")
    return float(np.mean(per_class))


# ---------------------------------------------------------------- multi-run


def run_seeds(cfg, out_root=None):
    """``run_experiment`` for each configured seed; outputs under ``seed_{s}``."""
    outcomes = []
    for s in cfg.seeds:
        out = Path(out_root) / f"seed_{s}" if out_root else None
        outcomes.append(run_experiment(cfg, s, out))
    return outcomes


def mean_rounds_to_target(curves, target, unreached_as):
    """Seed mean of rounds-to-target, counting an unreached run as ``unreached_as``."""
    vals = []
    for c in curves:
        r = rounds_to_target(c, target)
        vals.append(unreached_as if r == UNREACHED else r)
    return float(np.mean(vals))


def expand_grid(grid):
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def sweep(cfg, grid, out_root=None):
    """Train every grid point for every seed. Returns (raw_rows, summary_rows)."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid must be nonempty")
    keys = sorted(grid)
    raw, summary = [], []
    for point in expand_grid(grid):
        pcfg = cfg.replace(**point)
        tag = "_".join(f"{k}={point[k]}" for k in keys)
        maxes = []
        for s in cfg.seeds:
            out = Path(out_root) / tag / f"seed_{s}" if out_root else None
            res = run_experiment(pcfg, s, out).result
            raw.append({**point, "seed": s, "max_accuracy": res.max_accuracy, "final_accuracy": res.final_accuracy})
            maxes.append(res.max_accuracy)
        summary.append({**point, "n_seeds": len(maxes), "mean_max_accuracy": float(np.mean(maxes)),
                        "std_max_accuracy": float(np.std(maxes))})
    return raw, summary


def write_rows_csv(rows, path):
    if not rows:
        raise ValueError("no rows to write")
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()})
