"""Server side: client selection, weighted aggregation, global-generator
distillation and the per-round orchestration for FedACK and the baselines."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .client import Broadcast, baseline_local_round, client_seed, local_round
from .data import LabelStats
from .losses import LossWeights, global_gen_loss
from .models import N_CLASSES, accuracy
from .numkit import AdamState, ParamSet

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedprox")


@dataclass(frozen=True)
class SelectionPolicy:
    fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("selection fraction must lie in (0, 1]")


@dataclass(frozen=True)
class RoundConfig:
    epochs: int = 5
    batch: int = 64
    lr: float = 0.01
    weights: LossWeights = LossWeights()
    distill_steps: int | None = None  # defaults to ``epochs``
    distill_batch: int = 64
    prox_rho: float = 0.01
    finetune_global_disc: bool = False
    workers: int = 1


@dataclass
class ServerState:
    global_extractor: ParamSet
    global_disc: ParamSet
    global_gen: ParamSet | None = None
    gen_opt: AdamState = field(default_factory=AdamState)
    disc_opt: AdamState = field(default_factory=AdamState)
    round: int = 0
    known_counts: dict = field(default_factory=dict)

    def accumulated_stats(self):
        ids = sorted(self.known_counts)
        counts = np.array([self.known_counts[k] for k in ids], dtype=int).reshape(len(ids), N_CLASSES)
        return LabelStats(counts)


@dataclass
class RoundReport:
    round: int
    accuracy: float
    mean_loss: float
    participants: list
    label_counts: list

    def to_dict(self):
        return {"round": self.round, "accuracy": self.accuracy, "mean_loss": self.mean_loss,
                "participants": list(self.participants), "label_counts": self.label_counts}


def n_selected(fraction, n_clients):
    return max(1, int(np.floor(fraction * n_clients + 0.5)))


def select_clients(policy, n_clients, round_index):
    """Uniform sample without replacement, sorted ascending."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    rng = np.random.default_rng([int(policy.seed), int(round_index), 101])
    chosen = rng.choice(n_clients, size=n_selected(policy.fraction, n_clients), replace=False)
    return sorted(int(k) for k in chosen)


def _weighted_average(sets, weights):
    """``ref + sum_k w_k (theta_k - ref)`` with ``ref`` the first set: identical
    inputs come back bit-exact, and the result equals ``sum_k w_k theta_k``."""
    ref = sets[0]
    out = []
    for name, t in ref:
        acc = np.zeros_like(t.data)
        for w, s in zip(weights, sets):
            acc = acc + w * (s[name].data - t.data)
        out.append((name, t.data + acc))
    return ParamSet(out)


def aggregate(updates):
    """Sample-size weighted average of the extractors and D1s, summed in
    ascending client-id order. Returns (extractor, disc)."""
    if not updates:
        raise ValueError("aggregate needs at least one update")
    updates = sorted(updates, key=lambda u: u.client_id)
    first = updates[0]
    for u in updates[1:]:
        if not (u.extractor.compatible(first.extractor) and u.d1.compatible(first.d1)):
            raise ValueError(f"update from client {u.client_id} is not aggregation-compatible")
    sizes = np.array([u.n_k for u in updates], dtype=float)
    if sizes.sum() == 0:
        log.warning("all participating clients report zero samples; using an unweighted mean")
        weights = np.full(len(updates), 1.0 / len(updates))
    else:
        weights = sizes / sizes.sum()
    ext = _weighted_average([u.extractor for u in updates], weights)
    disc = _weighted_average([u.d1 for u in updates], weights)
    return ext, disc


def sample_generator_inputs(p_y, batch, noise_dim, rng):
    y = rng.choice(len(p_y), size=batch, p=p_y)
    z = rng.standard_normal((batch, noise_dim))
    return z, y


def distill_global_generator(state, teacher_d1s, ratios, p_y, steps, batch, rng, finetune_disc=False):
    """``steps`` Adam updates of the global generator on the server objective
    with frozen teachers. ``finetune_disc`` additionally updates the global D on
    the same signal. Returns the per-step losses."""
    p_y = np.asarray(p_y, dtype=float)
    if np.any(p_y == 0):
        log.warning("classes %s absent from label statistics; never sampled", np.flatnonzero(p_y == 0).tolist())
    if not teacher_d1s:
        return []
    teachers = [t.frozen() for t in teacher_d1s]
    noise_dim = state.global_gen["mlp.0.W"].shape[0] - len(p_y)
    losses = []
    for _ in range(steps):
        z, y = sample_generator_inputs(p_y, batch, noise_dim, rng)
        disc = state.global_disc if finetune_disc else state.global_disc.frozen()
        loss, _ = global_gen_loss(teachers, ratios, disc, state.global_gen, z, y)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite generator loss at round {state.round}")
        nk.backward(loss)
        nk.adam_step(state.global_gen, state.gen_opt)
        if finetune_disc:
            nk.adam_step(state.global_disc, state.disc_opt)
        losses.append(float(loss.data))
    return losses


def _run_clients(fn, clients, selected, args_for):
    """Run ``fn(state, *args)`` for each selected client; returns updates in
    ``selected`` order and writes the new states back into ``clients``."""
    jobs = [(k, args_for(k)) for k in selected]
    workers = getattr(args_for, "workers", 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, clients[k], *a) for k, a in jobs]
            results = [f.result() for f in futures]
    else:
        results = [fn(clients[k], *a) for k, a in jobs]
    updates = []
    for (k, _), (state, update) in zip(jobs, results):
        clients[k] = state
        updates.append(update)
    return updates


def _evaluate(state, test_batch):
    return accuracy(state.global_extractor, state.global_disc, test_batch) if test_batch is not None else float("nan")


def _mean_loss(updates):
    vals = [u.loss for u in updates if u.n_k > 0 and np.isfinite(u.loss)]
    return float(np.mean(vals)) if vals else float("nan")


def run_round(state, clients, cfg, policy, test_batch, seed):
    """One FedACK round: select, broadcast, local rounds, aggregate, distill the
    global generator against this round's D1 teachers, evaluate."""
    t = state.round + 1
    selected = select_clients(policy, len(clients), t)
    msg = Broadcast(state.global_gen.copy(), state.global_extractor.copy(), state.global_disc.copy(), t)

    def args_for(k):
        return (msg, cfg.epochs, cfg.batch, cfg.lr, cfg.weights, client_seed(seed, t, k))

    args_for.workers = cfg.workers
    updates = _run_clients(local_round, clients, selected, args_for)

    state.global_extractor, state.global_disc = aggregate(updates)
    for u in updates:
        state.known_counts[u.client_id] = list(u.counts)
    active = [u for u in sorted(updates, key=lambda u: u.client_id) if u.n_k > 0]
    round_stats = LabelStats(np.array([u.counts for u in active], dtype=int).reshape(len(active), N_CLASSES))
    steps = cfg.epochs if cfg.distill_steps is None else cfg.distill_steps
    rng = np.random.default_rng([int(seed), t, 202])
    distill_global_generator(state, [u.d1 for u in active], round_stats.ratios,
                             state.accumulated_stats().p_y, steps, cfg.distill_batch, rng,
                             cfg.finetune_global_disc)
    state.round = t
    if not (state.global_extractor.is_finite() and state.global_disc.is_finite() and state.global_gen.is_finite()):
        raise FloatingPointError(f"non-finite global parameters after round {t}")
    report = RoundReport(t, _evaluate(state, test_batch), _mean_loss(updates), selected,
                         [list(u.counts) for u in updates])
    return state, report


def baseline_round(state, clients, strategy, cfg, policy, test_batch, seed):
    """FedAvg / FedProx round over the same extractor + classifier head."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    t = state.round + 1
    selected = select_clients(policy, len(clients), t)
    msg = Broadcast(None, state.global_extractor.copy(), state.global_disc.copy(), t)
    rho = cfg.prox_rho if strategy == "fedprox" else 0.0

    def args_for(k):
        return (msg, cfg.epochs, cfg.batch, cfg.lr, client_seed(seed, t, k), rho)

    args_for.workers = cfg.workers
    updates = _run_clients(baseline_local_round, clients, selected, args_for)
    state.global_extractor, state.global_disc = aggregate(updates)
    for u in updates:
        state.known_counts[u.client_id] = list(u.counts)
    state.round = t
    if not (state.global_extractor.is_finite() and state.global_disc.is_finite()):
        raise FloatingPointError(f"non-finite global parameters after round {t}")
    report = RoundReport(t, _evaluate(state, test_batch), _mean_loss(updates), selected,
                         [list(u.counts) for u in updates])
    return state, report
