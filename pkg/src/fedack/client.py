"""Client-side local round: train D1/D2, then the extractor, then the local
generator, and hand the shared networks back to the server."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .losses import cls_loss, disc_total_loss, extractor_total_loss, local_gen_loss
from .models import (
    N_CLASSES,
    UserBatch,
    discriminator_forward,
    extractor_forward,
    generator_forward,
)
from .numkit import AdamState, ParamSet

log = logging.getLogger(__name__)


@dataclass
class Broadcast:
    global_gen: ParamSet
    global_extractor: ParamSet
    global_disc: ParamSet
    round: int


@dataclass
class ClientUpdate:
    client_id: int
    extractor: ParamSet
    d1: ParamSet
    n_k: int
    counts: list
    loss: float = float("nan")

    def to_dict(self):
        return {"client_id": self.client_id, "extractor": self.extractor.to_dict(), "d1": self.d1.to_dict(),
                "n_k": self.n_k, "counts": list(self.counts), "loss": self.loss}

    @classmethod
    def from_dict(cls, obj):
        return cls(int(obj["client_id"]), ParamSet.from_dict(obj["extractor"]), ParamSet.from_dict(obj["d1"]),
                   int(obj["n_k"]), [int(c) for c in obj["counts"]], float(obj.get("loss", "nan")))


@dataclass
class ClientState:
    client_id: int
    shard: UserBatch
    extractor: ParamSet
    d1: ParamSet
    d2: ParamSet
    local_gen: ParamSet
    extractor_prev: ParamSet
    noise_dim: int
    global_gen: ParamSet | None = None
    global_extractor: ParamSet | None = None
    opts: dict = field(default_factory=dict)
    stage_losses: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return len(self.shard)

    def label_counts(self):
        return np.bincount(self.shard.labels, minlength=N_CLASSES).tolist()


def client_seed(global_seed, round_index, client_id):
    """Seed material for one client's round; feed to ``np.random.default_rng``."""
    return [int(global_seed), int(round_index), int(client_id)]


def _minibatches(rng, n, batch):
    perm = rng.permutation(n)
    return [perm[i:i + batch] for i in range(0, n, batch)]


def _check_finite(value, what):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what}: {value}")


def receive_broadcast(state, msg, lr=0.01):
    """Overwrite local extractor and D1 with the global copies, cache the global
    generator and a frozen copy of the global extractor, reset optimizers."""
    if not state.extractor.compatible(msg.global_extractor):
        raise ValueError(f"client {state.client_id}: broadcast extractor incompatible with local extractor")
    if not state.d1.compatible(msg.global_disc):
        raise ValueError(f"client {state.client_id}: broadcast discriminator incompatible with local D1")
    state.extractor.assign(msg.global_extractor)
    state.d1.assign(msg.global_disc)
    state.global_gen = msg.global_gen.copy() if msg.global_gen is not None else None
    state.global_extractor = msg.global_extractor.copy()
    state.opts = {name: AdamState(learning_rate=lr) for name in ("extractor", "d1", "d2", "local_gen")}
    return state


def stage1_train_discriminators(state, epochs, batch, weights, rng):
    """Train D1 and D2 on the stage-1 objective with the extractor and both
    generators frozen."""
    state.stage_losses["stage1"] = []
    if state.n_samples == 0:
        log.warning("client %d: empty shard, skipping stage 1", state.client_id)
        return state
    reps_all = extractor_forward(state.extractor.frozen(), state.shard).data
    g_frozen = state.global_gen.frozen()
    gk_frozen = state.local_gen.frozen()
    labels_all = state.shard.labels
    for _ in range(epochs):
        total = 0.0
        batches = _minibatches(rng, state.n_samples, batch)
        for idx in batches:
            y = labels_all[idx]
            z = rng.standard_normal((len(idx), state.noise_dim))
            g_pseudo = generator_forward(g_frozen, z, y).features.data
            zk = rng.standard_normal((len(idx), state.noise_dim))
            yk = rng.integers(0, N_CLASSES, size=len(idx))
            gk_pseudo = generator_forward(gk_frozen, zk, yk).features.data
            loss, _ = disc_total_loss(state.d1, state.d2, reps_all[idx], y, g_pseudo, gk_pseudo, weights)
            _check_finite(float(loss.data), "stage-1 loss")
            nk.backward(loss)
            nk.adam_step(state.d1, state.opts["d1"])
            nk.adam_step(state.d2, state.opts["d2"])
            total += float(loss.data)
        state.stage_losses["stage1"].append(total / len(batches))
    return state


def stage2_train_extractor(state, epochs, batch, weights, rng):
    """Train the extractor with D1/D2 frozen; the global and previous-round
    extractors supply the contrastive anchors."""
    state.stage_losses["stage2"] = []
    if state.n_samples == 0:
        log.warning("client %d: empty shard, skipping stage 2", state.client_id)
        return state
    d1, d2 = state.d1.frozen(), state.d2.frozen()
    glo, prev = state.global_extractor.frozen(), state.extractor_prev.frozen()
    for _ in range(epochs):
        total = 0.0
        batches = _minibatches(rng, state.n_samples, batch)
        for idx in batches:
            loss, _ = extractor_total_loss(state.extractor, d1, d2, state.shard.take(idx), glo, prev, weights)
            _check_finite(float(loss.data), "stage-2 loss")
            nk.backward(loss)
            nk.adam_step(state.extractor, state.opts["extractor"])
            total += float(loss.data)
        state.stage_losses["stage2"].append(total / len(batches))
    return state


def stage3_train_local_generator(state, epochs, batch, rng):
    """Train G_k with D1/D2 frozen; one step per real minibatch slot, each on a
    fresh batch of noise with uniform labels."""
    state.stage_losses["stage3"] = []
    if state.n_samples == 0:
        return state
    d1, d2 = state.d1.frozen(), state.d2.frozen()
    steps = math.ceil(state.n_samples / batch)
    for _ in range(epochs):
        total = 0.0
        for _ in range(steps):
            z = rng.standard_normal((batch, state.noise_dim))
            y = rng.integers(0, N_CLASSES, size=batch)
            loss, _ = local_gen_loss(state.local_gen, d1, d2, z, y)
            _check_finite(float(loss.data), "stage-3 loss")
            nk.backward(loss)
            nk.adam_step(state.local_gen, state.opts["local_gen"])
            total += float(loss.data)
        state.stage_losses["stage3"].append(total / steps)
    return state


def local_round(state, msg, epochs, batch, lr, weights, round_seed):
    """Full client round. Deterministic given (state, msg, round_seed)."""
    rng = np.random.default_rng(round_seed)
    receive_broadcast(state, msg, lr)
    stage1_train_discriminators(state, epochs, batch, weights, rng)
    stage2_train_extractor(state, epochs, batch, weights, rng)
    stage3_train_local_generator(state, epochs, batch, rng)
    state.extractor_prev = state.extractor.copy()
    s2 = state.stage_losses.get("stage2") or [float("nan")]
    update = ClientUpdate(state.client_id, state.extractor.copy(), state.d1.copy(), state.n_samples,
                          state.label_counts(), s2[-1])
    return state, update


def baseline_local_round(state, msg, epochs, batch, lr, round_seed, prox_rho=0.0):
    """FedAvg local training (cross-entropy through extractor + D1); with
    ``prox_rho > 0`` adds the FedProx term ``rho/2 * ||theta - theta_global||^2``."""
    rng = np.random.default_rng(round_seed)
    receive_broadcast(state, msg, lr)
    anchor = nk.merge(e=msg.global_extractor, d=msg.global_disc).frozen()
    trainable = nk.merge(e=state.extractor, d=state.d1)
    last = float("nan")
    state.stage_losses["local"] = []
    if state.n_samples == 0:
        log.warning("client %d: empty shard, nothing to train", state.client_id)
    for _ in range(epochs if state.n_samples else 0):
        total = 0.0
        batches = _minibatches(rng, state.n_samples, batch)
        for idx in batches:
            loss = local_cls_loss(state.extractor, state.d1, state.shard.take(idx))
            if prox_rho > 0:
                loss = nk.add(loss, nk.mul(proximal_term(trainable, anchor), 0.5 * prox_rho))
            _check_finite(float(loss.data), "local loss")
            nk.backward(loss)
            nk.adam_step(state.extractor, state.opts["extractor"])
            nk.adam_step(state.d1, state.opts["d1"])
            total += float(loss.data)
        last = total / len(batches)
        state.stage_losses["local"].append(last)
    state.extractor_prev = state.extractor.copy()
    update = ClientUpdate(state.client_id, state.extractor.copy(), state.d1.copy(), state.n_samples,
                          state.label_counts(), last)
    return state, update


def local_cls_loss(extractor, disc, batch):
    return cls_loss(discriminator_forward(disc, extractor_forward(extractor, batch)), batch.labels)


def proximal_term(params, anchor):
    """``sum ||p - p_anchor||^2`` over aligned parameter sets."""
    out = None
    for (_, p), (_, a) in zip(params, anchor):
        sq = nk.sum(nk.square(nk.add(p, nk.neg(a))))
        out = sq if out is None else nk.add(out, sq)
    return out
