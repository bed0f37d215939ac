"""Federated losses: classification, distillation, adversarial, contrastive and
diversity terms, and the composite objectives built from them.

Composite losses return ``(total, parts)`` where ``parts`` maps component names
to the scalar tensors that were summed, so callers can log or audit them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .models import discriminator_forward, extractor_forward, generator_forward, onehot

KL_FLOOR = 1e-12
LOG_KL_FLOOR = math.log(KL_FLOOR)


@dataclass(frozen=True)
class LossWeights:
    alpha_kd: float = 1.0
    gamma: float = 0.5
    mu: float = 0.5
    tau: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature tau must be > 0")
        for name in ("alpha_kd", "gamma", "mu"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


# ---------------------------------------------------------------- primitives


def cls_loss(logits, labels):
    """Mean cross-entropy of ``logits`` (B, C) against integer labels."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("cls_loss on an empty batch")
    logits = nk.as_tensor(logits)
    target = onehot(labels, logits.shape[-1])
    picked = nk.sum(nk.mul(nk.log_softmax(logits, axis=-1), target), axis=-1)
    return nk.neg(nk.mean(picked))


def kl_divergence(p, q):
    """KL(p || q) of two probability vectors, with q clamped below at 1e-12."""
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), KL_FLOOR)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def kl_logits(student, target):
    """Batch mean of KL(softmax(student) || softmax(target)) for (B, C) logits.
    Pass a detached ``target`` to stop gradient into that side."""
    logp = nk.log_softmax(student, axis=-1)
    logq = nk.maximum(nk.log_softmax(target, axis=-1), LOG_KL_FLOOR)
    p = nk.exp(logp)
    per_row = nk.sum(nk.mul(p, nk.add(logp, nk.neg(logq))), axis=-1)
    return nk.mean(per_row)


def kd_loss(d1, reps, pseudo):
    """Distillation from pseudo-data: KL(D1(real) || D1(pseudo)), pseudo side detached."""
    reps, pseudo = nk.as_tensor(reps), nk.as_tensor(pseudo)
    if reps.shape[0] != pseudo.shape[0]:
        raise ValueError(f"batch size mismatch: {reps.shape[0]} reps vs {pseudo.shape[0]} pseudo")
    teacher = discriminator_forward(d1, pseudo).detach()
    return kl_logits(discriminator_forward(d1, reps), teacher)


def adv_loss(d1, d2, reps):
    """Disagreement KL(D1(x) || D2(x)) averaged over the batch."""
    return kl_logits(discriminator_forward(d1, reps), discriminator_forward(d2, reps))


def contrastive_loss(r, r_glo, r_pre, tau):
    """Per-sample ``-log softmax([sim(r, r_glo), sim(r, r_pre)] / tau)[0]`` with cosine
    similarity. ``r_glo`` and ``r_pre`` are detached. 1-D inputs give a scalar."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    r = nk.as_tensor(r)
    r_glo = nk.as_tensor(r_glo).detach()
    r_pre = nk.as_tensor(r_pre).detach()
    pos = nk.cosine_similarity(r, r_glo, axis=-1)
    neg = nk.cosine_similarity(r, r_pre, axis=-1)
    pair_shape = pos.shape + (1,)
    logits = nk.mul(nk.concat([nk.reshape(pos, pair_shape), nk.reshape(neg, pair_shape)], axis=-1), 1.0 / tau)
    return nk.neg(_first(nk.log_softmax(logits, axis=-1)))


def _first(logp):
    """Select column 0 of the trailing pair axis."""
    sel = np.zeros(logp.shape)
    sel[..., 0] = 1.0
    return nk.sum(nk.mul(logp, sel), axis=-1)


def diversity_loss(features, noise):
    """``exp(mean_ij -||x_i - x_j|| * ||z_i - z_j||)``; 1 for a collapsed batch."""
    features = nk.as_tensor(features)
    z = np.asarray(noise, dtype=float)
    dz = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=-1))
    dx = nk.pairwise_distance(features)
    return nk.exp(nk.neg(nk.mean(nk.mul(dx, dz))))


# ---------------------------------------------------------------- composites


def disc_total_loss(d1, d2, reps, labels, g_pseudo, gk_pseudo, weights):
    """Stage-1 discriminator objective.

    ``L_cls + alpha*(L_dis + L_dis') + gamma*(L_advg - L_adv)`` where ``L_cls`` sums
    the cross-entropy of both discriminators on the real representations and on
    the global generator's pseudo-samples (which carry the real batch's labels).
    ``gk_pseudo`` are the local generator's features.
    """
    labels = np.asarray(labels, dtype=int)
    parts = {}
    parts["cls"] = nk.add(
        nk.add(cls_loss(discriminator_forward(d1, reps), labels), cls_loss(discriminator_forward(d2, reps), labels)),
        nk.add(cls_loss(discriminator_forward(d1, g_pseudo), labels),
               cls_loss(discriminator_forward(d2, g_pseudo), labels)),
    )
    parts["dis1"] = kd_loss(d1, reps, g_pseudo)
    parts["dis2"] = kd_loss(d2, reps, g_pseudo)
    parts["adv"] = adv_loss(d1, d2, reps)
    parts["advg"] = adv_loss(d1, d2, gk_pseudo)
    total = nk.add(
        nk.add(parts["cls"], nk.mul(nk.add(parts["dis1"], parts["dis2"]), weights.alpha_kd)),
        nk.mul(nk.add(parts["advg"], nk.neg(parts["adv"])), weights.gamma),
    )
    return total, parts


def extractor_total_loss(extractor, d1, d2, batch, global_extractor, prev_extractor, weights):
    """Stage-2 extractor objective ``L_cls + gamma*L_adv + mu*mean(L_con)``.

    Discriminators and both reference extractors should be passed frozen; the
    reference representations are detached regardless.
    """
    r = extractor_forward(extractor, batch)
    r_glo = extractor_forward(global_extractor, batch).detach()
    r_pre = extractor_forward(prev_extractor, batch).detach()
    parts = {
        "cls": cls_loss(discriminator_forward(d1, r), batch.labels),
        "adv": adv_loss(d1, d2, r),
        "con": nk.mean(contrastive_loss(r, r_glo, r_pre, weights.tau)),
    }
    total = nk.add(nk.add(parts["cls"], nk.mul(parts["adv"], weights.gamma)), nk.mul(parts["con"], weights.mu))
    return total, parts


def local_gen_loss(gen, d1, d2, z, labels):
    """Stage-3 local generator objective ``L_cls - L_advg + L_var``; ``L_cls`` is the
    mean of the two discriminators' cross-entropies on the generated batch."""
    pseudo = generator_forward(gen, z, labels)
    x = pseudo.features
    l1 = discriminator_forward(d1, x)
    l2 = discriminator_forward(d2, x)
    parts = {
        "cls": nk.mul(nk.add(cls_loss(l1, pseudo.labels), cls_loss(l2, pseudo.labels)), 0.5),
        "advg": kl_logits(l1, l2),
        "var": diversity_loss(x, pseudo.noise),
    }
    total = nk.add(nk.add(parts["cls"], nk.neg(parts["advg"])), parts["var"])
    return total, parts


def global_gen_loss(teachers, ratios, global_d, gen, z, labels):
    """Server-side generator objective.

    ``(1/K) sum_k sum_i ratios[k, y_i] * (KL(D1^k(x_i) || D(x_i)) + CE(D1^k(x_i), y_i))``
    with ``x = G(z, y)``. Teachers and ``global_d`` act as fixed networks; pass
    frozen ParamSets so only the generator collects gradients. Terms with a zero
    ratio are skipped.
    """
    ratios = np.asarray(ratios, dtype=float)
    labels = np.asarray(labels, dtype=int)
    K = len(teachers)
    x = generator_forward(gen, z, labels).features
    global_logits = discriminator_forward(global_d, x)
    global_logq = nk.maximum(nk.log_softmax(global_logits, axis=-1), LOG_KL_FLOOR)
    target = onehot(labels, global_logits.shape[-1])
    kl_parts, cls_parts = [], []
    for k, teacher in enumerate(teachers):
        w = ratios[k, labels]
        if not np.any(w > 0):
            continue
        logp = nk.log_softmax(discriminator_forward(teacher, x), axis=-1)
        kl = nk.sum(nk.mul(nk.exp(logp), nk.add(logp, nk.neg(global_logq))), axis=-1)
        ce = nk.neg(nk.sum(nk.mul(logp, target), axis=-1))
        kl_parts.append(nk.sum(nk.mul(kl, w)))
        cls_parts.append(nk.sum(nk.mul(ce, w)))
    if not kl_parts:
        zero = nk.mul(nk.sum(x), 0.0)
        return zero, {"kl": zero, "cls": zero}
    parts = {"kl": _sum_all(kl_parts, 1.0 / K), "cls": _sum_all(cls_parts, 1.0 / K)}
    return nk.add(parts["kl"], parts["cls"]), parts


def _sum_all(ts, scale):
    out = ts[0]
    for t in ts[1:]:
        out = nk.add(out, t)
    return nk.mul(out, scale)
