import numpy as np
import pytest

from fedack import numkit as nk
from fedack.client import (
    Broadcast,
    ClientState,
    ClientUpdate,
    baseline_local_round,
    client_seed,
    local_round,
    receive_broadcast,
    stage1_train_discriminators,
    stage2_train_extractor,
    stage3_train_local_generator,
)
from fedack.data import synth_dataset
from fedack.losses import LossWeights, cls_loss, diversity_loss
from fedack.models import (
    DiscriminatorConfig,
    ExtractorConfig,
    GeneratorConfig,
    discriminator_forward,
    extractor_forward,
    generator_forward,
    init_discriminator,
    init_extractor,
    init_generator,
    predict,
    tensorize,
)

from conftest import jitter

E = ExtractorConfig(prop_dim=4, embed_dim=6, hidden_dim=16, feature_dim=8, attention_dim=8)
DC = DiscriminatorConfig(feature_dim=8, hidden=(16,))
GC = GeneratorConfig(feature_dim=8, noise_dim=4, hidden=(16,))
W = LossWeights()


def make_client(n=48, seed=0, sep=2.0, client_id=0):
    rng = np.random.default_rng(seed)
    ds = synth_dataset(max(n, 2), E.prop_dim, E.embed_dim, (1, 3), (2, 4), sep, seed)
    users = ds.users[:n]
    ext = init_extractor(E, rng)
    d1 = init_discriminator(DC, rng)
    return ClientState(client_id, tensorize(users, E.prop_dim, E.embed_dim), ext, d1,
                       init_discriminator(DC, rng), init_generator(GC, rng), ext.copy(), GC.noise_dim)


def broadcast_for(state, seed=1):
    rng = np.random.default_rng(seed)
    return Broadcast(init_generator(GC, rng), state.extractor.copy(), state.d1.copy(), 1)


def received(seed=0, **kw):
    st = make_client(seed=seed, **kw)
    return receive_broadcast(st, broadcast_for(st, seed + 1))


def prints(st):
    return {k: getattr(st, k).fingerprint() for k in ("extractor", "d1", "d2", "local_gen", "extractor_prev")}


# ---------------------------------------------------------------- broadcast


def test_receive_own_params_keeps_values_and_prev():
    st = make_client()
    before = prints(st)
    receive_broadcast(st, broadcast_for(st))
    assert prints(st) == before
    assert st.global_extractor.fingerprint() == st.extractor.fingerprint()
    assert set(st.opts) == {"extractor", "d1", "d2", "local_gen"}


def test_two_clients_agree_after_same_broadcast():
    a, b = make_client(seed=0), make_client(seed=5)
    msg = broadcast_for(a)
    receive_broadcast(a, msg)
    receive_broadcast(b, msg)
    assert a.extractor.fingerprint() == b.extractor.fingerprint()
    assert a.d1.fingerprint() == b.d1.fingerprint()
    assert a.global_gen is not msg.global_gen


def test_receive_rejects_incompatible_broadcast():
    st = make_client()
    bad = init_discriminator(DiscriminatorConfig(8, (5,)), np.random.default_rng(0))
    with pytest.raises(ValueError, match="discriminator"):
        receive_broadcast(st, Broadcast(None, st.extractor.copy(), bad, 1))


# ---------------------------------------------------------------- stage isolation


def test_stage_isolation():
    st = received()
    rng = np.random.default_rng(0)
    p0 = prints(st)
    stage1_train_discriminators(st, 1, 16, W, rng)
    p1 = prints(st)
    assert p1["extractor"] == p0["extractor"] and p1["local_gen"] == p0["local_gen"]
    assert p1["d1"] != p0["d1"] and p1["d2"] != p0["d2"]
    stage2_train_extractor(st, 1, 16, W, rng)
    p2 = prints(st)
    assert p2["d1"] == p1["d1"] and p2["d2"] == p1["d2"] and p2["local_gen"] == p1["local_gen"]
    assert p2["extractor"] != p1["extractor"] and p2["extractor_prev"] == p0["extractor_prev"]
    stage3_train_local_generator(st, 1, 16, rng)
    p3 = prints(st)
    assert {k: p3[k] for k in ("extractor", "d1", "d2")} == {k: p2[k] for k in ("extractor", "d1", "d2")}
    assert p3["local_gen"] != p2["local_gen"]


def test_zero_epochs_change_nothing():
    st = received()
    p0 = prints(st)
    rng = np.random.default_rng(0)
    stage1_train_discriminators(st, 0, 16, W, rng)
    stage2_train_extractor(st, 0, 16, LossWeights(mu=0.0, gamma=0.0), rng)
    stage3_train_local_generator(st, 0, 16, rng)
    assert prints(st) == p0


# ---------------------------------------------------------------- stage behaviour


def test_stage1_learns_separable_shard():
    # scenario-default widths and batch; small batches let -gamma*L_adv invert D1
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        ds = synth_dataset(200, class_sep=4.0, seed=seed)
        ext, d1 = init_extractor(ExtractorConfig(), rng), init_discriminator(DiscriminatorConfig(), rng)
        st = ClientState(0, tensorize(ds.users, 8, 16), ext, d1, init_discriminator(DiscriminatorConfig(), rng),
                         init_generator(GeneratorConfig(), rng), ext.copy(), 16)
        receive_broadcast(st, Broadcast(init_generator(GeneratorConfig(), rng), ext.copy(), d1.copy(), 1))
        stage1_train_discriminators(st, 5, 64, W, np.random.default_rng(seed))
        accs.append(np.mean(predict(st.extractor, st.d1, st.shard) == st.shard.labels))
    assert np.mean(accs) >= 0.9


def test_stage1_plain_classifier_loss_decreases():
    st = received(n=96, sep=4.0)
    stage1_train_discriminators(st, 3, 16, LossWeights(alpha_kd=0.0, gamma=0.0), np.random.default_rng(0))
    losses = st.stage_losses["stage1"]
    assert len(losses) == 3 and losses[0] > losses[1] > losses[2]


def _mean_cos(a, b):
    return float(np.mean(nk.cosine_similarity(a, b).data))


def test_stage2_pulls_towards_global_extractor():
    st = received(n=96)
    rng = np.random.default_rng(3)
    jitter(st.extractor, rng, 0.5)
    held = make_client(n=40, seed=9).shard
    glo = extractor_forward(st.global_extractor.frozen(), held)
    before = _mean_cos(extractor_forward(st.extractor.frozen(), held), glo)
    stage2_train_extractor(st, 5, 16, LossWeights(gamma=0.5, mu=0.5), rng)
    after = _mean_cos(extractor_forward(st.extractor.frozen(), held), glo)
    assert after > before


def test_stage2_ignores_prev_when_mu_zero():
    ws = LossWeights(mu=0.0)
    outs = []
    for scale in (0.0, 1.0):
        st = received(n=32)
        jitter(st.extractor_prev, np.random.default_rng(4), scale)
        stage2_train_extractor(st, 2, 16, ws, np.random.default_rng(5))
        outs.append(st.extractor.fingerprint())
    assert outs[0] == outs[1]


def test_stage3_improves_classification_without_collapse():
    st = received(n=96, sep=4.0)
    stage1_train_discriminators(st, 3, 16, W, np.random.default_rng(0))
    rng = np.random.default_rng(11)
    z, y = rng.standard_normal((64, GC.noise_dim)), rng.integers(0, 2, 64)

    def d1_ce():
        x = generator_forward(st.local_gen.frozen(), z, y).features
        return float(cls_loss(discriminator_forward(st.d1.frozen(), x), y).data)

    before = d1_ce()
    stage3_train_local_generator(st, 5, 16, np.random.default_rng(1))
    assert d1_ce() < before
    pseudo = generator_forward(st.local_gen.frozen(), z, y)
    assert float(diversity_loss(pseudo.features, z).data) < 1.0


# ---------------------------------------------------------------- local round


def test_local_round_deterministic_and_snapshots_prev():
    runs = []
    for _ in range(2):
        st = make_client()
        msg = broadcast_for(st)
        st, upd = local_round(st, msg, 2, 16, 0.01, W, client_seed(0, 1, 0))
        runs.append(upd)
        assert st.extractor_prev.fingerprint() == st.extractor.fingerprint()
        assert st.extractor_prev["att.W"] is not st.extractor["att.W"]
    a, b = runs
    assert a.extractor.fingerprint() == b.extractor.fingerprint()
    assert a.d1.fingerprint() == b.d1.fingerprint() and a.loss == b.loss
    assert a.n_k == 48 and sum(a.counts) == 48


def test_round_seed_matters():
    a = local_round(make_client(), broadcast_for(make_client()), 1, 16, 0.01, W, client_seed(0, 1, 0))[1]
    b = local_round(make_client(), broadcast_for(make_client()), 1, 16, 0.01, W, client_seed(0, 2, 0))[1]
    assert a.extractor.fingerprint() != b.extractor.fingerprint()


def test_empty_shard_echoes_broadcast():
    st = make_client(n=0)
    msg = Broadcast(init_generator(GC, np.random.default_rng(3)),
                    jitter(st.extractor.copy(), np.random.default_rng(4)), st.d1.copy(), 2)
    st, upd = local_round(st, msg, 2, 16, 0.01, W, client_seed(0, 2, 0))
    assert upd.n_k == 0 and upd.counts == [0, 0]
    assert upd.extractor.fingerprint() == msg.global_extractor.fingerprint()
    assert upd.d1.fingerprint() == msg.global_disc.fingerprint()


def test_update_wire_format_roundtrip():
    _, upd = local_round(make_client(), broadcast_for(make_client()), 1, 16, 0.01, W, [0, 1, 0])
    obj = upd.to_dict()
    assert obj["n_k"] == 48 and len(obj["counts"]) == 2
    back = ClientUpdate.from_dict(obj)
    assert back.extractor.fingerprint() == upd.extractor.fingerprint() and back.counts == upd.counts


def test_baseline_round_trains_only_shared_nets():
    st = make_client()
    p0 = prints(st)
    msg = Broadcast(None, st.extractor.copy(), st.d1.copy(), 1)
    st, upd = baseline_local_round(st, msg, 2, 16, 0.01, [0, 1, 0], prox_rho=0.0)
    p1 = prints(st)
    assert p1["d2"] == p0["d2"] and p1["local_gen"] == p0["local_gen"]
    assert p1["extractor"] != p0["extractor"] and np.isfinite(upd.loss)
