import numpy as np
import pytest

from markerpred import autodiff as ad
from markerpred.autodiff import Tensor
from markerpred.cvae import CVAE, ConfigError, CvaeConfig
from markerpred.metrics import diversity
from markerpred.motion import MotionError
from markerpred.sampler import (DlowConfig, DlowSchedule, QNet, band_count, dlow_loss, sample_diverse,
                                train_dlow)

from conftest import TOY_DLOW


def tiny():
    cfg = CvaeConfig(n_markers=2, n_condition=3, n_future=5, d_hidden=6, d_z=2, d_band=3)
    return CVAE(cfg, seed=1)


def identity_q(cvae, L, K):
    q = QNet(DlowConfig(n_bands_sampled=L, n_samples=K, d_q=4), cvae.cfg.d_hidden, cvae.cfg.d_z)
    q.params.zero_()
    return q


def test_band_rule():
    assert band_count(45) == 9
    assert DlowConfig().n_samples == 50


def test_zero_q_is_identity(rng):
    m = tiny()
    q = identity_q(m, 3, 4)
    for k in range(4):
        for t in q.band_transforms(rng.normal(size=6), k):
            np.testing.assert_array_equal(t.scale, 1.0)
            np.testing.assert_array_equal(t.offset, 0.0)


def test_white_noise_when_no_band_is_transformed(rng):
    m = tiny()
    X = rng.normal(size=(3, 6))
    s = sample_diverse(X, 4, 0, m, None, np.random.default_rng(3))
    z = np.random.default_rng(3).standard_normal((1, 4, m.cfg.n_bands, m.cfg.d_z))
    np.testing.assert_array_equal(s.latents, z[0])
    np.testing.assert_allclose(s.samples, m.decode(X, z[0]).data, atol=1e-13)


def test_equal_transforms_give_equal_samples(rng):
    m = tiny()
    q = identity_q(m, m.cfg.n_bands, 3)
    s = sample_diverse(rng.normal(size=(3, 6)), 3, m.cfg.n_bands, m, q, rng)
    np.testing.assert_array_equal(s.samples[0], s.samples[1])
    np.testing.assert_array_equal(s.samples[0], s.samples[2])


def test_shared_noise_contract(rng):
    m = tiny()
    q = QNet(DlowConfig(n_bands_sampled=2, n_samples=3, d_q=4), 6, 2, seed=5)
    X = rng.normal(size=(3, 6))
    s = sample_diverse(X, 3, 2, m, q, np.random.default_rng(8))
    with ad.no_grad():
        a, b = q.transforms(m.condition(X)[0])
    eps = (s.latents[:, :2] - b.data[0]) / a.data[0]
    np.testing.assert_allclose(eps, np.broadcast_to(eps[0], eps.shape), atol=1e-10)


def test_sample_set_shape_and_layout(rng):
    from markerpred.motion import MotionSequence
    m = tiny()
    X = MotionSequence(rng.normal(size=(3, 6)), 15.0, "toy")
    s = sample_diverse(X, 5, 0, m, None, rng, seed=4)
    assert s.samples.shape == (5, 5, 6) and s.K == 5
    assert all(seq.layout == "toy" for seq in s.sequences())


def test_pair_validation(rng, tmp_path):
    m = tiny()
    X = rng.normal(size=(3, 6))
    q = identity_q(m, 2, 3)
    with pytest.raises(ConfigError):
        sample_diverse(X, 2, 2, m, None, rng)
    with pytest.raises(ConfigError):
        sample_diverse(X, 4, 2, m, q, rng)
    with pytest.raises(ConfigError):
        sample_diverse(X, 2, 3, m, q, rng)
    with pytest.raises(ConfigError):
        sample_diverse(X, 2, m.cfg.n_bands + 1, m, q, rng)
    q.meta["cvae_sha256"] = "0" * 64
    with pytest.raises(ConfigError):
        sample_diverse(X, 2, 2, m, q, rng)


def test_loss_closed_forms(rng):
    cfg = DlowConfig()
    Y = rng.normal(size=(1, 4, 3))
    same = np.repeat(Y[:, None], 2, axis=1)
    ones = Tensor(np.ones((1, 2, 3, 2)))
    parts = dlow_loss(same, (ones, Tensor(np.zeros((1, 2, 3, 2)))), Y, cfg)
    assert parts.kl.item() == 0.0
    assert parts.diversity.item() == 1.0
    assert parts.recon.item() == 0.0
    with pytest.raises(MotionError):
        dlow_loss(same[:, :1], None, Y, cfg)


def test_loss_matches_loops(rng):
    cfg = DlowConfig(lambda_recon=2.0, lambda_kl=0.7, lambda_div=3.0, sigma_div=2.0)
    B, K, N, D, L, dz = 2, 3, 4, 3, 2, 2
    S = rng.normal(size=(B, K, N, D))
    Y = rng.normal(size=(B, N, D))
    a, b = rng.uniform(0.5, 2, size=(B, K, L, dz)), rng.normal(size=(B, K, L, dz))
    parts = dlow_loss(S, (Tensor(a), Tensor(b)), Y, cfg)
    recon = np.mean([min(np.mean(np.sum((S[i, k] - Y[i]) ** 2, axis=1)) for k in range(K)) for i in range(B)])
    kl = np.mean([np.sum(0.5 * (b[i] ** 2 + a[i] ** 2 - 1 - np.log(a[i] ** 2))) for i in range(B)])
    div = np.mean([np.exp(-np.sum((S[i, p] - S[i, q]) ** 2) / 2.0)
                   for i in range(B) for p in range(K) for q in range(p + 1, K)])
    assert parts.recon.item() == pytest.approx(recon, rel=1e-12)
    assert parts.kl.item() == pytest.approx(kl, rel=1e-12)
    assert parts.diversity.item() == pytest.approx(div, rel=1e-12)
    assert parts.total.item() == pytest.approx(2 * recon + 0.7 * kl + 3 * div, rel=1e-12)


def test_sampler_gradient_matches_fd(rng):
    m = tiny()
    q = QNet(DlowConfig(n_bands_sampled=2, n_samples=3, d_q=4, sigma_div=5.0), 6, 2, seed=2)
    X, Y = rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 5, 6))
    seed = 13

    def loss():
        from markerpred.sampler import _latents
        r = np.random.default_rng(seed)
        cond = m.condition(X)
        z, tr = _latents(m, q, cond[0], 3, 2, r)
        rep = np.repeat(np.arange(2), 3)
        out = m.decode(None, z, cond=(cond[0][rep], cond[1][rep], cond[2][rep]))
        return dlow_loss(out.reshape(2, 3, 5, 6), tr, Y, q.cfg).total

    with m.params.frozen():
        ad.backward(loss(), q.params)
        for name in q.params.names():
            t = q.params[name]
            for fi in np.random.default_rng(1).choice(t.data.size, 3, replace=False):
                i = np.unravel_index(fi, t.shape)
                old = t.data[i]
                with ad.no_grad():
                    t.data[i] = old + 1e-6
                    fp = loss().item()
                    t.data[i] = old - 1e-6
                    fm = loss().item()
                t.data[i] = old
                fd = (fp - fm) / 2e-6
                assert abs(fd - t.grad[i]) <= 1e-4 * max(1e-3, abs(fd))


def test_training_contracts(rng, tmp_path):
    m = tiny()
    X, Y = rng.normal(size=(4, 3, 6)), rng.normal(size=(4, 5, 6))
    before = m.params.snapshot()
    cfg = DlowConfig(n_bands_sampled=2, n_samples=3, d_q=4)
    q0, _ = train_dlow((X, Y), m, cfg, DlowSchedule(epochs=0, seed=3))
    fresh = QNet(cfg, 6, 2, seed=3)
    for k in fresh.params.names():
        np.testing.assert_array_equal(q0.params[k].data, fresh.params[k].data)
    q, hist = train_dlow((X, Y), m, cfg, DlowSchedule(epochs=2, batch_size=2, seed=3),
                         checkpoint=tmp_path / "q.json")
    for k, v in before.items():
        assert m.params[k].data.tobytes() == v.tobytes()
    assert len(hist["total"]) == 2
    back = QNet.load(tmp_path / "q.json")
    assert back.params.content_hash() == q.params.content_hash()
    assert back.meta["cvae_sha256"] == m.params.content_hash()
    sample_diverse(X[0], 3, 2, m, back, rng)
    with pytest.raises(ConfigError):
        train_dlow((X, Y), None, cfg)


def test_trained_sampler_separates_samples(toy_dlow, toy_data, toy_cvae):
    q, _ = toy_dlow[9]
    with ad.no_grad():
        c = toy_cvae[0].condition(toy_data["Xte"][:1])[0]
        a, b = q.transforms(c)
    flat = np.concatenate([a.data[0], b.data[0]], axis=-1).reshape(q.cfg.n_samples, -1)
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            assert np.linalg.norm(flat[i] - flat[j]) > 0


def test_training_raises_diversity_without_losing_accuracy(toy_dlow, toy_data, toy_cvae):
    from markerpred.metrics import ade
    model, _ = toy_cvae
    q, _ = toy_dlow[9]
    init = QNet(q.cfg, q.d_cond, q.d_z, seed=0)
    init.meta = dict(q.meta)
    Xte, Yte = toy_data["Xte"], toy_data["Yte"]

    def stats(net):
        sets = sample_diverse(Xte, 10, 9, model, net, np.random.default_rng(1))
        return (np.mean([diversity(s.samples) for s in sets]),
                np.mean([ade(s.samples, y, squared=True) for s, y in zip(sets, Yte)]))

    d0, r0 = stats(init)
    d1, r1 = stats(q)
    assert d1 > d0
    assert r1 < 5 * r0
