import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from meld import numerics as nx
from meld.codebook import Codebook
from meld.errors import ShapeError
from meld.objectives import (
    entropy, kl_q_p, reconstruction_mse, slowness_penalty, soft_cross_entropy, stt_loss, toy_neg_log_marginal,
    toy_vlb, tts_loss,
)
from meld.sequences import build_stt_sequence, build_tts_sequence, collate

from conftest import tiny_model


def _simplex(rng, k, sparse=False):
    q = rng.dirichlet(np.ones(k))
    if sparse:
        q[rng.random(k) < 0.3] = 0.0
        q = q / q.sum() if q.sum() > 0 else np.eye(k)[0]
    return q


def _codebook(k=6, d=5, seed=0):
    return Codebook(np.random.default_rng(seed).normal(size=(k, d)))


def _tts_batch(model, n_frames=3, seed=0, n_items=1):
    rng = np.random.default_rng(seed)
    items = [
        build_tts_sequence(rng.integers(0, model.vocab.v_text, 2), rng.normal(size=(n_frames + i, model.cfg.d_mel_in)), model.vocab)
        for i in range(n_items)
    ]
    return collate(items).to(torch.float64)


# -- KL -----------------------------------------------------------------------


def test_kl_examples():
    assert float(kl_q_p(torch.tensor([1.0, 0.0], dtype=torch.float64), torch.log(torch.tensor([0.5, 0.5], dtype=torch.float64)))) == pytest.approx(math.log(2), abs=1e-6)
    q = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
    assert float(kl_q_p(q, q.log())) == pytest.approx(0.0, abs=1e-12)


def test_kl_nonnegative_and_decomposition():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 12))
        q = torch.tensor(_simplex(rng, k, sparse=True))
        log_p = torch.log(torch.tensor(_simplex(rng, k)))
        kl = kl_q_p(q, log_p)
        assert float(kl) >= -1e-12
        assert abs(float(kl - (soft_cross_entropy(q, log_p) - entropy(q)))) < 1e-9


def test_kl_guards():
    with pytest.raises(ValueError):
        kl_q_p(torch.tensor([0.5, 0.5]), torch.tensor([0.0, -float("inf")]))
    with pytest.raises(ShapeError):
        kl_q_p(torch.ones(3) / 3, torch.zeros(2))


def test_kl_subnormalized_p():
    # p over latents may leave mass for other vocabulary entries
    q = torch.tensor([1.0, 0.0], dtype=torch.float64)
    log_p = torch.log(torch.tensor([0.25, 0.25], dtype=torch.float64))
    assert float(kl_q_p(q, log_p)) == pytest.approx(math.log(4))


# -- reconstruction and slowness ---------------------------------------------


def test_recon_examples():
    x = torch.randn(4, 3, dtype=torch.float64)
    assert float(reconstruction_mse(x, x, torch.zeros_like(x))) == 0.0
    assert float(reconstruction_mse(x, x, torch.ones_like(x))) == pytest.approx(3.0)
    with pytest.raises(ShapeError):
        reconstruction_mse(x, x[:2], x)


@given(st.integers(0, 2**31 - 1))
def test_recon_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    x, xh, r = (torch.randn(6, 3, generator=g, dtype=torch.float64) for _ in range(3))
    perm = torch.randperm(6, generator=g)
    assert torch.allclose(reconstruction_mse(x, xh, r), reconstruction_mse(x[perm], xh[perm], r[perm]))


def test_recon_mask_excludes_padding():
    x = torch.randn(1, 5, 2, dtype=torch.float64)
    xh = torch.randn(1, 5, 2, dtype=torch.float64)
    r = torch.zeros_like(x)
    mask = torch.tensor([[True, True, True, False, False]])
    assert torch.allclose(reconstruction_mse(x, xh, r, mask), reconstruction_mse(x[:, :3], xh[:, :3], r[:, :3]))


def test_slowness_examples():
    assert float(slowness_penalty(torch.tensor([[0.0], [1.0], [3.0]]))) == pytest.approx(-2.5)
    assert float(slowness_penalty(torch.ones(4, 2))) == 0.0
    assert float(slowness_penalty(torch.ones(1, 3))) == 0.0


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 4)), elements=st.floats(-5, 5)))
def test_slowness_nonpositive(x):
    assert float(slowness_penalty(torch.tensor(x))) <= 0.0


def test_slowness_masked_batch():
    x = torch.tensor([[[0.0], [2.0], [9.0]], [[0.0], [1.0], [2.0]]])
    mask = torch.tensor([[True, True, False], [True, True, True]])
    assert float(slowness_penalty(x, mask)) == pytest.approx((-4.0 - 1.0) / 2)


# -- bound and estimator ------------------------------------------------------


def test_vlb_bounds_neg_log_marginal():
    rng = np.random.default_rng(0)
    for _ in range(500):
        k = int(rng.integers(2, 17))
        x = rng.normal(size=1)
        means, post = rng.normal(size=(k, 1)), rng.normal(size=(k, 1))
        log_p = np.log(_simplex(rng, k))
        q = _simplex(rng, k, sparse=True)
        assert toy_vlb(q, log_p, x, means, post) >= toy_neg_log_marginal(log_p, x, means, post) - 1e-6


def test_vlb_tight_at_posterior():
    rng = np.random.default_rng(1)
    k = 5
    x = rng.normal(size=1)
    means, post = rng.normal(size=(k, 1)), rng.normal(size=(k, 1))
    log_p = np.log(_simplex(rng, k))
    joint = log_p - 0.5 * ((x - means[:, 0]) ** 2 + (x - post[:, 0]) ** 2)
    q = np.exp(joint - joint.max())
    q /= q.sum()
    assert toy_vlb(q, log_p, x, means, post) == pytest.approx(toy_neg_log_marginal(log_p, x, means, post), abs=1e-9)


def _zero_heads(model):
    with torch.no_grad():
        for mod in (model.head, model.specnet, model.postnet):
            for p in mod.parameters():
                p.zero_()


def test_tts_loss_closed_form_toy():
    m = tiny_model()
    _zero_heads(m)
    cb = _codebook()
    b = _tts_batch(m, n_frames=1)
    rep = tts_loss(b, m, cb, nx.make_generator(0), slow_weight=0.2, train=False, gmel_dropout=False)
    x = b.target_frames[0][b.target_is_frame[0]].reshape(-1)
    q = torch.softmax(-((x - cb.as_tensor(torch.float64)) ** 2).sum(-1) / cb.tau, -1)
    v = m.vocab.total
    expected = (2 * math.log(v) - float(entropy(q))) / 2 + 2 * float((x**2).sum())
    assert rep.vlb_total == pytest.approx(expected, abs=1e-9)
    assert rep.slowness == 0.0 and rep.weighted_total == pytest.approx(expected, abs=1e-9)
    assert rep.n_frames == 1 and rep.n_targets == 2


def test_reconstruction_estimator_unbiased():
    m = tiny_model(k_latent=3)
    cb = Codebook(np.array([[0.0] * 5, [0.6] * 5, [-0.4] * 5]))
    b = _tts_batch(m, n_frames=1, seed=2)
    x = b.target_frames[0][b.target_is_frame[0]]
    cw = cb.as_tensor(torch.float64)
    with torch.no_grad():
        h = m.forward_hidden(b)[0][b.target_is_frame[0]][0]
        q = torch.softmax(-((x[0] - cw) ** 2).sum(-1), -1)
        per_k = []
        for k in range(3):
            xh = m.specnet_predict(h, torch.tensor(k), cw)[None, None]
            per_k.append(float(reconstruction_mse(x[None], xh, m.postnet_refine(xh, train=False))))
        exact = float(q.numpy() @ np.array(per_k))
        g = nx.make_generator(7)
        draws = np.array([tts_loss(b, m, cb, g, train=False, gmel_dropout=False).reconstruction_mse for _ in range(10_000)])
    assert q.min() > 0.05  # every code is actually exercised
    assert abs(draws.mean() - exact) < 3 * draws.std() / math.sqrt(draws.size)
    assert set(np.round(draws, 9)) <= set(np.round(per_k, 9))


def test_tts_loss_q_has_no_gradient_path():
    m = tiny_model()
    cb = _codebook()
    b = _tts_batch(m)
    rep = tts_loss(b, m, cb, nx.make_generator(0), train=False, gmel_dropout=False)
    assert rep.loss.requires_grad
    assert isinstance(cb.codewords, np.ndarray) and not cb.codewords.flags.writeable


def test_tts_loss_gradients_match_finite_differences():
    m = tiny_model()
    cb = _codebook()
    b = _tts_batch(m, n_items=2)

    def fn():
        return tts_loss(b, m, cb, nx.make_generator(3), train=False, gmel_dropout=False).loss

    m.zero_grad()
    nx.backward(fn())
    rng = np.random.default_rng(0)
    for name, p in m.named_parameters():
        idx = rng.choice(p.numel(), size=min(3, p.numel()), replace=False).tolist()
        num = nx.finite_difference_grad(fn, p, idx, step=1e-6)
        ana = p.grad.reshape(-1)[idx].numpy()
        assert np.all(nx.relative_error(ana, num, floor=1e-6) < 1e-4), name


def test_stt_loss_uniform_logits():
    m = tiny_model()
    with torch.no_grad():
        for p in m.head.parameters():
            p.zero_()
    rng = np.random.default_rng(0)
    b = collate([build_stt_sequence(rng.normal(size=(3, 5)), [1, 4, 2], m.vocab)]).to(torch.float64)
    rep = stt_loss(b, m)
    assert rep.stt_ce == pytest.approx(math.log(m.vocab.total), abs=1e-12)
    assert rep.n_targets == 4


def test_stt_loss_one_hot_logits_vanish():
    m = tiny_model()
    b = collate([build_stt_sequence(np.ones((2, 5)), [3, 7], m.vocab)]).to(torch.float64)
    targets = b.target_ids[0]
    big = torch.full((b.length, m.vocab.total), -1e4, dtype=torch.float64)
    for pos, t in enumerate(targets.tolist()):
        if t >= 0:
            big[pos, t] = 1e4
    m.head.forward = lambda h: big.expand(h.shape[0], -1, -1)
    assert stt_loss(b, m).stt_ce == pytest.approx(0.0, abs=1e-12)
    assert not any(m.vocab.is_latent(t) for t in targets.tolist() if t >= 0)


def test_stt_loss_no_specnet_gradient():
    m = tiny_model()
    b = collate([build_stt_sequence(np.ones((2, 5)), [3, 7], m.vocab)]).to(torch.float64)
    nx.backward(stt_loss(b, m).loss)
    for p in list(m.specnet.parameters()) + list(m.postnet.parameters()):
        assert p.grad is None or torch.all(p.grad == 0)


def test_train_mode_gradients_within_rounding_noise():
    # dropout masks and BatchNorm batch statistics included; the tolerance
    # adds the central-difference rounding floor eps * |L| / h
    m = tiny_model()
    cb = _codebook()
    b = _tts_batch(m, n_items=2)

    def fn():
        return tts_loss(b, m, cb, nx.make_generator(3), train=True, gmel_dropout=True).loss

    m.zero_grad()
    loss = fn()
    nx.backward(loss)
    h = 1e-6
    noise = 100 * np.finfo(np.float64).eps * abs(loss.item()) / h
    rng = np.random.default_rng(1)
    for name, p in m.named_parameters():
        idx = rng.choice(p.numel(), size=min(3, p.numel()), replace=False).tolist()
        num = nx.finite_difference_grad(fn, p, idx, step=h)
        ana = p.grad.reshape(-1)[idx].numpy()
        assert np.all(np.abs(ana - num) <= 1e-4 * np.maximum(np.abs(ana), np.abs(num)) + noise), name
