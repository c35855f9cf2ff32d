import numpy as np
import pytest
import torch

from meld import numerics as nx
from meld.errors import CheckpointError, ConfigError, ShapeError
from meld.model import MeldModel, ModelConfig, load_checkpoint, save_checkpoint
from meld.sequences import build_stt_sequence, build_tts_sequence, collate

from conftest import tiny_model


def _batch(model, mode="tts", n_items=2, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    v, d = model.vocab, model.cfg.d_mel_in
    items = []
    for i in range(n_items):
        toks = rng.integers(0, v.v_text, size=2 + i)
        frames = rng.normal(size=(3 + 2 * i, d)).astype(np.float32)
        build = build_tts_sequence if mode == "tts" else build_stt_sequence
        items.append(build(toks, frames, v) if mode == "tts" else build(frames, toks, v))
    return collate(items).to(dtype)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(n_heads=5, d_model=64).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0).validate()
    assert ModelConfig().digest() == ModelConfig().digest()
    assert ModelConfig().digest() != ModelConfig(n_layers=3).digest()


def test_logits_shape_and_normalization():
    m = tiny_model()
    b = _batch(m)
    logits = m.forward_latent_logits(b)
    assert logits.shape == (2, b.length, m.vocab.total)
    assert torch.all(torch.isfinite(logits))
    assert torch.allclose(torch.softmax(logits, -1).sum(-1), torch.ones(2, b.length, dtype=torch.float64))


def test_single_token_input():
    m = tiny_model()
    h = m.trunk(m.add_positions(m.embed_ids(torch.tensor([1])))[None])
    assert m.head(h).shape == (1, 1, m.vocab.total)


def test_identical_frames_differ_by_position_only():
    m = tiny_model()
    frame = torch.randn(1, 5, dtype=torch.float64)
    e = m.encode_mel(torch.cat([frame, frame]))
    pe = m.add_positions(e) - e
    assert torch.allclose(m.add_positions(e)[1] - m.add_positions(e)[0], pe[1] - pe[0])


def test_latent_ids_not_embedded_as_text():
    m = tiny_model()
    with pytest.raises(ValueError):
        m.embed_ids(torch.tensor([m.vocab.latent_id(0)]))
    rows = m.text_rows(torch.tensor(list(m.vocab.special_ids)))
    assert rows.tolist() == [m.vocab.v_text, m.vocab.v_text + 1, m.vocab.v_text + 2]


def test_frame_dim_checked():
    m = tiny_model()
    with pytest.raises(ShapeError):
        m.encode_mel(torch.zeros(2, 4, dtype=torch.float64))


def test_overlong_sequence_rejected():
    m = tiny_model()
    with pytest.raises(ValueError):
        m.add_positions(torch.zeros(m.cfg.max_seq_len + 1, 8, dtype=torch.float64))


def test_all_padding_rows_are_finite():
    m = tiny_model()
    b = _batch(m, n_items=2)
    out = m.forward_latent_logits(b)
    assert torch.all(torch.isfinite(out[~b.valid]))


def test_future_perturbation_leaves_past_logits():
    m = tiny_model()
    b = _batch(m, n_items=1)
    base = m.forward_latent_logits(b)
    b.input_frames[0, -1] += 5.0
    pert = m.forward_latent_logits(b)
    assert torch.equal(base[0, :-1], pert[0, :-1])
    assert not torch.equal(base[0, -1], pert[0, -1])


def test_causality_gradients_exact_zero():
    m = tiny_model()
    emb = torch.randn(1, 7, 8, dtype=torch.float64, requires_grad=True)
    h = m.trunk(emb)
    for t in range(7):
        (g,) = torch.autograd.grad(h[0, t].sum(), emb, retain_graph=True)
        assert torch.all(g[0, t + 1 :] == 0)


def test_shared_encoder_for_codewords():
    m = tiny_model()
    cw = torch.randn(6, 5, dtype=torch.float64)
    a = m.codeword_embedding(torch.tensor([2]), cw, True, nx.make_generator(3))
    b = m.encode_mel(cw[2:3], True, nx.make_generator(3))
    assert torch.equal(a, b)


def test_specnet_zero_weights_gives_bias():
    m = tiny_model()
    with torch.no_grad():
        for p in m.specnet.parameters():
            p.zero_()
        m.specnet.linear.bias.copy_(torch.arange(5.0))
    out = m.specnet_predict(torch.randn(8, dtype=torch.float64), torch.tensor(1), torch.randn(6, 5, dtype=torch.float64))
    assert torch.equal(out, torch.arange(5.0, dtype=torch.float64))


def test_specnet_depends_on_latent():
    m = tiny_model()
    cw = torch.randn(6, 5, dtype=torch.float64)
    h = torch.randn(8, dtype=torch.float64)
    assert not torch.allclose(m.specnet_predict(h, torch.tensor(0), cw), m.specnet_predict(h, torch.tensor(1), cw))
    z0 = m.specnet_predict(h, torch.tensor(0), cw, zero_codeword=True)
    assert torch.equal(z0, m.specnet_predict(h, torch.tensor(3), cw, zero_codeword=True))
    with pytest.raises(ValueError):
        m.specnet_predict(h, torch.tensor(6), cw)


def test_postnet_zero_in_zero_out():
    m = tiny_model()
    with torch.no_grad():
        for c in m.postnet.convs:
            c.bias.zero_()
    out = m.postnet_refine(torch.zeros(1, 9, 5, dtype=torch.float64), train=False)
    assert torch.all(out == 0)


def test_postnet_receptive_field():
    m = tiny_model(postnet_kernel=5)
    assert m.postnet.receptive_field == 13
    x = torch.randn(1, 30, 5, dtype=torch.float64)
    base = m.postnet_refine(x, train=False)
    x2 = x.clone()
    x2[0, 15] += 1.0
    diff = (m.postnet_refine(x2, train=False) - base).abs().sum(-1)[0]
    changed = torch.nonzero(diff > 0).flatten()
    assert changed.min() >= 9 and changed.max() <= 21
    assert diff[9] > 0 and diff[21] > 0


def test_postnet_single_frame():
    m = tiny_model()
    assert m.postnet_refine(torch.randn(1, 1, 5, dtype=torch.float64), train=True).shape == (1, 1, 5)


def test_checkpoint_round_trip(tmp_path):
    m = tiny_model()
    adam = nx.AdamState(step=3, exp_avg={"head.bias": torch.ones(m.vocab.total, dtype=torch.float64)},
                        exp_avg_sq={"head.bias": torch.full((m.vocab.total,), 2.0, dtype=torch.float64)})
    save_checkpoint(tmp_path / "a.ckpt", m, adam, {"step": 3})
    back, adam2, meta = load_checkpoint(tmp_path / "a.ckpt", expected_hash=m.cfg.digest())
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    for (n1, b1), (_, b2) in zip(m.named_buffers(), back.named_buffers()):
        assert torch.equal(b1, b2)
    assert adam2.step == 3 and torch.equal(adam2.exp_avg_sq["head.bias"], adam.exp_avg_sq["head.bias"])
    b = _batch(m)
    assert torch.equal(m.forward_latent_logits(b), back.forward_latent_logits(b))
    save_checkpoint(tmp_path / "b.ckpt", back, adam2, {"step": 3})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_hash_mismatch(tmp_path):
    m = tiny_model()
    save_checkpoint(tmp_path / "a.ckpt", m)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.ckpt", expected_hash="0" * 16)


def test_param_groups_cover_everything():
    m = tiny_model()
    names = sorted(n for g in m.param_groups().values() for n in g)
    assert names == sorted(n for n, _ in m.named_parameters())


def test_float32_default_model():
    torch.manual_seed(0)
    m = MeldModel(ModelConfig(v_text=10, k_latent=4, d_mel_in=6))
    assert next(m.parameters()).dtype == torch.float32
