import numpy as np
import pytest
import torch

from meld import numerics as nx
from meld.errors import ShapeError

D = torch.float64


def _rand(rng, *shape):
    return torch.tensor(rng.normal(size=shape), dtype=D, requires_grad=True)


def _check(fn, inputs, tol=1e-4):
    """Compare autograd against central differences for every input element."""
    out = fn(*inputs)
    w = torch.tensor(np.random.default_rng(1).normal(size=out.shape), dtype=D)
    loss = (out * w).sum()
    grads = torch.autograd.grad(loss, inputs)
    for x, g in zip(inputs, grads):
        numeric = nx.finite_difference_grad(lambda: (fn(*inputs) * w).sum(), x, range(x.numel()))
        err = nx.relative_error(g.reshape(-1).numpy(), numeric)
        assert err.max() < tol, (fn, x.shape, err.max())


def _shapes(seed, n=20):
    rng = np.random.default_rng(seed)
    return [(rng, int(rng.integers(1, 4)), int(rng.integers(1, 5))) for _ in range(n)]


def test_fd_matmul():
    for rng, a, b in _shapes(0):
        c = int(rng.integers(1, 4))
        _check(nx.matmul, [_rand(rng, a, b), _rand(rng, b, c)])


def test_fd_elementwise():
    for rng, a, b in _shapes(1):
        x, y = _rand(rng, a, b), _rand(rng, a, b)
        _check(nx.add, [x, y])
        _check(nx.mul, [x, y])
        _check(nx.tanh, [x])
        _check(nx.gelu, [x])


def test_fd_softmax_family():
    for rng, a, b in _shapes(2):
        x = _rand(rng, a, b)
        _check(lambda t: nx.softmax(t, -1), [x])
        _check(lambda t: nx.log_softmax(t, 0), [x])


def test_fd_layer_norm():
    for rng, a, b in _shapes(3):
        b = b + 1
        _check(nx.layer_norm, [_rand(rng, a, b), _rand(rng, b), _rand(rng, b)])


def test_fd_dropout_fixed_mask():
    for rng, a, b in _shapes(4):
        _check(lambda t: nx.dropout(t, 0.3, nx.make_generator(7), True), [_rand(rng, a, b)])


def test_fd_embedding():
    for rng, a, b in _shapes(5):
        table = _rand(rng, a + 2, b)
        ids = torch.tensor(rng.integers(0, a + 2, size=4))
        _check(lambda t: nx.embedding_lookup(t, ids), [table])


def test_fd_conv1d():
    for rng, a, b in _shapes(6):
        width = int(rng.choice([1, 3, 5]))
        _check(nx.conv1d, [_rand(rng, 1, a, b + 2), _rand(rng, 2, a, width), _rand(rng, 2)])


def test_fd_batch_norm():
    for rng, a, b in _shapes(7):
        mask = torch.tensor(rng.random((2, b + 1)) < 0.8)
        mask[0, 0] = True
        mask[1, 0] = True
        _check(lambda x, w, c: nx.batch_norm_1d(x, w, c, train=True, mask=mask),
               [_rand(rng, 2, a, b + 1), _rand(rng, a), _rand(rng, a)])


def test_fd_losses():
    for rng, a, b in _shapes(8):
        b = b + 1
        x, y = _rand(rng, a, b), _rand(rng, a, b)
        _check(lambda p, q: nx.mse(p, q).reshape(1), [x, y])
        hard = torch.tensor(rng.integers(0, b, size=a))
        _check(lambda p: nx.cross_entropy(p, hard).reshape(1), [x])
        soft = torch.softmax(torch.tensor(rng.normal(size=(a, b))), -1)
        _check(lambda p: nx.cross_entropy(p, soft).reshape(1), [x])


def test_fd_structural():
    for rng, a, b in _shapes(9):
        x, y = _rand(rng, a, b), _rand(rng, a, b)
        mask = torch.tensor(rng.random((a, b)) < 0.5)
        _check(lambda t: nx.masked_fill(t, mask, 0.5), [x])
        _check(lambda p, q: nx.concat([p, q], 1), [x, y])
        _check(lambda t: nx.slice_(t, 0, 1, 0), [x])


# -- forward contracts --------------------------------------------------------


def test_identity_matmul():
    a = torch.randn(3, 4, dtype=D)
    assert torch.equal(nx.matmul(torch.eye(3, dtype=D), a), a)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nx.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_constant_uniform():
    assert torch.allclose(nx.softmax(torch.full((5,), 3.0, dtype=D)), torch.full((5,), 0.2, dtype=D))


def test_soft_cross_entropy_of_itself_is_entropy():
    logits = torch.randn(4, 6, dtype=D)
    p = torch.softmax(logits, -1)
    ent = -(p * torch.log(p)).sum(-1).mean()
    assert torch.allclose(nx.cross_entropy(logits, p), ent, atol=1e-12)


def test_log_softmax_large_inputs():
    x = torch.tensor([1e4, -1e4, 0.0], dtype=D)
    assert torch.all(torch.isfinite(nx.log_softmax(x)))


def test_dropout_contracts():
    x = torch.ones(1000, dtype=D)
    with pytest.raises(ValueError):
        nx.dropout(x, 1.0)
    with pytest.raises(ValueError):
        nx.dropout(x, -0.1)
    assert torch.equal(nx.dropout(x, 0.5, train=False), x)
    y = nx.dropout(x, 0.5, nx.make_generator(0))
    assert set(torch.unique(y).tolist()) <= {0.0, 2.0}
    assert torch.equal(y, nx.dropout(x, 0.5, nx.make_generator(0)))


def test_conv_even_width_rejected():
    with pytest.raises(ShapeError):
        nx.conv1d(torch.zeros(1, 2, 5), torch.zeros(1, 2, 4))


def test_batch_norm_running_stats():
    rm, rv = torch.zeros(2, dtype=D), torch.ones(2, dtype=D)
    x = torch.randn(3, 2, 7, dtype=D)
    nx.batch_norm_1d(x, torch.ones(2, dtype=D), torch.zeros(2, dtype=D), rm, rv, train=True, momentum=1.0)
    assert torch.allclose(rm, x.mean(dim=(0, 2)))
    y = nx.batch_norm_1d(x, torch.ones(2, dtype=D), torch.zeros(2, dtype=D), rm, rv, train=False)
    assert torch.allclose(y.mean(dim=(0, 2)), torch.zeros(2, dtype=D), atol=1e-5)


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        nx.embedding_lookup(torch.zeros(3, 2), torch.tensor([3]))


# -- backward -----------------------------------------------------------------


def test_square_derivative():
    x = torch.tensor(3.0, dtype=D, requires_grad=True)
    nx.backward(x * x)
    assert x.grad.item() == 6.0


def test_sum_matmul_gradient():
    a = torch.randn(3, 4, dtype=D, requires_grad=True)
    b = torch.randn(4, 5, dtype=D)
    nx.backward(nx.matmul(a, b).sum())
    assert torch.allclose(a.grad, b.sum(1).expand(3, 4))


def test_backward_twice_is_error():
    x = torch.tensor(2.0, requires_grad=True)
    loss = x * x
    nx.backward(loss)
    with pytest.raises(RuntimeError):
        nx.backward(loss)


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        nx.backward(torch.ones(2, requires_grad=True) * 2)


def test_clip_grad_norm():
    p = torch.zeros(4, requires_grad=True)
    p.grad = torch.tensor([3.0, 4.0, 0.0, 0.0])
    assert nx.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert nx.global_grad_norm([p]) == pytest.approx(1.0, abs=1e-6)


# -- Adam ---------------------------------------------------------------------


def _param(v):
    p = torch.tensor(v, dtype=D, requires_grad=True)
    return p


def test_adam_zero_gradient():
    p = _param([1.0, -2.0])
    st = nx.AdamState()
    for _ in range(5):
        p.grad = torch.zeros(2, dtype=D)
        nx.adam_step([("p", p)], st, 0.1)
    assert p.tolist() == [1.0, -2.0]


def test_adam_constant_gradient_step_is_lr():
    p = _param([0.0, 0.0])
    st = nx.AdamState()
    lr = 1e-3
    for _ in range(200):
        before = p.detach().clone()
        p.grad = torch.tensor([0.5, -2.0], dtype=D)
        nx.adam_step([("p", p)], st, lr, eps=1e-12)
    step = (p.detach() - before).abs()
    assert torch.allclose(step, torch.full((2,), lr, dtype=D), rtol=1e-6)


def test_adam_matches_torch():
    rng = np.random.default_rng(0)
    a = _param(rng.normal(size=5))
    b = _param(a.detach().numpy().copy())
    st = nx.AdamState()
    opt = torch.optim.Adam([b], lr=0.01, betas=(0.9, 0.98), eps=1e-8)
    for _ in range(20):
        g = torch.tensor(rng.normal(size=5), dtype=D)
        a.grad, b.grad = g.clone(), g.clone()
        nx.adam_step([("a", a)], st, 0.01, (0.9, 0.98), 1e-8)
        opt.step()
    assert torch.allclose(a, b, atol=1e-12)


def test_adam_runs_bit_identical():
    def run():
        torch.manual_seed(0)
        p = _param(np.zeros(3))
        st = nx.AdamState()
        g = nx.make_generator(1)
        for _ in range(10):
            p.grad = torch.randn(3, generator=g, dtype=D)
            nx.adam_step([("p", p)], st, 0.05)
        return p.detach().numpy().tobytes()

    assert run() == run()


# -- container ----------------------------------------------------------------


def test_tensor_container_round_trip(tmp_path):
    tensors = {
        "a": torch.randn(3, 4, dtype=torch.float32),
        "b": torch.randn(2, dtype=D),
        "c": torch.arange(5),
        "d": torch.tensor([True, False]),
    }
    nx.save_tensors(tmp_path / "t.bin", tensors, {"k": 1})
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:4] == b"MELT"
    back, meta = nx.load_tensors(tmp_path / "t.bin")
    assert meta == {"k": 1}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)


def test_generator_streams():
    a = torch.rand(3, generator=nx.make_generator(1, 2))
    b = torch.rand(3, generator=nx.make_generator(1, 2))
    c = torch.rand(3, generator=nx.make_generator(1, 3))
    assert torch.equal(a, b) and not torch.equal(a, c)
