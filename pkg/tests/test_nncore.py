import numpy as np
import pytest

from urbancl import nncore as nn
from urbancl.errors import LoadError, ShapeError


def param(name, arr):
    return nn.Parameter(name, np.asarray(arr, dtype=float))


def test_relu_and_identity_matmul():
    assert nn.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nn.matmul(np.eye(2), a).data, a)


def sliding_sum(img, k):
    h, w = img.shape
    return np.array([[img[i : i + k, j : j + k].sum() for j in range(w - k + 1)] for i in range(h - k + 1)])


def test_conv2d_sliding_window_oracle():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = nn.conv2d(x, np.ones((1, 1, 3, 3)), stride=1).data[0, 0]
    assert np.array_equal(out, sliding_sum(x[0, 0], 3))


def test_conv2d_general_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 9, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    out = nn.conv2d(x, w, stride=2).data
    ref = np.zeros((2, 4, 4, 3))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = (x[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
    assert np.allclose(out, ref, atol=1e-12)


def test_shape_errors_name_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        nn.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="conv2d"):
        nn.conv2d(np.ones((1, 2, 5, 5)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ShapeError, match="inner_product"):
        nn.inner_product(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError, match="add"):
        nn.add(np.ones((2, 3)), np.ones((4,)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_trapped():
    with pytest.raises(FloatingPointError):
        nn.scale(np.array([1e308]), 10.0)


def test_log_sum_exp_stable():
    x = np.array([[1000.0, 1000.0], [-1000.0, 0.0]])
    out = nn.log_sum_exp(x, axis=1).data
    assert out[0] == pytest.approx(1000 + np.log(2))
    assert out[1] == pytest.approx(0.0, abs=1e-300)
    masked = nn.log_sum_exp(np.array([[1.0, 5.0, 2.0]]), axis=1, mask=np.array([[True, False, True]])).data
    assert masked[0] == pytest.approx(np.log(np.e + np.e**2))


def test_backward_analytic():
    x = param("x", [1.0, 2.0])
    with nn.Tape() as tape:
        loss = nn.inner_product(x, x)
    nn.backward(tape, loss)
    assert x.grad.tolist() == [2.0, 4.0]

    w = param("w", [-0.5, -2.0])
    c = np.array([3.0, 4.0])
    with nn.Tape() as tape:
        loss = nn.inner_product(nn.relu(w), c)
    nn.backward(tape, loss)
    assert w.grad.tolist() == [0.0, 0.0]


def test_backward_rejects_non_scalar():
    x = param("x", [1.0, 2.0])
    with nn.Tape() as tape:
        y = nn.scale(x, 2.0)
    with pytest.raises(ValueError):
        nn.backward(tape, y)


def test_fd_quadratic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))
    a = a @ a.T + np.eye(5)
    x = param("x", rng.normal(size=(5, 1)))

    def f():
        return nn.total(nn.mul(x, nn.matmul(a, x)))

    assert nn.finite_difference_check(f, [x]) < 1e-9


def test_fd_tanh_chain_depth4():
    rng = np.random.default_rng(2)
    ws = [param(f"w{i}", rng.normal(scale=0.5, size=(6, 6))) for i in range(4)]
    x = rng.normal(size=(3, 6))

    def f():
        h = nn.Tensor(x)
        for w in ws:
            h = nn.tanh(nn.matmul(h, w))
        return nn.total(h)

    assert nn.finite_difference_check(f, ws) < 1e-6


def test_fd_random_three_layer_composite():
    rng = np.random.default_rng(5)
    w1 = param("w1", rng.normal(size=(2, 1, 3, 3)))
    b1 = param("b1", rng.normal(size=(2,)))
    w2 = param("w2", rng.normal(size=(2, 3)))
    w3 = param("w3", rng.normal(size=(3,)))
    x = rng.normal(size=(4, 1, 7, 7))

    def f():
        h = nn.conv2d(x, w1, stride=2)
        h = nn.add(h, nn.reshape(b1, (1, 2, 1, 1)))
        h = nn.tanh(nn.mean_pool_full(h))
        h = nn.relu(nn.matmul(h, w2))
        z = nn.concat([h, nn.mean_over_set(h, 2)], axis=0)
        s = nn.log_sum_exp(nn.matmul(z, nn.reshape(w3, (3, 1))), axis=0)
        return nn.total(s)

    assert nn.finite_difference_check(f, [w1, b1, w2, w3]) < 1e-6


@pytest.mark.parametrize("op", ["index_rows", "spmm", "transpose", "dropout", "mse", "sub"])
def test_fd_misc_primitives(op):
    import scipy.sparse as sp

    rng = np.random.default_rng(7)
    a = param("a", rng.normal(size=(4, 3)))
    m = sp.random(5, 4, density=0.5, random_state=1, format="csr")
    target = rng.normal(size=(4, 3))

    def f():
        if op == "index_rows":
            y = nn.index_rows(a, [0, 2, 2, 3])
        elif op == "spmm":
            y = nn.spmm(m, a)
        elif op == "transpose":
            y = nn.matmul(nn.transpose(a), a)
        elif op == "dropout":
            y = nn.dropout(a, 0.5, train=True, rng=np.random.default_rng(0))
        elif op == "mse":
            return nn.mse(nn.tanh(a), target)
        else:
            y = nn.sub(a, nn.scale(a, 0.3))
        return nn.total(nn.tanh(y))

    assert nn.finite_difference_check(f, [a]) < 1e-7


def test_mean_over_set_permutation_and_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    perm = rng.permutation(5)
    a = nn.mean_over_set(x, 5).data
    b = nn.mean_over_set(x[perm], 5).data
    assert np.allclose(a, b, atol=1e-15)
    p = param("p", x)
    with nn.Tape() as tape:
        loss = nn.total(nn.mean_over_set(p, 5))
    nn.backward(tape, loss)
    assert np.allclose(p.grad, 1 / 5)


def test_dropout_eval_is_identity_and_train_scales():
    x = np.ones((1000,))
    assert nn.dropout(x, 0.3, train=False).data is not None
    assert np.array_equal(nn.dropout(x, 0.3, train=False).data, x)
    y = nn.dropout(x, 0.5, train=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.1


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    p = param("p", np.zeros(3))
    opt = nn.Adam([p], lr=0.01)
    p.grad = g.copy()
    opt.step()
    # m_hat = g, v_hat = g^2 on the first step
    assert np.allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.allclose(p.data, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_zero_grad_no_change_and_errors():
    p = param("p", [1.0, 2.0])
    opt = nn.Adam([p], lr=0.1)
    opt.zero_grad()
    opt.step()
    assert p.data.tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        nn.Adam([p], lr=0.0)
    with pytest.raises(ValueError):
        nn.adam_step([p], {}, {}, lr=0.1, t=0)


def _trajectory(seed):
    rng = np.random.default_rng(seed)
    w = param("w", rng.normal(size=(3, 3)))
    x = rng.normal(size=(8, 3))
    opt = nn.Adam([w], lr=0.01)
    out = []
    for _ in range(20):
        opt.zero_grad()
        with nn.Tape() as tape:
            loss = nn.mean(nn.tanh(nn.matmul(x, w)))
        nn.backward(tape, loss)
        opt.step()
        out.append(w.data.tobytes())
    return out


def test_adam_bitwise_reproducible():
    assert _trajectory(4) == _trajectory(4)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ps = [param("a", rng.normal(size=(2, 3))), param("b", rng.normal(size=(4,)))]
    opt = nn.Adam(ps, lr=0.1)
    for p in ps:
        p.grad = rng.normal(size=p.shape)
    opt.step()
    path = tmp_path / "ck.bin"
    nn.save_checkpoint(path, ps, step=opt.t, optimizer=opt)
    ck = nn.load_checkpoint(path)
    assert ck["step"] == 1
    for p in ps:
        assert ck["values"][p.id].tobytes() == p.data.tobytes()
        assert ck["m"][p.id].tobytes() == opt.m[p.id].tobytes()
    fresh = [param("a", np.zeros((2, 3))), param("b", np.zeros(4))]
    nn.assign(fresh, ck["values"])
    assert fresh[0].data.tobytes() == ps[0].data.tobytes()
    with pytest.raises(LoadError):
        nn.assign([param("c", np.zeros(1))], ck["values"])
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(LoadError):
        nn.load_checkpoint(tmp_path / "bad.bin")
