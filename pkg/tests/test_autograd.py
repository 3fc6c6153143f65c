import numpy as np
import pytest

from ectraj import autograd as ag
from ectraj.optim import AdamW, clip_grad_norm
from gradcheck import check_op

SEEDS = range(50)


def project(out: ag.Tensor, seed: int = 99) -> ag.Tensor:
    """Contract an op output with fixed random weights to get a non-degenerate scalar."""
    c = np.random.default_rng(seed).normal(size=out.shape)
    return (out * ag.Tensor(c)).sum()


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


OPS = {
    "add_broadcast": (lambda a, b: project(a + b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: project(a - b), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "mul_broadcast": (lambda a, b: project(a * b), lambda r: [r.normal(size=(2, 1, 3)), r.normal(size=(4, 3))]),
    "div": (lambda a, b: project(a / b), lambda r: [r.normal(size=(3,)), 1.5 + r.random(size=(3,))]),
    "neg": (lambda a: project(-a), lambda r: [r.normal(size=(5,))]),
    "matmul_batched": (lambda a, b: project(a @ b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
    "getitem": (lambda a: project(a[1:, ::2]), lambda r: [r.normal(size=(3, 5))]),
    "reshape_transpose": (lambda a: project(a.reshape(3, 2, 2).transpose(2, 0, 1)), lambda r: [r.normal(size=(4, 3))]),
    "broadcast_to": (lambda a: project(a.broadcast_to((3, 2, 4))), lambda r: [r.normal(size=(2, 1))]),
    "sum_axis": (lambda a: project(a.sum(axis=1)), lambda r: [r.normal(size=(3, 4, 2))]),
    "mean_keepdims": (lambda a: project(a.mean(axis=(0, 2), keepdims=True)), lambda r: [r.normal(size=(3, 4, 2))]),
    "square": (lambda a: project(a.square()), lambda r: [r.normal(size=(6,))]),
    "sqrt": (lambda a: project(a.sqrt()), lambda r: [0.5 + r.random(size=(6,))]),
    "exp": (lambda a: project(a.exp()), lambda r: [r.normal(size=(6,))]),
    "log": (lambda a: project(a.log()), lambda r: [0.5 + r.random(size=(6,))]),
    "linear": (lambda x, w, b: project(ag.linear(x, w, b)),
               lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(5,))]),
    "einsum_cross": (lambda q, k: project(ag.einsum("bkahd,bathd->bkaht", q, k)),
                     lambda r: [r.normal(size=(2, 3, 2, 2, 4)), r.normal(size=(2, 2, 5, 2, 4))]),
    "einsum_values": (lambda a, v: project(ag.einsum("bkaht,bathd->bkahd", a, v)),
                      lambda r: [r.normal(size=(2, 3, 2, 2, 5)), r.normal(size=(2, 2, 5, 2, 4))]),
    "einsum_self": (lambda q, k: project(ag.einsum("bkahd,bkchd->bkahc", q, k)),
                    lambda r: [r.normal(size=(2, 1, 3, 2, 4)), r.normal(size=(2, 1, 3, 2, 4))]),
    "softmax": (lambda a: project(ag.softmax(a, axis=-1)), lambda r: [r.normal(size=(3, 5))]),
    "layer_norm": (lambda x, g, b: project(ag.layer_norm(x, g, b)),
                   lambda r: [r.normal(size=(4, 6)), 1 + 0.1 * r.normal(size=(6,)), r.normal(size=(6,))]),
    "relu": (lambda a: project(ag.relu(a)), lambda r: [away_from_zero(r, (8,))]),
    "tanh": (lambda a: project(ag.tanh(a)), lambda r: [r.normal(size=(8,))]),
    "silu": (lambda a: project(ag.silu(a)), lambda r: [r.normal(size=(8,))]),
    "gelu": (lambda a: project(ag.gelu(a)), lambda r: [r.normal(size=(8,))]),
    "l2_norm": (lambda a: project(ag.l2_norm(a, axis=-1)), lambda r: [r.normal(size=(4, 3))]),
    "concat": (lambda a, b: project(ag.concat([a, b], axis=0)), lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))]),
    "where_const": (lambda a: project(ag.where_const(np.array([True, False, True]), a, 0.7)),
                    lambda r: [r.normal(size=(2, 3))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, make = OPS[name]
    worst = 0.0
    for seed in SEEDS:
        worst = max(worst, check_op(build, make(np.random.default_rng(seed))))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_grad_of_sum_is_ones():
    x = ag.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (g,) = ag.grad(x.sum(), [x])
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])


def test_grad_of_half_squared_norm_is_x():
    x = ag.Tensor(np.array([2.0, -3.0]), requires_grad=True)
    (g,) = ag.grad(x.square().sum() * 0.5, [x])
    np.testing.assert_allclose(g, [2.0, -3.0], rtol=0, atol=1e-15)


def test_two_layer_mlp_twelve_params():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 2))
    # 2 -> 2 -> 2 with biases: 4 + 2 + 4 + 2 = 12 parameters
    shapes = [(2, 2), (2,), (2, 2), (2,)]
    arrays = [rng.normal(size=s) for s in shapes]
    assert sum(a.size for a in arrays) == 12

    def build(w1, b1, w2, b2):
        h = ag.tanh(ag.linear(ag.Tensor(x), w1, b1))
        return ag.linear(h, w2, b2).square().sum()

    assert check_op(build, arrays) < 1e-4


def test_untouched_params_get_zero_gradient():
    a = ag.Tensor(np.ones(3), requires_grad=True)
    b = ag.Tensor(np.ones((2, 2)), requires_grad=True)
    ga, gb = ag.grad((a * 2.0).sum(), [a, b])
    np.testing.assert_array_equal(ga, 2.0)
    np.testing.assert_array_equal(gb, np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    a = ag.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ag.grad(a * 2.0, [a])


def test_nan_in_backward_names_the_op():
    a = ag.Tensor(np.array([0.0, 1.0]), requires_grad=True)
    loss = a.sqrt().sum()  # d sqrt / dx is infinite at 0
    with np.errstate(divide="ignore"), pytest.raises(ag.NumericalError) as err:
        ag.grad(loss, [a])
    assert err.value.op == "sqrt"
    assert "sqrt" in str(err.value)


def test_no_grad_records_nothing():
    a = ag.Tensor(np.ones(2), requires_grad=True)
    with ag.no_grad():
        out = (a * 3.0).sum()
    assert not out.requires_grad
    assert ag.is_grad_enabled()


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    w = ag.Tensor(rng.normal(size=(3, 3)), requires_grad=True)

    def run():
        return ag.grad(ag.softmax(ag.Tensor(x) @ w).square().sum(), [w])[0]

    np.testing.assert_array_equal(run(), run())


def test_tensor_data_is_float64():
    assert ag.Tensor([1, 2, 3]).data.dtype == np.float64


# --- AdamW -------------------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_is_noop():
    p = ag.Tensor(np.array([0.3, -1.2]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [0.3, -1.2])


def test_adamw_single_step_hand_value():
    p = ag.Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8)
    opt.step([np.array([1.0])])
    # m_hat = 1, v_hat = 1 -> p = -0.1 / (1 + 1e-8)
    np.testing.assert_allclose(p.data, [-0.1 / (1 + 1e-8)], rtol=0, atol=1e-15)


def test_adamw_pure_decay():
    p = ag.Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    opt.step([np.array([0.0])])
    np.testing.assert_allclose(p.data, [0.999], rtol=0, atol=1e-15)


def test_adamw_shape_mismatch_and_counter():
    p = ag.Tensor(np.zeros((2, 2)), requires_grad=True)
    opt = AdamW([p])
    with pytest.raises(ValueError):
        opt.step([np.zeros(3)])
    for k in range(3):
        opt.step([np.ones((2, 2))])
        assert opt.step_count == k + 1
    assert opt.m[0].shape == p.shape and opt.v[0].shape == p.shape


def test_adamw_rejects_non_finite_gradient():
    p = ag.Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ag.NumericalError):
        AdamW([p]).step([np.array([np.nan, 0.0])])


def test_clip_grad_norm():
    g = [np.array([3.0, 0.0]), np.array([[4.0]])]
    before = clip_grad_norm(g, 1.0)
    assert before == pytest.approx(5.0)
    total = np.sqrt(sum((x**2).sum() for x in g))
    assert total == pytest.approx(1.0, abs=1e-9)
    small = [np.array([0.1])]
    clip_grad_norm(small, 1.0)
    assert small[0][0] == 0.1
