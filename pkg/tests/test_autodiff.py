import math

import numpy as np
import pytest

from protocore import autodiff as ad


def rand_tensor(rng, shape, requires_grad=True):
    return ad.Tensor(rng.normal(size=shape), requires_grad=requires_grad)


def test_forward_op_examples():
    out = ad.forward_op("matmul", ad.Tensor([[1.0, 2.0], [3.0, 4.0]]),
                        ad.Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])

    out = ad.forward_op("relu", ad.Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    out = ad.forward_op("mse", ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0]))
    assert out.item() == 0.0


def test_forward_op_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown op"):
        ad.forward_op("conv2d", ad.Tensor([1.0]))


def test_shape_mismatch_reports_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 2\)"):
        ad.matmul(ad.Tensor(np.ones((2, 2))), ad.Tensor(np.ones((3, 1))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4,))))


def test_backward_sum_is_ones():
    x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(x.sum())
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_mse_at_minimum_is_zero():
    x = ad.Tensor([0.5, -0.5], requires_grad=True)
    ad.backward(ad.mse(x, ad.Tensor([0.5, -0.5])))
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar_root():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(x * 2.0)


def test_backward_is_linear():
    # grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
    rng = np.random.default_rng(7)
    a, b = 1.7, -0.6

    def losses(x):
        l1 = ad.mse(x, ad.Tensor(np.ones(4)))
        l2 = ad.squared_euclidean(x.relu(), ad.Tensor(np.zeros(4)))
        return l1, l2

    x = rand_tensor(rng, (4,))
    l1, l2 = losses(x)
    ad.backward(ad.add(ad.scale(l1, a), ad.scale(l2, b)))
    combined = x.grad.copy()

    x.zero_grad()
    l1, l2 = losses(x)
    ad.backward(l1)
    g1 = x.grad.copy()
    x.zero_grad()
    _, l2 = losses(x)
    ad.backward(l2)
    g2 = x.grad.copy()

    assert np.max(np.abs(combined - (a * g1 + b * g2))) < 1e-10


def test_gradient_accumulates_across_uses():
    x = ad.Tensor([2.0], requires_grad=True)
    y = ad.add(x, x)  # dy/dx = 2
    ad.backward(y.sum())
    assert x.grad[0] == 2.0


@pytest.mark.parametrize("op_name", [
    "add_bias", "sub", "mul", "div", "matmul_22", "matmul_12", "matmul_21",
    "dot", "transpose", "relu", "exp", "log", "sqrt", "sum_axis0", "mean_axis0",
    "rows", "take_per_row", "stack_rows", "concat_rows", "pairwise_sqdist",
    "row_normalize", "softmax", "log_softmax", "cross_entropy", "mse",
    "squared_euclidean",
])
def test_finite_diff_per_op(op_name):
    rng = np.random.default_rng(hash(op_name) % 2 ** 32)
    if op_name == "add_bias":
        a, b = rand_tensor(rng, (3, 4)), rand_tensor(rng, (4,))
        fn = lambda: ad.mse(ad.add(a, b), ad.Tensor(np.zeros((3, 4))))
        params = [a, b]
    elif op_name == "sub":
        a, b = rand_tensor(rng, (5,)), rand_tensor(rng, (5,))
        fn = lambda: ad.squared_euclidean(ad.sub(a, b), ad.Tensor(np.zeros(5)))
        params = [a, b]
    elif op_name == "mul":
        a, b = rand_tensor(rng, (4,)), rand_tensor(rng, (4,))
        fn = lambda: ad.mul(a, b).sum()
        params = [a, b]
    elif op_name == "div":
        a = rand_tensor(rng, (4,))
        b = ad.Tensor(rng.normal(size=4) + 3.0, requires_grad=True)
        fn = lambda: ad.div(a, b).sum()
        params = [a, b]
    elif op_name == "matmul_22":
        a, b = rand_tensor(rng, (2, 3)), rand_tensor(rng, (3, 2))
        fn = lambda: ad.matmul(a, b).sum()
        params = [a, b]
    elif op_name == "matmul_12":
        a, b = rand_tensor(rng, (3,)), rand_tensor(rng, (3, 2))
        fn = lambda: ad.matmul(a, b).sum()
        params = [a, b]
    elif op_name == "matmul_21":
        a, b = rand_tensor(rng, (2, 3)), rand_tensor(rng, (3,))
        fn = lambda: ad.matmul(a, b).sum()
        params = [a, b]
    elif op_name == "dot":
        a, b = rand_tensor(rng, (4,)), rand_tensor(rng, (4,))
        fn = lambda: ad.matmul(a, b)
        params = [a, b]
    elif op_name == "transpose":
        a = rand_tensor(rng, (2, 3))
        fn = lambda: ad.mse(ad.transpose(a), ad.Tensor(np.ones((3, 2))))
        params = [a]
    elif op_name == "relu":
        a = ad.Tensor(rng.normal(size=6) + 0.5, requires_grad=True)
        fn = lambda: ad.relu(a).sum()
        params = [a]
    elif op_name == "exp":
        a = rand_tensor(rng, (4,))
        fn = lambda: a.exp().sum()
        params = [a]
    elif op_name == "log":
        a = ad.Tensor(rng.uniform(0.5, 2.0, size=4), requires_grad=True)
        fn = lambda: a.log().sum()
        params = [a]
    elif op_name == "sqrt":
        a = ad.Tensor(rng.uniform(0.5, 2.0, size=4), requires_grad=True)
        fn = lambda: a.sqrt().sum()
        params = [a]
    elif op_name == "sum_axis0":
        a = rand_tensor(rng, (3, 4))
        fn = lambda: ad.squared_euclidean(a.sum(axis=0), ad.Tensor(np.zeros(4)))
        params = [a]
    elif op_name == "mean_axis0":
        a = rand_tensor(rng, (3, 4))
        fn = lambda: ad.squared_euclidean(a.mean(axis=0), ad.Tensor(np.zeros(4)))
        params = [a]
    elif op_name == "rows":
        a = rand_tensor(rng, (5, 3))
        fn = lambda: ad.rows(a, [0, 2, 2]).sum()
        params = [a]
    elif op_name == "take_per_row":
        a = rand_tensor(rng, (4, 3))
        fn = lambda: ad.take_per_row(a, [0, 2, 1, 2]).sum()
        params = [a]
    elif op_name == "stack_rows":
        vs = [rand_tensor(rng, (3,)) for _ in range(3)]
        fn = lambda: ad.mse(ad.stack_rows(vs), ad.Tensor(np.ones((3, 3))))
        params = vs
    elif op_name == "concat_rows":
        ms = [rand_tensor(rng, (2, 3)), rand_tensor(rng, (1, 3))]
        fn = lambda: ad.concat_rows(ms).sum()
        params = ms
    elif op_name == "pairwise_sqdist":
        a, b = rand_tensor(rng, (3, 2)), rand_tensor(rng, (2, 2))
        fn = lambda: ad.pairwise_sqdist(a, b).sum()
        params = [a, b]
    elif op_name == "row_normalize":
        a = ad.Tensor(rng.normal(size=(3, 4)) + 2.0, requires_grad=True)
        fn = lambda: ad.row_normalize(a).sum()
        params = [a]
    elif op_name == "softmax":
        a = rand_tensor(rng, (2, 4))
        w = ad.Tensor(rng.normal(size=(2, 4)))
        fn = lambda: ad.mul(ad.softmax(a), w).sum()
        params = [a]
    elif op_name == "log_softmax":
        a = rand_tensor(rng, (2, 4))
        fn = lambda: ad.take_per_row(ad.log_softmax(a), [1, 3]).sum()
        params = [a]
    elif op_name == "cross_entropy":
        a = rand_tensor(rng, (3, 5))
        fn = lambda: ad.softmax_cross_entropy(a, [0, 4, 2])
        params = [a]
    elif op_name == "mse":
        a, b = rand_tensor(rng, (2, 3)), rand_tensor(rng, (2, 3))
        fn = lambda: ad.mse(a, b)
        params = [a, b]
    else:
        a, b = rand_tensor(rng, (4,)), rand_tensor(rng, (4,))
        fn = lambda: ad.squared_euclidean(a, b)
        params = [a, b]
    assert ad.finite_diff_check(fn, params) < 1e-6


def test_finite_diff_check_contract():
    x = ad.Tensor([1.0, -2.0], requires_grad=True)
    quadratic = lambda: ad.squared_euclidean(x, ad.Tensor([0.3, 0.4]))
    assert ad.finite_diff_check(quadratic, [x]) < 1e-6

    constant = lambda: ad.scale(x, 0.0).sum()
    assert ad.finite_diff_check(constant, [x]) == 0.0

    with pytest.raises(ValueError, match="epsilon"):
        ad.finite_diff_check(quadratic, [x], epsilon=0.5)

    bad = lambda: ad.log(ad.Tensor([-1.0])).sum()
    with np.errstate(invalid="ignore"), pytest.raises(ad.NonFiniteError):
        ad.finite_diff_check(bad, [x])


def test_finite_diff_mlp_loss():
    # two-hidden-layer relu net, gradient w.r.t. all weights
    rng = np.random.default_rng(11)
    w1 = rand_tensor(rng, (4, 8))
    w2 = rand_tensor(rng, (8, 8))
    w3 = rand_tensor(rng, (8, 3))
    x = ad.Tensor(rng.normal(size=(5, 4)))
    target = ad.Tensor(rng.normal(size=(5, 3)))

    def loss():
        h = ad.relu(ad.matmul(x, w1))
        h = ad.relu(ad.matmul(h, w2))
        return ad.mse(ad.matmul(h, w3), target)

    assert ad.finite_diff_check(loss, [w1, w2, w3]) < 1e-4


def test_zero_norm_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        ad.row_normalize(ad.Tensor([0.0, 0.0]))


def test_cross_entropy_uniform_logits():
    out = ad.softmax_cross_entropy(ad.Tensor(np.zeros((2, 4))), [1, 3])
    assert abs(out.item() - math.log(4.0)) < 1e-12


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValueError, match="label"):
        ad.softmax_cross_entropy(ad.Tensor(np.zeros((1, 3))), [5])


def test_masked_logits_get_no_mass_and_no_grad():
    logits = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    mask = ad.Tensor([0.0, -np.inf, 0.0])
    loss = ad.softmax_cross_entropy(ad.add(logits, mask), 2)
    probs = ad.softmax(ad.add(logits, mask))
    assert probs.data[1] == 0.0
    ad.backward(loss)
    assert logits.grad[1] == 0.0
    assert np.isfinite(logits.grad).all()


class TestOptimizers:
    def test_plain_step(self):
        p = ad.Tensor([1.0], requires_grad=True)
        p.grad = np.array([2.0])
        opt = ad.GradientDescent([p], lr=0.1)
        opt.step()
        assert abs(p.data[0] - 0.8) < 1e-15

    def test_adam_zero_grad_keeps_params(self):
        p = ad.Tensor([1.0, -1.0], requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        for _ in range(5):
            p.grad = np.zeros(2)
            opt.step()
        assert np.array_equal(p.data, [1.0, -1.0])

    def test_cosine_schedule_decreases_to_zero(self):
        sched = ad.CosineSchedule(0.1, horizon=50)
        values = [sched.value(t) for t in range(51)]
        assert values[0] == 0.1
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[50] <= values[0]
        assert abs(values[50]) < 1e-15
        assert min(values) >= 0.0

    def test_nan_grad_aborts_step(self):
        p = ad.Tensor([1.0], requires_grad=True)
        p.grad = np.array([np.nan])
        opt = ad.Adam([p], lr=0.1)
        with pytest.raises(ad.NonFiniteError):
            opt.step()
        assert p.data[0] == 1.0  # untouched

    def test_adam_converges_on_quadratic(self):
        p = ad.Tensor([4.0, -3.0], requires_grad=True)
        opt = ad.Adam([p], lr=0.2)
        for _ in range(300):
            opt.zero_grad()
            loss = ad.squared_euclidean(p, ad.Tensor([1.0, 1.0]))
            ad.backward(loss)
            opt.step()
        assert np.max(np.abs(p.data - 1.0)) < 1e-3


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    named = [("w1", ad.Tensor(rng.normal(size=(4, 3)))),
             ("b1", ad.Tensor(rng.normal(size=3) * 1e-17))]
    path = tmp_path / "ckpt.json"
    ad.save_checkpoint(path, named)
    loaded = ad.load_checkpoint(path)
    for name, t in named:
        assert loaded[name].shape == t.data.shape
        assert np.array_equal(loaded[name], t.data)


def test_checkpoint_rejects_foreign_payload(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else", "params": []}')
    with pytest.raises(ValueError, match="checkpoint"):
        ad.load_checkpoint(path)


def test_determinism_same_seed_bitwise():
    def run():
        rng = np.random.default_rng(42)
        w = ad.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        opt = ad.Adam([w], lr=0.05)
        for _ in range(20):
            opt.zero_grad()
            x = ad.Tensor(rng.normal(size=(3, 6)))
            loss = ad.mse(ad.relu(ad.matmul(x, w)), ad.Tensor(np.zeros((3, 4))))
            ad.backward(loss)
            opt.step()
        return w.data.copy()

    assert np.array_equal(run(), run())
