import numpy as np
import pytest

from fxpgrad.engine import (
    BatchNorm,
    Bits,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    NumericError,
    OptimState,
    ReLU,
    ResidualAdd,
    RunContext,
    Sequential,
    Trainer,
    build_model,
    init_clip_values,
    softmax_cross_entropy,
)
from fxpgrad.engine.model import CLIP_FLOOR
from fxpgrad.interval import IntervalPolicy, PolicyKind
from fxpgrad.quantizer import Rounding

F64 = np.float64
EPS = 1e-4


def fp_ctx(train=True):
    return RunContext(quantize=False, train=train)


def _numeric_grad(f, arr):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + EPS
        up = f()
        arr[i] = old - EPS
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * EPS)
    return g


def check_layer(layer, x, seed=0):
    """Compare analytic input/param gradients of sum(R * layer(x)) with central differences."""
    rng = np.random.default_rng(seed)
    y, _ = layer.forward(x, fp_ctx())
    R = rng.standard_normal(y.shape)

    def f():
        return float(np.sum(R * layer.forward(x, fp_ctx())[0]))

    layer.zero_grad()
    _, cache = layer.forward(x, fp_ctx())
    dx = layer.backward(R, cache, fp_ctx())
    np.testing.assert_allclose(dx, _numeric_grad(f, x), rtol=1e-4, atol=1e-7)
    for k, p in layer.params.items():
        np.testing.assert_allclose(layer.grads[k], _numeric_grad(f, p), rtol=1e-4, atol=1e-7, err_msg=k)


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_dense_gradient():
    check_layer(Dense(5, 3, _rng(), dtype=F64), _rng(1).standard_normal((4, 5)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient(stride):
    conv = Conv2D(2, 3, 3, _rng(), stride=stride, bias=True, dtype=F64)
    check_layer(conv, _rng(1).standard_normal((2, 2, 5, 5)))


def test_batchnorm_gradient():
    bn = BatchNorm(3, dtype=F64)
    bn.params["weight"][:] = [0.5, 1.5, -1.0]
    bn.params["bias"][:] = [0.1, 0.0, -0.2]
    check_layer(bn, _rng(1).standard_normal((4, 3, 2, 2)))
    check_layer(BatchNorm(4, dtype=F64), _rng(2).standard_normal((6, 4)))


def test_relu_gradient():
    x = _rng(1).standard_normal((3, 7))
    x[np.abs(x) < 1e-2] = 0.5  # keep clear of the kink
    check_layer(ReLU(), x)


def test_maxpool_gradient():
    # distinct values so the argmax is unambiguous under perturbation
    x = _rng(1).permutation(np.arange(2 * 2 * 4 * 4, dtype=F64)).reshape(2, 2, 4, 4) * 0.01
    check_layer(MaxPool2D(2), x)


def test_gap_and_flatten_gradients():
    check_layer(GlobalAvgPool(), _rng(1).standard_normal((2, 3, 4, 4)))
    check_layer(Flatten(), _rng(1).standard_normal((2, 3, 2, 2)))


@pytest.mark.parametrize("c_in, c_out, stride", [(2, 2, 1), (2, 4, 2)])
def test_residual_gradient(c_in, c_out, stride):
    r = _rng()
    body = Sequential([
        Conv2D(c_in, c_out, 3, r, stride=stride, dtype=F64), ReLU(),
        Conv2D(c_out, c_out, 3, r, dtype=F64),
    ])
    block = ResidualAdd(body, c_in, c_out, stride)
    rng = _rng(1)
    x = rng.standard_normal((2, c_in, 4, 4))
    R = rng.standard_normal((2, c_out, 4 // stride, 4 // stride))

    def f():
        return float(np.sum(R * block.forward(x, fp_ctx())[0]))

    for l in (block, *body.layers):
        l.zero_grad()
    _, cache = block.forward(x, fp_ctx())
    dx = block.backward(R, cache, fp_ctx())
    np.testing.assert_allclose(dx, _numeric_grad(f, x), rtol=1e-4, atol=1e-7)
    w = body.layers[0].params["weight"]
    np.testing.assert_allclose(body.layers[0].grads["weight"], _numeric_grad(f, w), rtol=1e-4, atol=1e-7)


def test_cross_entropy_gradient():
    logits = _rng(1).standard_normal((4, 5))
    labels = np.array([0, 3, 4, 1])
    _, d = softmax_cross_entropy(logits, labels)
    num = _numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    np.testing.assert_allclose(d, num, rtol=1e-4, atol=1e-8)


def test_cross_entropy_value():
    loss, _ = softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 1]))
    assert loss == pytest.approx(np.log(4))


def test_full_model_gradient_unquantized():
    m = build_model("smallcnn", (1, 8, 8), 3, "fp", seed=0, width=2, dtype=F64)
    rng = _rng(1)
    x = rng.standard_normal((3, 1, 8, 8))
    y = np.array([0, 1, 2])

    def f():
        return softmax_cross_entropy(m.forward(x, fp_ctx())[0], y)[0]

    m.zero_grad()
    logits, cache = m.forward(x, fp_ctx())
    m.backward(softmax_cross_entropy(logits, y)[1], cache, fp_ctx())
    conv = m.weight_layers()[1]
    np.testing.assert_allclose(conv.grads["weight"], _numeric_grad(f, conv.params["weight"]), rtol=1e-4, atol=1e-8)


# forward semantics -----------------------------------------------------------

def _ref_mlp(model, x):
    h = x.reshape(len(x), -1)
    dense = model.weight_layers()
    for i, l in enumerate(dense):
        h = h @ l.params["weight"].T + l.params["bias"]
        if i < len(dense) - 1:
            h = np.maximum(h, 0)
    return h


def test_quantization_disabled_matches_reference():
    m = build_model("mlp", (1, 4, 4), 3, "4/4/4", hidden=(8, 8), dtype=F64, seed=2)
    x = _rng(3).standard_normal((5, 1, 4, 4))
    out, _ = m.forward(x, RunContext(quantize=False))
    np.testing.assert_allclose(out, _ref_mlp(m, x), rtol=1e-12)


def test_eight_bit_forward_is_close_to_full_precision():
    x = np.abs(_rng(3).standard_normal((32, 1, 8, 8)))
    m = build_model("mlp", (1, 8, 8), 10, "8/8/8", hidden=(64, 64), dtype=F64, seed=1)
    init_clip_values(m, x, percentile=100)
    q, _ = m.forward(x, RunContext(train=False))
    f, _ = m.forward(x, RunContext(train=False, quantize=False))
    assert np.linalg.norm(q - f) / np.linalg.norm(f) < 0.02


def test_zero_weights_give_zero_logits():
    m = build_model("mlp", (1, 4, 4), 3, "4/4/4", bias=False, dtype=F64)
    for l in m.weight_layers():
        l.params["weight"][:] = 0
    out, _ = m.forward(_rng().standard_normal((2, 1, 4, 4)), RunContext())
    assert np.all(out == 0)


def test_smallcnn_on_zero_input_emits_final_bias():
    m = build_model("smallcnn", (1, 8, 8), 4, "4/4/4", width=4, dtype=F64)
    fc = m.weight_layers()[-1]
    fc.params["bias"][:] = [0.1, -0.2, 0.3, 0.0]
    out, _ = m.forward(np.zeros((2, 1, 8, 8)), RunContext(train=False))
    np.testing.assert_allclose(out, np.tile(fc.params["bias"], (2, 1)), atol=1e-12)


def test_bad_input_shape_rejected():
    m = build_model("mlp", (1, 4, 4), 3)
    with pytest.raises(ValueError):
        m.forward(np.zeros((2, 1, 5, 5), np.float32), RunContext())


@pytest.mark.parametrize(
    "arch, shape, kw, n_weight, n_quant",
    [
        ("mlp", (1, 28, 28), {"hidden": (128,)}, 3, 1),
        ("mlp", (1, 28, 28), {"hidden": (64, 32)}, 4, 2),
        ("smallcnn", (3, 32, 32), {}, 4, 2),
        ("resnet20", (3, 32, 32), {}, 20, 18),
    ],
)
def test_layer_counts(arch, shape, kw, n_weight, n_quant):
    m = build_model(arch, shape, 10, "4/4/4", **kw)
    assert len(m.weight_layers()) == n_weight
    assert len(m.quantized_layers()) == n_quant
    wl = m.weight_layers()
    assert wl[0].quant is None and wl[-1].quant is None


def test_first_and_last_layers_never_quantized():
    m = build_model("smallcnn", (1, 8, 8), 3, "4/4/4", width=4)
    tr = Trainer(m, OptimState(), IntervalPolicy(), seed=0)
    x = _rng().standard_normal((4, 1, 8, 8)).astype(np.float32)
    tr.train_step(x, np.array([0, 1, 2, 0]))
    calls = tr.last_ctx.quantizer_calls
    first, last = m.weight_layers()[0].name, m.weight_layers()[-1].name
    assert not any(name in (first, last) for name, _ in calls)
    for l in m.quantized_layers():
        assert calls[(l.name, "weight")] == calls[(l.name, "act")] == calls[(l.name, "grad")] == 1


def test_resnet_shapes():
    m = build_model("resnet20", (3, 8, 8), 10, "4/4/4", width=4)
    out, _ = m.forward(_rng().standard_normal((2, 3, 8, 8)).astype(np.float32), RunContext(train=False))
    assert out.shape == (2, 10)


# gradient quantization inside the engine ----------------------------------------

def test_zero_upstream_gradient_leaves_gamma():
    m = build_model("mlp", (1, 4, 4), 3, "4/4/4", hidden=(8, 8), dtype=F64)
    ctx = RunContext()
    x = _rng().standard_normal((4, 1, 4, 4))
    before = [l.quant.grad_state.gamma for l in m.quantized_layers()]
    m.zero_grad()
    logits, cache = m.forward(x, ctx)
    m.backward(np.zeros_like(logits), cache, ctx)
    assert [l.quant.grad_state.gamma for l in m.quantized_layers()] == before
    for l in m.param_layers():
        for g in l.grads.values():
            assert np.all(g == 0)


def test_sixteen_bit_quantization_is_transparent():
    kw = dict(hidden=(32, 32), dtype=F64, seed=4, wide=True)
    fp = build_model("mlp", (1, 4, 4), 3, "fp", **kw)
    q = build_model("mlp", (1, 4, 4), 3, "16/16/16", policy=IntervalPolicy(PolicyKind.MINMAX), **kw)
    rng = _rng(5)
    x = np.abs(rng.standard_normal((64, 1, 4, 4)))
    y = rng.integers(0, 3, 64)
    init_clip_values(q, x, percentile=100)
    for l in q.quantized_layers():
        l.quant.a_clip.value *= 4  # headroom so activations never clip as weights move
        l.quant.w_clip.value *= 4
        l.quant.w_clip.learnable = l.quant.a_clip.learnable = False
    opt = OptimState(lr=0.05, momentum=0.0, weight_decay=0.0)
    t_fp = Trainer(fp, opt, IntervalPolicy(PolicyKind.MINMAX), seed=0)
    t_q = Trainer(q, opt, IntervalPolicy(PolicyKind.MINMAX), seed=0, grad_rounding=Rounding.NEAREST)
    for _ in range(20):
        t_fp.train_step(x, y)
        t_q.train_step(x, y)
    for a, b in zip(fp.weight_layers(), q.weight_layers()):
        wa, wb = a.params["weight"], b.params["weight"]
        assert np.linalg.norm(wa - wb) / np.linalg.norm(wa) < 1e-2


def _separable(n=256, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 1, 4, 4)) * 0.3
    x[:, 0, 0, 0] += np.where(y == 1, 2.0, -2.0)
    return x.astype(np.float32), y


def _run(seed, steps=30, policy=IntervalPolicy()):
    x, y = _separable()
    m = build_model("mlp", (1, 4, 4), 2, "4/4/4", hidden=(16, 16), seed=seed, tau=None, alpha=0.05, policy=policy)
    init_clip_values(m, x[:64])
    tr = Trainer(m, OptimState(lr=0.05), policy, seed=seed)
    losses = []
    for i in range(steps):
        b = slice((i * 32) % 256, (i * 32) % 256 + 32)
        losses.append(tr.train_step(x[b], y[b])[0])
    return losses, tr


def test_same_seed_is_bit_identical():
    a, _ = _run(3)
    b, _ = _run(3)
    assert a == b
    c, _ = _run(4)
    assert a != c


def test_loss_decreases_on_separable_data():
    losses, tr = _run(0, steps=200)
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])
    x, y = _separable(seed=1)
    assert tr.evaluate(x, y)[1] > 0.95


def test_reports_follow_forward_order():
    _, tr = _run(0, steps=1)
    names = [l.name for l in tr.model.quantized_layers()]
    loss, reports, steps = tr.train_step(*_separable(32))
    assert [s.layer for s in steps] == names
    assert len(reports) == len(names)
    _, reports, steps = tr.train_step(*_separable(32), full_stats=False)
    assert reports == [] and len(steps) == len(names)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort():
    m = build_model("mlp", (1, 4, 4), 2, "fp", hidden=(4,))
    m.weight_layers()[0].params["weight"][0, 0] = np.inf
    with pytest.raises(NumericError):
        m.forward(np.ones((1, 1, 4, 4), np.float32), RunContext())


# clip initialisation ----------------------------------------------------------

def test_init_clip_uniform_weights():
    m = build_model("mlp", (1, 100, 100), 2, "4/4/4", hidden=(100, 10_000), dtype=F64)
    layer = m.quantized_layers()[0]
    layer.params["weight"][:] = np.linspace(-1, 1, layer.params["weight"].size).reshape(layer.params["weight"].shape)
    init_clip_values(m, np.ones((2, 1, 100, 100)))
    assert layer.quant.w_clip.value == pytest.approx(0.999, abs=1e-3)


def test_init_clip_constant_and_dead_inputs():
    m = build_model("mlp", (1, 2, 2), 2, "4/4/4", hidden=(4, 4), dtype=F64)
    first = m.weight_layers()[0]
    first.params["weight"][:] = 0
    first.params["bias"][:] = 0.7
    init_clip_values(m, np.ones((3, 1, 2, 2)))
    assert m.quantized_layers()[0].quant.a_clip.value == pytest.approx(0.7)
    first.params["bias"][:] = -1.0  # relu kills everything
    init_clip_values(m, np.ones((3, 1, 2, 2)))
    assert m.quantized_layers()[0].quant.a_clip.value == CLIP_FLOOR


def test_init_clip_empty_batch():
    m = build_model("mlp", (1, 2, 2), 2)
    with pytest.raises(ValueError):
        init_clip_values(m, np.zeros((0, 1, 2, 2)))


# bits / checkpoints -----------------------------------------------------------------

def test_bits_parse():
    assert str(Bits.parse("4/8/fp")) == "4/8/fp"
    assert Bits.parse("fp").is_fp
    assert Bits.parse("6") == Bits(6, 6, 6)
    with pytest.raises(ValueError):
        Bits.parse("4/4")


def test_checkpoint_resume_is_bit_identical(tmp_path):
    x, y = _separable()

    def fresh():
        m = build_model("mlp", (1, 4, 4), 2, "4/4/4", hidden=(16, 16), seed=1)
        init_clip_values(m, x[:64])
        return Trainer(m, OptimState(lr=0.05), IntervalPolicy(), seed=1)

    batches = [(x[i : i + 32], y[i : i + 32]) for i in range(0, 256, 32)]
    ref = fresh()
    ref_losses = [ref.train_step(*b)[0] for b in batches]

    a = fresh()
    for b in batches[:4]:
        a.train_step(*b)
    a.save_checkpoint(tmp_path / "ck.npz")
    b_tr = fresh()
    b_tr.load_checkpoint(tmp_path / "ck.npz")
    resumed = [b_tr.train_step(*b)[0] for b in batches[4:]]
    assert resumed == ref_losses[4:]
    for la, lb in zip(ref.model.param_layers(), b_tr.model.param_layers()):
        for k in la.params:
            assert np.array_equal(la.params[k], lb.params[k])
