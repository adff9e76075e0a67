import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lora_rffi.errors import ConfigurationError, FormatError, InputError, StateError
from lora_rffi.nn import (AdamState, ArchitectureSpec, ModelParams, PlateauScheduler, RffNet,
                          adam_step, avgpool_backward, avgpool_forward, conv2d_backward,
                          conv2d_forward, dense_backward, dense_forward, load_checkpoint,
                          relu_backward, relu_forward, save_checkpoint, softmax)
from lora_rffi.objectives import LossConfig, combined_loss, nt_xent
from lora_rffi.verification import oracle_grad, relative_error

TOL = 1e-4
SEEDS = range(20)

TOY = ArchitectureSpec(
    conv_stages=((3, 3, 4, 2), (3, 3, 4, 1), (3, 3, 6, 2), (3, 3, 6, 1)),
    skip_connections=((1, 2), (2, 4)),
    dense_sizes=(7, 5), num_classes=3, input_shape=(9, 10),
)


def _check(analytic: dict, fn, params: dict):
    numeric = oracle_grad(fn, params)
    for name in params:
        assert relative_error(analytic[name], numeric[name]) <= TOL, name


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("k, stride, pad", [(7, 2, 3), (3, 1, 1), (3, 2, 1), (1, 2, 0)])
def test_conv_gradients(seed, k, stride, pad):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 7, 8))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    y, cache = conv2d_forward(x, w, b, stride, pad)
    r = rng.normal(size=y.shape)
    dx, dw, db = conv2d_backward(r, w, cache)
    fn = lambda p: np.sum(conv2d_forward(p["x"], p["w"], p["b"], stride, pad)[0] * r)
    _check({"x": dx, "w": dw, "b": db}, fn, {"x": x, "w": w, "b": b})


def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(1, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y, _ = conv2d_forward(x, w, b, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(y.shape[2]):
            for j in range(y.shape[3]):
                patch = xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                assert y[0, o, i, j] == pytest.approx(np.sum(patch * w[o]) + b[o])


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
    r = rng.normal(size=x.shape)
    y, mask = relu_forward(x)
    _check({"x": relu_backward(r, mask)}, lambda p: np.sum(relu_forward(p["x"])[0] * r), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
def test_avgpool_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 5))
    r = rng.normal(size=(2, 3))
    _, shape = avgpool_forward(x)
    _check({"x": avgpool_backward(r, shape)}, lambda p: np.sum(avgpool_forward(p["x"])[0] * r), {"x": x})


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    r = rng.normal(size=(4, 3))
    dx, dw, db = dense_backward(r, x, w)
    fn = lambda p: np.sum(dense_forward(p["x"], p["w"], p["b"]) * r)
    _check({"x": dx, "w": dw, "b": db}, fn, {"x": x, "w": w, "b": b})


def _toy_params(seed):
    p = ModelParams.initialize(TOY, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for k in p.tensors:
        if k.endswith(".b"):
            p.tensors[k] = rng.normal(scale=0.1, size=p.tensors[k].shape)
    return p


@pytest.mark.parametrize("seed", range(3))
def test_network_gradients_end_to_end(seed):
    # skip-add, projection skip, every layer and the combined loss through one graph
    rng = np.random.default_rng(seed)
    params = _toy_params(seed)
    x = rng.normal(size=(4, 9, 10))
    y = np.array([0, 0, 2, 2])
    cfg = LossConfig(temperature=0.5, batch_pairs=2)

    def loss(p):
        net = RffNet(ModelParams(TOY, p))
        z = net.forward_extract(x)
        return combined_loss(z, net.forward_logits(z), y, cfg)[0]

    net = RffNet(params)
    z = net.forward_extract(x)
    _, _, dz, dl = combined_loss(z, net.forward_logits(z), y, cfg)
    grads = net.backward(dz=dz, dlogits=dl)
    _check(grads, loss, params.tensors)


def test_default_architecture_shapes():
    arch = ArchitectureSpec(width_scale=0.25)
    trace = arch.shape_trace()
    assert trace[0] == (1, 25, 127)
    assert trace[1] == (8, 13, 64) and trace[6] == (16, 7, 32) and trace[-1] == (16, 7, 32)
    p = ModelParams.initialize(arch, 0)
    assert p.num_parameters() == 153_610
    assert {"skip7.w", "skip7.b"} <= set(p.tensors) and "skip3.w" not in p.tensors
    full = ArchitectureSpec()
    assert full.channels() == [32] * 5 + [64] * 4


def test_toy_16x16_embedding_length():
    arch = ArchitectureSpec(width_scale=0.25, input_shape=(16, 16))
    net = RffNet(ModelParams.initialize(arch, 0))
    assert net.forward_extract(np.zeros((2, 16, 16))).shape == (2, 256)


def test_shape_mismatch_names_dims():
    net = RffNet(ModelParams.initialize(ArchitectureSpec(width_scale=0.25), 0))
    with pytest.raises(InputError, match=r"25, 127"):
        net.forward_extract(np.zeros((1, 25, 126)))


def test_zero_input_bias_path():
    arch = ArchitectureSpec(width_scale=0.25)
    p = ModelParams.initialize(arch, 0, dtype=np.float64)
    rng = np.random.default_rng(0)
    for k in p.tensors:
        if k.startswith(("conv", "skip")):
            p.tensors[k] = np.zeros_like(p.tensors[k]) if k.endswith(".w") else rng.normal(size=p.tensors[k].shape)
    t = p.tensors
    r = lambda v: np.maximum(v, 0)
    a1 = r(t["conv1.b"]); a3 = r(t["conv3.b"] + a1); a5 = r(t["conv5.b"] + a3)
    a7 = r(t["conv7.b"] + t["skip7.b"]); a9 = r(t["conv9.b"] + a7)
    z = r(a9 @ t["dense1.w"] + t["dense1.b"]) @ t["dense2.w"] + t["dense2.b"]
    out = RffNet(p).forward_extract(np.zeros((1, 25, 127)))
    np.testing.assert_allclose(out[0], z, rtol=1e-12, atol=1e-12)


def test_identical_inputs_identical_embeddings(rng):
    net = RffNet(ModelParams.initialize(ArchitectureSpec(width_scale=0.25), 3))
    x = rng.random((1, 25, 127))
    z = net.forward_extract(np.concatenate([x, x]))
    np.testing.assert_array_equal(z[0], z[1])


def test_classifier_head():
    p = ModelParams.initialize(TOY, 0, dtype=np.float64)
    p.tensors["cls.w"][:] = 0
    net = RffNet(p)
    np.testing.assert_allclose(net.forward_classify(np.ones((2, 5))), 1 / 3)
    logits = np.zeros((1, 10)); logits[0, 0] = 10
    q = softmax(logits)
    assert q.argmax() == 0 and q[0, 0] > 0.99
    np.testing.assert_allclose(softmax(logits + 123.4), q, rtol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
@settings(max_examples=50, deadline=None)
def test_softmax_rows(logits):
    q = softmax(np.array([logits]))
    assert abs(q.sum() - 1) <= 1e-9 and np.all(q > 0)


def test_backward_contracts(rng):
    p = _toy_params(0)
    net = RffNet(p)
    with pytest.raises(StateError):
        net.backward(dz=np.zeros((1, 5)))
    before = p.digest()
    z = net.forward_extract(rng.normal(size=(4, 9, 10)))
    g = net.backward(dz=np.zeros_like(z))
    assert all(not v.any() for v in g.values())
    with pytest.raises(StateError):
        net.backward(dlogits=np.zeros((4, 3)))
    loss, dz = nt_xent(z, LossConfig(batch_pairs=2))
    g = net.backward(dz=dz)
    assert not g["cls.w"].any() and not g["cls.b"].any()
    assert any(v.any() for k, v in g.items() if not k.startswith("cls."))
    assert p.digest() == before


def test_adam_first_steps():
    arch = TOY
    p = ModelParams.initialize(arch, 0)
    w0 = p.tensors["dense2.b"].copy()
    st_ = AdamState()
    grads = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    grads["dense2.b"] = np.ones_like(w0)
    adam_step(p, grads, 0.0003, st_)
    step1 = p.tensors["dense2.b"] - w0
    np.testing.assert_allclose(step1, -0.0003, atol=1e-6)
    assert np.array_equal(p.tensors["cls.w"], ModelParams.initialize(arch, 0).tensors["cls.w"])
    w1 = p.tensors["dense2.b"].copy()
    adam_step(p, grads, 0.0003, st_)
    np.testing.assert_allclose(p.tensors["dense2.b"] - w1, step1, rtol=1e-3)


def test_adam_frozen_and_shape_check():
    p = ModelParams.initialize(TOY, 0)
    before = p.digest(p.extractor_names)
    grads = {k: np.ones_like(v) for k, v in p.tensors.items()}
    adam_step(p, grads, 0.1, AdamState(), frozen=set(p.extractor_names))
    assert p.digest(p.extractor_names) == before
    with pytest.raises(InputError):
        adam_step(p, {"cls.b": np.ones(7)}, 0.1, AdamState())


def test_scheduler_semantics():
    s = PlateauScheduler(1.0)
    for e in range(50):
        lr, stop = s.step(100.0 - e)
        assert lr == 1.0 and not stop
    s = PlateauScheduler(1.0)
    s.step(1.0)
    history = [s.step(1.0) for _ in range(30)]
    assert [h[0] for h in history[:9]] == [1.0] * 9
    assert history[9][0] == 0.5  # 10th flat epoch
    assert history[19][0] == 0.25
    assert history[28][1] is False and history[29][1] is True


def test_checkpoint_round_trip(tmp_path):
    p = ModelParams.initialize(ArchitectureSpec(width_scale=0.25), 5)
    save_checkpoint(p, tmp_path / "m.ckpt", {"stage": "x"})
    q, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"stage": "x"} and q.arch == p.arch
    for k in p.tensors:
        assert q.tensors[k].tobytes() == p.tensors[k].tobytes()
    save_checkpoint(q, tmp_path / "n.ckpt", {"stage": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    p = ModelParams.initialize(TOY, 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    data = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + data[8:])
    (tmp_path / "short").write_bytes(data[:-4])
    (tmp_path / "long").write_bytes(data + b"\0")
    for name in ("bad", "short", "long"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)


def test_initialization_and_extractor_transfer():
    a = ModelParams.initialize(TOY, 1)
    assert a.digest() == ModelParams.initialize(TOY, 1).digest()
    assert a.digest() != ModelParams.initialize(TOY, 2).digest()
    assert all(not v.any() for k, v in a.tensors.items() if k.endswith(".b"))
    b = ModelParams.initialize(TOY, 2)
    b.load_extractor(a)
    assert b.digest(b.extractor_names) == a.digest(a.extractor_names)
    other = ModelParams.initialize(ArchitectureSpec(width_scale=0.25), 0)
    with pytest.raises(ConfigurationError):
        b.load_extractor(other)


@pytest.mark.parametrize("kwargs", [
    {"conv_stages": ()}, {"conv_stages": ((2, 2, 4, 1),)}, {"skip_connections": ((3, 2),)},
    {"dense_sizes": (5,)}, {"num_classes": 1}, {"width_scale": 0}, {"input_shape": (0, 5)},
])
def test_architecture_validation(kwargs):
    with pytest.raises(ConfigurationError):
        ArchitectureSpec(**kwargs)


def test_architecture_round_trip():
    arch = ArchitectureSpec(width_scale=0.5, num_classes=4)
    assert ArchitectureSpec.from_dict(arch.to_dict()) == arch
    with pytest.raises(ConfigurationError):
        ArchitectureSpec.from_dict({"depth": 3})
