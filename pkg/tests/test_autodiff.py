import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamstop import autodiff as ad
from beamstop.autodiff import Adagrad, DimensionError, Tape, Tensor

from gradcheck import check

TRIALS = 100


def _t(rng, *shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.1, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _weights(rng, out):
    return Tensor(rng.normal(size=out.shape))


# each case builds (inputs, fn) from a generator; the loss is <w, fn(inputs)>
# with a random fixed w so every output coordinate matters
CASES = {
    "add": lambda r: ([_t(r, 3, 4), _t(r, 3, 4)], ad.add),
    "add_scalar": lambda r: ([_t(r, 3, 4), _t(r)], ad.add),
    "sub": lambda r: ([_t(r, 2, 5), _t(r, 2, 5)], ad.sub),
    "sub_scalar": lambda r: ([_t(r), _t(r, 4)], ad.sub),
    "mul": lambda r: ([_t(r, 3, 3), _t(r, 3, 3)], ad.mul),
    "mul_scalar": lambda r: ([_t(r, 5), _t(r, 1)], ad.mul),
    "tanh": lambda r: ([_t(r, 4, 3)], ad.tanh),
    "sigmoid": lambda r: ([_t(r, 4, 3, low=-6, high=6)], ad.sigmoid),
    "log_sigmoid": lambda r: ([_t(r, 7, low=-8, high=8)], ad.log_sigmoid),
    "relu_plus": lambda r: ([_away_from_zero(r, 3, 4)], ad.relu_plus),
    "exp": lambda r: ([_t(r, 6)], ad.exp),
    "log": lambda r: ([_t(r, 6, low=0.2, high=3.0)], ad.log),
    "matmul": lambda r: ([_t(r, 3, 4), _t(r, 4, 2)], ad.matmul),
    "add_bias": lambda r: ([_t(r, 2, 3, 4), _t(r, 4)], ad.add_bias),
    "einsum_bmv": lambda r: ([_t(r, 2, 3, 4), _t(r, 2, 4)], lambda a, b: ad.einsum("knh,kh->kn", a, b)),
    "einsum_wsum": lambda r: ([_t(r, 2, 3), _t(r, 2, 3, 5)], lambda a, b: ad.einsum("kn,knd->kd", a, b)),
    "log_softmax": lambda r: ([_t(r, 3, 5, low=-4, high=4)], ad.log_softmax),
    "log_softmax_axis0": lambda r: ([_t(r, 4, 2)], lambda x: ad.log_softmax(x, axis=0)),
    "softmax": lambda r: ([_t(r, 2, 6)], ad.softmax),
    "concat": lambda r: ([_t(r, 2, 3), _t(r, 2, 1)], lambda a, b: ad.concat([a, b], axis=-1)),
    "stack": lambda r: ([_t(r, 2, 3), _t(r, 2, 3)], lambda a, b: ad.stack([a, b], axis=1)),
    "slice": lambda r: ([_t(r, 3, 6)], lambda x: ad.slice_(x, 1, 4, axis=1)),
    "take": lambda r: ([_t(r, 5, 3)], lambda x: ad.take(x, [0, 3, 3, 1])),
    "pick": lambda r: ([_t(r, 4, 5)], lambda x: ad.pick(x, [4, 0, 2, 2])),
    "reshape": lambda r: ([_t(r, 2, 6)], lambda x: ad.reshape(x, (3, 4))),
    "sum_all": lambda r: ([_t(r, 3, 4)], ad.sum_),
    "sum_axis": lambda r: ([_t(r, 3, 4)], lambda x: ad.sum_(x, axis=0)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(TRIALS):
        inputs, fn = CASES[name](rng)
        w = _weights(rng, fn(*[Tensor(x.data) for x in inputs]))
        loss = lambda: ad.sum_(ad.mul(fn(*inputs), w))
        worst = max(worst, check(loss, inputs))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.tanh(x)
    assert y.is_leaf and not y.requires_grad


def test_nested_tapes_record_on_innermost():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as outer:
        with Tape() as inner:
            ad.exp(x)
        assert len(inner) == 1 and len(outer) == 0


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
        loss = ad.sum_(ad.add(y, y))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.relu_plus(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_only_scalar_broadcasting_is_implicit():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_elementwise_dispatch():
    x = Tensor(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(ad.elementwise("relu-plus", x).data, [0.0, 2.0])
    with pytest.raises(ValueError):
        ad.elementwise("cube", x)


def test_sigmoid_is_stable_for_large_inputs():
    x = Tensor(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(ad.sigmoid(x).data))
    assert np.all(np.isfinite(ad.log_sigmoid(x).data))
    assert ad.log_sigmoid(x).data[0] == pytest.approx(-800.0)


def test_adagrad_update_rule():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adagrad([p], lr=0.5)
    p.grad = np.array([2.0, 0.0])
    opt.step()
    # first step moves a coordinate with nonzero gradient by exactly lr
    np.testing.assert_allclose(p.data, [0.5, -2.0])
    assert p.grad is None
    p.grad = np.array([1.0, 3.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.5 - 0.5 / np.sqrt(5.0), -2.0 - 0.5 * 3 / np.sqrt(9.0 + 1e-10)])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.integers(1, 4))
def test_checkpoint_roundtrip_is_exact(tmp_path_factory, values, cols):
    path = tmp_path_factory.mktemp("ckpt") / "p.ckpt"
    a = np.array(values * cols).reshape(cols, len(values))
    ad.save_params(path, {"w": Tensor(a), "b": Tensor(np.array([np.pi]))})
    loaded = ad.load_params(path)
    np.testing.assert_array_equal(loaded["w"], a)
    assert loaded["b"][0] == np.pi
    assert path.read_text().splitlines()[0] == "beamstop-ckpt v1"


def test_checkpoint_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(ValueError):
        ad.load_params(path)
