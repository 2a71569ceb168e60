import struct

import numpy as np
import pytest

from txembed import diffcore as dc

from gradcheck import check


def p64(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        # keep entries away from a kink at zero
        x = np.sign(x) * (np.abs(x) + lo)
    return dc.parameter(x.astype(np.float64))


def test_forward_examples():
    assert dc.sigmoid(dc.constant([[0.0]])).item() == 0.5
    m = dc.row_mean(dc.constant([[1.0, 3.0], [3.0, 1.0]]), [[0, 1]])
    assert m.data.tolist() == [[2.0, 2.0]]
    x = dc.constant(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert dc.dropout(x, 0.5, training=False) is x
    assert dc.relu(dc.constant([[-1.0, 2.0]])).data.tolist() == [[0.0, 2.0]]
    e = dc.row_mean(x, [[]])
    assert (e.data == 0).all()


def test_dropout_inverted_scaling(rng):
    x = dc.constant(np.ones((200, 50), dtype=np.float32))
    y = dc.dropout(x, 0.5, True, rng).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1) < 0.05


def test_shape_errors():
    a = dc.constant(np.ones((2, 3)))
    with pytest.raises(dc.ShapeError):
        dc.matmul(a, a)
    with pytest.raises(dc.ShapeError):
        dc.concat_rows(a, dc.constant(np.ones((3, 1))))
    with pytest.raises(dc.ShapeError):
        dc.mse(a, dc.constant(np.ones((2, 2))))


def test_non_finite_is_an_error():
    with pytest.raises(dc.NonFiniteError):
        dc.constant([[np.nan]])
    big = dc.constant(np.array([[1e30]], dtype=np.float32))
    with pytest.raises(dc.NonFiniteError):
        dc.matmul(big, big)


def test_no_overflow_for_moderate_inputs():
    x = dc.constant(np.array([[-1e6, 1e6, 0.0]], dtype=np.float32))
    assert np.isfinite(dc.sigmoid(x).data).all()
    assert np.isfinite(dc.log_sigmoid(x).data).all()


def test_backward_examples():
    w = dc.parameter(np.array([[3.0]]))
    dc.mse(w, dc.constant([[0.0]])).backward()
    assert w.grad.tolist() == [[6.0]]
    x = np.array([[1.0, -2.0, 0.5]])
    w = dc.parameter(np.zeros((3, 1)))
    dc.sigmoid(dc.matmul(dc.constant(x), w)).backward()
    np.testing.assert_allclose(w.grad.ravel(), 0.25 * x.ravel())


def test_backward_accumulates_until_zeroed():
    w = dc.parameter(np.array([[3.0]]))
    for _ in range(2):
        dc.mse(w, dc.constant([[0.0]])).backward()
    assert w.grad.tolist() == [[12.0]]
    w.zero_grad()
    assert w.grad.tolist() == [[0.0]]


def test_backward_needs_recorded_scalar():
    w = dc.parameter(np.ones((1, 1)))
    with pytest.raises(RuntimeError):
        w.backward()
    with pytest.raises(dc.ShapeError):
        dc.relu(dc.parameter(np.ones((2, 2)))).backward()


PRIMITIVES = {
    "matmul": lambda a, b, r: dc.mean(dc.sigmoid(dc.matmul(a, dc.gather_rows(b, [0, 1, 2, 3])))),
    "add_bias": lambda a, b, r: dc.mse(dc.add_bias(a, dc.gather_rows(b, [0])), dc.constant(np.zeros(a.shape))),
    "relu": lambda a, b, r: dc.mse(dc.relu(a), dc.constant(np.ones(a.shape))),
    "sigmoid": lambda a, b, r: dc.mean(dc.sigmoid(dc.dot(a, b))),
    "log_sigmoid": lambda a, b, r: dc.mean(dc.log_sigmoid(dc.dot(a, b))),
    "row_mean": lambda a, b, r: dc.mse(dc.row_mean(a, [[0, 2], [1], [], [0, 1, 3]]), dc.constant(np.ones((4, 4)))),
    "concat_rows": lambda a, b, r: dc.mse(dc.concat_rows(a, b), dc.constant(np.zeros((6, 8)))),
    "gather_rows": lambda a, b, r: dc.mean(dc.dot(dc.gather_rows(a, [0, 0, 3]), dc.gather_rows(b, [1, 2, 2]))),
    "l2_normalize": lambda a, b, r: dc.mean(dc.dot(dc.l2_normalize_rows(a), b)),
    "sub_scale": lambda a, b, r: dc.mse(dc.scale(dc.sub(a, b), 0.7), dc.constant(np.zeros(a.shape))),
    "dropout": lambda a, b, r: dc.mse(dc.dropout(a, 0.3, True, np.random.default_rng(7)), b),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a = p64(rng, 6, 4, lo=0.05)
    b = p64(rng, 6, 4, lo=0.05)
    params = {"a": a, "b": b}
    assert check(lambda: PRIMITIVES[name](a, b, rng), params) < 1e-4


def test_adam_zero_gradient_leaves_parameters():
    w = dc.parameter(np.array([[1.0, -2.0]], dtype=np.float32))
    opt = dc.Adam({"w": w})
    opt.step()
    assert w.data.tolist() == [[1.0, -2.0]]
    assert (opt.m["w"] == 0).all() and (opt.v["w"] == 0).all() and opt.t == 1


def test_adam_first_step_magnitude():
    w = dc.parameter(np.array([[0.0]], dtype=np.float64))
    opt = dc.Adam({"w": w}, lr=0.001)
    w.grad[:] = 1.0
    opt.step()
    assert w.data[0, 0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-9)


def test_adam_constant_gradient_approaches_lr_sign():
    w = dc.parameter(np.array([[0.0, 0.0]], dtype=np.float64))
    opt = dc.Adam({"w": w}, lr=0.01)
    prev = w.data.copy()
    for _ in range(2000):
        w.grad[:] = [[3.0, -0.2]]
        opt.step()
        step = w.data - prev
        prev = w.data.copy()
    np.testing.assert_allclose(step, [[-0.01, 0.01]], rtol=1e-3)
    assert opt.t == 2000


def test_adam_rejects_non_finite_gradient():
    w = dc.parameter(np.zeros((1, 1)))
    opt = dc.Adam({"w": w})
    w.grad[:] = np.inf
    with pytest.raises(dc.NonFiniteError):
        opt.step()


def test_params_bin_layout_and_roundtrip(tmp_path):
    params = {"ab": dc.parameter(np.arange(6, dtype=np.float32).reshape(2, 3))}
    path = tmp_path / "params.bin"
    dc.save_params(path, params)
    buf = path.read_bytes()
    # name length, name, rows, cols, payload
    assert struct.unpack_from("<I", buf, 0) == (2,)
    assert buf[4:6] == b"ab"
    assert struct.unpack_from("<II", buf, 6) == (2, 3)
    back = dc.load_params(path)
    assert list(back) == ["ab"] and (back["ab"] == params["ab"].data).all()
    assert back["ab"].dtype == np.float32
    assert buf.endswith(np.arange(6, dtype="<f4").tobytes())
    assert b"ab" in buf


def test_adam_state_roundtrip(tmp_path, rng):
    w = dc.parameter(rng.normal(size=(3, 2)).astype(np.float32))
    opt = dc.Adam({"w": w})
    for _ in range(3):
        w.grad[:] = rng.normal(size=(3, 2))
        opt.step()
    dc.save_adam(tmp_path / "adam.bin", opt)
    other = dc.Adam({"w": dc.parameter(w.data.copy())})
    dc.load_adam(tmp_path / "adam.bin", other)
    assert other.t == 3
    assert (other.m["w"] == opt.m["w"]).all() and (other.v["w"] == opt.v["w"]).all()


def test_determinism_of_updates(rng):
    def run():
        r = np.random.default_rng(3)
        w = dc.parameter(r.normal(size=(4, 4)).astype(np.float32))
        opt = dc.Adam({"w": w})
        x = dc.constant(r.normal(size=(5, 4)).astype(np.float32))
        for _ in range(5):
            opt.zero_grad()
            dc.mean(dc.sigmoid(dc.dot(dc.matmul(x, w), x))).backward()
            opt.step()
        return w.data.tobytes()
    assert run() == run()
