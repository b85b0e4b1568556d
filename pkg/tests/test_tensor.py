"""Engine-level checks: op semantics, autodiff, Adam, serialization."""

import math

import numpy as np
import numpy.testing as npt
import pytest

import imad.tensor as T
from imad.checkpoint import (CheckpointError, FORMAT_VERSION, load_checkpoint,
                             save_checkpoint)
from imad.gradcheck import grad_check
from imad.optim import Adam, AdamState, EarlyStopping, adam_step
from imad.tensor import GraphError, Initializer, ShapeError, Tensor, forward_op


class TestForwardOps:
    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, Tensor(np.eye(2)))
        npt.assert_array_equal(out.data, a.data)

    def test_matmul_shape_error_names_op_and_dims(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([[0.0, 0.0]]))
        npt.assert_allclose(out.data, [[0.5, 0.5]])

    def test_softmax_rows_are_distributions(self, rng):
        out = T.softmax(Tensor(rng.normal(size=(5, 9)) * 3), axis=-1)
        assert (out.data >= 0).all()
        npt.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-12)

    def test_layer_norm_zero_variance_row(self):
        gain, bias = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out = T.layer_norm(Tensor([[3.0, 3.0, 3.0]]), gain, bias)
        npt.assert_allclose(out.data, np.zeros((1, 3)))

    def test_layer_norm_statistics(self, rng):
        x = Tensor(rng.normal(size=(8, 33)) * 4 + 2)
        out = T.layer_norm(x, Tensor(np.ones(33)), Tensor(np.zeros(33)))
        npt.assert_allclose(out.data.mean(axis=-1), 0, atol=1e-9)
        npt.assert_allclose(out.data.var(axis=-1), 1, atol=1e-4)

    def test_concat_split_roundtrip(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=(2, 4)))
        joined = T.concat([a, b], axis=0)
        pa, pb = T.split(joined, [3, 2], axis=0)
        npt.assert_array_equal(pa.data, a.data)
        npt.assert_array_equal(pb.data, b.data)

    def test_embedding_lookup(self, rng):
        table = Tensor(rng.normal(size=(6, 4)))
        out = T.embedding_lookup(table, [3, 0, 3])
        npt.assert_array_equal(out.data, table.data[[3, 0, 3]])
        with pytest.raises(IndexError):
            T.embedding_lookup(table, [7])

    def test_cosine_similarity_bounds(self, rng):
        v = Tensor(rng.normal(size=4))
        npt.assert_allclose(T.cosine_similarity(v, v).item(), 1.0, atol=1e-12)
        npt.assert_allclose(T.cosine_similarity(v, T.scale(v, -2.0)).item(), -1.0,
                            atol=1e-12)

    def test_cosine_zero_norm_warns_and_returns_zero(self):
        with pytest.warns(RuntimeWarning):
            out = T.cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3)))
        assert out.item() == 0.0

    def test_cross_entropy_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((1, 7))), 3)
        npt.assert_allclose(loss.item(), math.log(7))

    def test_forward_op_dispatch(self):
        out = forward_op("add", Tensor([1.0]), Tensor([2.0]))
        assert out.item() == 3.0
        with pytest.raises(ValueError, match="unknown op kind"):
            forward_op("conv2d", Tensor([1.0]))

    def test_non_finite_input_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            Tensor([np.inf, 1.0])


class TestBackward:
    def test_square_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        npt.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor([[0.0]], requires_grad=True)
        T.sigmoid(x).backward()
        npt.assert_allclose(x.grad, [[0.25]])

    def test_two_layer_tanh_matches_finite_differences(self, rng):
        w1 = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        x = Tensor(rng.normal(size=(1, 5)), requires_grad=True)

        def f(t):
            return T.tsum(T.tanh(T.matmul(T.tanh(T.matmul(t, w1)), w2)))

        assert grad_check(f, x, h=1e-5) < 1e-4

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            T.mul(x, x).backward()

    def test_graphless_backward_rejected(self):
        with pytest.raises(GraphError, match="no recorded graph"):
            Tensor([1.0], requires_grad=True).backward()
        with T.no_grad():
            x = Tensor([2.0], requires_grad=True)
            out = T.tsum(T.mul(x, x))
        with pytest.raises(GraphError):
            out.backward()

    def test_graph_consumed_after_backward(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_backward_is_linear(self, rng):
        """grad(a*f + b*g) == a*grad(f) + b*grad(g) elementwise."""
        x_data = rng.normal(size=(3, 3))
        a, b = 1.7, -0.6

        def grad_of(build):
            x = Tensor(x_data.copy(), requires_grad=True)
            build(x).backward()
            return x.grad

        f = lambda x: T.tsum(T.tanh(x))
        g = lambda x: T.tsum(T.mul(x, x))
        combined = grad_of(lambda x: T.add(T.scale(f(x), a), T.scale(g(x), b)))
        npt.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), atol=1e-10)

    def test_gradient_accumulates_across_backwards(self):
        x = Tensor([2.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        T.tsum(T.mul(x, x)).backward()
        npt.assert_allclose(x.grad, [8.0])


DIFFERENTIABLE_OP_CASES = [
    ("matmul", lambda rng: (Tensor(rng.normal(size=(2, 3)), requires_grad=True),),
     lambda x: T.matmul(x, Tensor([[0.3, -1.0], [2.0, 0.1], [0.5, 0.7]]))),
    ("add", lambda rng: (Tensor(rng.normal(size=(2, 3)), requires_grad=True),),
     lambda x: T.add(x, Tensor([[1.0, -2.0, 0.5]]))),
    ("mul", lambda rng: (Tensor(rng.normal(size=(2, 3)), requires_grad=True),),
     lambda x: T.mul(x, Tensor([[1.5, -0.2, 0.8]]))),
    ("scale", lambda rng: (Tensor(rng.normal(size=4), requires_grad=True),),
     lambda x: T.scale(x, -2.5)),
    ("transpose", lambda rng: (Tensor(rng.normal(size=(3, 2)), requires_grad=True),),
     T.transpose),
    ("concat", lambda rng: (Tensor(rng.normal(size=(2, 2)), requires_grad=True),),
     lambda x: T.concat([x, T.mul(x, x)], axis=1)),
    ("split", lambda rng: (Tensor(rng.normal(size=(4, 2)), requires_grad=True),),
     lambda x: T.split(x, [1, 3], axis=0)[1]),
    ("tanh", lambda rng: (Tensor(rng.normal(size=(3, 3)), requires_grad=True),), T.tanh),
    ("relu", lambda rng: (Tensor(rng.normal(size=(3, 3)) + 0.2, requires_grad=True),),
     T.relu),
    ("sigmoid", lambda rng: (Tensor(rng.normal(size=(2, 4)), requires_grad=True),),
     T.sigmoid),
    ("softmax", lambda rng: (Tensor(rng.normal(size=(2, 5)), requires_grad=True),),
     lambda x: T.softmax(x, axis=-1)),
    ("layer_norm", lambda rng: (Tensor(rng.normal(size=(2, 6)) * 2, requires_grad=True),),
     lambda x: T.layer_norm(x, Tensor(np.full(6, 1.3)), Tensor(np.full(6, -0.2)))),
    ("embedding_lookup", lambda rng: (Tensor(rng.normal(size=(5, 3)), requires_grad=True),),
     lambda x: T.embedding_lookup(x, [0, 2, 4, 2])),
    ("mean", lambda rng: (Tensor(rng.normal(size=(3, 4)), requires_grad=True),),
     lambda x: T.tmean(x, axis=0, keepdims=True)),
    ("sum", lambda rng: (Tensor(rng.normal(size=(3, 4)), requires_grad=True),),
     lambda x: T.tsum(x, axis=1)),
    ("cosine_similarity", lambda rng: (Tensor(rng.normal(size=6), requires_grad=True),),
     lambda x: T.cosine_similarity(x, Tensor([0.3, 2.0, -1.0, 0.4, 0.9, -0.5]))),
    ("cross_entropy", lambda rng: (Tensor(rng.normal(size=(1, 6)), requires_grad=True),),
     lambda x: T.cross_entropy(x, 2)),
    ("mse", lambda rng: (Tensor(rng.normal(size=(2, 3)), requires_grad=True),),
     lambda x: T.mse(x, Tensor(np.ones((2, 3))))),
    ("bce_with_logits", lambda rng: (Tensor(rng.normal(size=(1, 1)), requires_grad=True),),
     lambda x: T.bce_with_logits(x, 1.0)),
]


@pytest.mark.parametrize("name,make_input,apply", DIFFERENTIABLE_OP_CASES,
                         ids=[c[0] for c in DIFFERENTIABLE_OP_CASES])
def test_every_op_kind_matches_finite_differences(name, make_input, apply, rng):
    (x,) = make_input(rng)
    readout = Tensor(rng.normal(size=np.asarray(apply(x).data).shape))

    def f(t):
        return T.tsum(T.mul(apply(t), readout))

    assert grad_check(f, x, h=1e-5) < 1e-4


class TestAdam:
    def test_first_step_closed_form(self):
        theta = Tensor([0.0], requires_grad=True)
        params = {"theta": theta}
        state = AdamState(params, lr=1e-4)
        adam_step(params, {"theta": np.array([1.0])}, state)
        expected = -1e-4 * 1.0 / (math.sqrt(1.0) + 1e-8)
        npt.assert_allclose(theta.data, [expected], rtol=1e-9)
        assert state.t == 1

    def test_zero_gradient_is_a_fixed_point(self):
        theta = Tensor([3.0], requires_grad=True)
        params = {"theta": theta}
        state = AdamState(params)
        adam_step(params, {"theta": np.array([0.0])}, state)
        npt.assert_array_equal(theta.data, [3.0])
        npt.assert_array_equal(state.m["theta"], [0.0])
        npt.assert_array_equal(state.v["theta"], [0.0])

    def test_quadratic_descent_matches_scalar_simulation(self):
        """10 steps on f(t)=t^2 from t=1: strictly decreasing toward 0."""
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        # independent scalar-loop simulation
        sim_t, m, v = 1.0, 0.0, 0.0
        sim_path = []
        for k in range(1, 11):
            g = 2 * sim_t
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            sim_t -= lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
            sim_path.append(sim_t)

        theta = Tensor([1.0], requires_grad=True)
        opt = Adam({"theta": theta}, lr=lr)
        path = []
        for _ in range(10):
            opt.zero_grad()
            T.tsum(T.mul(theta, theta)).backward()
            opt.step()
            path.append(theta.item())
        npt.assert_allclose(path, sim_path, rtol=1e-12)
        assert all(b < a for a, b in zip([1.0] + path, path))
        assert path[-1] < 1.0

    def test_shape_mismatch_rejected(self):
        theta = Tensor([1.0, 2.0], requires_grad=True)
        params = {"theta": theta}
        with pytest.raises(ShapeError):
            adam_step(params, {"theta": np.zeros(3)}, AdamState(params))

    def test_non_finite_gradient_rejected(self):
        theta = Tensor([1.0], requires_grad=True)
        params = {"theta": theta}
        with pytest.raises(FloatingPointError):
            adam_step(params, {"theta": np.array([np.nan])}, AdamState(params))


class TestEarlyStopping:
    def test_stops_after_patience_and_restores_best(self):
        p = Tensor([0.0], requires_grad=True)
        stopper = EarlyStopping({"p": p}, patience=3)
        losses = [1.0, 0.5, 0.6, 0.7, 0.8]
        stopped_at = None
        for epoch, loss in enumerate(losses):
            p.data[0] = float(epoch)
            if stopper.update(loss, epoch):
                stopped_at = epoch
                break
        assert stopped_at == 4  # three rising epochs after the best
        stopper.restore_best()
        npt.assert_array_equal(p.data, [1.0])
        assert stopper.best_epoch == 1


class TestInitializer:
    def test_bound_and_determinism(self):
        a = Initializer(9).matrix(30, 50)
        b = Initializer(9).matrix(30, 50)
        npt.assert_array_equal(a.data, b.data)
        bound = math.sqrt(6.0 / 80)
        assert np.abs(a.data).max() <= bound
        assert a.requires_grad

    def test_different_seeds_differ(self):
        a = Initializer(1).matrix(10, 10)
        b = Initializer(2).matrix(10, 10)
        assert not np.array_equal(a.data, b.data)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        params = {
            "layer.w": Tensor(rng.normal(size=(3, 4))),
            "layer.b": rng.normal(size=4),
            "scalar": np.asarray(2.5),
        }
        config = {"stage": "mam", "d_model": 96}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, config, params)
        loaded_config, loaded = load_checkpoint(path)
        assert loaded_config == config
        npt.assert_array_equal(loaded["layer.w"], params["layer.w"].data)
        npt.assert_array_equal(loaded["layer.b"], params["layer.b"])
        assert loaded["scalar"].shape == ()

    def test_magic_and_version_checks(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {}, {})
        blob = bytearray(path.read_bytes())
        blob[4] = FORMAT_VERSION + 1  # bump the little-endian version field
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)
        path.write_bytes(b"NOPE" + bytes(blob[4:]))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"k": 1}, {"w": Tensor(rng.normal(size=(8, 8)))})
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


class TestFlopCounter:
    def test_matmul_count(self):
        T.reset_flop_counter()
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 5))))
        assert T.flop_count() == 2 * 2 * 3 * 5

    def test_thread_isolation(self):
        import threading

        T.reset_flop_counter()
        seen = {}

        def work():
            T.reset_flop_counter()
            T.matmul(Tensor(np.ones((4, 4))), Tensor(np.ones((4, 4))))
            seen["worker"] = T.flop_count()

        thread = threading.Thread(target=work)
        thread.start()
        thread.join()
        assert seen["worker"] == 2 * 4 * 4 * 4
        assert T.flop_count() == 0
