import numpy as np
import pytest

from refgame import nn
from refgame.errors import ConfigError, NonFiniteGradient, ShapeMismatch
from refgame.nn import autograd as ag


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class TestAutogradOps:
    def test_matmul_shapes_checked(self):
        a = ag.Tensor(np.zeros((2, 3)))
        b = ag.Tensor(np.zeros((4, 5)))
        with pytest.raises(ShapeMismatch):
            ag.matmul(a, b)

    def test_bias_broadcast_gradient(self):
        w = ag.Tensor(np.ones((3, 2)), requires_grad=True)
        b = ag.Tensor(np.zeros(2), requires_grad=True)
        x = ag.Tensor(np.arange(6, dtype=float).reshape(2, 3))
        loss = ag.tsum(ag.add(ag.matmul(x, w), b))
        loss.backward()
        np.testing.assert_allclose(b.grad, [2.0, 2.0])

    def test_softmax_cross_entropy_matches_manual(self):
        logits = ag.Tensor(rng(1).normal(size=(4, 5)), requires_grad=True)
        targets = np.array([0, 2, 4, 1])
        ce = ag.softmax_cross_entropy(logits, targets)
        manual = []
        for row, t in zip(logits.data, targets):
            p = np.exp(row - row.max())
            p /= p.sum()
            manual.append(-np.log(p[t]))
        np.testing.assert_allclose(ce.data, manual, rtol=1e-12)

    def test_softplus_stable_for_large_inputs(self):
        x = ag.Tensor(np.array([800.0, -800.0]))
        out = ag.softplus(x)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[0], 800.0)
        np.testing.assert_allclose(out.data[1], 0.0, atol=1e-12)

    def test_no_grad_suppresses_graph(self):
        w = ag.Tensor(np.ones((2, 2)), requires_grad=True)
        with nn.no_grad():
            out = ag.matmul(ag.Tensor(np.ones((1, 2))), w)
        assert out._parents == () and not out.requires_grad


class TestGradientCheckOracles:
    """Central finite differences as the independent oracle for every op."""

    def test_linear_squared_loss_is_exact(self):
        r = rng(3)
        w = ag.Tensor(r.normal(size=(4, 3)), requires_grad=True)
        b = ag.Tensor(r.normal(size=3), requires_grad=True)
        x = np.asarray(r.normal(size=(5, 4)))
        y = np.asarray(r.normal(size=(5, 3)))

        def loss_fn():
            pred = ag.add(ag.matmul(ag.Tensor(x), w), b)
            err = ag.sub(pred, ag.Tensor(y))
            return ag.tmean(ag.mul(err, err))

        assert nn.gradient_check({"w": w, "b": b}, loss_fn) < 1e-8

    def test_every_activation(self):
        r = rng(4)
        w = ag.Tensor(r.normal(size=(3, 3)), requires_grad=True)
        x = np.asarray(r.normal(size=(4, 3)))

        for act in (ag.sigmoid, ag.tanh, ag.relu, ag.softplus):
            def loss_fn(act=act):
                return ag.tmean(act(ag.matmul(ag.Tensor(x), w)))

            assert nn.gradient_check({"w": w}, loss_fn) < 1e-6

    def test_embedding_and_narrow_and_concat(self):
        r = rng(5)
        table = ag.Tensor(r.normal(size=(6, 4)), requires_grad=True)
        idx = np.array([0, 3, 5, 3])

        def loss_fn():
            e = ag.rows(table, idx)
            left = ag.narrow(e, 1, 0, 2)
            right = ag.narrow(e, 1, 2, 2)
            return ag.tmean(ag.mul(ag.concat([left, right]), ag.concat([right, left])))

        assert nn.gradient_check({"t": table}, loss_fn) < 1e-6

    def test_batch_norm(self):
        r = rng(6)
        gamma = ag.Tensor(r.normal(size=4) + 1.0, requires_grad=True)
        beta = ag.Tensor(r.normal(size=4), requires_grad=True)
        w = ag.Tensor(r.normal(size=(4, 4)), requires_grad=True)
        x = np.asarray(r.normal(size=(6, 4)))

        def loss_fn():
            h = ag.matmul(ag.Tensor(x), w)
            out, _, _ = ag.batch_norm(h, gamma, beta)
            return ag.tmean(ag.mul(out, out))

        assert nn.gradient_check({"g": gamma, "b": beta, "w": w}, loss_fn) < 1e-5


class TestLSTMCell:
    def test_single_step_matches_closed_form(self):
        # hand-evaluate the gate equations for one step
        hd, xd = 2, 3
        cell = nn.LSTMCell(rng(7), xd, hd, dtype=np.float64)
        x = rng(8).normal(size=(1, xd))
        h0 = np.zeros((1, hd))
        c0 = np.zeros((1, hd))
        h, c = cell.step(ag.Tensor(x), ag.Tensor(h0), ag.Tensor(c0))

        z = x @ cell.wx.data + h0 @ cell.wh.data + cell.b.data
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        i, f, g, o = sig(z[:, :hd]), sig(z[:, hd:2*hd]), np.tanh(z[:, 2*hd:3*hd]), sig(z[:, 3*hd:])
        c_ref = f * c0 + i * g
        h_ref = o * np.tanh(c_ref)
        np.testing.assert_allclose(c.data, c_ref, rtol=1e-12)
        np.testing.assert_allclose(h.data, h_ref, rtol=1e-12)

    def test_deterministic_encoding(self):
        cell = nn.LSTMCell(rng(1), 4, 3, dtype=np.float64)
        emb = nn.Embedding(rng(2), 5, 4, dtype=np.float64)
        ids = np.array([[0, 2, 4, 1]])
        h1 = nn.encode_sequence(cell, emb, ids)
        h2 = nn.encode_sequence(cell, emb, ids)
        np.testing.assert_array_equal(h1.data, h2.data)

    def test_lengths_pick_correct_state(self):
        cell = nn.LSTMCell(rng(1), 4, 3, dtype=np.float64)
        emb = nn.Embedding(rng(2), 5, 4, dtype=np.float64)
        padded = np.array([[0, 2, 1, 1]])
        short = np.array([[0, 2, 1]])
        h_padded = nn.encode_sequence(cell, emb, padded, lengths=np.array([3]))
        h_short = nn.encode_sequence(cell, emb, short)
        np.testing.assert_allclose(h_padded.data, h_short.data, rtol=1e-12)

    def test_sequence_gradcheck(self):
        cell = nn.LSTMCell(rng(3), 3, 4, dtype=np.float64)
        emb = nn.Embedding(rng(4), 6, 3, dtype=np.float64)
        head = nn.Linear(rng(5), 4, 2, dtype=np.float64)
        ids = np.array([[0, 2, 3, 1], [0, 4, 1, 1]])
        lengths = np.array([4, 3])
        params = {**cell.params("c"), **emb.params("e"), **head.params("h")}

        def loss_fn():
            hidden = nn.encode_sequence(cell, emb, ids, lengths)
            return ag.tmean(ag.softmax_cross_entropy(head(hidden), np.array([0, 1])))

        assert nn.gradient_check(params, loss_fn) < 1e-6


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = ag.Tensor(np.ones(3), requires_grad=True)
        p.grad = np.zeros(3)
        opt = nn.Adam()
        opt.step({"p": p})
        np.testing.assert_array_equal(p.data, np.ones(3))

    def test_first_step_magnitude(self):
        # with constant gradient 1, bias-corrected step 1 moves by ~lr
        p = ag.Tensor(np.zeros(1), requires_grad=True)
        p.grad = np.ones(1)
        opt = nn.Adam(lr=0.001)
        opt.step({"p": p})
        expected = 0.001 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(-p.data[0], expected, rtol=1e-9)

    def test_paper_defaults(self):
        opt = nn.Adam()
        assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (0.001, 0.7, 0.999, 1e-8)

    def test_non_finite_rejected(self):
        p = ag.Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([np.inf, 0.0])
        with pytest.raises(NonFiniteGradient):
            nn.Adam().step({"p": p})

    def test_matches_reference_recurrence(self):
        # independent scalar implementation of Adam over ten steps
        r = rng(11)
        grads = r.normal(size=10)
        p = ag.Tensor(np.array([0.5]), requires_grad=True)
        opt = nn.Adam(lr=0.01, beta1=0.7, beta2=0.999)
        x = 0.5
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            p.grad = np.array([g])
            opt.step({"p": p})
            m = 0.7 * m + 0.3 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.01 * (m / (1 - 0.7 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            p.grad = None
        np.testing.assert_allclose(p.data[0], x, rtol=1e-10)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        r = rng(12)
        params = {
            "a.w": ag.Tensor(r.normal(size=(3, 4)).astype(np.float32), requires_grad=True),
            "a.b": ag.Tensor(r.normal(size=4).astype(np.float32), requires_grad=True),
        }
        manifest = {"model": "demo", "hidden": 4}
        nn.save_checkpoint(tmp_path, manifest, params)
        loaded_manifest, tensors = nn.load_checkpoint(tmp_path, expected={"model": "demo"})
        assert loaded_manifest["hidden"] == 4
        for name, p in params.items():
            assert tensors[name].tobytes() == p.data.tobytes()

    def test_manifest_mismatch_fails_loudly(self, tmp_path):
        params = {"w": ag.Tensor(np.zeros((2, 2), np.float32), requires_grad=True)}
        nn.save_checkpoint(tmp_path, {"model": "demo", "hidden": 2}, params)
        with pytest.raises(ConfigError):
            nn.load_checkpoint(tmp_path, expected={"hidden": 3})

    def test_restore_rejects_shape_drift(self, tmp_path):
        params = {"w": ag.Tensor(np.zeros((2, 2), np.float32), requires_grad=True)}
        nn.save_checkpoint(tmp_path, {"model": "demo"}, params)
        _, tensors = nn.load_checkpoint(tmp_path)
        target = {"w": ag.Tensor(np.zeros((3, 3), np.float32), requires_grad=True)}
        with pytest.raises(ConfigError):
            nn.restore_params(target, tensors)
