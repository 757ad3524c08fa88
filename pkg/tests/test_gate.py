import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tit import tensor as T
from tit.errors import ConfigError, DimensionError, UnknownTaskError
from tit.gate import (TaskGateDecoderParams, candidate, gated_update, gates,
                      register_task_gate, task_embedding, task_gate_forward)
from tit.gradcheck import randomize
from tit.nn import ParamStore, init_params
from tit.tensor import Tensor


def gate(n_tasks=2, k=8, c_t=4, C=6, grid=(2, 2), seed=0):
    s = ParamStore()
    register_task_gate(s, "g", n_tasks, k, c_t, C, grid)
    init_params(s, seed)
    return s, TaskGateDecoderParams.from_store(s, "g", n_tasks, grid, c_t)


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def slack(*arrays):
    return 4 * np.finfo(float).eps * max(np.abs(a).max() for a in arrays)


class TestEmbedding:
    def test_toy_shape(self):
        s, p = gate(k=64, c_t=16, C=16)
        assert p.embed_w.shape == (64, 64)
        assert task_embedding(0, p, 64, 64).shape == (1, 16, 16, 16)

    def test_blockwise_constant(self):
        _, p = gate()
        e = task_embedding(1, p, 64, 64).data[0]
        flat = (p.v[1].data @ p.embed_w.data + p.embed_b.data).reshape(2, 2, 4)
        for i in range(16):
            for j in range(16):
                np.testing.assert_allclose(e[i, j], flat[i // 8, j // 8], rtol=1e-15)

    def test_zero_mlp(self):
        s, p = gate()
        s["g.embed.weight"].data[...] = 0
        assert not task_embedding(0, p, 64, 64).data.any()

    def test_tasks_differ(self):
        _, p = gate(seed=3)
        assert not np.allclose(task_embedding(0, p, 64, 64).data, task_embedding(1, p, 64, 64).data)

    @pytest.mark.parametrize("H,W", [(48, 64), (64, 40)])
    def test_not_divisible(self, H, W):
        _, p = gate()
        with pytest.raises(ConfigError):
            task_embedding(0, p, H, W)

    def test_wrong_grid(self):
        _, p = gate()
        with pytest.raises(ConfigError):
            task_embedding(0, p, 96, 64)

    def test_unknown_task(self):
        _, p = gate()
        with pytest.raises(UnknownTaskError):
            task_embedding(2, p, 64, 64)

    def test_bilinear_mode(self):
        s, _ = gate()
        p = TaskGateDecoderParams.from_store(s, "g", 2, (2, 2), 4, upsample_mode="bilinear")
        e = task_embedding(0, p, 64, 64).data
        assert e.shape == (1, 16, 16, 4) and not np.allclose(e[0, 0], e[0, 7])


class TestGates:
    def test_saturated_z(self, rng):
        s, p = gate()
        s["g.conv_z.weight"].data[...] = 0
        s["g.conv_z.bias"].data[...] = -20
        s["g.conv_r.weight"].data[...] = 0
        s["g.conv_r.bias"].data[...] = 20
        e = Tensor(rng.normal(size=(1, 4, 4, 4)))
        x = Tensor(rng.normal(size=(1, 4, 4, 6)))
        r, z = gates(e, x, p)
        assert z.data.max() < 1e-8 and np.all(1 - r.data < 1e-8)
        out = gated_update(e, x, r, z, p)
        assert np.abs(out.data - x.data).max() < 1e-8

    def test_scalar_closed_form(self):
        s = ParamStore()
        register_task_gate(s, "g", 1, 2, 1, 1, (1, 1))
        init_params(s, 0)
        p = TaskGateDecoderParams.from_store(s, "g", 1, (1, 1), 1)
        for gname, wc in (("r", (0.5, -1.5)), ("z", (2.0, 0.25)), ("o", (-0.7, 1.1))):
            w = s[f"g.conv_{gname}.weight"].data
            w[...] = 0
            w[1, 1, :, 0] = wc
            s[f"g.conv_{gname}.bias"].data[...] = 0.1
        e, x = 0.8, -0.6
        r = sigmoid(0.5 * e - 1.5 * x + 0.1)
        z = sigmoid(2.0 * e + 0.25 * x + 0.1)
        xt = np.tanh(-0.7 * e + 1.1 * r * x + 0.1)
        et, xt_ = Tensor([[[[e]]]]), Tensor([[[[x]]]])
        rr, zz = gates(et, xt_, p)
        np.testing.assert_allclose([rr.item(), zz.item()], [r, z], rtol=1e-14)
        np.testing.assert_allclose(gated_update(et, xt_, rr, zz, p).item(), (1 - z) * x + z * xt,
                                   rtol=1e-14)

    def test_spatial_mismatch(self):
        _, p = gate()
        with pytest.raises(DimensionError):
            gates(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 5, 6))), p)

    def test_update_shape_mismatch(self):
        _, p = gate()
        x = Tensor(np.zeros((1, 4, 4, 6)))
        with pytest.raises(DimensionError):
            gated_update(Tensor(np.zeros((1, 4, 4, 4))), x, x, Tensor(np.zeros((1, 4, 4, 5))), p)


class TestUpdate:
    def setup_method(self):
        self.s, self.p = gate(seed=1)
        r = np.random.default_rng(9)
        self.e = Tensor(r.normal(size=(2, 4, 4, 4)))
        self.x = Tensor(r.normal(size=(2, 4, 4, 6)))

    def test_z_zero_exact(self):
        r = Tensor(np.full(self.x.shape, 0.3))
        out = gated_update(self.e, self.x, r, Tensor(np.zeros(self.x.shape)), self.p)
        np.testing.assert_array_equal(out.data, self.x.data)

    def test_z_one_is_candidate(self):
        r = Tensor(np.full(self.x.shape, 0.3))
        out, xt = gated_update(self.e, self.x, r, Tensor(np.ones(self.x.shape)), self.p,
                               return_candidate=True)
        np.testing.assert_array_equal(out.data, xt.data)
        assert np.abs(out.data).max() < 1

    def test_half_blend_with_zero_candidate(self):
        self.s["g.conv_o.weight"].data[...] = 0
        r = Tensor(np.full(self.x.shape, 0.3))
        out = gated_update(self.e, self.x, r, Tensor(np.full(self.x.shape, 0.5)), self.p)
        np.testing.assert_array_equal(out.data, 0.5 * self.x.data)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.05, 0.2), st.floats(0.1, 1.0))
def test_convex_combination_property(seed, wstd, xscale):
    s, p = gate(seed=seed % 1000)
    rng = np.random.default_rng(seed)
    randomize(s, rng, std=wstd)
    x = Tensor(rng.normal(0, xscale, (1, 16, 16, 6)))
    e = T.broadcast_to(task_embedding(int(seed % 2), p, 64, 64), (1, 16, 16, 4))
    r, z = gates(e, x, p)
    assert 0 < r.data.min() and r.data.max() < 1 and 0 < z.data.min() and z.data.max() < 1
    out, xt = gated_update(e, x, r, z, p, return_candidate=True)
    assert np.abs(xt.data).max() < 1
    tol = slack(x.data, xt.data)
    assert np.all(out.data >= np.minimum(x.data, xt.data) - tol)
    assert np.all(out.data <= np.maximum(x.data, xt.data) + tol)


class TestForward:
    def test_shape_preserved(self, rng):
        _, p = gate()
        x = Tensor(rng.normal(size=(3, 16, 16, 6)))
        assert task_gate_forward(x, 0, p).shape == x.shape

    def test_rejects_3d(self):
        _, p = gate()
        with pytest.raises(DimensionError):
            task_gate_forward(Tensor(np.zeros((16, 16, 6))), 0, p)

    def test_routing(self, rng):
        s, p = gate(n_tasks=3)
        T.backward(task_gate_forward(Tensor(rng.normal(size=(1, 16, 16, 6))), 1, p).sum())
        assert p.v[0].grad is None and p.v[2].grad is None
        assert np.abs(p.v[1].grad).max() > 0
        for w in (p.conv_r_w, p.conv_z_w, p.conv_o_w, p.embed_w):
            assert np.abs(w.grad).max() > 0

    def test_gradcheck(self, rng):
        s = ParamStore()
        register_task_gate(s, "g", 2, 4, 2, 3, (1, 1))
        randomize(s, rng)
        p = TaskGateDecoderParams.from_store(s, "g", 2, (1, 1), 2)
        x = Tensor(rng.normal(size=(2, 8, 8, 3)), requires_grad=True)
        w = rng.normal(size=(2, 8, 8, 3))
        params = [x] + [s[n] for n in s.names() if not n.endswith("v.0")]
        err = T.param_grad_check(lambda: (task_gate_forward(x, 1, p) * w).sum(), params,
                                 max_elems=6, rng=np.random.default_rng(0))
        assert err < 1e-4
