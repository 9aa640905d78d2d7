import math

import numpy as np
import pytest
import torch

from mapmatch.nn import (Adam, AdamState, FFN, MultiHeadAttention, NumericalError,
                         TransformerEncoderLayer, adam_step, cross_entropy,
                         finite_difference_check, init_module, linear,
                         load_checkpoint, save_checkpoint, sinusoidal_embedding)

torch.manual_seed(0)


def f64(*shape, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.normal(0, scale, size=shape), dtype=torch.float64)


class TestLinear:
    def test_zero_weights(self):
        x = f64(4, 3)
        y = linear(x, torch.zeros(3, 5, dtype=torch.float64), torch.zeros(5, dtype=torch.float64))
        assert torch.equal(y, torch.zeros(4, 5, dtype=torch.float64))

    def test_identity(self):
        x = f64(4, 3)
        y = linear(x, torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
        assert torch.equal(y, x)

    def test_shape_error_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(4, 3\).*\(2, 5\)"):
            linear(f64(4, 3), f64(2, 5), f64(5))

    def test_grad_check(self):
        x = f64(3, 4, seed=1).requires_grad_(True)
        W = f64(4, 5, seed=2).requires_grad_(True)
        b = f64(5, seed=3).requires_grad_(True)
        target = f64(3, 5, seed=4)

        def loss():
            return ((linear(x, W, b) - target) ** 2).sum()

        assert finite_difference_check(loss, [x, W, b]) <= 1e-5


class TestMultiHeadAttention:
    def test_singleton_softmax(self):
        mha = MultiHeadAttention(8, 2).double()
        x = f64(1, 1, 8)
        w = mha.attention_weights(x, x)
        assert torch.equal(w, torch.ones_like(w))
        out = mha(x, x, x)
        expected = mha.w_o(mha.w_v(x))
        assert torch.allclose(out, expected, atol=1e-12)

    def test_rows_sum_to_one(self):
        mha = MultiHeadAttention(8, 4).double()
        x = f64(2, 5, 8, seed=7)
        w = mha.attention_weights(x, x)
        assert torch.allclose(w.sum(dim=-1), torch.ones(2, 4, 5, dtype=torch.float64), atol=1e-9)

    def test_indivisible_heads_error(self):
        with pytest.raises(ValueError, match="divisible"):
            MultiHeadAttention(10, 3)

    def test_grad_check(self):
        mha = MultiHeadAttention(6, 2).double()
        init_module(mha, np.random.default_rng(5))
        x = f64(1, 3, 6, seed=8).requires_grad_(True)

        def loss():
            return (mha(x, x, x) ** 2).sum()

        params = [x] + list(mha.parameters())
        assert finite_difference_check(loss, params) <= 1e-4


class TestFFN:
    def test_relu_zeroes_negative_preactivation(self):
        ffn = FFN(3, 4, 2).double()
        with torch.no_grad():
            ffn.w1.weight.copy_(torch.zeros(4, 3, dtype=torch.float64))
            ffn.w1.bias.copy_(torch.full((4,), -1.0, dtype=torch.float64))
        x = f64(5, 3)
        out = ffn(x)
        assert torch.allclose(out, ffn.w2.bias.expand(5, 2), atol=1e-12)

    def test_identity_config(self):
        ffn = FFN(3, 3, 3).double()
        with torch.no_grad():
            ffn.w1.weight.copy_(torch.eye(3, dtype=torch.float64))
            ffn.w1.bias.zero_()
            ffn.w2.weight.copy_(torch.eye(3, dtype=torch.float64))
            ffn.w2.bias.zero_()
        x = torch.abs(f64(4, 3)) + 0.1
        assert torch.allclose(ffn(x), x, atol=1e-12)

    def test_grad_check_off_kink(self):
        ffn = FFN(3, 5, 2).double()
        init_module(ffn, np.random.default_rng(6))
        x = f64(4, 3, seed=9).requires_grad_(True)
        pre = ffn.w1(x.detach())
        assert pre.abs().min() > 1e-4  # inputs sit away from the ReLU kink

        def loss():
            return (ffn(x) ** 2).sum()

        assert finite_difference_check(loss, [x] + list(ffn.parameters())) <= 1e-5


class TestTransformerEncoderLayer:
    def test_zero_sublayers_is_double_layernorm(self):
        layer = TransformerEncoderLayer(8, 2).double()
        with torch.no_grad():
            for p in layer.attn.parameters():
                p.zero_()
            for p in layer.ffn.parameters():
                p.zero_()
        x = f64(1, 4, 8, seed=3)
        expected = layer.norm2(layer.norm1(x))
        assert torch.allclose(layer(x), expected, atol=1e-12)

    def test_output_rows_normalized(self):
        layer = TransformerEncoderLayer(16, 4).double()
        init_module(layer, np.random.default_rng(2))
        x = f64(2, 5, 16, seed=4)
        y = layer(x)
        mean = y.mean(dim=-1)
        var = y.var(dim=-1, unbiased=False)
        assert torch.allclose(mean, torch.zeros_like(mean), atol=1e-6)
        assert torch.allclose(var, torch.ones_like(var), atol=1e-6)

    def test_grad_check(self):
        layer = TransformerEncoderLayer(4, 2, d_ffn=6).double()
        init_module(layer, np.random.default_rng(3))
        x = f64(1, 3, 4, seed=5).requires_grad_(True)

        def loss():
            return (layer(x) ** 2).sum()

        assert finite_difference_check(loss, [x] + list(layer.parameters())) <= 1e-4


class TestSinusoidalEmbedding:
    def test_t_zero_pattern(self):
        e = sinusoidal_embedding(0.0, 8, dtype=torch.float64)
        assert torch.equal(e[0::2], torch.ones(4, dtype=torch.float64))   # odd j
        assert torch.equal(e[1::2], torch.zeros(4, dtype=torch.float64))  # even j
        assert e.norm().item() == pytest.approx(math.sqrt(8 / 2), rel=1e-12)

    def test_spot_values_match_direct_formula(self):
        d, t = 10, 0.73
        e = sinusoidal_embedding(t, d, dtype=torch.float64)
        for j in range(1, d + 1):  # 1-based index per the formula
            arg = t / (10000 ** ((j - 1) / d))
            expected = math.cos(arg) if j % 2 == 1 else math.sin(arg)
            assert e[j - 1].item() == pytest.approx(expected, abs=1e-12)

    def test_rejects_odd_dim_and_negative_t(self):
        with pytest.raises(ValueError):
            sinusoidal_embedding(0.0, 7)
        with pytest.raises(ValueError):
            sinusoidal_embedding(-0.1, 8)


class TestCrossEntropy:
    def one_hot(self, rows, classes, hot):
        t = torch.zeros(rows, classes, dtype=torch.float64)
        for i, h in enumerate(hot):
            t[i, h] = 1.0
        return t

    def test_huge_margin_goes_to_zero(self):
        target = self.one_hot(2, 5, [1, 3])
        logits = target * 1e4
        assert cross_entropy(target, logits).item() < 1e-8

    def test_uniform_logits(self):
        E = 17
        target = self.one_hot(3, E, [0, 5, 16])
        logits = torch.zeros(3, E, dtype=torch.float64)
        assert cross_entropy(target, logits).item() == pytest.approx(math.log(E), rel=1e-12)

    def test_rejects_non_onehot(self):
        bad = torch.zeros(2, 4, dtype=torch.float64)
        bad[0, 0] = 1.0
        bad[0, 1] = 1.0
        bad[1, 2] = 1.0
        with pytest.raises(ValueError, match="one-hot"):
            cross_entropy(bad, torch.zeros(2, 4, dtype=torch.float64))
        with pytest.raises(ValueError, match="shape"):
            cross_entropy(self.one_hot(2, 4, [0, 1]), torch.zeros(2, 5, dtype=torch.float64))

    def test_grad_check(self):
        target = self.one_hot(3, 6, [0, 2, 5])
        logits = f64(3, 6, seed=11).requires_grad_(True)

        def loss():
            return cross_entropy(target, logits)

        assert finite_difference_check(loss, [logits]) <= 1e-5

    def test_nonfinite_logits_rejected(self):
        target = self.one_hot(1, 3, [0])
        bad = torch.tensor([[float("nan"), 0.0, 0.0]], dtype=torch.float64)
        with pytest.raises(NumericalError):
            cross_entropy(target, bad)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = f64(3, 3, seed=1)
        before = p.clone()
        state = AdamState(m=[torch.zeros_like(p)], v=[torch.zeros_like(p)])
        adam_step([p], [torch.zeros_like(p)], state, lr=0.1)
        assert torch.equal(p, before)

    def test_first_step_magnitude_is_lr(self):
        # bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
        p = torch.zeros(4, dtype=torch.float64)
        g = torch.tensor([0.5, -2.0, 1e-3, 3.0], dtype=torch.float64)
        state = AdamState(m=[torch.zeros_like(p)], v=[torch.zeros_like(p)])
        adam_step([p], [g], state, lr=1e-3)
        assert torch.allclose(p.abs(), torch.full((4,), 1e-3, dtype=torch.float64), rtol=1e-4)
        assert torch.equal(p.sign(), -g.sign())

    def test_quadratic_bowl_converges(self):
        target = f64(6, seed=13)
        p = torch.zeros(6, dtype=torch.float64, requires_grad=True)
        opt = Adam([p], lr=0.05)
        losses = []
        for _ in range(200):
            opt.zero_grad()
            loss = ((p - target) ** 2).sum()
            loss.backward()
            losses.append(loss.item())
            opt.step()
        # 10-step moving average decreases monotonically after warm-up,
        # until the terminal dither plateau (fixed-lr Adam bounces around
        # the optimum at ~1e-5 scale)
        ma = [float(np.mean(losses[i:i + 10])) for i in range(0, 190, 10)]
        floor = 1e-3 * ma[0]
        for a, b in zip(ma[1:], ma[2:]):
            if a <= floor:
                break
            assert b <= a + 1e-12
        assert losses[-1] < 0.01 * losses[0]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
                  "b": np.array([1.5], dtype=np.float32)}
        bounds = {"lat": [41.0, 41.2], "lng": [-8.7, -8.5], "t": [0.0, 100.0]}
        config = {"d_model": 16, "variant": "full"}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, bounds, config)
        ck = load_checkpoint(path)
        assert np.array_equal(ck.params["a.weight"], params["a.weight"])
        assert np.array_equal(ck.params["b"], params["b"])
        assert ck.bounds == bounds
        assert ck.config == config
        assert len(ck.config_hash) == 16

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)}, {}, {})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_hash_tracks_config(self, tmp_path):
        p = {"w": np.zeros(2, dtype=np.float32)}
        save_checkpoint(tmp_path / "a.ckpt", p, {}, {"lr": 1e-3})
        save_checkpoint(tmp_path / "b.ckpt", p, {}, {"lr": 2e-3})
        assert (load_checkpoint(tmp_path / "a.ckpt").config_hash
                != load_checkpoint(tmp_path / "b.ckpt").config_hash)
