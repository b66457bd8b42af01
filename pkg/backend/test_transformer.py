import math

import numpy as np
import pytest

from models.schemas import ModelConfig, Task
from services.transformer import (
    ModelParams,
    ProcessTransformer,
    attention_block,
    init_params,
    multi_head_attention,
    positional_encoding,
    scaled_dot_product_attention,
)
from utils.errors import AllMasked, PrefixLongerThanMaxLen
from utils.tensor import Tape, Tensor, backward, cross_entropy, log_cosh, mul, sum_all


def central_difference(f, x: np.ndarray, idx, step: float) -> float:
    saved = x[idx]
    x[idx] = saved + step
    hi = f()
    x[idx] = saved - step
    lo = f()
    x[idx] = saved
    return (hi - lo) / (2 * step)


def grad_agrees(f, x, idx, analytic, rtol=1e-4, atol=1e-7) -> bool:
    # a step that crosses a ReLU or max-pool switch is retried with a smaller one
    for step in (1e-5, 1e-6):
        numeric = central_difference(f, x, idx, step)
        if abs(analytic - numeric) <= rtol * max(abs(analytic), abs(numeric)) + atol:
            return True
    return False


def random_ids(rng, n, max_len, vocab_size, width=None):
    width = width or max_len
    lengths = rng.integers(1, max_len + 1, size=n)
    ids = np.zeros((n, width), dtype=np.int64)
    for i, k in enumerate(lengths):
        ids[i, :k] = rng.integers(1, vocab_size + 2, size=k)
    return ids


class TestPositionalEncoding:
    def test_formula(self):
        table = positional_encoding(10, 36)
        for p in (0, 3, 9):
            for i in (0, 5, 17):
                angle = p / 10000 ** (2 * i / 36)
                assert table[p, 2 * i] == pytest.approx(math.sin(angle), abs=1e-12)
                assert table[p, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-12)

    def test_bounded_and_read_only(self):
        table = positional_encoding(50, 8)
        assert np.abs(table).max() <= 1.0
        assert not table.flags.writeable

    def test_odd_width(self):
        assert positional_encoding(4, 5).shape == (4, 5)


class TestScaledDotProductAttention:
    def test_single_position(self):
        v = Tensor([[0.3, -1.2, 2.0]])
        np.testing.assert_allclose(scaled_dot_product_attention(v, v, v).data, v.data)

    def test_identical_keys_average_values(self):
        q = Tensor([[1.0, 2.0]])
        k = Tensor([[0.5, 0.5], [0.5, 0.5]])
        v = Tensor([[1.0, 0.0], [3.0, 4.0]])
        out, weights = scaled_dot_product_attention(q, k, v, return_weights=True)
        np.testing.assert_allclose(weights.data, [[0.5, 0.5]])
        np.testing.assert_allclose(out.data, [[2.0, 2.0]])

    def test_hand_evaluated(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        k = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 0.3]])
        v = np.array([[1.0, -1.0], [2.0, 0.0], [-3.0, 5.0]])
        expected = np.zeros((3, 2))
        for i in range(3):
            scores = [sum(q[i, d] * k[j, d] for d in range(2)) / math.sqrt(2) for j in range(3)]
            exps = [math.exp(s) for s in scores]
            total = sum(exps)
            for j in range(3):
                expected[i] += exps[j] / total * v[j]
        out = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_padded_keys_get_zero_weight(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 5, 4)))
        keep = np.array([[True, True, True, False, False], [True, False, False, False, False]])
        _, weights = scaled_dot_product_attention(x, x, x, keep, return_weights=True)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (weights.data[~np.broadcast_to(keep[:, None, :], weights.shape)] == 0.0).all()

    def test_all_masked(self):
        x = Tensor(np.ones((1, 2, 3)))
        with pytest.raises(AllMasked):
            scaled_dot_product_attention(x, x, x, np.array([[False, False]]))


def _mha_params(embed_dim, num_heads, rng, prefix="mha"):
    dk = embed_dim // num_heads
    params = {f"{prefix}.Wo": Tensor(rng.normal(size=(embed_dim, embed_dim)))}
    for h in range(num_heads):
        for kind in ("Wq", "Wk", "Wv"):
            params[f"{prefix}.head{h}.{kind}"] = Tensor(rng.normal(scale=0.5, size=(embed_dim, dk)))
    return params


class TestMultiHeadAttention:
    def test_single_identity_head_is_plain_attention(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 3)))
        eye = Tensor(np.eye(3))
        params = {"mha.head0.Wq": eye, "mha.head0.Wk": eye, "mha.head0.Wv": eye, "mha.Wo": eye}
        np.testing.assert_allclose(
            multi_head_attention(x, params, "mha", 1).data,
            scaled_dot_product_attention(x, x, x).data,
            atol=1e-12,
        )

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        params = _mha_params(6, 2, rng)
        x = rng.normal(size=(1, 5, 6))
        keep = np.array([[True, True, True, True, False]])
        perm = [2, 1, 0, 3, 4]
        out = multi_head_attention(Tensor(x), params, "mha", 2, keep).data
        permuted = multi_head_attention(Tensor(x[:, perm]), params, "mha", 2, keep[:, perm]).data
        np.testing.assert_allclose(permuted[0, :4], out[0, perm][:4], atol=1e-12)

    def test_zero_output_projection(self):
        rng = np.random.default_rng(3)
        params = _mha_params(4, 2, rng)
        params["mha.Wo"] = Tensor(np.zeros((4, 4)))
        assert (multi_head_attention(Tensor(rng.normal(size=(2, 3, 4))), params, "mha", 2).data == 0).all()


def _block_params(config: ModelConfig):
    return {name: p for name, p in init_params(config).items() if name.startswith("block0.")}


class TestAttentionBlock:
    @pytest.fixture
    def config(self):
        return ModelConfig(vocab_size=4, max_len=3, embed_dim=8, num_heads=2, ff_hidden=10, dropout_rate=0.1)

    def test_deterministic_without_training(self, config):
        x = Tensor(np.random.default_rng(4).normal(size=(2, 3, 8)))
        params = _block_params(config)
        a = attention_block(x, params, "block0", 2, None, 0.1, training=False).data
        b = attention_block(x, params, "block0", 2, None, 0.1, training=False).data
        np.testing.assert_array_equal(a, b)

    def test_padded_rows_do_not_leak(self, config):
        rng = np.random.default_rng(5)
        params = _block_params(config)
        keep = np.array([[True, True, False]])
        x = rng.normal(size=(1, 3, 8))
        y = x.copy()
        y[0, 2] = rng.normal(size=8) * 10
        a = attention_block(Tensor(x), params, "block0", 2, keep, 0.0, False).data
        b = attention_block(Tensor(y), params, "block0", 2, keep, 0.0, False).data
        np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-12)

    def test_gradient(self, config):
        rng = np.random.default_rng(6)
        config = config.model_copy(update={"dropout_rate": 0.0})
        params = init_params(config)
        x = rng.normal(size=(2, 3, 8))
        w = rng.normal(size=(2, 3, 8))
        names = [n for n in params.names if n.startswith("block0.")]

        def loss_of(values):
            return sum_all(mul(attention_block(Tensor(x), values, "block0", 2, None, 0.0, False), Tensor(w)))

        leaves = params.leaves()
        with Tape():
            backward(loss_of(leaves))
        plain = params.as_mapping()
        for name in names:
            data = params[name].data
            for idx in list(np.ndindex(*data.shape))[:20]:
                assert grad_agrees(lambda: loss_of(plain).item(), data, idx, leaves[name].grad[idx]), (name, idx)


class TestProcessTransformer:
    def test_next_activity_output_width(self, tiny_config):
        model = ProcessTransformer(tiny_config)
        logits = model.predict(np.array([[1, 2, 0, 0, 0, 0]]))
        assert logits.shape == (1, tiny_config.vocab_size + 2)

    def test_regression_output(self, tiny_config):
        config = tiny_config.model_copy(update={"task": Task.REMAINING_TIME})
        model = ProcessTransformer(config)
        out = model.predict(np.array([[1, 2, 0, 0, 0, 0], [3, 0, 0, 0, 0, 0]]), np.zeros((2, 3)))
        assert out.shape == (2,)
        with pytest.raises(ValueError):
            model.predict(np.array([[1, 0, 0, 0, 0, 0]]))

    def test_padding_extension_invariance(self):
        config = ModelConfig(vocab_size=5, max_len=6, embed_dim=12, num_heads=3, seed=11)
        model = ProcessTransformer(config)
        rng = np.random.default_rng(7)
        ids = random_ids(rng, 100, 6, 5)
        wide = np.zeros((100, 16), dtype=np.int64)
        wide[:, :6] = ids
        diff = np.abs(model.predict(ids) - model.predict(wide))
        assert diff.max() <= 1e-12

    def test_seeded_init_is_reproducible(self, tiny_config):
        ids = np.array([[1, 3, 2, 0, 0, 0]])
        a = ProcessTransformer(tiny_config).predict(ids)
        b = ProcessTransformer(tiny_config).predict(ids)
        np.testing.assert_array_equal(a, b)
        other = ProcessTransformer(tiny_config.model_copy(update={"seed": 8})).predict(ids)
        assert not np.array_equal(a, other)

    def test_order_matters(self, tiny_config):
        model = ProcessTransformer(tiny_config)
        forward = model.predict(np.array([[1, 2, 3, 0, 0, 0]]))
        backward_order = model.predict(np.array([[3, 2, 1, 0, 0, 0]]))
        assert np.abs(forward - backward_order).max() > 1e-6

    def test_outputs_finite_on_edge_inputs(self, tiny_config):
        model = ProcessTransformer(tiny_config)
        ids = np.array([[1, 1, 1, 1, 1, 1], [6, 6, 6, 6, 6, 6], [2, 0, 0, 0, 0, 0]])
        assert np.isfinite(model.predict(ids)).all()
        config = tiny_config.model_copy(update={"task": Task.NEXT_TIME})
        assert np.isfinite(ProcessTransformer(config).predict(ids, np.zeros((3, 3)))).all()

    def test_prefix_longer_than_max_len(self, tiny_config):
        with pytest.raises(PrefixLongerThanMaxLen):
            ProcessTransformer(tiny_config).predict(np.ones((1, 7), dtype=np.int64))

    def test_empty_prefix(self, tiny_config):
        with pytest.raises(AllMasked):
            ProcessTransformer(tiny_config).predict(np.zeros((1, 6), dtype=np.int64))

    def test_attention_weights_dump(self, tiny_config):
        weights = ProcessTransformer(tiny_config).attention_weights(np.array([[1, 2, 3, 0, 0, 0]]))
        assert weights.shape == (1, 2, 6, 6)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
        assert (weights[..., 3:] == 0).all()

    def test_params_copy_is_independent(self, tiny_config):
        params = init_params(tiny_config)
        copy = params.copy()
        copy["embedding"].data[0, 0] += 1.0
        assert params["embedding"].data[0, 0] != copy["embedding"].data[0, 0]
        assert isinstance(copy, ModelParams) and copy.names == params.names


class TestEndToEndGradient:
    @pytest.mark.parametrize("task", [Task.NEXT_ACTIVITY, Task.NEXT_TIME])
    def test_every_parameter(self, tiny_config, task):
        config = tiny_config.model_copy(update={"task": task})
        model = ProcessTransformer(config)
        rng = np.random.default_rng(8)
        ids = random_ids(rng, 4, config.max_len, config.vocab_size)
        fv = rng.normal(size=(4, 3)) if task.is_regression else None
        if task.is_regression:
            target = rng.normal(size=4)

            def loss_fn(out):
                return log_cosh(out, target)
        else:
            target = rng.integers(1, config.vocab_size + 2, size=4)

            def loss_fn(out):
                return cross_entropy(out, target)

        leaves = model.params.leaves()
        with Tape():
            backward(loss_fn(model.forward(ids, fv, params=leaves)))

        def value():
            return loss_fn(model.forward(ids, fv)).item()

        for p in model.params:
            coords = list(np.ndindex(*p.shape))
            picked = rng.choice(len(coords), size=min(20, len(coords)), replace=False)
            for c in picked:
                idx = coords[c]
                assert grad_agrees(value, p.data, idx, leaves[p.name].grad[idx]), (p.name, idx)
