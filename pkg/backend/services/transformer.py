import logging
import math
from functools import lru_cache
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from models.schemas import ModelConfig
from services.event_log import PAD_ID
from utils.errors import AllMasked, PrefixLongerThanMaxLen, ShapeMismatch
from utils.rng import INIT_STREAM, philox_rng
from utils.tensor import (
    Parameter,
    Tensor,
    add,
    concat_last_axis,
    dropout,
    embedding_lookup,
    layer_norm_last_axis,
    matmul,
    max_over_axis,
    mul_scalar,
    relu,
    reshape,
    softmax_last_axis,
    transpose_last_two,
)

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-6


@lru_cache(maxsize=64)
def positional_encoding(length: int, embed_dim: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd ones."""
    position = np.arange(length, dtype=np.float64)[:, None]
    even = np.arange(0, embed_dim, 2, dtype=np.float64)
    angle = position / np.power(10000.0, even / embed_dim)
    table = np.zeros((length, embed_dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : embed_dim // 2])
    table.flags.writeable = False
    return table


class ModelParams:
    """Every learnable tensor of the network, in declaration order."""

    def __init__(self, parameters: Sequence[Parameter]):
        self._params: Dict[str, Parameter] = {}
        for p in parameters:
            if p.name in self._params:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self._params[p.name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    @property
    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def as_mapping(self) -> Dict[str, Parameter]:
        return self._params

    def leaves(self) -> Dict[str, Tensor]:
        """Fresh gradient-carrying views over the shared buffers, one set per tape."""
        return {name: Tensor(p.data, requires_grad=True) for name, p in self._params.items()}

    def copy(self) -> "ModelParams":
        return ModelParams([Parameter(p.name, p.data.copy()) for p in self])

    def zero_grad(self):
        for p in self:
            p.grad = None

    def num_values(self) -> int:
        return sum(p.data.size for p in self)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig) -> ModelParams:
    rng = philox_rng(config.seed, INIT_STREAM)
    e, dk, ff = config.embed_dim, config.head_dim, config.ff_hidden
    d1, d2 = config.dense_units

    params: List[Parameter] = [
        Parameter("embedding", _glorot(rng, config.num_classes, e, (config.num_classes, e))),
    ]
    for b in range(config.num_blocks):
        block = f"block{b}"
        for h in range(config.num_heads):
            for kind in ("Wq", "Wk", "Wv"):
                params.append(Parameter(f"{block}.mha.head{h}.{kind}", _glorot(rng, e, dk, (e, dk))))
        params += [
            Parameter(f"{block}.mha.Wo", _glorot(rng, e, e, (e, e))),
            Parameter(f"{block}.ln1.gain", np.ones(e)),
            Parameter(f"{block}.ln1.bias", np.zeros(e)),
            Parameter(f"{block}.ffn.W1", _glorot(rng, e, ff, (e, ff))),
            Parameter(f"{block}.ffn.b1", np.zeros(ff)),
            Parameter(f"{block}.ffn.W2", _glorot(rng, ff, e, (ff, e))),
            Parameter(f"{block}.ffn.b2", np.zeros(e)),
            Parameter(f"{block}.ln2.gain", np.ones(e)),
            Parameter(f"{block}.ln2.bias", np.zeros(e)),
        ]

    # time tasks see the pooled vector concatenated with the three scaled fv values
    head_in = e + 3 if config.task.is_regression else e
    params += [
        Parameter("head.dense1.W", _glorot(rng, head_in, d1, (head_in, d1))),
        Parameter("head.dense1.b", np.zeros(d1)),
        Parameter("head.dense2.W", _glorot(rng, d1, d2, (d1, d2))),
        Parameter("head.dense2.b", np.zeros(d2)),
        Parameter("head.out.W", _glorot(rng, d2, config.output_dim, (d2, config.output_dim))),
        Parameter("head.out.b", np.zeros(config.output_dim)),
    ]
    model_params = ModelParams(params)
    logger.debug(f"Initialised {len(model_params)} tensors, {model_params.num_values()} weights (seed {config.seed})")
    return model_params


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, keep_mask: Optional[np.ndarray] = None,
                                 return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V with padded key positions masked out.

    Works on any leading batch axes; ``keep_mask`` is [..., len] over keys.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} do not agree")
    scores = mul_scalar(matmul(q, transpose_last_two(k)), 1.0 / math.sqrt(q.shape[-1]))
    mask = None if keep_mask is None else np.asarray(keep_mask, dtype=bool)[..., None, :]
    weights = softmax_last_axis(scores, mask)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def multi_head_attention(x: Tensor, params: Mapping[str, Tensor], prefix: str, num_heads: int,
                         keep_mask: Optional[np.ndarray] = None) -> Tensor:
    """Self-attention: Concat(head_1..head_h) W^O with Q = K = V = x."""
    heads = None
    for h in range(num_heads):
        head = scaled_dot_product_attention(
            matmul(x, params[f"{prefix}.head{h}.Wq"]),
            matmul(x, params[f"{prefix}.head{h}.Wk"]),
            matmul(x, params[f"{prefix}.head{h}.Wv"]),
            keep_mask,
        )
        heads = head if heads is None else concat_last_axis(heads, head)
    return matmul(heads, params[f"{prefix}.Wo"])


def attention_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, num_heads: int,
                    keep_mask: Optional[np.ndarray], dropout_rate: float, training: bool,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    attended = multi_head_attention(x, params, f"{prefix}.mha", num_heads, keep_mask)
    y1 = layer_norm_last_axis(
        add(x, dropout(attended, dropout_rate, training, rng)),
        params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"], LAYER_NORM_EPS,
    )
    hidden = relu(add(matmul(y1, params[f"{prefix}.ffn.W1"]), params[f"{prefix}.ffn.b1"]))
    projected = add(matmul(hidden, params[f"{prefix}.ffn.W2"]), params[f"{prefix}.ffn.b2"])
    return layer_norm_last_axis(
        add(y1, dropout(projected, dropout_rate, training, rng)),
        params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"], LAYER_NORM_EPS,
    )


class ProcessTransformer:
    """Embedding + positional encoding, attention blocks, masked max-pool and a dense head."""

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def _check_prefixes(self, ids: np.ndarray) -> np.ndarray:
        keep = ids != PAD_ID
        lengths = keep.sum(axis=1)
        if (lengths > self.config.max_len).any():
            raise PrefixLongerThanMaxLen(
                f"prefix of {int(lengths.max())} events exceeds max_len={self.config.max_len}"
            )
        if (lengths == 0).any():
            raise AllMasked("a sample has no events (all positions are PAD)")
        return keep

    def _embed(self, ids: np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
        x = embedding_lookup(params["embedding"], ids)
        return add(x, Tensor(positional_encoding(ids.shape[1], self.config.embed_dim)))

    def forward(self, ids: np.ndarray, fv: Optional[np.ndarray] = None, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """Logits [B, V+2] for next_activity, scaled predictions [B] for the time tasks.

        ``ids`` is [B, W] right-padded with PAD; W may exceed max_len as long as
        no prefix does. ``fv`` holds the scaled temporal features [B, 3].
        """
        cfg = self.config
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        keep = self._check_prefixes(ids)
        if training and cfg.dropout_rate > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")
        p = params if params is not None else self.params.as_mapping()

        x = self._embed(ids, p)
        for b in range(cfg.num_blocks):
            x = attention_block(x, p, f"block{b}", cfg.num_heads, keep, cfg.dropout_rate, training, rng)

        pooled = dropout(max_over_axis(x, axis=1, mask=keep[:, :, None]), cfg.dropout_rate, training, rng)
        if cfg.task.is_regression:
            if fv is None:
                raise ValueError(f"{cfg.task.value} needs the scaled temporal features")
            fv = np.asarray(fv, dtype=np.float64).reshape(len(ids), 3)
            pooled = concat_last_axis(pooled, Tensor(fv))

        h = relu(add(matmul(pooled, p["head.dense1.W"]), p["head.dense1.b"]))
        h = relu(add(matmul(h, p["head.dense2.W"]), p["head.dense2.b"]))
        out = add(matmul(h, p["head.out.W"]), p["head.out.b"])
        if cfg.task.is_regression:
            out = reshape(out, (len(ids),))
        return out

    def predict(self, ids: np.ndarray, fv: Optional[np.ndarray] = None) -> np.ndarray:
        return self.forward(ids, fv, training=False).data

    def attention_weights(self, ids: np.ndarray) -> np.ndarray:
        """Per-head attention of the first block, [B, heads, W, W], for debugging."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        keep = self._check_prefixes(ids)
        p = self.params.as_mapping()
        x = self._embed(ids, p)
        weights = []
        for h in range(self.config.num_heads):
            _, w = scaled_dot_product_attention(
                matmul(x, p[f"block0.mha.head{h}.Wq"]),
                matmul(x, p[f"block0.mha.head{h}.Wk"]),
                matmul(x, p[f"block0.mha.head{h}.Wv"]),
                keep,
                return_weights=True,
            )
            weights.append(w.data)
        return np.stack(weights, axis=1)
