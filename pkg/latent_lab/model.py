"""Small decoder-only causal transformer with a key/value cache."""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .const import (
    ATTENTION_MASK_VALUE,
    DEFAULT_CONTEXT_LENGTH,
    DEFAULT_D_MODEL,
    DEFAULT_LAYER_NORM_EPS,
    DEFAULT_N_HEAD,
    DEFAULT_N_LAYER,
)
from .errors import CapacityError, ConfigError, DimensionError, StructureError
from .tensor import ParameterStore, Tensor

_LOGGER = logging.getLogger(__name__)

ModelInput = int | np.ndarray | Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the transformer."""

    vocab_size: int
    n_layer: int = DEFAULT_N_LAYER
    d_model: int = DEFAULT_D_MODEL
    n_head: int = DEFAULT_N_HEAD
    d_ff: int = 4 * DEFAULT_D_MODEL
    context_length: int = DEFAULT_CONTEXT_LENGTH
    tie_output_head: bool = False
    seed: int = 0
    layer_norm_eps: float = DEFAULT_LAYER_NORM_EPS
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.vocab_size < 1 or self.n_layer < 1 or self.d_model < 1 or self.d_ff < 1:
            raise ConfigError(f"Model extents must be positive: {self}")
        if self.d_model % self.n_head:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_head={self.n_head}")
        if self.context_length < 2:
            raise ConfigError("context_length must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_head

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        return cls(**data)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        shapes: dict[str, tuple[int, ...]] = {
            "wte": (v, d),
            "wpe": (self.context_length, d),
        }
        for i in range(self.n_layer):
            p = f"h.{i}"
            shapes.update(
                {
                    f"{p}.ln_1.gain": (d,),
                    f"{p}.ln_1.bias": (d,),
                    f"{p}.attn.w_qkv": (d, 3 * d),
                    f"{p}.attn.b_qkv": (3 * d,),
                    f"{p}.attn.w_proj": (d, d),
                    f"{p}.attn.b_proj": (d,),
                    f"{p}.ln_2.gain": (d,),
                    f"{p}.ln_2.bias": (d,),
                    f"{p}.mlp.w_fc": (d, f),
                    f"{p}.mlp.b_fc": (f,),
                    f"{p}.mlp.w_out": (f, d),
                    f"{p}.mlp.b_out": (d,),
                }
            )
        shapes["ln_f.gain"] = (d,)
        shapes["ln_f.bias"] = (d,)
        if not self.tie_output_head:
            shapes["lm_head"] = (d, v)
        return shapes


@dataclass(frozen=True)
class KVCache:
    """Keys and values of a processed prefix, one entry per layer.

    Extending a cache returns a new object; the tensors of the old one are
    never modified.
    """

    keys: tuple[Tensor, ...]
    values: tuple[Tensor, ...]
    attend: np.ndarray
    next_position: np.ndarray

    @property
    def length(self) -> int:
        return int(self.attend.shape[1])

    @property
    def batch_size(self) -> int:
        return int(self.attend.shape[0])


@dataclass
class ForwardOutput:
    hidden: Tensor
    logits: Tensor | None
    cache: KVCache


@dataclass
class DecodeResult:
    tokens: list[int]
    stop_token: int | None = None
    truncated: bool = False


@dataclass
class PrefixState:
    """A processed prefix: its cache and the logits at its last position."""

    cache: KVCache
    last_logits: np.ndarray
    last_hidden: np.ndarray


class CausalTransformer:
    """GPT-2-shaped pre-norm transformer over a :class:`ParameterStore`."""

    def __init__(self, config: ModelConfig, store: ParameterStore | None = None) -> None:
        self.config = config
        self.store = store if store is not None else self._init_store(config)
        self.pass_count = 0
        self._count_lock = threading.Lock()

    @staticmethod
    def _init_store(config: ModelConfig) -> ParameterStore:
        rng = np.random.default_rng(config.seed)
        dtype = T.get_default_dtype()
        residual_std = config.init_std / math.sqrt(2 * config.n_layer)
        store = ParameterStore()
        for name, shape in config.parameter_shapes().items():
            if name.endswith(".gain"):
                value = np.ones(shape)
            elif len(shape) == 1:
                value = np.zeros(shape)
            elif name.endswith(("w_proj", "w_out")):
                value = rng.normal(0.0, residual_std, shape)
            else:
                value = rng.normal(0.0, config.init_std, shape)
            store.add(name, value.astype(dtype))
        _LOGGER.debug("Initialized %d parameters (%d values)", len(store), store.num_parameters())
        return store

    def __getitem__(self, name: str) -> Tensor:
        return self.store[name]

    @property
    def output_weight(self) -> Tensor:
        if self.config.tie_output_head:
            return self.store["wte"].T
        return self.store["lm_head"]

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.store["wte"], ids)

    def head(self, hidden: Tensor) -> Tensor:
        return T.matmul(hidden, self.output_weight)

    def _attention_mask(self, cache_len: int, new_len: int, attend_all: np.ndarray) -> np.ndarray:
        total = cache_len + new_len
        query_pos = cache_len + np.arange(new_len)[:, None]
        key_pos = np.arange(total)[None, :]
        allowed = (key_pos <= query_pos)[None, :, :] & attend_all[:, None, :]
        allowed |= (key_pos == query_pos)[None, :, :]
        mask = np.where(allowed, 0.0, ATTENTION_MASK_VALUE).astype(T.get_default_dtype())
        return mask[:, None, :, :]

    def _block(
        self, i: int, x: Tensor, cache: KVCache | None, mask: np.ndarray
    ) -> tuple[Tensor, Tensor, Tensor]:
        cfg = self.config
        p = f"h.{i}"
        batch, length, d = x.shape
        h = T.layer_norm(x, self[f"{p}.ln_1.gain"], self[f"{p}.ln_1.bias"], cfg.layer_norm_eps)
        qkv = T.matmul(h, self[f"{p}.attn.w_qkv"]) + self[f"{p}.attn.b_qkv"]

        def heads(part: Tensor) -> Tensor:
            return T.transpose(part.reshape(batch, length, cfg.n_head, cfg.head_dim), (0, 2, 1, 3))

        q = heads(qkv[..., :d])
        k = heads(qkv[..., d : 2 * d])
        v = heads(qkv[..., 2 * d :])
        if cache is not None:
            k = T.concat([cache.keys[i], k], axis=2)
            v = T.concat([cache.values[i], v], axis=2)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(cfg.head_dim)) + mask
        attn = T.matmul(T.softmax_rows(scores), v)
        attn = T.transpose(attn, (0, 2, 1, 3)).reshape(batch, length, d)
        x = x + T.matmul(attn, self[f"{p}.attn.w_proj"]) + self[f"{p}.attn.b_proj"]
        h = T.layer_norm(x, self[f"{p}.ln_2.gain"], self[f"{p}.ln_2.bias"], cfg.layer_norm_eps)
        h = T.gelu(T.matmul(h, self[f"{p}.mlp.w_fc"]) + self[f"{p}.mlp.b_fc"])
        x = x + T.matmul(h, self[f"{p}.mlp.w_out"]) + self[f"{p}.mlp.b_out"]
        return x, k, v

    def forward_embeds(
        self,
        inputs: Tensor,
        cache: KVCache | None = None,
        attend: np.ndarray | None = None,
        compute_logits: bool = True,
    ) -> ForwardOutput:
        """Run the stack over input vectors ``(batch, length, d)``.

        ``attend`` marks real (non-padding) positions; padding is never
        attended to and does not advance position ids. Returned hidden states
        have passed the final normalization.
        """
        cfg = self.config
        if inputs.ndim != 3 or inputs.shape[-1] != cfg.d_model:
            raise DimensionError(f"Expected inputs (batch, length, {cfg.d_model}), got {inputs.shape}")
        batch, length, _ = inputs.shape
        cache_len = cache.length if cache is not None else 0
        if cache_len + length > cfg.context_length:
            raise CapacityError(
                f"Sequence of {cache_len + length} positions exceeds context length {cfg.context_length}"
            )
        if attend is None:
            attend = np.ones((batch, length), dtype=bool)
        start = cache.next_position if cache is not None else np.zeros(batch, dtype=np.int64)
        positions = np.maximum(start[:, None] + np.cumsum(attend, axis=1) - 1, 0)
        attend_all = attend if cache is None else np.concatenate([cache.attend, attend], axis=1)
        mask = self._attention_mask(cache_len, length, attend_all)

        with self._count_lock:
            self.pass_count += 1
        x = inputs + T.embedding(self.store["wpe"], positions)
        keys, values = [], []
        for i in range(cfg.n_layer):
            x, k, v = self._block(i, x, cache, mask)
            keys.append(k)
            values.append(v)
        hidden = T.layer_norm(x, self["ln_f.gain"], self["ln_f.bias"], cfg.layer_norm_eps)
        logits = self.head(hidden) if compute_logits else None
        new_cache = KVCache(
            keys=tuple(keys),
            values=tuple(values),
            attend=attend_all,
            next_position=start + attend.sum(axis=1),
        )
        return ForwardOutput(hidden=hidden, logits=logits, cache=new_cache)

    def assemble(self, inputs: Sequence[ModelInput]) -> Tensor:
        """Stack a mixed sequence of token ids and embedding vectors into ``(1, T, d)``."""
        d = self.config.d_model
        rows: list[Tensor] = []
        run: list[int] = []

        def flush() -> None:
            if run:
                rows.append(self.embed_tokens(np.asarray(run)))
                run.clear()

        for item in inputs:
            if isinstance(item, (int, np.integer)):
                run.append(int(item))
                continue
            flush()
            vector = item if isinstance(item, Tensor) else Tensor(item)
            if vector.shape[-1] != d or vector.size != d:
                raise DimensionError(f"Embedding input has width {vector.shape}, expected {d}")
            rows.append(vector.reshape(1, d))
        flush()
        if not rows:
            raise StructureError("forward needs at least one input position")
        seq = rows[0] if len(rows) == 1 else T.concat(rows, axis=0)
        return seq.reshape(1, seq.shape[0], d)

    def forward(self, inputs: Sequence[ModelInput], cache: KVCache | None = None) -> ForwardOutput:
        """Single-sequence forward over token ids and/or embedding vectors.

        Returns hidden states ``(T, d)`` and logits ``(T, V)``.
        """
        out = self.forward_embeds(self.assemble(inputs), cache=cache)
        return ForwardOutput(hidden=out.hidden[0], logits=out.logits[0], cache=out.cache)

    def prefill(self, prefix: Sequence[ModelInput], cache: KVCache | None = None) -> PrefixState:
        with T.no_grad():
            out = self.forward(prefix, cache=cache)
        return PrefixState(cache=out.cache, last_logits=out.logits.data[-1], last_hidden=out.hidden.data[-1])

    def num_parameters(self) -> int:
        return self.store.num_parameters()


def greedy_continue(
    model: CausalTransformer,
    state: PrefixState,
    stop: set[int] | frozenset[int],
    max_new: int,
) -> DecodeResult:
    """Append argmax tokens after a processed prefix until a stop token or ``max_new``."""
    tokens: list[int] = []
    logits = state.last_logits
    cache = state.cache
    with T.no_grad():
        for _ in range(max_new):
            token = int(np.argmax(logits))
            if token in stop:
                return DecodeResult(tokens=tokens, stop_token=token)
            tokens.append(token)
            if len(tokens) == max_new or cache.length >= model.config.context_length:
                break
            out = model.forward([token], cache=cache)
            cache = out.cache
            logits = out.logits.data[-1]
    _LOGGER.debug("Greedy decode hit max_new=%d without a stop token", max_new)
    return DecodeResult(tokens=tokens, stop_token=None, truncated=True)


def greedy_decode(
    model: CausalTransformer,
    prefix: Sequence[ModelInput],
    stop: set[int] | frozenset[int],
    max_new: int,
) -> DecodeResult:
    """Greedy decoding; ties resolve to the lowest token id."""
    return greedy_continue(model, model.prefill(prefix), stop, max_new)


def continuation_logprob(model: CausalTransformer, state: PrefixState, continuation: Sequence[int]) -> float:
    """Teacher-forced log-probability of ``continuation`` after a processed prefix."""
    if not continuation:
        return 0.0
    total = float(T.log_softmax(state.last_logits[None, :])[0, continuation[0]])
    if len(continuation) > 1:
        with T.no_grad():
            out = model.forward(list(continuation[:-1]), cache=state.cache)
        logp = T.log_softmax(out.logits.data)
        total += float(sum(logp[i, token] for i, token in enumerate(continuation[1:])))
    return total


def sequence_logprob(model: CausalTransformer, prefix: Sequence[ModelInput], continuation: Sequence[int]) -> float:
    """Sum of log softmax(W h)[token] over ``continuation``, teacher-forced after ``prefix``."""
    if not continuation:
        return 0.0
    if not prefix:
        raise StructureError("sequence_logprob needs a non-empty prefix")
    cfg = model.config
    if len(prefix) + len(continuation) - 1 > cfg.context_length:
        raise CapacityError("prefix and continuation exceed the context length")
    with T.no_grad():
        out = model.forward(list(prefix) + list(continuation[:-1]))
    logp = T.log_softmax(out.logits.data)
    offset = len(prefix) - 1
    return float(sum(logp[offset + i, token] for i, token in enumerate(continuation)))
