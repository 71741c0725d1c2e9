from dataclasses import replace

import numpy as np
import pytest

from latent_lab import tensor as T
from latent_lab.errors import CapacityError, ConfigError, DimensionError, StructureError
from latent_lab.evaluation import evaluate
from latent_lab.model import (
    CausalTransformer,
    ModelConfig,
    continuation_logprob,
    greedy_decode,
    sequence_logprob,
)

IDS = [7, 12, 5, 9, 30, 2, 18]


def test_forward_shapes(tiny_model, tiny_config):
    """Test hidden and logit shapes of a single-sequence forward."""
    out = tiny_model.forward(IDS)
    assert out.hidden.shape == (len(IDS), tiny_config.d_model)
    assert out.logits.shape == (len(IDS), tiny_config.vocab_size)
    assert out.cache.length == len(IDS)
    assert len(out.cache.keys) == tiny_config.n_layer


def test_cache_matches_full_forward(tiny_model64):
    """Test that extending a cache reproduces the full-sequence logits."""
    full = tiny_model64.forward(IDS).logits.data
    state = tiny_model64.prefill(IDS[:4])
    rest = tiny_model64.forward(IDS[4:], cache=state.cache).logits.data
    np.testing.assert_allclose(state.last_logits, full[3], atol=1e-10)
    np.testing.assert_allclose(rest, full[4:], atol=1e-10)


def test_cache_is_not_mutated(tiny_model64):
    """Test that extending a cache leaves the original untouched."""
    state = tiny_model64.prefill(IDS[:3])
    keys = state.cache.keys[0].data.copy()
    tiny_model64.forward(IDS[3:], cache=state.cache)
    assert state.cache.length == 3
    np.testing.assert_array_equal(state.cache.keys[0].data, keys)


def test_left_padding_is_invisible(tiny_model64):
    """Test that padded positions change neither attention nor position ids."""
    single = tiny_model64.forward(IDS).hidden.data
    pad = 3
    ids = np.zeros((2, len(IDS) + pad), dtype=np.int64)
    ids[0, pad:] = IDS
    ids[1, : len(IDS)] = IDS
    attend = np.zeros_like(ids, dtype=bool)
    attend[0, pad:] = True
    attend[1, : len(IDS)] = True
    with T.no_grad():
        out = tiny_model64.forward_embeds(tiny_model64.embed_tokens(ids), attend=attend)
    np.testing.assert_allclose(out.hidden.data[0, pad:], single, atol=1e-10)
    np.testing.assert_allclose(out.hidden.data[1, : len(IDS)], single, atol=1e-10)
    np.testing.assert_array_equal(out.cache.next_position, [len(IDS), len(IDS)])


def test_embedding_inputs_match_token_inputs(tiny_model64):
    """Test that feeding a token's embedding vector equals feeding its id."""
    vector = tiny_model64["wte"].data[IDS[2]]
    by_id = tiny_model64.forward(IDS[:3]).logits.data
    by_vector = tiny_model64.forward(IDS[:2] + [vector]).logits.data
    np.testing.assert_allclose(by_vector, by_id, atol=1e-12)


def test_context_overflow(tiny_config):
    """Test that overflowing the context window raises."""
    model = CausalTransformer(replace(tiny_config, context_length=4))
    with pytest.raises(CapacityError):
        model.forward([1, 2, 3, 4, 5])
    state = model.prefill([1, 2, 3])
    with pytest.raises(CapacityError):
        model.forward([4, 5], cache=state.cache)


def test_wrong_embedding_width(tiny_model):
    """Test that an input vector of the wrong width is rejected."""
    with pytest.raises(DimensionError):
        tiny_model.forward([1, np.zeros(3)])


def test_empty_forward(tiny_model):
    """Test that a forward without positions is rejected."""
    with pytest.raises(StructureError):
        tiny_model.forward([])


def test_greedy_decode_is_deterministic(tiny_model):
    """Test that greedy decoding repeats and respects max_new."""
    first = greedy_decode(tiny_model, IDS, stop=frozenset(), max_new=6)
    second = greedy_decode(tiny_model, IDS, stop=frozenset(), max_new=6)
    assert first.tokens == second.tokens
    assert len(first.tokens) == 6
    assert first.truncated


def test_greedy_decode_stops(tiny_model):
    """Test that a stop token ends decoding and is not emitted."""
    token = int(np.argmax(tiny_model.prefill(IDS).last_logits))
    result = greedy_decode(tiny_model, IDS, stop=frozenset({token}), max_new=6)
    assert result.tokens == []
    assert result.stop_token == token
    assert not result.truncated


def test_sequence_and_continuation_logprob_agree(tiny_model64):
    """Test teacher-forced scoring with and without a shared prefix cache."""
    prefix, continuation = IDS[:4], [11, 3, 25]
    direct = sequence_logprob(tiny_model64, prefix, continuation)
    cached = continuation_logprob(tiny_model64, tiny_model64.prefill(prefix), continuation)
    assert direct < 0
    assert direct == pytest.approx(cached, abs=1e-10)
    assert sequence_logprob(tiny_model64, prefix, []) == 0.0


def test_sequence_logprob_needs_prefix(tiny_model):
    """Test scoring without a prefix."""
    with pytest.raises(StructureError):
        sequence_logprob(tiny_model, [], [1])


def test_tied_output_head(tiny_config):
    """Test that a tied head reuses the token embedding."""
    model = CausalTransformer(replace(tiny_config, tie_output_head=True))
    assert "lm_head" not in model.store
    assert model.output_weight.shape == (tiny_config.d_model, tiny_config.vocab_size)
    np.testing.assert_array_equal(model.output_weight.data, model["wte"].data.T)


def test_same_seed_same_weights(tiny_config):
    """Test that initialization is a function of the seed."""
    first, second = CausalTransformer(tiny_config), CausalTransformer(tiny_config)
    other = CausalTransformer(replace(tiny_config, seed=tiny_config.seed + 1))
    np.testing.assert_array_equal(first["h.0.attn.w_qkv"].data, second["h.0.attn.w_qkv"].data)
    assert not np.array_equal(first["h.0.attn.w_qkv"].data, other["h.0.attn.w_qkv"].data)


def test_invalid_config():
    """Test that heads must divide the model width."""
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d_model=10, n_head=3)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=0)


def test_pass_count(tiny_model):
    """Test that every stack invocation is counted."""
    before = tiny_model.pass_count
    state = tiny_model.prefill(IDS[:2])
    tiny_model.prefill(IDS[2:4], cache=state.cache)
    assert tiny_model.pass_count == before + 2


def test_pass_count_under_concurrent_evaluation(tiny_model, vocab, small_examples):
    """Test that worker threads sharing one model lose no pass counts."""
    before = tiny_model.pass_count
    evaluate(tiny_model, vocab, small_examples[:4], [0, 2], max_new=4, workers=1)
    serial = tiny_model.pass_count - before
    before = tiny_model.pass_count
    evaluate(tiny_model, vocab, small_examples[:4], [0, 2], max_new=4, workers=4)
    assert tiny_model.pass_count - before == serial
