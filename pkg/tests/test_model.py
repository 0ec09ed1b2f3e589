import numpy as np
import pytest

from cocolex.errors import EmptyPrompt, InvalidToken
from cocolex.model import (
    ReferenceNgramModel,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    serve_in_process,
)


def loop_oracle(model: ReferenceNgramModel, tokens):
    """Straight per-position loop over the definition."""
    E = model.embedding_table
    states, logits = [], []
    for i in range(len(tokens)):
        window = tokens[max(0, i - model.order + 1) : i + 1]
        h = sum(E[t] for t in window)
        h = h / np.linalg.norm(h)
        states.append(h)
        logits.append(E @ h / model.temperature)
    return np.array(states), np.array(logits)


def test_prefill_matches_loop_oracle():
    model = ReferenceNgramModel(vocab_size=64, hidden_size=16, order=3, seed=7)
    tokens = [int(t) for t in np.random.default_rng(1).integers(0, 64, 40)]
    states, logits = loop_oracle(model, tokens)
    pre = model.prefill(tokens)
    np.testing.assert_allclose(pre.states, states, atol=1e-12)
    np.testing.assert_allclose(pre.final_step.logits, logits[-1], atol=1e-12)
    np.testing.assert_array_equal(pre.per_position_states, pre.states)


def test_embedding_table_is_seeded_unit_and_frozen():
    a = ReferenceNgramModel(seed=3)
    b = ReferenceNgramModel(seed=3)
    np.testing.assert_array_equal(a.embedding_table, b.embedding_table)
    np.testing.assert_allclose(np.linalg.norm(a.embedding_table, axis=1), 1.0)
    assert a.embedding_table.shape == (256, 32)
    with pytest.raises(ValueError):
        a.embedding_table[0, 0] = 1.0
    assert not np.array_equal(a.embedding_table, ReferenceNgramModel(seed=4).embedding_table)


def test_step_is_bit_identical_to_prefill():
    model = ReferenceNgramModel(seed=2)
    tokens = list(b"Question: where?\nAnswer: here")
    pre = model.prefill(tokens)
    for i in range(1, len(tokens) + 1):
        step = model.step(tokens[:i])
        np.testing.assert_array_equal(step.hidden_state, pre.states[i - 1])
    np.testing.assert_array_equal(model.step(tokens).logits, pre.final_step.logits)


def test_state_depends_only_on_last_m_tokens():
    model = ReferenceNgramModel(seed=0, order=4)
    a = model.step(list(b"xxxxxxabcd"))
    b = model.step(list(b"qwerty uiopabcd"))
    np.testing.assert_array_equal(a.hidden_state, b.hidden_state)
    np.testing.assert_array_equal(a.logits, b.logits)


def test_causality():
    model = ReferenceNgramModel(seed=5)
    tokens = list(b"abcdefghij")
    base = model.prefill(tokens).states
    changed = model.prefill(tokens[:-1] + [ord("Z")]).states
    np.testing.assert_array_equal(base[:-1], changed[:-1])
    assert not np.array_equal(base[-1], changed[-1])


def test_order_one_state_is_embedding_row():
    model = ReferenceNgramModel(order=1, seed=11)
    step = model.step([1, 2, 42])
    np.testing.assert_allclose(step.hidden_state, model.embedding_table[42], atol=1e-15)


def test_copy_affinity_of_identical_suffixes():
    # Two positions sharing their last m tokens have distance 0; any other
    # suffix is strictly farther.
    model = ReferenceNgramModel(seed=0)
    text = b"the cat sat. the cat ran."
    states = model.prefill(list(text)).states
    i, j = 6, 19  # both windows read " cat"
    assert text[i - 3 : i + 1] == text[j - 3 : j + 1] == b" cat"
    assert np.linalg.norm(states[i] - states[j]) == 0.0
    others = [k for k in range(len(states)) if k not in (i, j)]
    assert min(np.linalg.norm(states[k] - states[i]) for k in others) > 0.0


def test_state_norm_scales_reported_state_only():
    plain = ReferenceNgramModel(seed=1)
    scaled = ReferenceNgramModel(seed=1, state_norm=8.0)
    tokens = list(b"scale me")
    a, b = plain.prefill(tokens), scaled.prefill(tokens)
    np.testing.assert_allclose(b.states, 8.0 * a.states)
    np.testing.assert_array_equal(b.final_step.logits, a.final_step.logits)
    np.testing.assert_allclose(scaled.step(tokens).hidden_state, 8.0 * plain.step(tokens).hidden_state)


def test_errors():
    model = ReferenceNgramModel()
    with pytest.raises(EmptyPrompt):
        model.prefill([])
    with pytest.raises(EmptyPrompt):
        model.step([])
    with pytest.raises(InvalidToken):
        model.step([1, 256])
    with pytest.raises(InvalidToken):
        model.prefill([-1])
    for kwargs in ({"vocab_size": 1}, {"order": 0}, {"temperature": 0}, {"state_norm": 0}):
        with pytest.raises(ValueError):
            ReferenceNgramModel(**kwargs)


def test_wire_format_round_trip():
    frame = encode_request("step", [1, 2, 3])
    assert int.from_bytes(frame[:4], "little") == len(frame) - 4
    assert decode_request(frame) == ("step", [1, 2, 3])
    with pytest.raises(ValueError):
        encode_request("train", [1])
    with pytest.raises(ValueError):
        decode_request(frame[:-2])

    logits = np.array([0.5, -1.25])
    states = np.array([[1.0, 2.0]])
    got_logits, got_states = decode_response(encode_response(logits, states))
    np.testing.assert_array_equal(got_logits, logits.astype(np.float32))
    np.testing.assert_array_equal(got_states, states.astype(np.float32))


def test_serve_in_process_matches_direct_calls():
    model = ReferenceNgramModel(seed=3)
    tokens = list(b"hello")
    logits, states = decode_response(serve_in_process(model, encode_request("prefill", tokens)))
    pre = model.prefill(tokens)
    np.testing.assert_allclose(logits, pre.final_step.logits, rtol=1e-6)
    assert states.shape == (5, 32)
    logits, states = decode_response(serve_in_process(model, encode_request("step", tokens)))
    assert states.shape == (1, 32)
    np.testing.assert_allclose(states[0], pre.states[-1], rtol=1e-6)
