import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_config
from docsoup.errors import ArityError, ConfigError, DegenerateStateError, IncompatibleStatesError
from docsoup.numerics import grad_check
from docsoup.souping import (
    SoupConfig,
    encode_batch,
    normalize_state,
    pool_layer,
    pool_layer_backward,
    pool_states,
    soup_encode,
)
from docsoup.ssm import ModelState, init_model

FP = b"\x01" * 32


def states_from(arrs, fp=FP):
    return [ModelState([a], fp, 3) for a in arrs]


def layer(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, -1)


def test_average_sum_max_worked_example():
    xs = states_from([layer([1, 2]), layer([3, 6])])
    assert pool_states(xs, SoupConfig("average")).layers[0].ravel().tolist() == [2, 4]
    assert pool_states(xs, SoupConfig("sum")).layers[0].ravel().tolist() == [4, 8]
    assert pool_states(xs, SoupConfig("max")).layers[0].ravel().tolist() == [3, 6]


def test_norm_after_gives_unit_norm():
    out = pool_states(states_from([layer([3, 0]), layer([0, 4])]), SoupConfig("sum", norm_after=True))
    np.testing.assert_allclose(out.layers[0].ravel(), [0.6, 0.8])


def test_norm_before_equalizes_contributions():
    out = pool_states(states_from([layer([100, 0]), layer([0, 1])]), SoupConfig("average", norm_before=True))
    np.testing.assert_allclose(out.layers[0].ravel(), [0.5, 0.5])


def test_zero_state_cannot_be_normalized():
    with pytest.raises(DegenerateStateError):
        pool_states(states_from([layer([0, 0]), layer([1, 0])]), SoupConfig(norm_before=True))
    with pytest.raises(DegenerateStateError):
        pool_states(states_from([layer([1, 0]), layer([-1, 0])]), SoupConfig("sum", norm_after=True))


def test_token_counts_add_up():
    assert pool_states(states_from([layer([1.0])] * 4), SoupConfig()).source_token_count == 12


def test_arity_and_compatibility_errors():
    with pytest.raises(ArityError):
        pool_states([], SoupConfig())
    with pytest.raises(IncompatibleStatesError):
        pool_states(states_from([layer([1.0])]) + states_from([layer([1.0])], fp=b"\x02" * 32), SoupConfig())
    with pytest.raises(IncompatibleStatesError):
        pool_states(states_from([layer([1.0]), layer([1.0, 2.0])]), SoupConfig())


def test_soup_config_json():
    cfg = SoupConfig("max", True, False)
    assert SoupConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError, match="norm_middle"):
        SoupConfig.from_json('{"op": "sum", "norm_middle": true}')
    with pytest.raises(ConfigError):
        SoupConfig("median")
    with pytest.raises(ConfigError):
        SoupConfig.from_json("{nope")


finite = st.floats(-10, 10, allow_nan=False, width=32)
stacks = st.integers(1, 5).flatmap(lambda k: arrays(np.float32, (k, 2, 3, 4), elements=finite))
configs = st.builds(SoupConfig, st.sampled_from(["average", "sum", "max"]), st.booleans(), st.booleans())


@settings(max_examples=60, deadline=None)
@given(stacks, configs, st.randoms())
def test_pooling_ignores_input_order(xs, cfg, rnd):
    if (cfg.norm_before or cfg.norm_after) and not np.all(np.abs(xs).reshape(len(xs), -1).max(1) > 1e-3):
        return
    states = states_from(list(xs))
    shuffled = states[:]
    rnd.shuffle(shuffled)
    try:
        a = pool_states(states, cfg).layers[0]
    except DegenerateStateError:
        return
    b = pool_states(shuffled, cfg).layers[0]
    assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(stacks)
def test_sum_is_k_times_average(xs):
    k = len(xs)
    s = pool_states(states_from(list(xs)), SoupConfig("sum")).layers[0]
    a = pool_states(states_from(list(xs)), SoupConfig("average")).layers[0]
    np.testing.assert_allclose(s, k * a, atol=1e-4, rtol=1e-5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, (2, 3, 4), elements=finite))
def test_single_state_and_max_idempotence(x):
    (s,) = states_from([x])
    for op in ("average", "sum", "max"):
        assert np.array_equal(pool_states([s], SoupConfig(op)).layers[0], x)
    assert np.array_equal(pool_states([s, s, s], SoupConfig("max")).layers[0], x)


@settings(max_examples=40, deadline=None)
@given(stacks, st.sampled_from(["average", "sum", "max"]))
def test_norm_after_output_is_unit(xs, op):
    try:
        out = pool_states(states_from(list(xs)), SoupConfig(op, norm_after=True)).layers[0]
    except DegenerateStateError:
        return
    assert abs(np.linalg.norm(out.astype(np.float64)) - 1.0) <= 1e-6


@pytest.mark.parametrize("cfg", [SoupConfig(op, b, a) for op in ("average", "sum", "max") for b in (False, True) for a in (False, True)],
                         ids=str)
def test_pool_layer_backward(cfg, rng):
    xs = rng.standard_normal((3, 2, 2, 3))
    w = rng.standard_normal((2, 2, 3))
    pooled, cache = pool_layer(xs, cfg)
    dxs = pool_layer_backward(w, cache)
    f = lambda: float(np.sum(pool_layer(xs, cfg)[0] * w))
    assert grad_check(f, [xs], [dxs], n_coords=30) < 1e-5


def test_normalize_state_per_layer():
    s = ModelState([layer([3, 4]), layer([0, 2])], FP, 1)
    out = normalize_state(s)
    assert [float(np.linalg.norm(x)) for x in out.layers] == [1.0, 1.0]


def test_encode_batch_matches_one_by_one(rng):
    m = init_model(tiny_config())
    docs = [rng.integers(3, 24, n) for n in (4, 11, 7)]
    batched = encode_batch(m, docs)
    for d, s in zip(docs, batched):
        single = m.encode(d)
        assert s.source_token_count == len(d)
        for a, b in zip(s.layers, single.layers):
            np.testing.assert_allclose(a, b, atol=1e-6)
    pooled = soup_encode(m, docs, SoupConfig())
    np.testing.assert_allclose(pooled.layers[1], np.mean([s.layers[1] for s in batched], axis=0), atol=1e-7)
