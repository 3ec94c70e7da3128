"""Acceptance criteria, each at its stated tolerance.

The training-based criteria share models through a module-level cache, so the
whole file runs each training configuration once. A summary line per criterion
is printed at the end of the session.
"""

import functools
import itertools
import time

import numpy as np
import pytest

from docsoup.data import VOCAB, format_input, gen_niah, make_dataset
from docsoup.evaluation import evaluate, exact_match, normalize_answer, token_f1
from docsoup.numerics import cross_entropy, cross_entropy_backward, grad_check
from docsoup.souping import SoupConfig, pool_states
from docsoup.ssm import ModelConfig, ModelState, init_model
from docsoup.store import StateCacheRecord, bench_latency, dump_state, parse_state
from docsoup.training import TrainConfig, soup_loss, train
from docsoup.errors import FormatError

crit = pytest.mark.criterion
TEST_N = 200
TRAIN = dict(batch_size=16, grad_accum_steps=1, lr_max=2e-3)


@functools.lru_cache(maxsize=None)
def trained(task, segments, n, mode, op="average", pairs=32):
    model = init_model(ModelConfig(vocab_size=len(VOCAB)))
    cfg = TrainConfig(mode=mode, soup=SoupConfig(op), **TRAIN)
    t0 = time.perf_counter()
    train(model, make_dataset(task, n, 1, segments, pairs), cfg, log_every=0)
    return model, time.perf_counter() - t0


def score(model, task, segments, test_segments, mode="soup", op="average", pairs=32):
    exs = make_dataset(task, TEST_N, 999, segments, pairs)
    return evaluate(model, exs, task, segments, test_segments, mode=mode, soup=SoupConfig(op)).em


# ---------------------------------------------------------------------------
# 1


@crit(1, "full-model gradients match central differences (rel err <= 1e-4)")
def test_gradient_correctness(record_property):
    t0 = time.perf_counter()
    cfg = ModelConfig(vocab_size=16, n_layers=2, d_model=8, d_inner=8, d_state=4, n_heads=2, seed=3)
    m = init_model(cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    toks = rng.integers(1, 16, (2, 12))
    toks[1, :3] = 0
    tgt = rng.integers(1, 16, toks.shape)
    mask = toks != 0
    f = lambda: float(cross_entropy(m.run(toks)[0], tgt, mask)[0])
    m.zero_grad()
    lg, _, cache = m.run(toks, keep_cache=True)
    m.backward(cache, cross_entropy_backward(cross_entropy(lg, tgt, mask)[1]))
    worst = max(grad_check(f, [p.value], [p.grad], n_coords=40) for p in m.params)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {worst:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-4 and elapsed < 120


# ---------------------------------------------------------------------------
# 2


@crit(2, "document checkpointing gradients equal direct gradients")
@pytest.mark.parametrize("k", [2, 4, 8])
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)], ids=["f64", "f32"])
def test_checkpointing_equivalence(k, dtype, tol, record_property):
    m = init_model(ModelConfig(vocab_size=len(VOCAB), n_layers=2, d_model=16, d_inner=16, d_state=8, n_heads=2), dtype=dtype)
    fxs = [format_input(gen_niah(2 * k, k, s), soup=True) for s in range(2)]

    def grads(checkpoint):
        m.zero_grad()
        soup_loss(m, fxs, SoupConfig(), checkpoint=checkpoint)
        return [p.grad.copy() for p in m.params]

    diff = max(float(np.abs(a - b).max()) for a, b in zip(grads(False), grads(True)))
    record_property("detail", f"k={k} {np.dtype(dtype).name} max diff {diff:.1e}")
    assert diff <= tol


# ---------------------------------------------------------------------------
# 3


def _states(rng, k, fp=b"\x00" * 32):
    return [ModelState([rng.standard_normal((2, 4, 3)).astype(np.float32) for _ in range(2)], fp, 5) for _ in range(k)]


@crit(3, "pooling algebra")
def test_pooling_algebra():
    rng = np.random.default_rng(0)
    for cfg in (SoupConfig(op, b, a) for op in ("average", "sum", "max") for b in (False, True) for a in (False, True)):
        xs = _states(rng, 3)
        ref = pool_states(xs, cfg)
        for perm in itertools.permutations(xs):
            out = pool_states(list(perm), cfg)
            assert all(np.abs(a - b).max() <= 1e-6 for a, b in zip(out.layers, ref.layers))
        if cfg.norm_after:
            assert all(abs(np.linalg.norm(x.astype(np.float64)) - 1) <= 1e-6 for x in ref.layers)
    for k in (1, 2, 5, 9):
        xs = _states(rng, k)
        s, a = pool_states(xs, SoupConfig("sum")), pool_states(xs, SoupConfig("average"))
        assert all(np.abs(x - k * y).max() <= 1e-6 * max(1, np.abs(x).max()) for x, y in zip(s.layers, a.layers))
    (one,) = _states(rng, 1)
    for op in ("average", "sum", "max"):
        assert all(np.array_equal(x, y) for x, y in zip(pool_states([one], SoupConfig(op)).layers, one.layers))
    assert all(np.array_equal(x, y) for x, y in zip(pool_states([one] * 4, SoupConfig("max")).layers, one.layers))


# ---------------------------------------------------------------------------
# 4


@crit(4, "decode(q, encode(d)) equals the joint forward tail (50 cases, 1e-5)")
def test_split_encode_injection(record_property):
    rng = np.random.default_rng(0)
    m = init_model(ModelConfig(vocab_size=len(VOCAB)))
    worst = 0.0
    for _ in range(50):
        d = rng.integers(3, len(VOCAB), rng.integers(1, 200))
        q = rng.integers(3, len(VOCAB), rng.integers(1, 20))
        tail = m.forward(np.concatenate([d, q]))[-len(q):]
        worst = max(worst, float(np.abs(m.decode(q, m.encode(d)) - tail).max()))
    record_property("detail", f"max abs diff {worst:.1e}")
    assert worst <= 1e-5


# ---------------------------------------------------------------------------
# 5


@crit(5, "soup finetuning unlocks soupability on niah(32 pairs, 4 segments)")
def test_finetuning_unlocks_soupability(record_property):
    untrained = score(init_model(ModelConfig(vocab_size=len(VOCAB))), "niah", 4, 4)
    full, t_full = trained("niah", 4, 50_000, "soup_full")
    dec, t_dec = trained("niah", 4, 50_000, "soup_decoder_only")
    em_full, em_dec = score(full, "niah", 4, 4), score(dec, "niah", 4, 4)
    record_property("detail", f"untrained {untrained:.1f}, decoder-only {em_dec:.1f}, full {em_full:.1f} EM; "
                              f"train {t_full + t_dec:.0f}s")
    assert untrained < 5
    assert t_full + t_dec <= 3600
    assert untrained < em_dec < em_full
    assert em_full >= 90


# ---------------------------------------------------------------------------
# 6


@crit(6, "training on 8 segments generalizes to 16 better than training on 2 (>= 20 EM)")
def test_segment_generalization(record_property):
    m8, _ = trained("niah", 8, 16_000, "soup_full")
    m2, _ = trained("niah", 2, 16_000, "soup_full")
    em8, em2 = score(m8, "niah", 8, 16), score(m2, "niah", 2, 16)
    record_property("detail", f"train-8 {em8:.1f} vs train-2 {em2:.1f} EM at 16")
    assert em8 - em2 >= 20


# ---------------------------------------------------------------------------
# 7


@crit(7, "average >= sum when testing at twice the training soup size")
def test_average_beats_sum_when_wide(record_property):
    avg, _ = trained("singlehop", 5, 16_000, "soup_full", "average")
    sm, _ = trained("singlehop", 5, 16_000, "soup_full", "sum")
    em_avg = score(avg, "singlehop", 5, 10, op="average")
    em_sum = score(sm, "singlehop", 5, 10, op="sum")
    record_property("detail", f"average {em_avg:.1f} vs sum {em_sum:.1f} EM at 10 docs")
    assert em_avg >= em_sum


# ---------------------------------------------------------------------------
# 8


@crit(8, "soup within 10 EM of concat on multihop (2 gold + 3 distractors)")
def test_soup_close_to_concat(record_property):
    soup, _ = trained("multihop", 5, 16_000, "soup_full")
    cat, _ = trained("multihop", 5, 16_000, "concat")
    em_soup = score(soup, "multihop", 5, 5)
    em_cat = score(cat, "multihop", 5, 5, mode="concat")
    record_property("detail", f"soup {em_soup:.1f} vs concat {em_cat:.1f} EM")
    assert abs(em_soup - em_cat) <= 10


# ---------------------------------------------------------------------------
# 9


@crit(9, "cached-state query latency is flat while concat grows")
def test_caching_latency(record_property):
    m = init_model(ModelConfig(vocab_size=len(VOCAB)))
    rows = bench_latency(m, [512, 1024, 2048, 4096, 8192, 16384], trials=5)
    cached = [r["cached_ms"] for r in rows]
    speed = [r["speedup"] for r in rows]
    record_property("detail", "speedup " + " ".join(f"{s:.1f}" for s in speed)
                    + f"; cached {min(cached):.2f}-{max(cached):.2f} ms")
    assert max(cached) <= 2 * min(cached)
    assert rows[-1]["concat_ms"] >= 4 * rows[-1]["cached_ms"]
    assert all(b >= a for a, b in zip(speed, speed[1:]))


# ---------------------------------------------------------------------------
# 10


@crit(10, "metric suites, bit-exact state files, corrupt files rejected")
def test_metrics_and_state_files():
    assert token_f1("the blue red car", ["blue car"]) == pytest.approx(0.8, abs=0)
    assert normalize_answer("  The  Quick, brown FOX! ") == "quick brown fox"
    assert exact_match("An apple.", ["apple"]) == 1 and exact_match("apples", ["apple"]) == 0
    assert token_f1("", [""]) == 1.0 and token_f1("a", ["b"]) == 0.0
    m = init_model(ModelConfig(vocab_size=len(VOCAB)))
    rec = StateCacheRecord.from_state("doc", m.encode(np.arange(3, 40)))
    data = dump_state(rec)
    back = parse_state(data)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(rec.layers, back.layers))
    assert dump_state(back) == data
    for i in (0, 10, len(data) // 2, len(data) - 1):
        bad = bytearray(data)
        bad[i] ^= 0x10
        with pytest.raises(FormatError):
            parse_state(bytes(bad))
    with pytest.raises(FormatError):
        parse_state(data[:-9])
