"""Answer generation and extractive-QA scoring."""

from __future__ import annotations

import collections
import csv
import io
import logging
import re
import string
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import VOCAB, Example, Vocab, with_segments
from .errors import DataError, FormatError
from .souping import SoupConfig, encode_batch, pool_states
from .ssm import ModelState, SSMModel, load_checkpoint

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, squeeze whitespace."""
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(pred: str, golds) -> int:
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred_toks, gold_toks):
    if not pred_toks or not gold_toks:
        return float(pred_toks == gold_toks)
    common = collections.Counter(pred_toks) & collections.Counter(gold_toks)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_toks)
    recall = same / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds) -> float:
    pt = normalize_answer(pred).split()
    return max((_f1(pt, normalize_answer(g).split()) for g in golds), default=0.0)


# ---------------------------------------------------------------------------
# decoding


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.0  # <= 0 means greedy
    top_p: float = 1.0
    top_k: int = 0  # 0 disables
    max_new_tokens: int = 8
    seed: int = 0


# sampling settings found best for each method
SOUP_SAMPLING = DecodeConfig(temperature=0.3, top_p=0.5, top_k=20)
CONCAT_SAMPLING = DecodeConfig(temperature=0.5, top_p=0.95, top_k=30)


@dataclass
class Generation:
    text: str
    token_ids: list
    truncated: bool


def _pick(logits, cfg: DecodeConfig, rng):
    if cfg.temperature <= 0 or cfg.top_k == 1:
        return np.argmax(logits, axis=-1)
    out = np.empty(logits.shape[0], dtype=np.int64)
    for i, row in enumerate(logits.astype(np.float64)):
        z = row / cfg.temperature
        order = np.argsort(-z, kind="stable")
        if cfg.top_k:
            order = order[: cfg.top_k]
        zs = z[order]
        p = np.exp(zs - zs.max())
        p /= p.sum()
        if cfg.top_p < 1.0:
            keep = np.searchsorted(np.cumsum(p), cfg.top_p) + 1
            order, p = order[:keep], p[:keep] / p[:keep].sum()
        out[i] = order[rng.choice(len(order), p=p)]
    return out


def generate_batch(model: SSMModel, init, prompts, cfg: DecodeConfig = DecodeConfig(), vocab: Vocab = VOCAB):
    """Continue each prompt from its row of ``init`` (per-layer ``(B, ...)`` arrays or None)."""
    pad = model.config.pad_id
    rng = np.random.default_rng(cfg.seed)
    B = len(prompts)
    lengths = np.array([len(p) for p in prompts])
    if B == 0 or lengths.min() == 0:
        raise DataError("empty prompt")
    tokens = np.full((B, lengths.max()), pad, dtype=np.int64)
    for i, p in enumerate(prompts):
        tokens[i, : len(p)] = p
    if init is not None:
        init = [s.copy() for s in init]
    logits, states, _ = model.run(tokens, init)
    last = logits[np.arange(B), lengths - 1]
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(cfg.max_new_tokens):
        nxt = _pick(last, cfg, rng)
        for i in np.flatnonzero(~done):
            if nxt[i] == vocab.eos_id:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all():
            break
        step = np.where(done, pad, nxt)[:, None]
        logits, states, _ = model.run(step, states)
        last = logits[:, 0]
    return [Generation(vocab.decode(o), o, not d) for o, d in zip(out, done)]


def generate(model: SSMModel, state: ModelState | None, question_tokens, cfg: DecodeConfig = DecodeConfig()):
    """Answer one question from an injected (e.g. pooled or cached) state."""
    init = None
    if state is not None:
        model._check(state)
        init = [s[None] for s in state.layers]
    return generate_batch(model, init, [list(question_tokens)], cfg)[0]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    task: str
    train_segments: int
    test_segments: int
    em: float
    f1: float
    n_examples: int
    decode: str = "greedy"

    @property
    def matched_cell(self):
        return self.train_segments == self.test_segments


CSV_COLUMNS = ["task", "train_segments", "test_segments", "n", "em", "f1", "matched_cell"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.task, r.train_segments, r.test_segments, r.n_examples, f"{r.em:.2f}", f"{r.f1:.2f}", int(r.matched_cell)])
    return buf.getvalue()


def predict(model, examples, mode="soup", soup: SoupConfig = SoupConfig(), decode=DecodeConfig(), batch_size=64, vocab=VOCAB):
    """Generated answer strings, in example order."""
    preds = []
    for lo in range(0, len(examples), batch_size):
        batch = examples[lo : lo + batch_size]
        q = [vocab.encode(ex.question) for ex in batch]
        init = None
        if mode == "soup":
            init = model.zero_state(len(batch))
            for i, ex in enumerate(batch):
                if ex.docs:
                    docs = [vocab.encode(d) + [vocab.sep_id] for d in ex.docs]
                    pooled = pool_states(encode_batch(model, docs), soup)
                    for l, s in enumerate(pooled.layers):
                        init[l][i] = s
            prompts = q
        elif mode == "concat":
            prompts = [[t for d in ex.docs for t in vocab.encode(d)] + qq for ex, qq in zip(batch, q)]
        elif mode == "qa_only":
            prompts = q
        else:
            raise DataError(f"unknown eval mode {mode!r}")
        preds += [g.text for g in generate_batch(model, init, prompts, decode, vocab)]
    return preds


def evaluate(model, examples, task="", train_segments=0, test_segments=None, mode="soup", soup=SoupConfig(), decode=DecodeConfig(), batch_size=64):
    examples = list(examples)
    if test_segments is not None:
        examples = [with_segments(ex, test_segments) for ex in examples]
    else:
        test_segments = len(examples[0].docs) if examples else 0
    preds = predict(model, examples, mode, soup, decode, batch_size)
    ems = [exact_match(p, [ex.answer]) for p, ex in zip(preds, examples)]
    f1s = [token_f1(p, [ex.answer]) for p, ex in zip(preds, examples)]
    n = len(examples)
    label = "greedy" if decode.temperature <= 0 else f"t={decode.temperature},p={decode.top_p},k={decode.top_k}"
    return EvalReport(
        task,
        train_segments,
        test_segments,
        100.0 * float(np.mean(ems)) if n else 0.0,
        100.0 * float(np.mean(f1s)) if n else 0.0,
        n,
        label,
    )


def run_grid(checkpoints, task, train_segments, test_segments, examples, mode="soup", soup=SoupConfig(), decode=DecodeConfig()):
    """Evaluate every (train, test) cell.

    ``checkpoints`` maps a train segment count to a model or checkpoint path;
    absent or unreadable checkpoints are logged and skipped.
    Returns ``(reports, missing_train_segments)``.
    """
    reports, missing = [], []
    for tr in train_segments:
        model = checkpoints.get(tr)
        if isinstance(model, (str, Path)):
            try:
                model = load_checkpoint(model)
            except (OSError, FormatError) as exc:
                log.warning("skipping train_segments=%s: %s", tr, exc)
                model = None
        if model is None:
            missing.append(tr)
            continue
        for te in test_segments:
            reports.append(evaluate(model, examples, task, tr, te, mode, soup, decode))
    return reports, missing
