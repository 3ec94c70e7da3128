"""Closed-lexicon tokenizer, input formatting and synthetic task generators."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidExampleError, SplitError, VocabError

PAD, EOS, DOC_SEP = "<pad>", "<eos>", "<doc_sep>"
SPECIALS = (PAD, EOS, DOC_SEP)

TEMPLATE_WORDS = (
    "key value of ? what is the where does work works in located workplace"
).split()

POOL_SIZE = 64


def _syllable_words():
    onsets = "bdfgklmnprstvz"
    vowels = "aeiou"
    syll = [c + v for c, v in product(onsets, vowels)]
    rng = random.Random(7)
    words = [a + b for a, b in product(syll, syll)]
    rng.shuffle(words)
    return words


def _build_pools():
    words = iter(_syllable_words())
    take = lambda n: tuple(next(words) for _ in range(n))
    return {
        "key": take(POOL_SIZE),
        "value": take(POOL_SIZE),
        "person": take(POOL_SIZE),
        "company": take(POOL_SIZE),
        "city": take(POOL_SIZE),
    }


POOLS = _build_pools()


class Vocab:
    """Word-level tokenizer over a fixed lexicon; ids 0..2 are reserved."""

    def __init__(self, words=None):
        if words is None:
            words = list(TEMPLATE_WORDS)
            for pool in POOLS.values():
                words.extend(pool)
        self.itos = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        if len(set(self.itos)) != len(self.itos):
            raise VocabError("duplicate words in lexicon")
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    pad_id = 0
    eos_id = 1
    sep_id = 2

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        if not text:
            return []
        try:
            return [self.stoi[w] for w in text.split(" ")]
        except KeyError as exc:
            raise VocabError(f"word not in lexicon: {exc.args[0]!r}") from None

    def decode(self, ids) -> str:
        return " ".join(self.itos[int(i)] for i in ids)


VOCAB = Vocab()


@dataclass
class Example:
    docs: list
    question: str
    answer: str
    gold: list = field(default_factory=list)
    meta: dict | None = None

    def __post_init__(self):
        k = len(self.docs)
        if any(not 0 <= g < k for g in self.gold):
            raise InvalidExampleError(f"gold indices {self.gold} outside 0..{k - 1}")

    def to_json(self):
        d = {"docs": list(self.docs), "question": self.question, "answer": self.answer, "gold": list(self.gold)}
        if self.meta:
            d["meta"] = self.meta
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        try:
            d = json.loads(line)
            return cls(d["docs"], d["question"], d["answer"], d.get("gold", []), d.get("meta"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad dataset record: {exc}") from None


@dataclass
class FormattedExample:
    token_ids: np.ndarray
    segment_spans: list  # (start, end) per document; soup spans include the trailing DOC_SEP
    qa_span: tuple
    answer_mask: np.ndarray
    mode: str

    def segments(self):
        return [self.token_ids[s:e] for s, e in self.segment_spans]

    def qa(self):
        s, e = self.qa_span
        return self.token_ids[s:e], self.answer_mask[s:e]


def format_input(ex: Example, soup: bool, vocab: Vocab = VOCAB) -> FormattedExample:
    """Lay out ``docs, question, answer, <eos>`` as one token stream.

    In soup mode each document is followed by ``<doc_sep>``; in concat mode the
    documents simply run together.
    """
    if not ex.question or not ex.answer:
        raise InvalidExampleError("question and answer must be nonempty")
    ids, spans = [], []
    for doc in ex.docs:
        start = len(ids)
        ids.extend(vocab.encode(doc))
        if soup:
            ids.append(vocab.sep_id)
        spans.append((start, len(ids)))
    qa_start = len(ids)
    ids.extend(vocab.encode(ex.question))
    ans_start = len(ids)
    ids.extend(vocab.encode(ex.answer))
    ids.append(vocab.eos_id)
    mask = np.zeros(len(ids), dtype=bool)
    mask[ans_start:] = True
    return FormattedExample(
        np.asarray(ids, dtype=np.int64), spans, (qa_start, len(ids)), mask, "soup" if soup else "concat"
    )


def format_qa(question: str, answer: str, vocab: Vocab = VOCAB) -> FormattedExample:
    """Question/answer only (zero documents)."""
    return format_input(Example([], question, answer), soup=False, vocab=vocab)


def split_on_sep(token_ids, sep_id=Vocab.sep_id):
    """Split a soup-formatted stream into its document chunks and the trailing QA chunk."""
    out, cur = [], []
    for t in token_ids:
        cur.append(int(t))
        if t == sep_id:
            out.append(cur)
            cur = []
    out.append(cur)
    return out


def split_segments(tokens, n: int) -> list:
    """Contiguous near-equal chunks (earlier chunks take the remainder)."""
    tokens = list(tokens)
    if n < 1 or n > len(tokens):
        raise SplitError(f"cannot split {len(tokens)} tokens into {n} segments")
    q, r = divmod(len(tokens), n)
    out, pos = [], 0
    for i in range(n):
        size = q + (1 if i < r else 0)
        out.append(tokens[pos : pos + size])
        pos += size
    return out


# ---------------------------------------------------------------------------
# generators


def gen_niah(num_pairs: int, num_segments: int, seed: int) -> Example:
    """Key/value lines spread over ``num_segments`` documents; ask for one key.

    The pairs and the queried key depend only on ``(num_pairs, seed)``, so the
    same seed at different segment counts re-partitions identical content.
    """
    if num_segments < 1 or num_pairs < num_segments:
        raise InvalidExampleError(f"need num_pairs >= num_segments >= 1, got {num_pairs}, {num_segments}")
    if num_pairs > POOL_SIZE:
        raise InvalidExampleError(f"at most {POOL_SIZE} pairs")
    rng = random.Random(seed)
    keys = rng.sample(POOLS["key"], num_pairs)
    values = rng.sample(POOLS["value"], num_pairs)
    q = rng.randrange(num_pairs)
    lines = [f"key {k} value {v}" for k, v in zip(keys, values)]
    docs, gold = [], []
    for i, chunk in enumerate(split_segments(range(num_pairs), num_segments)):
        docs.append(" ".join(lines[j] for j in chunk))
        if q in chunk:
            gold.append(i)
    meta = {"task": "niah", "seed": seed, "num_pairs": num_pairs, "num_segments": num_segments}
    return Example(docs, f"value of key {keys[q]} ?", values[q], gold, meta)


def _shuffle_docs(rng, gold_docs, distractors):
    docs = gold_docs + distractors
    order = list(range(len(docs)))
    rng.shuffle(order)
    shuffled = [docs[i] for i in order]
    gold = sorted(order.index(i) for i in range(len(gold_docs)))
    return shuffled, gold


def gen_multihop(n_distractors: int, seed: int) -> Example:
    """Two bridge facts (person -> company -> city) plus same-template distractors."""
    rng = random.Random(seed)
    n_chains = 1 + (n_distractors + 1) // 2
    if n_chains > POOL_SIZE:
        raise InvalidExampleError("too many distractors for the lexicon")
    people = rng.sample(POOLS["person"], n_chains)
    companies = rng.sample(POOLS["company"], n_chains)
    cities = rng.sample(POOLS["city"], n_chains)
    works = lambda i: f"{people[i]} works in {companies[i]}"
    located = lambda i: f"{companies[i]} is located in {cities[i]}"
    gold_docs = [works(0), located(0)]
    distractors = [(works if j % 2 == 0 else located)(1 + j // 2) for j in range(n_distractors)]
    docs, gold = _shuffle_docs(rng, gold_docs, distractors)
    meta = {"task": "multihop", "seed": seed, "n_distractors": n_distractors}
    return Example(docs, f"where is the workplace of {people[0]} located ?", cities[0], gold, meta)


def gen_singlehop(n_distractors: int, seed: int) -> Example:
    """One gold ``works in`` fact among distractor facts about other people."""
    rng = random.Random(seed)
    n = 1 + n_distractors
    if n > POOL_SIZE:
        raise InvalidExampleError("too many distractors for the lexicon")
    people = rng.sample(POOLS["person"], n)
    companies = rng.sample(POOLS["company"], n)
    facts = [f"{p} works in {c}" for p, c in zip(people, companies)]
    docs, gold = _shuffle_docs(rng, facts[:1], facts[1:])
    meta = {"task": "singlehop", "seed": seed, "n_distractors": n_distractors}
    return Example(docs, f"where does {people[0]} work ?", companies[0], gold, meta)


GOLD_COUNT = {"niah": 0, "multihop": 2, "singlehop": 1}
TASKS = tuple(GOLD_COUNT)


def generate(task: str, seed: int, segments: int, num_pairs: int = 32) -> Example:
    """One example of ``task`` with ``segments`` documents in total."""
    if task == "niah":
        return gen_niah(num_pairs, segments, seed)
    if task == "multihop":
        return gen_multihop(segments - 2, seed)
    if task == "singlehop":
        return gen_singlehop(segments - 1, seed)
    raise DataError(f"unknown task {task!r}")


def example_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def make_dataset(task: str, n: int, seed: int, segments: int, num_pairs: int = 32) -> list:
    return [generate(task, example_seed(seed, i), segments, num_pairs) for i in range(n)]


def with_segments(ex: Example, n: int, vocab: Vocab = VOCAB) -> Example:
    """The same example laid out over ``n`` documents.

    Generated examples are regenerated from their recorded seed; anything else
    is re-split evenly at the token level.
    """
    if len(ex.docs) == n:
        return ex
    meta = ex.meta or {}
    task = meta.get("task")
    if task in GOLD_COUNT and "seed" in meta:
        return generate(task, meta["seed"], n, meta.get("num_pairs", 32))
    tokens = [w for d in ex.docs for w in d.split(" ") if d]
    docs = [" ".join(c) for c in split_segments(tokens, n)]
    gold = [i for i, d in enumerate(docs) if ex.answer in d]
    return Example(docs, ex.question, ex.answer, gold)


def write_jsonl(examples, path):
    Path(path).write_text("".join(ex.to_json() + "\n" for ex in examples))


def read_jsonl(path) -> list:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return [Example.from_json(line) for line in lines if line.strip()]
