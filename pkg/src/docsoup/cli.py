"""Command-line entry point: ``docsoup <command> ...``.

Exit codes: 0 ok, 2 usage, 3 data, 4 incompatible state, 5 internal.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .data import TASKS, VOCAB, make_dataset, read_jsonl, write_jsonl
from .errors import ConfigError, DataError, SoupError, UsageError
from .evaluation import DecodeConfig, generate, reports_to_csv, run_grid
from .souping import SoupConfig, pool_states
from .ssm import ModelConfig, init_model, load_checkpoint
from .store import StateCacheRecord, StateStore, bench_csv, bench_latency, load_state, save_state
from .training import TrainConfig, train

log = logging.getLogger("docsoup")


# ---------------------------------------------------------------------------
# run manifests


def blob_hash(path) -> str:
    """Git-style content hash (``sha1("blob <size>\\0" + bytes)``)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class RunManifest:
    """Provenance record, written when a command starts and finalized when it ends."""

    def __init__(self, path, command, config, seed=None, fingerprint=None, datasets=()):
        self.path = Path(path)
        self.body = {
            "command": command,
            "version": __version__,
            "config": config,
            "seed": seed,
            "model_fingerprint": fingerprint.hex() if fingerprint else None,
            "datasets": {str(p): blob_hash(p) for p in datasets},
            "started": _now(),
            "finished": None,
        }
        self._write()

    def finish(self, **extra):
        self.body.update(extra)
        self.body["finished"] = _now()
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.body, indent=2, sort_keys=True) + "\n")


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


# ---------------------------------------------------------------------------
# argument helpers


def _int_list(text):
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return out


def _str_list(text):
    out = [x.strip() for x in text.split(",") if x.strip()]
    if not out:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return out


def _soup_config(text):
    return SoupConfig.from_json(text)


def _existing(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such file")
    return p


def _add_decode_flags(p):
    g = p.add_argument_group("decoding")
    g.add_argument("--temperature", type=float, default=0.0, help="sampling temperature; 0 means greedy (default)")
    g.add_argument("--top-p", type=float, default=1.0, help="nucleus mass kept when sampling (default 1.0)")
    g.add_argument("--top-k", type=int, default=0, help="keep only the k most likely tokens; 0 disables (default)")
    g.add_argument("--max-new-tokens", type=int, default=8, help="generation budget (default 8)")
    g.add_argument("--decode-seed", type=int, default=0, help="sampling RNG seed (default 0)")


def _decode_config(args):
    return DecodeConfig(args.temperature, args.top_p, args.top_k, args.max_new_tokens, args.decode_seed)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    out = Path(args.out)
    config = {"task": args.task, "n": args.n, "segments": args.segments, "num_pairs": args.num_pairs}
    man = RunManifest(sidecar(out), "gen-data", config, seed=args.seed)
    examples = make_dataset(args.task, args.n, args.seed, args.segments, args.num_pairs)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(examples, out)
    man.finish(outputs={out.name: blob_hash(out)})


def cmd_train(args):
    cfg = TrainConfig.from_file(_existing(args.config))
    data = _existing(args.data)
    model_cfg = {"vocab_size": len(VOCAB), **cfg.model}
    try:
        mcfg = ModelConfig.from_dict(model_cfg)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None
    model = init_model(mcfg)
    out = Path(args.out)
    man = RunManifest(out / "manifest.json", "train", cfg.to_dict(), cfg.seed, model.fingerprint, [data])
    train(model, read_jsonl(data), cfg, out_dir=out, log_every=args.log_every)
    man.finish(final_fingerprint=model.fingerprint.hex())


def cmd_eval(args):
    data = _existing(args.data)
    examples = read_jsonl(data)
    if not examples:
        raise DataError(f"{data}: no examples")
    task = (examples[0].meta or {}).get("task", "custom")
    train_segments = args.train_segments or len(examples[0].docs)
    model = load_checkpoint(_existing(args.ckpt))
    decode = _decode_config(args)
    config = {
        "mode": args.mode,
        "soup": json.loads(args.soup.to_json()),
        "test_segments": args.test_segments,
        "train_segments": train_segments,
        "decode": vars(decode),
    }
    man = None
    if args.out:
        man = RunManifest(sidecar(args.out), "eval", config, decode.seed, model.fingerprint, [data])
    reports, _ = run_grid({train_segments: model}, task, [train_segments], args.test_segments, examples,
                          args.mode, args.soup, decode)
    text = reports_to_csv(reports)
    if args.out:
        Path(args.out).write_text(text)
        man.finish()
    else:
        sys.stdout.write(text)


def cmd_encode(args):
    model = load_checkpoint(_existing(args.ckpt))
    doc = _existing(args.doc)
    doc_id = args.doc_id or doc.stem
    store = StateStore(args.cache)
    path = store.path(model.fingerprint, doc_id)
    man = RunManifest(sidecar(path), "encode", {"doc_id": doc_id}, None, model.fingerprint, [doc])
    tokens = VOCAB.encode(doc.read_text().strip()) + [VOCAB.sep_id]
    store.put(StateCacheRecord.from_state(doc_id, model.encode(tokens)))
    man.finish()
    print(path)


def _cached_fingerprint(store: StateStore, ids, given):
    if given:
        try:
            return bytes.fromhex(given)
        except ValueError:
            raise UsageError(f"--fingerprint must be hex, got {given!r}") from None
    cands = [d.name for d in store.root.glob("*") if d.is_dir() and all(store.has(bytes.fromhex(d.name), i) for i in ids)]
    if len(cands) != 1:
        what = "no model has" if not cands else "several models have"
        raise DataError(f"{what} all of {ids} cached under {store.root}; pass --fingerprint or --ckpt")
    return bytes.fromhex(cands[0])


def cmd_soup(args):
    from .store import compose

    store = StateStore(args.cache)
    if args.ckpt:
        fp = load_checkpoint(_existing(args.ckpt)).fingerprint
    else:
        fp = _cached_fingerprint(store, args.ids, args.fingerprint)
    out = Path(args.out)
    config = {"ids": args.ids, "soup": json.loads(args.soup.to_json())}
    man = RunManifest(sidecar(out), "soup", config, None, fp)
    pooled = compose(args.ids, args.soup, store, fp)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_state(StateCacheRecord.from_state(args.doc_id, pooled), out)
    man.finish()


def cmd_ask(args):
    model = load_checkpoint(_existing(args.ckpt))
    state = None
    if args.state:
        state = load_state(_existing(args.state)).to_state()
    q = VOCAB.encode(args.question.strip())
    print(generate(model, state, q, _decode_config(args)).text)


def cmd_bench(args):
    model = load_checkpoint(_existing(args.ckpt))
    rows = bench_latency(model, args.lengths, trials=args.trials, seed=args.seed)
    text = bench_csv(rows)
    if args.out:
        man = RunManifest(sidecar(args.out), "bench", {"lengths": args.lengths, "trials": args.trials},
                          args.seed, model.fingerprint)
        Path(args.out).write_text(text)
        man.finish()
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="docsoup", description="Encode documents into SSM states, pool them, and answer from the pool.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic dataset as JSON lines")
    g.add_argument("--task", choices=TASKS, required=True, help="which generator to use")
    g.add_argument("--out", required=True, help="output .jsonl path")
    g.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    g.add_argument("--n", type=int, default=1000, help="number of examples (default 1000)")
    g.add_argument("--segments", type=int, default=2, help="documents per example (default 2)")
    g.add_argument("--num-pairs", type=int, default=32, help="key/value pairs per niah example (default 32)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="finetune a fresh model and save a checkpoint")
    t.add_argument("--config", required=True, help="training config JSON file")
    t.add_argument("--data", required=True, help="training dataset (.jsonl)")
    t.add_argument("--out", required=True, help="output directory for model.ckpt, train_log.csv, manifest.json")
    t.add_argument("--log-every", type=int, default=50, help="log every N updates with -v (default 50)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint; writes an EM/F1 CSV")
    e.add_argument("--ckpt", required=True, help="model checkpoint")
    e.add_argument("--data", required=True, help="evaluation dataset (.jsonl)")
    e.add_argument("--test-segments", type=_int_list, required=True, help="comma-separated soup sizes, e.g. 2,4,8")
    e.add_argument("--soup", type=_soup_config, default=SoupConfig(),
                   help='pooling config JSON, e.g. \'{"op": "average", "norm_before": false, "norm_after": false}\'')
    e.add_argument("--mode", choices=("soup", "concat", "qa_only"), default="soup", help="how documents reach the model (default soup)")
    e.add_argument("--train-segments", type=int, default=None, help="label for the training soup size (default: dataset's)")
    e.add_argument("--out", default=None, help="CSV path (default stdout)")
    _add_decode_flags(e)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("encode", help="encode one document into the state cache")
    c.add_argument("--ckpt", required=True, help="model checkpoint")
    c.add_argument("--doc", required=True, help="plain-text document file")
    c.add_argument("--cache", required=True, help="state cache directory")
    c.add_argument("--doc-id", default=None, help="cache key (default: file stem)")
    c.set_defaults(fn=cmd_encode)

    s = sub.add_parser("soup", help="pool cached document states into one .state file")
    s.add_argument("--cache", required=True, help="state cache directory")
    s.add_argument("--ids", type=_str_list, required=True, help="comma-separated document ids")
    s.add_argument("--soup", type=_soup_config, default=SoupConfig(), help="pooling config JSON")
    s.add_argument("--out", required=True, help="output .state path")
    s.add_argument("--ckpt", default=None, help="model whose cached states to use")
    s.add_argument("--fingerprint", default=None, help="hex model fingerprint, instead of --ckpt")
    s.add_argument("--doc-id", default="soup", help="id recorded in the output file (default soup)")
    s.set_defaults(fn=cmd_soup)

    a = sub.add_parser("ask", help="answer a question from a (pooled) state; prints the answer")
    a.add_argument("--ckpt", required=True, help="model checkpoint")
    a.add_argument("--state", default=None, help=".state file to start from (default: empty state)")
    a.add_argument("--question", required=True, help="question text")
    _add_decode_flags(a)
    a.set_defaults(fn=cmd_ask)

    b = sub.add_parser("bench", help="time cached-state vs from-scratch querying; writes CSV")
    b.add_argument("--ckpt", required=True, help="model checkpoint")
    b.add_argument("--lengths", type=_int_list, required=True, help="comma-separated document lengths in tokens")
    b.add_argument("--trials", type=int, default=5, help="timed trials per cell, after one warmup (default 5)")
    b.add_argument("--seed", type=int, default=0, help="seed for the random documents (default 0)")
    b.add_argument("--out", default=None, help="CSV path (default stdout)")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SoupError as exc:  # raised by a type= converter
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except SoupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {exc!r}", file=sys.stderr)
        return SoupError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
