"""Finetuning regimes: concat, soup (full / decoder-only) and QA-only."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Example, FormattedExample, format_input, format_qa
from .errors import ConfigError, PipelineError
from .numerics import cross_entropy, cross_entropy_backward
from .souping import SoupConfig, pool_layer, pool_layer_backward
from .ssm import ActivationMeter, SSMModel, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("concat", "soup_full", "soup_decoder_only", "qa_only")


@dataclass
class TrainConfig:
    mode: str = "soup_full"
    soup: SoupConfig = field(default_factory=SoupConfig)
    lr_max: float = 3e-4
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    warmup_frac: float = 0.10
    clip_norm: float = 1.0
    grad_accum_steps: int = 4
    epochs: int = 1
    batch_size: int = 8
    checkpoint_docs: bool = False
    seed: int = 42
    adam_eps: float = 1e-8
    ckpt_every: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.soup, dict):
            self.soup = SoupConfig.from_json(self.soup)
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr_max > 0:
            raise ConfigError("lr_max must be > 0")
        if not 0 < self.warmup_frac < 1:
            raise ConfigError("warmup_frac must be in (0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        for name in ("grad_accum_steps", "epochs", "batch_size"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")

    @property
    def soup_mode(self):
        return self.mode in ("soup_full", "soup_decoder_only")

    def to_dict(self):
        d = asdict(self)
        d["soup"] = json.loads(self.soup.to_json())
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# batching helpers


def pad_batch(seqs, pad_id, left=False):
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        if left:
            out[i, T - len(s) :] = s
        else:
            out[i, : len(s)] = s
    return out


def lm_batch(seqs, answer_masks, pad_id):
    """Right-padded inputs with next-token targets and a loss mask on answer targets."""
    tokens = pad_batch(seqs, pad_id)
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    lmask = np.zeros(tokens.shape, dtype=bool)
    for i, m in enumerate(answer_masks):
        lmask[i, : len(m) - 1] = m[1:]
    return tokens, targets, lmask


# ---------------------------------------------------------------------------
# losses (each also runs backward, scaled by ``scale``)


def joint_loss(model: SSMModel, seqs, answer_masks, scale=1.0, meter=None, backward=True):
    tokens, targets, lmask = lm_batch(seqs, answer_masks, model.config.pad_id)
    logits, _, cache = model.run(tokens, keep_cache=backward, meter=meter)
    loss, ce = cross_entropy(logits, targets, lmask)
    if backward:
        model.backward(cache, cross_entropy_backward(ce, scale))
    return loss


def _encode_docs(model, docs, keep_cache, meter):
    batch = pad_batch(docs, model.config.pad_id, left=True)
    _, states, cache = model.run(batch, keep_cache=keep_cache, logits=False, meter=meter)
    return states, cache


def soup_loss(
    model: SSMModel,
    fxs: list,
    soup: SoupConfig,
    encoder_grad=True,
    checkpoint=False,
    scale=1.0,
    meter=None,
    backward=True,
):
    """Encode every document separately, pool per example, decode the QA segment.

    With ``checkpoint`` the documents are encoded one per example at a time and
    only their final states are kept; the backward pass re-runs each document
    group's forward to get its activations back.
    """
    pad = model.config.pad_id
    L = model.config.n_layers
    segs = [f.segments() for f in fxs]
    keep_doc = backward and encoder_grad and not checkpoint
    # doc_states[i][j] -> list of per-layer arrays for doc j of example i
    doc_states = [[None] * len(s) for s in segs]
    groups = []
    if checkpoint:
        kmax = max((len(s) for s in segs), default=0)
        for j in range(kmax):
            members = [i for i, s in enumerate(segs) if len(s) > j]
            states, _ = _encode_docs(model, [segs[i][j] for i in members], False, None)
            for r, i in enumerate(members):
                doc_states[i][j] = [st[r] for st in states]
            groups.append((j, members))
    else:
        flat = [(i, j) for i, s in enumerate(segs) for j in range(len(s))]
        doc_cache = None
        if flat:
            states, doc_cache = _encode_docs(model, [segs[i][j] for i, j in flat], keep_doc, meter)
            for r, (i, j) in enumerate(flat):
                doc_states[i][j] = [st[r] for st in states]

    init = model.zero_state(len(fxs))
    pool_caches = [[None] * L for _ in fxs]
    for i, ds in enumerate(doc_states):
        if not ds:
            continue
        for l in range(L):
            init[l][i], pool_caches[i][l] = pool_layer(np.stack([d[l] for d in ds]), soup)

    qa = [f.qa() for f in fxs]
    tokens, targets, lmask = lm_batch([t for t, _ in qa], [m for _, m in qa], pad)
    logits, _, cache = model.run(tokens, init, keep_cache=backward, meter=meter)
    loss, ce = cross_entropy(logits, targets, lmask)
    if not backward:
        return loss
    dinit = model.backward(cache, cross_entropy_backward(ce, scale))
    if not encoder_grad:
        return loss

    ddoc = [[[None] * L for _ in s] for s in segs]
    for i, ds in enumerate(doc_states):
        if not ds:
            continue
        for l in range(L):
            dxs = pool_layer_backward(dinit[l][i], pool_caches[i][l])
            for j in range(len(ds)):
                ddoc[i][j][l] = dxs[j]
    if checkpoint:
        for j, members in groups:
            _, gcache = _encode_docs(model, [segs[i][j] for i in members], True, meter)
            dst = [np.stack([ddoc[i][j][l] for i in members]) for l in range(L)]
            model.backward(gcache, None, dst)
    elif doc_cache is not None:
        dst = [np.stack([ddoc[i][j][l] for i, j in flat]) for l in range(L)]
        model.backward(doc_cache, None, dst)
    return loss


def _formatted(batch, mode):
    out = []
    for ex in batch:
        if isinstance(ex, FormattedExample):
            if (ex.mode == "soup") != (mode in ("soup_full", "soup_decoder_only")):
                raise PipelineError(f"{ex.mode}-formatted example fed to {mode} training")
            out.append(ex)
        elif mode == "qa_only":
            out.append(format_qa(ex.question, ex.answer))
        else:
            out.append(format_input(ex, soup=mode != "concat"))
    return out


def train_step(model: SSMModel, batch, cfg: TrainConfig, scale=1.0, meter=None, backward=True) -> float:
    """Loss on one micro-batch; gradients (times ``scale``) are added to the params."""
    if not batch:
        raise PipelineError("empty batch")
    fxs = _formatted(batch, cfg.mode)
    if cfg.mode in ("concat", "qa_only"):
        return joint_loss(model, [f.token_ids for f in fxs], [f.answer_mask for f in fxs], scale, meter, backward)
    return soup_loss(
        model,
        fxs,
        cfg.soup,
        encoder_grad=cfg.mode == "soup_full",
        checkpoint=cfg.checkpoint_docs,
        scale=scale,
        meter=meter,
        backward=backward,
    )


def checkpointed_encode(model: SSMModel, docs, meter=None):
    """Encode docs one at a time keeping only final states.

    Returns ``(states, backward)``; ``backward(dstates)`` re-runs each document's
    forward with activations and pushes ``dstates`` through it.
    """
    finals = []
    for d in docs:
        states, _ = _encode_docs(model, [d], False, None)
        finals.append([s[0] for s in states])

    def backward(dstates):
        dinit = []
        for d, ds in zip(docs, dstates):
            _, cache = _encode_docs(model, [d], True, meter)
            dinit.append(model.backward(cache, None, [g[None] for g in ds]))
        return dinit

    return finals, backward


# ---------------------------------------------------------------------------
# optimizer and schedule


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_max`` then cosine decay to zero at ``total_steps``."""
    warm = cfg.warmup_frac * total_steps
    if step < warm:
        return cfg.lr_max * step / warm
    if total_steps <= warm:
        return cfg.lr_max
    progress = min(1.0, (step - warm) / (total_steps - warm))
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params, cfg: TrainConfig, total_steps: int):
        self.params = list(params)
        self.cfg = cfg
        self.total_steps = total_steps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def global_norm(self):
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params))

    def step(self, step_index: int, lr: float | None = None):
        """Clip, update, zero grads. Returns ``(lr, pre-clip grad norm)``."""
        cfg = self.cfg
        if lr is None:
            lr = cosine_lr(step_index, self.total_steps, cfg)
        norm = self.global_norm()
        clip = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
        b1, b2 = cfg.betas
        self.t += 1
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * clip
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if cfg.weight_decay and p.value.ndim == 2:
                p.value *= 1 - lr * cfg.weight_decay
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
            p.zero_grad()
        return lr, norm


def adamw_step(model: SSMModel, opt: AdamW, step_index: int):
    out = opt.step(step_index)
    model.bump()
    return out


# ---------------------------------------------------------------------------
# loop


def num_updates(n_examples, cfg: TrainConfig):
    micro = math.ceil(n_examples / cfg.batch_size)
    return cfg.epochs * math.ceil(micro / cfg.grad_accum_steps)


def train(model: SSMModel, examples, cfg: TrainConfig, out_dir=None, log_every=50):
    """Run the full schedule over ``examples``; returns the per-update log rows.

    With ``out_dir`` set, writes ``train_log.csv`` and ``model.ckpt`` there.
    """
    examples = list(examples)
    if not examples:
        raise PipelineError("no training examples")
    total = num_updates(len(examples), cfg)
    opt = AdamW(model.parameters(), cfg, total)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "grad_norm"])
    model.zero_grad()
    step = 0
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(len(examples))
            micro = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
            for u in range(0, len(micro), cfg.grad_accum_steps):
                group = micro[u : u + cfg.grad_accum_steps]
                loss = 0.0
                for mb in group:
                    loss += train_step(model, [examples[i] for i in mb], cfg, scale=1.0 / len(group))
                loss /= len(group)
                lr, gnorm = adamw_step(model, opt, step)
                row = (step, lr, loss, gnorm)
                rows.append(row)
                if writer:
                    writer.writerow([step, f"{lr:.6e}", f"{loss:.6f}", f"{gnorm:.6f}"])
                if log_every and step % log_every == 0:
                    log.info("step %d/%d lr %.2e loss %.4f gnorm %.3f", step, total, lr, loss, gnorm)
                step += 1
                if out_dir is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                    save_checkpoint(model, out_dir / "model.ckpt")
    finally:
        if fh:
            fh.close()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.ckpt")
    return rows
