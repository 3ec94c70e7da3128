"""Pooling of independently encoded document states."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ArityError, ConfigError, DegenerateStateError, IncompatibleStatesError
from .ssm import ModelState, SSMModel

OPS = ("average", "sum", "max")


@dataclass(frozen=True)
class SoupConfig:
    op: str = "average"
    norm_before: bool = False
    norm_after: bool = False

    def __post_init__(self):
        if self.op not in OPS:
            raise ConfigError(f"op must be one of {OPS}, got {self.op!r}")
        for name in ("norm_before", "norm_after"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")

    def to_json(self):
        return json.dumps({"op": self.op, "norm_before": self.norm_before, "norm_after": self.norm_after})

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text) if isinstance(text, str) else dict(text)
        except ValueError as exc:
            raise ConfigError(f"soup config is not valid JSON: {exc}") from None
        unknown = set(d) - {"op", "norm_before", "norm_after"}
        if unknown:
            raise ConfigError(f"unknown soup config key(s): {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# array-level pooling with backward (used by training)


def _unit(x):
    n = float(np.sqrt(np.sum(x * x, dtype=np.float64)))
    if n == 0.0:
        raise DegenerateStateError("cannot normalize a zero-norm layer state")
    return (x / n).astype(x.dtype, copy=False), n


def _unit_backward(dy, y, n):
    return (dy - y * np.sum(dy * y)) / n


def pool_layer(xs, cfg: SoupConfig):
    """Pool a ``(k, ...)`` stack of one layer's states; returns ``(pooled, cache)``."""
    k = xs.shape[0]
    if k == 0:
        raise ArityError("nothing to pool")
    norms = None
    if cfg.norm_before:
        units = [_unit(x) for x in xs]
        xs = np.stack([u for u, _ in units])
        norms = [n for _, n in units]
    arg = None
    if cfg.op == "max":
        arg = np.argmax(xs, axis=0)
        pooled = np.take_along_axis(xs, arg[None], axis=0)[0]
    else:
        pooled = xs[0].copy()
        for x in xs[1:]:
            pooled += x
        if cfg.op == "average":
            pooled /= k
    after = None
    if cfg.norm_after:
        pooled, n = _unit(pooled)
        after = (pooled, n)
    return pooled, (cfg, k, xs, norms, arg, after)


def pool_layer_backward(dp, cache):
    cfg, k, xs, norms, arg, after = cache
    if after is not None:
        dp = _unit_backward(dp, *after)
    if cfg.op == "max":
        dxs = np.zeros_like(xs)
        np.put_along_axis(dxs, arg[None], dp[None], axis=0)
    else:
        scale = 1.0 / k if cfg.op == "average" else 1.0
        dxs = np.broadcast_to(dp * scale, xs.shape).copy()
    if norms is not None:
        dxs = np.stack([_unit_backward(d, u, n) for d, u, n in zip(dxs, xs, norms)])
    return dxs


# ---------------------------------------------------------------------------
# ModelState-level API


def normalize_state(s: ModelState) -> ModelState:
    """Scale each layer's state to unit Frobenius norm."""
    return ModelState([_unit(x)[0] for x in s.layers], s.model_fingerprint, s.source_token_count)


def _digest(s: ModelState):
    h = hashlib.sha1()
    for x in s.layers:
        h.update(np.ascontiguousarray(x).tobytes())
    return h.digest()


def pool_states(states, cfg: SoupConfig) -> ModelState:
    """Pool per layer. Inputs are reduced in a canonical (content-sorted) order,
    so the result does not depend on how the caller ordered them."""
    states = list(states)
    if not states:
        raise ArityError("pool_states needs at least one state")
    fp = states[0].model_fingerprint
    shapes = [x.shape for x in states[0].layers]
    for s in states[1:]:
        if s.model_fingerprint != fp:
            raise IncompatibleStatesError("states come from different models (fingerprint mismatch)")
        if [x.shape for x in s.layers] != shapes:
            raise IncompatibleStatesError("layer state shapes differ")
    states = sorted(states, key=_digest)
    layers = []
    for l in range(len(shapes)):
        pooled, _ = pool_layer(np.stack([s.layers[l] for s in states]), cfg)
        layers.append(pooled)
    return ModelState(layers, fp, sum(s.source_token_count for s in states))


def encode_batch(model: SSMModel, docs) -> list:
    """Encode token sequences independently (one left-padded doc batch)."""
    docs = [np.asarray(d, dtype=np.int64).reshape(-1) for d in docs]
    if not docs or any(d.size == 0 for d in docs):
        raise ArityError("need at least one nonempty document")
    T = max(d.size for d in docs)
    batch = np.full((len(docs), T), model.config.pad_id, dtype=np.int64)
    for i, d in enumerate(docs):
        batch[i, T - d.size :] = d
    _, states, _ = model.run(batch, logits=False)
    fp = model.fingerprint
    pad = model.config.pad_id
    return [
        ModelState([s[i] for s in states], fp, int((d != pad).sum()))
        for i, d in enumerate(docs)
    ]


def soup_encode(model: SSMModel, docs, cfg: SoupConfig) -> ModelState:
    """Encode each document from a zero state and pool the results."""
    return pool_states(encode_batch(model, docs), cfg)
