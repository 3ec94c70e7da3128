"""Minimal selective state-space layer stack.

Each layer keeps a per-head matrix state ``S`` of shape ``(d_head, d_state)``
updated by the linear recurrence

    S_t = alpha_t * S_{t-1} + outer(u_t, B_t),     y_t = S_t @ C_t

with ``alpha_t = exp(-dt_t * softplus(a_decay))`` and ``u_t = dt_t * x_t``.
Because the update is linear in ``S``, states from separately encoded
documents can be pooled and injected back as the starting state of a later
pass, which is what the souping code relies on.

The recurrence is evaluated chunk by chunk in its closed (quadratic) form;
``scan_reference`` is the literal per-step loop, kept as a test oracle.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, CorruptionError, StaleStateError, VocabError
from .numerics import (
    Parameter,
    rmsnorm,
    rmsnorm_backward,
    sigmoid,
    silu,
    silu_grad,
    softplus,
)

CHUNK = 64
CKPT_MAGIC = b"SSMCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    d_inner: int = 128
    d_state: int = 32
    n_heads: int = 4
    eps: float = 1e-5
    seed: int = 0
    pad_id: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "d_model", "d_inner", "d_state", "n_heads"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d_inner % self.n_heads:
            raise ConfigError(f"d_inner={self.d_inner} not divisible by n_heads={self.n_heads}")
        if not self.eps >= 0:
            raise ConfigError(f"eps must be >= 0, got {self.eps}")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ConfigError(f"pad_id {self.pad_id} outside vocabulary")

    @property
    def d_head(self):
        return self.d_inner // self.n_heads

    @property
    def state_shape(self):
        return (self.n_heads, self.d_head, self.d_state)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelState:
    """Final recurrent state of every layer after reading some tokens."""

    layers: list
    model_fingerprint: bytes
    source_token_count: int = 0

    def copy(self):
        return ModelState([s.copy() for s in self.layers], self.model_fingerprint, self.source_token_count)

    def __len__(self):
        return len(self.layers)


LAYER_PARAMS = ("norm", "W_in", "W_z", "W_B", "W_C", "W_dt", "b_dt", "a_decay", "W_out")


# ---------------------------------------------------------------------------
# the recurrence


def scan_reference(u, a, Bm, Cm, S0):
    """Step-by-step loop. Shapes: u (B,H,T,P), a (B,H,T), Bm/Cm (B,T,N), S0 (B,H,P,N)."""
    S = S0.copy()
    ys = []
    for t in range(u.shape[2]):
        alpha = np.exp(-a[:, :, t])[..., None, None]
        S = alpha * S + u[:, :, t, :, None] * Bm[:, None, t, None, :]
        ys.append(np.einsum("bhpn,bn->bhp", S, Cm[:, t]))
    return np.stack(ys, axis=2), S


def _chunk_forward(u, a, Bm, Cm, S0):
    dtype = u.dtype
    T = u.shape[2]
    Lc = np.cumsum(a.astype(np.float64), axis=-1)  # (B,H,T)
    diff = Lc[..., :, None] - Lc[..., None, :]  # diff[t, s] = Lc_t - Lc_s
    tri = np.tri(T, dtype=bool)
    M = np.exp(-np.where(tri, diff, np.inf)).astype(dtype)
    e = np.exp(-Lc).astype(dtype)
    w = np.exp(Lc - Lc[..., -1:]).astype(dtype)
    CB = Cm @ np.swapaxes(Bm, -1, -2)  # (B,T,T)
    G = CB[:, None] * M
    Q = Cm[:, None] @ np.swapaxes(S0, -1, -2)  # (B,H,T,P)
    y = G @ u + e[..., None] * Q
    Wu = w[..., None] * u
    ST = e[..., -1, None, None] * S0 + np.swapaxes(Wu, -1, -2) @ Bm[:, None]
    return y, ST, (u, Bm, Cm, S0, M, e, w, CB, G, Q, Wu)


def _chunk_backward(dy, dST, cache):
    u, Bm, Cm, S0, M, e, w, CB, G, Q, Wu = cache
    dG = dy @ np.swapaxes(u, -1, -2)  # (B,H,T,T)
    du = np.swapaxes(G, -1, -2) @ dy
    dWu = Bm[:, None] @ np.swapaxes(dST, -1, -2)  # (B,H,T,P)
    du += w[..., None] * dWu
    dCB = (dG * M).sum(axis=1)
    dC = dCB @ Bm
    dB = np.swapaxes(dCB, -1, -2) @ Cm
    dQ = e[..., None] * dy
    dC += (dQ @ S0).sum(axis=1)
    dS0 = np.swapaxes(dQ, -1, -2) @ Cm[:, None] + e[..., -1, None, None] * dST
    dB += (Wu @ dST).sum(axis=1)

    K = (dG * CB[:, None] * M).astype(np.float64)  # dM * M
    de = (dy * Q).sum(axis=-1).astype(np.float64)
    de[..., -1] += (dST * S0).sum(axis=(-1, -2))
    dw = (dWu * u).sum(axis=-1).astype(np.float64)
    ww = dw * w
    dLc = K.sum(axis=-2) - K.sum(axis=-1) - de * e + ww
    dLc[..., -1] -= ww.sum(axis=-1)
    da = np.cumsum(dLc[..., ::-1], axis=-1)[..., ::-1]
    return du, da.astype(u.dtype), dB, dC, dS0


def scan(u, a, Bm, Cm, S0, keep_cache=False, chunk=CHUNK):
    """Run the recurrence over T steps, returning ``(y, S_T, cache)``."""
    T = u.shape[2]
    if T <= chunk:
        y, S, c = _chunk_forward(u, a, Bm, Cm, S0)
        return y, S, ([c] if keep_cache else None)
    ys, caches = [], []
    S = S0
    for lo in range(0, T, chunk):
        hi = min(lo + chunk, T)
        y, S, c = _chunk_forward(u[:, :, lo:hi], a[:, :, lo:hi], Bm[:, lo:hi], Cm[:, lo:hi], S)
        ys.append(y)
        if keep_cache:
            caches.append(c)
    return np.concatenate(ys, axis=2), S, (caches if keep_cache else None)


def scan_backward(dy, dST, caches, chunk=CHUNK):
    if len(caches) == 1:
        return _chunk_backward(dy, dST, caches[0])
    T = dy.shape[2]
    bounds = [(lo, min(lo + chunk, T)) for lo in range(0, T, chunk)]
    du, da, dB, dC = [], [], [], []
    dS = dST
    for (lo, hi), c in zip(reversed(bounds), reversed(caches)):
        g = _chunk_backward(dy[:, :, lo:hi], dS, c)
        du.append(g[0])
        da.append(g[1])
        dB.append(g[2])
        dC.append(g[3])
        dS = g[4]
    cat = lambda xs, ax: np.concatenate(xs[::-1], axis=ax)
    return cat(du, 2), cat(da, 2), cat(dB, 1), cat(dC, 1), dS


# ---------------------------------------------------------------------------
# one layer


def layer_forward(p, x, m, S0, cfg, keep_cache=False):
    """Pre-norm residual block. ``p`` maps LAYER_PARAMS names to arrays."""
    Bsz, T, _ = x.shape
    H, P = cfg.n_heads, cfg.d_head
    xn, c_norm = rmsnorm(x, p["norm"], cfg.eps)
    xi = xn @ p["W_in"]
    z = xn @ p["W_z"]
    Bm = xn @ p["W_B"]
    Cm = xn @ p["W_C"]
    dt_raw = xn @ p["W_dt"] + p["b_dt"]
    dt = softplus(dt_raw)
    A = softplus(p["a_decay"])
    mdt = dt * m[..., None]  # pads: no decay, no write
    a = (mdt * A).transpose(0, 2, 1)
    xh = xi.reshape(Bsz, T, H, P).transpose(0, 2, 1, 3)
    u = mdt.transpose(0, 2, 1)[..., None] * xh
    y, ST, c_scan = scan(u, a, Bm, Cm, S0, keep_cache)
    y2 = y.transpose(0, 2, 1, 3).reshape(Bsz, T, H * P)
    gz = silu(z)
    o = y2 * gz
    out = x + o @ p["W_out"]
    cache = None
    if keep_cache:
        cache = (xn, c_norm, xh, z, dt_raw, mdt, A, y2, gz, o, c_scan, m)
    return out, ST, cache


def layer_backward(p, dout, dST, cache, cfg):
    xn, c_norm, xh, z, dt_raw, mdt, A, y2, gz, o, c_scan, m = cache
    Bsz, T, D = dout.shape
    H, P = cfg.n_heads, cfg.d_head
    g = {}
    d2 = dout.reshape(-1, D)
    g["W_out"] = o.reshape(-1, o.shape[-1]).T @ d2
    do = dout @ p["W_out"].T
    dy2 = do * gz
    dz = do * y2 * silu_grad(z)
    dy = dy2.reshape(Bsz, T, H, P).transpose(0, 2, 1, 3)
    du, da, dB, dC, dS0 = scan_backward(dy, dST, c_scan)
    da = da.transpose(0, 2, 1)  # (B,T,H)
    dmdt = da * A + (du * xh).sum(axis=-1).transpose(0, 2, 1)
    g["a_decay"] = (da * mdt).sum(axis=(0, 1)) * sigmoid(p["a_decay"])
    dxi = (du * mdt.transpose(0, 2, 1)[..., None]).transpose(0, 2, 1, 3).reshape(Bsz, T, H * P)
    ddt_raw = dmdt * m[..., None] * sigmoid(dt_raw)
    g["b_dt"] = ddt_raw.reshape(-1, H).sum(axis=0)
    xn2 = xn.reshape(-1, D)
    dxn = np.zeros_like(xn)
    for name, dv in (("W_in", dxi), ("W_z", dz), ("W_B", dB), ("W_C", dC), ("W_dt", ddt_raw)):
        dv2 = dv.reshape(-1, dv.shape[-1])
        g[name] = xn2.T @ dv2
        dxn += dv @ p[name].T
    dx, g["norm"] = rmsnorm_backward(dxn, c_norm)
    return dout + dx, dS0, g


# ---------------------------------------------------------------------------
# the model


class ActivationMeter:
    """Counts bytes of forward activations held for a later backward pass."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def hold(self, cache):
        n = _nbytes(cache)
        self.live += n
        self.peak = max(self.peak, self.live)
        return n

    def release(self, n):
        self.live -= n


def _nbytes(obj):
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, (list, tuple)):
        return sum(_nbytes(o) for o in obj)
    if isinstance(obj, dict):
        return sum(_nbytes(o) for o in obj.values())
    return 0


class SSMModel:
    def __init__(self, config: ModelConfig, params: list[Parameter]):
        self.config = config
        self.params = params
        self.by_name = {p.name: p for p in params}
        self.version = 0
        self._fp = None
        self._fp_version = -1

    # -- construction ------------------------------------------------------

    @property
    def dtype(self):
        return self.params[0].value.dtype

    def astype(self, dtype):
        ps = [Parameter(p.name, p.value.astype(dtype)) for p in self.params]
        return SSMModel(self.config, ps)

    def parameters(self):
        return self.params

    def layer(self, l):
        return {k: self.by_name[f"layers.{l}.{k}"].value for k in LAYER_PARAMS}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def bump(self):
        """Mark parameters as changed (invalidates the fingerprint)."""
        self.version += 1

    @property
    def fingerprint(self) -> bytes:
        if self._fp_version != self.version:
            h = hashlib.sha256(self.config.to_json().encode())
            for p in self.params:
                h.update(p.name.encode())
                h.update(np.ascontiguousarray(p.value).tobytes())
            self._fp = h.digest()
            self._fp_version = self.version
        return self._fp

    def zero_state(self, batch=None):
        shape = self.config.state_shape if batch is None else (batch, *self.config.state_shape)
        return [np.zeros(shape, dtype=self.dtype) for _ in range(self.config.n_layers)]

    # -- batched core -------------------------------------------------------

    def run(self, tokens, init=None, keep_cache=False, logits=True, meter=None):
        """Process a ``(B, T)`` token batch from per-layer ``init`` states.

        Returns ``(logits or None, final_states, cache)``.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be (batch, time), got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise VocabError(f"token id outside [0, {cfg.vocab_size})")
        Bsz = tokens.shape[0]
        if init is None:
            init = self.zero_state(Bsz)
        m = (tokens != cfg.pad_id).astype(self.dtype)
        x = self.by_name["embed"].value[tokens]
        states, caches = [], []
        for l in range(cfg.n_layers):
            x, ST, c = layer_forward(self.layer(l), x, m, init[l], cfg, keep_cache)
            states.append(ST)
            caches.append(c)
        out = None
        c_head = None
        if logits:
            xf, c_norm = rmsnorm(x, self.by_name["final_norm"].value, cfg.eps)
            out = xf @ self.by_name["lm_head"].value
            c_head = (xf, c_norm)
        cache = None
        if keep_cache:
            cache = {"tokens": tokens, "layers": caches, "head": c_head}
            if meter is not None:
                cache["held"] = meter.hold(cache)
                cache["meter"] = meter
        return out, states, cache

    def backward(self, cache, dlogits=None, dstates=None):
        """Accumulate parameter grads; return grads w.r.t. the init states."""
        cfg = self.config
        tokens = cache["tokens"]
        Bsz, T = tokens.shape
        D = cfg.d_model
        if dlogits is not None:
            xf, c_norm = cache["head"]
            W = self.by_name["lm_head"]
            W.grad += xf.reshape(-1, D).T @ dlogits.reshape(-1, dlogits.shape[-1])
            dx, dg = rmsnorm_backward(dlogits @ W.value.T, c_norm)
            self.by_name["final_norm"].grad += dg
        else:
            dx = np.zeros((Bsz, T, D), dtype=self.dtype)
        if dstates is None:
            dstates = self.zero_state(Bsz)
        dinit = [None] * cfg.n_layers
        for l in reversed(range(cfg.n_layers)):
            dx, dinit[l], g = layer_backward(self.layer(l), dx, dstates[l], cache["layers"][l], cfg)
            for k, v in g.items():
                self.by_name[f"layers.{l}.{k}"].grad += v
        np.add.at(self.by_name["embed"].grad, tokens.reshape(-1), dx.reshape(-1, D))
        if "meter" in cache:
            cache["meter"].release(cache["held"])
        return dinit

    # -- single-sequence API -------------------------------------------------

    def _check(self, state):
        if state.model_fingerprint != self.fingerprint:
            raise StaleStateError("state was produced by a different model (fingerprint mismatch)")
        if len(state.layers) != self.config.n_layers:
            raise StaleStateError(f"state has {len(state.layers)} layers, model has {self.config.n_layers}")

    def _tokens(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size == 0:
            raise DimensionError("empty token sequence")
        return tokens[None]

    def encode(self, tokens, initial: ModelState | None = None) -> ModelState:
        """Read ``tokens`` starting from ``initial`` (zeros if None); return final states."""
        tok = self._tokens(tokens)
        init = None
        count = 0
        if initial is not None:
            self._check(initial)
            init = [s[None].astype(self.dtype) for s in initial.layers]
            count = initial.source_token_count
        _, states, _ = self.run(tok, init, logits=False)
        n_real = int((tok != self.config.pad_id).sum())
        return ModelState([s[0] for s in states], self.fingerprint, count + n_real)

    def decode(self, tokens, injected: ModelState | None = None):
        """Logits ``(T, V)`` for ``tokens`` read from a copy of the injected state."""
        logits, _ = self.decode_with_state(tokens, injected)
        return logits

    def decode_with_state(self, tokens, injected: ModelState | None = None):
        tok = self._tokens(tokens)
        init = None
        if injected is not None:
            self._check(injected)
            init = [s[None].astype(self.dtype, copy=True) for s in injected.layers]
        logits, states, _ = self.run(tok, init)
        return logits[0], [s[0] for s in states]

    def forward(self, tokens):
        return self.decode(tokens, None)


# ---------------------------------------------------------------------------
# init and checkpoints


def _param_shapes(cfg: ModelConfig):
    D, E, N, H, V = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.n_heads, cfg.vocab_size
    shapes = [("embed", (V, D))]
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        shapes += [
            (pre + "norm", (D,)),
            (pre + "W_in", (D, E)),
            (pre + "W_z", (D, E)),
            (pre + "W_B", (D, N)),
            (pre + "W_C", (D, N)),
            (pre + "W_dt", (D, H)),
            (pre + "b_dt", (H,)),
            (pre + "a_decay", (H,)),
            (pre + "W_out", (E, D)),
        ]
    shapes += [("final_norm", (D,)), ("lm_head", (D, V))]
    return shapes


def _inv_softplus(y):
    return np.log(np.expm1(y))


def init_model(config: ModelConfig, dtype=np.float32) -> SSMModel:
    """Deterministic init from ``config.seed``; matrices scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(config.seed)
    params = []
    H = config.n_heads
    for name, shape in _param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("norm", "final_norm"):
            v = np.ones(shape)
        elif leaf == "b_dt":
            v = np.full(shape, _inv_softplus(0.5))
        elif leaf == "a_decay":
            # per-head decay rates spread from slow (long memory) to fast
            v = _inv_softplus(np.geomspace(1 / 32, 1.0, H))
        elif leaf == "embed":
            v = rng.standard_normal(shape)
        else:
            v = rng.standard_normal(shape) / np.sqrt(shape[0])
        params.append(Parameter(name, np.ascontiguousarray(v, dtype=dtype)))
    return SSMModel(config, params)


def save_checkpoint(model: SSMModel, path):
    """Write ``SSMCKPT1 | u32 len | config json | float32 params... | u32 crc32``."""
    cfg = model.config.to_json().encode()
    body = bytearray(CKPT_MAGIC)
    body += struct.pack("<I", len(cfg)) + cfg
    for p in model.params:
        body += np.ascontiguousarray(p.value, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def load_checkpoint(path) -> SSMModel:
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) + 8 or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptionError(f"{path}: checksum mismatch")
    off = len(CKPT_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        cfg = ModelConfig.from_dict(json.loads(data[off : off + n]))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad config block: {exc}") from exc
    off += n
    params = []
    for name, shape in _param_shapes(cfg):
        size = int(np.prod(shape))
        if off + 4 * size > len(data) - 4:
            raise FormatError(f"{path}: truncated parameter block at {name}")
        v = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        params.append(Parameter(name, v))
        off += 4 * size
    if off != len(data) - 4:
        raise FormatError(f"{path}: trailing bytes after parameters")
    return SSMModel(cfg, params)
