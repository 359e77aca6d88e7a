"""Small double-precision neural kit with hand-written backward passes.

Batched primitives operate on ``(B, dim)`` arrays and return a cache that the
matching ``*_backward`` function consumes. The single-example helpers
(``lstm_step``, ``bilstm_encode``, ``attend``) wrap them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

CHECKPOINT_VERSION = 1
INIT_SCALE = 0.08
FORGET_BIAS = 1.0


class DimensionMismatch(ValueError):
    pass


class EmptySequence(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def _real(x) -> np.ndarray:
    """As a float array, keeping extended precision when it is given."""
    x = np.asarray(x)
    return x if x.dtype in (np.float64, np.longdouble) else x.astype(np.float64)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * _real(x)))


def softmax(logits: np.ndarray, mask: Optional[np.ndarray] = None, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis``; masked-out entries get probability exactly 0."""
    z = _real(logits)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, mask: Optional[np.ndarray] = None, axis: int = -1) -> np.ndarray:
    z = _real(logits)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def cross_entropy(probs: np.ndarray, target: int) -> float:
    """Negative log-likelihood of ``target`` under a probability vector."""
    p = float(probs[target])
    return 0.0 if p == 1.0 else -np.log(p)


# --------------------------------------------------------------------------- LSTM


@dataclass
class LstmParams:
    """Gate weights over ``[x; h]`` in the order input, forget, output, candidate."""

    W: np.ndarray  # (input_dim + hidden_dim, 4 * hidden_dim)
    b: np.ndarray  # (4 * hidden_dim,)

    @property
    def hidden_dim(self) -> int:
        return self.b.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[0] - self.hidden_dim

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, scale: float = INIT_SCALE) -> "LstmParams":
        W = rng.uniform(-scale, scale, size=(input_dim + hidden_dim, 4 * hidden_dim))
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim:2 * hidden_dim] = FORGET_BIAS
        return cls(W, b)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmParams":
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim:2 * hidden_dim] = FORGET_BIAS
        return cls(np.zeros((input_dim + hidden_dim, 4 * hidden_dim)), b)


def lstm_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    H = b.shape[0] // 4
    if x.shape[-1] + h.shape[-1] != W.shape[0] or h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionMismatch(f"lstm: x {x.shape}, h {h.shape}, c {c.shape} vs W {W.shape}")
    z = np.concatenate([x, h], axis=-1)
    a = z @ W + b
    gates = sigmoid(a[..., :3 * H])
    i, f, o = gates[..., :H], gates[..., H:2 * H], gates[..., 2 * H:]
    g = np.tanh(a[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (z, i, f, o, g, c, tc)


def lstm_backward(W: np.ndarray, cache, dh: np.ndarray, dc: np.ndarray, dW: np.ndarray, db: np.ndarray):
    """Accumulate into ``dW``/``db``; return (dx, dh_prev, dc_prev)."""
    z, i, f, o, g, c_prev, tc = cache
    dc_tot = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate(
        [
            dc_tot * g * i * (1.0 - i),
            dc_tot * c_prev * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc_tot * i * (1.0 - g * g),
        ],
        axis=-1,
    )
    dW += z.T @ da
    db += da.sum(axis=0)
    dz = da @ W.T
    n_in = W.shape[0] - i.shape[-1]
    return dz[:, :n_in], dz[:, n_in:], dc_tot * f


def lstm_step(params: LstmParams, x, h_prev, c_prev) -> Tuple[np.ndarray, np.ndarray]:
    x, h_prev, c_prev = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (x, h_prev, c_prev))
    h, c, _ = lstm_forward(params.W, params.b, x, h_prev, c_prev)
    return h[0], c[0]


def lstm_sequence_forward(W, b, xs: np.ndarray):
    """Run over ``xs`` of shape (B, L, in) from zero state; returns (B, L, H) and caches."""
    B, L, _ = xs.shape
    Hd = b.shape[0] // 4
    h = np.zeros((B, Hd))
    c = np.zeros((B, Hd))
    out = np.zeros((B, L, Hd))
    caches = []
    for t in range(L):
        h, c, cache = lstm_forward(W, b, xs[:, t], h, c)
        out[:, t] = h
        caches.append(cache)
    return out, caches


def lstm_sequence_backward(W, caches, dout: np.ndarray, dW, db) -> np.ndarray:
    B, L, Hd = dout.shape
    dh = np.zeros((B, Hd))
    dc = np.zeros((B, Hd))
    dxs = None
    for t in reversed(range(L)):
        dx, dh, dc = lstm_backward(W, caches[t], dout[:, t] + dh, dc, dW, db)
        if dxs is None:
            dxs = np.zeros((B, L, dx.shape[-1]))
        dxs[:, t] = dx
    return dxs


def reverse_index(lengths: np.ndarray, L: int) -> np.ndarray:
    """Per-row index that reverses the first ``lengths[b]`` positions in place."""
    idx = np.tile(np.arange(L), (len(lengths), 1))
    for bi, n in enumerate(lengths):
        idx[bi, :n] = np.arange(n - 1, -1, -1)
    return idx


def bilstm_forward(fwd: LstmParams, bwd: LstmParams, xs: np.ndarray, lengths: np.ndarray):
    """Batched BiLSTM over right-padded ``xs``; rows past a length are zeroed."""
    B, L, _ = xs.shape
    mask = np.arange(L)[None, :] < lengths[:, None]
    rev = reverse_index(lengths, L)
    rows = np.arange(B)[:, None]
    hf, cf = lstm_sequence_forward(fwd.W, fwd.b, xs)
    hb_rev, cb = lstm_sequence_forward(bwd.W, bwd.b, xs[rows, rev])
    hb = np.zeros_like(hb_rev)
    hb[rows, rev] = hb_rev
    H = np.concatenate([hf, hb], axis=-1) * mask[..., None]
    return H, mask, (cf, cb, rev, mask)


def bilstm_backward(fwd: LstmParams, bwd: LstmParams, cache, dH: np.ndarray, grads_fwd, grads_bwd) -> np.ndarray:
    cf, cb, rev, mask = cache
    B = dH.shape[0]
    Hd = fwd.hidden_dim
    rows = np.arange(B)[:, None]
    dH = dH * mask[..., None]
    dxs = lstm_sequence_backward(fwd.W, cf, dH[..., :Hd], *grads_fwd)
    dhb_rev = dH[..., Hd:][rows, rev]
    dxs_rev = lstm_sequence_backward(bwd.W, cb, dhb_rev, *grads_bwd)
    dxs_b = np.zeros_like(dxs_rev)
    dxs_b[rows, rev] = dxs_rev
    return dxs + dxs_b


def bilstm_encode(params_fwd: LstmParams, params_bwd: LstmParams, sequence: Sequence) -> np.ndarray:
    """Row i is [forward state at i ; backward state at i]."""
    if len(sequence) == 0:
        raise EmptySequence("bilstm_encode needs at least one input vector")
    xs = np.asarray(sequence, dtype=np.float64)[None]
    if xs.shape[-1] != params_fwd.input_dim or xs.shape[-1] != params_bwd.input_dim:
        raise DimensionMismatch(f"input dim {xs.shape[-1]} vs LSTM input dims")
    H, _, _ = bilstm_forward(params_fwd, params_bwd, xs, np.array([xs.shape[1]]))
    return H[0]


# ---------------------------------------------------------------------- attention


def attend_forward(H: np.ndarray, mask: np.ndarray, q: np.ndarray):
    """Scaled dot-product readout: weights = softmax(H q / sqrt(d)), x = weights^T H."""
    d = H.shape[-1]
    if q.shape[-1] != d:
        raise DimensionMismatch(f"query dim {q.shape[-1]} != memory dim {d}")
    scale = 1.0 / np.sqrt(d)
    logits = np.einsum("bld,bd->bl", H, q) * scale
    w = softmax(logits, mask)
    x = np.einsum("bl,bld->bd", w, H)
    return x, w, (H, q, w, scale)


def attend_backward(cache, dx: np.ndarray):
    """Return (dH, dq)."""
    H, q, w, scale = cache
    dw = np.einsum("bld,bd->bl", H, dx)
    ds = w * (dw - np.sum(w * dw, axis=-1, keepdims=True))
    dH = w[..., None] * dx[:, None, :] + ds[..., None] * q[:, None, :] * scale
    dq = np.einsum("bl,bld->bd", ds, H) * scale
    return dH, dq


def attend(H, h) -> Tuple[np.ndarray, np.ndarray]:
    H = np.asarray(H, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] == 0:
        raise DimensionMismatch("attend needs a non-empty 2-D memory")
    x, w, _ = attend_forward(H[None], np.ones((1, H.shape[0]), dtype=bool), h[None])
    return x[0], w[0]


# ---------------------------------------------------------------- grad checking


def _relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    loss_fn: Callable[[Dict[str, np.ndarray]], Union[float, Tuple[float, Dict[str, np.ndarray]]]],
    params: Dict[str, np.ndarray],
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
    analytic: Optional[Dict[str, np.ndarray]] = None,
    floor: float = 1e-6,
    extended: bool = False,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns the loss, or ``(loss, grads)``. Coordinates are
    a fixed random sample (every tensor gets at least one). The denominator is
    floored at ``floor`` so that exactly-zero gradients compare absolutely.

    The analytic gradient is always taken in double precision. With
    ``extended=True`` the finite differences are evaluated on an
    extended-precision copy of the parameters, which removes the ~1e-10
    roundoff floor of double-precision differences on losses of order one;
    ``loss_fn`` must then preserve its input dtype.
    """

    def evaluate(p):
        out = loss_fn(p)
        loss, grads = (out if isinstance(out, tuple) else (out, None))
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss is {loss}")
        return loss, grads

    _, grads = evaluate(params)
    if analytic is None:
        analytic = grads
    if analytic is None:
        raise ValueError("no analytic gradient supplied")

    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    rng = np.random.default_rng(seed)
    coords: List[Tuple[str, int]] = [(n, int(rng.integers(params[n].size))) for n in names]
    remaining = max(0, n_coords - len(coords))
    picks = rng.choice(int(sizes.sum()), size=min(remaining, int(sizes.sum())), replace=False)
    offsets = np.cumsum(sizes) - sizes
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((names[k], int(flat - offsets[k])))

    probe = {k: v.astype(np.longdouble) for k, v in params.items()} if extended else params
    worst = 0.0
    for name, idx in coords[:max(n_coords, len(names))]:
        arr = probe[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + eps
        lp, _ = evaluate(probe)
        arr[idx] = orig - eps
        lm, _ = evaluate(probe)
        arr[idx] = orig
        numeric = float((lp - lm) / (2 * eps))
        worst = max(worst, _relative_error(float(analytic[name].reshape(-1)[idx]), numeric, floor))
    return worst


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam step, applied in place; returns (params, state)."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionMismatch(f"{name}: grad {g.shape} vs param {params[name].shape}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -------------------------------------------------------------------- checkpoints


def save_checkpoint(path: Path, params: Dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(meta, version=CHECKPOINT_VERSION, shapes={k: list(v.shape) for k, v in params.items()})
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(header, sort_keys=True)), **params)


def load_checkpoint(path: Path, expected_shapes: Optional[Dict[str, Tuple[int, ...]]] = None):
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {k: np.array(data[k], dtype=np.float64) for k in data.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    for name, shape in meta["shapes"].items():
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"{name}: stored shape {params[name].shape} != header {shape}")
    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            raise CheckpointError(f"tensor names differ: {sorted(set(expected_shapes) ^ set(params))}")
        for name, shape in expected_shapes.items():
            if tuple(params[name].shape) != tuple(shape):
                raise CheckpointError(f"{name}: shape {params[name].shape} != expected {tuple(shape)}")
    return params, meta
