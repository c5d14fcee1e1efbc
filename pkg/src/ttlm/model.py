"""Single-layer LSTM language model with hand-written backpropagation.

Packed gate layout along the 4H axis is (input, forget, cell candidate, output).
Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import ConfigError

TENSOR_NAMES = ("embedding", "w_input", "w_hidden", "bias_gates", "w_out", "bias_out")


class Dims(NamedTuple):
    vocab: int
    embed: int
    hidden: int


@dataclass
class ModelParams:
    embedding: np.ndarray
    w_input: np.ndarray
    w_hidden: np.ndarray
    bias_gates: np.ndarray
    w_out: np.ndarray | None  # None when the output projection is tied to the embedding
    bias_out: np.ndarray

    def __post_init__(self):
        V, E = self.embedding.shape
        H = self.w_hidden.shape[1]
        expected = {
            "w_input": (4 * H, E),
            "w_hidden": (4 * H, H),
            "bias_gates": (4 * H,),
            "w_out": (V, H),
            "bias_out": (V,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr is None:
                if E != H:
                    raise ConfigError(f"weight tying needs embed size == hidden size, got E={E}, H={H}")
                continue
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def dims(self) -> Dims:
        return Dims(self.embedding.shape[0], self.embedding.shape[1], self.w_hidden.shape[1])

    @property
    def tied(self) -> bool:
        return self.w_out is None

    @property
    def output_weight(self) -> np.ndarray:
        return self.embedding if self.w_out is None else self.w_out

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Trainable tensors in checkpoint order (the tied projection is skipped)."""
        return [(n, getattr(self, n)) for n in TENSOR_NAMES if getattr(self, n) is not None]

    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.named_tensors()]

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def map(self, fn) -> "ModelParams":
        return ModelParams(**{n: None if getattr(self, n) is None else fn(getattr(self, n)) for n in TENSOR_NAMES})

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())


def init_params(vocab_size: int, embed_size: int, hidden_size: int, seed: int = 0, tie_weights: bool = False) -> ModelParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases except forget gate = 1."""
    if min(vocab_size, embed_size, hidden_size) <= 0:
        raise ConfigError(f"dimensions must be positive, got V={vocab_size} E={embed_size} H={hidden_size}")
    if tie_weights and embed_size != hidden_size:
        raise ConfigError(f"weight tying needs embed size == hidden size, got E={embed_size}, H={hidden_size}")
    V, E, H = vocab_size, embed_size, hidden_size
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(H)

    def uniform(*shape):
        return rng.uniform(-bound, bound, size=shape)

    embedding = uniform(V, E)
    w_input = uniform(4 * H, E)
    w_hidden = uniform(4 * H, H)
    w_out = None if tie_weights else uniform(V, H)
    bias_gates = np.zeros(4 * H)
    bias_gates[H:2 * H] = 1.0
    return ModelParams(embedding, w_input, w_hidden, bias_gates, w_out, np.zeros(V))


def zero_params(vocab_size: int, embed_size: int, hidden_size: int) -> ModelParams:
    V, E, H = vocab_size, embed_size, hidden_size
    return ModelParams(np.zeros((V, E)), np.zeros((4 * H, E)), np.zeros((4 * H, H)),
                       np.zeros(4 * H), np.zeros((V, H)), np.zeros(V))


@dataclass
class HiddenState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "HiddenState":
        return cls(np.zeros((batch, hidden)), np.zeros((batch, hidden)))


@dataclass
class TraceEntry:
    inputs: np.ndarray
    preact: np.ndarray
    gates: np.ndarray
    c_prev: np.ndarray
    h_prev: np.ndarray
    c: np.ndarray
    h: np.ndarray
    log_probs: np.ndarray


@dataclass
class ForwardTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, entry: TraceEntry) -> None:
        self.entries.append(entry)

    def reset(self) -> None:
        self.entries.clear()


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_ids(ids: np.ndarray, vocab_size: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id out of range for vocabulary of size {vocab_size}")


def _activate(z: np.ndarray, H: int) -> np.ndarray:
    act = np.empty_like(z)
    act[..., :2 * H] = sigmoid(z[..., :2 * H])
    act[..., 2 * H:3 * H] = np.tanh(z[..., 2 * H:3 * H])
    act[..., 3 * H:] = sigmoid(z[..., 3 * H:])
    return act


def forward_step(params: ModelParams, state: HiddenState, input_ids) -> tuple[np.ndarray, HiddenState, TraceEntry]:
    """Advance every lane by one token; returns ``(logits, new_state, trace_entry)``."""
    input_ids = np.asarray(input_ids, dtype=np.int64).reshape(-1)
    V, _, H = params.dims
    _check_ids(input_ids, V)
    if state.h.shape != (len(input_ids), H) or state.c.shape != state.h.shape:
        raise ValueError(f"state shape {state.h.shape} does not match batch {len(input_ids)} x hidden {H}")
    z = params.embedding[input_ids] @ params.w_input.T + state.h @ params.w_hidden.T + params.bias_gates
    act = _activate(z, H)
    i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
    c = f * state.c + i * g
    h = o * np.tanh(c)
    logits = h @ params.output_weight.T + params.bias_out
    entry = TraceEntry(input_ids, z, act, state.c, state.h, c, h, log_softmax(logits))
    return logits, HiddenState(h, c), entry


def predict_distribution(params: ModelParams, state: HiddenState, input_id: int) -> tuple[np.ndarray, HiddenState]:
    logits, new_state, _ = forward_step(params, state, [input_id])
    return softmax(logits[0]), new_state


class _Window(NamedTuple):
    ids: np.ndarray     # T x B
    act: np.ndarray     # T x B x 4H
    cs: np.ndarray      # T x B x H
    tanh_cs: np.ndarray
    hs: np.ndarray
    h0: np.ndarray
    c0: np.ndarray


@njit(cache=True)
def _sigmoid_scalar(x):
    return 1.0 / (1.0 + np.exp(-x))


@njit(cache=True)
def _recur_forward(xz, w_hT, h0, c0, act, cs, tanh_cs, hs):
    # scalar tanh is slow in numba; tanh(x) = 2 sigmoid(2x) - 1
    T, B, H4 = xz.shape
    H = H4 // 4
    h = h0.copy()
    c = c0.copy()
    z = np.empty((B, H4))
    for t in range(T):
        np.dot(h, w_hT, z)
        for b in range(B):
            for k in range(H):
                i = _sigmoid_scalar(z[b, k] + xz[t, b, k])
                f = _sigmoid_scalar(z[b, H + k] + xz[t, b, H + k])
                g = 2.0 * _sigmoid_scalar(2.0 * (z[b, 2 * H + k] + xz[t, b, 2 * H + k])) - 1.0
                o = _sigmoid_scalar(z[b, 3 * H + k] + xz[t, b, 3 * H + k])
                act[t, b, k] = i
                act[t, b, H + k] = f
                act[t, b, 2 * H + k] = g
                act[t, b, 3 * H + k] = o
                cn = f * c[b, k] + i * g
                tc = 2.0 * _sigmoid_scalar(2.0 * cn) - 1.0
                c[b, k] = cn
                h[b, k] = o * tc
                cs[t, b, k] = cn
                tanh_cs[t, b, k] = tc
                hs[t, b, k] = o * tc


@njit(cache=True)
def _recur_backward(act, cs, tanh_cs, c0, dhs, w_h, dz):
    T, B, H4 = act.shape
    H = H4 // 4
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for k in range(H):
                i = act[t, b, k]
                f = act[t, b, H + k]
                g = act[t, b, 2 * H + k]
                o = act[t, b, 3 * H + k]
                tc = tanh_cs[t, b, k]
                dh = dhs[t, b, k] + dh_next[b, k]
                dc = dc_next[b, k] + dh * o * (1.0 - tc * tc)
                c_prev = cs[t - 1, b, k] if t > 0 else c0[b, k]
                dz[t, b, k] = dc * g * i * (1.0 - i)
                dz[t, b, H + k] = dc * c_prev * f * (1.0 - f)
                dz[t, b, 2 * H + k] = dc * i * (1.0 - g * g)
                dz[t, b, 3 * H + k] = dh * tc * o * (1.0 - o)
                dc_next[b, k] = dc * f
        dh_next = dz[t] @ w_h


def _run(params: ModelParams, inputs: np.ndarray, state: HiddenState) -> _Window:
    """Recurrence over a ``B x T`` block of ids, time-major caches."""
    B, T = inputs.shape
    H = params.dims.hidden
    ids = inputs.T
    if params.dims.vocab <= ids.size:
        # cheaper to project the whole table than every position
        xz = (params.embedding @ params.w_input.T + params.bias_gates)[ids]
    else:
        xz = params.embedding[ids] @ params.w_input.T + params.bias_gates
    act = np.empty((T, B, 4 * H))
    cs = np.empty((T, B, H))
    tanh_cs = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h0 = np.ascontiguousarray(state.h, dtype=np.float64)
    c0 = np.ascontiguousarray(state.c, dtype=np.float64)
    _recur_forward(np.ascontiguousarray(xz), np.ascontiguousarray(params.w_hidden.T), h0, c0, act, cs, tanh_cs, hs)
    return _Window(ids, act, cs, tanh_cs, hs, h0, c0)


def _final_state(win: _Window) -> HiddenState:
    return HiddenState(win.hs[-1].copy(), win.cs[-1].copy())


def score(params: ModelParams, inputs, targets, state: HiddenState | None = None) -> tuple[np.ndarray, HiddenState]:
    """Per-position NLL (nats, ``B x T``) without gradients."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    V, _, H = params.dims
    _check_ids(inputs, V)
    _check_ids(targets, V)
    if state is None:
        state = HiddenState.zeros(inputs.shape[0], H)
    win = _run(params, inputs, state)
    logp = log_softmax(win.hs @ params.output_weight.T + params.bias_out)
    nll = -np.take_along_axis(logp, targets.T[..., None], axis=-1)[..., 0]
    return nll.T, _final_state(win)


def _sum_rows_by_id(rows: np.ndarray, ids: np.ndarray, size: int) -> np.ndarray:
    order = np.argsort(ids, kind="stable")
    uniq, starts = np.unique(ids[order], return_index=True)
    out = np.zeros((size, rows.shape[1]))
    out[uniq] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def loss_and_grad(params: ModelParams, inputs, targets, mask=None, state: HiddenState | None = None):
    """Summed masked NLL and its exact gradient.

    Returns ``(total_nll, token_count, grads, final_state)``. ``grads`` is a
    ModelParams holding d(total_nll)/d(param); the final state is detached.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    if inputs.shape != targets.shape:
        raise ValueError(f"inputs {inputs.shape} and targets {targets.shape} differ")
    mask = np.ones(inputs.shape, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
    if mask.shape != targets.shape:
        raise ValueError(f"mask {mask.shape} does not match targets {targets.shape}")
    V, E, H = params.dims
    _check_ids(inputs, V)
    _check_ids(targets, V)
    B, T = inputs.shape
    if state is None:
        state = HiddenState.zeros(B, H)

    win = _run(params, inputs, state)
    w_o = params.output_weight
    logp = log_softmax(win.hs @ w_o.T + params.bias_out)  # T x B x V
    tgt = targets.T[..., None]
    m = mask.T
    picked = np.take_along_axis(logp, tgt, axis=-1)[..., 0]
    total_nll = float(-np.where(m, picked, 0.0).sum())
    count = int(m.sum())

    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, tgt, np.take_along_axis(dlogits, tgt, axis=-1) - 1.0, axis=-1)
    dlogits *= m[..., None]
    flat_dl = dlogits.reshape(-1, V)
    d_bias_out = flat_dl.sum(axis=0)
    d_w_out = flat_dl.T @ win.hs.reshape(-1, H)
    dhs = dlogits @ w_o

    dz = np.empty((T, B, 4 * H))
    _recur_backward(win.act, win.cs, win.tanh_cs, win.c0, np.ascontiguousarray(dhs), params.w_hidden, dz)

    flat_dz = dz.reshape(-1, 4 * H)
    h_prev = np.concatenate([win.h0[None], win.hs[:-1]], axis=0).reshape(-1, H)
    d_w_hidden = flat_dz.T @ h_prev
    d_bias_gates = flat_dz.sum(axis=0)
    ids = win.ids.reshape(-1)
    if V <= ids.size:
        per_token = _sum_rows_by_id(flat_dz, ids, V)
        d_w_input = per_token.T @ params.embedding
        d_embedding = per_token @ params.w_input
    else:
        d_w_input = flat_dz.T @ params.embedding[ids]
        d_embedding = np.zeros_like(params.embedding)
        np.add.at(d_embedding, ids, flat_dz @ params.w_input)
    if params.tied:
        d_embedding += d_w_out
        d_w_out = None

    grads = ModelParams(d_embedding, d_w_input, d_w_hidden, d_bias_gates, d_w_out, d_bias_out)
    return total_nll, count, grads, _final_state(win)
