"""Recurrent and attention layers built on :mod:`lyricgen.tensor`.

All layers work on batched inputs ``(B, d)``; a single unbatched vector
``(d,)`` is also accepted and the result is returned unbatched. Sequences
are passed as a list of per-step tensors or a stacked ``(T, d)`` /
``(B, T, d)`` tensor, with an optional ``(B, T)`` boolean mask marking real
(non-padding) positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

INIT_SCALE = 0.08
FORGET_BIAS = 1.0

Dropout = Callable[[Tensor], Tensor]


def _uniform(rng: np.random.Generator, shape, scale=INIT_SCALE) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


@dataclass
class LSTMCellParams:
    """Weights of one LSTM cell; gates are laid out as (input, forget, cell, output)."""

    W: Tensor  # (d_in + d_h, 4 d_h)
    b: Tensor  # (4 d_h,)

    @property
    def d_in(self) -> int:
        return self.W.shape[0] - self.d_h

    @property
    def d_h(self) -> int:
        return self.b.shape[0] // 4

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> "LSTMCellParams":
        W = _uniform(rng, (d_in + d_h, 4 * d_h))
        b = np.zeros(4 * d_h)
        b[d_h:2 * d_h] = FORGET_BIAS
        return cls(W=W, b=Tensor(b, requires_grad=True))

    def parameters(self) -> dict:
        return {"W": self.W, "b": self.b}


@dataclass
class LSTMState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, d_h: int, batch: int | None = None) -> "LSTMState":
        shape = (d_h,) if batch is None else (batch, d_h)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def lstm_cell_step(params: LSTMCellParams, x: Tensor, prev: LSTMState) -> LSTMState:
    d_h = params.d_h
    if x.shape[-1] != params.d_in:
        raise DimensionError(f"LSTM input width {x.shape[-1]} != cell d_in {params.d_in}")
    if prev.h.shape[-1] != d_h or prev.c.shape != prev.h.shape:
        raise DimensionError(f"LSTM state shapes {prev.h.shape}/{prev.c.shape} vs d_h {d_h}")
    if x.shape[:-1] != prev.h.shape[:-1]:
        raise DimensionError(f"LSTM batch mismatch: input {x.shape}, state {prev.h.shape}")
    xh = T.concat([x, prev.h], axis=-1)
    z = T.matmul(xh, params.W)
    z = T.add(z, T.broadcast_to(params.b, z.shape))
    if z.ndim == 1:
        i, f, g, o = (z[k * d_h:(k + 1) * d_h] for k in range(4))
    else:
        i, f, g, o = (z[..., k * d_h:(k + 1) * d_h] for k in range(4))
    c = T.add(T.mul(T.sigmoid(f), prev.c), T.mul(T.sigmoid(i), T.tanh(g)))
    h = T.mul(T.sigmoid(o), T.tanh(c))
    return LSTMState(h=h, c=c)


def stacked_step(
    cells: Sequence[LSTMCellParams],
    x: Tensor,
    prev: Sequence[LSTMState],
    dropout: Dropout | None = None,
) -> list:
    """One time step through a stack; layer l's output h feeds layer l+1."""
    out = []
    inp = x
    for layer, (cell, state) in enumerate(zip(cells, prev)):
        if dropout is not None and layer > 0:
            inp = dropout(inp)
        new = lstm_cell_step(cell, inp, state)
        out.append(new)
        inp = new.h
    return out


def _blend_states(keep: np.ndarray, new: list, old: Sequence[LSTMState]) -> list:
    return [
        LSTMState(h=T.blend(keep, n.h, o.h), c=T.blend(keep, n.c, o.c))
        for n, o in zip(new, old)
    ]


@dataclass
class EncoderStates:
    """Bidirectional encoder output.

    ``states[t]`` is ``[h_forward_t; h_backward_t]`` from the top layer.
    ``final_forward``/``final_backward`` hold one LSTMState per layer: the
    forward stack after the last real token, the backward stack after
    reading the whole sequence in reverse (i.e. at position 0).
    """

    states: list
    final_forward: list
    final_backward: list
    memory: Tensor  # states stacked on the time axis: (B, T, 2 d_h) or (T, 2 d_h)
    mask: np.ndarray | None = None  # (B, T) or (T,)

    def __len__(self):
        return len(self.states)


def _as_steps(inputs) -> tuple:
    """Normalise a sequence input to (list of (B, d) tensors, was_batched)."""
    if isinstance(inputs, Tensor):
        if inputs.ndim == 2:
            return [T.reshape(inputs[t], (1, inputs.shape[1])) for t in range(inputs.shape[0])], False
        if inputs.ndim == 3:
            return [inputs[:, t, :] for t in range(inputs.shape[1])], True
        raise DimensionError(f"sequence tensor must be 2-D or 3-D, got {inputs.shape}")
    steps = list(inputs)
    if not steps:
        return [], False
    if steps[0].ndim == 1:
        return [T.reshape(s, (1, s.shape[0])) for s in steps], False
    return steps, True


def _unbatch_state(s: LSTMState) -> LSTMState:
    return LSTMState(h=T.reshape(s.h, s.h.shape[1:]), c=T.reshape(s.c, s.c.shape[1:]))


def bilstm_encode(
    fwd: Sequence[LSTMCellParams],
    bwd: Sequence[LSTMCellParams],
    inputs,
    mask: np.ndarray | None = None,
    dropout: Dropout | None = None,
) -> EncoderStates:
    """Run a forward stack left-to-right and a backward stack right-to-left.

    Sequences in a batch are right-padded; ``mask`` (B, T) marks real steps.
    Padding steps leave the recurrent state untouched, so the backward stack
    starts from zeros at each sequence's own last token.
    """
    steps, batched = _as_steps(inputs)
    if not steps:
        raise ContractError("bilstm_encode needs a non-empty input sequence")
    n = len(steps)
    batch = steps[0].shape[0]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(batch, n)
        if not mask[:, 0].all():
            raise ContractError("every sequence in the batch needs at least one real step")
    if dropout is not None:
        steps = [dropout(s) for s in steps]

    d_h = fwd[0].d_h
    f_state = [LSTMState.zeros(d_h, batch) for _ in fwd]
    f_hidden = []
    for t in range(n):
        new = stacked_step(fwd, steps[t], f_state, dropout)
        if mask is not None and not mask[:, t].all():
            new = _blend_states(mask[:, t:t + 1], new, f_state)
        f_state = new
        f_hidden.append(new[-1].h)

    b_state = [LSTMState.zeros(bwd[0].d_h, batch) for _ in bwd]
    b_hidden = [None] * n
    for t in range(n - 1, -1, -1):
        new = stacked_step(bwd, steps[t], b_state, dropout)
        if mask is not None and not mask[:, t].all():
            new = _blend_states(mask[:, t:t + 1], new, b_state)
        b_state = new
        b_hidden[t] = new[-1].h

    states = [T.concat([f_hidden[t], b_hidden[t]], axis=-1) for t in range(n)]
    memory = T.stack(states, axis=1)
    if not batched:
        states = [T.reshape(s, s.shape[1:]) for s in states]
        memory = T.reshape(memory, memory.shape[1:])
        f_state = [_unbatch_state(s) for s in f_state]
        b_state = [_unbatch_state(s) for s in b_state]
        if mask is not None:
            mask = mask[0]
    return EncoderStates(states=states, final_forward=f_state, final_backward=b_state,
                         memory=memory, mask=mask)


# --------------------------------------------------------------------------
# attention


@dataclass
class AdditiveAttentionParams:
    """Score ``e_k = v . tanh(W_query^T s + W_memory^T h_k)``."""

    W_query: Tensor  # (d_h, d_a)
    W_memory: Tensor  # (d_mem, d_a)
    v: Tensor  # (d_a,)

    @classmethod
    def init(cls, d_h: int, d_mem: int, d_a: int, rng: np.random.Generator):
        if d_a <= 0:
            raise ContractError("attention width must be positive")
        return cls(_uniform(rng, (d_h, d_a)), _uniform(rng, (d_mem, d_a)), _uniform(rng, (d_a,)))

    def parameters(self) -> dict:
        return {"W_query": self.W_query, "W_memory": self.W_memory, "v": self.v}


def _as_memory(memory) -> tuple:
    """Return (memory as (B, T, d), was_batched)."""
    if isinstance(memory, Tensor):
        if memory.ndim == 3:
            return memory, True
        if memory.ndim == 2:
            return T.reshape(memory, (1,) + memory.shape), False
        raise DimensionError(f"memory must be 2-D or 3-D, got {memory.shape}")
    items = list(memory)
    if not items:
        raise ContractError("attention over an empty memory")
    if items[0].ndim == 1:
        stacked = T.stack(items, axis=0)
        return T.reshape(stacked, (1,) + stacked.shape), False
    # list of (B, d) tensors
    return T.stack(items, axis=1), True


def project_memory(params: AdditiveAttentionParams, memory) -> Tensor:
    """Precompute ``W_memory^T h_k`` for every memory slot; reused across decoder steps."""
    mem, _ = _as_memory(memory)
    return T.matmul(mem, params.W_memory)


def attention_scores(
    params: AdditiveAttentionParams,
    query: Tensor,
    memory,
    mask: np.ndarray | None = None,
    projected: Tensor | None = None,
) -> Tensor:
    mem, batched = _as_memory(memory)
    if mem.shape[1] == 0:
        raise ContractError("attention over an empty memory")
    q = query if query.ndim == 2 else T.reshape(query, (1, query.shape[0]))
    if q.shape[0] != mem.shape[0]:
        raise DimensionError(f"query batch {q.shape[0]} vs memory batch {mem.shape[0]}")
    if projected is None:
        projected = T.matmul(mem, params.W_memory)
    B, n, d_a = projected.shape
    qp = T.reshape(T.matmul(q, params.W_query), (B, 1, d_a))
    hidden = T.tanh(T.add(projected, T.broadcast_to(qp, (B, n, d_a))))
    scores = T.reshape(T.matmul(hidden, params.v), (B, n))
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(B, n)
        if not keep.all():
            scores = T.mask_fill(scores, keep, -np.inf)
    alpha = T.softmax(scores, axis=-1)
    if not batched and query.ndim == 1:
        alpha = T.reshape(alpha, (n,))
    return alpha


def attention_context(alpha: Tensor, memory) -> Tensor:
    """Weighted sum of memory slots."""
    mem, batched = _as_memory(memory)
    B, n, d = mem.shape
    a = alpha if alpha.ndim == 2 else T.reshape(alpha, (1, alpha.shape[0]))
    if a.shape != (B, n):
        raise DimensionError(f"attention weights {alpha.shape} vs memory length {n}")
    ctx = T.reshape(T.matmul(T.reshape(a, (B, 1, n)), mem), (B, d))
    if alpha.ndim == 1:
        ctx = T.reshape(ctx, (d,))
    return ctx


# --------------------------------------------------------------------------
# projection


@dataclass
class DenseParams:
    W: Tensor  # (d_in, d_out)
    b: Tensor  # (d_out,)

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator):
        return cls(_uniform(rng, (d_in, d_out)), Tensor(np.zeros(d_out), requires_grad=True))

    def parameters(self) -> dict:
        return {"W": self.W, "b": self.b}


def dense(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """Affine map ``x W + b`` (row-vector convention, W is (d_in, d_out))."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    y = T.matmul(x, W)
    return T.add(y, T.broadcast_to(b, y.shape))


@dataclass
class StackParams:
    """Convenience container: a list of cells plus naming for checkpoints."""

    cells: list = field(default_factory=list)

    @classmethod
    def init(cls, d_in: int, d_h: int, layers: int, rng: np.random.Generator):
        cells = [LSTMCellParams.init(d_in if l == 0 else d_h, d_h, rng) for l in range(layers)]
        return cls(cells=cells)

    def parameters(self) -> dict:
        out = {}
        for l, cell in enumerate(self.cells):
            for k, v in cell.parameters().items():
                out[f"layer{l}.{k}"] = v
        return out

    def __iter__(self):
        return iter(self.cells)

    def __len__(self):
        return len(self.cells)

    def __getitem__(self, i):
        return self.cells[i]
