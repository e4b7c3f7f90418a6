"""Attention encoder-decoder models for structure-conditioned lyrics.

:class:`Seq2Seq` implements both architectures:

* the baseline (``use_structure=False``): a bidirectional content encoder,
  an LSTM decoder fed the aligned content state and an attention context;
* the multi-channel model (``use_structure=True``): a second bidirectional
  encoder over the per-syllable S/B/M/E tokens. Its state at step ``i`` is
  the decoder's aligned input, and attention runs over the structure and
  content states joined on the time axis.

In both, the decoder starts from the content encoder's final backward state
and step ``i`` computes::

    s_i    = LSTM([embed(y_{i-1}); h_i; c_i], s_{i-1})
    logits = [s_i; c_i] W_out + b_out

where ``c_i`` attends over the memory with ``s_{i-1}`` as query.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .corpus import BOS_ID, EOS_ID, PAD_ID
from .errors import ContractError, DimensionError
from .layers import (
    AdditiveAttentionParams,
    DenseParams,
    Dropout,
    EncoderStates,
    LSTMState,
    StackParams,
    attention_context,
    attention_scores,
    bilstm_encode,
    dense,
    project_memory,
    stacked_step,
)
from .melody import validate_structure
from .tensor import Tensor

# structure-token vocabulary
STRUCT_PAD, STRUCT_S, STRUCT_B, STRUCT_M, STRUCT_E, STRUCT_EOS = range(6)
STRUCTURE_IDS = {"S": STRUCT_S, "B": STRUCT_B, "M": STRUCT_M, "E": STRUCT_E}
STRUCTURE_VOCAB = 6


def structure_ids(tokens: str) -> np.ndarray:
    tokens = validate_structure(tokens)
    return np.array([STRUCTURE_IDS[t] for t in tokens], dtype=np.int64)


@dataclass
class ModelConfig:
    vocab_size: int
    embedding: int = 128
    hidden: int = 128
    layers: int = 4
    structure_embedding: int | None = None
    use_structure: bool = True

    def __post_init__(self):
        if self.structure_embedding is None:
            self.structure_embedding = self.embedding
        for name in ("vocab_size", "embedding", "hidden", "layers", "structure_embedding"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"model {name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class DecoderStepInput:
    prev_token_ids: np.ndarray  # (B,)
    aligned_state: Tensor  # (B, 2 d_h)
    prev_state: list  # one LSTMState per decoder layer
    context: Tensor | None = None  # computed from attention when None


@dataclass
class DecodeContext:
    """Everything the decoder needs that does not change between steps."""

    memory: Tensor  # (B, T_mem, 2 d_h)
    memory_mask: np.ndarray  # (B, T_mem)
    projected: Tensor  # memory already multiplied by W_memory
    content: EncoderStates
    structure: EncoderStates | None = None
    structure_mask: np.ndarray | None = None
    content_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def batch(self) -> int:
        return self.memory.shape[0]

    def repeat(self, n: int) -> "DecodeContext":
        """Tile a single-example context to ``n`` rows (inference only)."""
        if self.batch != 1:
            raise ContractError("repeat() expects a single-example context")
        idx = np.zeros(n, dtype=np.int64)

        def rows(x):
            return None if x is None else Tensor(x.data[idx])

        def enc(e):
            if e is None:
                return None
            return EncoderStates(
                states=[rows(s) for s in e.states], final_forward=e.final_forward,
                final_backward=e.final_backward, memory=rows(e.memory),
                mask=None if e.mask is None else e.mask[idx],
            )

        return DecodeContext(
            memory=rows(self.memory), memory_mask=self.memory_mask[idx],
            projected=rows(self.projected), content=enc(self.content),
            structure=enc(self.structure),
            structure_mask=None if self.structure_mask is None else self.structure_mask[idx],
            content_lengths=self.content_lengths[idx],
        )


def _as_batch(ids, mask=None):
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[None, :]
    if mask is None:
        mask = np.ones(arr.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != arr.shape:
        raise DimensionError(f"mask {mask.shape} does not match ids {arr.shape}")
    return arr, mask


class Seq2Seq:
    """Content (+ optional structure) encoder with an attention LSTM decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        E, H, L = config.embedding, config.hidden, config.layers
        u = lambda shape: Tensor(rng.uniform(-0.08, 0.08, size=shape), requires_grad=True)  # noqa: E731
        self.char_embedding = u((config.vocab_size, E))
        self.content_fwd = StackParams.init(E, H, L, rng)
        self.content_bwd = StackParams.init(E, H, L, rng)
        self.attention = AdditiveAttentionParams.init(H, 2 * H, H, rng)
        self.decoder = StackParams.init(E + 4 * H, H, L, rng)
        self.output = DenseParams.init(3 * H, config.vocab_size, rng)
        # separate stream: shared weights are identical with or without this channel
        self.structure_embedding = None
        self.structure_fwd = self.structure_bwd = None
        if config.use_structure:
            srng = np.random.default_rng([seed, 1])
            Es = config.structure_embedding
            self.structure_embedding = Tensor(srng.uniform(-0.08, 0.08, size=(STRUCTURE_VOCAB, Es)),
                                              requires_grad=True)
            self.structure_fwd = StackParams.init(Es, H, L, srng)
            self.structure_bwd = StackParams.init(Es, H, L, srng)

    @property
    def use_structure(self) -> bool:
        return self.config.use_structure

    def structure_disabled(self) -> "Seq2Seq":
        """A view sharing every weight but ignoring the structure channel."""
        view = object.__new__(type(self))
        view.__dict__.update(self.__dict__)
        view.config = ModelConfig(**{**self.config.to_dict(), "use_structure": False})
        return view

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        out["char_embedding"] = self.char_embedding
        groups = [("content_fwd", self.content_fwd), ("content_bwd", self.content_bwd)]
        if self.use_structure:
            out["structure_embedding"] = self.structure_embedding
            groups += [("structure_fwd", self.structure_fwd), ("structure_bwd", self.structure_bwd)]
        for prefix, stack in groups:
            for k, v in stack.parameters().items():
                out[f"{prefix}.{k}"] = v
        for k, v in self.attention.parameters().items():
            out[f"attention.{k}"] = v
        for k, v in self.decoder.parameters().items():
            out[f"decoder.{k}"] = v
        for k, v in self.output.parameters().items():
            out[f"output.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # ------------------------------------------------------------------
    # encoders

    def encode_content(self, content_ids, mask=None, dropout: Dropout | None = None) -> EncoderStates:
        ids, mask = _as_batch(content_ids, mask)
        if ids.shape[1] == 0:
            raise ContractError("content sequence is empty")
        emb = T.embedding_lookup(self.char_embedding, np.where(mask, ids, PAD_ID))
        return bilstm_encode(self.content_fwd, self.content_bwd, emb, mask=mask, dropout=dropout)

    def encode_structure(self, tokens, mask=None, dropout: Dropout | None = None) -> EncoderStates:
        if not self.use_structure:
            raise ContractError("model has no structure channel")
        if isinstance(tokens, str):
            tokens = structure_ids(tokens)
        ids, mask = _as_batch(tokens, mask)
        if ids.shape[1] == 0:
            raise ContractError("structure sequence is empty")
        emb = T.embedding_lookup(self.structure_embedding, np.where(mask, ids, STRUCT_PAD))
        return bilstm_encode(self.structure_fwd, self.structure_bwd, emb, mask=mask, dropout=dropout)

    def attention_memory(self, structure_states: EncoderStates | None, content_states: EncoderStates):
        """Join structure and content states on the time axis; returns (memory, mask)."""
        if len(content_states) == 0:
            raise ContractError("content states are empty")
        c_mem = content_states.memory
        c_mask = content_states.mask
        if c_mem.ndim == 2:
            c_mem = T.reshape(c_mem, (1,) + c_mem.shape)
            c_mask = None if c_mask is None else c_mask[None, :]
        if c_mask is None:
            c_mask = np.ones(c_mem.shape[:2], dtype=bool)
        if structure_states is None or not self.use_structure:
            return c_mem, c_mask
        s_mem = structure_states.memory
        s_mask = structure_states.mask
        if s_mem.ndim == 2:
            s_mem = T.reshape(s_mem, (1,) + s_mem.shape)
            s_mask = None if s_mask is None else s_mask[None, :]
        if s_mask is None:
            s_mask = np.ones(s_mem.shape[:2], dtype=bool)
        if s_mem.shape[2] != c_mem.shape[2] or s_mem.shape[0] != c_mem.shape[0]:
            raise DimensionError(f"structure memory {s_mem.shape} vs content memory {c_mem.shape}")
        return T.concat([s_mem, c_mem], axis=1), np.concatenate([s_mask, c_mask], axis=1)

    def initial_state(self, content_states: EncoderStates) -> list:
        """Top backward content layer seeds decoder layer 0; higher layers start at zero."""
        top = content_states.final_backward[-1]
        h, c = top.h, top.c
        if h.ndim == 1:
            h, c = T.reshape(h, (1,) + h.shape), T.reshape(c, (1,) + c.shape)
        batch = h.shape[0]
        state = [LSTMState(h=h, c=c)]
        for _ in range(1, self.config.layers):
            state.append(LSTMState.zeros(self.config.hidden, batch))
        return state

    def prepare(self, structure, content_ids, structure_mask=None, content_mask=None,
                dropout: Dropout | None = None) -> DecodeContext:
        c_ids, c_mask = _as_batch(content_ids, content_mask)
        content = self.encode_content(c_ids, c_mask, dropout)
        s_states, s_mask = None, None
        if self.use_structure:
            if structure is None:
                raise ContractError("multi-channel model needs a structure sequence")
            if isinstance(structure, str):
                structure = structure_ids(structure)
            s_ids, s_mask = _as_batch(structure, structure_mask)
            if s_ids.shape[0] != c_ids.shape[0]:
                raise DimensionError("structure and content batch sizes differ")
            s_states = self.encode_structure(s_ids, s_mask, dropout)
        memory, mem_mask = self.attention_memory(s_states, content)
        return DecodeContext(
            memory=memory, memory_mask=mem_mask,
            projected=project_memory(self.attention, memory),
            content=content, structure=s_states, structure_mask=s_mask,
            content_lengths=c_mask.sum(axis=1),
        )

    # ------------------------------------------------------------------
    # decoder

    def aligned_state(self, ctx: DecodeContext, step: int) -> Tensor:
        """Explicit aligned input ``h_i`` for decoder step ``step``."""
        H2 = 2 * self.config.hidden
        B = ctx.batch
        if self.use_structure:
            n = len(ctx.structure.states)
            if step >= n:
                return Tensor(np.zeros((B, H2)))
            h = ctx.structure.states[step]
            keep = ctx.structure_mask[:, step]
            if not keep.all():
                h = T.mul_const(h, keep[:, None].astype(np.float64))
            return h
        idx = np.minimum(step, ctx.content_lengths - 1)
        return T.take(ctx.content.memory, (np.arange(B), idx))

    def decoder_step(self, ctx: DecodeContext, inp: DecoderStepInput,
                     dropout: Dropout | None = None):
        """Advance the decoder one step; returns (new_state, logits (B, V))."""
        prev = inp.prev_state
        ids = np.asarray(inp.prev_token_ids, dtype=np.int64)
        expected = self.config.embedding + 4 * self.config.hidden
        context = inp.context
        if context is None:
            alpha = attention_scores(self.attention, prev[-1].h, ctx.memory,
                                     mask=ctx.memory_mask, projected=ctx.projected)
            context = attention_context(alpha, ctx.memory)
        emb = T.embedding_lookup(self.char_embedding, ids)
        x = T.concat([emb, inp.aligned_state, context], axis=-1)
        if x.shape[-1] != expected:
            raise DimensionError(f"decoder input width {x.shape[-1]} != {expected}")
        if dropout is not None:
            x = dropout(x)
        new_state = stacked_step(self.decoder.cells, x, prev, dropout)
        out_in = T.concat([new_state[-1].h, context], axis=-1)
        if dropout is not None:
            out_in = dropout(out_in)
        logits = dense(self.output.W, self.output.b, out_in)
        return new_state, logits

    # ------------------------------------------------------------------
    # training forward

    def forward_teacher_forced(
        self,
        structure,
        content_ids,
        target_ids,
        sampling_prob: float = 0.0,
        rng: np.random.Generator | None = None,
        dropout: Dropout | None = None,
        content_mask=None,
        target_mask=None,
    ):
        """Masked cross-entropy of the targets (each followed by EOS).

        Accepts a single example (1-D ids, structure string) or a padded
        batch (2-D ids with masks). With probability ``sampling_prob`` per
        row and step, the previous token fed to the decoder is the model's
        own argmax from the preceding step instead of the ground truth.
        Returns ``(loss, per_step_logits)``.
        """
        if not 0.0 <= sampling_prob <= 1.0:
            raise ContractError(f"sampling_prob must be in [0, 1], got {sampling_prob}")
        tgt, t_mask = _as_batch(target_ids, target_mask)
        B, L = tgt.shape
        s_mask = None
        if self.use_structure:
            if structure is None:
                raise ContractError("multi-channel model needs a structure sequence")
            if isinstance(structure, str):
                structure = structure_ids(structure)
            s_arr = np.asarray(structure, dtype=np.int64)
            if s_arr.ndim == 1:
                s_arr = s_arr[None, :]
            s_mask = s_arr != STRUCT_PAD
            if s_arr.shape != tgt.shape or not np.array_equal(s_mask, t_mask):
                raise ContractError(
                    f"structure length must equal target length: {s_arr.shape} vs {tgt.shape}"
                )
            structure = s_arr
        ctx = self.prepare(structure, content_ids, structure_mask=s_mask,
                           content_mask=content_mask, dropout=dropout)
        if ctx.batch != B:
            raise DimensionError("content and target batch sizes differ")

        lengths = t_mask.sum(axis=1)
        gold = np.full((B, L + 1), PAD_ID, dtype=np.int64)
        gold[:, :L] = np.where(t_mask, tgt, PAD_ID)
        gold[np.arange(B), lengths] = EOS_ID
        step_mask = np.arange(L + 1)[None, :] <= lengths[:, None]

        if sampling_prob > 0 and rng is None:
            rng = np.random.default_rng(0)
        state = self.initial_state(ctx.content)
        prev = np.full(B, BOS_ID, dtype=np.int64)
        logits_steps = []
        for i in range(L + 1):
            if i > 0:
                prev = gold[:, i - 1].copy()
                if sampling_prob > 0:
                    flip = rng.random(B) < sampling_prob
                    if flip.any():
                        own = np.argmax(logits_steps[-1].data, axis=-1)
                        prev[flip] = own[flip]
            inp = DecoderStepInput(prev, self.aligned_state(ctx, i), state)
            state, logits = self.decoder_step(ctx, inp, dropout)
            logits_steps.append(logits)
        stacked = T.stack(logits_steps, axis=1)
        loss = T.cross_entropy(stacked, gold, step_mask)
        return loss, logits_steps


class BaselineSeq2Seq(Seq2Seq):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config = ModelConfig(**{**config.to_dict(), "use_structure": False})
        super().__init__(config, seed)


class MultiChannelSeq2Seq(Seq2Seq):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config = ModelConfig(**{**config.to_dict(), "use_structure": True})
        super().__init__(config, seed)


def build_model(config: ModelConfig, seed: int = 0) -> Seq2Seq:
    return Seq2Seq(config, seed)
