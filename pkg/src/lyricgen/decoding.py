"""Inference: greedy and beam search decoding, and full-lyric composition.

Two length regimes exist. With a structure channel, decoding is *hard*:
exactly ``len(structure)`` characters are produced and the end marker is
never offered, so every output fits its melody line. Without one (the
baseline), decoding is *soft*: the model stops when it emits EOS or hits
``max_length``, and finished hypotheses compete on mean per-token
log-probability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocab, normalize_sentence
from .errors import ContractError
from .layers import LSTMState
from .melody import DEFAULT_LONG_NOTE, MelodyScore, validate_structure
from .model import DecoderStepInput, Seq2Seq

log = logging.getLogger(__name__)

DEFAULT_BEAM = 35
DEFAULT_MAX_LENGTH = 20


@dataclass
class GenerationRequest:
    condition_ids: list
    structure: str | None = None
    beam_width: int = DEFAULT_BEAM
    mode: str = "SG"  # SG: previous sentence, KG: keyword
    soft_eos: bool | None = None  # None: hard when the model has a structure channel
    max_length: int = DEFAULT_MAX_LENGTH

    def __post_init__(self):
        if self.beam_width < 1:
            raise ContractError("beam_width must be at least 1")
        if self.mode not in ("SG", "KG"):
            raise ContractError(f"unknown generation mode {self.mode!r}")
        if not self.condition_ids:
            raise ContractError("empty condition")
        if self.structure is not None:
            validate_structure(self.structure)

    @classmethod
    def from_text(cls, vocab: Vocab, condition_text: str, structure: str | None = None, **kw):
        ids = vocab.encode(normalize_sentence(condition_text))
        return cls(condition_ids=ids, structure=structure, **kw)


@dataclass
class Hypothesis:
    token_ids: list
    log_prob: float
    state: list | None = field(default=None, repr=False)
    finished: bool = False
    ended_by_eos: bool = False

    @property
    def mean_log_prob(self) -> float:
        n = len(self.token_ids) + (1 if self.ended_by_eos else 0)
        return self.log_prob / max(n, 1)


def _is_soft(model: Seq2Seq, request: GenerationRequest) -> bool:
    if request.soft_eos is None:
        return not model.use_structure
    return request.soft_eos


def _prepare(model: Seq2Seq, request: GenerationRequest):
    structure = request.structure if model.use_structure else None
    if model.use_structure and structure is None:
        raise ContractError("structure-conditioned model needs a structure")
    return model.prepare(structure, np.asarray(request.condition_ids, dtype=np.int64))


def _select_rows(state: list, rows: np.ndarray) -> list:
    return [LSTMState(h=T.Tensor(s.h.data[rows]), c=T.Tensor(s.c.data[rows])) for s in state]


def _step_log_probs(model, base_ctx, cache, step, prev_ids, state):
    n = len(prev_ids)
    ctx = cache.get(n)
    if ctx is None:
        ctx = cache[n] = base_ctx.repeat(n)
    aligned = model.aligned_state(ctx, step)
    new_state, logits = model.decoder_step(ctx, DecoderStepInput(np.asarray(prev_ids), aligned, state))
    lp = T._log_softmax_array(logits.data)
    return new_state, lp


def beam_search(model: Seq2Seq, request: GenerationRequest) -> list:
    """Return hypotheses best first as ``(token_ids, log_prob)`` pairs.

    Hard mode ranks by total log-probability; soft mode by mean per-token
    log-probability (EOS counted as a token). Ties go to the
    lexicographically smaller token sequence.
    """
    return [(h.token_ids, h.log_prob) for h in beam_search_hypotheses(model, request)]


def beam_search_hypotheses(model: Seq2Seq, request: GenerationRequest) -> list:
    soft = _is_soft(model, request)
    if soft:
        steps = request.max_length
        banned = [PAD_ID, BOS_ID, UNK_ID]
    else:
        if request.structure is None:
            raise ContractError("hard-length decoding needs a structure")
        steps = len(request.structure)
        banned = [PAD_ID, BOS_ID, EOS_ID, UNK_ID]
    W = request.beam_width
    with T.no_grad():
        base = _prepare(model, request)
        cache = {1: base}
        state = model.initial_state(base.content)
        alive_ids = [[]]
        alive_lp = np.zeros(1)
        finished = []
        for step in range(steps):
            prev = [ids[-1] if ids else BOS_ID for ids in alive_ids]
            state, lp = _step_log_probs(model, base, cache, step, prev, state)
            lp[:, banned] = -np.inf
            total = alive_lp[:, None] + lp
            rows, cols = np.nonzero(np.isfinite(total))
            cands = sorted(
                zip(rows.tolist(), cols.tolist()),
                key=lambda rc: (-total[rc[0], rc[1]], alive_ids[rc[0]] + [rc[1]]),
            )[:W]
            keep_rows, new_ids, new_lp = [], [], []
            for r, c in cands:
                score = float(total[r, c])
                if soft and c == EOS_ID:
                    finished.append(Hypothesis(list(alive_ids[r]), score, finished=True, ended_by_eos=True))
                    continue
                keep_rows.append(r)
                new_ids.append(alive_ids[r] + [c])
                new_lp.append(score)
            if not keep_rows:
                alive_ids = []
                break
            state = _select_rows(state, np.asarray(keep_rows))
            alive_ids, alive_lp = new_ids, np.asarray(new_lp)
            if soft and len(finished) >= W:
                break
        hyps = [Hypothesis(ids, float(lp_), _select_rows(state, np.asarray([i])), finished=True)
                for i, (ids, lp_) in enumerate(zip(alive_ids, alive_lp))]
    hyps = finished + hyps
    if not hyps:
        raise ContractError("vocabulary has no generatable characters")
    if soft:
        hyps.sort(key=lambda h: (-h.mean_log_prob, h.token_ids))
    else:
        hyps.sort(key=lambda h: (-h.log_prob, h.token_ids))
    return hyps[:W]


def greedy_decode(model: Seq2Seq, request: GenerationRequest):
    """Argmax decoding; identical to a width-1 beam. Returns ``(token_ids, log_prob)``."""
    req = GenerationRequest(**{**request.__dict__, "beam_width": 1})
    return beam_search(model, req)[0]


def score_sequence(model: Seq2Seq, request: GenerationRequest, token_ids, include_eos=None) -> float:
    """Replay ``token_ids`` through the decoder and sum the chosen log-probabilities.

    ``include_eos`` defaults to the soft-length regime, where finishing with
    EOS is part of the hypothesis score.
    """
    if include_eos is None:
        include_eos = _is_soft(model, request)
    with T.no_grad():
        base = _prepare(model, request)
        state = model.initial_state(base.content)
        seq = list(token_ids) + ([EOS_ID] if include_eos else [])
        prev, total = BOS_ID, 0.0
        for step, tok in enumerate(seq):
            state, lp = _step_log_probs(model, base, {1: base}, step, [prev], state)
            total += float(lp[0, tok])
            prev = tok
    return total


def generate_text(model: Seq2Seq, vocab: Vocab, condition_text: str, structure: str | None,
                  beam_width: int = DEFAULT_BEAM, mode: str = "SG", **kw) -> str:
    req = GenerationRequest.from_text(vocab, condition_text, structure, beam_width=beam_width,
                                      mode=mode, **kw)
    ids, _ = beam_search(model, req)[0]
    return vocab.decode(ids)


def compose_lyrics(model: Seq2Seq, vocab: Vocab, melody: MelodyScore, seed_keyword: str,
                   beam_width: int = DEFAULT_BEAM, long_note_threshold=DEFAULT_LONG_NOTE) -> list:
    """Write one sentence per melody line.

    The first line is generated from ``seed_keyword`` (KG); every later line
    is conditioned on the sentence generated just before it (SG).
    """
    if not melody.lines:
        raise ContractError("melody has no lines")
    keyword = normalize_sentence(seed_keyword)
    if not keyword:
        raise ContractError("seed keyword is empty")
    if all(ch not in vocab for ch in keyword):
        log.warning("seed keyword %r is entirely out of vocabulary; using <unk>", seed_keyword)
    structures = melody.structures(long_note_threshold)
    lines = []
    condition, mode = keyword, "KG"
    for structure in structures:
        text = generate_text(model, vocab, condition, structure, beam_width=beam_width, mode=mode)
        lines.append(text)
        condition, mode = text, "SG"
    return lines
