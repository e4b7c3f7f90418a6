import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyricgen import tensor as T
from lyricgen.corpus import BOS_ID, EOS_ID, Vocab
from lyricgen.decoding import (
    GenerationRequest,
    beam_search,
    beam_search_hypotheses,
    compose_lyrics,
    generate_text,
    greedy_decode,
    score_sequence,
)
from lyricgen.errors import ContractError, ParseError
from lyricgen.melody import MelodyScore, melody_for_segments, tokens_from_segments
from lyricgen.model import DecoderStepInput, ModelConfig, build_model

FIRST_CHAR = 4  # ids below are reserved


def _request(structure, width, **kw):
    return GenerationRequest(condition_ids=[4, 5, 6], structure=structure, beam_width=width, **kw)


def enumerate_hard(model, structure, n_chars):
    ids = range(FIRST_CHAR, FIRST_CHAR + n_chars)
    req = _request(structure, 1)
    scored = [(score_sequence(model, req, list(seq)), list(seq))
              for seq in itertools.product(ids, repeat=len(structure))]
    return sorted(scored, key=lambda x: (-x[0], x[1]))


@pytest.mark.parametrize("structure", ["S", "SE", "SBE", "SMEB"])
def test_full_width_beam_matches_exhaustive_enumeration(tiny_model, structure):
    n_chars = 4
    m = tiny_model(vocab_size=FIRST_CHAR + n_chars, seed=2)
    width = n_chars ** len(structure)
    beam = beam_search(m, _request(structure, width))
    oracle = enumerate_hard(m, structure, n_chars)
    assert len(beam) == width
    assert beam[0][0] == oracle[0][1]
    assert abs(beam[0][1] - oracle[0][0]) < 1e-9
    for (ids, lp), (olp, oids) in zip(beam, oracle):
        assert abs(lp - olp) < 1e-9


def test_soft_beam_matches_enumeration_with_eos(tiny_model):
    m = tiny_model(vocab_size=FIRST_CHAR + 2, use_structure=False, seed=4)
    max_len = 3
    req = GenerationRequest([4, 5], beam_width=10_000, max_length=max_len)
    hyps = beam_search_hypotheses(m, req)
    cands = []
    for n in range(max_len + 1):
        for seq in itertools.product([4, 5], repeat=n):
            seq = list(seq)
            if n < max_len:  # finished by EOS, which counts as a token
                cands.append((score_sequence(m, req, seq, include_eos=True) / (n + 1), seq))
            else:  # cut off at max_length
                cands.append((score_sequence(m, req, seq, include_eos=False) / n, seq))
    cands.sort(key=lambda c: (-c[0], c[1]))
    assert hyps[0].token_ids == cands[0][1]
    assert hyps[0].mean_log_prob == pytest.approx(cands[0][0], abs=1e-9)
    assert len(hyps) == len(cands)


def test_width_one_equals_greedy_argmax(tiny_model):
    m = tiny_model(vocab_size=10, seed=7)
    req = _request("SMEBE", 1)
    ids, lp = beam_search(m, req)[0]
    assert (ids, lp) == greedy_decode(m, _request("SMEBE", 35))
    # independent argmax rollout
    with T.no_grad():
        ctx = m.prepare("SMEBE", np.array([4, 5, 6]))
        state = m.initial_state(ctx.content)
        prev, out = BOS_ID, []
        for i in range(5):
            state, logits = m.decoder_step(ctx, DecoderStepInput(np.array([prev]), m.aligned_state(ctx, i), state))
            row = logits.data[0].copy()
            row[:FIRST_CHAR] = -np.inf
            prev = int(np.argmax(row))
            out.append(prev)
    assert ids == out


@settings(max_examples=30)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 8))
def test_hard_mode_length_and_vocabulary(segments, width):
    m = build_model(ModelConfig(vocab_size=9, embedding=3, hidden=4, layers=1), seed=1)
    structure = tokens_from_segments(segments)
    results = beam_search(m, _request(structure, width))
    assert 1 <= len(results) <= width
    lps = [lp for _, lp in results]
    assert lps == sorted(lps, reverse=True)
    for ids, lp in results:
        assert len(ids) == len(structure)
        assert all(i >= FIRST_CHAR for i in ids)
        assert lp == pytest.approx(score_sequence(m, _request(structure, 1), ids), abs=1e-9)


def test_beam_is_deterministic(tiny_model):
    m = tiny_model(vocab_size=12, seed=3)
    assert beam_search(m, _request("SMMEBE", 35)) == beam_search(m, _request("SMMEBE", 35))


def test_structure_model_can_decode_softly(tiny_model):
    m = tiny_model(vocab_size=8)
    ids, _ = beam_search(m, _request("SME", 3, soft_eos=True, max_length=5))[0]
    assert len(ids) <= 5 and EOS_ID not in ids


def test_request_validation(tiny_model):
    with pytest.raises(ContractError):
        GenerationRequest([4], "S", beam_width=0)
    with pytest.raises(ContractError):
        GenerationRequest([], "S")
    with pytest.raises(ContractError):
        GenerationRequest([4], "S", mode="XX")
    with pytest.raises(ParseError):
        GenerationRequest([4], "SS")
    with pytest.raises(ContractError):
        beam_search(tiny_model(), GenerationRequest([4], None))


def test_compose_lyrics_fits_every_melody_line(tiny_model):
    vocab = Vocab(list("春夏秋冬"))
    m = tiny_model(vocab_size=len(vocab))
    melody = MelodyScore([melody_for_segments(s) for s in ([2, 2], [3], [1, 2, 1], [4])])
    lines = compose_lyrics(m, vocab, melody, "春", beam_width=4)
    assert [len(line) for line in lines] == [4, 3, 4, 4]
    assert lines == compose_lyrics(m, vocab, melody, "春", beam_width=4)
    # later lines are conditioned on the previous output
    assert lines[1] == generate_text(m, vocab, lines[0], "SME", beam_width=4)


def test_compose_lyrics_with_unknown_keyword_warns(tiny_model, caplog):
    vocab = Vocab(list("春夏"))
    m = tiny_model(vocab_size=len(vocab))
    melody = MelodyScore([melody_for_segments([2])])
    with caplog.at_level("WARNING"):
        assert len(compose_lyrics(m, vocab, melody, "雪", beam_width=2)[0]) == 2
    assert "out of vocabulary" in caplog.text
    with pytest.raises(ContractError):
        compose_lyrics(m, vocab, melody, "，", beam_width=2)
