"""Automatic metrics: length control, melody matching and bigram BLEU."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from .corpus import Segmenter, TrainingPair, Vocab
from .decoding import DEFAULT_BEAM, GenerationRequest, beam_search
from .errors import ContractError
from .melody import boundaries_from_tokens
from .model import Seq2Seq


@dataclass
class EvalReport:
    length_control: float
    melody_matching: float
    bleu: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _same_length(a, b, what):
    if len(a) != len(b):
        raise ContractError(f"{what}: {len(a)} candidates vs {len(b)} references")


def length_control_accuracy(generated: Sequence[str], required: Sequence[int]) -> float:
    _same_length(generated, required, "length_control_accuracy")
    if not generated:
        raise ContractError("length_control_accuracy needs at least one sample")
    hits = sum(1 for g, n in zip(generated, required) if len(g) == int(n))
    return hits / len(generated)


def melody_matches(sentence: str, structure: str, segmenter: Segmenter) -> bool:
    """True when the length fits and every music-segment boundary is a word boundary."""
    segments = boundaries_from_tokens(structure)
    if len(sentence) != sum(segments):
        return False
    words = segmenter.boundaries(sentence)
    pos = 0
    for n in segments:
        pos += n
        if pos not in words:
            return False
    return True


def melody_matching_accuracy(generated: Sequence[str], structures: Sequence[str],
                             lexicon) -> float:
    _same_length(generated, structures, "melody_matching_accuracy")
    if not generated:
        raise ContractError("melody_matching_accuracy needs at least one sample")
    segmenter = lexicon if isinstance(lexicon, Segmenter) else Segmenter(lexicon)
    hits = sum(1 for g, s in zip(generated, structures) if melody_matches(g, s, segmenter))
    return hits / len(generated)


def _ngrams(text: str, n: int) -> Counter:
    return Counter(text[i:i + n] for i in range(len(text) - n + 1))


def bleu_bigram(candidates: Sequence[str], references: Sequence[str]) -> float:
    """Corpus BLEU over character 1- and 2-grams with uniform weights.

    Clipped counts are pooled over the corpus before the precisions are
    taken. A bigram precision with no matches is add-one smoothed as
    ``1 / (count + 1)``; the brevity penalty is ``exp(1 - r/c)`` when the
    pooled candidate length ``c`` is below the reference length ``r``.
    """
    _same_length(candidates, references, "bleu_bigram")
    if not candidates:
        raise ContractError("bleu_bigram needs at least one sample")
    matches = [0, 0]
    totals = [0, 0]
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for k, n in enumerate((1, 2)):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[k] += sum(min(cnt, r[g]) for g, cnt in c.items())
            totals[k] += sum(c.values())
    if totals[0] == 0 or matches[0] == 0:
        return 0.0
    p1 = matches[0] / totals[0]
    p2 = matches[1] / totals[1] if matches[1] > 0 else 1.0 / (totals[1] + 1)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(0.5 * (math.log(p1) + math.log(p2)))


def generate_for_pairs(model: Seq2Seq, vocab: Vocab, pairs: Sequence[TrainingPair],
                       beam_width: int = DEFAULT_BEAM, soft_eos: bool | None = None,
                       max_length: int | None = None) -> list:
    out = []
    for p in pairs:
        kw = {} if max_length is None else {"max_length": max_length}
        req = GenerationRequest.from_text(vocab, p.condition, p.structure, beam_width=beam_width,
                                          mode="KG" if p.kind == "keyword" else "SG",
                                          soft_eos=soft_eos, **kw)
        ids, _ = beam_search(model, req)[0]
        out.append(vocab.decode(ids))
    return out


def score_generations(generated: Sequence[str], pairs: Sequence[TrainingPair], lexicon) -> EvalReport:
    return EvalReport(
        length_control=length_control_accuracy(generated, [len(p.target) for p in pairs]),
        melody_matching=melody_matching_accuracy(generated, [p.structure for p in pairs], lexicon),
        bleu=bleu_bigram(generated, [p.target for p in pairs]),
        n=len(pairs),
    )


def evaluate(model: Seq2Seq, vocab: Vocab, test_pairs: Sequence[TrainingPair], lexicon=(),
             beam_width: int = DEFAULT_BEAM, soft_eos: bool | None = None) -> EvalReport:
    """Beam-decode every test pair and score against its reference sentence."""
    if not test_pairs:
        raise ContractError("evaluation needs a non-empty test set")
    generated = generate_for_pairs(model, vocab, test_pairs, beam_width, soft_eos)
    return score_generations(generated, test_pairs, lexicon)
