"""Corpus handling: vocabulary, training pairs, TextRank keywords, batching.

Lyrics are modelled at the character level: one Chinese character is one
sung syllable, so a target sentence has exactly as many characters as its
melody line has notes.

On disk a corpus is a directory of documents. ``name.txt`` holds one
sentence per line (blank lines separate stanzas) and an optional
``name.mel`` companion holds the melody with one line per sentence.
"""

from __future__ import annotations

import json
import os
import tempfile
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import AlignmentError, ContractError
from .melody import (
    MelodyScore,
    boundaries_from_tokens,
    note,
    parse_melody,
    rest,
    serialize_melody,
    structure_for_line,
    syllable_count,
    tokens_from_segments,
    validate_structure,
)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


def normalize_sentence(text: str) -> str:
    """Drop whitespace, punctuation and control characters."""
    return "".join(ch for ch in text if unicodedata.category(ch)[0] not in "PZC")


class Vocab:
    """Character vocabulary with fixed reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, chars: Sequence[str]):
        self.char_of = list(RESERVED) + list(chars)
        self.id_of = {c: i for i, c in enumerate(self.char_of)}
        if len(self.id_of) != len(self.char_of):
            raise ContractError("duplicate characters in vocabulary")

    def __len__(self):
        return len(self.char_of)

    def __contains__(self, ch):
        return ch in self.id_of and self.id_of[ch] >= len(RESERVED)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.char_of == other.char_of

    @property
    def characters(self) -> list:
        return self.char_of[len(RESERVED):]

    def encode(self, text: str) -> list:
        return [self.id_of.get(ch, UNK_ID) if ch not in RESERVED else UNK_ID for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.char_of[i] if i != UNK_ID else RESERVED[UNK_ID])
        return "".join(out)

    def to_list(self) -> list:
        return self.characters

    @classmethod
    def from_list(cls, chars: Sequence[str]) -> "Vocab":
        return cls(chars)


def build_vocab(sentences: Iterable[str], min_count: int = 1) -> Vocab:
    """Characters seen at least ``min_count`` times, most frequent first, ties by code point."""
    if min_count < 1:
        raise ContractError("min_count must be at least 1")
    counts = Counter()
    for s in sentences:
        counts.update(normalize_sentence(s))
    if not counts:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = [c for c, n in counts.items() if n >= min_count]
    kept.sort(key=lambda c: (-counts[c], ord(c)))
    return Vocab(kept)


# --------------------------------------------------------------------------
# training pairs


@dataclass(frozen=True)
class TrainingPair:
    """Condition text, target sentence and the target's structure tokens."""

    condition: str
    target: str
    structure: str
    kind: str = "sentence"  # "sentence" | "keyword"

    def __post_init__(self):
        validate_structure(self.structure)
        if len(self.structure) != len(self.target):
            raise AlignmentError(
                f"structure {self.structure!r} has {len(self.structure)} tokens for "
                f"{len(self.target)}-character target {self.target!r}"
            )

    def to_json(self) -> dict:
        return {"condition": self.condition, "target": self.target, "structure": self.structure,
                "kind": self.kind}


@dataclass(frozen=True)
class EncodedPair:
    condition_ids: tuple
    target_ids: tuple
    structure: str


def encode_pairs(pairs: Iterable[TrainingPair], vocab: Vocab) -> list:
    return [EncodedPair(tuple(vocab.encode(p.condition)), tuple(vocab.encode(p.target)), p.structure)
            for p in pairs]


def _document_structures(sentences, melody, long_note_threshold):
    if melody is None:
        return [tokens_from_segments([len(s)]) for s in sentences]
    if len(melody.lines) != len(sentences):
        raise AlignmentError(
            f"melody has {len(melody.lines)} lines but the document has {len(sentences)} sentences"
        )
    structures = []
    for i, (s, line) in enumerate(zip(sentences, melody.lines)):
        if syllable_count(line) != len(s):
            raise AlignmentError(
                f"sentence {i + 1} has {len(s)} characters but its melody line has "
                f"{syllable_count(line)} notes"
            )
        structures.append(structure_for_line(line, long_note_threshold))
    return structures


def _clean(document) -> list:
    return [t for t in (normalize_sentence(s) for s in document) if t]


def extract_pairs(document: Sequence[str], melody: MelodyScore | None = None,
                  long_note_threshold=2) -> list:
    """Neighbouring sentences as (previous, next) pairs."""
    sentences = _clean(document)
    if len(sentences) < 2:
        raise ContractError("a document needs at least two sentences to form pairs")
    structures = _document_structures(sentences, melody, long_note_threshold)
    return [TrainingPair(sentences[i], sentences[i + 1], structures[i + 1])
            for i in range(len(sentences) - 1)]


def extract_keyword_pairs(document: Sequence[str], segmenter: "Segmenter",
                          melody: MelodyScore | None = None, long_note_threshold=2,
                          source: str = "target") -> list:
    """(keyword, sentence) pairs; the keyword is TextRank's top word.

    ``source="target"`` takes the keyword from the sentence itself,
    ``source="context"`` from the preceding sentence.
    """
    if source not in ("target", "context"):
        raise ContractError(f"unknown keyword source {source!r}")
    sentences = _clean(document)
    if not sentences:
        raise ContractError("empty document")
    structures = _document_structures(sentences, melody, long_note_threshold)
    pairs = []
    for i, s in enumerate(sentences):
        if source == "context":
            if i == 0:
                continue
            src = sentences[i - 1]
        else:
            src = s
        kw = sentence_keyword(src, segmenter)
        pairs.append(TrainingPair(kw, s, structures[i], kind="keyword"))
    return pairs


# --------------------------------------------------------------------------
# word segmentation and TextRank


class Segmenter:
    """Greedy longest-match segmentation against a fixed lexicon."""

    def __init__(self, lexicon: Iterable[str] = ()):
        self.lexicon = frozenset(w for w in lexicon if w)
        self.max_len = max((len(w) for w in self.lexicon), default=1)

    def segment(self, text: str) -> list:
        words, i = [], 0
        while i < len(text):
            for n in range(min(self.max_len, len(text) - i), 0, -1):
                piece = text[i:i + n]
                if n == 1 or piece in self.lexicon:
                    words.append(piece)
                    i += n
                    break
        return words

    def boundaries(self, text: str) -> set:
        """Character offsets at which a word ends (excluding 0)."""
        out, pos = set(), 0
        for w in self.segment(text):
            pos += len(w)
            out.add(pos)
        return out


def lexicon_from_corpus(documents, melodies, long_note_threshold=2) -> list:
    """Words are the lyric spans sung over one music segment."""
    words = set()
    for doc, mel in zip(documents, melodies):
        if mel is None:
            continue
        sentences = _clean(doc)
        for s, tokens in zip(sentences, _document_structures(sentences, mel, long_note_threshold)):
            pos = 0
            for n in boundaries_from_tokens(tokens):
                words.add(s[pos:pos + n])
                pos += n
    return sorted(words)


@dataclass
class KeywordResult:
    ranked: list  # (word, score), descending score then word
    iterations: int = 0
    converged: bool = False
    deltas: list = field(default_factory=list)

    @property
    def keyword(self) -> str:
        return self.ranked[0][0]


def cooccurrence_graph(words: Sequence[str], window: int = 2) -> dict:
    """Undirected graph linking distinct words that appear within ``window`` positions."""
    adj = {w: set() for w in words}
    for i, w in enumerate(words):
        for j in range(i + 1, min(i + window, len(words))):
            u = words[j]
            if u != w:
                adj[w].add(u)
                adj[u].add(w)
    return adj


def textrank_keywords(words: Sequence[str], window: int = 2, damping: float = 0.85,
                      iterations: int = 100, tol: float = 1e-6) -> KeywordResult:
    if not words:
        raise ContractError("cannot rank keywords of an empty sentence")
    if window < 2:
        raise ContractError("co-occurrence window must be at least 2")
    if not 0.0 < damping < 1.0:
        raise ContractError("damping must lie strictly between 0 and 1")
    adj = cooccurrence_graph(list(words), window)
    nodes = sorted(adj)
    score = {w: 1.0 for w in nodes}
    deltas, converged, it = [], False, 0
    for it in range(1, iterations + 1):
        new = {
            w: (1.0 - damping) + damping * sum(score[u] / len(adj[u]) for u in sorted(adj[w]))
            for w in nodes
        }
        delta = max(abs(new[w] - score[w]) for w in nodes)
        score = new
        deltas.append(delta)
        if delta < tol:
            converged = True
            break
    ranked = sorted(score.items(), key=lambda kv: (-kv[1], kv[0]))
    return KeywordResult(ranked=ranked, iterations=it, converged=converged, deltas=deltas)


def sentence_keyword(text: str, segmenter: Segmenter | None = None, **kwargs) -> str:
    words = (segmenter or Segmenter()).segment(normalize_sentence(text))
    return textrank_keywords(words, **kwargs).keyword


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    condition: np.ndarray  # (B, Tc) ids, PAD padded
    condition_mask: np.ndarray
    target: np.ndarray  # (B, L)
    target_mask: np.ndarray
    structure: np.ndarray  # (B, L) structure-token ids, 0 padded
    indices: list

    def __len__(self):
        return len(self.indices)

    @property
    def num_tokens(self) -> int:
        # every target also predicts its end marker
        return int(self.target_mask.sum()) + len(self.indices)


def _pad(seqs: Sequence[Sequence[int]]):
    width = max(len(s) for s in seqs)
    arr = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        arr[r, :len(s)] = s
        mask[r, :len(s)] = True
    return arr, mask


def make_batch(pairs: Sequence[EncodedPair], indices: Sequence[int]) -> Batch:
    from .model import structure_ids  # model imports this module

    chosen = [pairs[i] for i in indices]
    cond, cmask = _pad([p.condition_ids for p in chosen])
    tgt, tmask = _pad([p.target_ids for p in chosen])
    struct, _ = _pad([structure_ids(p.structure) for p in chosen])
    if not cmask[:, 0].all():
        raise ContractError("empty condition sequence in batch")
    return Batch(cond, cmask, tgt, tmask, struct, list(indices))


def batch_iterator(pairs: Sequence[EncodedPair], batch_size: int, seed: int | None = 0,
                   shuffle: bool = True) -> Iterator[Batch]:
    """Yield padded batches; order depends only on ``seed``."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    order = np.arange(len(pairs))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        yield make_batch(pairs, [int(i) for i in order[start:start + batch_size]])


# --------------------------------------------------------------------------
# synthetic corpus

_CHARACTERS = (
    "的一是不了人我在有他这中大来上个国说们为子和你地出道也时年得就那要下以生会自着去之过家学"
    "对可她里后小么心多天而能好都然没日于起还发成事只作当想看文无开手十用主行方又如前所本见经头"
    "面公同三已老从动两长知民样现分将外但身些与高意进把法此实回二理美点月明其种声全工己话儿者向"
)


@dataclass
class SyntheticSpec:
    num_pairs: int = 50
    vocab_size: int = 20
    length_range: tuple = (4, 8)
    seed: int = 7
    sentences_per_document: int = 6
    words_per_length: int = 6


def _synthetic_alphabet(n: int) -> list:
    chars = list(dict.fromkeys(_CHARACTERS))
    code = 0x4E00
    while len(chars) < n:
        ch = chr(code)
        if ch not in chars:
            chars.append(ch)
        code += 1
    return chars[:n]


def _composition(rng, total: int, max_part: int = 4) -> list:
    parts = []
    while total > 0:
        n = int(rng.integers(1, min(max_part, total) + 1))
        parts.append(n)
        total -= n
    return parts


def generate_synthetic_corpus(spec: SyntheticSpec):
    """Deterministic documents plus melodies whose segments match the words used.

    Returns ``(documents, melodies)``; each document is a list of sentences.
    All sentences are distinct, so every (condition, structure) pair has a
    single correct target.
    """
    lo, hi = spec.length_range
    if spec.vocab_size < 4:
        raise ContractError("synthetic vocabulary needs at least 4 characters")
    if not 1 <= lo <= hi <= 20:
        raise ContractError(f"length_range must satisfy 1 <= lo <= hi <= 20, got {spec.length_range}")
    if spec.num_pairs < 1 or spec.sentences_per_document < 2:
        raise ContractError("need at least one pair and two sentences per document")
    rng = np.random.default_rng(spec.seed)
    alphabet = _synthetic_alphabet(spec.vocab_size)
    lexicon = {}
    for n in range(1, 5):
        pool = set()
        target = min(spec.words_per_length, spec.vocab_size ** n)
        while len(pool) < target:
            pool.add("".join(alphabet[int(k)] for k in rng.integers(0, spec.vocab_size, n)))
        lexicon[n] = sorted(pool)

    n_sentences_needed = []
    remaining = spec.num_pairs
    per_doc = spec.sentences_per_document - 1
    while remaining > 0:
        k = min(per_doc, remaining)
        n_sentences_needed.append(k + 1)
        remaining -= k

    seen = set()
    total_needed = sum(n_sentences_needed)
    space = sum(spec.vocab_size ** L for L in range(lo, hi + 1))
    if total_needed > space:
        raise ContractError("synthetic settings cannot produce enough distinct sentences")

    documents, melodies = [], []
    for count in n_sentences_needed:
        doc, lines = [], []
        while len(doc) < count:
            length = int(rng.integers(lo, hi + 1))
            segments = _composition(rng, length)
            sentence = "".join(lexicon[n][int(rng.integers(0, len(lexicon[n])))] for n in segments)
            if sentence in seen:
                continue
            seen.add(sentence)
            doc.append(sentence)
            lines.append(_synthetic_line(rng, segments))
        documents.append(doc)
        melodies.append(MelodyScore(lines))
    return documents, melodies


def _synthetic_line(rng, segments) -> list:
    events = []
    for idx, n in enumerate(segments):
        last = idx == len(segments) - 1
        for k in range(n):
            if last and k == n - 1:
                events.append(note("2", pitch=int(rng.integers(1, 8))))
            else:
                events.append(note(("0.5", "1")[int(rng.integers(0, 2))], pitch=int(rng.integers(1, 8))))
        if not last:
            events.append(rest(("0.5", "1")[int(rng.integers(0, 2))]))
    return events


# --------------------------------------------------------------------------
# files


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_document(path) -> list:
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


@dataclass
class CorpusDocument:
    name: str
    sentences: list
    melody: MelodyScore | None = None


def read_corpus(path) -> list:
    """Read a document file or a directory of ``*.txt`` documents with optional ``.mel`` melodies."""
    path = Path(path)
    files = sorted(path.glob("*.txt")) if path.is_dir() else [path]
    if not files:
        raise ContractError(f"no .txt documents under {path}")
    docs = []
    for f in files:
        mel_path = f.with_suffix(".mel")
        melody = parse_melody(mel_path.read_text(encoding="utf-8")) if mel_path.exists() else None
        docs.append(CorpusDocument(f.stem, read_document(f), melody))
    return docs


def write_corpus(directory, documents, melodies=None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, doc in enumerate(documents):
        atomic_write_text(directory / f"doc{i:03d}.txt", "\n".join(doc) + "\n")
        if melodies is not None and melodies[i] is not None:
            atomic_write_text(directory / f"doc{i:03d}.mel", serialize_melody(melodies[i]))


def corpus_pairs(docs: Sequence[CorpusDocument], keywords: bool = False,
                 segmenter: Segmenter | None = None, long_note_threshold=2,
                 keyword_source: str = "target") -> list:
    pairs = []
    for d in docs:
        pairs.extend(extract_pairs(d.sentences, d.melody, long_note_threshold))
        if keywords:
            pairs.extend(extract_keyword_pairs(d.sentences, segmenter or Segmenter(), d.melody,
                                               long_note_threshold, keyword_source))
    return pairs


def write_pairs_jsonl(path, pairs: Iterable[TrainingPair]) -> None:
    lines = [json.dumps(p.to_json(), ensure_ascii=False) for p in pairs]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_pairs_jsonl(path) -> list:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pairs.append(TrainingPair(rec["condition"], rec["target"], rec["structure"],
                                      rec.get("kind", "sentence")))
        except (KeyError, TypeError, AttributeError, json.JSONDecodeError) as exc:
            raise ContractError(f"{path}:{lineno}: bad pair record ({exc})") from exc
    return pairs


def bundled_corpus_path() -> Path:
    """Directory of the bundled 50-pair synthetic corpus."""
    return Path(str(resources.files("lyricgen") / "data" / "synthetic50"))
