"""Melody ingestion and syllable-structure tokens.

A melody file holds one lyric line per text line. Each line is a list of
events: ``N<d>`` is a note lasting ``d`` beats, ``R<d>`` a rest; an optional
``@<pitch>`` suffix on a note is kept but never used. ``|`` bar lines are
ignored and ``#`` starts a comment::

    # 你问/我爱/你有/多深
    N0.5 N0.5 R0.5 | N0.5 N0.5 R0.5 N0.5 N0.5 R0.5 | N1 N2

Notes carry one syllable (one Chinese character) each. Runs of notes that
are not interrupted by a rest or a long note form a music segment, and each
syllable is tagged with a structure token:

* ``S`` for the first syllable of the line,
* ``B``/``M``/``E`` for the beginning, middle and end of a segment.

A one-note segment after the start of the line is a bare ``B``. Together
with ``S`` absorbing the first segment's ``B`` this keeps the encoding
invertible: ``[2]`` is ``SE`` while ``[1, 1]`` is ``SB``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction

from .errors import ContractError, ParseError

STRUCTURE_ALPHABET = "SBME"
DEFAULT_LONG_NOTE = Fraction(2)

_EVENT_RE = re.compile(r"^([NR])([+-]?(?:\d+(?:\.\d*)?|\.\d+))(?:@([+-]?\d+))?$")
_STRUCTURE_RE = re.compile(r"S(?:M*E)?(?:B(?:M*E)?)*")


@dataclass(frozen=True)
class MelodyEvent:
    kind: str  # "note" | "rest"
    duration: Fraction
    pitch: int | None = None

    def __post_init__(self):
        if self.kind not in ("note", "rest"):
            raise ContractError(f"unknown event kind {self.kind!r}")
        if self.duration <= 0:
            raise ContractError(f"event duration must be positive, got {self.duration}")

    @property
    def is_note(self) -> bool:
        return self.kind == "note"


def note(duration, pitch=None) -> MelodyEvent:
    return MelodyEvent("note", Fraction(str(duration)), pitch)


def rest(duration) -> MelodyEvent:
    return MelodyEvent("rest", Fraction(str(duration)))


@dataclass
class MelodyScore:
    lines: list = field(default_factory=list)  # list of lists of MelodyEvent

    def __len__(self):
        return len(self.lines)

    def structures(self, long_note_threshold=DEFAULT_LONG_NOTE) -> list:
        return [structure_for_line(line, long_note_threshold) for line in self.lines]


def parse_melody(text: str) -> MelodyScore:
    """Parse the line-oriented melody format into a :class:`MelodyScore`.

    Blank and comment-only lines are skipped. Raises :class:`ParseError`
    with 1-based line/column on bad tokens, non-positive durations,
    note-less lines and empty input.
    """
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0]
        if not content.strip():
            continue
        events = []
        for m in re.finditer(r"\S+", content):
            tok = m.group(0)
            col = m.start() + 1
            if tok == "|":
                continue
            em = _EVENT_RE.match(tok)
            if em is None:
                raise ParseError(f"bad melody event {tok!r}", lineno, col)
            kind, dur, pitch = em.groups()
            duration = Fraction(dur)
            if duration <= 0:
                raise ParseError(f"duration must be positive, got {dur}", lineno, col)
            if kind == "R" and pitch is not None:
                raise ParseError("rests cannot carry a pitch", lineno, col)
            events.append(MelodyEvent("note" if kind == "N" else "rest", duration,
                                      int(pitch) if pitch is not None else None))
        if not any(e.is_note for e in events):
            raise ParseError("line contains no notes", lineno, 1)
        lines.append(events)
    if not lines:
        raise ParseError("melody contains no lines")
    return MelodyScore(lines)


def _format_duration(d: Fraction) -> str:
    if d.denominator == 1:
        return str(d.numerator)
    text = str(Decimal(d.numerator) / Decimal(d.denominator))
    if Fraction(text) != d:
        raise ContractError(f"duration {d} has no finite decimal form")
    return text


def serialize_melody(score: MelodyScore) -> str:
    out = []
    for line in score.lines:
        toks = []
        for e in line:
            tok = ("N" if e.is_note else "R") + _format_duration(e.duration)
            if e.pitch is not None:
                tok += f"@{e.pitch}"
            toks.append(tok)
        out.append(" ".join(toks))
    return "\n".join(out) + "\n"


def syllable_count(line) -> int:
    return sum(1 for e in line if e.is_note)


def derive_segments(line, long_note_threshold=DEFAULT_LONG_NOTE) -> list:
    """Split a line's notes into segment lengths.

    A segment closes after a note that is immediately followed by a rest
    and after any note lasting at least ``long_note_threshold`` beats.
    Rests belong to no segment.
    """
    threshold = Fraction(str(long_note_threshold))
    if syllable_count(line) == 0:
        raise ContractError("line has no notes")
    segments, current = [], 0
    for i, ev in enumerate(line):
        if not ev.is_note:
            continue
        current += 1
        followed_by_rest = i + 1 < len(line) and not line[i + 1].is_note
        if followed_by_rest or ev.duration >= threshold:
            segments.append(current)
            current = 0
    if current:
        segments.append(current)
    return segments


def tokens_from_segments(segments) -> str:
    segments = list(segments)
    if not segments:
        raise ContractError("need at least one segment")
    if any(int(n) < 1 for n in segments):
        raise ContractError(f"segment lengths must be positive: {segments}")
    parts = []
    for idx, n in enumerate(segments):
        head = "S" if idx == 0 else "B"
        parts.append(head if n == 1 else head + "M" * (n - 2) + "E")
    return "".join(parts)


def validate_structure(tokens: str) -> str:
    """Return ``tokens`` unchanged or raise :class:`ParseError` at the first bad position."""
    if not isinstance(tokens, str):
        tokens = "".join(tokens)
    if not tokens:
        raise ParseError("empty structure token sequence", column=1)
    for i, ch in enumerate(tokens):
        if ch not in STRUCTURE_ALPHABET:
            raise ParseError(f"invalid structure token {ch!r}", column=i + 1)
    if _STRUCTURE_RE.fullmatch(tokens) is None:
        # report the longest valid prefix for a usable column
        m = re.match(r"S(?:M*E)?(?:B(?:M*E)?)*", tokens)
        col = (m.end() if m else 0) + 1
        raise ParseError(f"malformed structure sequence {tokens!r}", column=col)
    return tokens


def boundaries_from_tokens(tokens: str) -> list:
    """Inverse of :func:`tokens_from_segments`."""
    tokens = validate_structure(tokens)
    segments = []
    for i, ch in enumerate(tokens):
        if ch in "SB":
            segments.append(1)
        else:
            segments[-1] += 1
    return segments


def structure_for_line(line, long_note_threshold=DEFAULT_LONG_NOTE) -> str:
    return tokens_from_segments(derive_segments(line, long_note_threshold))


def melody_for_segments(segments, note_beats="0.5", rest_beats="0.5", final_beats="2") -> list:
    """Build a line whose :func:`derive_segments` reproduces ``segments``."""
    events = []
    for idx, n in enumerate(segments):
        last_segment = idx == len(segments) - 1
        for k in range(n):
            is_final = last_segment and k == n - 1
            events.append(note(final_beats if is_final else note_beats))
        if not last_segment:
            events.append(rest(rest_beats))
    return events
