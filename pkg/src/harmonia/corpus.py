"""Lead-sheet ingestion, snippet slicing, augmentation, splits and corpus files.

Lead sheets use a line-oriented text format (``#`` starts a comment)::

    SONG <id> METER <2/4|4/4>
    N <onset_sixteenth> <duration_sixteenths> <midi_pitch>
    C <onset_beat> <pitch>[,<pitch>...]

Chord pitches >= 12 are MIDI pitches; a chord written entirely with values
0-11 is read as pitch classes listed from the lowest voice upward.

Corpus files are binary: the magic ``HDAT1``, a fixed little-endian header
and length-prefixed sample records (see :func:`write_corpus`).
"""

from __future__ import annotations

import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import encodings as enc

logger = logging.getLogger(__name__)

ALLOWED_METERS = ("2/4", "4/4")
HOP_BEATS = 8
SNIPPET_BEATS = enc.N_BEATS

MAGIC = b"HDAT1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<HIIqI")  # version, n_train, n_val, split_seed, crc32
_RECORD_FIXED = struct.Struct("<iBB")  # start_beat, transposition_tag, split
_GRID_BYTES = enc.N_BEATS * enc.N_SLOTS + enc.N_STEPS


class LeadSheetError(ValueError):
    """Malformed lead-sheet text."""

    def __init__(self, message: str, line: int | None = None, reason: str = "parse"):
        self.line = line
        self.reason = reason
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class UnsupportedMeter(LeadSheetError):
    def __init__(self, meter: str, line: int | None = None):
        super().__init__(f"meter {meter} is not supported", line, reason="meter")
        self.meter = meter


class CorpusError(ValueError):
    """Base class for corpus-file and split failures."""


class CorpusVersionError(CorpusError):
    pass


class CorpusCountError(CorpusError):
    pass


class CorpusChecksumError(CorpusError):
    pass


@dataclass
class LeadSheet:
    song_id: str
    meter: str
    melody_notes: list[tuple[int, int, int]] = field(default_factory=list)
    chord_events: list[tuple[int, list[int]]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.meter not in ALLOWED_METERS:
            raise UnsupportedMeter(self.meter)
        _check_monophonic(self.melody_notes)
        onsets = [c[0] for c in self.chord_events]
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise LeadSheetError(f"{self.song_id}: chord onsets must be strictly increasing")

    @property
    def beats_per_bar(self) -> int:
        return int(self.meter.split("/")[0])

    @property
    def n_beats(self) -> int:
        """Song length in beats: the end of the last note or the last chord's beat."""
        end = 0
        if self.melody_notes:
            end = max(end, math.ceil(max(o + d for o, d, _ in self.melody_notes) / 4))
        if self.chord_events:
            end = max(end, self.chord_events[-1][0] + 1)
        return end


def _check_monophonic(notes: Sequence[tuple[int, int, int]], line_of=None) -> None:
    prev_end = -1
    prev_onset = -1
    for i, (onset, dur, _) in enumerate(notes):
        line = line_of[i] if line_of else None
        if dur < 1:
            raise LeadSheetError("note duration must be positive", line)
        if onset <= prev_onset:
            raise LeadSheetError("melody onsets must be strictly increasing", line)
        if onset < prev_end:
            raise LeadSheetError("melody notes overlap (melody must be monophonic)", line)
        prev_onset, prev_end = onset, onset + dur


@dataclass(eq=False)
class Sample:
    song_id: str
    start_beat: int
    chord: np.ndarray
    melody: np.ndarray
    transposition_tag: int = 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.song_id == other.song_id
                and self.start_beat == other.start_beat
                and self.transposition_tag == other.transposition_tag
                and np.array_equal(self.chord, other.chord)
                and np.array_equal(self.melody, other.melody))

    def key(self) -> tuple[str, int, int]:
        return self.song_id, self.start_beat, self.transposition_tag


@dataclass(eq=False)
class CorpusFile:
    train: list[Sample]
    val: list[Sample]
    split_seed: int = 0
    version: int = FORMAT_VERSION

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CorpusFile):
            return NotImplemented
        return (self.split_seed == other.split_seed and self.version == other.version
                and self.train == other.train and self.val == other.val)

    def song_ids(self, split: str) -> set[str]:
        return {s.song_id for s in getattr(self, split)}


# ---------------------------------------------------------------------------
# lead-sheet text format

def _parse_chord_pitches(field_: str, line: int) -> list[int]:
    try:
        values = [int(v) for v in field_.split(",") if v != ""]
    except ValueError:
        raise LeadSheetError(f"bad chord pitch list {field_!r}", line) from None
    if not values:
        raise LeadSheetError("chord has no pitches", line)
    if any(v < 0 or v > 127 for v in values):
        raise LeadSheetError("chord pitch out of MIDI range", line)
    if all(v < 12 for v in values):
        return enc.voice_pitch_classes(values)
    return values


def parse_leadsheets(text: str) -> list[LeadSheet]:
    """Parse every ``SONG`` block in ``text``.  Meter rejection raises :class:`UnsupportedMeter`."""
    songs: list[LeadSheet] = []
    current: dict | None = None

    def finish() -> None:
        if current is not None:
            _check_monophonic(current["notes"], current["note_lines"])
            songs.append(LeadSheet(current["id"], current["meter"],
                                   current["notes"], current["chords"]))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "SONG":
            if len(parts) != 4 or parts[2] != "METER":
                raise LeadSheetError("expected 'SONG <id> METER <meter>'", lineno)
            finish()
            if parts[3] not in ALLOWED_METERS:
                raise UnsupportedMeter(parts[3], lineno)
            current = {"id": parts[1], "meter": parts[3], "notes": [],
                       "note_lines": [], "chords": []}
            continue
        if current is None:
            raise LeadSheetError(f"{tag} record before any SONG line", lineno)
        if tag == "N":
            if len(parts) != 4:
                raise LeadSheetError("expected 'N <onset> <duration> <pitch>'", lineno)
            try:
                onset, dur, pitch = (int(v) for v in parts[1:])
            except ValueError:
                raise LeadSheetError("note fields must be integers", lineno) from None
            if onset < 0 or not 0 <= pitch <= 127:
                raise LeadSheetError("note onset or pitch out of range", lineno)
            current["notes"].append((onset, dur, pitch))
            current["note_lines"].append(lineno)
        elif tag == "C":
            if len(parts) != 3:
                raise LeadSheetError("expected 'C <beat> <pitches>'", lineno)
            try:
                beat = int(parts[1])
            except ValueError:
                raise LeadSheetError("chord onset must be an integer", lineno) from None
            if beat < 0:
                raise LeadSheetError("chord onset must be non-negative", lineno)
            if current["chords"] and beat <= current["chords"][-1][0]:
                raise LeadSheetError("chord onsets must be strictly increasing", lineno)
            current["chords"].append((beat, _parse_chord_pitches(parts[2], lineno)))
        else:
            raise LeadSheetError(f"unknown record type {tag!r}", lineno)
    finish()
    return songs


def ingest_leadsheet(path: str | Path) -> LeadSheet:
    """Read a single-song lead-sheet file."""
    songs = parse_leadsheets(Path(path).read_text())
    if len(songs) != 1:
        raise LeadSheetError(f"{path}: expected exactly one SONG, found {len(songs)}")
    return songs[0]


def format_leadsheet(sheet: LeadSheet) -> str:
    lines = [f"SONG {sheet.song_id} METER {sheet.meter}"]
    lines += [f"N {o} {d} {p}" for o, d, p in sheet.melody_notes]
    lines += [f"C {b} {','.join(str(p) for p in ps)}" for b, ps in sheet.chord_events]
    return "\n".join(lines) + "\n"


def write_leadsheet(sheet: LeadSheet, path: str | Path) -> None:
    Path(path).write_text(format_leadsheet(sheet))


def leadsheet_from_grids(song_id: str, chord: np.ndarray, melody: np.ndarray,
                         meter: str = "4/4") -> LeadSheet:
    """Build a 32-beat lead sheet from grids; chords are voiced upward from C3."""
    chords = [(b, enc.voice_pitch_classes(pcs)) for b, pcs in enc.decode_chord_grid(chord)]
    return LeadSheet(song_id, meter, list(enc.decode_melody_grid(melody)), chords)


# ---------------------------------------------------------------------------
# slicing, augmentation, split

def snippet_count(n_beats: int) -> int:
    return max(0, (n_beats - SNIPPET_BEATS) // HOP_BEATS + 1)


def window_sample(sheet: LeadSheet, start: int = 0) -> Sample:
    """The 32-beat window of ``sheet`` beginning at beat ``start``.

    The chord sounding at the window's first beat is re-struck there; a melody
    note that started before the window is dropped (its remainder becomes rest).
    Windows running past the end of the song are padded with rest and PAD.
    """
    end = start + SNIPPET_BEATS
    events = []
    for i, (beat, pitches) in enumerate(sheet.chord_events):
        nxt = sheet.chord_events[i + 1][0] if i + 1 < len(sheet.chord_events) else math.inf
        if beat < end and nxt > start:
            events.append((max(beat, start) - start, pitches))
    lo, hi = start * enc.STEPS_PER_BEAT, end * enc.STEPS_PER_BEAT
    notes = [(o - lo, d, p) for o, d, p in sheet.melody_notes if lo <= o < hi]
    return Sample(sheet.song_id, start, enc.encode_chord_grid(events),
                  enc.encode_melody_grid(notes))


def slice_snippets(sheet: LeadSheet) -> list[Sample]:
    """Cut a lead sheet into 32-beat windows at an 8-beat hop; short songs yield none."""
    return [window_sample(sheet, n * HOP_BEATS) for n in range(snippet_count(sheet.n_beats))]


def augment_transpositions(samples: Sequence[Sample]) -> list[Sample]:
    """Return all 12 key transpositions of each sample (tag = shift)."""
    out = []
    for s in samples:
        if s.transposition_tag != 0:
            raise CorpusError(f"sample {s.key()} is already augmented")
        for k in range(12):
            out.append(Sample(s.song_id, s.start_beat, enc.transpose_chord(s.chord, k),
                              enc.transpose_melody_key(s.melody, k), k))
    return out


def split_songs(samples: Sequence[Sample], val_fraction: float = 0.05,
                seed: int = 0, augment: bool = True) -> CorpusFile:
    """Partition samples by song with a seeded shuffle; augment the train side."""
    songs = sorted({s.song_id for s in samples})
    if len(songs) < 2:
        raise CorpusError("need at least two songs to split")
    order = np.random.default_rng(seed).permutation(len(songs))
    n_val = min(max(1, round(val_fraction * len(songs))), len(songs) - 1)
    val_ids = {songs[i] for i in order[:n_val]}
    train = [s for s in samples if s.song_id not in val_ids]
    val = [s for s in samples if s.song_id in val_ids]
    if augment:
        train = augment_transpositions(train)
    return CorpusFile(train=train, val=val, split_seed=seed)


# ---------------------------------------------------------------------------
# synthetic corpus

MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
# scale-degree indices of I, ii, iii, IV, V, vi
DIATONIC_DEGREES = (0, 1, 2, 3, 4, 5)
SEVENTH_PROB = 0.25
CHORD_TONE_PROB = 0.7


def synth_song(song_id: str, n_bars: int, rng: np.random.Generator) -> LeadSheet:
    key = int(rng.integers(12))
    scale = [(key + d) % 12 for d in MAJOR_SCALE]
    chords = []
    notes = []
    prev_pitch = 66
    for bar in range(n_bars):
        degree = int(rng.choice(DIATONIC_DEGREES))
        size = 4 if rng.random() < SEVENTH_PROB else 3
        pcs = [scale[(degree + 2 * i) % 7] for i in range(size)]
        chords.append((bar * 4, enc.voice_pitch_classes(pcs)))
        others = [pc for pc in scale if pc not in pcs]
        pos = 0
        while pos < 16:
            dur = min(4 if rng.random() < 0.5 else 2, 16 - pos)
            if rng.random() < CHORD_TONE_PROB:
                pc = pcs[int(rng.integers(len(pcs)))]
            else:
                pc = others[int(rng.integers(len(others)))]
            candidates = [pc + 12 * o for o in (4, 5, 6)]
            candidates = [p for p in candidates if 55 <= p <= 79]
            pitch = min(candidates, key=lambda p: (abs(p - prev_pitch), p))
            notes.append((bar * 16 + pos, dur, pitch))
            prev_pitch = pitch
            pos += dur
    return LeadSheet(song_id, "4/4", notes, chords)


def synth_corpus(n_songs: int, bars_per_song: int, seed: int) -> list[LeadSheet]:
    """Random diatonic lead sheets in major keys (one chord per 4/4 bar)."""
    if n_songs < 1:
        raise ValueError("n_songs must be >= 1")
    if bars_per_song < 8:
        raise ValueError("bars_per_song must be >= 8")
    rng = np.random.default_rng(seed)
    return [synth_song(f"synth{i:05d}", bars_per_song, rng) for i in range(n_songs)]


def build_corpus(sheets: Iterable[LeadSheet], val_fraction: float = 0.05,
                 seed: int = 0) -> CorpusFile:
    samples = [s for sheet in sheets for s in slice_snippets(sheet)]
    return split_songs(samples, val_fraction, seed)


# ---------------------------------------------------------------------------
# binary corpus files

def _pack_record(sample: Sample, split: int) -> bytes:
    sid = sample.song_id.encode("utf-8")
    body = (struct.pack("<H", len(sid)) + sid
            + _RECORD_FIXED.pack(sample.start_beat, sample.transposition_tag, split)
            + sample.chord.astype(np.uint8).tobytes()
            + sample.melody.astype(np.uint8).tobytes())
    return struct.pack("<I", len(body)) + body


def _unpack_record(body: bytes) -> tuple[Sample, int]:
    (n,) = struct.unpack_from("<H", body, 0)
    sid = body[2:2 + n].decode("utf-8")
    start, tag, split = _RECORD_FIXED.unpack_from(body, 2 + n)
    off = 2 + n + _RECORD_FIXED.size
    grids = np.frombuffer(body, dtype=np.uint8, count=_GRID_BYTES, offset=off).astype(np.int64)
    chord = grids[:enc.N_BEATS * enc.N_SLOTS].reshape(enc.N_BEATS, enc.N_SLOTS)
    melody = grids[enc.N_BEATS * enc.N_SLOTS:]
    return Sample(sid, start, chord, melody, tag), split


def corpus_bytes(corpus: CorpusFile) -> bytes:
    payload = b"".join([_pack_record(s, 0) for s in corpus.train]
                       + [_pack_record(s, 1) for s in corpus.val])
    header = _HEADER.pack(corpus.version, len(corpus.train), len(corpus.val),
                          corpus.split_seed, zlib.crc32(payload))
    return MAGIC + header + payload


def write_corpus(corpus: CorpusFile, path: str | Path) -> None:
    """Write ``corpus`` as ``HDAT1`` + header + records.

    Header (little-endian): u16 version, u32 train count, u32 val count,
    i64 split seed, u32 CRC-32 of the record payload.  Each record is a u32
    byte length followed by: u16 id length, utf-8 song id, i32 start beat,
    u8 transposition tag, u8 split (0 train, 1 val), 128 chord token bytes
    (row-major 32x4) and 128 melody token bytes.
    """
    Path(path).write_bytes(corpus_bytes(corpus))


def read_corpus(path: str | Path) -> CorpusFile:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CorpusVersionError(f"{path}: not a corpus file (bad magic)")
    if len(data) < len(MAGIC) + _HEADER.size:
        raise CorpusCountError(f"{path}: truncated header")
    version, n_train, n_val, seed, crc = _HEADER.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CorpusVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    buf = io.BytesIO(data[len(MAGIC) + _HEADER.size:])
    train, val = [], []
    while True:
        prefix = buf.read(4)
        if len(prefix) < 4:
            if prefix:
                raise CorpusCountError(f"{path}: truncated record length")
            break
        (size,) = struct.unpack("<I", prefix)
        body = buf.read(size)
        if len(body) < size:
            raise CorpusCountError(f"{path}: truncated record")
        sample, split = _unpack_record(body)
        (val if split else train).append(sample)
    if (len(train), len(val)) != (n_train, n_val):
        raise CorpusCountError(f"{path}: header promises {n_train}+{n_val} records, "
                               f"found {len(train)}+{len(val)}")
    if zlib.crc32(buf.getvalue()) != crc:
        raise CorpusChecksumError(f"{path}: checksum mismatch")
    return CorpusFile(train=train, val=val, split_seed=seed, version=version)
