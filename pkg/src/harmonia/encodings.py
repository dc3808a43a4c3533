"""Grid encodings for chord progressions and lead melodies.

A chord progression is a 32 x 4 integer grid: one row per beat, one column per
chord slot (lowest sounding pitch first), values 0-11 for pitch classes and 12
for padding.  A melody is a flat sequence of 128 sixteenth-note tokens:

    0..119   onset, token = octave * 12 + pitch_class
    120      hold
    121      rest
    122      mask (only produced by masking corruption, never a target)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

N_BEATS = 32
N_SLOTS = 4
STEPS_PER_BEAT = 4
N_STEPS = N_BEATS * STEPS_PER_BEAT

N_PITCH_CLASSES = 12
N_OCTAVES = 10
PAD = 12
CHORD_VOCAB = 13

HOLD = N_OCTAVES * N_PITCH_CLASSES  # 120
REST = HOLD + 1  # 121
MASK = REST + 1  # 122
MELODY_TARGET_VOCAB = 122
MELODY_VOCAB = 123


class EncodingError(ValueError):
    """Raised when an input violates a grid invariant."""


class StepKind(str, Enum):
    ONSET = "onset"
    HOLD = "hold"
    REST = "rest"


class MelodyStep(NamedTuple):
    kind: StepKind
    pitch_class: int | None = None
    octave: int | None = None


def step_to_token(step: MelodyStep) -> int:
    if step.kind is StepKind.ONSET:
        if step.pitch_class is None or step.octave is None:
            raise EncodingError("onset step needs pitch_class and octave")
        if not (0 <= step.pitch_class < 12 and 0 <= step.octave < N_OCTAVES):
            raise EncodingError(f"onset out of range: {step}")
        return step.octave * 12 + step.pitch_class
    if step.pitch_class is not None or step.octave is not None:
        raise EncodingError(f"{step.kind.value} step cannot carry a pitch")
    return HOLD if step.kind is StepKind.HOLD else REST


def token_to_step(token: int) -> MelodyStep:
    token = int(token)
    if 0 <= token < HOLD:
        return MelodyStep(StepKind.ONSET, token % 12, token // 12)
    if token == HOLD:
        return MelodyStep(StepKind.HOLD)
    if token == REST:
        return MelodyStep(StepKind.REST)
    raise EncodingError(f"token {token} is not a melody step")


# ---------------------------------------------------------------------------
# validation

def validate_chord_grid(grid: np.ndarray) -> None:
    if grid.shape != (N_BEATS, N_SLOTS):
        raise EncodingError(f"chord grid must be {N_BEATS}x{N_SLOTS}, got {grid.shape}")
    if grid.min() < 0 or grid.max() > PAD:
        raise EncodingError("chord tokens must lie in 0..12")
    is_pad = grid == PAD
    # once a slot is PAD, every later slot in the row must be PAD too
    if np.any(is_pad[:, :-1] & ~is_pad[:, 1:]):
        raise EncodingError("PAD must form a suffix of each chord row")


def validate_melody_grid(grid: np.ndarray, allow_mask: bool = False) -> None:
    if grid.shape != (N_STEPS,):
        raise EncodingError(f"melody grid must have {N_STEPS} steps, got {grid.shape}")
    top = MASK if allow_mask else REST
    if grid.min() < 0 or grid.max() > top:
        raise EncodingError(f"melody tokens must lie in 0..{top}")
    sounding = False
    for i, tok in enumerate(grid):
        if tok == HOLD:
            if not sounding:
                raise EncodingError(f"hold at step {i} does not continue a note")
        elif tok < HOLD:
            sounding = True
        elif tok == REST:
            sounding = False
        # MASK hides the true state, so the next HOLD cannot be judged
        else:
            sounding = True


# ---------------------------------------------------------------------------
# chords

def voice_pitch_classes(pcs: Sequence[int], base: int = 48) -> list[int]:
    """Stack pitch classes upward in the given order, starting near ``base``."""
    pitches: list[int] = []
    for pc in pcs:
        if not pitches:
            pitches.append(base + (pc - base) % 12)
        else:
            prev = pitches[-1]
            pitches.append(prev + 1 + (pc - prev - 1) % 12)
    return pitches


def encode_chord_grid(events: Sequence[tuple[int, Sequence[int]]]) -> np.ndarray:
    """Quantize chord events (onset beat, MIDI pitches) into a chord grid.

    Each chord sounds until the next onset or the end of the window.  Slots hold
    the pitch classes of the four lowest pitches in ascending pitch order.
    """
    grid = np.full((N_BEATS, N_SLOTS), PAD, dtype=np.int64)
    prev = -1
    for onset, pitches in events:
        if not 0 <= onset < N_BEATS:
            raise EncodingError(f"chord onset {onset} outside 0..{N_BEATS - 1}")
        if onset <= prev:
            raise EncodingError("chord onsets must be strictly increasing")
        if len(pitches) == 0:
            raise EncodingError(f"chord at beat {onset} has no pitches")
        prev = onset
    for n, (onset, pitches) in enumerate(events):
        end = events[n + 1][0] if n + 1 < len(events) else N_BEATS
        lowest = sorted(pitches)[:N_SLOTS]
        row = [p % 12 for p in lowest] + [PAD] * (N_SLOTS - len(lowest))
        grid[onset:end] = row
    return grid


def decode_chord_grid(grid: np.ndarray) -> list[tuple[int, list[int]]]:
    """Merge repeated rows back into (onset beat, ordered pitch classes) events.

    The slot order is kept (as a list) so that voicings survive a round trip;
    compare as sets where only the harmony matters.
    """
    events: list[tuple[int, list[int]]] = []
    prev = None
    for t, row in enumerate(np.asarray(grid)):
        key = tuple(int(v) for v in row)
        if key != prev and row[0] != PAD:
            events.append((t, [v for v in key if v != PAD]))
        prev = key
    return events


def normalize_chord_grid(grid: np.ndarray) -> np.ndarray:
    """Force the PAD-suffix invariant: everything after the first PAD becomes PAD."""
    grid = np.array(grid, dtype=np.int64, copy=True)
    after_pad = np.cumsum(grid == PAD, axis=-1) > 0
    grid[after_pad] = PAD
    return grid


def transpose_chord(grid: np.ndarray, semitones: int) -> np.ndarray:
    grid = np.asarray(grid)
    shift = int(semitones) % 12
    return np.where(grid == PAD, PAD, (grid + shift) % 12).astype(grid.dtype)


# ---------------------------------------------------------------------------
# melodies

def encode_melody_grid(notes: Sequence[tuple[int, int, int]]) -> np.ndarray:
    """Quantize monophonic (onset sixteenth, duration sixteenths, MIDI pitch) notes."""
    grid = np.full(N_STEPS, REST, dtype=np.int64)
    prev_end = 0
    prev_onset = -1
    for onset, duration, pitch in notes:
        if not 0 <= onset < N_STEPS:
            raise EncodingError(f"melody onset {onset} outside 0..{N_STEPS - 1}")
        if duration < 1:
            raise EncodingError(f"note at step {onset} has non-positive duration")
        if onset <= prev_onset:
            raise EncodingError("melody onsets must be strictly increasing")
        if onset < prev_end:
            raise EncodingError(f"note at step {onset} overlaps the previous note")
        end = onset + duration
        if end > N_STEPS:
            logger.debug("truncating note at step %d from %d to %d steps",
                         onset, duration, N_STEPS - onset)
            end = N_STEPS
        octave = min(max(pitch // 12, 0), N_OCTAVES - 1)
        grid[onset] = octave * 12 + pitch % 12
        grid[onset + 1:end] = HOLD
        prev_onset, prev_end = onset, end
    return grid


def decode_melody_grid(grid: np.ndarray) -> list[tuple[int, int, int]]:
    """Inverse of :func:`encode_melody_grid` (pitches come back with clamped octaves)."""
    notes: list[tuple[int, int, int]] = []
    for s, tok in enumerate(np.asarray(grid)):
        if tok < HOLD:
            notes.append([s, 1, int(tok)])  # type: ignore[arg-type]
        elif tok == HOLD and notes and notes[-1][0] + notes[-1][1] == s:
            notes[-1][1] += 1  # type: ignore[index]
    return [tuple(n) for n in notes]  # type: ignore[misc]


def transpose_melody(grid: np.ndarray, semitones: int) -> np.ndarray:
    """Shift every onset by ``semitones`` in absolute pitch; octave clamped to 0..9."""
    grid = np.asarray(grid)
    out = grid.copy()
    onset = grid < HOLD
    pitch = grid[onset] + int(semitones)
    octave = np.clip(pitch // 12, 0, N_OCTAVES - 1)
    out[onset] = octave * 12 + pitch % 12
    return out


def key_shift(k: int) -> int:
    """Smallest-motion signed shift for a key change of ``k`` semitones: -5..+6."""
    return (int(k) + 5) % 12 - 5


def transpose_melody_key(grid: np.ndarray, k: int) -> np.ndarray:
    """Move a melody to the key ``k`` semitones away, staying in its register.

    Pitch classes move by ``k mod 12`` while the absolute motion is kept within
    -5..+6 semitones, so ``k = 12`` is the identity.
    """
    return transpose_melody(grid, key_shift(k))


def key_transpose_table() -> np.ndarray:
    """Lookup table ``[k, token] -> token`` implementing ``transpose_melody_key``."""
    tokens = np.arange(MELODY_VOCAB)
    table = np.empty((12, MELODY_VOCAB), dtype=np.int64)
    for k in range(12):
        table[k] = tokens
        table[k, :HOLD] = transpose_melody_key(tokens[:HOLD], k)
    return table


_KEY_TABLE = key_transpose_table()


def beat_pool_condition(melody, embed):
    """Sum token embeddings over each beat's four sixteenth steps.

    Works for numpy arrays and torch tensors alike: ``melody`` has shape
    ``(..., 128)`` and ``embed`` is a ``(vocab, width)`` table, or a callable
    mapping token arrays to ``(..., width)`` vectors.
    """
    vectors = embed(melody) if callable(embed) else embed[melody]
    lead = tuple(vectors.shape[:-2])
    return vectors.reshape(*lead, N_BEATS, STEPS_PER_BEAT, vectors.shape[-1]).sum(-2)


# ---------------------------------------------------------------------------
# corruption

class CorruptionMethod(str, Enum):
    TRANSPOSE = "transpose"
    MASK = "mask"
    NONE = "none"


@dataclass(frozen=True)
class CorruptionSpec:
    method: CorruptionMethod = CorruptionMethod.TRANSPOSE
    mask_rate: float | None = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", CorruptionMethod(self.method))
        if self.mask_rate is not None and not 0.0 <= self.mask_rate <= 1.0:
            raise EncodingError(f"mask_rate must lie in [0, 1], got {self.mask_rate}")
        if self.method is CorruptionMethod.MASK and self.mask_rate is None:
            raise EncodingError("masking corruption needs a mask_rate")


def corrupt(melody: np.ndarray, spec: CorruptionSpec,
            rng: np.random.Generator) -> tuple[np.ndarray, int | None]:
    """Corrupt a single melody grid.  Returns the corrupted grid and the shift used."""
    out, shifts = corrupt_batch(np.asarray(melody)[None], spec, rng)
    return out[0], (None if shifts is None else int(shifts[0]))


def corrupt_batch(melodies: np.ndarray, spec: CorruptionSpec,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """Corrupt a ``(batch, 128)`` array of melody tokens, one draw per row."""
    if spec.method is CorruptionMethod.TRANSPOSE:
        shifts = rng.integers(0, 12, size=len(melodies))
        return _KEY_TABLE[shifts[:, None], melodies], shifts
    if spec.method is CorruptionMethod.MASK:
        if spec.mask_rate is None:
            raise EncodingError("masking corruption needs a mask_rate")
        hit = rng.random(melodies.shape) < spec.mask_rate
        return np.where(hit, MASK, melodies), None
    return melodies.copy(), None
