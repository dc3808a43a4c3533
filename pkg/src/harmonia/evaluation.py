"""Objective metrics: transposition-similarity probe, harmony histogram, swap harmonization."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import encodings as enc
from .corpus import Sample
from .model import ContractError, HarmonyModel

BUCKETS = ("root", "third", "fifth", "seventh", "others")


@dataclass
class SimilarityProfile:
    values: list[float]  # index 0 holds i = 1, index 11 holds i = 12

    def at(self, i: int) -> float:
        return self.values[i - 1]

    def mean_nontrivial(self) -> float:
        return float(np.mean(self.values[:11]))


@dataclass
class HarmonyHistogram:
    counts: dict[str, int]

    @property
    def counted_notes(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict[str, float]:
        n = self.counted_notes
        return {b: (self.counts[b] / n if n else 0.0) for b in BUCKETS}

    def __getitem__(self, bucket: str) -> float:
        return self.fractions[bucket]


def _as_batch(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    chord = torch.from_numpy(np.stack([s.chord for s in samples]).astype(np.int64))
    melody = torch.from_numpy(np.stack([s.melody for s in samples]).astype(np.int64))
    return chord, melody


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(eps)


@torch.no_grad()
def posterior_means(model: HarmonyModel, samples: Sequence[Sample],
                    batch_size: int = 256) -> torch.Tensor:
    model.eval()
    out = []
    for lo in range(0, len(samples), batch_size):
        chord, melody = _as_batch(samples[lo:lo + batch_size])
        out.append(model.encode(chord, melody).mean)
    return torch.cat(out)


def transposition_similarity(model: HarmonyModel, samples: Sequence[Sample]) -> SimilarityProfile:
    """Mean cosine similarity between z(x, c) and z(T_i x, T_i c) for i = 1..12."""
    if not samples:
        raise ValueError("empty evaluation set")
    if any(s.transposition_tag != 0 for s in samples):
        raise ValueError("evaluation samples must be unaugmented")
    base = posterior_means(model, samples)
    values = []
    for i in range(1, 13):
        moved = [Sample(s.song_id, s.start_beat, enc.transpose_chord(s.chord, i),
                        enc.transpose_melody_key(s.melody, i)) for s in samples]
        values.append(float(cosine(base, posterior_means(model, moved)).mean()))
    return SimilarityProfile(values)


def harmony_histogram(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> HarmonyHistogram:
    """Count melody onsets by the chord slot they coincide with.

    Slots 1-4 are read as root, third, fifth and seventh; an onset matching no
    slot counts as "others".  Onsets over an all-PAD beat are skipped.
    """
    counts = dict.fromkeys(BUCKETS, 0)
    for melody, chord in pairs:
        melody = np.asarray(melody)
        chord = np.asarray(chord)
        if melody.shape != (enc.N_STEPS,) or chord.shape != (enc.N_BEATS, enc.N_SLOTS):
            raise ValueError("melody and chord grids are not aligned")
        steps = np.flatnonzero(melody < enc.HOLD)
        if steps.size == 0:
            continue
        rows = chord[steps // enc.STEPS_PER_BEAT]
        pcs = melody[steps] % 12
        voiced = rows[:, 0] != enc.PAD
        hit = rows == pcs[:, None]
        any_hit = hit.any(axis=1)
        first = hit.argmax(axis=1)
        for slot, name in enumerate(BUCKETS[:4]):
            counts[name] += int(np.sum(voiced & any_hit & (first == slot)))
        counts["others"] += int(np.sum(voiced & ~any_hit))
    return HarmonyHistogram(counts)


def _check_model_input(model: HarmonyModel, chord: np.ndarray, melody: np.ndarray) -> None:
    try:
        enc.validate_chord_grid(np.asarray(chord))
        enc.validate_melody_grid(np.asarray(melody))
    except enc.EncodingError as err:
        raise ContractError(str(err)) from err


@torch.no_grad()
def swap_harmonize(model: HarmonyModel, source: Sample, melody_b: np.ndarray) -> np.ndarray:
    """Harmonize ``melody_b`` in the style of ``source``'s chords (greedy, deterministic)."""
    _check_model_input(model, source.chord, source.melody)
    _check_model_input(model, source.chord, melody_b)
    return swap_harmonize_batch(model, [source], [np.asarray(melody_b)])[0]


@torch.no_grad()
def swap_harmonize_batch(model: HarmonyModel, sources: Sequence[Sample],
                         melodies: Sequence[np.ndarray], batch_size: int = 256) -> list[np.ndarray]:
    model.eval()
    out: list[np.ndarray] = []
    for lo in range(0, len(sources), batch_size):
        chord, melody = _as_batch(sources[lo:lo + batch_size])
        z = model.encode(chord, melody).mean
        target = torch.from_numpy(np.stack(melodies[lo:lo + batch_size]).astype(np.int64))
        out.extend(model.harmonize(z, target).numpy())
    return out


def swap_pairs(n: int, seed: int) -> list[tuple[int, int]]:
    """(style source, melody source) index pairs from a seeded permutation.

    Consecutive permuted items swap with each other. With an odd count the
    last three permuted items form a cycle instead, so every sample is used
    exactly once as style source and once as melody.
    """
    if n < 2:
        raise ValueError("need at least two samples to pair")
    perm = np.random.default_rng(seed).permutation(n).tolist()
    head = perm[:n - 3] if n % 2 else perm
    pairs = []
    for a, b in zip(head[0::2], head[1::2]):
        pairs += [(a, b), (b, a)]
    if n % 2:
        x, y, z = perm[-3:]
        pairs += [(x, y), (y, z), (z, x)]
    return pairs


def evaluate_controllability(model: HarmonyModel, samples: Sequence[Sample],
                             seed: int = 0) -> tuple[HarmonyHistogram, HarmonyHistogram]:
    """Histogram of swapped-melody generations, plus the ground-truth histogram."""
    pairs = swap_pairs(len(samples), seed)
    sources = [samples[a] for a, _ in pairs]
    melodies = [samples[b].melody for _, b in pairs]
    chords = swap_harmonize_batch(model, sources, melodies)
    generated = harmony_histogram(list(zip(melodies, chords)))
    truth = harmony_histogram([(s.melody, s.chord) for s in samples])
    return generated, truth


# ---------------------------------------------------------------------------
# reports

def similarity_report(profile: SimilarityProfile) -> dict:
    return {"metric": "transposition_similarity",
            "rows": [{"semitones": i, "cosine": v} for i, v in enumerate(profile.values, 1)],
            "mean_1_to_11": profile.mean_nontrivial()}


def histogram_report(hist: HarmonyHistogram, name: str) -> dict:
    return {"metric": name, "counted_notes": hist.counted_notes,
            "rows": [{"bucket": b, "fraction": hist.fractions[b], "count": hist.counts[b]}
                     for b in BUCKETS]}


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_csv(rows: list[dict], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def comparison_table(results: dict[str, dict]) -> list[dict]:
    """One row per metric entry, two columns (similarity, others) per run."""
    rows = []
    for i in range(12):
        row = {"row": f"similarity_T{i + 1}"}
        for name, r in results.items():
            row[name] = r["similarity"].values[i]
        rows.append(row)
    for b in BUCKETS:
        row = {"row": f"histogram_{b}"}
        for name, r in results.items():
            row[name] = r["histogram"].fractions[b]
        rows.append(row)
    return rows
