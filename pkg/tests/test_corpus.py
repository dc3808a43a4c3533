import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmonia import corpus as C
from harmonia import encodings as enc


def _song_text(song_id="s1", meter="4/4", beats=48):
    lines = [f"SONG {song_id} METER {meter}", "# a comment"]
    for beat in range(0, beats, 4):
        lines.append(f"C {beat} 48,52,55")
    for step in range(0, beats * 4, 8):
        lines.append(f"N {step} {min(8, beats * 4 - step)} {60 + (step // 8) % 5}")
    return "\n".join(lines) + "\n"


def test_ingest_well_formed(tmp_path):
    path = tmp_path / "song.txt"
    path.write_text(_song_text())
    sheet = C.ingest_leadsheet(path)
    assert sheet.song_id == "s1" and sheet.meter == "4/4"
    assert sheet.n_beats == 48
    assert sheet.chord_events[0] == (0, [48, 52, 55])


def test_ingest_rejects_three_four(tmp_path):
    path = tmp_path / "waltz.txt"
    path.write_text(_song_text(meter="3/4"))
    with pytest.raises(C.UnsupportedMeter) as err:
        C.ingest_leadsheet(path)
    assert err.value.reason == "meter"


def test_ingest_overlap_is_parse_error(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("SONG x METER 4/4\nN 0 4 60\nN 2 4 62\n")
    with pytest.raises(C.LeadSheetError) as err:
        C.ingest_leadsheet(path)
    assert err.value.line == 3


@pytest.mark.parametrize("text,line", [
    ("SONG x METER 4/4\nN 0 4\n", 2),
    ("SONG x METER 4/4\nC 0 a,b\n", 2),
    ("N 0 4 60\n", 1),
    ("SONG x METER 4/4\nX 1\n", 2),
    ("SONG x 4/4\n", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(C.LeadSheetError) as err:
        C.parse_leadsheets(text)
    assert err.value.line == line


def test_pitch_class_chords_are_voiced_upward():
    (sheet,) = C.parse_leadsheets("SONG x METER 4/4\nC 0 7,11,2\nN 0 4 67\n")
    assert sheet.chord_events[0][1] == [55, 59, 62]
    assert enc.encode_chord_grid(sheet.chord_events)[0].tolist() == [7, 11, 2, enc.PAD]


def test_format_parse_round_trip():
    (sheet,) = C.parse_leadsheets(_song_text())
    (again,) = C.parse_leadsheets(C.format_leadsheet(sheet))
    assert again == sheet


@pytest.mark.parametrize("beats,expected", [(48, [0, 8, 16]), (32, [0]), (31, [])])
def test_slice_counts(beats, expected):
    (sheet,) = C.parse_leadsheets(_song_text(beats=beats))
    assert sheet.n_beats == beats
    assert [s.start_beat for s in C.slice_snippets(sheet)] == expected


@settings(max_examples=100)
@given(st.integers(0, 400))
def test_snippet_count_formula(beats):
    assert C.snippet_count(beats) == max(0, (beats - 32) // 8 + 1)


def test_slice_restrikes_chord_and_drops_carried_note():
    sheet = C.LeadSheet("s", "4/4", [(28, 8, 60), (36, 4, 62)],
                        [(0, [48, 52, 55]), (6, [50, 53, 57]), (40, [43, 47, 50])])
    samples = C.slice_snippets(sheet)
    second = samples[1]  # starts at beat 8
    assert second.chord[0].tolist() == [2, 5, 9, enc.PAD]
    assert second.chord[31].tolist() == [2, 5, 9, enc.PAD]  # beat 40 is past the window
    # the note starting at step 28 rang into the window; its tail becomes rest
    assert second.melody[0] == enc.REST
    assert enc.token_to_step(second.melody[4]).pitch_class == 2


def test_two_four_slices_by_beats():
    sheet = C.LeadSheet("s", "2/4", [(0, 4, 60), (156, 4, 60)], [(0, [48, 52, 55])])
    assert sheet.n_beats == 40  # 20 bars of 2/4
    assert [s.start_beat for s in C.slice_snippets(sheet)] == [0, 8]


def _samples(n_songs=5, per_song=1):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n_songs):
        for j in range(per_song):
            chord = enc.encode_chord_grid([(0, list(48 + rng.integers(0, 12, 3)))])
            melody = enc.encode_melody_grid([(0, 4, int(60 + rng.integers(12)))])
            out.append(C.Sample(f"song{i}", 8 * j, chord, melody))
    return out


def test_augment_twelve_keys():
    samples = _samples(5)
    aug = C.augment_transpositions(samples)
    assert len(aug) == 60
    assert [s for s in aug if s.transposition_tag == 0] == samples
    for s in aug:
        base = samples[int(s.song_id[4:])]
        k = s.transposition_tag
        assert np.array_equal(s.chord, enc.transpose_chord(base.chord, k))
        assert np.array_equal(s.melody, enc.transpose_melody_key(base.melody, k))
    with pytest.raises(C.CorpusError):
        C.augment_transpositions(aug)


def test_split_sizes_and_train_only_augmentation():
    samples = _samples(100, 2)
    corpus = C.split_songs(samples, 0.05, seed=3)
    assert len(corpus.song_ids("val")) == 5
    assert len(corpus.song_ids("train")) == 95
    assert len(corpus.train) == 95 * 2 * 12
    assert all(s.transposition_tag == 0 for s in corpus.val)


def test_split_deterministic_bytes():
    samples = _samples(20, 2)
    a = C.corpus_bytes(C.split_songs(samples, 0.05, seed=9))
    b = C.corpus_bytes(C.split_songs(samples, 0.05, seed=9))
    assert a == b


def test_split_needs_two_songs():
    with pytest.raises(C.CorpusError):
        C.split_songs(_samples(1, 3), 0.05, 0)


def test_split_disjoint_over_many_seeds():
    samples = _samples(40)
    for seed in range(1000):
        corpus = C.split_songs(samples, 0.1, seed, augment=False)
        assert not corpus.song_ids("train") & corpus.song_ids("val")
        assert len(corpus.train) + len(corpus.val) == len(samples)


# -- synthetic corpus -----------------------------------------------------------

def test_synth_in_key_and_deterministic():
    sheets = C.synth_corpus(20, 8, seed=5)
    assert sheets == C.synth_corpus(20, 8, seed=5)
    assert sheets != C.synth_corpus(20, 8, seed=6)
    for sheet in sheets:
        pcs = {p % 12 for _, _, p in sheet.melody_notes}
        chord_pcs = {p % 12 for _, ps in sheet.chord_events for p in ps}
        # some major scale contains every melody and chord pitch class
        scales = [{(k + d) % 12 for d in C.MAJOR_SCALE} for k in range(12)]
        assert any(pcs | chord_pcs <= s for s in scales)
        assert sheet.n_beats == 32


def test_synth_chord_tone_fraction():
    sheets = C.synth_corpus(125, 16, seed=11)
    chord_tone = total = 0
    for sheet in sheets:
        for onset, _, pitch in sheet.melody_notes:
            beat = onset // 4
            active = [ps for b, ps in sheet.chord_events if b <= beat][-1]
            chord_tone += pitch % 12 in {p % 12 for p in active}
            total += 1
    assert total >= 10_000
    assert 0.65 <= chord_tone / total <= 0.75


def test_synth_chords_are_root_position_stacks():
    for sheet in C.synth_corpus(10, 8, seed=1):
        for _, pitches in sheet.chord_events:
            assert pitches == sorted(pitches)
            gaps = np.diff(pitches)
            assert set(gaps) <= {3, 4}


def test_synth_argument_checks():
    with pytest.raises(ValueError):
        C.synth_corpus(0, 8, 0)
    with pytest.raises(ValueError):
        C.synth_corpus(1, 7, 0)


# -- corpus files ---------------------------------------------------------------

def test_corpus_round_trip(tmp_path):
    corpus = C.build_corpus(C.synth_corpus(6, 12, 2), 0.2, 4)
    path = tmp_path / "c.hdat"
    C.write_corpus(corpus, path)
    assert C.read_corpus(path) == corpus
    assert path.read_bytes()[:5] == b"HDAT1"


def test_empty_corpus_round_trip(tmp_path):
    path = tmp_path / "e.hdat"
    C.write_corpus(C.CorpusFile([], []), path)
    assert C.read_corpus(path) == C.CorpusFile([], [])


def test_truncated_corpus(tmp_path):
    corpus = C.build_corpus(C.synth_corpus(6, 12, 2), 0.2, 4)
    path = tmp_path / "c.hdat"
    C.write_corpus(corpus, path)
    data = path.read_bytes()
    record = 4 + 2 + len("synth00000") + 6 + 256
    path.write_bytes(data[:-record])
    with pytest.raises(C.CorpusCountError):
        C.read_corpus(path)
    path.write_bytes(data[:-10])
    with pytest.raises(C.CorpusCountError):
        C.read_corpus(path)


def test_corrupted_and_foreign_files(tmp_path):
    corpus = C.build_corpus(C.synth_corpus(4, 8, 2), 0.25, 4)
    data = bytearray(C.corpus_bytes(corpus))
    path = tmp_path / "c.hdat"
    flipped = data.copy()
    flipped[-1] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(C.CorpusChecksumError):
        C.read_corpus(path)
    wrong = data.copy()
    wrong[5] = 9
    path.write_bytes(bytes(wrong))
    with pytest.raises(C.CorpusVersionError):
        C.read_corpus(path)
    path.write_bytes(b"nope")
    with pytest.raises(C.CorpusVersionError):
        C.read_corpus(path)
