"""Data model, manifest I/O, and the synthetic two-dialect corpus generator.

The synthetic mini-language is built from CV morae: every word is 2..4
consonant-vowel pairs, every mora carries a high (H) or low (L) accent
target per dialect, and utterance pitch contours are rendered directly
from those targets. This gives every downstream model an exact oracle.

Manifest format (UTF-8, one record per line, tab-separated):

    utt_id  speaker_id  dialect  graphemes  phonemes  alignment  feature_path  [oracle_accent]

where graphemes/phonemes are space-separated, alignment is semicolon-
separated ``index:start:end`` triples (end exclusive), and oracle_accent
is one H/L symbol per mora. Feature files use the ``ALVF`` binary format:
magic ``ALVF``, little-endian u32 frame count T, u32 dimensionality D,
then T*D float32 values row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, FormatError, ManifestError, OOVError

DialectID = str

CONSONANTS = ("k", "s", "t", "n", "h", "m", "r", "g", "z", "d")
VOWELS = ("a", "i", "u", "e", "o")

# Gentle downward pitch drift across each utterance, in log-Hz per second.
# Small relative to the H-L gap so it acts as a confound, not a signal.
DECLINATION_SLOPE = -0.1

FEATURE_MAGIC = b"ALVF"


@dataclass(frozen=True)
class Alignment:
    """Phoneme-to-frame spans: (phoneme_index, start_frame, end_frame)."""

    spans: tuple[tuple[int, int, int], ...]

    def validate(self) -> None:
        prev_end = None
        for i, (p, start, end) in enumerate(self.spans):
            if p != i:
                raise AlignmentError(f"span {i}: phoneme index {p} out of order")
            if start >= end:
                raise AlignmentError(f"span {i}: empty or inverted range {start}:{end}")
            if prev_end is not None and start < prev_end:
                raise AlignmentError(f"span {i}: overlaps previous span")
            prev_end = end

    @property
    def total_frames(self) -> int:
        return self.spans[-1][2] if self.spans else 0

    def durations(self) -> np.ndarray:
        return np.array([end - start for _, start, end in self.spans], dtype=np.int64)


@dataclass
class Utterance:
    """One text/speech item with its alignment and feature reference.

    ``feature_ref`` is either a path string (relative to the manifest
    directory) or an in-memory T x D float32 array; ``oracle_accent`` is
    one H/L symbol per mora and only present for synthetic data.
    """

    utt_id: str
    speaker_id: str
    dialect: DialectID
    graphemes: tuple[str, ...]
    phonemes: tuple[str, ...]
    alignment: Alignment
    feature_ref: str | np.ndarray | None = None
    oracle_accent: str | None = None

    def validate(self) -> None:
        self.alignment.validate()
        if len(self.alignment.spans) != len(self.phonemes):
            raise AlignmentError(
                f"{self.utt_id}: {len(self.alignment.spans)} spans for "
                f"{len(self.phonemes)} phonemes"
            )
        prev_end = 0
        for _, start, end in self.alignment.spans:
            if start != prev_end:
                raise AlignmentError(f"{self.utt_id}: gap before frame {start}")
            prev_end = end
        if self.oracle_accent is not None:
            if set(self.oracle_accent) - {"H", "L"}:
                raise ManifestError(f"{self.utt_id}: bad accent symbols")
            if len(self.oracle_accent) * 2 != len(self.phonemes):
                raise ManifestError(
                    f"{self.utt_id}: {len(self.oracle_accent)} accent labels for "
                    f"{len(self.phonemes)} phonemes"
                )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        if (
            self.utt_id != other.utt_id
            or self.speaker_id != other.speaker_id
            or self.dialect != other.dialect
            or self.graphemes != other.graphemes
            or self.phonemes != other.phonemes
            or self.alignment != other.alignment
            or self.oracle_accent != other.oracle_accent
        ):
            return False
        a, b = self.feature_ref, other.feature_ref
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            return (
                isinstance(a, np.ndarray)
                and isinstance(b, np.ndarray)
                and a.shape == b.shape
                and np.array_equal(a, b)
            )
        return a == b


@dataclass
class AccentRuleTable:
    """Per-dialect oracle: word -> one H/L symbol per mora."""

    dialect: DialectID
    rules: dict[str, str]

    def pattern(self, word: str) -> str:
        try:
            return self.rules[word]
        except KeyError:
            raise OOVError(f"no accent rule for word {word!r}") from None


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: str
    native_dialect: DialectID
    log_f0_offset: float = 0.0
    duration_scale: float = 1.0


@dataclass
class SyntheticCorpusConfig:
    lexicon_size: int = 40
    sentence_count: int = 200
    words_per_sentence: tuple[int, int] = (3, 5)
    divergent_fraction: float = 0.5
    speakers: tuple[SpeakerSpec, ...] = (
        SpeakerSpec("spkA", "DLA", 0.12, 1.0),
        SpeakerSpec("spkB", "DLB", -0.08, 1.15),
    )
    frame_rate: float = 100.0
    high_logf0: float = 5.6
    low_logf0: float = 5.1
    noise_std: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.lexicon_size < 2:
            raise ConfigError("lexicon_size must be >= 2")
        if self.sentence_count < 1:
            raise ConfigError("sentence_count must be >= 1")
        lo, hi = self.words_per_sentence
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad words_per_sentence range {self.words_per_sentence}")
        if not 0.0 <= self.divergent_fraction <= 1.0:
            raise ConfigError("divergent_fraction must be in [0, 1]")
        if self.high_logf0 <= self.low_logf0:
            raise ConfigError("high_logf0 must exceed low_logf0")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")
        if len({s.native_dialect for s in self.speakers}) != 2:
            raise ConfigError("speakers must cover exactly two dialects")

    @property
    def dialects(self) -> tuple[DialectID, DialectID]:
        seen: list[DialectID] = []
        for s in self.speakers:
            if s.native_dialect not in seen:
                seen.append(s.native_dialect)
        return tuple(sorted(seen))  # type: ignore[return-value]


@dataclass
class Lexicon:
    """Word -> phoneme sequence for the synthetic language."""

    entries: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def words(self) -> list[str]:
        return sorted(self.entries)

    def phonemes(self, word: str) -> tuple[str, ...]:
        try:
            return self.entries[word]
        except KeyError:
            raise OOVError(f"word {word!r} not in lexicon") from None

    def mora_count(self, word: str) -> int:
        return len(self.phonemes(word)) // 2


@dataclass
class SyntheticCorpus:
    utterances: list[Utterance]
    rule_tables: dict[DialectID, AccentRuleTable]
    lexicon: Lexicon
    config: SyntheticCorpusConfig


def g2p_lookup(graphemes: Sequence[str], lexicon: Lexicon) -> tuple[str, ...]:
    """Concatenate per-word phoneme sequences; raises OOVError on unknown words."""
    out: list[str] = []
    for word in graphemes:
        out.extend(lexicon.phonemes(word))
    return tuple(out)


def mora_spans(phoneme_count: int) -> list[tuple[int, int]]:
    """Phoneme-index spans of consecutive CV morae."""
    if phoneme_count % 2 != 0:
        raise AlignmentError(f"odd phoneme count {phoneme_count} cannot form CV morae")
    return [(i, i + 2) for i in range(0, phoneme_count, 2)]


def _sample_word(rng: np.random.Generator) -> str:
    n_morae = int(rng.integers(2, 5))
    morae = []
    for _ in range(n_morae):
        c = CONSONANTS[rng.integers(0, len(CONSONANTS))]
        v = VOWELS[rng.integers(0, len(VOWELS))]
        morae.append(c + v)
    return "".join(morae)


def _sample_pattern(rng: np.random.Generator, n_morae: int) -> str:
    return "".join("H" if rng.random() < 0.5 else "L" for _ in range(n_morae))


def word_to_phonemes(word: str) -> tuple[str, ...]:
    return tuple(word)


def dialect_word_variants(
    lexicon: Lexicon, rule_tables: dict[DialectID, AccentRuleTable]
) -> tuple[dict[str, dict[str, str]], dict[str, tuple[str, ...]]]:
    """Surface-form substitution tables for the rule-based translator.

    Words whose accent pattern diverges between the two dialects also
    get a dialect-specific spelling in the second dialect, so the
    multi-dialect text corpus is lexically marked (the way real dialect
    text is) instead of differing only in its dialect tag. The variant
    rotates every consonant ahead in the consonant inventory, keeping
    vowels, length, and mora count; the stride grows until the form
    collides with neither the lexicon nor an earlier variant.

    Returns (tables keyed by target dialect, phoneme entries for the new
    forms). Translating into the second dialect substitutes base ->
    variant, translating into the first maps variants back; with no
    divergent words both tables are empty and translation is identity.
    """
    dialects = sorted(rule_tables)
    if len(dialects) != 2:
        raise ConfigError(f"need exactly two rule tables, got {sorted(dialects)}")
    first, second = dialects
    divergent = sorted(
        w
        for w, pattern in rule_tables[first].rules.items()
        if rule_tables[second].rules.get(w) != pattern
    )
    index = {c: i for i, c in enumerate(CONSONANTS)}
    taken = set(lexicon.entries)
    to_second: dict[str, str] = {}
    entries: dict[str, tuple[str, ...]] = {}
    for word in divergent:
        for stride in range(1, len(CONSONANTS)):
            candidate = "".join(
                CONSONANTS[(index[ch] + stride) % len(CONSONANTS)]
                if ch in index
                else ch
                for ch in word
            )
            if candidate not in taken:
                break
        else:
            raise ConfigError(f"no collision-free variant form for {word!r}")
        taken.add(candidate)
        to_second[word] = candidate
        entries[candidate] = word_to_phonemes(candidate)
    tables = {
        second: to_second,
        first: {variant: base for base, variant in to_second.items()},
    }
    return tables, entries


def generate_synthetic_corpus(config: SyntheticCorpusConfig) -> SyntheticCorpus:
    """Generate utterances with oracle accents and rendered pitch contours.

    Deterministic for a fixed seed. Contours are per-frame log-F0:
    mora H/L target + speaker offset + linear declination + Gaussian
    noise. Frames are attached in-memory; ``save_manifest`` materializes
    them as ALVF files.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dialect_a, dialect_b = config.dialects

    # Lexicon of unique CV words.
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < config.lexicon_size:
        w = _sample_word(rng)
        if w not in seen:
            seen.add(w)
            words.append(w)
    lexicon = Lexicon({w: word_to_phonemes(w) for w in words})

    # Accent rules: dialect A patterns are free; dialect B differs on a
    # fixed-size divergent subset and matches A elsewhere.
    rules_a: dict[str, str] = {}
    rules_b: dict[str, str] = {}
    n_divergent = int(config.divergent_fraction * config.lexicon_size)
    divergent = set(rng.choice(words, size=n_divergent, replace=False).tolist())
    for w in words:
        n_morae = lexicon.mora_count(w)
        pat = _sample_pattern(rng, n_morae)
        rules_a[w] = pat
        if w in divergent:
            alt = _sample_pattern(rng, n_morae)
            while alt == pat:
                alt = _sample_pattern(rng, n_morae)
            rules_b[w] = alt
        else:
            rules_b[w] = pat
    rule_tables = {
        dialect_a: AccentRuleTable(dialect_a, rules_a),
        dialect_b: AccentRuleTable(dialect_b, rules_b),
    }

    lo, hi = config.words_per_sentence
    utterances: list[Utterance] = []
    for idx in range(config.sentence_count):
        speaker = config.speakers[rng.integers(0, len(config.speakers))]
        dialect = speaker.native_dialect
        n_words = int(rng.integers(lo, hi + 1))
        sentence = tuple(words[rng.integers(0, len(words))] for _ in range(n_words))
        phonemes = g2p_lookup(sentence, lexicon)
        accent = "".join(rule_tables[dialect].pattern(w) for w in sentence)

        # Per-phoneme durations in frames: consonants short, vowels longer.
        durations = []
        for ph in phonemes:
            base = rng.integers(2, 5) if ph in CONSONANTS else rng.integers(3, 7)
            durations.append(max(1, int(round(base * speaker.duration_scale))))
        spans = []
        cursor = 0
        for p, dur in enumerate(durations):
            spans.append((p, cursor, cursor + dur))
            cursor += dur
        alignment = Alignment(tuple(spans))

        total_frames = cursor
        contour = np.empty(total_frames, dtype=np.float64)
        for (m_start, m_end), symbol in zip(mora_spans(len(phonemes)), accent):
            target = config.high_logf0 if symbol == "H" else config.low_logf0
            f_start = spans[m_start][1]
            f_end = spans[m_end - 1][2]
            times = np.arange(f_start, f_end) / config.frame_rate
            contour[f_start:f_end] = (
                target + speaker.log_f0_offset + DECLINATION_SLOPE * times
            )
        contour += rng.normal(0.0, 1.0, total_frames) * config.noise_std

        utt = Utterance(
            utt_id=f"u{idx:05d}",
            speaker_id=speaker.speaker_id,
            dialect=dialect,
            graphemes=sentence,
            phonemes=phonemes,
            alignment=alignment,
            feature_ref=contour.astype(np.float32).reshape(-1, 1),
            oracle_accent=accent,
        )
        utt.validate()
        utterances.append(utt)

    return SyntheticCorpus(utterances, rule_tables, lexicon, config)


def write_feature_file(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise FormatError(f"frames must be 2-D, got shape {frames.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes(order="C"))


def read_feature_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read feature file {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: missing ALVF header")
    t, d = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * t * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(t, d).copy()


def resolve_frames(utterance: Utterance, root: str | Path | None = None) -> np.ndarray:
    """Return the utterance's frames, reading its feature file if needed."""
    ref = utterance.feature_ref
    if ref is None:
        raise FormatError(f"{utterance.utt_id}: no feature reference")
    if isinstance(ref, np.ndarray):
        return ref
    path = Path(ref)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    return read_feature_file(path)


def _format_alignment(alignment: Alignment) -> str:
    return ";".join(f"{p}:{s}:{e}" for p, s, e in alignment.spans)


def _parse_alignment(text: str, line_no: int) -> Alignment:
    spans = []
    for part in text.split(";"):
        pieces = part.split(":")
        if len(pieces) != 3:
            raise ManifestError(f"line {line_no}: bad alignment triple {part!r}")
        try:
            spans.append((int(pieces[0]), int(pieces[1]), int(pieces[2])))
        except ValueError:
            raise ManifestError(f"line {line_no}: non-integer alignment {part!r}") from None
    return Alignment(tuple(spans))


def save_manifest(
    utterances: Sequence[Utterance],
    path: str | Path,
    features_dirname: str = "features",
) -> list[Utterance]:
    """Write a manifest, materializing any in-memory frames as ALVF files.

    Returns the utterance list exactly as a subsequent ``load_manifest``
    will see it (path feature references relative to the manifest dir).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written: list[Utterance] = []
    lines: list[str] = []
    for utt in utterances:
        utt.validate()
        ref = utt.feature_ref
        if isinstance(ref, np.ndarray):
            rel = f"{features_dirname}/{utt.utt_id}.alvf"
            write_feature_file(path.parent / rel, ref)
            ref = rel
        if ref is None:
            ref = "-"
        fields = [
            utt.utt_id,
            utt.speaker_id,
            utt.dialect,
            " ".join(utt.graphemes),
            " ".join(utt.phonemes),
            _format_alignment(utt.alignment),
            ref,
        ]
        if utt.oracle_accent is not None:
            fields.append(utt.oracle_accent)
        lines.append("\t".join(fields))
        written.append(
            Utterance(
                utt.utt_id,
                utt.speaker_id,
                utt.dialect,
                utt.graphemes,
                utt.phonemes,
                utt.alignment,
                None if ref == "-" else ref,
                utt.oracle_accent,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return written


def load_manifest(path: str | Path) -> list[Utterance]:
    path = Path(path)
    utterances: list[Utterance] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (7, 8):
                raise ManifestError(
                    f"line {line_no}: expected 7 or 8 tab-separated fields, "
                    f"got {len(fields)}"
                )
            utt = Utterance(
                utt_id=fields[0],
                speaker_id=fields[1],
                dialect=fields[2],
                graphemes=tuple(fields[3].split()) if fields[3] else (),
                phonemes=tuple(fields[4].split()) if fields[4] else (),
                alignment=_parse_alignment(fields[5], line_no),
                feature_ref=None if fields[6] == "-" else fields[6],
                oracle_accent=fields[7] if len(fields) == 8 else None,
            )
            try:
                utt.validate()
            except (AlignmentError, ManifestError) as exc:
                raise ManifestError(f"line {line_no}: {exc}") from exc
            utterances.append(utt)
    return utterances
