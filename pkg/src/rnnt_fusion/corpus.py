"""Shared vocabulary, synthetic paired/unpaired task generation, dataset I/O.

The synthetic task mirrors the paired-audio vs unpaired-text asymmetry:
a seeded bigram grammar over common words generates all sentences;
"audio" is each token's fixed random signature vector repeated for a
jittered number of frames plus Gaussian noise. Two engineered rare-word
sets drive the analysis breakdowns: `rare_words` stay under the
frequency threshold in the paired train transcripts but are well covered
by the unpaired text (the "fixed by LM" population), while `oov_words`
stay under the threshold even in the union. Every rare word is attached
to a fixed common host word so the text corpus gives the LM a learnable
context for it.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import CorpusSpecError, DatasetFormatError, VocabularyError

DEFAULT_COMMON_WORDS = (
    "the", "a", "to", "of", "and", "in", "on", "at", "for", "with",
    "we", "you", "they", "he", "she", "it", "is", "was", "are", "be",
    "have", "has", "had", "do", "did", "go", "went", "come", "came", "see",
    "saw", "say", "said", "make", "made", "take", "took", "give", "gave", "time",
)
DEFAULT_RARE_WORDS = ("quartz", "fjord", "zephyr", "glyph", "plinth", "sphinx", "crypt", "nymph")
DEFAULT_OOV_WORDS = ("obelisk", "ziggurat", "palimpsest", "quasar")


class Vocabulary:
    """Ordered unique symbols; blank is never a vocabulary entry."""

    def __init__(self, symbols) -> None:
        symbols = tuple(symbols)
        if len(set(symbols)) != len(symbols):
            raise VocabularyError("vocabulary symbols must be unique")
        self.symbols = symbols
        self._index = {s: i for i, s in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256("\n".join(self.symbols).encode()).hexdigest()
        return digest[:16]

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def word(self, token: int) -> str:
        if not 0 <= token < len(self.symbols):
            raise VocabularyError(f"token id {token} outside vocabulary of {len(self.symbols)}")
        return self.symbols[token]

    def to_file(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols))

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    return [vocab.id(w) for w in text.split()]


def detokenize(vocab: Vocabulary, tokens) -> str:
    return " ".join(vocab.word(t) for t in tokens)


@dataclass
class Utterance:
    """Synthetic feature frames plus reference tokens and provenance."""

    id: str
    frames: np.ndarray
    reference: tuple[int, ...]
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 7
    paired_sentence_count: int = 2000
    unpaired_sentence_count: int = 50000
    dev_count: int = 200
    test_count: int = 200
    common_words: tuple[str, ...] = DEFAULT_COMMON_WORDS
    rare_words: tuple[str, ...] = DEFAULT_RARE_WORDS
    oov_words: tuple[str, ...] = DEFAULT_OOV_WORDS
    rare_paired_occurrences: int = 3
    rare_unpaired_occurrences: int = 60
    rare_test_sentences: int = 4
    oov_test_sentences: int = 3
    rare_threshold: int = 10
    frames_per_token_min: int = 2
    frames_per_token_max: int = 4
    noise_sigma: float = 0.35
    feature_dim: int = 8
    min_len: int = 3
    max_len: int = 12
    stop_prob: float = 0.14
    n_successors: int = 4

    def validate(self) -> None:
        problems = []
        if self.unpaired_sentence_count < self.paired_sentence_count:
            problems.append("unpaired count must be >= paired count")
        if self.rare_paired_occurrences >= self.rare_threshold:
            problems.append(
                f"rare words would reach the threshold in paired data "
                f"({self.rare_paired_occurrences} >= {self.rare_threshold})"
            )
        if self.rare_paired_occurrences + self.rare_unpaired_occurrences < self.rare_threshold:
            problems.append("rare words would stay under the threshold even in the union")
        total_injections = (len(self.rare_words) + len(self.oov_words)) * self.rare_paired_occurrences
        if total_injections > self.paired_sentence_count:
            problems.append("not enough paired sentences to host the rare-word injections")
        if set(self.rare_words) & set(self.oov_words):
            problems.append("rare and oov word sets overlap")
        if set(self.common_words) & (set(self.rare_words) | set(self.oov_words)):
            problems.append("rare/oov words collide with common words")
        if self.frames_per_token_min < 1 or self.frames_per_token_max < self.frames_per_token_min:
            problems.append("invalid frames_per_token range")
        if self.min_len < 1 or self.max_len < self.min_len:
            problems.append("invalid sentence length range")
        if problems:
            raise CorpusSpecError("; ".join(problems))

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.common_words + self.rare_words + self.oov_words)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n")

    @classmethod
    def from_json(cls, path) -> "CorpusSpec":
        raw = json.loads(Path(path).read_text())
        for key in ("common_words", "rare_words", "oov_words"):
            raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class GeneratedCorpus:
    spec: CorpusSpec
    vocab: Vocabulary
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    unpaired: list[tuple[int, ...]]
    oracle: list[tuple[int, ...]]  # test transcripts, for the oracle-LM experiment


class _Grammar:
    """Sparse seeded bigram tables over the common words."""

    def __init__(self, spec: CorpusSpec, rng: np.random.Generator) -> None:
        n = len(spec.common_words)
        k = min(spec.n_successors, n)
        base = np.array([0.45, 0.25, 0.18, 0.12][:k])
        self.succ_ids = np.empty((n, k), dtype=np.intp)
        self.succ_cum = np.empty((n, k))
        for w in range(n):
            self.succ_ids[w] = rng.choice(n, size=k, replace=False)
            self.succ_cum[w] = np.cumsum(base / base.sum())
        starts = rng.choice(n, size=min(8, n), replace=False)
        weights = np.array([0.3, 0.2, 0.15, 0.12, 0.08, 0.06, 0.05, 0.04][: len(starts)])
        self.start_ids = starts
        self.start_cum = np.cumsum(weights / weights.sum())
        self.spec = spec

    def sentence(self, rng: np.random.Generator) -> tuple[int, ...]:
        spec = self.spec
        w = self.start_ids[np.searchsorted(self.start_cum, rng.random())]
        words = [int(w)]
        while len(words) < spec.max_len:
            if len(words) >= spec.min_len and rng.random() < spec.stop_prob:
                break
            row = words[-1]
            w = self.succ_ids[row][np.searchsorted(self.succ_cum[row], rng.random())]
            words.append(int(w))
        return tuple(words)


def _inject(sentence: tuple[int, ...], host: int, rare: int, rng: np.random.Generator) -> tuple[int, ...]:
    pos = int(rng.integers(0, len(sentence)))
    return sentence[: pos + 1] + (host, rare) + sentence[pos + 1 :]


def _fresh_sentences(grammar, rng, count, taboo: set, collect: set | None = None) -> list[tuple[int, ...]]:
    out = []
    for _ in range(count):
        for _attempt in range(1000):
            s = grammar.sentence(rng)
            if s not in taboo and (collect is None or s not in collect):
                break
        else:
            raise CorpusSpecError("could not generate a fresh sentence; grammar too small")
        out.append(s)
        if collect is not None:
            collect.add(s)
    return out


def generate_corpus(spec: CorpusSpec) -> GeneratedCorpus:
    """Deterministic synthetic corpus per the spec's seeded recipe."""
    spec.validate()
    vocab = spec.vocabulary()
    n_common = len(spec.common_words)
    rare_ids = [vocab.id(w) for w in spec.rare_words]
    oov_ids = [vocab.id(w) for w in spec.oov_words]

    seeds = np.random.SeedSequence(spec.seed).spawn(8)
    grammar = _Grammar(spec, np.random.default_rng(seeds[0]))
    host_rng = np.random.default_rng(seeds[1])
    hosts = {
        r: int(h)
        for r, h in zip(
            rare_ids + oov_ids,
            host_rng.choice(n_common, size=len(rare_ids) + len(oov_ids), replace=False),
        )
    }

    # Test first (it anchors the disjointness constraints), then dev,
    # then paired train, then the unpaired text corpus.
    test_rng = np.random.default_rng(seeds[2])
    test_set: set[tuple[int, ...]] = set()
    test_sentences: list[tuple[int, ...]] = []
    n_special = (
        len(rare_ids) * spec.rare_test_sentences + len(oov_ids) * spec.oov_test_sentences
    )
    if n_special > spec.test_count:
        raise CorpusSpecError("test split too small for the configured rare/oov coverage")
    test_sentences += _fresh_sentences(
        grammar, test_rng, spec.test_count - n_special, set(), collect=test_set
    )
    for rid in rare_ids:
        for _ in range(spec.rare_test_sentences):
            base = grammar.sentence(test_rng)
            s = _inject(base, hosts[rid], rid, test_rng)
            while s in test_set:
                s = _inject(grammar.sentence(test_rng), hosts[rid], rid, test_rng)
            test_set.add(s)
            test_sentences.append(s)
    for oid in oov_ids:
        for _ in range(spec.oov_test_sentences):
            s = _inject(grammar.sentence(test_rng), hosts[oid], oid, test_rng)
            while s in test_set:
                s = _inject(grammar.sentence(test_rng), hosts[oid], oid, test_rng)
            test_set.add(s)
            test_sentences.append(s)
    order = test_rng.permutation(len(test_sentences))
    test_sentences = [test_sentences[i] for i in order]

    dev_rng = np.random.default_rng(seeds[3])
    dev_set: set[tuple[int, ...]] = set()
    dev_sentences = _fresh_sentences(grammar, dev_rng, spec.dev_count, test_set, collect=dev_set)
    held_out = test_set | dev_set

    train_rng = np.random.default_rng(seeds[4])
    train_sentences = _fresh_sentences(
        grammar, train_rng, spec.paired_sentence_count, held_out
    )
    slots = train_rng.permutation(spec.paired_sentence_count)
    slot_i = 0
    for rid in rare_ids + oov_ids:
        for _ in range(spec.rare_paired_occurrences):
            idx = int(slots[slot_i])
            slot_i += 1
            s = _inject(train_sentences[idx], hosts[rid], rid, train_rng)
            while s in held_out:
                s = _inject(train_sentences[idx], hosts[rid], rid, train_rng)
            train_sentences[idx] = s

    unpaired_rng = np.random.default_rng(seeds[5])
    unpaired = _fresh_sentences(
        grammar, unpaired_rng, spec.unpaired_sentence_count, held_out
    )
    slots = unpaired_rng.permutation(spec.unpaired_sentence_count)
    slot_i = 0
    for rid in rare_ids:
        for _ in range(spec.rare_unpaired_occurrences):
            idx = int(slots[slot_i])
            slot_i += 1
            s = _inject(unpaired[idx], hosts[rid], rid, unpaired_rng)
            while s in held_out:
                s = _inject(unpaired[idx], hosts[rid], rid, unpaired_rng)
            unpaired[idx] = s

    signatures = np.random.default_rng(seeds[6]).normal(size=(len(vocab), spec.feature_dim))

    def realize(split: str, sentences: list[tuple[int, ...]]) -> list[Utterance]:
        utts = []
        for i, sentence in enumerate(sentences):
            entropy = [spec.seed, _SPLIT_CODES[split], i]
            rng = np.random.default_rng(np.random.SeedSequence(entropy))
            frames = _render_frames(sentence, signatures, spec, rng)
            utts.append(
                Utterance(
                    id=f"{split}-{i:05d}",
                    frames=frames,
                    reference=sentence,
                    meta={"split": split, "index": i, "seed": entropy},
                )
            )
        return utts

    return GeneratedCorpus(
        spec=spec,
        vocab=vocab,
        train=realize("train", train_sentences),
        dev=realize("dev", dev_sentences),
        test=realize("test", test_sentences),
        unpaired=[tuple(s) for s in unpaired],
        oracle=[u.reference for u in realize("test", test_sentences)],
    )


_SPLIT_CODES = {"train": 1, "dev": 2, "test": 3}


def _render_frames(sentence, signatures, spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    reps = rng.integers(spec.frames_per_token_min, spec.frames_per_token_max + 1, size=len(sentence))
    frames = np.repeat(signatures[list(sentence)], reps, axis=0)
    if spec.noise_sigma > 0:
        frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
    return frames


def word_counts(token_sequences, vocab: Vocabulary) -> Counter:
    counts: Counter = Counter()
    for seq in token_sequences:
        for t in seq:
            counts[vocab.word(t)] += 1
    return counts


# -- dataset file I/O ---------------------------------------------------------
#
# Utterance dataset: one record per line, tab-separated:
#   id <TAB> T <TAB> d <TAB> T*d frame floats (space-separated, %.17g)
#      <TAB> reference text (space-separated words; may be empty)
# Text corpus: one sentence per line, words space-separated.


def write_dataset(path, utterances: list[Utterance], vocab: Vocabulary) -> None:
    with open(path, "w") as f:
        for u in utterances:
            t, d = u.frames.shape
            flat = " ".join(f"{x:.17g}" for x in u.frames.reshape(-1))
            text = detokenize(vocab, u.reference)
            f.write(f"{u.id}\t{t}\t{d}\t{flat}\t{text}\n")


def read_dataset(path, vocab: Vocabulary) -> list[Utterance]:
    utts = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DatasetFormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            uid, t_str, d_str, flat, text = parts
            try:
                t, d = int(t_str), int(d_str)
                values = np.array([float(x) for x in flat.split()])
            except ValueError as e:
                raise DatasetFormatError(f"{path}:{lineno}: {e}") from e
            if values.size != t * d:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {t * d} frame values, got {values.size}"
                )
            reference = tuple(tokenize(vocab, text)) if text else ()
            utts.append(Utterance(id=uid, frames=values.reshape(t, d), reference=reference))
    return utts


def write_text_corpus(path, sentences, vocab: Vocabulary) -> None:
    with open(path, "w") as f:
        for s in sentences:
            f.write(detokenize(vocab, s) + "\n")


def read_text_corpus(path, vocab: Vocabulary) -> list[tuple[int, ...]]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(tuple(tokenize(vocab, line)))
            except VocabularyError as e:
                raise DatasetFormatError(f"{path}:{lineno}: {e}") from e
    return out
