"""NER corpora: CoNLL column files, a synthetic grammar, few-shot sampling,
vocabularies and MLM masking."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ConllParseError, ContractError

ENTITY_TYPES = ("PER", "LOC", "ORG", "MISC")


@dataclass(frozen=True)
class TaggedSentence:
    tokens: tuple[str, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.tokens) != len(self.labels):
            raise ContractError(
                f"{len(self.tokens)} tokens but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.tokens)


def label_set(types: Sequence[str] = ENTITY_TYPES) -> list[str]:
    """``O`` followed by ``B-X``/``I-X`` for each type, in a fixed order."""
    out = ["O"]
    for t in types:
        out += [f"B-{t}", f"I-{t}"]
    return out


def repair_bio(labels: Sequence[str]) -> tuple[list[str], list[int]]:
    """Promote every orphan ``I-X`` (after ``O``, a different type, or at the
    start) to ``B-X``. Returns the repaired tags and the positions changed."""
    out, fixed = [], []
    prev = "O"
    for i, tag in enumerate(labels):
        if tag.startswith("I-") and prev[2:] != tag[2:]:
            tag = "B-" + tag[2:]
            fixed.append(i)
        out.append(tag)
        prev = tag
    return out, fixed


# CoNLL column files ----------------------------------------------------------

def read_conll(path) -> list[TaggedSentence]:
    """Whitespace columns, token first and BIO tag last; blank lines split
    sentences and ``-DOCSTART-`` lines are skipped."""
    sentences: list[TaggedSentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    start_line = 0

    def flush():
        nonlocal tokens, tags
        if tokens:
            repaired, fixed = repair_bio(tags)
            if fixed:
                warnings.warn(f"{path}:{start_line}: orphan I- tag(s) at positions {fixed} "
                              f"promoted to B-", stacklevel=3)
            sentences.append(TaggedSentence(tokens, repaired))
        tokens, tags = [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            cols = line.split()
            if not cols:
                flush()
                continue
            if cols[0] == "-DOCSTART-":
                continue
            if len(cols) < 2:
                raise ConllParseError(path, lineno, f"missing tag column in {line.rstrip()!r}")
            tag = cols[-1]
            if tag != "O" and not (tag[:2] in ("B-", "I-") and len(tag) > 2):
                raise ConllParseError(path, lineno, f"malformed BIO tag {tag!r}")
            if not tokens:
                start_line = lineno
            tokens.append(cols[0])
            tags.append(tag)
    flush()
    return sentences


def write_conll(path, sentences: Iterable[TaggedSentence]) -> None:
    from .checkpoint import atomic_write_bytes

    lines = []
    for s in sentences:
        lines.extend(f"{tok} {tag}" for tok, tag in zip(s.tokens, s.labels))
        lines.append("")
    atomic_write_bytes(path, "\n".join(lines).encode("utf-8") + (b"\n" if lines else b""))


# vocabulary --------------------------------------------------------------------

PAD, UNK, MASK, BOS, EOS = "<pad>", "<unk>", "<mask>", "<s>", "</s>"
RESERVED = (PAD, UNK, MASK, BOS, EOS)
PAD_ID, UNK_ID, MASK_ID, BOS_ID, EOS_ID = range(5)


class Vocab:
    """Token <-> id bijection. Ids 0-4 are always ``<pad> <unk> <mask> <s> </s>``."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, sentences: Iterable[TaggedSentence]) -> "Vocab":
        words = sorted({t for s in sentences for t in s.tokens})
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        from .checkpoint import atomic_write_bytes

        atomic_write_bytes(path, ("\n".join(self.itos) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ContractError(f"{path}: vocabulary must start with {RESERVED}")
        return cls(lines[len(RESERVED):])


# few-shot sampling -----------------------------------------------------------

@dataclass(frozen=True)
class FewShotSpec:
    n_shot: int
    n_classes: int = 4
    seed: int = 0

    @property
    def total(self) -> int:
        return self.n_shot * self.n_classes


def few_shot_indices(corpus_size: int, spec: FewShotSpec) -> np.ndarray:
    if spec.n_shot < 1 or spec.n_classes < 1:
        raise ConfigError(f"n_shot and n_classes must be >= 1, got {spec}", "train.n_shot")
    if spec.total > corpus_size:
        raise ConfigError(
            f"N*C = {spec.total} exceeds the training set size {corpus_size}", "train.n_shot"
        )
    rng = np.random.default_rng(spec.seed)
    return rng.choice(corpus_size, size=spec.total, replace=False)


def few_shot_sample(corpus: Sequence[TaggedSentence], spec: FewShotSpec) -> list[TaggedSentence]:
    """N*C sentences drawn uniformly without replacement; no per-class balancing."""
    return [corpus[i] for i in few_shot_indices(len(corpus), spec)]


# synthetic grammar -----------------------------------------------------------
#
# PER and LOC are recognisable from the word itself. ORG and MISC share one
# pool of ambiguous names whose type is set by a trigger verb earlier in the
# same clause (possibly several tokens back); without a trigger, or after a
# neutral verb, the same words are plain nouns tagged O.

FIRST_NAMES = ("alice", "bruno", "carla", "dmitri", "elena", "farid", "greta", "hiro",
               "ines", "jonas", "kemal", "lucia", "marco", "nadia", "omar", "petra",
               "quinn", "rosa", "samir", "tara", "ulrich", "vera", "wen", "yusuf")
SURNAMES = ("smith", "novak", "okafor", "tanaka", "ferreira", "kowalski", "haddad",
            "lindqvist", "moreau", "petrov", "silva", "weber")
CITIES = ("paris", "lagos", "osaka", "lima", "oslo", "cairo", "dublin", "quito", "hanoi",
          "porto", "kazan", "tunis", "perth", "bergen", "malmo", "accra", "denver", "seoul")
DIRECTIONS = ("north", "south", "east", "west")
AMBIGUOUS = ("apex", "zenith", "orion", "vega", "nimbus", "quartz", "falcon", "cobalt",
             "ember", "summit", "aurora", "atlas", "titan", "helix", "nova", "pioneer",
             "vertex", "meridian", "sterling", "beacon", "crescent", "phoenix", "horizon",
             "delta")
TRIGGERS = {
    "ORG": ("joined", "sued", "acquired", "funded", "left"),
    "MISC": ("watched", "won", "attended", "praised", "reviewed"),
    "O": ("painted", "climbed", "found", "polished", "sketched"),
}
ADJECTIVES = ("new", "old", "famous", "small", "local", "rival", "bright", "quiet")
DETERMINERS = ("the", "a", "that")
SAY_VERBS = ("said", "smiled", "agreed", "laughed", "called")
SUBJECTS = ("they", "reporters", "the team", "a friend", "officials")
MOVE_VERBS = ("travelled to", "moved to", "flew to", "returned to")
OPENERS = ("today", "later", "meanwhile", "yesterday")
BOUNDARIES = ("and", "while", ",", ".")

_TRIGGER_TYPE = {w: t for t, words in TRIGGERS.items() for w in words}
_AMBIG = frozenset(AMBIGUOUS)


def oracle_tag(tokens: Sequence[str]) -> list[str]:
    """Tag a grammar sentence by the generator's own rules."""
    labels = []
    context = None
    prev_label = "O"
    for i, tok in enumerate(tokens):
        if tok in BOUNDARIES:
            context = None
            label = "O"
        elif tok in _TRIGGER_TYPE:
            context = _TRIGGER_TYPE[tok]
            label = "O"
        elif tok in FIRST_NAMES:
            label = "B-PER"
        elif tok in SURNAMES and prev_label in ("B-PER", "I-PER"):
            label = "I-PER"
        elif tok in DIRECTIONS:
            label = "B-LOC"
        elif tok in CITIES:
            label = "I-LOC" if prev_label == "B-LOC" and tokens[i - 1] in DIRECTIONS else "B-LOC"
        elif tok in _AMBIG and context in ("ORG", "MISC"):
            cont = prev_label[2:] == context and tokens[i - 1] in _AMBIG
            label = ("I-" if cont else "B-") + context
        else:
            label = "O"
        labels.append(label)
        prev_label = label
    return labels


def _person(rng) -> list[tuple[str, str]]:
    out = [(rng.choice(FIRST_NAMES), "B-PER")]
    if rng.random() < 0.5:
        out.append((rng.choice(SURNAMES), "I-PER"))
    return out


def _place(rng) -> list[tuple[str, str]]:
    if rng.random() < 0.3:
        return [(rng.choice(DIRECTIONS), "B-LOC"), (rng.choice(CITIES), "I-LOC")]
    return [(rng.choice(CITIES), "B-LOC")]


def _subject(rng) -> list[tuple[str, str]]:
    if rng.random() < 0.6:
        return _person(rng)
    return [(w, "O") for w in rng.choice(SUBJECTS).split()]


def _ambiguous_phrase(rng, entity: str | None) -> list[tuple[str, str]]:
    out = []
    if rng.random() < 0.7:
        out.append((rng.choice(DETERMINERS), "O"))
    for _ in range(rng.choice([0, 0, 1, 2])):
        out.append((rng.choice(ADJECTIVES), "O"))
    n = 1 if rng.random() < 0.6 else 2
    for j in range(n):
        word = rng.choice(AMBIGUOUS)
        if entity is None:
            out.append((word, "O"))
        else:
            out.append((word, ("B-" if j == 0 else "I-") + entity))
    return out


def _clause(rng) -> list[tuple[str, str]]:
    kind = rng.choice(["say", "move", "org", "misc", "plain", "noun", "noun", "org", "misc"])
    if kind == "say":
        return _subject(rng) + [(rng.choice(SAY_VERBS), "O")]
    if kind == "move":
        return _subject(rng) + [(w, "O") for w in rng.choice(MOVE_VERBS).split()] + _place(rng)
    if kind == "noun":
        # ambiguous word as subject, no trigger before it
        phrase = _ambiguous_phrase(rng, None)
        tail = [("opened", "O"), ("in", "O")] + _place(rng)
        return phrase + tail
    entity = {"org": "ORG", "misc": "MISC", "plain": None}[kind]
    verb = rng.choice(TRIGGERS[entity or "O"])
    out = _subject(rng) + [(verb, "O")] + _ambiguous_phrase(rng, entity)
    if rng.random() < 0.3:
        out += [("in", "O")] + _place(rng)
    return out


def synth_sentence(rng: np.random.Generator) -> TaggedSentence:
    pairs: list[tuple[str, str]] = []
    if rng.random() < 0.25:
        pairs.append((rng.choice(OPENERS), "O"))
        pairs.append((",", "O"))
    n_clauses = rng.choice([1, 2, 2, 3])
    for c in range(n_clauses):
        if c:
            pairs.append((rng.choice(BOUNDARIES[:3]), "O"))
        pairs.extend(_clause(rng))
    pairs.append((".", "O"))
    tokens = [str(t) for t, _ in pairs]
    return TaggedSentence(tokens, [lab for _, lab in pairs])


@dataclass
class SplitCorpus:
    train: list[TaggedSentence] = field(default_factory=list)
    dev: list[TaggedSentence] = field(default_factory=list)
    test: list[TaggedSentence] = field(default_factory=list)


def synth_ner_corpus(seed: int, size: int) -> SplitCorpus:
    """``size`` grammar sentences split 80/10/10 into train/dev/test."""
    if size < 100:
        raise ConfigError(f"corpus size must be >= 100, got {size}", "data.corpus_size")
    rng = np.random.default_rng(seed)
    sents = [synth_sentence(rng) for _ in range(size)]
    n_train, n_dev = int(size * 0.8), int(size * 0.1)
    return SplitCorpus(sents[:n_train], sents[n_train:n_train + n_dev], sents[n_train + n_dev:])


# batching and masking ------------------------------------------------------------

def encode_batch(sentences: Sequence[TaggedSentence], vocab: Vocab,
                 label_index: dict[str, int] | None = None):
    """Pad to the longest sentence, wrapping each in ``<s> ... </s>``.

    Returns ``(ids, attention_mask, labels)``; ``labels`` is -1 at special and
    pad positions and ``None`` when ``label_index`` is not given.
    """
    width = max(len(s) for s in sentences) + 2
    ids = np.full((len(sentences), width), PAD_ID, dtype=np.int64)
    labels = np.full((len(sentences), width), -1, dtype=np.int64) if label_index else None
    for b, s in enumerate(sentences):
        n = len(s)
        ids[b, 0] = BOS_ID
        ids[b, 1:n + 1] = vocab.encode(s.tokens)
        ids[b, n + 1] = EOS_ID
        if labels is not None:
            labels[b, 1:n + 1] = [label_index[t] for t in s.labels]
    return ids, ids != PAD_ID, labels


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    targets: np.ndarray           # original id at masked positions, -1 elsewhere
    mask: np.ndarray              # bool, True where a loss is taken
    empty: bool = False

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def mlm_mask(ids: np.ndarray, seed, mask_rate: float = 0.15,
             vocab_size: int | None = None) -> MaskedBatch:
    """Select ``round(mask_rate * n)`` of the ``n`` non-special positions
    (at least one when ``n > 0``); of those 80% become ``<mask>``, 10% a random
    non-special token and 10% stay unchanged."""
    if not 0.0 < mask_rate < 1.0:
        raise ConfigError(f"mask_rate must lie in (0, 1), got {mask_rate}", "pretrain.mask_rate")
    ids = np.asarray(ids)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eligible = np.flatnonzero(ids.reshape(-1) >= len(RESERVED))
    mask = np.zeros(ids.size, dtype=bool)
    if eligible.size == 0:
        warnings.warn("mlm_mask: batch holds only special tokens; nothing masked", stacklevel=2)
        return MaskedBatch(ids.copy(), np.full(ids.shape, -1, dtype=np.int64),
                           mask.reshape(ids.shape), empty=True)
    k = max(1, int(round(mask_rate * eligible.size)))
    chosen = np.sort(rng.choice(eligible, size=k, replace=False))
    mask[chosen] = True
    flat = ids.reshape(-1).copy()
    targets = np.full(ids.size, -1, dtype=np.int64)
    targets[chosen] = flat[chosen]
    action = rng.random(k)
    hi = int(vocab_size) if vocab_size else int(ids.max()) + 1
    randoms = rng.integers(len(RESERVED), max(hi, len(RESERVED) + 1), size=k)
    flat[chosen] = np.where(action < 0.8, MASK_ID, np.where(action < 0.9, randoms, flat[chosen]))
    return MaskedBatch(flat.reshape(ids.shape), targets.reshape(ids.shape),
                       mask.reshape(ids.shape))
