"""Fixed caption vocabulary and its OCR extension."""
import hashlib
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

_OCR_MARKER = "=== ocr extension threshold={} ==="
_OCR_MARKER_RE = re.compile(r"^=== ocr extension threshold=(\d+) ===$")


class VocabError(ValueError):
    pass


def _load_stopwords():
    text = resources.files("ocrcap").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


STOPWORDS = _load_stopwords()


def tokenize(text):
    """Lowercase, split punctuation off as its own token, split on whitespace.

    Used for both training captions and metric scoring.
    """
    return re.sub(r"([^\w\s'])", r" \1 ", text.lower()).split()


def _ranked(counter, min_count):
    kept = [(tok, c) for tok, c in counter.items() if c >= min_count]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return kept


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple
    counts: tuple
    min_count: int = field(default=1, compare=False)
    token_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != SPECIALS:
            raise VocabError("special tokens must occupy ids 0..3")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise VocabError("duplicate token in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]


def build_fixed_vocab(captions, min_count=5, restrict_to=None):
    """Vocabulary of caption tokens seen at least ``min_count`` times.

    ``restrict_to`` optionally limits membership to a closed word list (the
    synthetic task uses it to keep brand words out of the fixed vocabulary).
    Ids are assigned by descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise VocabError(f"min_count must be >= 1, got {min_count}")
    counter = Counter(tok for cap in captions for tok in cap)
    if not counter:
        raise VocabError("cannot build a vocabulary from an empty caption corpus")
    for s in SPECIALS:
        counter.pop(s, None)
    if restrict_to is not None:
        allowed = set(restrict_to)
        counter = Counter({t: c for t, c in counter.items() if t in allowed})
    kept = _ranked(counter, min_count)
    return Vocabulary(
        id_to_token=SPECIALS + tuple(t for t, _ in kept),
        counts=(0, 0, 0, 0) + tuple(c for _, c in kept),
        min_count=min_count,
    )


def filter_stopwords(tokens):
    return [t for t in tokens if t.lower() not in STOPWORDS]


def normalize_ocr_token(raw):
    """Lowercase and strip surrounding punctuation; None if nothing usable is left."""
    tok = raw.strip().strip(string.punctuation + string.whitespace).lower()
    if not tok or not any(ch.isalnum() for ch in tok) or any(ch.isspace() for ch in tok):
        return None
    return tok


def clean_ocr_tokens(raw_tokens):
    """Normalize then drop empties and stopwords, preserving order."""
    normed = (normalize_ocr_token(t) for t in raw_tokens)
    return filter_stopwords([t for t in normed if t is not None])


@dataclass(frozen=True)
class ExtendedVocabulary:
    """Fixed vocabulary followed by OCR-only additions.

    Ids below ``fixed_size`` are fixed-vocabulary words; ids at or above it are
    OCR tokens that never occur in the fixed part.
    """

    base: Vocabulary
    ocr_tokens: tuple = ()
    ocr_counts: tuple = ()
    threshold: int = None
    _ocr_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for k, tok in enumerate(self.ocr_tokens):
            if tok in self.base or tok in index:
                raise VocabError(f"OCR token {tok!r} duplicated across the fixed boundary")
            if tok in STOPWORDS:
                raise VocabError(f"OCR token {tok!r} is a stopword")
            index[tok] = self.fixed_size + k
        object.__setattr__(self, "_ocr_index", index)

    @property
    def fixed_size(self):
        return len(self.base)

    @property
    def added(self):
        return len(self.ocr_tokens)

    def __len__(self):
        return self.fixed_size + len(self.ocr_tokens)

    def __contains__(self, token):
        return token in self.base or token in self._ocr_index

    def lookup(self, token):
        """Extended id of ``token`` or None when absent."""
        i = self.base.token_to_id.get(token)
        return i if i is not None else self._ocr_index.get(token)

    def id(self, token):
        i = self.lookup(token)
        return UNK_ID if i is None else i

    def token(self, i):
        if i < self.fixed_size:
            return self.base.id_to_token[i]
        return self.ocr_tokens[i - self.fixed_size]

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def decode(self, ids):
        return [self.token(i) for i in ids]


def extend_with_ocr(base, ocr_corpus, threshold):
    """Append OCR tokens occurring at least ``threshold`` times and absent from ``base``.

    ``ocr_corpus`` is a list of per-image token lists, already normalized and
    stopword-filtered.
    """
    if threshold < 1:
        raise VocabError(f"threshold must be >= 1, got {threshold}")
    counter = Counter(t for toks in ocr_corpus for t in toks if t not in base)
    kept = _ranked(counter, threshold)
    return ExtendedVocabulary(
        base=base,
        ocr_tokens=tuple(t for t, _ in kept),
        ocr_counts=tuple(c for _, c in kept),
        threshold=threshold,
    )


def as_extended(vocab):
    return vocab if isinstance(vocab, ExtendedVocabulary) else ExtendedVocabulary(base=vocab)


# ------------------------------------------------------------------ file format


def dumps_vocab(vocab):
    ext = as_extended(vocab)
    lines = [f"{tok}\t{c}" for tok, c in zip(ext.base.id_to_token, ext.base.counts)]
    if ext.threshold is not None:
        lines.append(_OCR_MARKER.format(ext.threshold))
        lines.extend(f"{tok}\t{c}" for tok, c in zip(ext.ocr_tokens, ext.ocr_counts))
    return "\n".join(lines) + "\n"


def loads_vocab(text, min_count=1):
    lines = text.splitlines()
    if len(lines) < 4:
        raise VocabError("vocabulary file is missing the 4-line special-token header")
    fixed, ocr, threshold = [], [], None
    target = fixed
    for lineno, line in enumerate(lines, 1):
        m = _OCR_MARKER_RE.match(line)
        if m:
            if threshold is not None:
                raise VocabError(f"line {lineno}: second OCR marker")
            threshold = int(m.group(1))
            target = ocr
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise VocabError(f"line {lineno}: expected 'token<TAB>count', got {line!r}")
        target.append((parts[0], int(parts[1])))
    base = Vocabulary(
        id_to_token=tuple(t for t, _ in fixed),
        counts=tuple(c for _, c in fixed),
        min_count=min_count,
    )
    return ExtendedVocabulary(
        base=base,
        ocr_tokens=tuple(t for t, _ in ocr),
        ocr_counts=tuple(c for _, c in ocr),
        threshold=threshold,
    )


def save_vocab(path, vocab):
    Path(path).write_text(dumps_vocab(vocab), encoding="utf-8")


def load_vocab(path):
    return loads_vocab(Path(path).read_text(encoding="utf-8"))


def vocab_hash(vocab):
    return hashlib.sha256(dumps_vocab(vocab).encode("utf-8")).hexdigest()
