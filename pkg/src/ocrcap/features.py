"""Per-image model inputs: region features plus OCR tokens with embeddings.

Also generates the seeded synthetic captioning task used for desk-scale
training, in which most captions can only be completed by copying an OCR
token.
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FeatureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OcrEntry:
    token: str
    embedding: np.ndarray
    position: int


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    image_id: str
    regions: np.ndarray
    ocr: tuple = ()

    @classmethod
    def build(cls, image_id, regions, ocr_tokens=(), ocr_embeddings=()):
        regions = np.asarray(regions, dtype=np.float64)
        if regions.ndim != 2 or regions.shape[0] < 1:
            raise FeatureError(f"{image_id}: regions must be a non-empty R x D_v matrix")
        R = regions.shape[0]
        entries = tuple(
            OcrEntry(tok, np.asarray(emb, dtype=np.float64), R + k)
            for k, (tok, emb) in enumerate(zip(ocr_tokens, ocr_embeddings))
        )
        return cls(image_id, regions, entries)

    @property
    def n_regions(self):
        return self.regions.shape[0]

    @property
    def ocr_tokens(self):
        return [e.token for e in self.ocr]

    def ocr_matrix(self, d_e):
        if not self.ocr:
            return np.zeros((0, d_e))
        return np.stack([e.embedding for e in self.ocr])

    def without_ocr(self):
        return FeatureBundle(self.image_id, self.regions, ())

    def cleaned(self):
        """Copy with OCR tokens normalized and stopwords/empties dropped."""
        from ocrcap.vocab import STOPWORDS, normalize_ocr_token

        toks, embs = [], []
        for e in self.ocr:
            t = normalize_ocr_token(e.token)
            if t is None or t in STOPWORDS:
                continue
            toks.append(t)
            embs.append(e.embedding)
        return FeatureBundle.build(self.image_id, self.regions, toks, embs)

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.regions.shape == other.regions.shape
            and np.array_equal(self.regions, other.regions)
            and len(self.ocr) == len(other.ocr)
            and all(
                a.token == b.token
                and a.position == b.position
                and np.array_equal(a.embedding, b.embedding)
                for a, b in zip(self.ocr, other.ocr)
            )
        )


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    captions: tuple

    def __post_init__(self):
        if not self.captions:
            raise FeatureError(f"{self.image_id}: at least one caption required")
        for cap in self.captions:
            if not cap or any(not t for t in cap):
                raise FeatureError(f"{self.image_id}: empty caption or token")


# ------------------------------------------------------------------ I/O


def _bundle_to_json(b):
    return json.dumps(
        {
            "image_id": b.image_id,
            "regions": b.regions.tolist(),
            "ocr": [{"token": e.token, "embedding": e.embedding.tolist()} for e in b.ocr],
        },
        separators=(",", ":"),
    )


def write_bundles(path, bundles):
    with open(path, "w", encoding="utf-8") as fh:
        for b in bundles:
            fh.write(_bundle_to_json(b) + "\n")


def _parse_bundle(obj, lineno):
    image_id = obj.get("image_id")
    if not isinstance(image_id, str) or not image_id:
        raise FeatureError(f"line {lineno}: missing image_id")
    regions = obj.get("regions")
    if not isinstance(regions, list) or not regions:
        raise FeatureError(f"{image_id}: regions must be a non-empty list")
    d_v = len(regions[0])
    for k, row in enumerate(regions):
        if not isinstance(row, list) or len(row) != d_v or d_v == 0:
            raise FeatureError(f"{image_id}: region {k} has dimension {len(row)}, expected {d_v}")
    toks, embs = [], []
    d_e = None
    for k, ent in enumerate(obj.get("ocr", [])):
        if not isinstance(ent, dict) or "token" not in ent or "embedding" not in ent:
            raise FeatureError(f"{image_id}: malformed ocr entry {k}")
        emb = ent["embedding"]
        if d_e is None:
            d_e = len(emb)
        if len(emb) != d_e or d_e == 0:
            raise FeatureError(f"{image_id}: ocr entry {k} has dimension {len(emb)}, expected {d_e}")
        toks.append(ent["token"])
        embs.append(emb)
    try:
        return FeatureBundle.build(image_id, regions, toks, embs)
    except (TypeError, ValueError) as exc:
        raise FeatureError(f"{image_id}: {exc}") from exc


def load_bundles(path):
    bundles, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FeatureError(f"line {lineno}: malformed JSON ({exc})") from exc
            if not isinstance(obj, dict):
                raise FeatureError(f"line {lineno}: expected a JSON object")
            b = _parse_bundle(obj, lineno)
            if b.image_id in seen:
                raise FeatureError(f"{b.image_id}: duplicate image_id")
            seen.add(b.image_id)
            bundles.append(b)
    return bundles


def write_captions(path, records):
    lines = [
        f"{json.dumps(r.image_id)}: {json.dumps([list(c) for c in r.captions])}" for r in records
    ]
    body = ",\n".join(lines)
    Path(path).write_text("{\n" + body + "\n}\n" if lines else "{}\n", encoding="utf-8")


def load_captions(path):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise FeatureError("captions file must map image_id to caption lists")
    return [CaptionRecord(k, tuple(tuple(c) for c in v)) for k, v in obj.items()]


# ------------------------------------------------------------------ embeddings


def hash_embed(token, dim, seed=0):
    """Deterministic unit-norm stand-in for a contextual token embedding."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    digest = hashlib.blake2b(f"{seed}\x00{token}".encode("utf-8"), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


# ------------------------------------------------------------------ synthetic task

OBJECTS = ("bottle", "box", "can", "jar", "package")
SURFACES = ("table", "counter", "shelf")
TEMPLATES = (
    "a {obj} of {x} on a {surf}",
    "a {obj} of {x} sitting on the {surf}",
    "{x} {obj} on a {surf}",
    "the {obj} says {x}",
)
BRAND_WORDS = (
    "acme", "zorp", "quix", "blent", "vortek", "nimbo", "sprocka", "kelvo",
    "daxel", "fennix", "glimmo", "hurlo", "jastra", "kobbit", "lumina", "moxie",
    "norvo", "oplex", "pibbin", "quarro", "rindle", "sylko", "tavro", "umbrix",
    "velmo", "wexly", "yarrow", "zentro", "brisko", "crumbo", "drava", "elfin",
    "frisko", "gornet", "hapsa", "ixtel", "joblo", "krinkle", "lorvo", "mebble",
)
COMMON_WORDS = ("water", "milk", "coffee", "tea", "soup", "juice", "rice", "beans")


def _template_words():
    words = set()
    for t in TEMPLATES:
        words.update(w for w in t.split() if not w.startswith("{"))
    return words


@dataclass
class SynthConfig:
    n_images: int = 200
    n_regions: int = 8
    d_v: int = 32
    d_e: int = 32
    fixed_vocab_words: tuple = field(
        default_factory=lambda: tuple(sorted(_template_words() | set(OBJECTS) | set(SURFACES) | set(COMMON_WORDS)))
    )
    ocr_lexicon: tuple = BRAND_WORDS + COMMON_WORDS
    copy_rate: float = 1.0
    captions_per_image: int = 2
    distractor_rate: float = 0.5
    region_noise: float = 0.5
    embed_seed: int = 0


def synth_generate(config, seed):
    """Seeded synthetic dataset: ``(bundles, caption_records)``.

    Each image shows an object on a surface carrying one OCR word ``x``. With
    probability ``copy_rate`` the word lies outside ``fixed_vocab_words``, so a
    captioner can only produce it by copying.
    """
    if not 0.0 <= config.copy_rate <= 1.0:
        raise ValueError(f"copy_rate must be in [0, 1], got {config.copy_rate}")
    if not config.ocr_lexicon or not config.fixed_vocab_words:
        raise ValueError("ocr_lexicon and fixed_vocab_words must be non-empty")
    fixed = set(config.fixed_vocab_words)
    copy_words = [w for w in config.ocr_lexicon if w not in fixed]
    known_words = [w for w in config.ocr_lexicon if w in fixed]
    if config.copy_rate > 0 and not copy_words:
        raise ValueError("copy_rate > 0 needs lexicon words outside the fixed vocabulary")
    if config.copy_rate < 1 and not known_words:
        raise ValueError("copy_rate < 1 needs lexicon words inside the fixed vocabulary")
    if not 1 <= config.captions_per_image <= len(TEMPLATES):
        raise ValueError(f"captions_per_image must be in 1..{len(TEMPLATES)}")

    rng = np.random.default_rng(seed)
    centers = {w: rng.standard_normal(config.d_v) for w in OBJECTS + SURFACES}
    half = max(1, config.n_regions // 2)
    bundles, records = [], []
    for i in range(config.n_images):
        obj = OBJECTS[rng.integers(len(OBJECTS))]
        surf = SURFACES[rng.integers(len(SURFACES))]
        if rng.random() < config.copy_rate:
            x = copy_words[rng.integers(len(copy_words))]
        else:
            x = known_words[rng.integers(len(known_words))]
        ocr = [x]
        if rng.random() < config.distractor_rate:
            ocr.insert(int(rng.integers(2)), obj)
        noise = config.region_noise * rng.standard_normal((config.n_regions, config.d_v))
        regions = np.stack(
            [centers[obj] if r < half else centers[surf] for r in range(config.n_regions)]
        ) + noise
        image_id = f"synth-{i:05d}"
        bundles.append(
            FeatureBundle.build(
                image_id, regions, ocr, [hash_embed(t, config.d_e, config.embed_seed) for t in ocr]
            )
        )
        picks = rng.permutation(len(TEMPLATES))[: config.captions_per_image]
        caps = tuple(
            tuple(TEMPLATES[k].format(obj=obj, x=x, surf=surf).split()) for k in sorted(picks)
        )
        records.append(CaptionRecord(image_id, caps))
    return bundles, records
