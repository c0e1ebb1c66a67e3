"""Synthetic identity corpus: glyph images, attribute texts, tokenization.

Each identity is a vector of categorical attributes. An image renders one
glyph per attribute into a grid of cells; occluded attributes render as
blank cells. A text lists the attribute words that are visible in the one
image it annotates, so pairing that text with a *different* image of the
same identity can produce a genuine mismatch (the weak-positive noise this
corpus exists to provide).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, VocabularyError, ContractError

CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"
MASK_TOKEN = "[MASK]"

PIXELS_MAGIC = b"GLYP"
_DTYPE_CODES = {1: "<f4"}

STRONG = 0
WEAK = 1


@dataclass(frozen=True)
class CorpusSpec:
    n_identities: int = 8
    images_per_identity: int = 2
    texts_per_image: int = 1
    n_attributes: int = 4
    attribute_vocab_size: int = 8
    occlusion_rate: float = 0.2
    image_side: int = 16
    patch_side: int = 8
    max_len: int = 16
    n_test_identities: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.n_identities < 2:
            raise ConfigError(f"n_identities must be >= 2, got {self.n_identities}")
        if self.images_per_identity < 2:
            raise ConfigError(
                f"images_per_identity must be >= 2, got {self.images_per_identity}"
            )
        if self.texts_per_image < 1:
            raise ConfigError(f"texts_per_image must be >= 1, got {self.texts_per_image}")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ConfigError(
                f"occlusion_rate must be in [0, 1), got {self.occlusion_rate}"
            )
        if self.image_side % self.patch_side != 0:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )
        n_cells = (self.image_side // self.patch_side) ** 2
        if n_cells < self.n_attributes:
            raise ConfigError(
                f"grid has {n_cells} cells but n_attributes={self.n_attributes}"
            )
        if self.n_attributes < 1 or self.attribute_vocab_size < 2:
            raise ConfigError("need n_attributes >= 1 and attribute_vocab_size >= 2")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")
        if not 0 <= self.n_test_identities < self.n_identities:
            raise ConfigError(
                f"n_test_identities must be in [0, n_identities), got {self.n_test_identities}"
            )


class Vocab:
    """Dense token-id table with reserved [CLS]/[PAD]/[MASK] ids."""

    def __init__(self, words: list[str]):
        specials = [CLS_TOKEN, PAD_TOKEN, MASK_TOKEN]
        for s in specials:
            if s in words:
                raise DataError(f"reserved token {s} collides with a word")
        self.id_to_token = specials + list(words)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate words in vocabulary")
        self.cls_id = self.token_to_id[CLS_TOKEN]
        self.pad_id = self.token_to_id[PAD_TOKEN]
        self.mask_id = self.token_to_id[MASK_TOKEN]

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def special_ids(self) -> set[int]:
        return {self.cls_id, self.pad_id, self.mask_id}

    def lookup(self, word: str) -> int:
        try:
            return self.token_to_id[word]
        except KeyError:
            raise VocabularyError(f"unknown word: {word!r}") from None

    def to_json(self) -> str:
        return json.dumps({"id_to_token": self.id_to_token}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        table = json.loads(text)["id_to_token"]
        v = cls(table[3:])
        if v.id_to_token != table:
            raise DataError("vocabulary table is not in canonical order")
        return v


def attribute_word(slot: int, value: int) -> str:
    return f"a{slot}v{value}"


def build_vocab(spec: CorpusSpec) -> Vocab:
    words = [
        attribute_word(s, v)
        for s in range(spec.n_attributes)
        for v in range(spec.attribute_vocab_size)
    ]
    return Vocab(words)


@dataclass
class Identity:
    id: int
    attributes: list[int]


@dataclass
class ImageSample:
    image_id: int
    identity_id: int
    pixels: np.ndarray  # (image_side, image_side) float32 in [0, 1]
    visible_mask: list[bool]


@dataclass
class TextSample:
    text_id: int
    identity_id: int
    source_image_id: int
    tokens: np.ndarray  # (max_len,) int64
    pad_mask: np.ndarray  # (max_len,) bool, True at padding positions


@dataclass
class Corpus:
    spec: CorpusSpec
    vocab: Vocab
    identities: list[Identity]
    images: list[ImageSample]
    texts: list[TextSample]
    split: dict[int, str] = field(default_factory=dict)  # identity id -> train/test

    def __post_init__(self):
        self._image_by_id = {im.image_id: im for im in self.images}
        self._images_of_identity: dict[int, list[int]] = {}
        for im in self.images:
            self._images_of_identity.setdefault(im.identity_id, []).append(im.image_id)

    def image(self, image_id: int) -> ImageSample:
        return self._image_by_id[image_id]

    def images_of_identity(self, identity_id: int) -> list[int]:
        return self._images_of_identity[identity_id]

    def split_identities(self, split: str) -> list[int]:
        return [i.id for i in self.identities if self.split[i.id] == split]

    def split_texts(self, split: str) -> list[TextSample]:
        return [t for t in self.texts if self.split[t.identity_id] == split]

    def split_images(self, split: str) -> list[ImageSample]:
        return [im for im in self.images if self.split[im.identity_id] == split]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.spec), sort_keys=True).encode())
        h.update(self.vocab.to_json().encode())
        for im in self.images:
            h.update(struct.pack("<qq", im.image_id, im.identity_id))
            h.update(np.packbits(np.asarray(im.visible_mask)).tobytes())
            h.update(im.pixels.astype("<f4").tobytes())
        for t in self.texts:
            h.update(struct.pack("<qqq", t.text_id, t.identity_id, t.source_image_id))
            h.update(t.tokens.astype("<i8").tobytes())
        h.update(json.dumps(self.split, sort_keys=True).encode())
        return h.hexdigest()


def _glyph_pattern(slot: int, value: int, patch_side: int) -> np.ndarray:
    """Deterministic per-(slot, value) cell pattern, values in [0.2, 1.0].

    Blank (occluded) cells are exactly 0, so a pattern never looks blank.
    """
    key = int.from_bytes(
        hashlib.sha256(f"glyph:{slot}:{value}".encode()).digest()[:8], "little"
    )
    rng = np.random.default_rng(key)
    bits = rng.random((patch_side, patch_side)) > 0.5
    return np.where(bits, 1.0, 0.2).astype(np.float32)


def render_image(
    spec: CorpusSpec, attributes: list[int], visible_mask: list[bool], rng: np.random.Generator
) -> np.ndarray:
    side, ps = spec.image_side, spec.patch_side
    grid = side // ps
    pixels = np.zeros((side, side), dtype=np.float32)
    for slot, value in enumerate(attributes):
        if not visible_mask[slot]:
            continue
        r, c = divmod(slot, grid)
        cell = _glyph_pattern(slot, value, ps).copy()
        # small per-image jitter so same-identity images are not byte-equal
        cell += rng.uniform(-0.05, 0.05, size=cell.shape).astype(np.float32)
        pixels[r * ps : (r + 1) * ps, c * ps : (c + 1) * ps] = cell
    return np.clip(pixels, 0.0, 1.0)


def _sample_visible_mask(spec: CorpusSpec, rng: np.random.Generator) -> list[bool]:
    # rejection sampling conditions the i.i.d. Bernoulli mask on >= 1 visible
    while True:
        mask = (rng.random(spec.n_attributes) >= spec.occlusion_rate).tolist()
        if any(mask):
            return mask


def encode_text(vocab: Vocab, words: list[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] + word ids, truncated/padded to max_len; returns (tokens, pad_mask)."""
    ids = [vocab.cls_id] + [vocab.lookup(w) for w in words]
    ids = ids[:max_len]
    n_real = len(ids)
    ids = ids + [vocab.pad_id] * (max_len - n_real)
    tokens = np.asarray(ids, dtype=np.int64)
    pad_mask = np.zeros(max_len, dtype=bool)
    pad_mask[n_real:] = True
    return tokens, pad_mask


def generate_corpus(spec: CorpusSpec) -> Corpus:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    vocab = build_vocab(spec)

    identities = []
    seen = set()
    for ident_id in range(spec.n_identities):
        # resample a few times to keep identities distinct when space allows
        for _ in range(64):
            attrs = rng.integers(0, spec.attribute_vocab_size, spec.n_attributes)
            key = tuple(int(a) for a in attrs)
            if key not in seen:
                break
        seen.add(key)
        identities.append(Identity(id=ident_id, attributes=list(key)))

    images: list[ImageSample] = []
    texts: list[TextSample] = []
    image_id = 0
    text_id = 0
    for ident in identities:
        for _ in range(spec.images_per_identity):
            mask = _sample_visible_mask(spec, rng)
            pixels = render_image(spec, ident.attributes, mask, rng)
            images.append(
                ImageSample(
                    image_id=image_id,
                    identity_id=ident.id,
                    pixels=pixels,
                    visible_mask=mask,
                )
            )
            visible_words = [
                attribute_word(s, ident.attributes[s])
                for s in range(spec.n_attributes)
                if mask[s]
            ]
            for _ in range(spec.texts_per_image):
                order = rng.permutation(len(visible_words))
                words = [visible_words[i] for i in order]
                tokens, pad_mask = encode_text(vocab, words, spec.max_len)
                texts.append(
                    TextSample(
                        text_id=text_id,
                        identity_id=ident.id,
                        source_image_id=image_id,
                        tokens=tokens,
                        pad_mask=pad_mask,
                    )
                )
                text_id += 1
            image_id += 1

    n_train = spec.n_identities - spec.n_test_identities
    split = {
        i.id: ("train" if i.id < n_train else "test") for i in identities
    }
    return Corpus(spec=spec, vocab=vocab, identities=identities, images=images, texts=texts, split=split)


@dataclass
class PairBatch:
    """Sampled positive pairs plus the strong counterpart of each text."""

    pixels: np.ndarray        # (B, S, S) the sampled positive image
    strong_pixels: np.ndarray  # (B, S, S) the text's source image
    tokens: np.ndarray        # (B, L)
    pad_masks: np.ndarray     # (B, L) bool
    identity_ids: np.ndarray  # (B,)
    relation_labels: np.ndarray  # (B,) STRONG/WEAK
    image_ids: np.ndarray     # (B,)
    text_ids: np.ndarray      # (B,)
    weak_fallbacks: int = 0   # weak draws downgraded to strong (single-image identity)

    def __len__(self) -> int:
        return len(self.identity_ids)


POSITIVE_MODES = ("strong_only", "probabilistic", "uniform_all")


def sample_pair_batch(
    corpus: Corpus,
    batch_size: int,
    p_w: float,
    positive_mode: str,
    rng: np.random.Generator,
    split: str = "train",
) -> PairBatch:
    """Draw texts uniformly, then pick the paired image per positive_mode.

    strong_only: always the source image. probabilistic: source image with
    prob 1-p_w, another same-identity image with prob p_w. uniform_all:
    uniform over all same-identity images (source included).
    """
    if not 0.0 <= p_w <= 1.0:
        raise ConfigError(f"p_w must be in [0, 1], got {p_w}")
    if positive_mode not in POSITIVE_MODES:
        raise ConfigError(f"positive_mode must be one of {POSITIVE_MODES}")
    pool = corpus.split_texts(split)
    if not pool:
        raise DataError(f"no texts in split {split!r}")

    picks = rng.integers(0, len(pool), batch_size)
    pixels, strong_pixels, tokens, pad_masks = [], [], [], []
    identity_ids, relations, image_ids, text_ids = [], [], [], []
    fallbacks = 0
    for idx in picks:
        text = pool[int(idx)]
        source = corpus.image(text.source_image_id)
        candidates = corpus.images_of_identity(text.identity_id)
        others = [i for i in candidates if i != text.source_image_id]

        if positive_mode == "strong_only":
            want_weak = False
        elif positive_mode == "probabilistic":
            want_weak = bool(rng.random() < p_w)
        else:  # uniform_all
            pick = int(candidates[rng.integers(0, len(candidates))])
            want_weak = pick != text.source_image_id
            if want_weak:
                others = [pick]

        if want_weak and not others:
            want_weak = False
            fallbacks += 1

        if want_weak:
            image = corpus.image(int(others[rng.integers(0, len(others))]))
            relations.append(WEAK)
        else:
            image = source
            relations.append(STRONG)

        pixels.append(image.pixels)
        strong_pixels.append(source.pixels)
        tokens.append(text.tokens)
        pad_masks.append(text.pad_mask)
        identity_ids.append(text.identity_id)
        image_ids.append(image.image_id)
        text_ids.append(text.text_id)

    return PairBatch(
        pixels=np.stack(pixels),
        strong_pixels=np.stack(strong_pixels),
        tokens=np.stack(tokens),
        pad_masks=np.stack(pad_masks),
        identity_ids=np.asarray(identity_ids, dtype=np.int64),
        relation_labels=np.asarray(relations, dtype=np.int64),
        image_ids=np.asarray(image_ids, dtype=np.int64),
        text_ids=np.asarray(text_ids, dtype=np.int64),
        weak_fallbacks=fallbacks,
    )


def mask_tokens(
    tokens: np.ndarray,
    pad_mask: np.ndarray,
    p_m: float,
    rng: np.random.Generator,
    vocab: Vocab,
) -> tuple[np.ndarray, list[int]]:
    """Replace eligible tokens by [MASK] i.i.d. with prob p_m.

    [CLS] and padding are never masked. If no token gets masked, one
    uniformly chosen eligible token is forced, so the prediction task is
    never vacuous.
    """
    if not 0.0 < p_m < 1.0:
        raise ConfigError(f"p_m must be in (0, 1), got {p_m}")
    eligible = [
        i
        for i in range(len(tokens))
        if not pad_mask[i] and int(tokens[i]) not in vocab.special_ids
    ]
    if not eligible:
        raise ContractError("text has no maskable tokens")
    positions = [i for i in eligible if rng.random() < p_m]
    if not positions:
        positions = [int(eligible[rng.integers(0, len(eligible))])]
    masked = tokens.copy()
    masked[positions] = vocab.mask_id
    return masked, sorted(positions)


# ---------------------------------------------------------------------------
# persistence: manifest (JSON lines) + flat binary pixel file + vocab JSON
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    pixels = np.stack([im.pixels for im in corpus.images]).astype("<f4")
    with open(out / "pixels.bin", "wb") as f:
        f.write(PIXELS_MAGIC)
        f.write(struct.pack("<B", 1))  # dtype code 1 = little-endian float32
        f.write(struct.pack("<III", *pixels.shape))
        f.write(pixels.tobytes())

    with open(out / "manifest.jsonl", "w") as f:
        f.write(json.dumps({"kind": "spec", **asdict(corpus.spec)}) + "\n")
        for ident in corpus.identities:
            f.write(
                json.dumps(
                    {
                        "kind": "identity",
                        "id": ident.id,
                        "attributes": ident.attributes,
                        "split": corpus.split[ident.id],
                    }
                )
                + "\n"
            )
        for row, im in enumerate(corpus.images):
            f.write(
                json.dumps(
                    {
                        "kind": "image",
                        "image_id": im.image_id,
                        "identity_id": im.identity_id,
                        "pixel_row": row,
                        "visible_mask": list(map(bool, im.visible_mask)),
                    }
                )
                + "\n"
            )
        for t in corpus.texts:
            f.write(
                json.dumps(
                    {
                        "kind": "text",
                        "text_id": t.text_id,
                        "identity_id": t.identity_id,
                        "source_image_id": t.source_image_id,
                        "tokens": t.tokens.tolist(),
                    }
                )
                + "\n"
            )

    (out / "vocab.json").write_text(corpus.vocab.to_json())


def load_corpus(in_dir: str | Path) -> Corpus:
    src = Path(in_dir)
    for required in ("pixels.bin", "manifest.jsonl", "vocab.json"):
        if not (src / required).exists():
            raise DataError(f"no corpus at {src}: missing {required}")
    with open(src / "pixels.bin", "rb") as f:
        if f.read(4) != PIXELS_MAGIC:
            raise DataError("bad pixel file magic")
        (code,) = struct.unpack("<B", f.read(1))
        if code not in _DTYPE_CODES:
            raise DataError(f"unknown pixel dtype code {code}")
        shape = struct.unpack("<III", f.read(12))
        pixels = np.frombuffer(f.read(), dtype=_DTYPE_CODES[code]).reshape(shape)

    vocab = Vocab.from_json((src / "vocab.json").read_text())

    spec = None
    identities, images, texts, split = [], [], [], {}
    with open(src / "manifest.jsonl") as f:
        for line in f:
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "spec":
                spec = CorpusSpec(**rec)
            elif kind == "identity":
                split[rec["id"]] = rec.pop("split")
                identities.append(Identity(**rec))
            elif kind == "image":
                row = rec.pop("pixel_row")
                images.append(
                    ImageSample(pixels=np.array(pixels[row], dtype=np.float32), **rec)
                )
            elif kind == "text":
                tokens = np.asarray(rec.pop("tokens"), dtype=np.int64)
                pad_mask = tokens == vocab.pad_id
                texts.append(TextSample(tokens=tokens, pad_mask=pad_mask, **rec))
            else:
                raise DataError(f"unknown manifest record kind {kind!r}")
    if spec is None:
        raise DataError("manifest has no spec record")
    return Corpus(spec=spec, vocab=vocab, identities=identities, images=images, texts=texts, split=split)
