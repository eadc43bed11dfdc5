"""Synthetic multi-view captioning corpus.

A scene holds one to three coloured shapes at distinct horizontal positions.
Each of the ``M`` synthetic encoders sees only some attributes (its info
mask) and renders them into a coarse grid of annotation cells, so no single
view carries everything a caption mentions.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import END, PAD, START, UNK, EncoderOutput, View
from .numerics import Rng

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "blue", "green", "yellow")
SIZES = ("small", "big")
POSITIONS = ("left", "center", "right")
ATTRIBUTES = ("shape", "color", "size", "position")
_VALUES = {"shape": SHAPES, "color": COLORS, "size": SIZES, "position": POSITIONS}

RESERVED = ("<pad>", "<start>", "<end>", "<unk>")
MAX_CAPTION_TOKENS = 16

# position is always carried by the grid cell; the masks pick the appearance
# attributes a view renders.  Every mask misses one, any two consecutive masks
# cover all three.
_MASKS = (
    ("shape", "size"),
    ("color", "size"),
    ("shape", "color"),
    ("size",),
    ("color",),
)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    position: str

    def phrase(self, with_size: bool = True) -> str:
        words = ["a", self.size, self.color, self.shape] if with_size else ["a", self.color, self.shape]
        return " ".join(words)


@dataclass
class SyntheticScene:
    objects: tuple  # SceneObjects sorted left to right
    latent: np.ndarray = field(repr=False, default=None)

    def codes(self) -> list:
        return [tuple(_VALUES[a].index(getattr(o, a)) for a in ATTRIBUTES) for o in self.objects]


def _where(o: SceneObject) -> str:
    return "in the center" if o.position == "center" else f"on the {o.position}"


def caption_templates(scene: SyntheticScene) -> list:
    """Every caption the grammar allows for ``scene``; a pure function of the objects."""
    obs = scene.objects
    if len(obs) == 1:
        (o,) = obs
        return [
            f"{o.phrase()}",
            f"{o.phrase()} {_where(o)}",
            f"there is {o.phrase()} {_where(o)}",
            f"{o.phrase(False)} that is {o.size}",
            f"an image with {o.phrase()}",
        ]
    if len(obs) == 2:
        a, b = obs
        return [
            f"{a.phrase()} left of {b.phrase()}",
            f"{b.phrase()} right of {a.phrase()}",
            f"{a.phrase(False)} and {b.phrase(False)}",
            f"two shapes {a.phrase()} and {b.phrase()}",
            f"there is {a.phrase()} next to {b.phrase(False)}",
        ]
    a, b, c = obs
    return [
        f"{a.phrase()} left of {b.phrase()} left of {c.phrase(False)}",
        f"{a.phrase(False)} {b.phrase(False)} and {c.phrase(False)}",
        f"three shapes {a.phrase(False)} {b.phrase(False)} and {c.phrase(False)}",
        f"{b.phrase()} between {a.phrase(False)} and {c.phrase(False)}",
        f"a row of {a.phrase(False)} {b.phrase(False)} and {c.phrase(False)}",
    ]


def _decorate(text: str, rng: Rng) -> str:
    """Raw-text noise (capitals, punctuation) that normalisation removes again."""
    if rng.random() < 0.5:
        text = text[0].upper() + text[1:]
    if rng.random() < 0.5:
        text += "."
    return text


_NON_ALPHA = re.compile(r"[^a-z\s]")


def normalize_tokenize(text: str) -> list:
    """Lowercase, drop non-alphabetic characters and split on whitespace."""
    return _NON_ALPHA.sub("", text.lower()).split()


@dataclass
class Vocabulary:
    itos: list
    counts: dict

    def __post_init__(self):
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def encode(self, tokens: Sequence[str], bos_eos: bool = True) -> list:
        ids = [self.id(w) for w in tokens]
        return [START] + ids + [END] if bos_eos else ids

    def decode(self, ids: Iterable[int]) -> list:
        return [self.itos[i] for i in ids if i not in (PAD, START, END)]

    def frequent_ids(self, n: int) -> list:
        """Vocabulary ids of the ``n`` most frequent non-reserved tokens, ties by id."""
        ranked = sorted(range(len(RESERVED), len(self.itos)), key=lambda i: (-self.counts.get(self.itos[i], 0), i))
        return ranked[:n]

    def save(self, path) -> None:
        lines = [f"{w}\t{self.counts.get(w, 0)}" for w in self.itos]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        itos, counts = [], {}
        for line in Path(path).read_text().splitlines():
            word, count = line.split("\t")
            itos.append(word)
            if word not in RESERVED:
                counts[word] = int(count)
        return cls(itos, counts)

    def to_json(self) -> str:
        return json.dumps({"itos": self.itos, "counts": self.counts})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        d = json.loads(text)
        return cls(d["itos"], d["counts"])


def build_vocab(token_streams: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Words seen fewer than ``min_count`` times map to UNK; ids sorted by count then word."""
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    counts = Counter()
    for tokens in token_streams:
        counts.update(tokens)
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept, {w: counts[w] for w in kept})


def frequent_word_set(vocab: Vocabulary, caption: Sequence[int], n_frequent: int) -> set:
    """Positions, in the frequency ranking, of the top-``n_frequent`` words present in ``caption``."""
    if n_frequent > len(vocab):
        raise ValueError("n_frequent exceeds the vocabulary size")
    rank = {vid: r for r, vid in enumerate(vocab.frequent_ids(n_frequent))}
    return {rank[t] for t in caption if t in rank}


# ---------------------------------------------------------------------------
# Encoders and dataset generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticEncoder:
    """Fixed random renderer from visible attributes to a grid of annotation cells."""

    view_id: int
    info_mask: tuple
    k: int
    d: int
    projection: np.ndarray  # (n_features, d)
    noise: float = 0.05

    @classmethod
    def create(cls, view_id: int, k: int, d: int, seed: int, noise: float = 0.05) -> "SyntheticEncoder":
        mask = _MASKS[view_id % len(_MASKS)]
        n_feat = int(np.sum([len(_VALUES[a]) for a in mask]))
        rng = Rng(seed).spawn(1, view_id)
        proj = rng.normal(1.0 / np.sqrt(n_feat), (n_feat, d))
        return cls(view_id, mask, k, d, proj, noise)

    def features(self, obj: SceneObject) -> np.ndarray:
        parts = []
        for a in self.info_mask:
            vals = _VALUES[a]
            onehot = np.zeros(len(vals))
            onehot[vals.index(getattr(obj, a))] = 1.0
            parts.append(onehot)
        return np.concatenate(parts)

    def encode(self, scene: SyntheticScene, rng: Rng) -> View:
        cells = np.zeros((self.k, self.projection.shape[0]))
        for obj in scene.objects:
            centre = (POSITIONS.index(obj.position) + 0.5) / len(POSITIONS)
            cell = min(int(centre * self.k), self.k - 1)
            cells[cell] += self.features(obj)
        A = cells @ self.projection + rng.normal(self.noise, (self.k, self.d))
        return View(A.mean(axis=0), A)


@dataclass
class Example:
    scene: SyntheticScene
    captions: list  # token id lists with START/END
    enc: EncoderOutput


@dataclass
class Dataset:
    vocab: Vocabulary
    splits: dict  # name -> list[Example]
    encoders: list
    seed: int
    n_frequent: int

    @property
    def view_dims(self) -> tuple:
        return tuple(e.d for e in self.encoders)

    def references(self, split: str) -> list:
        """Caption token lists (no START/END) per example."""
        return [[self.vocab.decode(c) for c in ex.captions] for ex in self.splits[split]]

    def frequent_sets(self, captions: Sequence[Sequence[int]]) -> list:
        return [frequent_word_set(self.vocab, c, self.n_frequent) for c in captions]


def random_scene(rng: Rng) -> SyntheticScene:
    n = int(rng.integers(1, 4))
    positions = sorted(rng.permutation(len(POSITIONS))[:n])
    objs = tuple(
        SceneObject(
            SHAPES[int(rng.integers(0, 4))],
            COLORS[int(rng.integers(0, 4))],
            SIZES[int(rng.integers(0, 2))],
            POSITIONS[p],
        )
        for p in positions
    )
    latent = np.concatenate(
        [np.eye(len(_VALUES[a]))[_VALUES[a].index(getattr(o, a))] for o in objs for a in ATTRIBUTES]
    )
    return SyntheticScene(objs, latent)


def _raw_captions(scene: SyntheticScene, rng: Rng, n_captions: int | None = None) -> list:
    templates = caption_templates(scene)
    n = n_captions or int(rng.integers(2, 6))
    picks = sorted(rng.permutation(len(templates))[:n])
    return [_decorate(templates[i], rng) for i in picks]


def generate_dataset(
    n_scenes: int,
    M: int = 3,
    k: Sequence[int] | int = (4, 6, 8),
    dims: Sequence[int] | int = 16,
    seed: int = 0,
    split_fractions: tuple = (0.8, 0.1, 0.1),
    min_count: int = 5,
    n_frequent: int = 1000,
    captions_per_scene: int | None = None,
    noise: float = 0.05,
) -> Dataset:
    """Build a reproducible dataset; every scene draws from its own seeded stream."""
    if n_scenes < 3:
        raise ValueError("need at least 3 scenes (one per split)")
    ks = [k] * M if isinstance(k, int) else list(k)
    ds = [dims] * M if isinstance(dims, int) else list(dims)
    if M < 1 or len(ks) != M or len(ds) != M or min(ks) < 1 or min(ds) < 1:
        raise ValueError("M, k and dims must describe at least one view with positive sizes")
    if captions_per_scene is not None and not 1 <= captions_per_scene <= 5:
        raise ValueError("captions_per_scene must be between 1 and 5")
    encoders = [SyntheticEncoder.create(m, ks[m], ds[m], seed, noise) for m in range(M)]
    root = Rng(seed)

    scenes, raw, views = [], [], []
    for i in range(n_scenes):
        srng = root.spawn(0, i)
        scene = random_scene(srng)
        scenes.append(scene)
        raw.append([normalize_tokenize(t) for t in _raw_captions(scene, srng, captions_per_scene)])
        views.append(EncoderOutput([enc.encode(scene, srng) for enc in encoders]))

    n_val = max(1, int(round(n_scenes * split_fractions[1])))
    n_test = max(1, int(round(n_scenes * split_fractions[2])))
    n_train = n_scenes - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = n_scenes - 2, 1, 1
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n_scenes)}

    lo, hi = bounds["train"]
    vocab = build_vocab((c for caps in raw[lo:hi] for c in caps), min_count)
    splits = {}
    for name, (lo, hi) in bounds.items():
        splits[name] = [Example(scenes[i], [vocab.encode(c) for c in raw[i]], views[i]) for i in range(lo, hi)]
    n_freq = min(n_frequent, len(vocab) - len(RESERVED))
    return Dataset(vocab, splits, encoders, seed, max(n_freq, 1))


# ---------------------------------------------------------------------------
# Serialisation: manifest.json, vocab.txt, one <split>.rec per split
#
# A record file is b"RFD1", u32 version, u32 record count, then per record a
# u32 payload length followed by the payload:
#   u8 n_objects, n_objects * 4 u8 attribute codes (shape, color, size, position)
#   u8 n_captions, per caption u16 length + u16 token ids
#   u8 n_views, per view u32 k, u32 d, float64 a0[d], float64 A[k*d]
# All integers and floats are little-endian.
# ---------------------------------------------------------------------------

_REC_MAGIC = b"RFD1"
_REC_VERSION = 1


def _pack_example(ex: Example) -> bytes:
    out = [struct.pack("<B", len(ex.scene.objects))]
    for code in ex.scene.codes():
        out.append(struct.pack("<4B", *code))
    out.append(struct.pack("<B", len(ex.captions)))
    for cap in ex.captions:
        out.append(struct.pack(f"<H{len(cap)}H", len(cap), *cap))
    out.append(struct.pack("<B", len(ex.enc.views)))
    for v in ex.enc.views:
        k, d = v.A.shape
        out.append(struct.pack("<II", k, d))
        out.append(np.ascontiguousarray(v.a0, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(v.A, dtype="<f8").tobytes())
    return b"".join(out)


def _unpack_example(buf: bytes) -> Example:
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n_obj,) = take("<B")
    objs = []
    for _ in range(n_obj):
        codes = take("<4B")
        objs.append(SceneObject(*(_VALUES[a][c] for a, c in zip(ATTRIBUTES, codes))))
    (n_cap,) = take("<B")
    caps = []
    for _ in range(n_cap):
        (length,) = take("<H")
        caps.append(list(take(f"<{length}H")))
    (n_views,) = take("<B")
    views = []
    for _ in range(n_views):
        k, d = take("<II")
        a0 = np.frombuffer(buf, "<f8", d, pos).astype(np.float64)
        pos += 8 * d
        A = np.frombuffer(buf, "<f8", k * d, pos).astype(np.float64).reshape(k, d)
        pos += 8 * k * d
        views.append(View(a0, A))
    scene = SyntheticScene(tuple(objs))
    return Example(scene, caps, EncoderOutput(views))


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "rfnet-dataset",
        "version": _REC_VERSION,
        "seed": ds.seed,
        "n_frequent": ds.n_frequent,
        "counts": {k: len(v) for k, v in ds.splits.items()},
        "views": [{"view_id": e.view_id, "k": e.k, "d": e.d, "info_mask": list(e.info_mask)} for e in ds.encoders],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ds.vocab.save(d / "vocab.txt")
    for name, examples in ds.splits.items():
        with open(d / f"{name}.rec", "wb") as fh:
            fh.write(_REC_MAGIC + struct.pack("<II", _REC_VERSION, len(examples)))
            for ex in examples:
                payload = _pack_example(ex)
                fh.write(struct.pack("<I", len(payload)) + payload)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    vocab = Vocabulary.load(d / "vocab.txt")
    splits = {}
    for name in manifest["counts"]:
        buf = (d / f"{name}.rec").read_bytes()
        if buf[:4] != _REC_MAGIC:
            raise ValueError(f"{name}.rec: bad magic")
        version, n = struct.unpack_from("<II", buf, 4)
        if version != _REC_VERSION:
            raise ValueError(f"{name}.rec: unsupported version {version}")
        pos, examples = 12, []
        for _ in range(n):
            (length,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            examples.append(_unpack_example(buf[pos : pos + length]))
            pos += length
        splits[name] = examples
    encoders = [
        SyntheticEncoder.create(v["view_id"], v["k"], v["d"], manifest["seed"]) for v in manifest["views"]
    ]
    return Dataset(vocab, splits, encoders, manifest["seed"], manifest["n_frequent"])
