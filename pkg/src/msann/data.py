"""Synthetic multi-label image corpus with noisy tags, its file format, and batching.

Each image holds ``m`` distinct class motifs (``m`` drawn from a categorical
quantity distribution) pasted on a noise background.  Motifs differ by
colour, shape and texture, so some classes are separable from low-level
statistics and others need shape.  Tags repeat each true class name with
probability ``q_emit`` and switch on every vocabulary entry independently
with probability ``q_noise``.

Directory layout written by :func:`save`::

    manifest.txt      key = value lines (format, classes, splits, generator)
    vocab.txt         one tag per line
    records.tsv       id <TAB> label indices <TAB> tag indices <TAB> crc32
    images/<id>.bin   16-byte header + little-endian float32 C*H*W payload
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, DataError
from .metrics import format_indices, format_record, parse_record
from .tags import TagVocabulary

FORMAT = "MSANN-DATA-1"
IMG_MAGIC = b"MSIMG1"
DTYPE_F32 = 1
_HEADER = struct.Struct("<6sBB3HH")  # magic, dtype, reserved, C, H, W, reserved -> 16 bytes

COLORS = {
    "red": (0.95, 0.12, 0.1),
    "green": (0.1, 0.85, 0.15),
    "blue": (0.15, 0.3, 1.0),
    "yellow": (1.0, 0.92, 0.1),
    "magenta": (0.9, 0.1, 0.9),
    "cyan": (0.1, 0.9, 0.95),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.55, 0.0),
}

# (name, colour, shape, texture).  Consecutive pairs share a colour and
# differ only by shape or by a pixel-scale texture, so colour alone never
# identifies a class.
MOTIFS = (
    ("red_square", "red", "square", "solid"),
    ("red_stripes", "red", "square", "hstripes"),
    ("green_disc", "green", "disc", "solid"),
    ("green_ring", "green", "ring", "solid"),
    ("blue_triangle", "blue", "triangle", "solid"),
    ("blue_checker", "blue", "triangle", "checker"),
    ("yellow_cross", "yellow", "cross", "solid"),
    ("yellow_vstripes", "yellow", "cross", "vstripes"),
    ("magenta_ring", "magenta", "ring", "solid"),
    ("magenta_diamond", "magenta", "diamond", "solid"),
    ("white_stripes", "white", "square", "hstripes"),
    ("white_checker", "white", "square", "checker"),
)

DEFAULT_QUANTITY_PROBS = (0.36, 0.26, 0.17, 0.11, 0.06, 0.04)


@dataclass
class SynthConfig:
    num_classes: int = 8
    image_size: int = 32
    vocab_size: int = 64
    num_train: int = 2000
    num_test: int = 500
    quantity_probs: tuple = DEFAULT_QUANTITY_PROBS
    q_emit: float = 0.7
    q_noise: float = 0.02
    motif_min: int = 7
    motif_max: int = 11
    background: float = 0.35
    texture_low: float = 0.7
    seed: int = 0

    def __post_init__(self):
        self.quantity_probs = tuple(float(p) for p in self.quantity_probs)

    @property
    def max_quantity(self):
        return len(self.quantity_probs)

    def validate(self):
        if not 1 <= self.num_classes <= len(MOTIFS):
            raise ConfigError(f"{self.num_classes} classes requested but the motif palette has {len(MOTIFS)}")
        if self.max_quantity > self.num_classes:
            raise ConfigError("max quantity exceeds number of classes")
        if self.vocab_size < self.num_classes:
            raise ConfigError("vocabulary must hold at least one tag per class")
        probs = np.asarray(self.quantity_probs)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"quantity distribution {self.quantity_probs} must be non-negative and sum to 1")
        for name in ("q_emit", "q_noise", "background", "texture_low"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 2 <= self.motif_min <= self.motif_max <= self.image_size:
            raise ConfigError("motif size range must fit inside the image")
        if self.num_train < 0 or self.num_test < 0:
            raise ConfigError("split sizes must be non-negative")
        return self

    def to_items(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(repr(x) for x in v) if isinstance(v, tuple) else repr(v)
        return out

    @classmethod
    def from_items(cls, items):
        kwargs = {}
        try:
            for f in fields(cls):
                if f.name not in items:
                    continue
                raw = items[f.name]
                if f.name == "quantity_probs":
                    kwargs[f.name] = tuple(float(x) for x in raw.split(","))
                elif isinstance(f.default, float):
                    kwargs[f.name] = float(raw)
                else:
                    kwargs[f.name] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"bad synthetic-data config: {exc}") from exc
        return cls(**kwargs)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    tags: np.ndarray  # uint8 [T]
    labels: tuple

    @property
    def quantity(self):
        return len(self.labels)

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.id == other.id
            and self.labels == other.labels
            and np.array_equal(self.tags, other.tags)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
        )


@dataclass
class SplitArrays:
    ids: list
    images: np.ndarray  # float64 [N, 3, H, W]
    tags: np.ndarray  # float64 [N, T]
    y: np.ndarray  # int64 [N, C]
    m: np.ndarray  # int64 [N]

    def __len__(self):
        return len(self.ids)

    def subset(self, index):
        index = np.asarray(index)
        return SplitArrays([self.ids[i] for i in index], self.images[index], self.tags[index],
                           self.y[index], self.m[index])


@dataclass
class Dataset:
    class_names: list
    vocab: TagVocabulary
    samples: dict
    splits: dict
    synth: SynthConfig | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def max_quantity(self):
        if self.synth is not None:
            return self.synth.max_quantity
        return max(s.quantity for s in self.samples.values())

    def split(self, name):
        return [self.samples[i] for i in self.splits[name]]

    def arrays(self, name):
        samples = self.split(name)
        C = self.num_classes
        y = np.zeros((len(samples), C), dtype=np.int64)
        for r, s in enumerate(samples):
            y[r, list(s.labels)] = 1
        return SplitArrays(
            ids=[s.id for s in samples],
            images=np.stack([s.image for s in samples]).astype(np.float64),
            tags=np.stack([s.tags for s in samples]).astype(np.float64),
            y=y,
            m=y.sum(axis=1),
        )

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.class_names == other.class_names
            and self.vocab == other.vocab
            and self.splits == other.splits
            and self.synth == other.synth
            and list(self.samples) == list(other.samples)
            and all(self.samples[k] == other.samples[k] for k in self.samples)
        )


# ----------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------
def _shape_mask(shape, size):
    c = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(c, c, indexing="ij")
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disc":
        return u * u + v * v <= 1.0
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    if shape == "triangle":
        return np.abs(u) <= (v + 1) / 2
    if shape == "cross":
        return (np.abs(u) < 0.34) | (np.abs(v) < 0.34)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    raise ConfigError(f"unknown shape {shape}")


def _texture_mask(texture, size):
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if texture == "solid":
        return np.ones((size, size), dtype=bool)
    if texture == "hstripes":
        return r % 2 == 0
    if texture == "vstripes":
        return c % 2 == 0
    if texture == "checker":
        return (r + c) % 2 == 0
    raise ConfigError(f"unknown texture {texture}")


def _place(rng, size, extent, boxes, tries=8):
    best, best_overlap = None, None
    for _ in range(tries):
        y0, x0 = rng.integers(0, extent - size + 1, size=2)
        overlap = 0
        for by, bx, bs in boxes:
            oy = max(0, min(y0 + size, by + bs) - max(y0, by))
            ox = max(0, min(x0 + size, bx + bs) - max(x0, bx))
            overlap += oy * ox
        if best is None or overlap < best_overlap:
            best, best_overlap = (int(y0), int(x0)), overlap
            if overlap == 0:
                break
    return best


def render(labels, config, rng):
    """Composite the motifs of ``labels`` on a noise background; float32 [3,H,W]."""
    H = config.image_size
    img = rng.uniform(0.0, config.background, size=(3, H, H))
    boxes = []
    for j in rng.permutation(list(labels)):
        _, colour, shape, texture = MOTIFS[j]
        size = int(rng.integers(config.motif_min, config.motif_max + 1))
        y0, x0 = _place(rng, size, H, boxes)
        boxes.append((y0, x0, size))
        mask = _shape_mask(shape, size)
        tex = _texture_mask(texture, size)
        rgb = np.clip(np.asarray(COLORS[colour]) * rng.uniform(0.85, 1.0), 0, 1)
        patch = img[:, y0 : y0 + size, x0 : x0 + size]
        fill = np.where(tex, 1.0, config.texture_low)[None] * rgb[:, None, None]
        patch[:] = np.where(mask[None], fill, patch)
    return img.astype(np.float32)


def class_names(config):
    return [MOTIFS[j][0] for j in range(config.num_classes)]


def synthetic_vocabulary(config):
    names = class_names(config)
    return TagVocabulary(names + [f"noise_{k:03d}" for k in range(config.vocab_size - len(names))])


def draw_labels(config, rng):
    m = int(rng.choice(config.max_quantity, p=config.quantity_probs)) + 1
    return tuple(sorted(int(j) for j in rng.choice(config.num_classes, size=m, replace=False)))


def draw_tags(labels, config, rng):
    t = (rng.random(config.vocab_size) < config.q_noise).astype(np.uint8)
    emitted = rng.random(len(labels)) < config.q_emit
    for j, keep in zip(labels, emitted):
        if keep:
            t[j] = 1
    return t


def make_sample(index, config, render_image=True):
    rng = np.random.default_rng([config.seed, index])
    labels = draw_labels(config, rng)
    tags = draw_tags(labels, config, rng)
    if render_image:
        image = render(labels, config, rng)
    else:
        image = np.zeros((3, config.image_size, config.image_size), dtype=np.float32)
    return Sample(id=f"s{index:06d}", image=image, tags=tags, labels=labels)


def generate(config):
    """Deterministic dataset: first ``num_train`` samples train, the rest test."""
    config.validate()
    total = config.num_train + config.num_test
    samples = {}
    for i in range(total):
        s = make_sample(i, config)
        samples[s.id] = s
    ids = list(samples)
    return Dataset(
        class_names=class_names(config),
        vocab=synthetic_vocabulary(config),
        samples=samples,
        splits={"train": ids[: config.num_train], "test": ids[config.num_train :]},
        synth=config,
    )


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------
def encode_image(image):
    arr = np.ascontiguousarray(image, dtype="<f4")
    if arr.ndim != 3:
        raise DataError(f"image must be [C,H,W], got {arr.shape}")
    return _HEADER.pack(IMG_MAGIC, DTYPE_F32, 0, *arr.shape, 0) + arr.tobytes()


def decode_image(blob, sample_id="?"):
    if len(blob) < _HEADER.size:
        raise DataError(f"sample {sample_id}: image file truncated (no header)")
    magic, dtype, _, c, h, w, _ = _HEADER.unpack(blob[: _HEADER.size])
    if magic != IMG_MAGIC:
        raise DataError(f"sample {sample_id}: bad image magic {magic!r}")
    if dtype != DTYPE_F32:
        raise DataError(f"sample {sample_id}: unsupported dtype code {dtype}")
    payload = blob[_HEADER.size :]
    if len(payload) != 4 * c * h * w:
        raise DataError(
            f"sample {sample_id}: image payload has {len(payload)} bytes, header {c}x{h}x{w} needs {4 * c * h * w}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)


def save(dataset, directory):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    dataset.vocab.save(os.path.join(directory, "vocab.txt"))
    records = []
    for sid, s in dataset.samples.items():
        blob = encode_image(s.image)
        with open(os.path.join(directory, "images", f"{sid}.bin"), "wb") as fh:
            fh.write(blob)
        tag_idx = np.flatnonzero(s.tags)
        records.append(format_record(sid, s.labels, format_indices(tag_idx), f"{zlib.crc32(blob):08x}"))
    with open(os.path.join(directory, "records.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(records) + ("\n" if records else ""))
    lines = [
        f"format = {FORMAT}",
        f"classes = {','.join(dataset.class_names)}",
        "vocab = vocab.txt",
    ]
    for name, ids in dataset.splits.items():
        lines.append(f"split.{name} = {','.join(ids)}")
    if dataset.synth is not None:
        lines += [f"synth.{k} = {v}" for k, v in dataset.synth.to_items().items()]
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_manifest(path):
    items = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                items[key.strip()] = value.strip()
    except FileNotFoundError as exc:
        raise DataError(f"manifest missing: {path}") from exc
    if items.get("format") != FORMAT:
        raise DataError(f"{path}: unexpected format {items.get('format')!r}")
    return items


def load(directory):
    items = _read_manifest(os.path.join(directory, "manifest.txt"))
    vocab = TagVocabulary.load(os.path.join(directory, items.get("vocab", "vocab.txt")))
    names = items["classes"].split(",") if items.get("classes") else []
    splits = {k[len("split."):]: (v.split(",") if v else []) for k, v in items.items() if k.startswith("split.")}
    synth_items = {k[len("synth."):]: v for k, v in items.items() if k.startswith("synth.")}
    synth = SynthConfig.from_items(synth_items) if synth_items else None

    records = {}
    rec_path = os.path.join(directory, "records.tsv")
    if not os.path.exists(rec_path):
        raise DataError(f"records file missing: {rec_path}")
    with open(rec_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                sid, labels, extra = parse_record(line)
                records[sid] = (labels, extra)

    referenced = [sid for ids in splits.values() for sid in ids]
    missing = [sid for sid in referenced if sid not in records
               or not os.path.exists(os.path.join(directory, "images", f"{sid}.bin"))]
    if missing:
        raise DataError(f"manifest references absent samples: {missing}")

    samples = {}
    for sid, (labels, extra) in records.items():
        with open(os.path.join(directory, "images", f"{sid}.bin"), "rb") as fh:
            blob = fh.read()
        if len(extra) > 1 and extra[1] and f"{zlib.crc32(blob):08x}" != extra[1]:
            raise DataError(f"sample {sid}: checksum mismatch")
        image = decode_image(blob, sid)
        tags = np.zeros(len(vocab), dtype=np.uint8)
        for k in (int(v) for v in extra[0].split(",") if v) if extra else ():
            if k >= len(vocab):
                raise DataError(f"sample {sid}: tag index {k} outside vocabulary")
            tags[k] = 1
        if any(j >= len(names) for j in labels):
            raise DataError(f"sample {sid}: label index outside {len(names)} classes")
        samples[sid] = Sample(sid, image, tags, tuple(labels))
    return Dataset(class_names=names, vocab=vocab, samples=samples, splits=splits, synth=synth)


# ----------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------
def batch_iter(data, batch_size, shuffle_seed=None):
    """Yield :class:`SplitArrays` batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(data))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(data))
    for start in range(0, len(data), batch_size):
        yield data.subset(order[start : start + batch_size])
