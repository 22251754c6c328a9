"""Dataset ingestion and synthesis.

Three responsibilities: load MNIST-style IDX files, draw the seeded
explanation subset, and generate synthetic glyph datasets whose stroke
geometry is known exactly (the ground-truth testbed for the analysis
pipeline).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadFractionError,
    BadMagicError,
    CountMismatchError,
    EmptyDatasetError,
    SpecOverflowError,
    TruncatedFileError,
)

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Immutable image-classification dataset.

    images: (N, H, W, C) float64 in [0, 1]; labels: (N,) int64 in [0, M);
    sample_ids: (N,) int64, unique and stable across subsetting.
    """

    images: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        n = self.images.shape[0]
        if n == 0:
            raise EmptyDatasetError("dataset holds zero records")
        if self.images.ndim != 4:
            raise CountMismatchError(f"images must be (N,H,W,C), got {self.images.shape}")
        if self.labels.shape != (n,) or self.sample_ids.shape != (n,):
            raise CountMismatchError("labels/sample_ids length != image count")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise CountMismatchError("label outside [0, class_count)")
        if len(np.unique(self.sample_ids)) != n:
            raise CountMismatchError("sample_ids not unique")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise CountMismatchError(f"pixel range [{lo}, {hi}] outside [0, 1]")

    @property
    def size(self) -> int:
        return int(self.images.shape[0])

    def subset(self, indices) -> "LabeledDataset":
        """Row subset preserving ids; indices in dataset order."""
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            sample_ids=self.sample_ids[idx],
            class_count=self.class_count,
        )

    def subset_by_ids(self, ids) -> "LabeledDataset":
        """Subset keeping rows whose sample_id is in ``ids`` (dataset order)."""
        wanted = set(int(i) for i in ids)
        keep = [i for i, sid in enumerate(self.sample_ids) if int(sid) in wanted]
        if not keep:
            raise EmptyDatasetError("no matching sample ids")
        return self.subset(keep)


def _read_exact(f, n: int, path: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"{path}: expected {n} more bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian headers, byte pixels).

    Pixels are scaled to [0, 1] by /255; sample ids are record indices.
    """
    images_path, labels_path = str(images_path), str(labels_path)
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != _IDX_IMAGES_MAGIC:
            raise BadMagicError(f"{images_path}: magic 0x{magic:08x} != 0x{_IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, n * rows * cols, images_path)
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != _IDX_LABELS_MAGIC:
            raise BadMagicError(f"{labels_path}: magic 0x{magic:08x} != 0x{_IDX_LABELS_MAGIC:08x}")
        raw_labels = _read_exact(f, n_labels, labels_path)
    if n != n_labels:
        raise CountMismatchError(f"{n} images vs {n_labels} labels")
    if n == 0:
        raise EmptyDatasetError("IDX pair holds zero records")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols, 1) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(
        images=images,
        labels=labels,
        sample_ids=np.arange(n, dtype=np.int64),
        class_count=int(labels.max()) + 1,
    )


def save_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels quantized to bytes)."""
    if dataset.images.shape[3] != 1:
        raise CountMismatchError("IDX export supports single-channel images only")
    n, rows, cols, _ = dataset.images.shape
    pixels = np.round(dataset.images[..., 0] * 255.0).astype(np.uint8)
    with open(str(images_path), "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(str(labels_path), "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def sample_explanation_set(d: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Draw floor(fraction*N) samples without replacement by a seeded shuffle.

    The retained rows keep their original relative order, so identical
    (dataset, fraction, seed) always yields the identical subset.
    """
    if not (0.0 < fraction <= 1.0):
        raise BadFractionError(f"fraction {fraction} outside (0, 1]")
    n = d.size
    keep = int(np.floor(fraction * n))
    if keep == 0:
        raise EmptyDatasetError(f"fraction {fraction} of {n} samples is empty")
    if keep == n:
        return d.subset(np.arange(n))
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = np.sort(rng.permutation(n)[:keep])
    return d.subset(chosen)


# --- synthetic glyphs --------------------------------------------------------

_STROKE_KINDS = ("hbar", "vbar", "diag", "corner")


@dataclass(frozen=True)
class Stroke:
    """One stroke primitive anchored at (row, col).

    hbar: length pixels rightward; vbar: length pixels downward;
    diag: length steps along "se" (down-right) or "sw" (down-left);
    corner: two edges of a length x length box, named by which corner
    ("tl", "tr", "bl", "br"). All strokes have a square brush of
    ``thickness`` pixels.
    """

    kind: str
    row: int
    col: int
    length: int
    thickness: int = 2
    direction: str = "se"
    orientation: str = "tl"

    def rasterize(self, height: int, width: int) -> np.ndarray:
        mask = np.zeros((height, width), dtype=bool)

        def paint(r0, r1, c0, c1):
            if r0 < 0 or c0 < 0 or r1 > height or c1 > width:
                raise SpecOverflowError(
                    f"{self.kind} at ({self.row},{self.col}) len {self.length} "
                    f"exceeds {height}x{width} bounds"
                )
            mask[r0:r1, c0:c1] = True

        t = self.thickness
        if self.kind == "hbar":
            paint(self.row, self.row + t, self.col, self.col + self.length)
        elif self.kind == "vbar":
            paint(self.row, self.row + self.length, self.col, self.col + t)
        elif self.kind == "diag":
            step = 1 if self.direction == "se" else -1
            for i in range(self.length):
                c = self.col + step * i
                paint(self.row + i, self.row + i + t, c, c + t)
        elif self.kind == "corner":
            r, c, n = self.row, self.col, self.length
            top = (r, r + t, c, c + n)
            bottom = (r + n - t, r + n, c, c + n)
            left = (r, r + n, c, c + t)
            right = (r, r + n, c + n - t, c + n)
            arms = {"tl": (top, left), "tr": (top, right), "bl": (bottom, left), "br": (bottom, right)}
            if self.orientation not in arms:
                raise SpecOverflowError(f"unknown corner orientation {self.orientation!r}")
            for arm in arms[self.orientation]:
                paint(*arm)
        else:
            raise SpecOverflowError(f"unknown stroke kind {self.kind!r}")
        return mask

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "row": self.row, "col": self.col, "length": self.length,
             "thickness": self.thickness}
        if self.kind == "diag":
            d["direction"] = self.direction
        if self.kind == "corner":
            d["orientation"] = self.orientation
        return d

    @staticmethod
    def from_dict(d: dict) -> "Stroke":
        return Stroke(
            kind=d["kind"], row=d["row"], col=d["col"], length=d["length"],
            thickness=d.get("thickness", 2), direction=d.get("direction", "se"),
            orientation=d.get("orientation", "tl"),
        )


@dataclass(frozen=True)
class SharedStroke:
    """A stroke planted in a seeded fraction of two designated classes."""

    stroke: Stroke
    classes: tuple
    fraction: float


@dataclass
class GlyphSpec:
    """Declarative recipe for a synthetic glyph dataset."""

    classes: list  # list[list[Stroke]]
    image_size: tuple = (28, 28)
    noise: float = 0.0
    shared_stroke: SharedStroke | None = None

    def __post_init__(self):
        if len(self.classes) < 2:
            raise SpecOverflowError("need at least 2 classes")
        if any(len(strokes) < 1 for strokes in self.classes):
            raise SpecOverflowError("every class needs at least one stroke")
        if self.shared_stroke is not None:
            a, b = self.shared_stroke.classes
            if not (0 <= a < len(self.classes) and 0 <= b < len(self.classes)) or a == b:
                raise SpecOverflowError("shared stroke must name two distinct classes")
            if not (0.0 <= self.shared_stroke.fraction <= 1.0):
                raise SpecOverflowError("shared-stroke fraction outside [0, 1]")

    def to_json(self) -> str:
        doc = {
            "image_size": list(self.image_size),
            "noise": self.noise,
            "classes": [[s.to_dict() for s in strokes] for strokes in self.classes],
        }
        if self.shared_stroke is not None:
            doc["shared_stroke"] = {
                "stroke": self.shared_stroke.stroke.to_dict(),
                "classes": list(self.shared_stroke.classes),
                "fraction": self.shared_stroke.fraction,
            }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "GlyphSpec":
        doc = json.loads(text)
        shared = None
        if "shared_stroke" in doc:
            ss = doc["shared_stroke"]
            shared = SharedStroke(
                stroke=Stroke.from_dict(ss["stroke"]),
                classes=tuple(ss["classes"]),
                fraction=ss["fraction"],
            )
        return GlyphSpec(
            classes=[[Stroke.from_dict(s) for s in strokes] for strokes in doc["classes"]],
            image_size=tuple(doc.get("image_size", (28, 28))),
            noise=doc.get("noise", 0.0),
            shared_stroke=shared,
        )


@dataclass
class GlyphMasks:
    """Ground-truth stroke geometry for a generated glyph dataset.

    stroke_masks maps a stroke name ("c<label>/s<j>" or "shared") to its
    (H, W) pixel mask; sample_strokes[i] lists the names present in sample i.
    """

    stroke_masks: dict
    sample_strokes: list
    shared_carriers: np.ndarray

    def for_sample(self, i: int) -> dict:
        return {name: self.stroke_masks[name] for name in self.sample_strokes[i]}


def gen_glyphs(spec: GlyphSpec, per_class: int, seed: int):
    """Render ``per_class`` samples per class with seeded pixel noise.

    Returns (dataset, masks). Stroke pixels are exactly 1.0 (noise saturates
    there), background is uniform in [0, noise]. Deterministic under seed.
    """
    if per_class < 1:
        raise EmptyDatasetError("per_class must be >= 1")
    height, width = spec.image_size
    n_classes = len(spec.classes)

    stroke_masks = {}
    class_masks = []  # per class: list of (name, mask)
    for c, strokes in enumerate(spec.classes):
        entries = []
        for j, stroke in enumerate(strokes):
            name = f"c{c}/s{j}"
            mask = stroke.rasterize(height, width)
            stroke_masks[name] = mask
            entries.append((name, mask))
        class_masks.append(entries)
    shared_mask = None
    if spec.shared_stroke is not None:
        shared_mask = spec.shared_stroke.stroke.rasterize(height, width)
        stroke_masks["shared"] = shared_mask

    rng = np.random.Generator(np.random.PCG64(seed))
    carriers_by_class = {}
    if spec.shared_stroke is not None:
        count = int(np.floor(spec.shared_stroke.fraction * per_class))
        for c in spec.shared_stroke.classes:
            carriers_by_class[c] = set(np.sort(rng.permutation(per_class)[:count]).tolist())

    n = n_classes * per_class
    images = np.zeros((n, height, width, 1), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    sample_strokes = []
    shared_carriers = np.zeros(n, dtype=bool)
    i = 0
    for c in range(n_classes):
        base = np.zeros((height, width), dtype=np.float64)
        for _, mask in class_masks[c]:
            base[mask] = 1.0
        names = tuple(name for name, _ in class_masks[c])
        for k in range(per_class):
            canvas = base.copy()
            present = names
            if shared_mask is not None and k in carriers_by_class.get(c, ()):
                canvas[shared_mask] = 1.0
                present = names + ("shared",)
                shared_carriers[i] = True
            if spec.noise > 0.0:
                canvas = np.clip(canvas + spec.noise * rng.random((height, width)), 0.0, 1.0)
            images[i, :, :, 0] = canvas
            labels[i] = c
            sample_strokes.append(present)
            i += 1

    dataset = LabeledDataset(
        images=images,
        labels=labels,
        sample_ids=np.arange(n, dtype=np.int64),
        class_count=n_classes,
    )
    return dataset, GlyphMasks(stroke_masks, sample_strokes, shared_carriers)


# --- built-in glyph corpora ---------------------------------------------------

# Seven-segment layout on a 28x28 canvas: bars span rows 4/13/22 and
# columns 6/20, segment length 9-14, brush 2 px.
_SEG = {
    "top": Stroke("hbar", 4, 6, 14),
    "mid": Stroke("hbar", 13, 6, 14),
    "bot": Stroke("hbar", 22, 6, 14),
    "tl": Stroke("vbar", 4, 6, 10),
    "tr": Stroke("vbar", 4, 18, 10),
    "bl": Stroke("vbar", 13, 6, 10),
    "br": Stroke("vbar", 13, 18, 10),
}

_DIGIT_SEGMENTS = {
    0: ("top", "bot", "tl", "tr", "bl", "br"),
    1: ("tr", "br"),
    2: ("top", "tr", "mid", "bl", "bot"),
    3: ("top", "tr", "mid", "br", "bot"),
    4: ("tl", "tr", "mid", "br"),
    5: ("top", "tl", "mid", "br", "bot"),
    6: ("top", "tl", "mid", "bl", "br", "bot"),
    7: ("top", "tr", "br"),
    8: ("top", "mid", "bot", "tl", "tr", "bl", "br"),
    9: ("top", "tl", "tr", "mid", "br", "bot"),
}

# Center-right descending diagonal: present in half the 2s and half the 7s,
# so it is genuinely non-discriminative for that pair.
_SHARED_DIAG = Stroke("diag", 6, 16, 8, direction="sw")


def builtin_glyph_spec(name: str) -> GlyphSpec:
    """Named glyph recipes: "pair" (2-class testbed) and "digits" (10-class)."""
    if name == "pair":
        return GlyphSpec(
            classes=[
                [Stroke("vbar", 5, 8, 18), Stroke("hbar", 22, 12, 12)],
                [Stroke("hbar", 6, 6, 16), Stroke("corner", 14, 16, 9, orientation="br")],
            ],
            noise=0.25,
            shared_stroke=SharedStroke(stroke=Stroke("diag", 8, 18, 9, direction="sw"),
                                       classes=(0, 1), fraction=0.5),
        )
    if name == "digits":
        classes = [[replace(_SEG[s]) for s in _DIGIT_SEGMENTS[d]] for d in range(10)]
        return GlyphSpec(
            classes=classes,
            noise=0.55,
            shared_stroke=SharedStroke(stroke=_SHARED_DIAG, classes=(2, 7), fraction=0.5),
        )
    raise KeyError(f"unknown glyph preset {name!r}")
