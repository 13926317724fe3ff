"""Corpus ingestion, stratified splitting, batching, synthetic generation.

A corpus is a list of samples, each carrying an original image, a segmented
patch (the reconstruction target), and one of 4 class labels. File-backed
corpora are described by a manifest CSV with columns
``image_path,patch_path,label`` (paths relative to the manifest's
directory); the synthetic generator produces the same structure in memory
and can be written out as a PPM corpus.

Batching contract: train mode reshuffles every epoch and applies the full
augmentation sequence with a per-sample derived rng; eval mode is
order-stable and applies the deterministic test transforms. Patch targets
are resized to the reconstruction resolution and stay un-normalized in
[0, 1] so they are comparable with the decoder's sigmoid output.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentConfig, pipeline, resize_bilinear
from .autodiff import Rng, Tensor
from .errors import DatasetError

NUM_CLASSES = 4
CLASS_NAMES = ("disk", "ring", "square", "dots")


# ---------------------------------------------------------------------------
# samples and image files
# ---------------------------------------------------------------------------

@dataclass
class FileSample:
    id: str
    image_path: str
    patch_path: str
    label: int

    def load_image(self) -> np.ndarray:
        return load_image(self.image_path)

    def load_patch(self) -> np.ndarray:
        return load_image(self.patch_path)


@dataclass
class InMemorySample:
    id: str
    image: np.ndarray
    patch: np.ndarray
    label: int

    def load_image(self) -> np.ndarray:
        return self.image

    def load_patch(self) -> np.ndarray:
        return self.patch


def load_image(path: str) -> np.ndarray:
    """Read a PPM (P6) or PNG file into a float64 (H, W, 3) array in [0, 1]."""
    if not os.path.exists(path):
        raise DatasetError(f"image file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return _load_ppm(path)
    from PIL import Image
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header = magic, width, height, maxval as whitespace/comment separated tokens
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: unsupported PPM magic {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 PPM supported, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    if pixels.size != width * height * 3:
        raise DatasetError(f"{path}: PPM payload shorter than {width}x{height} pixels")
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path: str, img: np.ndarray):
    """Write a [0, 1] float image as an 8-bit binary PPM."""
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DatasetError(f"write_ppm expects (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def load_manifest(root_path: str) -> List[FileSample]:
    """Read and validate a corpus manifest.

    `root_path` is either the manifest CSV itself or a directory containing
    `manifest.csv`. Every referenced file must exist, labels must be in
    {0,1,2,3}, and image paths must be unique (they serve as sample ids).
    """
    if os.path.isdir(root_path):
        manifest = os.path.join(root_path, "manifest.csv")
    else:
        manifest = root_path
    if not os.path.exists(manifest):
        raise DatasetError(f"manifest not found: {manifest}")
    base = os.path.dirname(os.path.abspath(manifest))

    samples: List[FileSample] = []
    problems: List[str] = []
    seen_ids = set()
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:3]] != ["image_path", "patch_path", "label"]:
            raise DatasetError(
                f"{manifest}: expected header image_path,patch_path,label, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                problems.append(f"line {lineno}: expected 3 columns, got {len(row)}")
                continue
            rel_image, rel_patch, label_text = row[0].strip(), row[1].strip(), row[2].strip()
            try:
                label = int(label_text)
            except ValueError:
                label = -1
            if not 0 <= label < NUM_CLASSES:
                problems.append(f"line {lineno}: unknown label {label_text!r}")
                continue
            if rel_image in seen_ids:
                problems.append(f"line {lineno}: duplicate id {rel_image!r}")
                continue
            seen_ids.add(rel_image)
            image_path = os.path.join(base, rel_image)
            patch_path = os.path.join(base, rel_patch)
            for p in (image_path, patch_path):
                if not os.path.exists(p):
                    problems.append(f"line {lineno}: missing file {p}")
            samples.append(FileSample(id=rel_image, image_path=image_path,
                                      patch_path=patch_path, label=label))
    if problems:
        raise DatasetError(f"{manifest}: invalid manifest:\n  " + "\n  ".join(problems))
    if not samples:
        raise DatasetError(f"{manifest}: no samples")
    return samples


def class_histogram(samples: Sequence) -> List[int]:
    hist = [0] * NUM_CLASSES
    for s in samples:
        hist[s.label] += 1
    return hist


# ---------------------------------------------------------------------------
# stratified split
# ---------------------------------------------------------------------------

@dataclass
class SplitIndex:
    train_ids: List[str]
    val_ids: List[str]


def stratified_split(samples: Sequence, fraction: float = 0.8,
                     rng: Optional[Rng] = None) -> SplitIndex:
    """Per-class split: round(fraction * n_c) to train, remainder to validation.

    The rounded count is clamped to [1, n_c - 1] so both sides of every class
    are non-empty, which keeps validation metrics defined for all classes.
    Membership within a class is shuffled by the rng; per-class counts depend
    only on the class sizes.
    """
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"split fraction must be in (0, 1), got {fraction}")
    rng = rng or Rng(0)
    by_class: Dict[int, List] = {c: [] for c in range(NUM_CLASSES)}
    for s in samples:
        by_class[s.label].append(s)
    train_ids: List[str] = []
    val_ids: List[str] = []
    for c in range(NUM_CLASSES):
        group = by_class[c]
        if len(group) < 2:
            raise DatasetError(
                f"class {c} has {len(group)} sample(s); at least 2 are needed to split")
        n_train = int(round(fraction * len(group)))
        n_train = min(max(n_train, 1), len(group) - 1)
        order = rng.derive("split", c).permutation(len(group))
        shuffled = [group[i] for i in order]
        train_ids.extend(s.id for s in shuffled[:n_train])
        val_ids.extend(s.id for s in shuffled[n_train:])
    return SplitIndex(train_ids=train_ids, val_ids=val_ids)


def write_split_csv(path: str, split: SplitIndex):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("id,split\n")
        for sid in split.train_ids:
            fh.write(f"{sid},train\n")
        for sid in split.val_ids:
            fh.write(f"{sid},val\n")


def read_split_csv(path: str, samples: Sequence) -> SplitIndex:
    if not os.path.exists(path):
        raise DatasetError(f"split file not found: {path}")
    known = {s.id for s in samples}
    train_ids: List[str] = []
    val_ids: List[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["id", "split"]:
            raise DatasetError(f"{path}: expected header id,split, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            sid, side = row[0].strip(), row[1].strip()
            if sid not in known:
                raise DatasetError(f"{path} line {lineno}: unknown sample id {sid!r}")
            if side == "train":
                train_ids.append(sid)
            elif side == "val":
                val_ids.append(sid)
            else:
                raise DatasetError(f"{path} line {lineno}: split must be train or val, got {side!r}")
    overlap = set(train_ids) & set(val_ids)
    if overlap:
        raise DatasetError(f"{path}: ids in both splits: {sorted(overlap)[:5]}")
    return SplitIndex(train_ids=train_ids, val_ids=val_ids)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class SplitDataset:
    """Batch source over a split corpus, implementing the trainer's protocol.

    Yields (x, patch_target, y_onehot, ids) where x is a normalized
    (B, 3, crop, crop) tensor and patch_target a [0, 1] float array at the
    reconstruction resolution. The last incomplete batch is kept.
    """

    def __init__(self, samples: Sequence, split: SplitIndex, train_aug: AugmentConfig,
                 test_aug: AugmentConfig, recon_resolution: int):
        self.samples_by_id = {s.id: s for s in samples}
        missing = [sid for sid in split.train_ids + split.val_ids
                   if sid not in self.samples_by_id]
        if missing:
            raise DatasetError(f"split references unknown sample ids: {missing[:5]}")
        self.split = split
        self.train_aug = train_aug
        self.test_aug = test_aug
        self.recon_resolution = recon_resolution

    @property
    def num_train(self) -> int:
        return len(self.split.train_ids)

    @property
    def num_val(self) -> int:
        return len(self.split.val_ids)

    def _patch_target(self, sample) -> np.ndarray:
        r = self.recon_resolution
        patch = np.clip(resize_bilinear(sample.load_patch(), r, r), 0.0, 1.0)
        return patch.transpose(2, 0, 1)

    def _assemble(self, ids: Sequence[str], aug: AugmentConfig,
                  rng: Optional[Rng]) -> Tuple[Tensor, np.ndarray, np.ndarray, List[str]]:
        xs, patches, labels = [], [], []
        for sid in ids:
            sample = self.samples_by_id[sid]
            sample_rng = rng.derive("aug", sid) if rng is not None else None
            xs.append(pipeline(sample.load_image(), aug, sample_rng).data)
            patches.append(self._patch_target(sample))
            labels.append(sample.label)
        x = Tensor(np.stack(xs))
        y = np.eye(NUM_CLASSES)[labels]
        return x, np.stack(patches), y, list(ids)

    def train_batches(self, batch_size: int, rng: Rng) -> Iterator:
        order = rng.derive("shuffle").permutation(self.num_train)
        ids = [self.split.train_ids[i] for i in order]
        for start in range(0, len(ids), batch_size):
            yield self._assemble(ids[start:start + batch_size], self.train_aug, rng)

    def batches_for_ids(self, ids: Sequence[str], batch_size: int) -> Iterator:
        for start in range(0, len(ids), batch_size):
            yield self._assemble(ids[start:start + batch_size], self.test_aug, None)

    def val_batches(self, batch_size: int) -> Iterator:
        return self.batches_for_ids(self.split.val_ids, batch_size)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_BASE_COLORS = np.array([
    [0.85, 0.25, 0.20],   # disk: red
    [0.20, 0.80, 0.30],   # ring: green
    [0.25, 0.35, 0.90],   # square: blue
    [0.90, 0.85, 0.20],   # dots: yellow
])


def _shape_mask(label: int, res: int, cx: float, cy: float, size: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(res, dtype=np.float64),
                         np.arange(res, dtype=np.float64), indexing="ij")
    if label == 0:           # filled disk
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    if label == 1:           # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= size ** 2) & (d2 >= (0.55 * size) ** 2)
    if label == 2:           # axis-aligned square
        return (np.abs(yy - cy) <= size * 0.9) & (np.abs(xx - cx) <= size * 0.9)
    # label 3: grid of small dots
    spacing = max(3.0, res / 5.0)
    gy = (yy - cy) - spacing * np.round((yy - cy) / spacing)
    gx = (xx - cx) - spacing * np.round((xx - cx) / spacing)
    near_center = (yy - cy) ** 2 + (xx - cx) ** 2 <= (1.3 * size) ** 2
    return (gy ** 2 + gx ** 2 <= (0.18 * spacing) ** 2) & near_center


def synthetic_dataset(n_per_class: int, resolution: int, rng: Rng) -> List[InMemorySample]:
    """4 visually separable classes of colored primitives with jitter and noise.

    The patch is the primitive on an exactly black background; the image
    composites the same primitive over a noisy gray background.
    """
    if n_per_class < 2:
        raise DatasetError(f"n_per_class must be >= 2, got {n_per_class}")
    if resolution < 8:
        raise DatasetError(f"resolution must be >= 8, got {resolution}")
    samples: List[InMemorySample] = []
    idx = 0
    for label in range(NUM_CLASSES):
        for i in range(n_per_class):
            srng = rng.derive("sample", label, i)
            cx = resolution / 2.0 + srng.uniform(-0.08 * resolution, 0.08 * resolution)
            cy = resolution / 2.0 + srng.uniform(-0.08 * resolution, 0.08 * resolution)
            size = 0.28 * resolution * srng.uniform(0.85, 1.15)
            color = np.clip(_BASE_COLORS[label] + srng.uniform(-0.08, 0.08, size=3), 0.05, 1.0)
            mask = _shape_mask(label, resolution, cx, cy, size)

            shade = 1.0 + 0.15 * srng.normal(size=(resolution, resolution, 1))
            patch = np.where(mask[:, :, None], np.clip(color * shade, 0.0, 1.0), 0.0)

            bg_level = srng.uniform(0.10, 0.35)
            bg = np.clip(bg_level + 0.05 * srng.normal(size=(resolution, resolution, 1))
                         + np.zeros((1, 1, 3)), 0.0, 1.0)
            image = np.where(mask[:, :, None], patch, bg)
            image = np.clip(image + 0.02 * srng.normal(size=image.shape), 0.0, 1.0)

            samples.append(InMemorySample(id=f"synth-{idx:05d}", image=image,
                                          patch=patch, label=label))
            idx += 1
    return samples


def write_corpus(samples: Sequence, out_dir: str) -> str:
    """Write a corpus to disk as PPM files plus manifest.csv; returns the manifest path."""
    images_dir = os.path.join(out_dir, "images")
    patches_dir = os.path.join(out_dir, "patches")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(patches_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        fh.write("image_path,patch_path,label\n")
        for s in samples:
            name = s.id.replace("/", "_") + ".ppm"
            write_ppm(os.path.join(images_dir, name), s.load_image())
            write_ppm(os.path.join(patches_dir, name), s.load_patch())
            fh.write(f"images/{name},patches/{name},{s.label}\n")
    return manifest
