"""Synthetic shape scenes with exact box labels.

Each image holds a few non-overlapping filled shapes on a noisy background.
Boxes are measured from the rasterized masks, so labels agree with the pixels
by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CLASSES = ("rectangle", "ellipse", "triangle")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12  # object extent in pixels
    max_size: int = 28
    classes: tuple = CLASSES
    noise_std: float = 0.04
    min_contrast: float = 0.35
    seed: int = 0

    def validate(self, max_queries: int | None = None):
        if self.image_size < 4:
            raise ValueError("image_size must be at least 4")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size:
            raise ValueError("need 2 <= min_size <= max_size")
        if self.max_size > self.image_size:
            raise ValueError(f"objects of size {self.max_size} cannot fit in a {self.image_size}px image")
        # every object must fit side by side
        if self.min_objects and self.min_objects * self.min_size**2 > self.image_size**2:
            raise ValueError("min_objects objects of min_size cannot fit without overlap")
        unknown = set(self.classes) - set(CLASSES)
        if unknown or not self.classes:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        if max_queries is not None and self.max_objects > max_queries:
            raise ValueError(f"max_objects {self.max_objects} exceeds the {max_queries} object queries")
        if not 0 <= self.min_contrast < 1:
            raise ValueError("min_contrast must lie in [0, 1)")


@dataclass
class SceneDataset:
    """Images ``[N, 3, S, S]`` in ``[0, 1]`` plus per-image labels and ``cx, cy, w, h`` boxes."""

    images: np.ndarray
    labels: list
    boxes: list
    spec: SceneSpec = field(default_factory=SceneSpec)

    def __len__(self):
        return len(self.images)

    def targets(self, indices=None):
        idx = range(len(self)) if indices is None else indices
        return [{"labels": self.labels[i], "boxes": self.boxes[i]} for i in idx]

    def records(self):
        """Ground truth as interchange records."""
        out = []
        for i, (lab, box) in enumerate(zip(self.labels, self.boxes)):
            for c, b in zip(lab, box):
                out.append({"image_id": i, "class": int(c), "cx": float(b[0]), "cy": float(b[1]),
                            "w": float(b[2]), "h": float(b[3])})
        return out


def _mask(kind, x0, y0, w, h, size, rng):
    ys, xs = np.mgrid[0:size, 0:size] + 0.5  # pixel centres
    if kind == "rectangle":
        return (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)
    if kind == "ellipse":
        cx, cy = x0 + w / 2, y0 + h / 2
        return ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0
    # triangle with its apex on the top or bottom edge
    apex_top = rng.random() < 0.5
    t = (ys - y0) / h if apex_top else (y0 + h - ys) / h
    half = t * w / 2
    cx = x0 + w / 2
    return (t >= 0) & (t <= 1) & (np.abs(xs - cx) <= half)


def mask_box(mask) -> np.ndarray:
    """Normalized ``cx, cy, w, h`` of the tight pixel extent of a boolean mask."""
    size_y, size_x = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return np.array([(x0 + x1) / 2 / size_x, (y0 + y1) / 2 / size_y, (x1 - x0) / size_x, (y1 - y0) / size_y])


def _color(rng, avoid, min_contrast):
    for _ in range(100):
        c = rng.random(3)
        if np.abs(c - avoid).max() >= min_contrast:
            return c
    return 1.0 - avoid


def gen_scene(spec: SceneSpec, rng: np.random.Generator):
    s = spec.image_size
    background = rng.uniform(0.0, 1.0, size=3)
    image = np.broadcast_to(background[:, None, None], (3, s, s)).copy()
    occupied = np.zeros((s, s), dtype=bool)
    labels, boxes = [], []
    for _ in range(int(rng.integers(spec.min_objects, spec.max_objects + 1))):
        for _attempt in range(50):
            w, h = rng.integers(spec.min_size, spec.max_size + 1, size=2)
            x0 = rng.integers(0, s - w + 1)
            y0 = rng.integers(0, s - h + 1)
            cls = int(rng.integers(len(spec.classes)))
            mask = _mask(spec.classes[cls], x0, y0, w, h, s, rng)
            # one pixel gap keeps shapes from touching
            grown = np.zeros_like(occupied)
            grown[max(y0 - 1, 0):y0 + h + 1, max(x0 - 1, 0):x0 + w + 1] = True
            if mask.any() and not (grown & occupied).any():
                break
        else:
            continue
        occupied |= mask
        image[:, mask] = _color(rng, background, spec.min_contrast)[:, None]
        labels.append(cls)
        boxes.append(mask_box(mask))
    image += rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, np.array(labels, dtype=np.int64), np.array(boxes, dtype=np.float64).reshape(-1, 4)


def gen_dataset(spec: SceneSpec, n_images: int, *, max_queries: int | None = None) -> SceneDataset:
    """Deterministic in ``spec.seed``; raises ``ValueError`` on infeasible specs."""
    spec.validate(max_queries)
    if n_images < 0:
        raise ValueError("n_images must be non-negative")
    rng = np.random.default_rng(spec.seed)
    images, labels, boxes = [], [], []
    for _ in range(n_images):
        img, lab, box = gen_scene(spec, rng)
        images.append(img)
        labels.append(lab)
        boxes.append(box)
    s = spec.image_size
    stack = np.stack(images) if images else np.zeros((0, 3, s, s), np.float32)
    return SceneDataset(stack, labels, boxes, spec)


def save_dataset(dataset: SceneDataset, directory) -> Path:
    """Write ``images/NNNNNN.npy`` plus ``manifest.json``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(dataset.images):
        name = f"images/{i:06d}.npy"
        np.save(root / name, img)
        entries.append({
            "file": name,
            "objects": [{"class": int(c), "cx": float(b[0]), "cy": float(b[1]), "w": float(b[2]), "h": float(b[3])}
                        for c, b in zip(dataset.labels[i], dataset.boxes[i])],
        })
    spec = asdict(dataset.spec)
    spec["classes"] = list(spec["classes"])
    manifest = {"format_version": FORMAT_VERSION, "spec": spec, "images": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(directory) -> SceneDataset:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    spec_d = dict(manifest["spec"])
    spec_d["classes"] = tuple(spec_d["classes"])
    spec = SceneSpec(**spec_d)
    images, labels, boxes = [], [], []
    for entry in manifest["images"]:
        images.append(np.load(root / entry["file"]))
        objs = entry["objects"]
        labels.append(np.array([o["class"] for o in objs], dtype=np.int64))
        boxes.append(np.array([[o["cx"], o["cy"], o["w"], o["h"]] for o in objs], dtype=np.float64).reshape(-1, 4))
    s = spec.image_size
    stack = np.stack(images) if images else np.zeros((0, 3, s, s), np.float32)
    return SceneDataset(stack, labels, boxes, spec)
