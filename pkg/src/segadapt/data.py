"""Synthetic two-domain segmentation benchmark and split management.

Each domain renders 1-4 non-overlapping geometric shapes (circle, square,
triangle; one semantic class per shape kind) on a noisy background. Domain
shift is controlled through a hue rotation of the shared palette plus
per-domain pixel noise, so the class-color binding moves between domains
while class geometry stays put.

Everything is a pure function of (spec, plan, resolution): per-sample RNG
streams are derived from (seed, sample id), so parallel and serial
generation agree bit for bit.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from PIL import Image

IGNORE_INDEX = 255

# Target sample ids live in a disjoint range so that mixed bundles can never
# collide with source ids.
_TARGET_ID_BASE = 1_000_000

# Shared base palette: a neutral gray background plus one color per shape
# class, all on the same base hue (hsv hue 0, saturation 0.55) with class
# identity carried by brightness alone (value 0.55 / 0.75 / 0.95). Hue is
# free to act as the domain axis: per-image jitter randomizes it within a
# band, and the target domain's palette rotation shifts that band.
DEFAULT_PALETTE = (
    (0.35, 0.35, 0.35),
    (0.55, 0.2475, 0.2475),
    (0.75, 0.3375, 0.3375),
    (0.95, 0.4275, 0.4275),
)

_SHAPE_KINDS = ("circle", "square", "triangle")


@dataclass(frozen=True)
class DomainSpec:
    """Rendering recipe for one domain.

    ``class_frequency`` is a distribution over all classes; entry 0 is the
    background and must be 0 (the background is the canvas, never drawn).
    ``shape_scale_range`` is in fractions of the short image side, and a
    shape of scale s covers the same pixel area regardless of its kind.
    """

    palette: tuple = DEFAULT_PALETTE
    palette_hue_shift: float = 0.0
    hue_jitter: float = 0.0
    noise_sigma: float = 0.05
    shape_scale_range: tuple = (0.28, 0.52)
    class_frequency: tuple = ()
    seed: int = 0

    def __post_init__(self):
        palette = tuple(tuple(float(v) for v in color) for color in self.palette)
        object.__setattr__(self, "palette", palette)
        if len(palette) < 2:
            raise ValueError("palette needs a background color plus at least one class")
        freq = self.class_frequency
        if not freq:
            freq = (0.0,) + (1.0 / (len(palette) - 1),) * (len(palette) - 1)
        freq = tuple(float(v) for v in freq)
        object.__setattr__(self, "class_frequency", freq)
        if len(freq) != len(palette):
            raise ValueError(
                f"class_frequency has {len(freq)} entries for {len(palette)} palette colors"
            )
        if abs(sum(freq) - 1.0) > 1e-9:
            raise ValueError(f"class_frequency must sum to 1, got {sum(freq)}")
        if freq[0] != 0.0:
            raise ValueError("class_frequency[0] is the background and must be 0")
        if any(v < 0 for v in freq):
            raise ValueError("class_frequency entries must be nonnegative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.hue_jitter < 0:
            raise ValueError("hue_jitter must be >= 0")
        lo, hi = self.shape_scale_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"shape_scale_range must satisfy 0 <= lo <= hi <= 1, got {self.shape_scale_range}")
        object.__setattr__(self, "shape_scale_range", (float(lo), float(hi)))

    @property
    def num_classes(self) -> int:
        return len(self.palette)

    def shifted_palette(self) -> np.ndarray:
        """Palette after the domain's hue rotation, as float64 [c, 3]."""
        turns = self.palette_hue_shift / (2.0 * np.pi)
        return np.asarray([_rotate_hue(color, turns) for color in self.palette], dtype=np.float64)


def _rotate_hue(rgb, turns: float):
    h, s, v = colorsys.rgb_to_hsv(*rgb)
    return colorsys.hsv_to_rgb((h + turns) % 1.0, s, v)


class SealedLabels:
    """Ground truth of an officially unlabeled sample.

    The trainer must never consume these; any access goes through
    ``reveal`` and bumps ``reveal_count`` so tests can prove the count
    stayed at zero across a whole run.
    """

    __slots__ = ("_values", "reveal_count")

    def __init__(self, values: Optional[np.ndarray]):
        self._values = values
        self.reveal_count = 0

    def reveal(self) -> np.ndarray:
        self.reveal_count += 1
        if self._values is None:
            raise RuntimeError("sealed labels were not stored for this sample")
        return self._values

    def __repr__(self):
        return f"SealedLabels(reveal_count={self.reveal_count})"


@dataclass
class Sample:
    """One image with its pixel labels; label may be sealed for unlabeled target data."""

    image: np.ndarray  # float32 [3, H, W] in [0, 1], quantized to the 8-bit grid
    label: Union[np.ndarray, SealedLabels]  # uint8 [H, W] (or sealed)
    domain: Literal["source", "target"]
    id: int


@dataclass(frozen=True)
class SplitPlan:
    """Sizes of the four splits plus the seed of the split assignment."""

    n_source: int = 400
    n_target_labeled: int = 20
    n_target_unlabeled: int = 180
    n_target_val: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("n_source", "n_target_labeled", "n_target_unlabeled", "n_target_val"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class DatasetBundle:
    source_train: list
    target_labeled: list
    target_unlabeled: list
    target_val: list
    num_classes: int
    resolution: tuple

    def splits(self):
        return {
            "source_train": self.source_train,
            "target_labeled": self.target_labeled,
            "target_unlabeled": self.target_unlabeled,
            "target_val": self.target_val,
        }

    @property
    def sealed_reveal_count(self) -> int:
        return sum(
            s.label.reveal_count for s in self.target_unlabeled if isinstance(s.label, SealedLabels)
        )


def _shape_extent(kind: str, area_side: float):
    """Half-extents (ey, ex) of a shape whose area equals area_side**2."""
    if kind == "circle":
        r = area_side / np.sqrt(np.pi)
        return r, r
    if kind == "square":
        return area_side / 2.0, area_side / 2.0
    # Isoceles triangle with base == height == area_side * sqrt(2).
    e = area_side * np.sqrt(2.0) / 2.0
    return e, e


def _paint_shape(label, kind, class_id, cy, cx, ey, ex):
    h, w = label.shape
    yy = np.arange(h, dtype=np.float64)[:, None] + 0.5
    xx = np.arange(w, dtype=np.float64)[None, :] + 0.5
    if kind == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= ey**2
    elif kind == "square":
        mask = (np.abs(yy - cy) <= ey) & (np.abs(xx - cx) <= ex)
    else:  # upward triangle: apex at the top, full base at the bottom
        dy = yy - (cy - ey)
        height = 2.0 * ey
        # halfwidth ramps 0 -> ex from apex to base, keeping the shape inside
        # its [ey, ex] bounding box and its area at base*height/2.
        halfwidth = np.where(dy >= 0, dy * (ex / height), -1.0)
        mask = (dy >= 0) & (dy <= height) & (np.abs(xx - cx) <= halfwidth)
    label[mask] = class_id
    return mask


def _render_sample(spec: DomainSpec, sample_id: int, resolution, palette, domain) -> Sample:
    h, w = resolution
    rng = np.random.default_rng([spec.seed, sample_id])
    short = min(h, w)
    label = np.zeros((h, w), dtype=np.uint8)
    image = np.empty((3, h, w), dtype=np.float64)

    # Hue jitter decorrelates hue from class: each painted region (and the
    # canvas) gets its own hue offset, uniform over the jitter width, so hue
    # carries domain information without being a reliable class cue.
    jitter_turns = spec.hue_jitter / (2.0 * np.pi)

    def region_color(class_id):
        base = palette[class_id]
        if jitter_turns == 0.0:
            return base
        delta = float(rng.uniform(-jitter_turns / 2.0, jitter_turns / 2.0))
        return np.asarray(_rotate_hue(base, delta), dtype=np.float64)

    image[:] = region_color(0)[:, None, None]

    shape_classes = np.arange(1, spec.num_classes)
    freq = np.asarray(spec.class_frequency[1:], dtype=np.float64)
    freq = freq / freq.sum() if freq.sum() > 0 else None
    n_shapes = int(rng.integers(1, 5))
    placed = []
    for _ in range(n_shapes):
        if freq is None:
            break
        class_id = int(rng.choice(shape_classes, p=freq))
        scale = float(rng.uniform(*spec.shape_scale_range))
        area_side = scale * short
        kind = _SHAPE_KINDS[(class_id - 1) % len(_SHAPE_KINDS)]
        ey, ex = _shape_extent(kind, area_side)
        # Reserve the same footprint for every kind (the largest of the
        # three) so placement succeeds or fails independently of the class
        # and class_frequency is respected in expectation.
        fp = area_side * np.sqrt(2.0) / 2.0
        if area_side < 1.0 or 2 * fp >= h or 2 * fp >= w:
            continue
        for _attempt in range(40):
            cy = float(rng.uniform(fp, h - fp))
            cx = float(rng.uniform(fp, w - fp))
            box = (cy - fp - 1, cy + fp + 1, cx - fp - 1, cx + fp + 1)
            if all(box[1] <= o[0] or box[0] >= o[1] or box[3] <= o[2] or box[2] >= o[3] for o in placed):
                placed.append(box)
                mask = _paint_shape(label, kind, class_id, cy, cx, ey, ex)
                image[:, mask] = region_color(class_id)[:, None]
                break

    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    # Quantize to the 8-bit grid so that PNG export/import is lossless.
    image = (np.round(image * 255.0) / 255.0).astype(np.float32)
    return Sample(image=image, label=label, domain=domain, id=sample_id)


def generate_domain(
    spec: DomainSpec,
    count: int,
    resolution,
    domain: Literal["source", "target"] = "source",
    id_base: int = 0,
) -> list:
    """Render ``count`` samples of one domain, deterministically."""
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    h, w = int(resolution[0]), int(resolution[1])
    if h < 16 or w < 16:
        raise ValueError(f"resolution must be at least 16x16, got {h}x{w}")
    if spec.num_classes < 2:
        raise ValueError("need at least one shape class besides the background")
    palette = spec.shifted_palette()
    return [
        _render_sample(spec, id_base + i, (h, w), palette, domain) for i in range(count)
    ]


def make_splits(plan: SplitPlan, source_spec: DomainSpec, target_spec: DomainSpec, resolution) -> DatasetBundle:
    """Generate both domains and carve the target pool into the three splits.

    Unlabeled-target ground truth is wrapped in :class:`SealedLabels` so the
    trainer cannot consume it by accident.
    """
    if source_spec.num_classes != target_spec.num_classes:
        raise ValueError(
            f"source and target specs disagree on class count: "
            f"{source_spec.num_classes} vs {target_spec.num_classes}"
        )
    source = (
        generate_domain(source_spec, plan.n_source, resolution, domain="source")
        if plan.n_source
        else []
    )
    n_target = plan.n_target_labeled + plan.n_target_unlabeled + plan.n_target_val
    target = (
        generate_domain(target_spec, n_target, resolution, domain="target", id_base=_TARGET_ID_BASE)
        if n_target
        else []
    )
    # The permutation decides split membership only; every split is then kept
    # in id order so in-memory and reloaded bundles iterate identically.
    perm = np.random.default_rng([plan.seed, 1]).permutation(n_target) if n_target else []
    labeled = sorted((target[i] for i in perm[: plan.n_target_labeled]), key=lambda s: s.id)
    unlabeled = sorted(
        (
            replace(target[i], label=SealedLabels(target[i].label))
            for i in perm[plan.n_target_labeled : plan.n_target_labeled + plan.n_target_unlabeled]
        ),
        key=lambda s: s.id,
    )
    val = sorted(
        (target[i] for i in perm[plan.n_target_labeled + plan.n_target_unlabeled :]),
        key=lambda s: s.id,
    )

    ids = [s.id for group in (source, labeled, unlabeled, val) for s in group]
    if len(ids) != len(set(ids)):
        raise RuntimeError("split invariant violated: sample ids overlap across splits")
    return DatasetBundle(
        source_train=source,
        target_labeled=labeled,
        target_unlabeled=unlabeled,
        target_val=val,
        num_classes=source_spec.num_classes,
        resolution=(int(resolution[0]), int(resolution[1])),
    )


def downsample_labels(label: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor downsample at output pixel centers; ignore passes through."""
    big_h, big_w = label.shape
    h, w = int(h), int(w)
    if h <= 0 or w <= 0:
        raise ValueError(f"downsample target {h}x{w} is empty")
    if h > big_h or w > big_w:
        raise ValueError(f"cannot downsample {big_h}x{big_w} labels to larger {h}x{w}")
    rows = np.floor((np.arange(h) + 0.5) * (big_h / h)).astype(int)
    cols = np.floor((np.arange(w) + 0.5) * (big_w / w)).astype(int)
    return label[rows][:, cols].copy()


# ---------------------------------------------------------------------------
# on-disk dataset format: PNG pairs plus a line-delimited manifest
# ---------------------------------------------------------------------------

DATASET_FORMAT_VERSION = 1


def _image_to_png(image: np.ndarray) -> Image.Image:
    arr = np.round(image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return Image.fromarray(arr, mode="RGB")


def _label_array(sample: Sample) -> np.ndarray:
    label = sample.label
    return label._values if isinstance(label, SealedLabels) else label


def save_dataset(bundle: DatasetBundle, out_dir, meta: Optional[dict] = None, force: bool = False) -> Path:
    """Materialize a bundle as PNG files plus ``manifest.jsonl`` and ``meta.json``."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.jsonl"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{out_dir} already holds a dataset (use force to overwrite)")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    records = []
    for split, samples in bundle.splits().items():
        for s in samples:
            image_rel = f"images/{s.id:07d}.png"
            label_rel = f"labels/{s.id:07d}.png"
            _image_to_png(s.image).save(out_dir / image_rel)
            Image.fromarray(_label_array(s), mode="L").save(out_dir / label_rel)
            records.append(
                {"id": s.id, "domain": s.domain, "split": split, "image": image_rel, "label": label_rel}
            )
    records.sort(key=lambda r: r["id"])
    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    full_meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "num_classes": bundle.num_classes,
        "resolution": list(bundle.resolution),
    }
    if meta:
        full_meta.update(meta)
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(full_meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def load_dataset(root) -> DatasetBundle:
    """Load a materialized dataset; unlabeled-target labels come back sealed."""
    root = Path(root)
    with open(root / "meta.json") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {meta.get('format_version')}")
    splits = {"source_train": [], "target_labeled": [], "target_unlabeled": [], "target_val": []}
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            image = np.asarray(Image.open(root / rec["image"]), dtype=np.float32) / 255.0
            image = np.ascontiguousarray(image.transpose(2, 0, 1))
            label = np.asarray(Image.open(root / rec["label"]), dtype=np.uint8)
            if rec["split"] == "target_unlabeled":
                label = SealedLabels(label)
            splits[rec["split"]].append(
                Sample(image=image, label=label, domain=rec["domain"], id=rec["id"])
            )
    for samples in splits.values():
        samples.sort(key=lambda s: s.id)
    return DatasetBundle(
        num_classes=int(meta["num_classes"]),
        resolution=tuple(meta["resolution"]),
        **splits,
    )


def dataset_meta(root) -> dict:
    with open(Path(root) / "meta.json") as fh:
        return json.load(fh)
