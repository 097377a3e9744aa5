"""Procedural two-domain toy corpus with shared structure and divergent texture.

Scenes are geometric layouts (a ground band, boxes, disks, poles) rendered
back-to-front into a per-pixel label map. The same scene can be rendered under
different per-domain texture profiles; the label map depends only on the scene,
so "same structure, different texture" holds by construction.

Dataset layout on disk:
    <root>/<domain>/<split>/images/<id>.png   8-bit RGB
    <root>/<domain>/<split>/labels/<id>.png   8-bit single channel, 255 = ignore
    <root>/manifest.json                      keys: version, seed, canvas, classes, records
Target-domain train records carry no label file.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, DatasetExistsError, MissingLabelError

IGNORE_LABEL = 255
MANIFEST_VERSION = 1
SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)
SPLITS = ("train", "val")

SHAPE_KINDS = ("band", "rectangle", "disk", "pole")
# class 0 is always background; classes >= 1 cycle through the shape vocabulary
_CLASS_SHAPES = ("band", "rectangle", "disk", "pole")

_MODULATIONS = ("flat", "checker", "gradient", "speckle")
_DOMAIN_CODE = {SOURCE: 0, TARGET: 1}


# ---------------------------------------------------------------------------
# scene specification and generation
# ---------------------------------------------------------------------------


def shape_for_class(class_id: int) -> str:
    if class_id < 1:
        raise ValueError("background class has no shape")
    return _CLASS_SHAPES[(class_id - 1) % len(_CLASS_SHAPES)]


def class_names(num_classes: int) -> list[str]:
    names = ["backdrop"]
    for k in range(1, num_classes):
        base = shape_for_class(k)
        names.append(base if k <= len(_CLASS_SHAPES) else f"{base}{k}")
    return names


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    kind: str  # one of SHAPE_KINDS
    params: tuple[int, ...]  # pixel units, meaning depends on kind


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: tuple[int, int]  # (H, W)
    num_classes: int
    objects: tuple[SceneObject, ...]


@dataclass(frozen=True)
class GenerationConfig:
    canvas: tuple[int, int] = (64, 128)
    num_classes: int = 5
    min_objects: int = 2
    max_objects: int = 5

    def validate(self) -> None:
        h, w = self.canvas
        if h < 32 or w < 32:
            raise ConfigurationError(f"canvas {h}x{w} too small, need at least 32x32")
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes (background + 1)")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("invalid object count range")


def _draw_object(rng: np.random.Generator, class_id: int, canvas: tuple[int, int]) -> SceneObject:
    h, w = canvas
    kind = shape_for_class(class_id)
    if kind == "band":
        bh = int(rng.integers(h // 6, max(h // 6 + 1, h // 3)))
        margin = int(rng.integers(0, max(1, h // 10)))
        return SceneObject(class_id, kind, (h - bh - margin, bh))
    if kind == "rectangle":
        rw = int(rng.integers(w // 6, max(w // 6 + 1, w // 3)))
        rh = int(rng.integers(h // 4, max(h // 4 + 1, h // 2)))
        x0 = int(rng.integers(0, max(1, w - rw)))
        y0 = int(rng.integers(h // 12, max(h // 12 + 1, h - rh - h // 8)))
        return SceneObject(class_id, kind, (y0, x0, rh, rw))
    if kind == "disk":
        r = int(rng.integers(max(6, h // 8), max(7, h // 4 + 2)))
        cx = int(rng.integers(0, w))
        cy = int(rng.integers(h // 10, max(h // 10 + 1, h // 2)))
        return SceneObject(class_id, kind, (cy, cx, r))
    # pole: narrow vertical bar reaching down toward the band
    pw = int(rng.integers(4, 9))
    x0 = int(rng.integers(0, max(1, w - pw)))
    y0 = int(rng.integers(h // 4, max(h // 4 + 1, h // 2)))
    y1 = h - int(rng.integers(0, max(1, h // 8)))
    return SceneObject(class_id, "pole", (y0, x0, y1 - y0, pw))


def generate_scene(seed: int, config: GenerationConfig = GenerationConfig()) -> SceneSpec:
    """Deterministically lay out one scene; always yields >= 2 visible classes."""
    if seed < 0:
        raise ConfigurationError("seed must be non-negative")
    config.validate()
    rng = np.random.default_rng(seed)
    c = config.num_classes
    while True:
        objects: list[SceneObject] = [_draw_object(rng, 1, config.canvas)]  # ground band at the back
        n_extra = int(rng.integers(config.min_objects, config.max_objects + 1))
        poles: list[SceneObject] = []
        for _ in range(n_extra):
            class_id = int(rng.integers(2, c)) if c > 2 else 1
            obj = _draw_object(rng, class_id, config.canvas)
            (poles if obj.kind == "pole" else objects).append(obj)
        objects.extend(poles)  # thin poles painted last so they stay visible
        scene = SceneSpec(seed, config.canvas, c, tuple(objects))
        if len(np.unique(render_labels(scene))) >= 2:
            return scene


def render_labels(scene: SceneSpec) -> np.ndarray:
    """Paint objects back-to-front; every pixel gets exactly one class id."""
    h, w = scene.canvas
    labels = np.zeros((h, w), dtype=np.int32)
    yy, xx = np.ogrid[:h, :w]
    for obj in scene.objects:
        if obj.class_id >= scene.num_classes:
            raise DataError(f"object class {obj.class_id} >= num_classes {scene.num_classes}")
        if obj.kind == "band":
            y0, bh = obj.params
            labels[max(0, y0) : min(h, y0 + bh), :] = obj.class_id
        elif obj.kind in ("rectangle", "pole"):
            y0, x0, rh, rw = obj.params
            labels[max(0, y0) : min(h, y0 + rh), max(0, x0) : min(w, x0 + rw)] = obj.class_id
        elif obj.kind == "disk":
            cy, cx, r = obj.params
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            labels[mask] = obj.class_id
        else:
            raise DataError(f"unknown shape kind {obj.kind!r}")
    return labels


# ---------------------------------------------------------------------------
# texture profiles and rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassFill:
    color: tuple[float, float, float]  # base RGB in [0,1]
    modulation: str = "flat"  # one of _MODULATIONS
    amplitude: float = 0.0
    period: int = 8


@dataclass(frozen=True)
class TextureProfile:
    domain: str
    fills: dict[int, ClassFill] = field(default_factory=dict)
    noise_sigma: float = 0.0

    def fill_for(self, class_id: int) -> ClassFill:
        try:
            return self.fills[class_id]
        except KeyError:
            raise ConfigurationError(
                f"profile for domain {self.domain!r} has no fill rule for class {class_id}"
            ) from None


# Palette design rules, learned the hard way: (a) no target class color may
# resemble a *different* class's source color, or imperfect translations
# poison pseudo-label training; (b) every target class owns a distinct mean
# luminance rung with low-frequency fill, since the small decoder reproduces
# brightness far more reliably than saturated hue; (c) per-class standardized
# brightness agrees across domains, so decoded translations land on the
# right rung (hue-bound encoder filters keep raw source training from
# exploiting the same correspondence); (d) both backdrops stay in the blue
# family because the decoder develops one shared bright-background mode and
# drags any other bright hue toward it; (e) neighbouring rungs get
# contrasting hue families so compressed renditions stay separable;
# (f) dark classes repaint only partway, landing on a blend of the source
# color with the bright target scene mean, so their target colors sit near
# that landing point and no other class colonizes the blend corridor.
_SOURCE_PALETTE = {
    0: ClassFill((0.58, 0.72, 0.92), "gradient", 0.06, 64),
    1: ClassFill((0.42, 0.40, 0.44), "checker", 0.06, 8),
    2: ClassFill((0.72, 0.46, 0.32), "flat"),
    3: ClassFill((0.74, 0.63, 0.37), "checker", 0.05, 8),
    4: ClassFill((0.22, 0.24, 0.28), "flat"),
}

_TARGET_PALETTE = {
    0: ClassFill((0.70, 0.80, 0.95), "gradient", 0.06, 48),
    1: ClassFill((0.38, 0.43, 0.60), "flat"),
    2: ClassFill((0.68, 0.48, 0.52), "gradient", 0.06, 32),
    3: ClassFill((0.55, 0.72, 0.48), "flat"),
    4: ClassFill((0.16, 0.20, 0.28), "flat"),
}


def default_profiles(num_classes: int = 5) -> tuple[TextureProfile, TextureProfile]:
    """Hand-tuned palettes for the 5-class corpus, procedural hues otherwise."""
    if num_classes == 5:
        src, tgt = dict(_SOURCE_PALETTE), dict(_TARGET_PALETTE)
    else:
        src, tgt = {}, {}
        for k in range(num_classes):
            hue = k / num_classes
            src[k] = ClassFill(
                colorsys.hsv_to_rgb(hue, 0.55, 0.78),
                _MODULATIONS[k % 2],  # flat / checker
                0.05,
                8,
            )
            tgt[k] = ClassFill(
                colorsys.hsv_to_rgb((hue + 0.45) % 1.0, 0.50, 0.62),
                _MODULATIONS[2 + k % 2],  # gradient / speckle
                0.06,
                6,
            )
    ps = TextureProfile(SOURCE, src, noise_sigma=0.01)
    pt = TextureProfile(TARGET, tgt, noise_sigma=0.02)
    validate_profile_pair(ps, pt, num_classes)
    return ps, pt


def validate_profile_pair(ps: TextureProfile, pt: TextureProfile, num_classes: int) -> None:
    """Domains must differ in modulation family for at least ceil(C/2) classes."""
    differing = sum(
        1 for k in range(num_classes) if ps.fill_for(k).modulation != pt.fill_for(k).modulation
    )
    needed = math.ceil(num_classes / 2)
    if differing < needed:
        raise ConfigurationError(
            f"profiles differ in modulation for {differing} classes, need >= {needed}"
        )


def _modulation_field(fill: ClassFill, canvas: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = canvas
    if fill.modulation == "flat" or fill.amplitude == 0.0:
        return np.zeros((h, w), dtype=np.float64)
    yy, xx = np.mgrid[:h, :w]
    p = max(1, int(fill.period))
    if fill.modulation == "checker":
        cells = ((yy // p) + (xx // p)) % 2
        return fill.amplitude * (2.0 * cells - 1.0)
    if fill.modulation == "gradient":
        return fill.amplitude * np.sin(2.0 * np.pi * xx / p)
    if fill.modulation == "speckle":
        return fill.amplitude * (2.0 * rng.random((h, w)) - 1.0)
    raise ConfigurationError(f"unknown modulation {fill.modulation!r}")


def render(scene: SceneSpec, profile: TextureProfile) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene under a texture profile.

    Returns (image HxWx3 float32 in [0,1], labels HxW int32). Labels depend on
    the scene only; the image on (scene, profile, scene.seed).
    """
    labels = render_labels(scene)
    h, w = scene.canvas
    image = np.zeros((h, w, 3), dtype=np.float64)
    dom = _DOMAIN_CODE[profile.domain]
    for class_id in np.unique(labels):
        fill = profile.fill_for(int(class_id))
        rng = np.random.default_rng([scene.seed, dom, int(class_id), 7])
        mod = _modulation_field(fill, scene.canvas, rng)
        mask = labels == class_id
        for ch in range(3):
            image[..., ch][mask] = fill.color[ch] + mod[mask]
    if profile.noise_sigma > 0:
        noise_rng = np.random.default_rng([scene.seed, dom, 9001])
        image += noise_rng.normal(0.0, profile.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


# ---------------------------------------------------------------------------
# png io
# ---------------------------------------------------------------------------


def save_image_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_label_png(path: Path, labels: np.ndarray) -> None:
    if labels.min() < 0 or (labels.max() > 255):
        raise DataError("label values must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_label_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.int64)
    return arr


# ---------------------------------------------------------------------------
# manifest and dataset writing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    domain: str
    split: str
    image: str  # path relative to the dataset root
    label: str | None
    scene_seed: int


@dataclass
class DatasetManifest:
    root: Path
    version: int
    seed: int
    canvas: tuple[int, int]
    classes: list[str]
    records: list[DatasetRecord]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def select(self, domain: str, split: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.domain == domain and r.split == split]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "canvas": list(self.canvas),
            "classes": list(self.classes),
            "records": [
                {
                    "id": r.id,
                    "domain": r.domain,
                    "split": r.split,
                    "image": r.image,
                    "label": r.label,
                    "scene_seed": r.scene_seed,
                }
                for r in self.records
            ],
        }


def save_manifest(manifest: DatasetManifest) -> Path:
    path = manifest.root / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_manifest(root: Path) -> DatasetManifest:
    root = Path(root)
    data = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if data.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {data.get('version')!r}")
    records = [
        DatasetRecord(
            id=r["id"],
            domain=r["domain"],
            split=r["split"],
            image=r["image"],
            label=r["label"],
            scene_seed=r["scene_seed"],
        )
        for r in data["records"]
    ]
    return DatasetManifest(
        root=root,
        version=data["version"],
        seed=data["seed"],
        canvas=tuple(data["canvas"]),
        classes=list(data["classes"]),
        records=records,
    )


def _draw_unique_seeds(rng: np.random.Generator, n: int) -> list[int]:
    seeds: list[int] = []
    seen = set()
    while len(seeds) < n:
        s = int(rng.integers(0, 2**31 - 1))
        if s not in seen:
            seen.add(s)
            seeds.append(s)
    return seeds


def write_dataset(
    root: Path,
    *,
    seed: int = 0,
    config: GenerationConfig = GenerationConfig(),
    n_train: int = 400,
    n_val: int = 50,
    profiles: tuple[TextureProfile, TextureProfile] | None = None,
    overwrite: bool = False,
) -> DatasetManifest:
    """Render the paired corpus to disk. Pure function of (seed, config, profiles).

    Both domains share the same scenes (structure is paired); only the val
    split of the target domain gets label files, train stays unsupervised.
    """
    root = Path(root)
    config.validate()
    if profiles is None:
        profiles = default_profiles(config.num_classes)
    source_profile, target_profile = profiles
    validate_profile_pair(source_profile, target_profile, config.num_classes)

    if root.exists() and any(root.iterdir()) and not overwrite:
        raise DatasetExistsError(f"{root} exists and is not empty; pass overwrite to replace it")

    rng = np.random.default_rng(seed)
    scene_seeds = {
        "train": _draw_unique_seeds(rng, n_train),
        "val": _draw_unique_seeds(rng, n_val),
    }

    records: list[DatasetRecord] = []
    for domain, profile in ((SOURCE, source_profile), (TARGET, target_profile)):
        for split in SPLITS:
            img_dir = root / domain / split / "images"
            lab_dir = root / domain / split / "labels"
            img_dir.mkdir(parents=True, exist_ok=True)
            with_labels = not (domain == TARGET and split == "train")
            if with_labels:
                lab_dir.mkdir(parents=True, exist_ok=True)
            for i, scene_seed in enumerate(scene_seeds[split]):
                rec_id = f"{split}_{i:04d}"
                scene = generate_scene(scene_seed, config)
                image, labels = render(scene, profile)
                rel_img = f"{domain}/{split}/images/{rec_id}.png"
                save_image_png(root / rel_img, image)
                rel_lab = None
                if with_labels:
                    rel_lab = f"{domain}/{split}/labels/{rec_id}.png"
                    save_label_png(root / rel_lab, labels)
                records.append(
                    DatasetRecord(rec_id, domain, split, rel_img, rel_lab, scene_seed)
                )

    manifest = DatasetManifest(
        root=root,
        version=MANIFEST_VERSION,
        seed=seed,
        canvas=config.canvas,
        classes=class_names(config.num_classes),
        records=records,
    )
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# batch loading
# ---------------------------------------------------------------------------


def _resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HxWx3 float image to (H', W')."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    chans = [
        np.asarray(
            Image.fromarray(image[..., c].astype(np.float32), mode="F").resize(
                (w, h), Image.BILINEAR
            )
        )
        for c in range(image.shape[-1])
    ]
    return np.stack(chans, axis=-1)


def _resize_label(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize; class indices are never interpolated."""
    h, w = size
    if labels.shape == (h, w):
        return labels
    im = Image.fromarray(labels.astype(np.uint8), mode="L").resize((w, h), Image.NEAREST)
    return np.asarray(im, dtype=np.int64)


class DatasetLoader:
    """Deterministic batch loader for one (domain, split) view of a manifest.

    Owns a private random stream used for crop offsets and epoch shuffling, so
    concurrent loaders never interact. Train mode resizes to ``train_size``
    then random-crops ``crop_size``; eval mode resizes to ``eval_size``.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        domain: str,
        split: str,
        *,
        seed: int = 0,
        train_size: tuple[int, int] | None = None,
        crop_size: tuple[int, int] | None = None,
        eval_size: tuple[int, int] | None = None,
    ):
        self.manifest = manifest
        self.domain = domain
        self.split = split
        self.records = manifest.select(domain, split)
        if not self.records:
            raise DataError(f"manifest has no records for ({domain}, {split})")
        self.train_size = train_size or manifest.canvas
        self.crop_size = crop_size or self.train_size
        self.eval_size = eval_size or manifest.canvas
        ch, cw = self.crop_size
        th, tw = self.train_size
        if ch > th or cw > tw:
            raise ConfigurationError("crop size exceeds train resize size")
        self._rng = np.random.default_rng(seed)
        self._pending: list[int] = []  # rest of the current epoch order
        self._cache: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
        self.last_crop_offsets: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return len(self.records)

    def _fetch(self, record: DatasetRecord) -> tuple[np.ndarray, np.ndarray | None]:
        entry = self._cache.get(record.id)
        if entry is None:
            image = load_image_png(self.manifest.root / record.image)
            labels = (
                load_label_png(self.manifest.root / record.label)
                if record.label is not None
                else None
            )
            entry = (image, labels)
            self._cache[record.id] = entry
        return entry

    def load_batch(
        self,
        indices,
        mode: str = "train",
        with_labels: bool | None = None,
    ) -> tuple[np.ndarray, np.ndarray | None]:
        """Load records by index. Returns (images (B,3,H,W) float32, labels or None)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        records = [self.records[i] for i in indices]
        if with_labels is None:
            with_labels = all(r.label is not None for r in records)
        if with_labels:
            missing = [r.id for r in records if r.label is None]
            if missing:
                raise MissingLabelError(f"records without labels: {missing}")

        images, labels = [], []
        self.last_crop_offsets = []
        for rec in records:
            image, label = self._fetch(rec)
            if mode == "train":
                image = _resize_image(image, self.train_size)
                if with_labels:
                    label = _resize_label(label, self.train_size)
                th, tw = self.train_size
                ch, cw = self.crop_size
                oy = int(self._rng.integers(0, th - ch + 1))
                ox = int(self._rng.integers(0, tw - cw + 1))
                self.last_crop_offsets.append((oy, ox))
                image = image[oy : oy + ch, ox : ox + cw]
                if with_labels:
                    label = label[oy : oy + ch, ox : ox + cw]
            else:
                image = _resize_image(image, self.eval_size)
                if with_labels:
                    label = _resize_label(label, self.eval_size)
            images.append(np.transpose(image, (2, 0, 1)))
            if with_labels:
                labels.append(label)
        batch = np.stack(images).astype(np.float32)
        return batch, (np.stack(labels).astype(np.int64) if with_labels else None)

    def next_batch(self, batch_size: int, mode: str = "train", with_labels: bool | None = None):
        """Next batch of the endless epoch cycle (fresh permutation per epoch)."""
        while len(self._pending) < batch_size:
            self._pending.extend(self._rng.permutation(len(self.records)).tolist())
        idx, self._pending = self._pending[:batch_size], self._pending[batch_size:]
        return self.load_batch(idx, mode=mode, with_labels=with_labels)

    def batches(self, batch_size: int, mode: str = "train", with_labels: bool | None = None):
        while True:
            yield self.next_batch(batch_size, mode=mode, with_labels=with_labels)

    def state(self) -> dict:
        return {"rng": self._rng.bit_generator.state, "pending": list(self._pending)}

    def set_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state["rng"]
        self._pending = [int(i) for i in state["pending"]]
