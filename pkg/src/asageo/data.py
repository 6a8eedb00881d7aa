"""Manifests, the University-1652 loader, synthetic paired views and satellite oversampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DatasetError

log = logging.getLogger(__name__)

VIEWS = ("uav", "satellite")
SPLITS = ("train", "query_uav", "query_sat", "gallery_uav", "gallery_sat")
IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}

# split -> [(directory relative to the dataset root, view)]
SPLIT_DIRS = {
    "train": [("train/drone", "uav"), ("train/satellite", "satellite")],
    "query_uav": [("test/query_drone", "uav")],
    "query_sat": [("test/query_satellite", "satellite")],
    "gallery_uav": [("test/gallery_drone", "uav")],
    "gallery_sat": [("test/gallery_satellite", "satellite")],
}


@dataclass
class ManifestEntry:
    path: str
    location_id: str
    view: str
    # recorded UAV warp for synthetic data: angle (deg), scale, tx, ty
    transform: list[float] | None = None

    @property
    def sample_id(self) -> str:
        return self.path


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    root: str = ""

    def locations(self) -> list[str]:
        return sorted({e.location_id for e in self.entries})

    def by_view(self, view: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.view == view]

    def to_dict(self) -> dict:
        return {"split": self.split, "root": self.root, "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["split"], [ManifestEntry(**e) for e in d["entries"]], d.get("root", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GeoSample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    location_id: str
    view: str
    label: int = -1
    sample_id: str = ""


def _expected_layout() -> str:
    lines = [f"  {split}: " + ", ".join(f"<root>/{d}/<class_id>/*" for d, _ in dirs)
             for split, dirs in SPLIT_DIRS.items()]
    return "expected layout:\n" + "\n".join(lines)


def load_university1652(root_dir, split: str) -> DatasetManifest:
    """Enumerate one split of a University-1652-style directory tree."""
    if split not in SPLIT_DIRS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root_dir)
    if not root.is_dir() or not any(root.iterdir()):
        raise DatasetError(f"dataset root {root} is missing or empty\n{_expected_layout()}")
    entries = []
    for rel, view in SPLIT_DIRS[split]:
        base = root / rel
        if not base.is_dir():
            raise DatasetError(f"split {split!r} not found: {base} does not exist\n{_expected_layout()}")
        for class_dir in sorted(p for p in base.iterdir() if p.is_dir()):
            files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
            if not files:
                log.warning("empty class directory %s skipped", class_dir)
                continue
            entries.extend(
                ManifestEntry(str(f.relative_to(root)), class_dir.name, view) for f in files
            )
    if not entries:
        raise DatasetError(f"split {split!r} under {root} contains no images\n{_expected_layout()}")
    transforms = _synthetic_transforms(root)
    if transforms:
        for e in entries:
            e.transform = transforms.get(e.path)
    return DatasetManifest(split, entries, str(root))


def _synthetic_transforms(root: Path) -> dict:
    meta = root / "synthetic.json"
    if not meta.exists():
        return {}
    return json.loads(meta.read_text()).get("transforms", {})


def assert_disjoint(train: DatasetManifest, *tests: DatasetManifest) -> None:
    train_locs = set(train.locations())
    for m in tests:
        overlap = train_locs & set(m.locations())
        if overlap:
            raise DatasetError(
                f"train and {m.split} share {len(overlap)} locations, e.g. {sorted(overlap)[:5]}"
            )


# --------------------------------------------------------------------------
# synthetic scenes

def _scene(seed: int, location: int) -> dict:
    rng = np.random.default_rng([seed, location])
    shapes = []
    # central target, like the building each University-1652 location is centred on
    shapes.append(dict(kind="rect", cx=0.0, cy=0.0, hw=rng.uniform(0.2, 0.4), hh=rng.uniform(0.2, 0.4),
                       angle=rng.uniform(0, math.pi), color=rng.uniform(0, 1, 3)))
    for _ in range(int(rng.integers(3, 6))):
        kind = "circle" if rng.random() < 0.5 else "rect"
        shapes.append(dict(kind=kind, cx=rng.uniform(-1.2, 1.2), cy=rng.uniform(-1.2, 1.2),
                           hw=rng.uniform(0.1, 0.3), hh=rng.uniform(0.1, 0.3),
                           angle=rng.uniform(0, math.pi), color=rng.uniform(0, 1, 3)))
    return dict(
        ground=rng.uniform(0.1, 0.9, 3),
        road_angle=rng.uniform(0, math.pi),
        road_offset=rng.uniform(-0.5, 0.5),
        road_width=rng.uniform(0.05, 0.12),
        road_color=np.full(3, rng.uniform(0.3, 0.7)),
        shapes=shapes,
    )


def _paint(scene: dict, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    img = np.broadcast_to(scene["ground"], u.shape + (3,)).copy()
    a = scene["road_angle"]
    road = np.abs(-math.sin(a) * u + math.cos(a) * v - scene["road_offset"]) < scene["road_width"]
    img[road] = scene["road_color"]
    for s in scene["shapes"]:
        du, dv = u - s["cx"], v - s["cy"]
        if s["kind"] == "circle":
            mask = du * du + dv * dv < s["hw"] ** 2
        else:
            c, sn = math.cos(s["angle"]), math.sin(s["angle"])
            mask = (np.abs(c * du + sn * dv) < s["hw"]) & (np.abs(-sn * du + c * dv) < s["hh"])
        img[mask] = s["color"]
    return img


def render_view(seed: int, location: int, size: int, transform=None, supersample: int = 2) -> np.ndarray:
    """Render one view as ``(size, size, 3)`` uint8.

    ``transform = (angle_deg, scale, tx, ty)`` maps an output pixel ``p`` in
    [-1, 1]^2 to scene coordinates ``R(angle) p / scale + t``; ``None`` gives
    the canonical top-down (satellite) render.
    """
    scene = _scene(seed, location)
    n = size * supersample
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    x, y = np.meshgrid(coords, coords)
    if transform is not None:
        angle, scale, tx, ty = transform
        c, s = math.cos(math.radians(angle)), math.sin(math.radians(angle))
        x, y = (c * x - s * y) / scale + tx, (s * x + c * y) / scale + ty
    img = _paint(scene, x, y)
    img = img.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    return np.round(img * 255.0).astype(np.uint8)


def sample_uav_transform(rng: np.random.Generator) -> list[float]:
    return [
        float(rng.uniform(0.0, 360.0)),
        float(rng.uniform(0.7, 1.3)),
        float(rng.uniform(-0.2, 0.2)),  # <= 10% of the 2-unit extent
        float(rng.uniform(-0.2, 0.2)),
    ]


def location_name(index: int) -> str:
    return f"{index:04d}"


def generate_synthetic(num_locations: int, uav_views_per_location: int, seed: int,
                       size: int = 64, first_location: int = 0):
    """Deterministic paired-view dataset.

    Returns ``(manifest, images)`` where ``images`` maps entry paths to uint8
    arrays. Paths follow the University-1652 training layout.
    """
    if num_locations < 2:
        raise DatasetError("synthetic data needs at least 2 locations for retrieval")
    entries, images = [], {}
    for loc in range(first_location, first_location + num_locations):
        name = location_name(loc)
        sat_path = f"train/satellite/{name}/{name}.png"
        entries.append(ManifestEntry(sat_path, name, "satellite"))
        images[sat_path] = render_view(seed, loc, size)
        rng = np.random.default_rng([seed, loc, 1])
        for j in range(uav_views_per_location):
            t = sample_uav_transform(rng)
            path = f"train/drone/{name}/image-{j + 1:02d}.png"
            entries.append(ManifestEntry(path, name, "uav", t))
            images[path] = render_view(seed, loc, size, t)
    return DatasetManifest("train", entries), images


def materialize_synthetic(out_dir, num_locations: int, uav_views: int, seed: int, size: int = 64,
                          test_locations: int = 0) -> dict[str, DatasetManifest]:
    """Write a synthetic dataset in University-1652 layout.

    Held-out test locations (if any) get ids after the training ones and are
    written to the ``test/`` query/gallery folders for both directions.
    """
    out = Path(out_dir)
    train, images = generate_synthetic(num_locations, uav_views, seed, size)
    manifests = {"train": train}
    if test_locations:
        if test_locations < 2:
            raise DatasetError("test split needs at least 2 locations")
        test, test_images = generate_synthetic(test_locations, uav_views, seed, size,
                                               first_location=num_locations)
        for split, view, folder in (
            ("query_uav", "uav", "query_drone"), ("gallery_sat", "satellite", "gallery_satellite"),
            ("query_sat", "satellite", "query_satellite"), ("gallery_uav", "uav", "gallery_drone"),
        ):
            m = DatasetManifest(split)
            for e in test.by_view(view):
                sub = "drone" if view == "uav" else "satellite"
                path = e.path.replace(f"train/{sub}/", f"test/{folder}/", 1)
                m.entries.append(ManifestEntry(path, e.location_id, view, e.transform))
                images[path] = test_images[e.path]
            manifests[split] = m
        assert_disjoint(train, *[m for k, m in manifests.items() if k != "train"])
    for path, arr in sorted(images.items()):
        target = out / path
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(target, format="PNG", optimize=False)
    transforms = {e.path: e.transform for m in manifests.values() for e in m.entries if e.transform}
    meta = {"seed": seed, "num_locations": num_locations, "uav_views": uav_views, "size": size,
            "test_locations": test_locations, "transforms": transforms}
    (out / "synthetic.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for split, m in manifests.items():
        # saved without a root (the file sits in it) so reruns elsewhere hash identically
        m.save(out / f"manifest_{split}.json")
        m.root = str(out)
    return manifests


# --------------------------------------------------------------------------
# image access

def load_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


class ImageStore:
    """Loads and caches manifest images as float32 ``(H, W, 3)`` arrays in [0, 1]."""

    def __init__(self, root, size: tuple[int, int] | None = None, cache: bool = True):
        self.root = Path(root)
        self.size = size
        self.cache = cache
        self._cache: dict[str, np.ndarray] = {}

    def get(self, entry: ManifestEntry) -> np.ndarray:
        img = self._cache.get(entry.path)
        if img is None:
            img = load_image(self.root / entry.path, self.size)
            if self.cache:
                self._cache[entry.path] = img
        return img


class ArrayStore(ImageStore):
    """In-memory store backed by ``generate_synthetic`` output."""

    def __init__(self, images: dict[str, np.ndarray]):
        super().__init__(".")
        self._cache = {k: v.astype(np.float32) / 255.0 for k, v in images.items()}


def channel_stats(store: ImageStore, entries) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the given entries; 0.5/0.5 when empty or flat."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for e in entries:
        img = store.get(e).astype(np.float64)
        total += img.sum(axis=(0, 1))
        total_sq += (img * img).sum(axis=(0, 1))
        count += img.shape[0] * img.shape[1]
    if count == 0:
        return np.full(3, 0.5), np.full(3, 0.5)
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 0.0))
    if np.any(std < 1e-6):
        return np.full(3, 0.5), np.full(3, 0.5)
    return mean, std


# --------------------------------------------------------------------------
# satellite oversampling and augmentation

@dataclass
class AugmentParams:
    flip: bool = False
    angle: float = 0.0
    scale: float = 1.0  # crop side as a fraction of the image
    offset_x: float = 0.0  # crop-centre offset as a fraction of the free margin, in [-1, 1]
    offset_y: float = 0.0


def sample_augment(rng: np.random.Generator, flip: bool = True, max_rotation: float = 10.0,
                   crop_scale_min: float = 0.9) -> AugmentParams:
    return AugmentParams(
        flip=bool(flip and rng.random() < 0.5),
        angle=float(rng.uniform(-max_rotation, max_rotation)),
        scale=float(rng.uniform(crop_scale_min, 1.0)),
        offset_x=float(rng.uniform(-1.0, 1.0)),
        offset_y=float(rng.uniform(-1.0, 1.0)),
    )


def augment(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Horizontal flip, rotation about the centre and crop-resize in one affine warp."""
    h, w = image.shape[:2]
    img = image[:, ::-1] if p.flip else image
    a = math.radians(p.angle)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    matrix = rot * p.scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    margin = (1.0 - p.scale) / 2.0 * np.array([h, w])
    shift = centre + margin * np.array([p.offset_y, p.offset_x])
    offset = shift - matrix @ centre
    out = np.empty_like(img, dtype=np.float32)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.affine_transform(
            np.ascontiguousarray(img[..., c]), matrix, offset=offset, order=1, mode="nearest"
        )
    return out


@dataclass
class StreamItem:
    entry: ManifestEntry
    repeat: int
    augment: AugmentParams | None


def oversample_satellite(manifest: DatasetManifest, factor: int = 3, rng=None,
                         augment_images: bool = True, **aug_kwargs) -> list[StreamItem]:
    """Each satellite entry ``factor`` times, each draw with its own augmentation."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    sats = manifest.by_view("satellite")
    rng = rng if rng is not None else np.random.default_rng(0)
    stream = []
    for r in range(factor):
        for e in sats:
            params = sample_augment(rng, **aug_kwargs) if augment_images else None
            stream.append(StreamItem(e, r, params))
    return stream
