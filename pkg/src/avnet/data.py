"""Fundus images, colour-coded A/V labels, augmentation and splits."""
from __future__ import annotations

import enum
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .ops import IGNORE


class ClassId(enum.IntEnum):
    BACKGROUND = 0
    ARTERIOLE = 1
    VENULE = 2
    INTERSECTION = 3
    IGNORE = IGNORE


NUM_CLASSES = 4

PALETTE = {
    ClassId.BACKGROUND: (0, 0, 0),
    ClassId.ARTERIOLE: (255, 0, 0),
    ClassId.VENULE: (0, 0, 255),
    ClassId.INTERSECTION: (0, 255, 0),
    ClassId.IGNORE: (255, 255, 255),
}

# background, arteriole, venule, intersection
DEFAULT_CLASS_WEIGHTS = (1.0, 5.0, 5.0, 1e-12)


class DataError(ValueError):
    """Malformed dataset input: manifest, image/label pair or annotation colours."""


class LabelError(DataError):
    pass


@dataclass
class FundusSample:
    image: np.ndarray          # float32 [3, H, W] in [0, 1]
    class_map: np.ndarray      # uint8 [H, W]
    weight_map: np.ndarray     # float32 [H, W]
    source_id: str = ""
    class_weights: tuple = DEFAULT_CLASS_WEIGHTS

    def __post_init__(self):
        h, w = self.class_map.shape
        if self.image.shape[1:] != (h, w) or self.weight_map.shape != (h, w):
            raise ValueError(f"{self.source_id}: image {self.image.shape}, class map {self.class_map.shape} "
                             f"and weight map {self.weight_map.shape} disagree")

    @property
    def ignore_mask(self) -> np.ndarray:
        return self.class_map == IGNORE

    @property
    def size(self) -> tuple[int, int]:
        return self.class_map.shape


def encode_labels(rgb: np.ndarray, strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Map an [H, W, 3] uint8 annotation image to (class_map, ignore_mask).

    Strict mode rejects any colour outside the five-colour palette. With
    ``strict=False`` each pixel snaps to the nearest palette colour.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise LabelError(f"label image must be H x W x 3, got {rgb.shape}")
    colors = np.array(list(PALETTE.values()), dtype=np.int32)
    ids = np.array([int(k) for k in PALETTE], dtype=np.uint8)
    px = rgb.astype(np.int32)
    if strict:
        class_map = np.full(rgb.shape[:2], 0, dtype=np.uint8)
        matched = np.zeros(rgb.shape[:2], dtype=bool)
        for color, cid in zip(colors, ids):
            hit = np.all(px == color, axis=2)
            class_map[hit] = cid
            matched |= hit
        if not matched.all():
            bad = np.argwhere(~matched)
            offending = np.unique(rgb[~matched].reshape(-1, 3), axis=0)
            listed = ", ".join(str(tuple(int(v) for v in c)) for c in offending[:8])
            more = f" (+{len(offending) - 8} more)" if len(offending) > 8 else ""
            y, x = bad[0]
            raise LabelError(f"{len(bad)} pixels have unrecognized label colours, first at (row {y}, col {x}); "
                             f"colours: {listed}{more}")
    else:
        dist = ((px[:, :, None, :] - colors[None, None]) ** 2).sum(axis=3)
        class_map = ids[dist.argmin(axis=2)]
    return class_map, class_map == IGNORE


def decode_labels(class_map: np.ndarray) -> np.ndarray:
    """Inverse palette lookup: class map -> [H, W, 3] uint8."""
    lut = np.zeros((256, 3), dtype=np.uint8)
    for cid, color in PALETTE.items():
        lut[int(cid)] = color
    return lut[np.asarray(class_map, dtype=np.uint8)]


def decode_predictions(probs, ignore_mask: np.ndarray | None = None) -> np.ndarray:
    """Argmax over the class axis rendered with the label palette.

    Accepts [K, H, W] or [1, K, H, W]; ties go to the lowest class index and
    pixels in ``ignore_mask`` are painted white.
    """
    p = probs.data if hasattr(probs, "data") and not isinstance(probs, np.ndarray) else np.asarray(probs)
    if p.ndim == 4:
        if p.shape[0] != 1:
            raise ValueError("decode_predictions takes a single image")
        p = p[0]
    if p.shape[0] != NUM_CLASSES:
        raise ValueError(f"expected {NUM_CLASSES} class channels, got {p.shape[0]}")
    cls = p.argmax(axis=0).astype(np.uint8)
    if ignore_mask is not None:
        cls = np.where(ignore_mask, np.uint8(IGNORE), cls)
    return decode_labels(cls)


def class_weight_map(class_map: np.ndarray, weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS) -> np.ndarray:
    weights = [float(v) for v in weights]
    if len(weights) != NUM_CLASSES:
        raise ValueError(f"need {NUM_CLASSES} class weights, got {len(weights)}")
    if any(v < 0 for v in weights):
        raise ValueError(f"class weights must be non-negative, got {weights}")
    lut = np.zeros(256, dtype=np.float32)
    lut[:NUM_CLASSES] = weights
    return lut[np.asarray(class_map, dtype=np.uint8)]


def make_sample(image: np.ndarray, class_map: np.ndarray, source_id: str = "",
                class_weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS) -> FundusSample:
    class_weights = tuple(float(v) for v in class_weights)
    return FundusSample(np.asarray(image, dtype=np.float32), np.asarray(class_map, dtype=np.uint8),
                        class_weight_map(class_map, class_weights), source_id, class_weights)


def _read_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_sample(image_path, label_path, class_weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS,
                strict: bool = True, source_id: str | None = None) -> FundusSample:
    img = _read_rgb(image_path)
    lab = _read_rgb(label_path)
    if img.shape != lab.shape:
        raise DataError(f"image {image_path} is {img.shape[:2]} but label {label_path} is {lab.shape[:2]}")
    try:
        class_map, _ = encode_labels(lab, strict=strict)
    except LabelError as e:
        raise LabelError(f"{label_path}: {e}") from None
    image = img.transpose(2, 0, 1).astype(np.float32) / np.float32(255)
    return make_sample(image, class_map, source_id or Path(image_path).stem, class_weights)


def save_sample(sample: FundusSample, image_path, label_path) -> None:
    """Write the pair as 8-bit RGB PNGs (image values are rounded to /255)."""
    img = np.clip(np.rint(sample.image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(image_path)
    Image.fromarray(decode_labels(sample.class_map)).save(label_path)


def read_image(path) -> np.ndarray:
    """RGB file -> float32 [3, H, W] in [0, 1]."""
    return _read_rgb(path).transpose(2, 0, 1).astype(np.float32) / np.float32(255)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentationConfig:
    crop_size: int = 512
    scale_range: list = field(default_factory=lambda: [0.8, 1.25])
    max_pan: float = 0.1
    hflip: bool = True
    vflip: bool = True
    multiplier: int = 83
    seed: int = 0
    enabled: bool = True

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.crop_size < 8 or self.multiplier < 1 or self.max_pan < 0:
            raise ValueError("crop_size >= 8, multiplier >= 1 and max_pan >= 0 required")


@dataclass(frozen=True)
class AugmentParams:
    """One geometric draw.

    ``shift_y``/``shift_x`` move the crop window (in scaled pixels) away from
    the centred position; they cover both random cropping and panning.
    """

    scale: float = 1.0
    shift_y: float = 0.0
    shift_x: float = 0.0
    flip_h: bool = False
    flip_v: bool = False


def _stream(seed: int, source_id: str, draw_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(source_id.encode()), int(draw_index)])


def draw_params(cfg: AugmentationConfig, size: tuple[int, int], source_id: str, draw_index: int) -> AugmentParams:
    rng = _stream(cfg.seed, source_id, draw_index)
    lo, hi = cfg.scale_range
    s = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    h, w = size
    pan = cfg.max_pan * cfg.crop_size
    span_y = max(0.0, (h * s - cfg.crop_size) / 2) + pan
    span_x = max(0.0, (w * s - cfg.crop_size) / 2) + pan
    dy, dx = rng.uniform(-span_y, span_y), rng.uniform(-span_x, span_x)
    fh = bool(cfg.hflip and rng.random() < 0.5)
    fv = bool(cfg.vflip and rng.random() < 0.5)
    return AugmentParams(s, float(dy), float(dx), fh, fv)


def source_coords(params: AugmentParams, size: tuple[int, int], crop: int) -> tuple[np.ndarray, np.ndarray]:
    """Source-image (row, col) coordinates for every pixel of the output crop."""
    h, w = size
    s = params.scale
    oy = np.floor((h * s - crop) / 2) + params.shift_y
    ox = np.floor((w * s - crop) / 2) + params.shift_x
    i = np.arange(crop, dtype=np.float64)
    if params.flip_v:
        i = i[::-1]
    j = np.arange(crop, dtype=np.float64)
    if params.flip_h:
        j = j[::-1]
    ys = (oy + i + 0.5) / s - 0.5
    xs = (ox + j + 0.5) / s - 0.5
    return np.meshgrid(ys, xs, indexing="ij")


def _nearest(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill) -> np.ndarray:
    h, w = arr.shape
    yi = np.floor(ys + 0.5).astype(np.int64)
    xi = np.floor(xs + 0.5).astype(np.int64)
    inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = np.full(ys.shape, fill, dtype=arr.dtype)
    out[inside] = arr[yi[inside], xi[inside]]
    return out


def apply_geometry(sample: FundusSample, params: AugmentParams, crop: int) -> FundusSample:
    """Warp image bilinearly and labels by nearest neighbour; outside is background."""
    ys, xs = source_coords(params, sample.size, crop)
    image = np.stack([ndimage.map_coordinates(ch, [ys, xs], order=1, mode="grid-constant", cval=0.0)
                      for ch in sample.image]).astype(np.float32)
    class_map = _nearest(sample.class_map, ys, xs, np.uint8(ClassId.BACKGROUND))
    return make_sample(image, class_map, sample.source_id, sample.class_weights)


def augment(sample: FundusSample, cfg: AugmentationConfig, draw_index: int) -> FundusSample:
    params = draw_params(cfg, sample.size, sample.source_id, draw_index)
    out = apply_geometry(sample, params, cfg.crop_size)
    out.source_id = f"{sample.source_id}#{draw_index}"
    return out


class AugmentedDataset:
    """Lazy view of ``len(sources) * multiplier`` augmented crops.

    Each item depends only on (seed, source id, draw index), so any access
    order reproduces the same samples.
    """

    def __init__(self, sources: Sequence[FundusSample], cfg: AugmentationConfig):
        cfg.validate()
        self.sources = list(sources)
        self.cfg = cfg

    def __len__(self) -> int:
        return len(self.sources) * self.cfg.multiplier

    def index(self, i: int) -> tuple[int, int]:
        if not 0 <= i < len(self):
            raise IndexError(i)
        return divmod(i, self.cfg.multiplier)

    def __getitem__(self, i: int) -> FundusSample:
        src, draw = self.index(i)
        return augment(self.sources[src], self.cfg, draw)

    def ids(self) -> list[str]:
        return [f"{self.sources[s].source_id}#{d}" for s, d in map(self.index, range(len(self)))]


# ---------------------------------------------------------------------- splits

def split_folds(sample_ids: Sequence[str], k: int = 5, seed: int = 0) -> list[tuple[list, list]]:
    """Case-level k-fold partition; fold sizes differ by at most one."""
    ids = list(sample_ids)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of ids ({len(ids)})")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [[ids[i] for i in part] for part in np.array_split(order, k)]
    return [([x for f in folds[:j] + folds[j + 1:] for x in f], folds[j]) for j in range(k)]


def train_test_split(sample_ids: Sequence[str], n_test: int = 10, seed: int = 0) -> tuple[list, list]:
    ids = list(sample_ids)
    if not 0 <= n_test <= len(ids):
        raise ValueError(f"n_test={n_test} out of range for {len(ids)} ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    return [x for x in ids if x not in set(test)], test


# ------------------------------------------------------------------- synthetic

_BG = np.array([0.78, 0.36, 0.16])
_ARTERY = np.array([0.93, 0.27, 0.20])
_VEIN = np.array([0.42, 0.08, 0.12])


def _vessel_path(rng: np.random.Generator, size: int, horizontal: bool,
                 anchor: np.ndarray | None = None) -> np.ndarray:
    """Smooth random walk through ``anchor``, as an (n, 2) array of (row, col)."""
    if anchor is None:
        anchor = rng.uniform(0.2 * size, 0.8 * size, 2)
    heading = (0.0 if horizontal else np.pi / 2) + rng.uniform(-0.4, 0.4)
    halves = []
    for direction in (heading, heading + np.pi):
        p, ang, turn = np.array(anchor, dtype=float), direction, 0.0
        pts = []
        for _ in range(size):
            turn = 0.85 * turn + rng.normal(0, 0.06)
            ang = direction + np.clip(ang + turn - direction, -0.7, 0.7)
            p = p + np.array([np.sin(ang), np.cos(ang)])
            pts.append(p.copy())
        halves.append(pts)
    return np.array(halves[1][::-1] + [np.array(anchor, dtype=float)] + halves[0])


def _rasterize(path: np.ndarray, radius: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for y, x in path[::1]:
        if -radius - 1 <= y <= size + radius and -radius - 1 <= x <= size + radius:
            y0, y1 = max(0, int(y - radius - 1)), min(size, int(y + radius + 2))
            x0, x1 = max(0, int(x - radius - 1)), min(size, int(x + radius + 2))
            sub = (yy[y0:y1, x0:x1] - y) ** 2 + (xx[y0:y1, x0:x1] - x) ** 2 <= radius * radius
            mask[y0:y1, x0:x1] |= sub
    return mask


def generate_synthetic(size: int = 64, seed: int = 0,
                       class_weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS) -> FundusSample:
    """Render a toy fundus crop: bright thin arterioles, dark wider venules.

    Arterioles run roughly horizontally and venules vertically so at least one
    crossing exists; crossings are labelled INTERSECTION and a few pixels on
    vessel borders are marked IGNORE. The image is quantized to /255 so a PNG
    round trip is exact.
    """
    if size < 32:
        raise ValueError(f"synthetic size must be at least 32, got {size}")
    rng = np.random.default_rng(seed)
    n_each = max(1, round(size / 64)) + int(rng.random() < 0.5)
    artery = np.zeros((size, size), dtype=bool)
    vein = np.zeros((size, size), dtype=bool)
    # the first pair shares an anchor so at least one crossing is in frame
    cross = rng.uniform(0.3 * size, 0.7 * size, 2)
    for k in range(n_each):
        anchor = cross if k == 0 else None
        artery |= _rasterize(_vessel_path(rng, size, True, anchor), rng.uniform(0.8, 1.2), size)
        vein |= _rasterize(_vessel_path(rng, size, False, anchor), rng.uniform(1.1, 1.6), size)

    class_map = np.zeros((size, size), dtype=np.uint8)
    class_map[artery] = ClassId.ARTERIOLE
    class_map[vein] = ClassId.VENULE
    class_map[artery & vein] = ClassId.INTERSECTION
    vessel = artery | vein
    border = ndimage.binary_dilation(vessel) & ~vessel
    cand = np.argwhere(border)
    n_ign = max(1, int(0.03 * len(cand)))
    pick = cand[rng.choice(len(cand), size=n_ign, replace=False)]
    class_map[pick[:, 0], pick[:, 1]] = IGNORE

    yy, xx = np.mgrid[0:size, 0:size] / size
    r2 = (yy - 0.5) ** 2 + (xx - 0.5) ** 2
    shade = 1.0 - 0.5 * r2 + 0.05 * np.sin(2 * np.pi * (yy * rng.uniform(1, 3) + xx * rng.uniform(1, 3)))
    img = _BG[:, None, None] * shade
    a = ndimage.gaussian_filter(artery.astype(float), 0.6)
    v = ndimage.gaussian_filter(vein.astype(float), 0.6)
    a = np.clip(a * 1.5, 0, 1)
    v = np.clip(v * 1.5, 0, 1)
    img = img * (1 - a) + _ARTERY[:, None, None] * a * shade
    img = img * (1 - v) + _VEIN[:, None, None] * v * shade
    img = img + rng.normal(0, 0.02, img.shape)
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return make_sample(img.astype(np.float32), class_map, f"synthetic-{seed}", class_weights)


# -------------------------------------------------------------------- manifest

@dataclass
class Manifest:
    """Image/label pairs with split assignment; paths resolve against ``root``."""

    pairs: list                # [{"id", "image", "label", "split"}]
    seed: int = 0
    root: str = "."

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def ids(self, split: str | None = None) -> list[str]:
        return [p["id"] for p in self.pairs if split is None or p.get("split") == split]

    def load(self, ids: Sequence[str] | None = None, class_weights=DEFAULT_CLASS_WEIGHTS) -> list[FundusSample]:
        by_id = {p["id"]: p for p in self.pairs}
        want = ids if ids is not None else list(by_id)
        unknown = [i for i in want if i not in by_id]
        if unknown:
            raise DataError(f"ids not in manifest: {unknown[:5]}")
        return [load_sample(self.resolve(by_id[i]["image"]), self.resolve(by_id[i]["label"]),
                            class_weights, source_id=i) for i in want]

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "pairs": self.pairs}, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(raw, dict) or not isinstance(raw.get("pairs"), list):
        raise DataError(f"{path}: manifest must be an object with a 'pairs' list")
    for i, p in enumerate(raw["pairs"]):
        missing = {"id", "image", "label"} - set(p)
        if missing:
            raise DataError(f"{path}: pairs[{i}] missing {sorted(missing)}")
    return Manifest(raw["pairs"], int(raw.get("seed", 0)), str(raw.get("root", path.parent)))


def scan_directory(directory, n_test: int = 10, seed: int = 0) -> Manifest:
    """Pair ``<id>.png`` with ``<id>_av.png`` and assign a seeded train/test split."""
    directory = Path(directory)
    ids = sorted(p.stem for p in directory.glob("*.png")
                 if not p.stem.endswith("_av") and (directory / f"{p.stem}_av.png").exists())
    if not ids:
        raise FileNotFoundError(f"no <id>.png / <id>_av.png pairs in {directory}")
    _, test = train_test_split(ids, min(n_test, len(ids) - 1) if len(ids) > 1 else 0, seed)
    pairs = [{"id": i, "image": f"{i}.png", "label": f"{i}_av.png",
              "split": "test" if i in test else "train"} for i in ids]
    return Manifest(pairs, seed, str(directory))


def write_synthetic_dataset(directory, count: int, size: int = 64, seed: int = 0,
                            n_test: int = 0) -> Manifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(count):
        s = generate_synthetic(size, seed + k)
        sid = f"syn{k:03d}"
        save_sample(s, directory / f"{sid}.png", directory / f"{sid}_av.png")
    manifest = scan_directory(directory, n_test=n_test, seed=seed)
    manifest.save(directory / "manifest.json")
    return manifest
