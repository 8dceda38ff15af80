"""Bitemporal pairs: synthetic generation, on-disk loading and tiling.

On-disk layout (shared by the loader and the synthetic writer)::

    root/A/<name>.png        pre-change image, 8-bit RGB
    root/B/<name>.png        post-change image
    root/label/<name>.png    8-bit change mask, 255 = changed
    root/list/{train,val,test}.txt   newline-delimited sample names
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SUBDIRS = ("A", "B", "label")


@dataclass
class BitemporalPair:
    image_a: np.ndarray  # (H, W, 3) float32 in [0, 1]
    image_b: np.ndarray
    label: np.ndarray  # (H, W) uint8 in {0, 1}
    name: str = ""

    def __post_init__(self):
        if not (self.image_a.shape[:2] == self.image_b.shape[:2] == self.label.shape):
            raise ValueError(
                f"{self.name or 'pair'}: mismatched dims {self.image_a.shape}, "
                f"{self.image_b.shape}, {self.label.shape}"
            )


@dataclass
class SyntheticConfig:
    size: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    shapes_per_image: tuple = (2, 5)
    noise_level: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.shapes_per_image = tuple(int(v) for v in self.shapes_per_image)
        if self.size < 8 or self.size % 8:
            raise ValueError(f"size must be a positive multiple of 8, got {self.size}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")


# --- shapes -----------------------------------------------------------------


@dataclass
class Shape:
    kind: str  # "rect" | "ellipse" | "polygon"
    params: tuple
    color: tuple = (1.0, 1.0, 1.0)

    def bbox(self):
        if self.kind == "rect":
            y0, x0, y1, x1 = self.params
            return y0, x0, y1, x1
        if self.kind == "ellipse":
            cy, cx, ry, rx = self.params
            return cy - ry, cx - rx, cy + ry, cx + rx
        pts = np.asarray(self.params)
        return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


def rasterize(shape: Shape, size: int) -> np.ndarray:
    """Boolean mask of the pixels whose centres fall inside ``shape``."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape.kind == "rect":
        y0, x0, y1, x1 = shape.params
        return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    if shape.kind == "ellipse":
        cy, cx, ry, rx = shape.params
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if shape.kind == "polygon":
        # convex, vertices as (y, x) in either winding order
        pts = np.asarray(shape.params, dtype=np.float64)
        area = np.sum(pts[:, 1] * np.roll(pts[:, 0], -1) - np.roll(pts[:, 1], -1) * pts[:, 0])
        if area < 0:
            pts = pts[::-1]
        inside = np.ones((size, size), dtype=bool)
        for (y0, x0), (y1, x1) in zip(pts, np.roll(pts, -1, axis=0)):
            inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
        return inside
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def union_mask(shapes, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for s in shapes:
        mask |= rasterize(s, size)
    return mask


def _random_shape(rng: np.random.Generator, size: int) -> Shape:
    lo, hi = max(3, size // 8), max(4, size // 3)
    kind = rng.choice(["rect", "ellipse", "polygon"])
    cy, cx = rng.uniform(hi / 2, size - hi / 2, 2)
    if kind == "rect":
        h, w = rng.uniform(lo, hi, 2)
        params = (cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2)
    elif kind == "ellipse":
        ry, rx = rng.uniform(lo / 2, hi / 2, 2)
        params = (cy, cx, ry, rx)
    else:
        n = int(rng.integers(3, 7))
        ang = rng.uniform(0, 2 * np.pi) + (np.arange(n) + rng.uniform(-0.3, 0.3, n)) * 2 * np.pi / n
        ry, rx = rng.uniform(lo / 2, hi / 2, 2)
        # vertices on an ellipse in angular order form a convex polygon
        params = tuple((cy + ry * np.cos(a), cx + rx * np.sin(a)) for a in ang)
    return Shape(str(kind), tuple(params))


def _overlaps(a: Shape, b: Shape, margin: float = 2.0) -> bool:
    ay0, ax0, ay1, ax1 = a.bbox()
    by0, bx0, by1, bx1 = b.bbox()
    return not (ay1 + margin < by0 or by1 + margin < ay0 or ax1 + margin < bx0 or bx1 + margin < ax0)


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    base = rng.uniform(0.3, 0.6, 3)
    for c in range(3):
        field_ = np.zeros((size, size))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 2.5, 2)
            field_ += rng.uniform(0.02, 0.08) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
        img[..., c] = base[c] + field_
    return img


def paint(background: np.ndarray, shapes) -> np.ndarray:
    img = background.copy()
    for s in shapes:
        img[rasterize(s, img.shape[0])] = s.color
    return img


def jitter(img: np.ndarray, rng: np.random.Generator, noise_level: float) -> np.ndarray:
    """Global per-channel gain/offset plus pixel noise: a stand-in for seasonal and sensor change."""
    gain = rng.uniform(0.85, 1.15, 3)
    offset = rng.uniform(-0.06, 0.06, 3)
    out = img * gain + offset + rng.normal(0.0, noise_level, img.shape)
    return np.clip(out, 0.0, 1.0)


def make_pair(background, shapes_a, shapes_b, rng=None, noise_level: float = 0.0, name: str = "") -> BitemporalPair:
    size = background.shape[0]
    img_a = paint(background, shapes_a)
    img_b = paint(background, shapes_b)
    if rng is not None:
        img_a = jitter(img_a, rng, noise_level)
        img_b = jitter(img_b, rng, noise_level)
    label = union_mask(shapes_a, size) ^ union_mask(shapes_b, size)
    return BitemporalPair(
        img_a.astype(np.float32), img_b.astype(np.float32), label.astype(np.uint8), name
    )


def random_pair(rng: np.random.Generator, cfg: SyntheticConfig, name: str = "") -> BitemporalPair:
    size = cfg.size
    background = _smooth_background(rng, size)
    lo, hi = cfg.shapes_per_image
    n_common = int(rng.integers(lo, hi + 1))
    n_del, n_ins = (int(v) for v in rng.integers(0, 4, 2))
    if n_del + n_ins == 0:
        n_ins = 1
    shapes: list[Shape] = []
    for _ in range(200):
        if len(shapes) == n_common + n_del + n_ins:
            break
        s = _random_shape(rng, size)
        if any(_overlaps(s, o) for o in shapes):
            continue
        while True:
            color = rng.uniform(0, 1, 3)
            if np.linalg.norm(color - background.mean((0, 1))) > 0.35:
                break
        s.color = tuple(color)
        shapes.append(s)
    common = shapes[:n_common]
    deleted = shapes[n_common : n_common + n_del]
    inserted = shapes[n_common + n_del :]
    return make_pair(background, common + deleted, common + inserted, rng, cfg.noise_level, name)


def generate_synthetic(cfg: SyntheticConfig) -> dict[str, list[BitemporalPair]]:
    """Train/val/test splits; every sample has its own RNG stream keyed on (seed, split, index)."""
    out = {}
    for split_id, (split, n) in enumerate(zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test))):
        pairs = []
        for i in range(n):
            rng = np.random.default_rng([cfg.seed, split_id, i])
            pairs.append(random_pair(rng, cfg, name=f"{split}_{i:05d}"))
        out[split] = pairs
    return out


# --- disk ---------------------------------------------------------------------


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_dataset(root, splits: dict[str, list[BitemporalPair]]):
    root = Path(root)
    for sub in SUBDIRS + ("list",):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for split, pairs in splits.items():
        for p in pairs:
            Image.fromarray(_to_u8(p.image_a)).save(root / "A" / f"{p.name}.png")
            Image.fromarray(_to_u8(p.image_b)).save(root / "B" / f"{p.name}.png")
            Image.fromarray((p.label * 255).astype(np.uint8)).save(root / "label" / f"{p.name}.png")
        (root / "list" / f"{split}.txt").write_text("".join(f"{p.name}\n" for p in pairs))


def _stems(directory: Path) -> dict[str, Path]:
    return {f.stem: f for f in sorted(directory.iterdir()) if f.is_file()}


def _check_layout(root: Path) -> dict[str, dict[str, Path]]:
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    files = {}
    for sub in SUBDIRS:
        d = root / sub
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory: {d}")
        files[sub] = _stems(d)
    names = set().union(*(f.keys() for f in files.values()))
    for sub in SUBDIRS:
        for name in sorted(names - files[sub].keys()):
            present = next(files[s][name] for s in SUBDIRS if name in files[s])
            raise FileNotFoundError(f"{present} has no counterpart in {root / sub}")
    return files


def read_split(root, split: str) -> list[str]:
    path = Path(root) / "list" / f"{split}.txt"
    if not path.is_file():
        raise FileNotFoundError(f"split manifest not found: {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def split_sizes(root) -> dict[str, int]:
    """Validate the split manifests against the three image directories and report their sizes."""
    root = Path(root)
    files = _check_layout(root)
    sizes = {}
    for split in SPLITS:
        if not (root / "list" / f"{split}.txt").is_file():
            continue
        names = read_split(root, split)
        missing = [n for n in names if n not in files["A"]]
        if missing:
            raise FileNotFoundError(f"{split} manifest lists {missing[0]!r}, which is not in {root / 'A'}")
        sizes[split] = len(names)
    log.info("splits under %s: %s", root, sizes)
    return sizes


def _read_label(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    if not np.all((arr == 0) | (arr == 255)):
        log.warning("%s has values other than 0/255; binarising at 128", path)
    return (arr >= 128).astype(np.uint8)


def load_dataset(root, split: str | None = None) -> list[BitemporalPair]:
    """Load all pairs (or those listed in ``root/list/<split>.txt``) sorted by name."""
    root = Path(root)
    files = _check_layout(root)
    names = sorted(files["A"]) if split is None else sorted(read_split(root, split))
    pairs = []
    for name in names:
        if name not in files["A"]:
            raise FileNotFoundError(f"{name!r} is listed in the {split} manifest but missing from {root / 'A'}")
        a = np.asarray(Image.open(files["A"][name]).convert("RGB"), dtype=np.float32) / 255.0
        b = np.asarray(Image.open(files["B"][name]).convert("RGB"), dtype=np.float32) / 255.0
        pairs.append(BitemporalPair(a, b, _read_label(files["label"][name]), name))
    return pairs


def to_tensors(pairs, dtype=torch.float32):
    """Stack pairs into ``(N,3,H,W)`` image tensors and a ``(N,1,H,W)`` {0,1} label tensor."""
    ia = torch.from_numpy(np.stack([p.image_a for p in pairs])).permute(0, 3, 1, 2)
    ib = torch.from_numpy(np.stack([p.image_b for p in pairs])).permute(0, 3, 1, 2)
    lab = torch.from_numpy(np.stack([p.label for p in pairs]))[:, None]
    return ia.to(dtype).contiguous(), ib.to(dtype).contiguous(), lab.to(dtype)


def encode_label(label: torch.Tensor) -> torch.Tensor:
    """{0, 1} change mask -> {-1, +1} diffusion target."""
    return label * 2.0 - 1.0


# --- tiling -------------------------------------------------------------------


@dataclass(frozen=True)
class TileIndex:
    row: int
    col: int
    y: int
    x: int


def tile(image: np.ndarray, tile_size: int, overlap: int = 0, pad: bool = False):
    """Split an ``(H, W, ...)`` array into row-major non-overlapping tiles.

    Edge remainders smaller than ``tile_size`` are dropped unless ``pad`` is set,
    in which case the image is zero-padded up to whole tiles.
    """
    if overlap != 0:
        raise ValueError("only non-overlapping tiles are supported")
    H, W = image.shape[:2]
    if tile_size < 1:
        raise ValueError("tile_size must be positive")
    if pad:
        ph, pw = -H % tile_size, -W % tile_size
        image = np.pad(image, [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2))
        H, W = image.shape[:2]
    if tile_size > H or tile_size > W:
        raise ValueError(f"tile_size {tile_size} exceeds image dims {(H, W)}")
    patches, index = [], []
    for r in range(H // tile_size):
        for c in range(W // tile_size):
            y, x = r * tile_size, c * tile_size
            patches.append(image[y : y + tile_size, x : x + tile_size].copy())
            index.append(TileIndex(r, c, y, x))
    return patches, index


def untile(patches, index) -> np.ndarray:
    """Reassemble the region covered by ``tile``'s output."""
    ts = patches[0].shape[0]
    H = max(i.y for i in index) + ts
    W = max(i.x for i in index) + ts
    out = np.zeros((H, W) + patches[0].shape[2:], dtype=patches[0].dtype)
    for p, i in zip(patches, index):
        out[i.y : i.y + ts, i.x : i.x + ts] = p
    return out
