"""Synthetic RGB-D scenes, on-disk dataset I/O, augmentation.

On-disk layout::

    root/rgb/<id>.png     8-bit RGB
    root/depth/<id>.png   8- or 16-bit single channel (16-bit scaled by 1/65535)
    root/gt/<id>.png      8-bit mask, foreground where value >= 128
    root/<split>.txt      newline-separated ids

All arrays are float32 CHW in [0, 1]; masks are exactly 0/1.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage
from skimage.draw import polygon as draw_polygon

MODES = ("none", "corrupt_rgb", "corrupt_depth", "distractor_depth")
FAMILIES = ("ellipse", "rectangle", "polygon")


class DatasetError(Exception):
    """Base class for dataset ingestion problems."""


class MissingFileError(DatasetError):
    pass


class ImageFormatError(DatasetError):
    pass


@dataclass
class RgbdSample:
    rgb: np.ndarray
    depth: np.ndarray
    gt: np.ndarray
    id: str
    edge_gt: Optional[np.ndarray] = None
    mode: str = "none"

    @property
    def size(self) -> int:
        return self.gt.shape[-1]


@dataclass
class SynthSpec:
    count: int = 20
    seed: int = 0
    families: tuple = FAMILIES
    texture_noise: float = 0.3
    depth_noise: float = 0.3
    mode: str = "none"
    image_size: int = 64
    # per-sample mode mix, e.g. {"corrupt_rgb": 0.5, "corrupt_depth": 0.5}; overrides ``mode``
    mode_mix: Optional[dict] = None

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("count must be >= 1")
        for name in ("texture_noise", "depth_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        modes = self.mode_mix.keys() if self.mode_mix else [self.mode]
        for m in modes:
            if m not in MODES:
                raise ValueError(f"unknown corruption mode {m!r}; expected one of {MODES}")
        for f in self.families:
            if f not in FAMILIES:
                raise ValueError(f"unknown shape family {f!r}; expected one of {FAMILIES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        return d


# ---------------------------------------------------------------------------
# masks


def edge_gt_from_mask(gt: np.ndarray) -> np.ndarray:
    """Morphological gradient: 3x3 dilation minus 3x3 erosion (outside counts as 0).

    A pixel is an edge iff its 3x3 neighbourhood holds both labels, giving a
    band one pixel wide on each side of the boundary.
    """
    m = np.asarray(gt) > 0.5
    squeeze = m.ndim == 3
    if squeeze:
        m = m[0]
    st = np.ones((3, 3), bool)
    dil = ndimage.binary_dilation(m, st)
    ero = ndimage.binary_erosion(m, st, border_value=0)
    e = (dil & ~ero).astype(np.float32)
    return e[None] if squeeze else e


def _shape_mask(rng: np.random.Generator, family: str, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.35, 0.65, size=2) * s
    theta = rng.uniform(0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    if family == "ellipse":
        a, b = rng.uniform(0.14, 0.3, size=2) * s
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if family == "rectangle":
        a, b = rng.uniform(0.12, 0.28, size=2) * s
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    n = int(rng.integers(5, 9))
    ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    rad = rng.uniform(0.55, 1.0, size=n) * rng.uniform(0.2, 0.34) * s
    rows = cy + rad * np.sin(ang) - 0.5
    cols = cx + rad * np.cos(ang) - 0.5
    m = np.zeros((s, s), bool)
    rr, cc = draw_polygon(rows, cols, shape=(s, s))
    m[rr, cc] = True
    return m


def _random_mask(rng, families, s, lo=0.05, hi=0.5) -> np.ndarray:
    while True:
        fam = families[int(rng.integers(len(families)))]
        m = _shape_mask(rng, fam, s)
        if lo <= m.mean() <= hi:
            return m


def _smooth_noise(rng, s: int, scale: int = 8) -> np.ndarray:
    coarse = rng.standard_normal((scale, scale))
    z = ndimage.zoom(coarse, s / scale, order=1)[:s, :s]
    return z / (np.abs(z).max() + 1e-8)


def _hsv_color(rng) -> np.ndarray:
    h = rng.uniform(0, 1)
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    v, sat = rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)
    p, q, t = v * (1 - sat), v * (1 - f * sat), v * (1 - (1 - f) * sat)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def synth_sample(spec: SynthSpec, index: int, mode: str) -> RgbdSample:
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    gt = _random_mask(rng, spec.families, s)

    # background: desaturated grey texture; salient object: saturated colour
    grey = rng.uniform(0.3, 0.6)
    tex = spec.texture_noise
    bg = grey + 0.15 * tex * _smooth_noise(rng, s)[None] + 0.05 * tex * rng.standard_normal((3, s, s))
    if mode == "corrupt_rgb":
        obj = bg + 0.01 * rng.standard_normal((3, s, s))
    else:
        color = _hsv_color(rng)[:, None, None]
        obj = color + 0.08 * tex * rng.standard_normal((3, s, s))
    rgb = np.where(gt[None], obj, bg)

    # depth: far background plane, object nearer (larger) by a gap >= 0.4
    gy, gx = rng.uniform(-1, 1, size=2)
    yy, xx = np.mgrid[0:s, 0:s] / s - 0.5
    base = 0.2 + 0.1 * (gy * yy + gx * xx)
    dn = spec.depth_noise
    noise = 0.05 * dn * rng.standard_normal((s, s))
    gap = rng.uniform(0.45, 0.6)
    depth = base + noise
    if mode != "corrupt_depth":
        depth = depth + gap * gt
    if mode == "distractor_depth":
        blob = _random_mask(rng, spec.families, s, 0.03, 0.2) & ~ndimage.binary_dilation(gt, iterations=2)
        depth = depth + rng.uniform(0.4, 0.55) * blob

    gt_f = gt.astype(np.float32)[None]
    return RgbdSample(
        rgb=np.clip(rgb, 0, 1).astype(np.float32),
        depth=np.clip(depth, 0, 1).astype(np.float32)[None],
        gt=gt_f,
        edge_gt=edge_gt_from_mask(gt_f),
        id=f"{spec.seed:04d}_{index:05d}",
        mode=mode,
    )


def synth_generate(spec: SynthSpec) -> list:
    """Deterministic list of samples, one salient shape each."""
    spec.validate()
    if spec.mode_mix:
        modes = list(spec.mode_mix)
        weights = np.array([spec.mode_mix[m] for m in modes], dtype=np.float64)
        counts = np.floor(weights / weights.sum() * spec.count).astype(int)
        counts[0] += spec.count - counts.sum()
        plan = [m for m, c in zip(modes, counts) for _ in range(c)]
        np.random.default_rng([spec.seed, 1 << 20]).shuffle(plan)
    else:
        plan = [spec.mode] * spec.count
    return [synth_sample(spec, i, m) for i, m in enumerate(plan)]


# ---------------------------------------------------------------------------
# resampling helpers (numpy, no autodiff)


def resize_bilinear(img: np.ndarray, out: int) -> np.ndarray:
    from .tensor import bilinear_matrix
    h, w = img.shape[-2:]
    if (h, w) == (out, out):
        return img
    my = bilinear_matrix(h, out, np.float64)
    mx = bilinear_matrix(w, out, np.float64)
    return (my @ img.astype(np.float64) @ mx.T).astype(np.float32)


def resize_nearest(img: np.ndarray, out: int) -> np.ndarray:
    h, w = img.shape[-2:]
    ri = np.minimum(((np.arange(out) + 0.5) * h / out).astype(int), h - 1)
    ci = np.minimum(((np.arange(out) + 0.5) * w / out).astype(int), w - 1)
    return img[..., ri[:, None], ci[None, :]]


# ---------------------------------------------------------------------------
# augmentation


def hflip(sample: RgbdSample) -> RgbdSample:
    f = lambda a: None if a is None else np.ascontiguousarray(a[..., ::-1])
    return replace(sample, rgb=f(sample.rgb), depth=f(sample.depth), gt=f(sample.gt), edge_gt=f(sample.edge_gt))


def crop_resize(sample: RgbdSample, top: int, left: int, size: int) -> RgbdSample:
    s = sample.size
    win = lambda a: a[..., top:top + size, left:left + size]
    img = lambda a: resize_bilinear(win(a), s)
    mask = lambda a: None if a is None else resize_nearest(win(a), s)
    return replace(sample, rgb=img(sample.rgb), depth=img(sample.depth), gt=mask(sample.gt),
                   edge_gt=mask(sample.edge_gt))


def augment(sample: RgbdSample, rng: np.random.Generator, crop_fraction: float = 0.9,
            flip_prob: float = 0.5) -> RgbdSample:
    """Joint horizontal flip (p = 0.5) and random crop resized back to full size."""
    if rng.random() < flip_prob:
        sample = hflip(sample)
    s = sample.size
    cs = max(1, int(round(crop_fraction * s)))
    top, left = rng.integers(0, s - cs + 1, size=2)
    return crop_resize(sample, int(top), int(left), cs)


def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Per-sample transform RNG, independent of iteration order or workers."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode())])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xD1CE]).permutation(n)


def stack(samples: Sequence[RgbdSample]) -> dict:
    out = {
        "rgb": np.stack([s.rgb for s in samples]),
        "depth": np.stack([s.depth for s in samples]),
        "gt": np.stack([s.gt for s in samples]),
    }
    edges = [s.edge_gt if s.edge_gt is not None else edge_gt_from_mask(s.gt) for s in samples]
    out["edge_gt"] = np.stack(edges)
    return out


# ---------------------------------------------------------------------------
# disk I/O


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def save_dataset(samples: Sequence[RgbdSample], root, list_name: str = "all.txt",
                 depth_bits: int = 16) -> Path:
    root = Path(root)
    for sub in ("rgb", "depth", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(_to_u8(s.rgb.transpose(1, 2, 0))).save(root / "rgb" / f"{s.id}.png")
        d = s.depth[0]
        if depth_bits == 16:
            Image.fromarray(np.clip(np.round(d * 65535.0), 0, 65535).astype(np.uint16)).save(
                root / "depth" / f"{s.id}.png")
        else:
            Image.fromarray(_to_u8(d)).save(root / "depth" / f"{s.id}.png")
        Image.fromarray(_to_u8(s.gt[0])).save(root / "gt" / f"{s.id}.png")
    write_list(root / list_name, [s.id for s in samples])
    return root


def write_list(path, ids: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids))


def read_list(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"split list not found: {path}")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def _open(path: Path) -> Image.Image:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from None
    return img


def _find(root: Path, sub: str, name: str) -> Path:
    for ext in (".png", ".jpg", ".jpeg", ".bmp"):
        p = root / sub / f"{name}{ext}"
        if p.is_file():
            return p
    raise MissingFileError(f"sample {name!r}: no {sub}/ counterpart under {root}")


def read_gray(path: Path, size: int | None = None) -> np.ndarray:
    """Single-channel image in [0, 1]; 16-bit data scaled by 1/65535."""
    img = _open(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        a = np.asarray(img, dtype=np.float64) / 65535.0
    else:
        a = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    a = a.astype(np.float32)
    return a if size is None else resize_bilinear(a, size)


def load_dataset(root, list_file=None, image_size: int | None = None) -> list:
    """Read ``root/{rgb,depth,gt}`` for the ids in ``list_file`` (default: all gt files)."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"dataset directory not found: {root}")
    if list_file is None:
        ids = sorted(p.stem for p in (root / "gt").glob("*.png"))
    else:
        lf = Path(list_file)
        ids = read_list(lf if lf.is_absolute() or lf.exists() else root / lf)
    samples = []
    for name in ids:
        rgb_img = _open(_find(root, "rgb", name)).convert("RGB")
        rgb = np.asarray(rgb_img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        depth = read_gray(_find(root, "depth", name))[None]
        gt = (read_gray(_find(root, "gt", name)) >= 0.5).astype(np.float32)[None]
        if image_size is not None:
            rgb = resize_bilinear(rgb, image_size)
            depth = resize_bilinear(depth, image_size)
            gt = resize_nearest(gt, image_size)
        if not (rgb.shape[-2:] == depth.shape[-2:] == gt.shape[-2:]):
            raise ImageFormatError(f"sample {name!r}: rgb/depth/gt sizes differ; pass image_size to resize")
        samples.append(RgbdSample(rgb=rgb, depth=depth, gt=gt, edge_gt=edge_gt_from_mask(gt), id=name))
    return samples


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
