"""Image codecs, resizing, dataset layout and synthetic degradation.

A paired dataset lives under one root with two flat directories::

    root/raw/<stem>.png         degraded inputs
    root/reference/<stem>.png   matching clean references

Images are exchanged as ``(H, W, 3)`` float64 arrays in ``[0, 1]``.
Saving quantizes round-half-up to 8-bit PNG; loading accepts 8-bit RGB
(palette images are expanded) and 16-bit RGB PNGs, the latter decoded at
full precision.
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .physics import AmbientLight, AttenuationParams, degrade

RAW_DIR = "raw"
REFERENCE_DIR = "reference"
MANIFEST_NAME = "manifest.csv"

MANIFEST_FIELDS = (
    "name",
    "ambient_r", "ambient_g", "ambient_b",
    "beta_d_r", "beta_d_g", "beta_d_b",
    "beta_b_r", "beta_b_g", "beta_b_b",
    "depth_min", "depth_max", "depth_mode",
)


class DatasetError(ValueError):
    """Raised for unreadable images or malformed dataset layouts."""


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _decode_png_rgb16(data: bytes, width: int, height: int, interlace: int) -> np.ndarray:
    """Exact decode of a 16-bit-per-channel RGB PNG (Pillow downsamples these)."""
    if interlace != 0:
        raise DatasetError("interlaced 16-bit PNGs are not supported")
    idat = b""
    offset = 8
    while offset < len(data):
        (length,) = struct.unpack(">I", data[offset : offset + 4])
        tag = data[offset + 4 : offset + 8]
        if tag == b"IDAT":
            idat += data[offset + 8 : offset + 8 + length]
        offset += 12 + length
    raw = zlib.decompress(idat)
    bpp = 6  # three 16-bit samples
    stride = width * bpp
    out = bytearray()
    prev = bytearray(stride)
    pos = 0
    for _ in range(height):
        filter_type = raw[pos]
        line = bytearray(raw[pos + 1 : pos + 1 + stride])
        pos += 1 + stride
        if filter_type == 1:
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif filter_type == 2:
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif filter_type == 3:
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + (left + prev[i]) // 2) & 0xFF
        elif filter_type == 4:
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                upleft = prev[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + _paeth(left, prev[i], upleft)) & 0xFF
        elif filter_type != 0:
            raise DatasetError(f"unknown PNG filter type {filter_type}")
        out += line
        prev = line
    pixels = np.frombuffer(bytes(out), dtype=">u2").reshape(height, width, 3)
    return pixels.astype(np.float64) / 65535.0


def load_image(path: str | Path) -> np.ndarray:
    """Load a 3-channel PNG as float64 in [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if data[:8] == b"\x89PNG\r\n\x1a\n" and len(data) >= 33:
        width, height, depth, color, _, _, interlace = struct.unpack(
            ">IIBBBBB", data[16:29]
        )
        if depth == 16:
            if color != 2:
                raise DatasetError(f"{path}: 16-bit PNG is not 3-channel RGB")
            return _decode_png_rgb16(data, width, height, interlace)
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode != "RGB":
                raise DatasetError(f"{path}: expected 3-channel image, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float64)
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    return arr / 255.0


def save_image(img: np.ndarray, path: str | Path) -> Path:
    """Quantize round-half-up to 8 bits and write a PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DatasetError(f"image must have shape (H, W, 3), got {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")
    return path


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def resize(img: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel (align_corners=False) sampling."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DatasetError(f"expected (H, W, C) image, got {img.shape}")
    out_h, out_w = (size, size) if isinstance(size, int) else size
    in_h, in_w = img.shape[:2]
    if out_h == in_h and out_w == in_w:
        return img.copy()

    def axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1.0 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1.0 - fx) + img[y1][:, x1] * fx
    return top * (1.0 - fy) + bottom * fy


# ---------------------------------------------------------------------------
# dataset layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairedDataset:
    """Stem-matched (raw, reference) PNG pairs under one root."""

    root: Path
    pairs: tuple[tuple[Path, Path], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def stems(self) -> tuple[str, ...]:
        return tuple(raw.stem for raw, _ in self.pairs)

    def load_pair(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        raw_path, ref_path = self.pairs[index]
        return load_image(raw_path), load_image(ref_path)


def discover_pairs(root: str | Path) -> PairedDataset:
    """Build a dataset from ``root/raw`` and ``root/reference``."""
    root = Path(root)
    raw_dir = root / RAW_DIR
    ref_dir = root / REFERENCE_DIR
    if not raw_dir.is_dir() or not ref_dir.is_dir():
        raise DatasetError(f"{root} must contain '{RAW_DIR}/' and '{REFERENCE_DIR}/'")
    pairs = []
    for raw_path in sorted(raw_dir.glob("*.png")):
        ref_path = ref_dir / raw_path.name
        if not ref_path.exists():
            raise DatasetError(f"no reference for {raw_path.name}")
        pairs.append((raw_path, ref_path))
    if not pairs:
        raise DatasetError(f"no image pairs under {root}")
    return PairedDataset(root=root, pairs=tuple(pairs))


def make_splits(
    dataset: PairedDataset, train_fraction: float, seed: int
) -> tuple[PairedDataset, PairedDataset]:
    """Seeded shuffle, then a disjoint, exhaustive train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError("train_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_train = int(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise DatasetError(f"{n} pairs cannot be split at fraction {train_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    train_pairs = tuple(dataset.pairs[i] for i in order[:n_train])
    test_pairs = tuple(dataset.pairs[i] for i in order[n_train:])
    return (
        PairedDataset(root=dataset.root, pairs=train_pairs),
        PairedDataset(root=dataset.root, pairs=test_pairs),
    )


# ---------------------------------------------------------------------------
# synthetic degradation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthesisConfig:
    """Sampling ranges for the degradation parameters.

    Ambient light is drawn per channel from ``ambient_range`` and sorted
    so blue >= green >= red.  Direct attenuation is drawn per channel
    from the ``beta_d_*`` ranges (red attenuates fastest);
    backscatter attenuation equals it unless ``beta_b_*`` ranges are
    given.  Depth is one scalar per image drawn from ``depth_range``
    (``depth_mode="ramp"`` instead ramps it linearly top to bottom
    between two draws).
    """

    ambient_range: tuple[float, float] = (0.5, 0.85)
    beta_d_red: tuple[float, float] = (0.3, 0.55)
    beta_d_green: tuple[float, float] = (0.18, 0.4)
    beta_d_blue: tuple[float, float] = (0.1, 0.3)
    beta_b_red: tuple[float, float] | None = None
    beta_b_green: tuple[float, float] | None = None
    beta_b_blue: tuple[float, float] | None = None
    depth_range: tuple[float, float] = (1.0, 3.0)
    depth_mode: str = "scalar"
    seed: int = 0

    def __post_init__(self) -> None:
        for name, (lo, hi) in (
            ("ambient_range", self.ambient_range),
            ("beta_d_red", self.beta_d_red),
            ("beta_d_green", self.beta_d_green),
            ("beta_d_blue", self.beta_d_blue),
            ("depth_range", self.depth_range),
        ):
            if not (math.isfinite(lo) and math.isfinite(hi) and 0.0 <= lo <= hi):
                raise DatasetError(f"invalid {name}: ({lo}, {hi})")
        if self.ambient_range[1] > 1.0:
            raise DatasetError("ambient light must stay within [0, 1]")
        if self.depth_mode not in ("scalar", "ramp"):
            raise DatasetError(f"unknown depth_mode {self.depth_mode!r}")


@dataclass(frozen=True)
class DegradationSample:
    """Parameters drawn for one image, as recorded in the manifest."""

    name: str
    ambient: tuple[float, float, float]
    beta_d: tuple[float, float, float]
    beta_b: tuple[float, float, float]
    depth_min: float
    depth_max: float
    depth_mode: str

    def depth_field(self, height: int) -> float | np.ndarray:
        if self.depth_mode == "scalar":
            return self.depth_min
        if height == 1:
            return self.depth_min
        ramp = np.linspace(self.depth_min, self.depth_max, height)
        return np.repeat(ramp[:, None], 1, axis=1)


def _draw_sample(name: str, cfg: SynthesisConfig, rng: np.random.Generator) -> DegradationSample:
    lo, hi = cfg.ambient_range
    ambient = np.sort(rng.uniform(lo, hi, size=3))  # red <= green <= blue
    beta_d = np.array(
        [
            rng.uniform(*cfg.beta_d_red),
            rng.uniform(*cfg.beta_d_green),
            rng.uniform(*cfg.beta_d_blue),
        ]
    )
    if cfg.beta_b_red is None:
        beta_b = beta_d.copy()
    else:
        beta_b = np.array(
            [
                rng.uniform(*cfg.beta_b_red),
                rng.uniform(*(cfg.beta_b_green or cfg.beta_b_red)),
                rng.uniform(*(cfg.beta_b_blue or cfg.beta_b_red)),
            ]
        )
    if cfg.depth_mode == "scalar":
        d = float(rng.uniform(*cfg.depth_range))
        depth_min = depth_max = d
    else:
        d0, d1 = np.sort(rng.uniform(*cfg.depth_range, size=2))
        depth_min, depth_max = float(d0), float(d1)
    return DegradationSample(
        name=name,
        ambient=(float(ambient[0]), float(ambient[1]), float(ambient[2])),
        beta_d=tuple(float(v) for v in beta_d),
        beta_b=tuple(float(v) for v in beta_b),
        depth_min=depth_min,
        depth_max=depth_max,
        depth_mode=cfg.depth_mode,
    )


def apply_sample(clean: np.ndarray, sample: DegradationSample) -> np.ndarray:
    """Degrade one clean image with recorded parameters."""
    depth = sample.depth_field(clean.shape[0])
    if isinstance(depth, np.ndarray):
        depth = np.broadcast_to(depth, clean.shape[:2]).copy()
    params = AttenuationParams(
        beta_d=np.array(sample.beta_d),
        beta_b=np.array(sample.beta_b),
        depth=depth,
    )
    ambient = AmbientLight(rgb=np.array(sample.ambient))
    return degrade(clean, ambient, params)


def write_manifest(path: Path, samples: list[DegradationSample]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            row = [s.name]
            row += [f"{v:.17g}" for v in s.ambient]
            row += [f"{v:.17g}" for v in s.beta_d]
            row += [f"{v:.17g}" for v in s.beta_b]
            row += [f"{s.depth_min:.17g}", f"{s.depth_max:.17g}", s.depth_mode]
            writer.writerow(row)


def read_manifest(path: str | Path) -> dict[str, DegradationSample]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    samples: dict[str, DegradationSample] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise DatasetError(f"unexpected manifest header in {path}")
        for row in reader:
            samples[row["name"]] = DegradationSample(
                name=row["name"],
                ambient=(float(row["ambient_r"]), float(row["ambient_g"]), float(row["ambient_b"])),
                beta_d=(float(row["beta_d_r"]), float(row["beta_d_g"]), float(row["beta_d_b"])),
                beta_b=(float(row["beta_b_r"]), float(row["beta_b_g"]), float(row["beta_b_b"])),
                depth_min=float(row["depth_min"]),
                depth_max=float(row["depth_max"]),
                depth_mode=row["depth_mode"],
            )
    return samples


def synth_degrade(
    clean_images: dict[str, np.ndarray],
    out_root: str | Path,
    cfg: SynthesisConfig,
) -> PairedDataset:
    """Degrade clean images into a paired dataset with a parameter manifest.

    The same config (including its seed) reproduces the dataset bitwise.
    """
    if not clean_images:
        raise DatasetError("no clean images to degrade")
    out_root = Path(out_root)
    (out_root / RAW_DIR).mkdir(parents=True, exist_ok=True)
    (out_root / REFERENCE_DIR).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    samples = []
    pairs = []
    for name in sorted(clean_images):
        clean = np.asarray(clean_images[name], dtype=np.float64)
        # degrade the quantized reference so the manifest plus the written
        # reference file reproduce the raw image exactly
        clean = np.floor(np.clip(clean, 0.0, 1.0) * 255.0 + 0.5) / 255.0
        sample = _draw_sample(name, cfg, rng)
        raw = apply_sample(clean, sample)
        raw_path = save_image(raw, out_root / RAW_DIR / f"{name}.png")
        ref_path = save_image(clean, out_root / REFERENCE_DIR / f"{name}.png")
        samples.append(sample)
        pairs.append((raw_path, ref_path))
    write_manifest(out_root / MANIFEST_NAME, samples)
    return PairedDataset(root=out_root, pairs=tuple(pairs))


# ---------------------------------------------------------------------------
# procedural clean images
# ---------------------------------------------------------------------------


def synthesize_clean_images(
    count: int, size: int, seed: int = 0
) -> dict[str, np.ndarray]:
    """Colorful procedural scenes: gradients, solid shapes, fine texture.

    Deterministic in ``seed``; useful wherever paired data is needed
    without shipping photographs.  Every scene carries per-pixel texture:
    sharpness scores built on block max/min gradient ratios are only
    meaningful when flat regions have a real gradient floor, otherwise
    they measure leftover model noise instead of structure.  Mean
    luminance and contrast are kept moderate so block Michelson contrast
    stays in the range where the contrast score still rewards
    restoration.
    """
    if count <= 0 or size < 8:
        raise DatasetError("need count >= 1 and size >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images: dict[str, np.ndarray] = {}
    for i in range(count):
        base = rng.uniform(0.1, 0.9, size=(4, 4, 3))
        img = resize(base, size)
        for _ in range(rng.integers(2, 6)):
            color = rng.random(3)
            if rng.random() < 0.5:
                cy, cx = rng.uniform(0, size, size=2)
                radius = rng.uniform(size / 10, size / 3)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
            else:
                y0, x0 = rng.integers(0, size, size=2)
                h = int(rng.integers(size // 8, size // 2 + 1))
                w = int(rng.integers(size // 8, size // 2 + 1))
                mask = np.zeros((size, size), dtype=bool)
                mask[y0 : y0 + h, x0 : x0 + w] = True
            img[mask] = color
        texture = rng.uniform(-1.0, 1.0, size=(size, size, 1))
        img = 0.22 + 0.30 * img + 0.15 * texture
        images[f"img{i:04d}"] = np.clip(img, 0.0, 1.0)
    return images


# ---------------------------------------------------------------------------
# tensor bridging
# ---------------------------------------------------------------------------


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array -> (3, H, W) float32 tensor."""
    img = np.asarray(img, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor -> (H, W, 3) float64 array clipped to [0, 1]."""
    arr = tensor.detach().cpu().numpy().astype(np.float64)
    return np.clip(arr.transpose(1, 2, 0), 0.0, 1.0)


def load_batch(
    dataset: PairedDataset, indices: list[int] | np.ndarray
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack (raw, reference) pairs into float32 batches."""
    raws, refs = [], []
    for i in indices:
        raw, ref = dataset.load_pair(int(i))
        raws.append(to_tensor(raw))
        refs.append(to_tensor(ref))
    return torch.stack(raws), torch.stack(refs)
