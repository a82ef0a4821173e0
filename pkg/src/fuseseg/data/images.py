"""Image containers, PNG I/O, palettes and color-space transforms.

Images are float32 arrays in [0, 1]: gray images are (H, W), color images
(H, W, 3).  Fusion itself runs on the luma channel; color conversion uses
full-range BT.601 so a fused luma plane can be recombined with the visible
chroma planes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PilImage
from PIL import UnidentifiedImageError

from ..errors import ConfigError, DecodeError, IoError, ShapeMismatch, UnknownColor

GRAY = "GRAY"
RGB = "RGB"
YCBCR = "YCBCR"

MIN_SIDE = 8


@dataclass
class Image:
    """A single image plane (or 3-channel stack) in [0, 1]."""

    pixels: np.ndarray
    color_space: str = GRAY

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.validate()

    def validate(self) -> None:
        p = self.pixels
        if p.ndim == 2:
            if self.color_space != GRAY:
                raise ShapeMismatch(f"2-D pixels require GRAY, got {self.color_space}")
        elif p.ndim == 3 and p.shape[2] == 3:
            if self.color_space not in (RGB, YCBCR):
                raise ShapeMismatch(f"3-channel pixels require RGB/YCBCR, got {self.color_space}")
        else:
            raise ShapeMismatch(f"unsupported pixel shape {p.shape}")
        if p.shape[0] < MIN_SIDE or p.shape[1] < MIN_SIDE:
            raise ShapeMismatch(f"image sides must be >= {MIN_SIDE}, got {p.shape[:2]}")
        if not np.isfinite(p).all():
            raise ShapeMismatch("image contains non-finite values")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ShapeMismatch("image values outside [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class AlignedPair:
    """A registered visible/infrared pair sharing spatial dimensions."""

    visible: Image
    infrared: Image
    pair_id: str = ""

    def __post_init__(self) -> None:
        if self.infrared.pixels.ndim != 2:
            raise ShapeMismatch("infrared image must be single-channel")
        if self.visible.pixels.shape[:2] != self.infrared.pixels.shape[:2]:
            raise ShapeMismatch(
                f"pair {self.pair_id!r}: visible {self.visible.pixels.shape[:2]} vs "
                f"infrared {self.infrared.pixels.shape[:2]}"
            )


@dataclass
class LabelMap:
    """Per-pixel class ids with an ignore index for unsupervised pixels."""

    classes: np.ndarray
    num_classes: int
    ignore_index: int = 255

    def __post_init__(self) -> None:
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        c = self.classes
        if c.ndim != 2:
            raise ShapeMismatch(f"label map must be 2-D, got shape {c.shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        bad = (c != self.ignore_index) & ((c < 0) | (c >= self.num_classes))
        if bad.any():
            raise ShapeMismatch(
                f"label values outside [0, {self.num_classes}) and != ignore {self.ignore_index}"
            )


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG (or other PIL-readable file) to float32 [0, 1]."""
    p = Path(path)
    if not p.is_file():
        raise IoError(f"image file not found: {p}")
    try:
        with PilImage.open(p) as im:
            im.load()
            if im.mode in ("I;16", "I"):
                arr = np.asarray(im, dtype=np.float32) / 65535.0
            else:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB" if ("P" in im.mode or len(im.getbands()) > 1) else "L")
                arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image {p}: {exc}") from exc
    return np.clip(arr, 0.0, 1.0)


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    """Write a [0, 1] array as an 8-bit PNG."""
    arr = np.asarray(pixels, dtype=np.float64)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PilImage.fromarray(q).save(Path(path))


def load_pair(visible_path: str | Path, infrared_path: str | Path, pair_id: str = "") -> AlignedPair:
    """Load a registered pair; multi-channel infrared collapses to its mean."""
    vis = load_image(visible_path)
    ir = load_image(infrared_path)
    if ir.ndim == 3:
        ir = ir.mean(axis=2)
    visible = Image(vis, RGB if vis.ndim == 3 else GRAY)
    infrared = Image(ir, GRAY)
    return AlignedPair(visible=visible, infrared=infrared, pair_id=pair_id)


# ---------------------------------------------------------------------------
# Palettes and label maps


def default_palette(num_classes: int, ignore_index: int = 255) -> dict[tuple[int, int, int], int]:
    """Deterministic class colors: background black, ignore white."""
    base = [
        (0, 0, 0),
        (228, 26, 28),
        (55, 126, 184),
        (77, 175, 74),
        (152, 78, 163),
        (255, 127, 0),
        (255, 255, 51),
        (166, 86, 40),
        (247, 129, 191),
        (153, 153, 153),
        (66, 146, 198),
        (165, 15, 21),
        (35, 139, 69),
        (106, 81, 163),
        (217, 72, 1),
        (82, 82, 82),
    ]
    if num_classes > len(base):
        rng = np.random.Generator(np.random.PCG64(12345))
        while len(base) < num_classes:
            color = tuple(int(v) for v in rng.integers(10, 245, size=3))
            if color not in base and color != (255, 255, 255):
                base.append(color)
    palette = {base[c]: c for c in range(num_classes)}
    palette[(255, 255, 255)] = ignore_index
    return palette


def save_palette(path: str | Path, palette: dict[tuple[int, int, int], int]) -> None:
    encoded = {",".join(str(v) for v in color): cls for color, cls in palette.items()}
    Path(path).write_text(json.dumps(encoded, indent=2, sort_keys=True) + "\n")


def load_palette(path: str | Path) -> dict[tuple[int, int, int], int]:
    p = Path(path)
    if not p.is_file():
        raise IoError(f"palette file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DecodeError(f"palette {p} is not valid JSON: {exc}") from exc
    palette: dict[tuple[int, int, int], int] = {}
    for key, cls in raw.items():
        parts = key.split(",")
        if len(parts) != 3:
            raise DecodeError(f"palette key {key!r} is not 'R,G,B'")
        try:
            color = tuple(int(v) for v in parts)
        except ValueError as exc:
            raise DecodeError(f"palette key {key!r} is not 'R,G,B'") from exc
        palette[color] = int(cls)
    return palette


def render_label(label: LabelMap, palette: dict[tuple[int, int, int], int]) -> np.ndarray:
    """Expand class ids to an RGB uint8 array using the palette."""
    inverse: dict[int, tuple[int, int, int]] = {}
    for color, cls in palette.items():
        inverse.setdefault(cls, color)
    missing = sorted(set(np.unique(label.classes).tolist()) - set(inverse))
    if missing:
        raise UnknownColor(f"no palette color for class ids {missing}")
    out = np.zeros((*label.classes.shape, 3), dtype=np.uint8)
    for cls, color in inverse.items():
        out[label.classes == cls] = color
    return out


def load_label(
    path: str | Path,
    num_classes: int,
    palette: dict[tuple[int, int, int], int],
    ignore_index: int = 255,
) -> LabelMap:
    """Map a color-coded label PNG back to class ids via the palette."""
    p = Path(path)
    if not p.is_file():
        raise IoError(f"label file not found: {p}")
    try:
        with PilImage.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.int64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode label {p}: {exc}") from exc
    flat = arr.reshape(-1, 3)
    codes = flat[:, 0] * 65536 + flat[:, 1] * 256 + flat[:, 2]
    lut = {r * 65536 + g * 256 + b: cls for (r, g, b), cls in palette.items()}
    classes = np.empty(codes.shape[0], dtype=np.int64)
    uniq = np.unique(codes)
    unknown = []
    for code in uniq.tolist():
        cls = lut.get(code)
        if cls is None:
            unknown.append((code >> 16 & 255, code >> 8 & 255, code & 255))
        else:
            classes[codes == code] = cls
    if unknown:
        raise UnknownColor(f"label {p} contains colors not in palette: {unknown[:8]}")
    return LabelMap(classes.reshape(arr.shape[:2]), num_classes, ignore_index)


# ---------------------------------------------------------------------------
# Color transforms (full-range BT.601)


def rgb_to_ycbcr(image: Image) -> Image:
    if image.pixels.ndim != 3 or image.color_space != RGB:
        raise ShapeMismatch("rgb_to_ycbcr expects an RGB image")
    r = image.pixels[..., 0].astype(np.float64)
    g = image.pixels[..., 1].astype(np.float64)
    b = image.pixels[..., 2].astype(np.float64)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 0.5 + (b - y) / 1.772
    cr = 0.5 + (r - y) / 1.402
    out = np.stack([y, cb, cr], axis=2)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32), YCBCR)


def ycbcr_to_rgb(image: Image) -> Image:
    if image.pixels.ndim != 3 or image.color_space != YCBCR:
        raise ShapeMismatch("ycbcr_to_rgb expects a YCBCR image")
    y = image.pixels[..., 0].astype(np.float64)
    cb = image.pixels[..., 1].astype(np.float64) - 0.5
    cr = image.pixels[..., 2].astype(np.float64) - 0.5
    r = y + 1.402 * cr
    g = y - (0.114 * 1.772 / 0.587) * cb - (0.299 * 1.402 / 0.587) * cr
    b = y + 1.772 * cb
    out = np.stack([r, g, b], axis=2)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32), RGB)


def luma(image: Image) -> np.ndarray:
    """The fusion working plane: gray images pass through, RGB takes Y."""
    if image.pixels.ndim == 2:
        return image.pixels
    return rgb_to_ycbcr(image).pixels[..., 0]
