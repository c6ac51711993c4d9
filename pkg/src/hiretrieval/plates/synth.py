"""Synthetic licence-plate rendering and scene composition.

Plates are plain coloured rectangles with a single line of monospaced text
in the middle band, optional small text in the top and bottom bands, and an
optional icon in the top-left corner.  Distortions are applied in a fixed
order: tilt, blur, resolution drop, shadow.  Images are ``H x W x 3`` uint8
arrays; everything is a pure function of the ``PlateSpec``, so a seed fixes the pixels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from ..fileio import write_ppm
from .font import CHARSET, GLYPH_COLS, GLYPH_ROWS, ICON_IDS, ICONS, render_text_mask, text_width

TOP_BAND = 0.2
BOTTOM_BAND = 0.2
MAIN_TEXT_HEIGHT = 0.45
DEFAULT_KEEP_FRACTION = 0.6

DARK_TEXT = ((0, 0, 0), (20, 30, 90), (10, 70, 30), (110, 10, 10), (40, 40, 40))
LIGHT_BG = ((255, 255, 255), (250, 240, 190), (225, 225, 225), (200, 225, 255), (255, 220, 80))
LIGHT_TEXT = ((255, 255, 255), (250, 220, 40), (230, 230, 230))
DARK_BG = ((20, 40, 120), (0, 0, 0), (15, 90, 45), (130, 20, 20), (60, 60, 60))


class PlateRenderError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be an integer")
        if self.x < 0 or self.y < 0:
            raise ValueError("box origin must be non-negative")
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box must have positive width and height")

    @property
    def area(self) -> int:
        return self.w * self.h

    def fits(self, width: int, height: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class Shadow:
    offset: float  # fraction of the width where the shadow edge sits
    opacity: float


@dataclass(frozen=True)
class PlateSpec:
    text: str
    width: int
    height: int
    bg_color: tuple[int, int, int] = (255, 255, 255)
    text_color: tuple[int, int, int] = (0, 0, 0)
    tilt_deg: float = 0.0
    blur_sigma: float = 0.0
    downscale_factor: float = 1.0
    shadow: Shadow | None = None
    top_text: str | None = None
    bottom_text: str | None = None
    icon: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not 5 <= len(self.text) <= 8 or any(c not in CHARSET for c in self.text):
            raise ValueError(f"plate text {self.text!r} must be 5-8 characters from [A-Z0-9]")
        for extra in (self.top_text, self.bottom_text):
            if extra is not None and any(c not in CHARSET for c in extra):
                raise ValueError(f"decoration text {extra!r} must use [A-Z0-9]")
        if self.width < 1 or self.height < 1:
            raise ValueError("plate size must be positive")
        if not -15.0 <= self.tilt_deg <= 15.0:
            raise ValueError("tilt must lie in [-15, 15] degrees")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be non-negative")
        if not 0 < self.downscale_factor <= 1:
            raise ValueError("downscale_factor must lie in (0, 1]")
        if self.icon is not None and self.icon not in ICONS:
            raise ValueError(f"unknown icon {self.icon!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bg_color"] = list(self.bg_color)
        d["text_color"] = list(self.text_color)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlateSpec":
        d = dict(d)
        d["bg_color"] = tuple(d["bg_color"])
        d["text_color"] = tuple(d["text_color"])
        if d.get("shadow") is not None:
            d["shadow"] = Shadow(**d["shadow"])
        return cls(**d)


@dataclass(frozen=True)
class PlateConfig:
    """Sampling distributions for :func:`random_spec`."""

    p_blur: float = 0.5
    p_tilt: float = 0.5
    p_shadow: float = 0.3
    p_top_text: float = 0.4
    p_bottom_text: float = 0.4
    p_icon: float = 0.3
    p_downscale: float = 0.3
    dark_text_weight: float = 0.7
    charset: str = CHARSET
    length_range: tuple[int, int] = (5, 8)
    height_range: tuple[int, int] = (48, 96)
    aspect_range: tuple[float, float] = (2.6, 4.5)
    max_tilt: float = 15.0
    blur_range: tuple[float, float] = (0.5, 2.5)
    downscale_range: tuple[float, float] = (0.4, 0.9)

    def __post_init__(self):
        for name in ("p_blur", "p_tilt", "p_shadow", "p_top_text", "p_bottom_text", "p_icon", "p_downscale", "dark_text_weight"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("length_range", "height_range", "aspect_range", "blur_range", "downscale_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be an ordered pair of positive numbers")
        if self.length_range[0] < 5 or self.length_range[1] > 8:
            raise ValueError("plate text length must stay within 5-8 characters")
        if self.downscale_range[1] > 1:
            raise ValueError("downscale factors must not exceed 1")
        if not 0 <= self.max_tilt <= 15:
            raise ValueError("max_tilt must lie in [0, 15] degrees")
        if not self.charset or any(c not in CHARSET for c in self.charset):
            raise ValueError("charset must be a non-empty subset of [A-Z0-9]")

    @classmethod
    def clean(cls, **overrides) -> "PlateConfig":
        base = dict(p_blur=0.0, p_tilt=0.0, p_shadow=0.0, p_top_text=0.0, p_bottom_text=0.0, p_icon=0.0, p_downscale=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlateConfig":
        known = set(cls.__dataclass_fields__)
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
        return cls(**d)


def _pick(rng: np.random.Generator, options):
    return tuple(int(c) for c in options[int(rng.integers(len(options)))])


def random_spec(rng: np.random.Generator, config: PlateConfig = PlateConfig()) -> PlateSpec:
    """Draw a plate description; every field comes from ``rng`` in a fixed order."""
    lo, hi = config.length_range
    n = int(rng.integers(lo, hi + 1))
    chars = config.charset
    text = "".join(chars[int(i)] for i in rng.integers(len(chars), size=n))
    height = int(rng.integers(config.height_range[0], config.height_range[1] + 1))
    aspect = float(rng.uniform(*config.aspect_range))
    min_width = text_width(n, 1) + 8
    width = max(int(round(height * aspect)), min_width)

    dark = bool(rng.random() < config.dark_text_weight)
    if dark:
        text_color, bg_color = _pick(rng, DARK_TEXT), _pick(rng, LIGHT_BG)
    else:
        text_color, bg_color = _pick(rng, LIGHT_TEXT), _pick(rng, DARK_BG)

    def maybe(p: float) -> bool:
        return bool(rng.random() < p)

    # one uniform draw per field even when the field is off keeps the stream aligned
    tilt = float(rng.uniform(-config.max_tilt, config.max_tilt))
    blur = float(rng.uniform(*config.blur_range))
    down = float(rng.uniform(*config.downscale_range))
    shadow = Shadow(offset=float(rng.uniform(0.2, 0.8)), opacity=float(rng.uniform(0.2, 0.6)))
    top = "".join(chars[int(i)] for i in rng.integers(len(chars), size=int(rng.integers(3, 9))))
    bottom = "".join(chars[int(i)] for i in rng.integers(len(chars), size=int(rng.integers(3, 9))))
    icon = ICON_IDS[int(rng.integers(len(ICON_IDS)))]
    seed = int(rng.integers(2**31 - 1))
    return PlateSpec(
        text=text,
        width=width,
        height=height,
        bg_color=bg_color,
        text_color=text_color,
        tilt_deg=tilt if maybe(config.p_tilt) else 0.0,
        blur_sigma=blur if maybe(config.p_blur) else 0.0,
        downscale_factor=down if maybe(config.p_downscale) else 1.0,
        shadow=shadow if maybe(config.p_shadow) else None,
        top_text=top if maybe(config.p_top_text) else None,
        bottom_text=bottom if maybe(config.p_bottom_text) else None,
        icon=icon if maybe(config.p_icon) else None,
        seed=seed,
    )


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling; returns float64."""
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[:2]
    if (w, h) == (out_w, out_h):
        return src.copy()

    def coords(n_out: int, n_in: int):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        x0 = np.floor(x).astype(np.int64)
        x1 = np.minimum(x0 + 1, n_in - 1)
        return x0, x1, x - x0

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    fx = fx[None, :, None] if src.ndim == 3 else fx[None, :]
    fy = fy[:, None, None] if src.ndim == 3 else fy[:, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def main_text_scale(spec: PlateSpec) -> int:
    margin = max(2, int(0.05 * spec.width))
    by_height = int(MAIN_TEXT_HEIGHT * spec.height) // GLYPH_ROWS
    n = len(spec.text)
    by_width = (spec.width - 2 * margin) // ((GLYPH_COLS + 1) * n - 1)
    return min(by_height, by_width)


def text_layout(spec: PlateSpec) -> tuple[int, int, int]:
    """(scale, x, y) of the main text's top-left corner on the clean plate."""
    scale = main_text_scale(spec)
    if scale < 1:
        raise PlateRenderError(f"text {spec.text!r} does not fit a {spec.width}x{spec.height} plate")
    tw = text_width(len(spec.text), scale)
    th = GLYPH_ROWS * scale
    x = (spec.width - tw) // 2
    y = (spec.height - th) // 2
    return scale, x, y


def _stamp(canvas: np.ndarray, mask: np.ndarray, x: int, y: int, color) -> None:
    h, w = canvas.shape[:2]
    mh, mw = mask.shape
    x1, y1 = min(w, x + mw), min(h, y + mh)
    if x1 <= x or y1 <= y:
        return
    region = mask[: y1 - y, : x1 - x]
    canvas[y:y1, x:x1][region] = color


def _band_text(canvas: np.ndarray, text: str, band_top: int, band_h: int, color) -> None:
    scale = max(1, int(0.75 * band_h) // GLYPH_ROWS)
    w = canvas.shape[1]
    fit = max(0, (w - 4 + scale) // ((GLYPH_COLS + 1) * scale))
    text = text[:fit]
    if not text:
        return
    mask = render_text_mask(text, scale)
    x = (w - mask.shape[1]) // 2
    y = band_top + (band_h - mask.shape[0]) // 2
    _stamp(canvas, mask, x, max(band_top, y), color)


def render_clean(spec: PlateSpec) -> np.ndarray:
    """Background, main text and decorations without any distortion."""
    h, w = spec.height, spec.width
    canvas = np.empty((h, w, 3), dtype=np.uint8)
    canvas[:] = spec.bg_color
    scale, x, y = text_layout(spec)
    _stamp(canvas, render_text_mask(spec.text, scale), x, y, spec.text_color)
    top_h = int(TOP_BAND * h)
    bottom_h = int(BOTTOM_BAND * h)
    if spec.top_text:
        _band_text(canvas, spec.top_text, 0, top_h, spec.text_color)
    if spec.bottom_text:
        _band_text(canvas, spec.bottom_text, h - bottom_h, bottom_h, spec.text_color)
    if spec.icon:
        iscale = max(1, int(0.75 * top_h) // 7)
        icon = np.kron(ICONS[spec.icon], np.ones((iscale, iscale), dtype=bool)).astype(bool)
        margin = max(2, int(0.03 * w))
        _stamp(canvas, icon, margin, max(0, (top_h - icon.shape[0]) // 2), spec.text_color)
    return canvas


def apply_tilt(img: np.ndarray, degrees: float, fill) -> np.ndarray:
    if degrees == 0:
        return img
    out = np.empty(img.shape, dtype=np.float64)
    for c in range(3):
        out[..., c] = ndimage.rotate(
            img[..., c].astype(np.float64), degrees, reshape=False, order=1, mode="constant", cval=float(fill[c])
        )
    return _to_uint8(out)


def apply_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    return _to_uint8(ndimage.gaussian_filter(img.astype(np.float64), sigma=(sigma, sigma, 0), mode="nearest"))


def apply_downscale(img: np.ndarray, factor: float) -> np.ndarray:
    if factor >= 1:
        return img
    h, w = img.shape[:2]
    small = resize_bilinear(img, max(1, round(w * factor)), max(1, round(h * factor)))
    return _to_uint8(resize_bilinear(_to_uint8(small), w, h))


def apply_shadow(img: np.ndarray, shadow: Shadow | None) -> np.ndarray:
    if shadow is None:
        return img
    out = img.astype(np.float64)
    edge = int(round(shadow.offset * img.shape[1]))
    out[:, edge:] *= 1.0 - shadow.opacity
    return _to_uint8(out)


def render(spec: PlateSpec) -> tuple[np.ndarray, str]:
    """Rasterise ``spec``; returns the image and its ground-truth text."""
    img = render_clean(spec)
    img = apply_tilt(img, spec.tilt_deg, spec.bg_color)
    img = apply_blur(img, spec.blur_sigma)
    img = apply_downscale(img, spec.downscale_factor)
    img = apply_shadow(img, spec.shadow)
    return img, spec.text


def center_crop(img: np.ndarray, keep_fraction: float = DEFAULT_KEEP_FRACTION) -> np.ndarray:
    """Keep the central horizontal band of height ``round(keep_fraction * h)``."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    h = img.shape[0]
    keep = max(1, int(round(keep_fraction * h)))
    top = (h - keep) // 2
    return img[top : top + keep].copy()


def overlay(background: np.ndarray, plate: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Paste ``plate`` (bilinearly resized to the box) into a copy of ``background``."""
    h, w = background.shape[:2]
    if not box.fits(w, h):
        raise ValueError(f"box {box.as_list()} does not fit a {w}x{h} background")
    scene = background.copy()
    resized = plate if plate.shape[:2] == (box.h, box.w) else _to_uint8(resize_bilinear(plate, box.w, box.h))
    scene[box.y : box.y + box.h, box.x : box.x + box.w] = resized
    return scene


def crop(img: np.ndarray, box: BoundingBox) -> np.ndarray:
    return img[box.y : box.y + box.h, box.x : box.x + box.w].copy()


def random_background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Smooth coloured gradient with mild noise, standing in for a car photo."""
    base = rng.uniform(30, 220, size=3).astype(np.float32)
    tilt = rng.uniform(-60, 60, size=(2, 3)).astype(np.float32)
    gx = (np.arange(width, dtype=np.float32) / max(1, width - 1) - 0.5)[None, :, None] * tilt[0]
    gy = (np.arange(height, dtype=np.float32) / max(1, height - 1) - 0.5)[:, None, None] * tilt[1]
    img = base + gx + gy + rng.standard_normal(size=(height, width, 3), dtype=np.float32) * 6.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class SceneConfig:
    margin_range: tuple[float, float] = (0.25, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    image: np.ndarray
    box: BoundingBox
    text: str
    spec: PlateSpec


def make_scene(spec: PlateSpec, rng: np.random.Generator, config: SceneConfig = SceneConfig()) -> Scene:
    """Render ``spec`` and overlay it at native size on a random background."""
    plate, text = render(spec)
    mx = int(round(spec.width * rng.uniform(*config.margin_range)))
    my = int(round(spec.height * rng.uniform(*config.margin_range)))
    width, height = spec.width + 2 * mx, spec.height + 2 * my
    bg = random_background(rng, width, height)
    x = int(rng.integers(0, width - spec.width + 1))
    y = int(rng.integers(0, height - spec.height + 1))
    box = BoundingBox(x, y, spec.width, spec.height)
    return Scene(image=overlay(bg, plate, box), box=box, text=text, spec=spec)


def plate_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Per-plate seed so batches can be generated in any order or in parallel."""
    return np.random.SeedSequence([seed, index])


def iter_specs(n: int, seed: int, config: PlateConfig = PlateConfig()) -> Iterator[tuple[int, PlateSpec]]:
    for i in range(n):
        rng = np.random.default_rng(plate_seed(seed, i))
        yield i, random_spec(rng, config)


def generate_plates(out_dir: str | Path, n: int, seed: int, config: PlateConfig = PlateConfig()) -> Path:
    """Write ``n`` plate images and a ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    width = len(str(max(0, n - 1)))
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for i, spec in iter_specs(n, seed, config):
            img, text = render(spec)
            rel = f"images/plate_{i:0{width}d}.ppm"
            write_ppm(out / rel, img)
            fh.write(json.dumps({"file": rel, "text": text, "spec": spec.to_dict()}, sort_keys=True) + "\n")
    return manifest


def generate_scenes(
    out_dir: str | Path,
    n: int,
    seed: int,
    config: PlateConfig = PlateConfig(),
    scene_config: SceneConfig = SceneConfig(),
) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    width = len(str(max(0, n - 1)))
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for i, spec in iter_specs(n, seed, config):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, 1]))
            scene = make_scene(spec, rng, scene_config)
            rel = f"images/scene_{i:0{width}d}.ppm"
            write_ppm(out / rel, scene.image)
            row = {"file": rel, "text": scene.text, "box": scene.box.as_list(), "spec": spec.to_dict()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest


@dataclass
class ManifestRow:
    file: Path
    text: str
    spec: PlateSpec
    box: BoundingBox | None = None
    extra: dict = field(default_factory=dict)


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            box = BoundingBox(*rec["box"]) if rec.get("box") is not None else None
            rows.append(
                ManifestRow(
                    file=path.parent / rec["file"],
                    text=rec["text"],
                    spec=PlateSpec.from_dict(rec["spec"]),
                    box=box,
                    extra={"relative_file": rec["file"]},
                )
            )
    return rows


def with_distortions(spec: PlateSpec, **changes) -> PlateSpec:
    return replace(spec, **changes)


__all__ = [
    "apply_blur",
    "apply_downscale",
    "apply_shadow",
    "apply_tilt",
    "DEFAULT_KEEP_FRACTION",
    "BoundingBox",
    "ManifestRow",
    "PlateConfig",
    "PlateRenderError",
    "PlateSpec",
    "Scene",
    "SceneConfig",
    "Shadow",
    "center_crop",
    "crop",
    "generate_plates",
    "generate_scenes",
    "iter_specs",
    "make_scene",
    "overlay",
    "plate_seed",
    "random_spec",
    "read_manifest",
    "render",
    "render_clean",
    "resize_bilinear",
    "text_layout",
    "with_distortions",
]
