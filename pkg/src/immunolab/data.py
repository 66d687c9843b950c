"""Synthetic images, data-free priors and PPM/PGM image I/O.

Images are float arrays of shape ``(3, H, W)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLORS = {
    "red": (0.85, 0.12, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.12, 0.22, 0.85),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.50, 0.05),
    "black": (0.05, 0.05, 0.05),
    "white": (0.97, 0.97, 0.97),
    "gray": (0.50, 0.50, 0.50),
}
SHAPES = ("circle", "square", "triangle", "ring")
BACKGROUNDS = ("white", "gray", "yellow", "green", "blue")

# Ten (color, shape) classes; every shape and most colors appear at least twice.
DEFAULT_CLASSES = (
    ("red", "circle"),
    ("blue", "square"),
    ("green", "triangle"),
    ("yellow", "ring"),
    ("purple", "circle"),
    ("orange", "square"),
    ("blue", "triangle"),
    ("red", "ring"),
    ("green", "square"),
    ("purple", "triangle"),
)

_BG_TINTS = {
    "white": (0.92, 0.92, 0.90),
    "gray": (0.70, 0.70, 0.72),
    "yellow": (0.95, 0.92, 0.65),
    "green": (0.70, 0.88, 0.70),
    "blue": (0.70, 0.80, 0.95),
}


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported PPM/PGM data."""


# ---------------------------------------------------------------- image I/O


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise ImageFormatError(f"expected magic {magic!r} at byte 0, found {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise ImageFormatError(f"truncated header at byte {pos}")
        ch = buf[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise ImageFormatError(f"unterminated comment at byte {pos}")
            pos = nl + 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise ImageFormatError(f"unexpected byte {ch!r} in header at byte {pos}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after maxval at byte {pos}")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height} in header ending at byte {pos}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} in header ending at byte {pos}")
    return width, height, maxval, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    width, height, _, offset = _read_header(buf, b"P6")
    need = width * height * 3
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload at byte {offset + len(payload)}: expected {need} bytes after byte {offset}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def encode_ppm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    head = f"P6\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii")
    return head + q.tobytes()


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) file into a ``(3, H, W)`` float array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode_ppm(buf)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def save_image(image, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def save_pgm(gray, path: str | os.PathLike) -> None:
    """Write a 2-D ``[0, 1]`` array as a binary PGM (P5) file."""
    g = np.clip(np.rint(np.asarray(gray, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii") + g.tobytes())


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    width, height, _, offset = _read_header(buf, b"P5")
    payload = buf[offset : offset + width * height]
    if len(payload) < width * height:
        raise ImageFormatError(f"{path}: truncated payload at byte {offset + len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width) / 255.0


# ---------------------------------------------------------------- filters


def mean_filter(image, kernel: int) -> np.ndarray:
    """Edge-replicated ``kernel x kernel`` box average over the last two axes."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    img = np.asarray(image)
    if kernel == 1:
        return img.copy()
    r = kernel // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(img, pad, mode="edge")
    h, w = img.shape[-2:]
    acc = np.zeros_like(img)
    for di in range(kernel):
        for dj in range(kernel):
            acc = acc + padded[..., di : di + h, dj : dj + w]
    return acc / (kernel * kernel)


# ---------------------------------------------------------------- shapes dataset


@dataclass
class ShapeRecord:
    path: str
    prompt: str
    label: str
    edit_prompts: tuple[str, str]


@dataclass
class ShapeDatasetManifest:
    records: list[ShapeRecord]
    seed: int
    size: int
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def prompts(self) -> list[str]:
        return [r.prompt for r in self.records]

    def load_images(self) -> np.ndarray:
        return np.stack([load_image(self.root / r.path) for r in self.records])

    def write(self, path: str | os.PathLike) -> None:
        lines = [f"# seed={self.seed} size={self.size}"]
        for r in self.records:
            lines.append("\t".join([r.path, r.prompt, r.label, *r.edit_prompts]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | os.PathLike) -> ShapeDatasetManifest:
    path = Path(path)
    seed, size, records = -1, 0, []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "seed":
                    seed = int(val)
                elif key == "size":
                    size = int(val)
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ValueError(f"{path}:{i + 1}: expected 5 tab-separated fields, got {len(cols)}")
        records.append(ShapeRecord(cols[0], cols[1], cols[2], (cols[3], cols[4])))
    return ShapeDatasetManifest(records, seed, size, root=path.parent)


def class_prompt(color: str, shape: str) -> str:
    return f"a photo of a {color} {shape}"


def edit_prompts_for(color: str, shape: str, background: str) -> tuple[str, str]:
    swap = SHAPES[(SHAPES.index(shape) + 1) % len(SHAPES)]
    new_bg = BACKGROUNDS[(BACKGROUNDS.index(background) + 2) % len(BACKGROUNDS)]
    return class_prompt(color, swap), f"a photo of a {color} {shape} on {new_bg}"


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float, ss: int = 4) -> np.ndarray:
    coords = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        m = dx * dx + dy * dy <= r * r
    elif shape == "ring":
        d2 = dx * dx + dy * dy
        m = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif shape == "square":
        s = r * 0.85
        m = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    elif shape == "triangle":
        # upward triangle inscribed in the circle of radius r
        top, base = cy - r, cy + 0.5 * r
        half = (dy - (top - cy)) / (1.5 * r) * (r * 0.866)
        m = (yy >= top) & (yy <= base) & (np.abs(dx) <= half)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render_shape(color: str, shape: str, background: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one anti-aliased shape on a shaded background."""
    tint = np.array(_BG_TINTS[background]) + rng.uniform(-0.05, 0.05, 3)
    ramp = np.linspace(-1.0, 1.0, size)
    angle = rng.uniform(0, 2 * np.pi)
    grad = np.cos(angle) * ramp[None, :] + np.sin(angle) * ramp[:, None]
    bg = tint[:, None, None] + 0.06 * grad[None]
    r = rng.uniform(0.22, 0.34) * size
    cx = rng.uniform(r, size - r)
    cy = rng.uniform(r, size - r)
    mask = _shape_mask(shape, size, cx, cy, r)
    fg = np.array(COLORS[color]) + rng.uniform(-0.06, 0.06, 3)
    img = bg * (1.0 - mask) + fg[:, None, None] * mask
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_shapes(n: int, size: int = 32, seed: int = 0, classes=DEFAULT_CLASSES):
    """Render ``n`` shape images in memory.

    Returns ``(images, records)`` where records carry empty paths. Classes are
    balanced (counts differ by at most one) and shuffled by ``seed``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(classes))
    images, records = [], []
    for i, ci in enumerate(labels):
        color, shape = classes[ci]
        background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
        images.append(render_shape(color, shape, background, size, rng))
        records.append(
            ShapeRecord(
                path=f"img_{i:05d}.ppm",
                prompt=class_prompt(color, shape),
                label=f"{color}_{shape}",
                edit_prompts=edit_prompts_for(color, shape, background),
            )
        )
    return np.stack(images), records


def gen_shapes_dataset(n: int, size: int, seed: int, out_dir: str | os.PathLike) -> ShapeDatasetManifest:
    """Render ``n`` shape images into ``out_dir`` and write ``manifest.tsv`` there."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, records = render_shapes(n, size, seed)
    for img, rec in zip(images, records):
        save_image(img, out / rec.path)
    manifest = ShapeDatasetManifest(records, seed, size, root=out)
    manifest.write(out / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------- data-free priors


@dataclass(frozen=True)
class JigsawConfig:
    min_grid: int = 2
    max_grid: int = 8
    kernel: int = 5
    curriculum_length: int = 20
    size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_grid <= self.max_grid:
            raise ValueError(f"need 1 <= min_grid <= max_grid, got {self.min_grid}, {self.max_grid}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.curriculum_length < 1:
            raise ValueError("curriculum_length must be >= 1")

    def grid_at(self, curriculum_index: int) -> int:
        """Tiles per side; grows linearly from ``min_grid`` to ``max_grid``."""
        if not 0 <= curriculum_index < self.curriculum_length:
            raise ValueError(f"curriculum_index {curriculum_index} outside [0, {self.curriculum_length})")
        if self.curriculum_length == 1:
            return self.min_grid
        frac = curriculum_index / (self.curriculum_length - 1)
        return int(round(self.min_grid + frac * (self.max_grid - self.min_grid)))


def gen_jigsaw(config: JigsawConfig, curriculum_index: int, index: int = 0, return_prefilter: bool = False):
    """Random jigsaw image: a grid of flat random-colored tiles, then a mean filter.

    ``index`` selects the sample; output is a pure function of
    ``(config, curriculum_index, index)``.
    """
    g = config.grid_at(curriculum_index)
    rng = np.random.default_rng([config.seed, curriculum_index, index])
    edges = np.linspace(0, config.size, g + 1).round().astype(int)
    colors = rng.uniform(0.0, 1.0, size=(g, g, 3))
    img = np.empty((3, config.size, config.size), dtype=np.float32)
    for i in range(g):
        for j in range(g):
            img[:, edges[i] : edges[i + 1], edges[j] : edges[j + 1]] = colors[i, j][:, None, None]
    smooth = mean_filter(img, config.kernel).astype(np.float32)
    if return_prefilter:
        return smooth, img
    return smooth


def gen_gaussian_prior(size: int, seed: int) -> np.ndarray:
    """``clamp(0.5 + 0.2 * N(0, 1), 0, 1)`` per pixel, shape ``(3, size, size)``."""
    rng = np.random.default_rng(seed)
    return np.clip(0.5 + 0.2 * rng.standard_normal((3, size, size)), 0.0, 1.0).astype(np.float32)


class JigsawPrior:
    """Sampler over jigsaw images following a grid-size curriculum."""

    kind = "jigsaw"

    def __init__(self, config: JigsawConfig | None = None):
        self.config = config or JigsawConfig()

    @property
    def curriculum_length(self) -> int:
        return self.config.curriculum_length

    def sample(self, curriculum_index: int, index: int) -> np.ndarray:
        return gen_jigsaw(self.config, curriculum_index, index)


class GaussianPrior:
    """Sampler over clipped Gaussian noise images; ignores the curriculum."""

    kind = "gaussian"
    curriculum_length = 1

    def __init__(self, size: int = 32, seed: int = 0):
        self.size = size
        self.seed = seed

    def sample(self, curriculum_index: int, index: int) -> np.ndarray:
        return gen_gaussian_prior(self.size, int(np.random.SeedSequence([self.seed, index]).generate_state(1)[0]))
