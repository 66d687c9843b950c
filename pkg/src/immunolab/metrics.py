"""Image-quality metrics and immunization experiments.

Edits of a clean image and of its immunized copy are produced with the same
seed and compared; lower PSNR, SSIM and feature similarity mean stronger
immunization. PSNR and SSIM stand in for the wider perceptual suite, and the
cosine similarity of toy-encoder latents stands in for CLIP/DINO features.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diffusion import ToyLdmBundle, edit_img2img
from .validation import check_same_shape

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

CSV_HEADER = ("image", "seed", "psnr_db", "ssim", "feat_sim")
CSV_NOTES = (
    "# orientation: lower psnr_db, ssim and feat_sim between edit(clean) and edit(immunized) = stronger immunization",
    "# metrics: psnr_db and ssim on [0,1] images; feat_sim = cosine of toy VAE latents (substitute for CLIP/DINO);"
    " LPIPS, VIFp and FSIM are not computed",
)


def psnr(a, b) -> float:
    """PSNR in dB on the ``[0, 1]`` scale; identical inputs give 99 dB."""
    a, b = check_same_shape(a, b, "psnr")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    win = len(g)
    x = np.lib.stride_tricks.sliding_window_view(x, win, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(x, win, axis=-2) @ g


def ssim(a, b) -> float:
    """Mean local SSIM with an 11x11 Gaussian window, averaged over channels.

    Windows lie entirely inside the image (no padding). Accepts ``(H, W)`` or
    ``(C, H, W)`` arrays.
    """
    a, b = check_same_shape(a, b, "ssim")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean((num / den).reshape(a.shape[0], -1).mean(axis=1)))


def feat_sim(bundle: ToyLdmBundle, a, b) -> float:
    """Cosine similarity of the flattened encoder latents of two images."""
    za = bundle.encode(np.asarray(a, dtype=bundle.dtype)).data.astype(np.float64).ravel()
    zb = bundle.encode(np.asarray(b, dtype=bundle.dtype)).data.astype(np.float64).ravel()
    return float(za @ zb / (np.linalg.norm(za) * np.linalg.norm(zb) + 1e-12))


def _cosine_rows(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    za = za.reshape(len(za), -1).astype(np.float64)
    zb = zb.reshape(len(zb), -1).astype(np.float64)
    return (za * zb).sum(1) / (np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1) + 1e-12)


# ---------------------------------------------------------------- reports


@dataclass
class MetricRow:
    image: str
    seed: int
    psnr_db: float
    ssim: float
    feat_sim: float


@dataclass
class MetricReport:
    rows: list[MetricRow]
    label: str = ""
    config_hash: str = ""

    def _values(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and population standard deviation per metric."""
        out = {}
        for name in CSV_HEADER[2:]:
            v = self._values(name)
            out[name] = (float(v.mean()), float(v.std()))
        return out

    def mean(self, name: str) -> float:
        return float(self._values(name).mean())

    def per_seed_mean(self, name: str) -> dict[int, float]:
        seeds = sorted({r.seed for r in self.rows})
        return {s: float(np.mean([getattr(r, name) for r in self.rows if r.seed == s])) for s in seeds}

    def sorted_rows(self) -> list[MetricRow]:
        return sorted(self.rows, key=lambda r: (r.image, r.seed))

    def to_csv(self, path) -> None:
        agg = self.aggregate()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for note in CSV_NOTES:
                fh.write(note + "\n")
            fh.write(f"# label: {self.label}\n# config_hash: {self.config_hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.sorted_rows():
                w.writerow([r.image, r.seed, repr(r.psnr_db), repr(r.ssim), repr(r.feat_sim)])
            w.writerow(["AGG", "mean"] + [repr(agg[k][0]) for k in CSV_HEADER[2:]])
            w.writerow(["AGG", "std"] + [repr(agg[k][1]) for k in CSV_HEADER[2:]])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        rows, label, chash = [], "", ""
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("# label:"):
                    label = line.split(":", 1)[1].strip()
                elif line.startswith("# config_hash:"):
                    chash = line.split(":", 1)[1].strip()
                elif line.startswith("#") or line.startswith("image,") or line.startswith("AGG,"):
                    continue
                elif line.strip():
                    img, seed, p, s, f = next(csv.reader([line]))
                    rows.append(MetricRow(img, int(seed), float(p), float(s), float(f)))
        return cls(rows, label, chash)

    def to_svg(self, path, title: str | None = None) -> None:
        write_bar_svg(path, {k: v[0] for k, v in self.aggregate().items()}, title or self.label)


def write_bar_svg(path, values: dict[str, float], title: str = "") -> None:
    """Standalone SVG bar chart; bars are scaled to the largest absolute value."""
    w, h, pad, bw = 120 * max(len(values), 1) + 40, 260, 40, 70
    top = max([abs(v) for v in values.values()] + [1e-12])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{w / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
    ]
    for i, (name, v) in enumerate(values.items()):
        bh = (h - 2 * pad - 20) * abs(v) / top
        x = pad + i * 120
        y = h - pad - bh
        parts.append(f'<rect x="{x}" y="{y:.2f}" width="{bw}" height="{bh:.2f}" fill="#4a78b0"/>')
        parts.append(f'<text x="{x + bw / 2}" y="{y - 4:.2f}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.4g}</text>')
        parts.append(f'<text x="{x + bw / 2}" y="{h - pad + 16}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(name)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# ---------------------------------------------------------------- experiments


@dataclass
class EditParams:
    strength: float = 0.8
    guidance_scale: float = 7.5
    steps: int = 50
    prompt_column: int = 0  # which of the two edit prompts to use


class ImmunizationEvaluator:
    """Compare edits of clean and perturbed images under shared seeds.

    Clean edits are computed once per seed and reused for every perturbation
    evaluated with the same evaluator.
    """

    def __init__(self, bundle: ToyLdmBundle, images, edit_prompts: Sequence[str], seeds: Sequence[int], params: EditParams | None = None, names=None):
        if len(seeds) < 1:
            raise ValueError("at least one seed is required")
        self.bundle = bundle
        self.images = np.asarray(images, dtype=bundle.dtype)
        self.prompts = list(edit_prompts)
        self.seeds = [int(s) for s in seeds]
        self.params = params or EditParams()
        self.names = list(names) if names is not None else [f"img_{i:05d}" for i in range(len(self.images))]
        self._clean: dict[int, np.ndarray] = {}

    def edit(self, images, seed: int) -> np.ndarray:
        p = self.params
        return edit_img2img(self.bundle, images, self.prompts, p.strength, p.guidance_scale, p.steps, seed)

    def clean_edit(self, seed: int) -> np.ndarray:
        if seed not in self._clean:
            self._clean[seed] = self.edit(self.images, seed)
        return self._clean[seed]

    def evaluate(self, perturbed, label: str = "") -> MetricReport:
        """``perturbed``: array like ``images`` or a callable ``images -> images``."""
        adv = perturbed(self.images) if callable(perturbed) else np.asarray(perturbed)
        check_same_shape(adv, self.images, "perturbed images")
        rows = []
        for seed in self.seeds:
            ec = self.clean_edit(seed)
            ea = self.edit(adv.astype(self.bundle.dtype), seed)
            zc = self.bundle.encode(ec.astype(self.bundle.dtype)).data
            za = self.bundle.encode(ea.astype(self.bundle.dtype)).data
            fs = _cosine_rows(zc, za)
            for i, name in enumerate(self.names):
                try:
                    rows.append(MetricRow(name, seed, psnr(ec[i], ea[i]), ssim(ec[i], ea[i]), float(fs[i])))
                except ValueError as exc:
                    raise ValueError(f"{name} (seed {seed}): {exc}") from exc
        chash = hashlib.sha256(json.dumps({"params": asdict(self.params), "seeds": self.seeds, "label": label}, sort_keys=True).encode()).hexdigest()[:16]
        return MetricReport(rows, label, chash)


def uniform_noise_control(epsilon: float, seed: int) -> Callable[[np.ndarray], np.ndarray]:
    """Perturbation callable adding independent ``U(-eps, eps)`` noise per image."""

    def apply(images):
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-epsilon, epsilon, images.shape).astype(images.dtype)
        return np.clip(images + noise, 0.0, 1.0)

    return apply


def run_experiment(
    bundle: ToyLdmBundle,
    uap,
    manifest,
    edit_params: EditParams | None = None,
    seeds: Sequence[int] = (0,),
    csv_path=None,
    svg_path=None,
    label: str = "",
) -> MetricReport:
    """Edit every manifest image clean and immunized per seed; write CSV/SVG if asked."""
    from .immunizer import immunize

    params = edit_params or EditParams()
    try:
        images = manifest.load_images()
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"manifest image missing: {exc.filename}") from exc
    prompts = [r.edit_prompts[params.prompt_column] for r in manifest.records]
    names = [r.path for r in manifest.records]
    ev = ImmunizationEvaluator(bundle, images, prompts, seeds, params, names)
    report = ev.evaluate(lambda x: immunize(x, uap), label=label)
    if csv_path is not None:
        report.to_csv(csv_path)
    if svg_path is not None:
        report.to_svg(svg_path)
    return report
