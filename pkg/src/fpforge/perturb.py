"""Image- and model-level perturbations, accuracy sweeps and working ranges."""
from __future__ import annotations

import copy
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import stats
from torch.nn import functional as F

from .errors import InvalidArgument
from .fingerprint import DEFAULT_THRESHOLD, Fingerprint

IMAGE_KINDS = ("gaussian_noise", "gaussian_blur", "jpeg", "center_crop")
MODEL_KINDS = ("weight_quantize", "weight_noise")
# kinds where a larger magnitude is a milder perturbation
DESCENDING_KINDS = ("jpeg", "center_crop")

DEFAULT_GRIDS = {
    "gaussian_noise": [round(0.025 * i, 3) for i in range(7)],
    "gaussian_blur": [1, 3, 5, 7, 9],
    "jpeg": list(range(10, 101, 10)),
    "center_crop": list(range(32, 129, 16)),
    "weight_quantize": [1e-3, 1e-2, 1e-1, 1e0],
    "weight_noise": [round(0.04 * i, 2) for i in range(11)],
}


def default_grid(kind: str, resolution: int = 128) -> list:
    if kind == "center_crop":
        step = max(resolution // 8, 1)
        return list(range(resolution // 4, resolution + 1, step))
    return list(DEFAULT_GRIDS[kind])


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in IMAGE_KINDS + MODEL_KINDS:
            raise InvalidArgument(f"unknown perturbation kind {self.kind!r}")
        m = self.magnitude
        if self.kind in ("gaussian_noise", "weight_noise") and m < 0:
            raise InvalidArgument("noise std must be >= 0")
        if self.kind == "gaussian_blur" and (m != int(m) or (m != 0 and int(m) % 2 == 0) or m < 0):
            raise InvalidArgument(f"blur kernel size must be odd (or 0 for none), got {m}")
        if self.kind == "jpeg" and not (1 <= m <= 100):
            raise InvalidArgument(f"JPEG quality must lie in [1, 100], got {m}")
        if self.kind == "center_crop" and (m != int(m) or m < 1):
            raise InvalidArgument(f"crop size must be a positive integer, got {m}")
        if self.kind == "weight_quantize" and not m > 0:
            raise InvalidArgument(f"quantization precision must be > 0, got {m}")

    @property
    def is_image(self) -> bool:
        return self.kind in IMAGE_KINDS


def blur_sigma(kernel: int) -> float:
    return 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8


def _gaussian_kernel(k: int) -> torch.Tensor:
    s = blur_sigma(k)
    x = torch.arange(k, dtype=torch.float64) - (k - 1) / 2
    g = torch.exp(-(x**2) / (2 * s * s))
    return g / g.sum()


def _blur(x: torch.Tensor, k: int) -> torch.Tensor:
    g = _gaussian_kernel(k).to(x.dtype)
    c = x.shape[1]
    pad = k // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, g.view(1, 1, 1, k).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, g.view(1, 1, k, 1).repeat(c, 1, 1, 1), groups=c)


def _jpeg(images: np.ndarray, quality: int) -> np.ndarray:
    out = np.empty_like(images)
    u8 = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    for i, im in enumerate(u8):
        buf = io.BytesIO()
        pil = Image.fromarray(im[..., 0] if im.shape[-1] == 1 else im)
        pil.save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        arr = np.asarray(Image.open(buf), dtype=np.float32) / 255.0
        out[i] = arr[..., None] if arr.ndim == 2 else arr
    return out


def perturb_image(images, spec: PerturbationSpec, seed: int = 0) -> np.ndarray:
    """Apply an image perturbation to ``(H, W, C)`` or ``(N, H, W, C)`` images.

    Floats are taken to be in [0, 1]; uint8 input is rescaled first.  The
    result is always float32 in [0, 1].
    """
    if not spec.is_image:
        raise InvalidArgument(f"{spec.kind} is a model perturbation")
    arr = np.asarray(images)
    arr = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    n, h, w, c = arr.shape
    m = spec.magnitude
    if spec.kind == "gaussian_noise":
        if m == 0:
            out = arr.copy()
        else:
            rng = np.random.default_rng(seed)
            out = np.clip(arr + rng.normal(0.0, m, size=arr.shape).astype(np.float32), 0, 1)
    elif spec.kind == "gaussian_blur":
        k = int(m)
        if k <= 1:
            out = arr.copy()
        else:
            if k // 2 >= min(h, w):
                raise InvalidArgument(f"blur kernel {k} too large for {h}x{w} images")
            t = torch.from_numpy(arr).permute(0, 3, 1, 2)
            out = _blur(t, k).permute(0, 2, 3, 1).numpy().astype(np.float32)
    elif spec.kind == "jpeg":
        out = _jpeg(arr, int(m))
    else:  # center_crop
        s = int(m)
        if s > min(h, w):
            raise InvalidArgument(f"crop size {s} exceeds image size {h}x{w}")
        if s == h == w:
            out = arr.copy()
        else:
            top, left = (h - s) // 2, (w - s) // 2
            t = torch.from_numpy(np.ascontiguousarray(arr[:, top : top + s, left : left + s])).permute(0, 3, 1, 2)
            t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
            out = t.permute(0, 2, 3, 1).numpy().clip(0, 1).astype(np.float32)
    return out[0] if single else out


def perturb_generator(checkpoint, spec: PerturbationSpec, seed: int = 0):
    """Return a perturbed deep copy of a generator checkpoint; the input is untouched."""
    if spec.is_image:
        raise InvalidArgument(f"{spec.kind} is an image perturbation")
    new = copy.deepcopy(checkpoint)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in new.generator.parameters():
            if not p.requires_grad:
                continue
            if spec.kind == "weight_quantize":
                q = float(spec.magnitude)
                p.copy_(torch.round(p / q) * q)
            elif spec.magnitude > 0:
                p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * spec.magnitude)
    return new


# -- sweeps ---------------------------------------------------------------------


@dataclass
class SweepResult:
    kind: str
    grid: list
    accuracy: list
    accuracy_ci: list
    reference: list
    reference_ci: list
    reference_label: str
    num_samples: int
    num_reference: int
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        if list(self.grid) != sorted(self.grid):
            raise InvalidArgument("sweep grid must be sorted ascending")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _acc_and_ci(bits: np.ndarray, fingerprint: Fingerprint) -> tuple[float, float]:
    per = (bits == fingerprint.bits[None, :]).mean(axis=1)
    ci = 1.96 * per.std(ddof=1) / math.sqrt(len(per)) if len(per) > 1 else 0.0
    return float(per.mean()), float(ci)


def sweep_image(images, codec, fingerprint: Fingerprint, kind: str, grid: Sequence[float],
                reference_images=None, seed: int = 0) -> SweepResult:
    """Bit accuracy vs perturbation strength on generated images (and the fingerprinted-real reference)."""
    if not grid:
        raise InvalidArgument("empty magnitude grid")
    grid = sorted(grid)
    acc, acc_ci, ref, ref_ci = [], [], [], []
    for j, m in enumerate(grid):
        spec = PerturbationSpec(kind, m)
        a, ci = _acc_and_ci(codec.decode_bits(perturb_image(images, spec, seed=seed + j)), fingerprint)
        acc.append(a)
        acc_ci.append(ci)
        if reference_images is not None:
            r, rci = _acc_and_ci(codec.decode_bits(perturb_image(reference_images, spec, seed=seed + 1000 + j)),
                                 fingerprint)
            ref.append(r)
            ref_ci.append(rci)
    return SweepResult(kind, list(grid), acc, acc_ci, ref, ref_ci, "fingerprinted real images (bit accuracy)",
                       len(images), 0 if reference_images is None else len(reference_images), {"perturbation": seed})


def sweep_model(checkpoint, codec, fingerprint: Fingerprint, kind: str, grid: Sequence[float],
                num_samples: int = 500, seed: int = 0, quality_reference=None,
                draws: Optional[int] = None) -> SweepResult:
    """Perturb generator weights at each magnitude, sample, decode.

    Weight noise is itself random, so each magnitude is evaluated over
    ``draws`` independent perturbed copies (default 5 for noise, 1 for the
    deterministic quantization), each with its own latents.  With several
    draws the CI is a t-interval over the per-draw means; with one it is the
    usual interval over images.  ``num_samples`` is per draw.

    The reference series is the nearest-training-image PSNR quality proxy when
    ``quality_reference`` images are given (higher is better).
    """
    from .transfer import nearest_train_psnr, sample

    if not grid:
        raise InvalidArgument("empty magnitude grid")
    if draws is None:
        draws = 5 if kind == "weight_noise" else 1
    if draws < 1:
        raise InvalidArgument("draws must be >= 1")
    grid = sorted(grid)
    acc, acc_ci, ref, ref_ci = [], [], [], []
    for j, m in enumerate(grid):
        means, cis, quality = [], [], []
        for r in range(draws):
            pert = perturb_generator(checkpoint, PerturbationSpec(kind, m), seed=seed + j + 1000 * r)
            imgs = sample(pert, num_samples, seed=seed + r)
            a, ci = _acc_and_ci(codec.decode_bits(imgs), fingerprint)
            means.append(a)
            cis.append(ci)
            if quality_reference is not None:
                quality.append(nearest_train_psnr(imgs, quality_reference, seed=seed))
        acc.append(float(np.mean(means)))
        acc_ci.append(cis[0] if draws == 1 else _t_halfwidth(means))
        if quality:
            ref.append(float(np.mean(quality)))
            ref_ci.append(0.0 if draws == 1 else _t_halfwidth(quality))
    return SweepResult(kind, list(grid), acc, acc_ci, ref, ref_ci,
                       "quality proxy: mean nearest-train PSNR (dB), not FID", num_samples,
                       0 if quality_reference is None else len(quality_reference),
                       {"weights": seed, "sampling": seed, "draws": draws})


def pool_sweeps(sweeps: Sequence[SweepResult]) -> SweepResult:
    """Average sweeps of the same kind and grid over independent models.

    Every image of one model shares a single fingerprint, so near chance the
    per-image CI misses the dominant randomness (how well that one fingerprint
    happens to agree with the decoder's default output).  Pooling over models,
    each with its own fingerprint, uses them as the sampling unit: the CI is a
    t-interval over per-model values.
    """
    if not sweeps:
        raise InvalidArgument("nothing to pool")
    first = sweeps[0]
    if any(s.kind != first.kind or list(s.grid) != list(first.grid) for s in sweeps):
        raise InvalidArgument("pooled sweeps must share kind and grid")
    if len(sweeps) == 1:
        return first

    def series(attr):
        cols = np.array([getattr(s, attr) for s in sweeps], dtype=np.float64)
        if cols.size == 0 or cols.shape[1] == 0:
            return [], []
        return cols.mean(axis=0).tolist(), [_t_halfwidth(c) for c in cols.T]

    acc, acc_ci = series("accuracy")
    ref, ref_ci = series("reference") if all(len(s.reference) == len(first.grid) for s in sweeps) else ([], [])
    return SweepResult(first.kind, list(first.grid), acc, acc_ci, ref, ref_ci, first.reference_label,
                       sum(s.num_samples for s in sweeps), sum(s.num_reference for s in sweeps),
                       {"pooled_over_models": len(sweeps)})


def _t_halfwidth(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(stats.t.ppf(0.975, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v)))


def working_range(sweep: SweepResult, threshold: float = DEFAULT_THRESHOLD) -> Optional[tuple[float, float]]:
    """Interval of magnitudes over which accuracy stays >= threshold.

    Takes the maximal run of passing grid points starting at the mild end
    (low magnitudes, or high ones for JPEG quality and crop size) and
    extends it by linear interpolation to where accuracy crosses the
    threshold.  Returns None if even the mildest point fails.
    """
    grid = list(sweep.grid)
    acc = list(sweep.accuracy)
    if not grid:
        raise InvalidArgument("empty sweep")
    descending = sweep.kind in DESCENDING_KINDS
    if descending:
        grid, acc = grid[::-1], acc[::-1]
    if acc[0] < threshold:
        return None
    last = 0
    while last + 1 < len(grid) and acc[last + 1] >= threshold:
        last += 1
    edge = grid[last]
    if last + 1 < len(grid) and acc[last] > threshold:
        a0, a1 = acc[last], acc[last + 1]
        edge = grid[last] + (a0 - threshold) / (a0 - a1) * (grid[last + 1] - grid[last])
    lo, hi = (edge, grid[0]) if descending else (grid[0], edge)
    return (float(lo), float(hi))


def plot_sweep(sweep: SweepResult, threshold: float = DEFAULT_THRESHOLD):
    """Matplotlib figure: red = generated images, blue = reference, dashed line at the threshold."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.errorbar(sweep.grid, sweep.accuracy, yerr=sweep.accuracy_ci, color="red", marker="o", label="generated")
    ax.axhline(threshold, color="gray", linestyle="--", linewidth=1, gid="threshold")
    ax.set_xlabel(sweep.kind.replace("_", " "))
    ax.set_ylabel("bit accuracy")
    ax.set_ylim(0.4, 1.02)
    if sweep.kind == "weight_quantize":
        ax.set_xscale("log")
    if sweep.reference:
        if sweep.kind in MODEL_KINDS:
            ax2 = ax.twinx()
            ax2.plot(sweep.grid, sweep.reference, color="blue", marker="s", linestyle=":", label="quality proxy")
            ax2.set_ylabel("nearest-train PSNR (dB)")
        else:
            ax.errorbar(sweep.grid, sweep.reference, yerr=sweep.reference_ci, color="blue", marker="s",
                        linestyle=":", label="fingerprinted real")
    ax.legend(loc="lower left", fontsize=7)
    fig.tight_layout()
    return fig


def emit_plots(sweep: SweepResult, out_path, threshold: float = DEFAULT_THRESHOLD) -> list[Path]:
    """Write the sweep plot as PNG and SVG (or only the format named by ``out_path``'s suffix)."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig = plot_sweep(sweep, threshold)
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "fpforge"
    written = []
    suffix = out_path.suffix.lower()
    exts = [suffix] if suffix in (".png", ".svg") else [".png", ".svg"]
    base = out_path.with_suffix("") if suffix in (".png", ".svg") else out_path
    for ext in exts:
        p = base.parent / (base.name + ext)
        fig.savefig(p, dpi=120, metadata={"Software": None} if ext == ".png" else {"Date": None})
        written.append(p)
    plt.close(fig)
    return written
