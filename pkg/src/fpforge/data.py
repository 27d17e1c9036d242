"""Image folders, fingerprinted datasets and their manifests.

Also home to the fidelity report (pixel metrics + 10x difference images) and
the least-significant-bit control, a deliberately shallow steganography
baseline that should *not* survive generative-model training.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .errors import IntegrityError, InvalidArgument, OutputExists
from .fingerprint import Fingerprint, bitwise_accuracy

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = 1
IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ImageDataset:
    """uint8 images ``(N, H, W, C)`` with their relative names, in lexicographic order."""

    images: np.ndarray
    names: list
    source_dir: Optional[str] = None
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[1])

    @property
    def channels(self) -> int:
        return int(self.images.shape[3])

    def as_float(self) -> np.ndarray:
        return self.images.astype(np.float32) / 255.0

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(self.images[idx], [self.names[i] for i in idx], self.source_dir)


def _load_one(path: Path, resolution: int, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        w, h = im.size
        s = min(w, h)
        if (w, h) != (s, s):
            left, top = (w - s) // 2, (h - s) // 2
            im = im.crop((left, top, left + s, top + s))
        if s != resolution:
            im = im.resize((resolution, resolution), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.uint8)
    return arr[..., None] if channels == 1 else arr


def ingest_folder(path, resolution: int, channels: int = 3, limit: Optional[int] = None) -> ImageDataset:
    """Read every decodable image under ``path`` (recursively), center-crop and resize.

    Files are visited in lexicographic order of their relative path, so the
    same folder always yields the same ordering.  Undecodable files are
    skipped and listed in ``dataset.skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise InvalidArgument(f"{root} is not a directory")
    files = sorted(
        (p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTS),
        key=lambda p: p.relative_to(root).as_posix(),
    )
    images, names, skipped = [], [], []
    for p in files:
        if limit is not None and len(images) >= limit:
            break
        try:
            images.append(_load_one(p, resolution, channels))
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            log.warning("skipping undecodable image %s: %s", p, exc)
            skipped.append(p.relative_to(root).as_posix())
            continue
        names.append(p.relative_to(root).as_posix())
    if not images:
        raise InvalidArgument(f"no decodable images in {root}")
    return ImageDataset(np.stack(images), names, str(root), skipped)


def to_uint8(images) -> np.ndarray:
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def _prepare_out_dir(out_dir, overwrite: bool) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise OutputExists(f"{out} is not empty; pass overwrite=True to replace it")
        for p in out.rglob("*"):
            if p.is_file():
                p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def save_png(image_u8: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = image_u8[..., 0] if image_u8.shape[-1] == 1 else image_u8
    Image.fromarray(arr).save(path, format="PNG")


def write_images(images_u8: np.ndarray, names, out_dir: Path) -> list[dict]:
    records = []
    for img, name in zip(images_u8, names):
        rel = Path(name).with_suffix(".png").as_posix()
        dest = out_dir / rel
        save_png(img, dest)
        records.append({"path": rel, "sha256": sha256_file(dest)})
    return records


# -- manifest ----------------------------------------------------------------


@dataclass
class DatasetManifest:
    source_dir: Optional[str]
    out_dir: str
    fingerprint_hex: Optional[str]
    n: Optional[int]
    codec_id: Optional[str]
    records: list
    method: str = "codec"
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    tool_version: str = __version__
    schema_version: int = MANIFEST_SCHEMA

    @property
    def fingerprint(self) -> Optional[Fingerprint]:
        if self.fingerprint_hex is None:
            return None
        return Fingerprint.from_hex(self.fingerprint_hex, self.n)

    @property
    def path(self) -> Path:
        return Path(self.out_dir) / MANIFEST_NAME

    def save(self) -> Path:
        self.path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return self.path

    def content_hash(self) -> str:
        return sha256_file(self.path)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        if d.get("schema_version") != MANIFEST_SCHEMA:
            raise InvalidArgument(f"unsupported manifest schema {d.get('schema_version')}")
        m = cls(**d)
        m.out_dir = str(path.parent)
        return m

    def check_integrity(self):
        """Raise IntegrityError naming the first missing or altered file."""
        root = Path(self.out_dir)
        on_disk = {p.relative_to(root).as_posix() for p in root.rglob("*.png")}
        for rec in self.records:
            p = root / rec["path"]
            if not p.is_file():
                raise IntegrityError(f"missing file {rec['path']}", path=rec["path"])
            if sha256_file(p) != rec["sha256"]:
                raise IntegrityError(f"hash mismatch for {rec['path']}", path=rec["path"])
        extra = on_disk - {r["path"] for r in self.records}
        if extra:
            name = sorted(extra)[0]
            raise IntegrityError(f"unlisted file {name}", path=name)

    def load_images(self, channels: Optional[int] = None, verify: bool = True) -> ImageDataset:
        if verify:
            self.check_integrity()
        root = Path(self.out_dir)
        imgs = []
        for rec in self.records:
            with Image.open(root / rec["path"]) as im:
                arr = np.asarray(im)
            if arr.ndim == 2:
                arr = arr[..., None]
            imgs.append(arr)
        images = np.stack(imgs)
        if channels is not None and images.shape[-1] != channels:
            raise InvalidArgument(f"manifest images have {images.shape[-1]} channels, expected {channels}")
        return ImageDataset(images, [r["path"] for r in self.records], str(root))


def write_clean_dataset(dataset: ImageDataset, out_dir, overwrite: bool = False) -> DatasetManifest:
    """Persist an un-fingerprinted copy with a manifest (used for clean-data controls)."""
    out = _prepare_out_dir(out_dir, overwrite)
    records = write_images(dataset.images, dataset.names, out)
    m = DatasetManifest(dataset.source_dir, str(out), None, None, None, records, method="clean")
    m.save()
    return m


def fingerprint_dataset(checkpoint, dataset: ImageDataset, fingerprint: Fingerprint, out_dir,
                        overwrite: bool = False, batch_size: int = 256) -> DatasetManifest:
    """Embed the same fingerprint into every image and save losslessly as PNG."""
    if not isinstance(fingerprint, Fingerprint):
        raise InvalidArgument("one Fingerprint per dataset; per-image fingerprints are not supported")
    if fingerprint.n != checkpoint.config.fingerprint_len:
        raise InvalidArgument(f"fingerprint length {fingerprint.n} != codec length {checkpoint.config.fingerprint_len}")
    out = _prepare_out_dir(out_dir, overwrite)
    records = []
    for i in range(0, len(dataset), batch_size):
        stego = to_uint8(checkpoint.embed(dataset.images[i : i + batch_size], fingerprint))
        records += write_images(stego, dataset.names[i : i + batch_size], out)
    m = DatasetManifest(dataset.source_dir, str(out), fingerprint.to_hex(), fingerprint.n,
                        checkpoint.codec_id, records, method="codec")
    m.save()
    return m


@dataclass
class DatasetVerification:
    num_images: int
    mean_accuracy: float
    min_accuracy: float
    failures: list
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def verify_dataset(checkpoint, manifest: DatasetManifest, fingerprint: Fingerprint,
                   threshold: float = 0.75) -> DatasetVerification:
    """Decode every image of a manifest and compare against ``fingerprint``."""
    ds = manifest.load_images(verify=True)
    bits = checkpoint.decode_bits(ds.images)
    accs = (bits == fingerprint.bits[None, :]).mean(axis=1)
    failures = [name for name, a in zip(ds.names, accs) if a < threshold]
    return DatasetVerification(len(accs), float(accs.mean()), float(accs.min()), failures, threshold)


# -- fidelity ----------------------------------------------------------------


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


@dataclass
class FidelityMetrics:
    num_pairs: int
    mean_mse: float
    mean_psnr: float
    max_abs_dev: float
    psnr_min: float
    psnr_median: float
    psnr_max: float
    per_pair_mse: list
    per_pair_psnr: list
    difference_images: list

    def to_dict(self, per_pair: bool = False) -> dict:
        d = asdict(self)
        if not per_pair:
            d.pop("per_pair_mse"), d.pop("per_pair_psnr")
        return d


def _align(original: ImageDataset, fingerprinted: ImageDataset):
    if len(original) != len(fingerprinted):
        raise InvalidArgument(f"dataset sizes differ: {len(original)} vs {len(fingerprinted)}")
    a_names = [Path(n).with_suffix("").as_posix() for n in original.names]
    b_names = [Path(n).with_suffix("").as_posix() for n in fingerprinted.names]
    if a_names != b_names:
        bad = next(i for i, (x, y) in enumerate(zip(a_names, b_names)) if x != y)
        raise InvalidArgument(f"datasets misaligned at {a_names[bad]!r} vs {b_names[bad]!r}")
    if original.images.shape != fingerprinted.images.shape:
        raise InvalidArgument("image shapes differ")


def fidelity_report(original: ImageDataset, fingerprinted: ImageDataset, out_dir=None,
                    num_diff: int = 16, magnify: float = 10.0) -> FidelityMetrics:
    """Pairwise MSE/PSNR plus magnified |a - b| difference images for the first pairs."""
    _align(original, fingerprinted)
    a = original.as_float().astype(np.float64)
    b = fingerprinted.as_float().astype(np.float64)
    diff = a - b
    mse = (diff**2).reshape(len(a), -1).mean(axis=1)
    psnr = np.array([psnr_from_mse(m) for m in mse])
    written = []
    if out_dir is not None and num_diff > 0:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i in range(min(num_diff, len(a))):
            mag = np.clip(np.abs(diff[i]) * magnify, 0, 1)
            panel = np.concatenate([a[i], b[i], mag], axis=1)
            stem = Path(original.names[i]).with_suffix("").as_posix().replace("/", "_")
            save_png(to_uint8(mag), out / f"diff_{stem}.png")
            save_png(to_uint8(panel), out / f"panel_{stem}.png")
            written.append(f"diff_{stem}.png")
    finite = psnr[np.isfinite(psnr)]
    return FidelityMetrics(
        num_pairs=len(a),
        mean_mse=float(mse.mean()),
        mean_psnr=float(psnr.mean()) if len(finite) == len(psnr) else math.inf,
        max_abs_dev=float(np.abs(diff).max()),
        psnr_min=float(psnr.min()),
        psnr_median=float(np.median(psnr)),
        psnr_max=float(psnr.max()),
        per_pair_mse=mse.tolist(),
        per_pair_psnr=psnr.tolist(),
        difference_images=written,
    )


# -- least-significant-bit control --------------------------------------------


def _require_uint8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise InvalidArgument(f"LSB steganography needs 8-bit images, got dtype {arr.dtype}")
    return arr


def lsb_embed(image, fingerprint: Fingerprint) -> np.ndarray:
    """Write the fingerprint cyclically into the LSB of every channel of every pixel."""
    arr = _require_uint8(image)
    flat = arr.reshape(-1)
    if flat.size < fingerprint.n:
        raise InvalidArgument("image has fewer LSB slots than fingerprint bits")
    pattern = np.resize(fingerprint.bits, flat.size)
    return ((flat & 0xFE) | pattern).reshape(arr.shape)


def lsb_decode(image, n: int) -> Fingerprint:
    """Majority vote over the cyclic repetitions; ties decode as 0."""
    return Fingerprint(lsb_decode_many(np.asarray(image)[None], n)[0])


def lsb_decode_many(images, n: int) -> np.ndarray:
    arr = _require_uint8(images)
    flat = arr.reshape(len(arr), -1)
    if flat.shape[1] < n:
        raise InvalidArgument(f"image has {flat.shape[1]} LSB slots, fewer than n={n}")
    lsb = (flat & 1).astype(np.int64)
    pos = np.arange(flat.shape[1]) % n
    ones = np.zeros((len(arr), n), dtype=np.int64)
    for j in range(n):
        ones[:, j] = lsb[:, pos == j].sum(axis=1)
    counts = np.bincount(pos, minlength=n)
    return (2 * ones > counts[None, :]).astype(np.uint8)


def lsb_embed_baseline(dataset: ImageDataset, fingerprint: Fingerprint, out_dir,
                       overwrite: bool = False) -> DatasetManifest:
    images = _require_uint8(dataset.images)
    out = _prepare_out_dir(out_dir, overwrite)
    stego = np.stack([lsb_embed(im, fingerprint) for im in images])
    records = write_images(stego, dataset.names, out)
    m = DatasetManifest(dataset.source_dir, str(out), fingerprint.to_hex(), fingerprint.n,
                        None, records, method="lsb")
    m.save()
    return m


def lsb_accuracy(images, fingerprint: Fingerprint) -> np.ndarray:
    bits = lsb_decode_many(to_uint8(images), fingerprint.n)
    return (bits == fingerprint.bits[None, :]).mean(axis=1)


def mean_bit_accuracy(bits: np.ndarray, fingerprint: Fingerprint) -> float:
    return float((np.asarray(bits) == fingerprint.bits[None, :]).mean())


__all__ = [
    "ImageDataset", "ingest_folder", "DatasetManifest", "fingerprint_dataset", "verify_dataset",
    "fidelity_report", "FidelityMetrics", "lsb_embed", "lsb_decode", "lsb_embed_baseline",
    "bitwise_accuracy",
]
