"""Artificial Training Sets (ATS) steganalysis attack.

An attacker without the victim's encoder trains a shadow encoder of their
own and uses it to manufacture labelled data from the unlabelled test set:
original images are the 0-1 class, images pushed through the shadow encoder
twice more are the 2-3 class.  At test time every image is encoded once and
classified; the prediction is mapped back to "was it fingerprinted".

If the victim's and shadow's embeddings do not stack, this collapses to
chance, which is what secrecy means here.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import convolve2d
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .codec import CodecCheckpoint, CodecConfig, train_codec
from .data import to_uint8
from .errors import InvalidArgument

log = logging.getLogger(__name__)

SPAM_T = 3
# (dy, dx): four axis-aligned directions, then four diagonal ones
_DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1))

HIGH_PASS = np.array([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]], dtype=np.float64) / 4.0
HIST_BINS = 16
HIST_RANGE = (-0.125, 0.125)
POOLED = 8


def train_shadow_codec(dataset, config: CodecConfig, seed: int) -> tuple[CodecCheckpoint, object]:
    """Train the attacker's own codec; returns (checkpoint, train log)."""
    ckpt, tlog = train_codec(dataset, dataclasses.replace(config, seed=seed))
    shadow = CodecCheckpoint(ckpt.encoder, ckpt.decoder, ckpt.config, tags={"role": "shadow"})
    return shadow, tlog


def residual_features(images) -> np.ndarray:
    """Per image: 16-bin residual histogram per channel + pooled grayscale residual."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    n, h, w, c = arr.shape
    feats = []
    for im in arr:
        parts = []
        for ch in range(c):
            res = convolve2d(im[..., ch], HIGH_PASS, mode="valid")
            hist, _ = np.histogram(np.clip(res, *HIST_RANGE), bins=HIST_BINS, range=HIST_RANGE)
            parts.append(hist / res.size)
        gray = im.mean(axis=2)
        res = np.abs(convolve2d(gray, HIGH_PASS, mode="valid"))
        rh, rw = res.shape
        bh, bw = rh // POOLED, rw // POOLED
        pooled = res[: bh * POOLED, : bw * POOLED].reshape(POOLED, bh, POOLED, bw).mean(axis=(1, 3))
        parts.append(pooled.ravel())
        feats.append(np.concatenate(parts))
    return np.stack(feats)


def _shifted(a: np.ndarray, dy: int, dx: int, k: int, m: int) -> np.ndarray:
    """Values at p + k*(dy, dx) for every p whose p + m*(dy, dx) is in bounds."""
    h, w = a.shape[-2:]
    r0, r1 = max(0, -m * dy), h - max(0, m * dy)
    c0, c1 = max(0, -m * dx), w - max(0, m * dx)
    return a[..., r0 + k * dy : r1 + k * dy, c0 + k * dx : c1 + k * dx]


def _spam_channel(c: np.ndarray, t: int, order: int) -> np.ndarray:
    """SPAM for a batch of single-channel int images ``(N, H, W)``.

    Differences d(p) = c(p) - c(p + dir) are clipped to [-t, t]; the Markov
    transition counts of ``order + 1`` consecutive differences along the same
    direction are normalised per direction, then averaged over the four axis
    directions and over the four diagonals.
    """
    n, k = len(c), 2 * t + 1
    size = k ** (order + 1)
    groups = []
    for group in (_DIRECTIONS[:4], _DIRECTIONS[4:]):
        acc = np.zeros((n, size))
        for dy, dx in group:
            idx = 0
            for j in range(order + 1):
                d = _shifted(c, dy, dx, j, order + 1) - _shifted(c, dy, dx, j + 1, order + 1)
                idx = idx * k + (np.clip(d, -t, t) + t)
            flat = idx.reshape(n, -1) + (np.arange(n) * size)[:, None]
            counts = np.bincount(flat.ravel(), minlength=n * size).reshape(n, size)
            acc += counts / counts.sum(axis=1, keepdims=True)
        groups.append(acc / 4)
    return np.concatenate(groups, axis=1)


def spam_features(images, t: int = SPAM_T, order: int = 1, channels: str = "opponent") -> np.ndarray:
    """Subtractive pixel adjacency (SPAM) features on uint8-scale pixel values.

    ``channels``: "rgb", "gray" (R+G+B) or "opponent" (R, G, B plus R-G, G-B
    and R+G+B, which also sees changes to inter-channel correlation).
    """
    u8 = to_uint8(images).astype(np.int32)
    r, g, b = u8[..., 0], u8[..., 1], u8[..., 2]
    planes = {"rgb": [r, g, b], "gray": [r + g + b],
              "opponent": [r, g, b, r - g, g - b, r + g + b]}.get(channels)
    if planes is None:
        raise InvalidArgument(f"unknown channel set {channels!r}")
    return np.concatenate([_spam_channel(pl, t, order) for pl in planes], axis=1)


FEATURE_SETS = {
    "spam_opponent": ("first-order SPAM, T=3, on R, G, B, R-G, G-B, R+G+B", spam_features),
    "residual_hist": (f"3x3 high-pass residual histogram ({HIST_BINS} bins/channel, range {HIST_RANGE}) "
                      f"+ {POOLED}x{POOLED} pooled grayscale |residual|", residual_features),
    "spam_gray_2nd": ("second-order SPAM, T=3, on R+G+B",
                      lambda im: spam_features(im, order=2, channels="gray")),
}
DEFAULT_FEATURES = "spam_opponent"


def _encode_random(shadow: CodecCheckpoint, images, rng: np.random.Generator) -> np.ndarray:
    fps = rng.integers(0, 2, size=(len(images), shadow.config.fingerprint_len)).astype(np.float32)
    return to_uint8(shadow.embed(images, fps))


@dataclass
class AtsReport:
    num_positive: int
    num_negative: int
    accuracy: float
    precision: dict
    recall: dict
    shadow_codec_id: str
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _per_class(pred: np.ndarray, truth: np.ndarray):
    precision, recall = {}, {}
    for label, name in ((1, "fingerprinted"), (0, "clean")):
        tp = int(((pred == label) & (truth == label)).sum())
        pp, ap = int((pred == label).sum()), int((truth == label).sum())
        precision[name] = tp / pp if pp else float("nan")
        recall[name] = tp / ap if ap else float("nan")
    return precision, recall


def ats_attack(test_images, labels, shadow: CodecCheckpoint, seed: int = 0,
               svm_path: Optional[Path] = None, features: str = DEFAULT_FEATURES) -> AtsReport:
    """Run the ATS protocol on a balanced, unlabelled test set.

    ``labels`` (1 = fingerprinted) are only used for scoring after all
    predictions are made.  ``features`` names an entry of ``FEATURE_SETS``.
    """
    if features not in FEATURE_SETS:
        raise InvalidArgument(f"unknown feature set {features!r}; choose from {sorted(FEATURE_SETS)}")
    feat_desc, feat = FEATURE_SETS[features]
    images = to_uint8(test_images)
    labels = np.asarray(labels).astype(int)
    if len(images) != len(labels):
        raise InvalidArgument("images and labels differ in length")
    n_pos, n_neg = int((labels == 1).sum()), int((labels == 0).sum())
    if n_pos != n_neg or n_pos == 0:
        raise InvalidArgument(f"ATS needs a balanced test set, got {n_pos} positive / {n_neg} negative")

    rng = np.random.default_rng(seed)
    negatives = images
    positives = _encode_random(shadow, _encode_random(shadow, images, rng), rng)
    x_train = np.concatenate([feat(negatives), feat(positives)])
    y_train = np.concatenate([np.zeros(len(negatives), int), np.ones(len(positives), int)])

    grid = {"svc__C": [0.1, 1.0, 10.0, 100.0], "svc__gamma": ["scale", 0.001, 0.01, 0.1]}
    search = GridSearchCV(make_pipeline(StandardScaler(), SVC(kernel="rbf")), grid,
                          cv=StratifiedKFold(5, shuffle=True, random_state=seed))
    search.fit(x_train, y_train)

    once = _encode_random(shadow, images, rng)
    pred = search.predict(feat(once))  # 0 -> 0-1 class -> clean, 1 -> 2-3 class -> fingerprinted
    precision, recall = _per_class(pred, labels)
    if svm_path is not None:
        import joblib

        Path(svm_path).parent.mkdir(parents=True, exist_ok=True)
        joblib.dump(search.best_estimator_, svm_path)
    return AtsReport(
        num_positive=n_pos,
        num_negative=n_neg,
        accuracy=float((pred == labels).mean()),
        precision=precision,
        recall=recall,
        shadow_codec_id=shadow.codec_id,
        settings={
            "features": f"{features}: {feat_desc}",
            "classifier": "RBF SVM, 5-fold CV grid search",
            "best_params": {k: v for k, v in search.best_params_.items()},
            "cv_accuracy": float(search.best_score_),
            "seed": seed,
        },
    )
