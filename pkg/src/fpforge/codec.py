"""Steganography encoder/decoder used to plant fingerprints in training images.

The encoder maps an image and a fingerprint to a stego image of the same
shape; the decoder maps an image to ``n`` sigmoid probabilities.  Both follow
the usual StegaStamp-style layout: the fingerprint goes through a dense layer,
is reshaped to a one-channel map, upsampled to image size and concatenated to
the image before a U-Net.  Depth scales with resolution.

Images cross the public API as ``(N, H, W, C)`` or ``(H, W, C)`` arrays in
``[0, 1]`` (uint8 input is rescaled).  Internally everything is NCHW torch.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import blob
from .errors import InvalidArgument
from .fingerprint import DecodedFingerprint, Fingerprint

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class CodecConfig:
    resolution: int = 32
    channels: int = 3
    fingerprint_len: int = 100
    lambda_max: float = 10.0
    lambda_ramp_iters: int = 3000
    accuracy_gate: float = 0.95
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    width: int = 32
    holdout_size: int = 256
    eval_every: int = 100

    def __post_init__(self):
        r = self.resolution
        if r < 32 or r & (r - 1):
            raise InvalidArgument(f"resolution must be a power of two >= 32, got {r}")
        if self.channels not in (1, 3):
            raise InvalidArgument("channels must be 1 or 3")
        if self.fingerprint_len < 1:
            raise InvalidArgument("fingerprint_len must be positive")
        if self.lambda_max < 0:
            raise InvalidArgument("lambda_max must be >= 0")
        if not 0 < self.accuracy_gate < 1:
            raise InvalidArgument("accuracy_gate must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _num_downs(resolution: int) -> int:
    # 32 -> 2 stride-2 stages (8x8 bottleneck), 128 -> 4
    return int(math.log2(resolution)) - 3


class Encoder(nn.Module):
    def __init__(self, resolution: int, channels: int, fingerprint_len: int, width: int = 32):
        super().__init__()
        self.resolution = resolution
        self.fp_dense = nn.Linear(fingerprint_len, 16 * 16)
        self.fp_up = nn.Upsample(scale_factor=resolution // 16, mode="nearest")
        w = width
        widths = [w] + [w * 2**i for i in range(_num_downs(resolution))]
        self.inc = nn.Conv2d(channels + 1, widths[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(len(widths) - 1)
        )
        self.up_convs = nn.ModuleList()
        self.merge_convs = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.up_convs.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))
            self.merge_convs.append(nn.Conv2d(2 * widths[i - 1], widths[i - 1], 3, padding=1))
        self.out = nn.Conv2d(widths[0] + channels + 1, channels, 1)

    def forward(self, image: torch.Tensor, fingerprint: torch.Tensor) -> torch.Tensor:
        # linear and centred: a ReLU here throws away half of the injected signal
        fp = self.fp_dense(2 * fingerprint - 1).view(-1, 1, 16, 16)
        fp = self.fp_up(fp)
        inputs = torch.cat([image, fp], dim=1)
        h = F.relu(self.inc(inputs))
        skips = [h]
        for down in self.downs:
            h = F.relu(down(h))
            skips.append(h)
        skips.pop()
        for up, merge in zip(self.up_convs, self.merge_convs):
            h = F.relu(up(F.interpolate(h, scale_factor=2, mode="nearest")))
            h = F.relu(merge(torch.cat([skips.pop(), h], dim=1)))
        residual = self.out(torch.cat([h, inputs], dim=1))
        return image + residual


class Decoder(nn.Module):
    def __init__(self, resolution: int, channels: int, fingerprint_len: int, width: int = 32):
        super().__init__()
        layers, c_in, size, c = [], channels, resolution, width
        while size > 4:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.ReLU(),
                       nn.Conv2d(c, c, 3, stride=1, padding=1), nn.ReLU()]
            c_in, size = c, size // 2
            c = min(c * 2, width * 8)
        self.convs = nn.Sequential(*layers)
        self.dense = nn.Sequential(nn.Flatten(), nn.Linear(c_in * 4 * 4, 512), nn.ReLU(), nn.Linear(512, fingerprint_len))

    def logits(self, image: torch.Tensor) -> torch.Tensor:
        return self.dense(self.convs(image))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(image))


def build_codec(config: CodecConfig) -> tuple[Encoder, Decoder]:
    torch.manual_seed(config.seed)
    enc = Encoder(config.resolution, config.channels, config.fingerprint_len, config.width)
    dec = Decoder(config.resolution, config.channels, config.fingerprint_len, config.width)
    return enc, dec


def bce_fingerprint_loss(probs, target, eps: float = BCE_EPS):
    """Mean negative binary cross-entropy over bits, with probabilities clipped to [eps, 1-eps]."""
    probs_t = torch.as_tensor(probs)
    target_t = torch.as_tensor(np.asarray(target.bits if isinstance(target, Fingerprint) else target))
    if probs_t.shape != target_t.shape:
        raise InvalidArgument(f"shape mismatch: {tuple(probs_t.shape)} vs {tuple(target_t.shape)}")
    target_t = target_t.to(probs_t.dtype if probs_t.is_floating_point() else torch.float64)
    p = probs_t.clamp(eps, 1 - eps)
    return -(target_t * torch.log(p) + (1 - target_t) * torch.log(1 - p)).mean()


def image_mse_loss(stego, cover):
    stego_t, cover_t = torch.as_tensor(stego), torch.as_tensor(cover)
    if stego_t.shape != cover_t.shape:
        raise InvalidArgument(f"shape mismatch: {tuple(stego_t.shape)} vs {tuple(cover_t.shape)}")
    return ((stego_t - cover_t) ** 2).mean()


# -- array <-> tensor helpers -------------------------------------------------


def to_nchw(images) -> tuple[torch.Tensor, bool]:
    """Return a float32 NCHW tensor in [0, 1] and whether the input was a single image."""
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise InvalidArgument(f"expected (H, W, C) or (N, H, W, C) images, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        t = torch.from_numpy(arr).float().div_(255.0)
    else:
        t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return t.permute(0, 3, 1, 2).contiguous(), single


def to_nhwc(t: torch.Tensor, single: bool = False) -> np.ndarray:
    arr = t.detach().permute(0, 2, 3, 1).cpu().numpy()
    return arr[0] if single else arr


# -- checkpoint ----------------------------------------------------------------


@dataclass
class CodecCheckpoint:
    encoder: Encoder
    decoder: Decoder
    config: CodecConfig
    codec_id: str = ""
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.encoder.eval()
        self.decoder.eval()
        if not self.codec_id:
            self.codec_id = blob.content_id("codec", self._meta(), self._tensors())

    def _meta(self) -> dict:
        return {"config": self.config.to_dict(), "tags": self.tags}

    def _tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in (("encoder", self.encoder), ("decoder", self.decoder)):
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v.detach().cpu().numpy()
        return out

    def _check_image(self, x: torch.Tensor):
        r, c = self.config.resolution, self.config.channels
        if x.shape[1:] != (c, r, r):
            raise InvalidArgument(f"expected {r}x{r}x{c} images, got {tuple(x.shape[2:])}x{x.shape[1]}")

    @torch.no_grad()
    def embed(self, images, fingerprint, batch_size: int = 256) -> np.ndarray:
        x, single = to_nchw(images)
        self._check_image(x)
        fp = np.asarray(fingerprint.bits if isinstance(fingerprint, Fingerprint) else fingerprint)
        if fp.shape[-1] != self.config.fingerprint_len:
            raise InvalidArgument(f"fingerprint length {fp.shape[-1]} != codec length {self.config.fingerprint_len}")
        fp_t = torch.tensor(fp, dtype=torch.float32)
        outs = []
        for i in range(0, len(x), batch_size):
            xb = x[i : i + batch_size]
            fb = fp_t.expand(len(xb), -1) if fp_t.ndim == 1 else fp_t[i : i + batch_size]
            outs.append(self.encoder(xb, fb).clamp_(0, 1))
        return to_nhwc(torch.cat(outs), single)

    @torch.no_grad()
    def decode_probs(self, images, batch_size: int = 512) -> np.ndarray:
        x, single = to_nchw(images)
        self._check_image(x)
        probs = torch.cat([self.decoder(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
        arr = probs.double().numpy()
        return arr[0] if single else arr

    def decode(self, images):
        """Decode one image to a DecodedFingerprint, or a batch to a list of them."""
        probs = self.decode_probs(images)
        if probs.ndim == 1:
            return DecodedFingerprint(probs)
        return [DecodedFingerprint(p) for p in probs]

    def decode_bits(self, images) -> np.ndarray:
        return (self.decode_probs(images) >= 0.5).astype(np.uint8)

    def save(self, path) -> str:
        cid = blob.write(path, "codec", self._meta(), self._tensors())
        assert cid == self.codec_id
        return str(path)

    @classmethod
    def load(cls, path) -> "CodecCheckpoint":
        _, meta, tensors, cid = blob.read(path, expect_kind="codec")
        config = CodecConfig.from_dict(meta["config"])
        enc = Encoder(config.resolution, config.channels, config.fingerprint_len, config.width)
        dec = Decoder(config.resolution, config.channels, config.fingerprint_len, config.width)
        for prefix, mod in (("encoder", enc), ("decoder", dec)):
            state = {k[len(prefix) + 1 :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(state)
        ckpt = cls(enc, dec, config, tags=meta.get("tags", {}))
        if ckpt.codec_id != cid:
            from .errors import CorruptCheckpoint

            raise CorruptCheckpoint(f"{path}: recomputed codec id differs from stored id")
        return ckpt


def embed(checkpoint: CodecCheckpoint, image, fingerprint) -> np.ndarray:
    return checkpoint.embed(image, fingerprint)


def decode(checkpoint: CodecCheckpoint, image):
    return checkpoint.decode(image)


def save(checkpoint: CodecCheckpoint, path) -> str:
    return checkpoint.save(path)


def load(path) -> CodecCheckpoint:
    return CodecCheckpoint.load(path)


# -- training ------------------------------------------------------------------


@dataclass
class TrainLog:
    bce_loss: list = field(default_factory=list)
    mse_loss: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    heldout_acc_per_epoch: list = field(default_factory=list)
    heldout_checks: list = field(default_factory=list)  # (iteration, accuracy)
    gate_iteration: Optional[int] = None
    gate_epoch: Optional[int] = None
    iters_per_epoch: int = 0
    status: str = "ok"
    final_heldout_acc: float = float("nan")
    final_heldout_psnr: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_at(iteration: int, gate_iteration: Optional[int], lambda_max: float, ramp_iters: int) -> float:
    """Zero until the gate iteration, then a linear ramp to ``lambda_max``."""
    if gate_iteration is None or iteration <= gate_iteration:
        return 0.0
    if ramp_iters <= 0:
        return float(lambda_max)
    return float(lambda_max) * min(1.0, (iteration - gate_iteration) / ramp_iters)


def _as_uint8_nchw(dataset) -> torch.Tensor:
    images = getattr(dataset, "images", dataset)
    arr = np.asarray(images)
    if arr.ndim != 4 or len(arr) == 0:
        raise InvalidArgument("dataset must contain at least one (H, W, C) image")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def train_codec(
    dataset,
    config: CodecConfig,
    callback: Optional[Callable[[int, dict], None]] = None,
) -> tuple[CodecCheckpoint, TrainLog]:
    """Train encoder/decoder with BCE + lambda * MSE and the accuracy-gated lambda ramp."""
    data = _as_uint8_nchw(dataset)
    n_img, c, h, w = data.shape
    if (c, h, w) != (config.channels, config.resolution, config.resolution):
        raise InvalidArgument(f"dataset images are {h}x{w}x{c}, config expects "
                              f"{config.resolution}x{config.resolution}x{config.channels}")
    enc, dec = build_codec(config)
    gen = torch.Generator().manual_seed(config.seed)

    perm = torch.randperm(n_img, generator=gen)
    n_hold = min(config.holdout_size, n_img // 5) if n_img >= 2 else 0
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if n_hold == 0:
        hold_idx = train_idx[:1]
    hold_x = data[hold_idx].float() / 255.0
    hold_fp = torch.randint(0, 2, (len(hold_x), config.fingerprint_len), generator=gen).float()

    opt = torch.optim.Adam(list(enc.parameters()) + list(dec.parameters()), lr=config.learning_rate)
    bs = min(config.batch_size, len(train_idx))
    iters_per_epoch = max(1, len(train_idx) // bs)
    tlog = TrainLog(iters_per_epoch=iters_per_epoch)

    @torch.no_grad()
    def heldout_acc():
        enc.eval(), dec.eval()
        probs = dec(enc(hold_x, hold_fp))
        enc.train(), dec.train()
        return float(((probs >= 0.5).float() == hold_fp).float().mean())

    it = 0
    for epoch in range(config.epochs):
        order = train_idx[torch.randperm(len(train_idx), generator=gen)]
        for b in range(iters_per_epoch):
            x = data[order[b * bs : (b + 1) * bs]].float() / 255.0
            fp = torch.randint(0, 2, (len(x), config.fingerprint_len), generator=gen).float()
            lam = lambda_at(it, tlog.gate_iteration, config.lambda_max, config.lambda_ramp_iters)
            stego = enc(x, fp)
            probs = dec(stego)
            bce = bce_fingerprint_loss(probs, fp)
            mse = image_mse_loss(stego, x)
            loss = bce + lam * mse
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            acc = float(((probs.detach() >= 0.5).float() == fp).float().mean())
            tlog.bce_loss.append(float(bce.detach()))
            tlog.mse_loss.append(float(mse.detach()))
            tlog.lam.append(lam)
            tlog.train_acc.append(acc)
            it += 1
            if it % config.eval_every == 0:
                hacc = heldout_acc()
                tlog.heldout_checks.append((it, hacc))
                if tlog.gate_iteration is None and hacc >= config.accuracy_gate:
                    tlog.gate_iteration = it
                    tlog.gate_epoch = epoch + 1
                    log.info("accuracy gate reached at iteration %d (epoch %d): %.4f", it, epoch + 1, hacc)
                if callback is not None:
                    callback(it, {"bce": tlog.bce_loss[-1], "mse": tlog.mse_loss[-1], "lambda": lam, "heldout_acc": hacc})
        tlog.heldout_acc_per_epoch.append(heldout_acc())
        log.info("epoch %d/%d heldout acc %.4f", epoch + 1, config.epochs, tlog.heldout_acc_per_epoch[-1])

    if tlog.gate_iteration is None:
        tlog.status = "gate_not_reached"
        warnings.warn(f"codec accuracy gate {config.accuracy_gate} never reached; lambda stayed 0")

    ckpt = CodecCheckpoint(enc, dec, config)
    with torch.no_grad():
        stego = ckpt.encoder(hold_x, hold_fp).clamp(0, 1)
        bits = ckpt.decoder(stego) >= 0.5
        tlog.final_heldout_acc = float((bits.float() == hold_fp).float().mean())
        mse = float(((stego - hold_x) ** 2).mean())
        tlog.final_heldout_psnr = float("inf") if mse == 0 else -10 * math.log10(mse)
    return ckpt, tlog
