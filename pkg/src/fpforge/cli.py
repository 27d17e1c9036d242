"""Command-line front end: ``fpforge <subcommand> [options]``.

Every subcommand resolves its parameters as flags > ``--config`` JSON >
built-in defaults, runs, and writes ``report.json`` into ``--out`` with the
resolved config, seed, input hashes, library versions and metrics.

Exit codes: 0 success, 1 bad usage or invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .errors import (
    CollisionError,
    ConflictError,
    CorruptCheckpoint,
    FpforgeError,
    IntegrityError,
    InvalidArgument,
    OutputExists,
)
from .fingerprint import DEFAULT_LENGTH, DEFAULT_THRESHOLD, Registry, load_fingerprint
from .reports import write_report

log = logging.getLogger("fpforge")

REPORT_NAME = "report.json"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass
class RunConfig:
    """Everything needed to re-run a subcommand."""

    command: str
    params: dict
    seed: int = 0
    out: str = ""
    overwrite: bool = False
    inputs: dict = field(default_factory=dict)  # path -> sha256 / content id

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- helpers -------------------------------------------------------------------


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    if (out / REPORT_NAME).exists() and not rc.overwrite:
        raise OutputExists(f"{out} already holds a run report; pass --overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _hash_input(rc: RunConfig, path) -> None:
    from .data import MANIFEST_NAME, sha256_file

    p = Path(path)
    if p.is_dir() and (p / MANIFEST_NAME).exists():
        rc.inputs[str(p)] = "manifest:" + sha256_file(p / MANIFEST_NAME)
    elif p.is_file():
        rc.inputs[str(p)] = sha256_file(p)


def _need(rc: RunConfig, *keys):
    missing = [k for k in keys if rc.params.get(k) in (None, "", [])]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise InvalidArgument(f"{rc.command}: missing required option(s) {flags}")


def _load_codec(rc: RunConfig, key: str = "codec"):
    from .codec import load

    _need(rc, key)
    _hash_input(rc, rc.params[key])
    return load(rc.params[key])


def _load_generator(rc: RunConfig, path):
    from .transfer import GeneratorCheckpoint

    _hash_input(rc, path)
    return GeneratorCheckpoint.load(path)


def _images(rc: RunConfig, path, resolution: Optional[int] = None, num_samples: int = 0, seed: int = 0):
    """Images from a manifest folder (verified), a plain folder, or a generator checkpoint."""
    from .data import MANIFEST_NAME, DatasetManifest, ingest_folder, to_uint8

    p = Path(path)
    _hash_input(rc, p)
    if p.is_file():
        from .transfer import sample

        gen = _load_generator(rc, p)
        return to_uint8(sample(gen, num_samples or 1000, seed=seed))
    if (p / MANIFEST_NAME).exists():
        return DatasetManifest.load(p).load_images().images
    if resolution is None:
        raise InvalidArgument(f"{p}: plain folders need --resolution")
    return ingest_folder(p, resolution, limit=rc.params.get("limit")).images


def _fingerprint(rc: RunConfig, key: str = "fingerprint", fallback=None):
    spec = rc.params.get(key)
    if spec:
        return load_fingerprint(spec, rc.params.get("fingerprint_len") or DEFAULT_LENGTH)
    if fallback is not None:
        return fallback
    raise InvalidArgument(f"{rc.command}: --{key.replace('_', '-')} is required")


def _generator_fingerprint(gen):
    from .fingerprint import Fingerprint

    ref = gen.manifest_ref or {}
    hex_ = ref.get("fingerprint_hex") or ref.get("joint_fingerprint_hex")
    return Fingerprint.from_hex(hex_, int(ref["n"])) if hex_ else None


def _finish(rc: RunConfig, out: Path, metrics: dict, **extra) -> dict:
    write_report(out / REPORT_NAME, rc.command, rc.to_dict(), metrics, **extra)
    return metrics


def _print(line: str):
    print(line, flush=True)


# -- subcommands ---------------------------------------------------------------


def cmd_train_codec(rc: RunConfig):
    """Train an encoder/decoder pair on an image folder."""
    from .codec import CodecConfig, train_codec
    from .data import ingest_folder

    p = rc.params
    _need(rc, "data")
    cfg_fields = {f.name for f in dataclasses.fields(CodecConfig)}
    cfg = CodecConfig(**{k: v for k, v in p.items() if k in cfg_fields and v is not None}, seed=rc.seed)
    out = _out_dir(rc)
    ds = ingest_folder(p["data"], cfg.resolution, cfg.channels, limit=p.get("limit"))
    ckpt, tlog = train_codec(ds.images, cfg)
    path = out / "codec.ckpt"
    ckpt.save(path)
    metrics = {
        "codec_id": ckpt.codec_id,
        "num_images": len(ds),
        "gate_iteration": tlog.gate_iteration,
        "gate_epoch": tlog.gate_epoch,
        "status": tlog.status,
        "heldout_accuracy": tlog.final_heldout_acc,
        "heldout_psnr": tlog.final_heldout_psnr,
        "heldout_acc_per_epoch": tlog.heldout_acc_per_epoch,
    }
    _print(f"codec {ckpt.codec_id[:12]}  held-out bit acc {tlog.final_heldout_acc:.4f}  "
           f"PSNR {tlog.final_heldout_psnr:.2f} dB  gate epoch {tlog.gate_epoch}")
    return _finish(rc, out, metrics, artifacts={"checkpoint": str(path)}, config_resolved=cfg.to_dict())


def cmd_embed_dataset(rc: RunConfig):
    """Fingerprint every image of a folder and write a manifest."""
    from .data import fingerprint_dataset, ingest_folder

    p = rc.params
    _need(rc, "data", "fingerprint")
    codec = _load_codec(rc)
    fp = _fingerprint(rc)
    out = Path(rc.out)
    if out.exists() and any(out.iterdir()) and not rc.overwrite:
        raise OutputExists(f"{out} is not empty; pass --overwrite to replace it")
    ds = ingest_folder(p["data"], codec.config.resolution, codec.config.channels, limit=p.get("limit"))
    m = fingerprint_dataset(codec, ds, fp, out, overwrite=True)
    metrics = {"num_images": len(ds), "skipped": ds.skipped, "fingerprint_hex": fp.to_hex(), "n": fp.n,
               "codec_id": codec.codec_id, "manifest_sha256": m.content_hash()}
    _print(f"embedded {fp.to_hex()} into {len(ds)} images -> {out}")
    return _finish(rc, out, metrics)


def cmd_verify_dataset(rc: RunConfig):
    """Decode a fingerprinted dataset and check it against its fingerprint."""
    from .data import DatasetManifest, verify_dataset

    p = rc.params
    _need(rc, "dataset")
    codec = _load_codec(rc)
    m = DatasetManifest.load(p["dataset"])
    _hash_input(rc, p["dataset"])
    fp = _fingerprint(rc, fallback=m.fingerprint)
    res = verify_dataset(codec, m, fp, threshold=p["threshold"])
    out = _out_dir(rc)
    _print(f"{res.num_images} images  mean bit acc {res.mean_accuracy:.4f}  min {res.min_accuracy:.4f}  "
           f"below threshold {len(res.failures)}")
    return _finish(rc, out, res.to_dict())


def cmd_fidelity_report(rc: RunConfig):
    """PSNR/MSE between original and fingerprinted images, plus difference images."""
    from .data import DatasetManifest, fidelity_report, ingest_folder

    p = rc.params
    _need(rc, "original", "fingerprinted")
    fpd = DatasetManifest.load(p["fingerprinted"]).load_images()
    _hash_input(rc, p["fingerprinted"])
    orig = ingest_folder(p["original"], fpd.resolution, fpd.channels)
    out = _out_dir(rc)
    m = fidelity_report(orig, fpd, out / "diffs", num_diff=p["num_diff"], magnify=p["magnify"])
    _print(f"{m.num_pairs} pairs  mean PSNR {m.mean_psnr:.2f} dB  mean MSE {m.mean_mse:.3g}")
    return _finish(rc, out, m.to_dict())


def _gan_config(rc: RunConfig, resolution: int):
    from .transfer import GeneratorConfig

    fields = {f.name for f in dataclasses.fields(GeneratorConfig)}
    kw = {k: v for k, v in rc.params.items() if k in fields and v is not None}
    kw.setdefault("resolution", resolution)
    return GeneratorConfig(**dict(kw, seed=rc.seed))


def _gan_source(rc: RunConfig):
    from .data import MANIFEST_NAME, DatasetManifest, ingest_folder

    p = Path(rc.params["data"])
    _hash_input(rc, p)
    if (p / MANIFEST_NAME).exists():
        m = DatasetManifest.load(p)
        return m, int(m.load_images(verify=False).images.shape[1])
    res = rc.params.get("resolution")
    if not res:
        raise InvalidArgument("plain image folders need --resolution")
    ds = ingest_folder(p, res, limit=rc.params.get("limit"))
    return ds, res


def cmd_train_gan(rc: RunConfig):
    """Train a DCGAN on a (fingerprinted) dataset."""
    from .transfer import train_generator

    _need(rc, "data")
    src, res = _gan_source(rc)
    cfg = _gan_config(rc, res)
    out = _out_dir(rc)
    path = out / "generator.ckpt"
    ckpt = train_generator(src, cfg, model_id=rc.params.get("model_id") or "", out_path=path)
    metrics = {"model_id": ckpt.model_id, "content_id": ckpt.content_id, "iterations": cfg.iterations,
               "final_d_loss": (ckpt.history.get("d_loss") or [None])[-1],
               "final_g_loss": (ckpt.history.get("g_loss") or [None])[-1],
               "objective_terms": ckpt.history.get("objective_terms")}
    _print(f"generator {ckpt.content_id[:12]} trained for {cfg.iterations} iterations -> {path}")
    return _finish(rc, out, metrics, artifacts={"checkpoint": str(path)}, config_resolved=cfg.to_dict())


def cmd_train_joint_baseline(rc: RunConfig):
    """Train a GAN with a fingerprint-reconstruction loss added to its objective."""
    from .transfer import train_joint_baseline

    p = rc.params
    _need(rc, "data", "fingerprint")
    codec = _load_codec(rc)
    fp = _fingerprint(rc)
    src, res = _gan_source(rc)
    cfg = _gan_config(rc, res)
    out = _out_dir(rc)
    path = out / "generator.ckpt"
    ckpt = train_joint_baseline(src, fp, codec.decoder, cfg, eta=p["eta"], model_id=p.get("model_id") or "",
                                out_path=path, decoder_mode=p["decoder_mode"])
    metrics = {"content_id": ckpt.content_id, "eta": p["eta"], "iterations": cfg.iterations,
               "decoder_mode": p["decoder_mode"],
               "final_fingerprint_loss": (ckpt.history.get("extra_loss") or [None])[-1]}
    _print(f"joint-baseline generator (eta={p['eta']}) -> {path}")
    return _finish(rc, out, metrics, artifacts={"checkpoint": str(path)}, config_resolved=cfg.to_dict())


def cmd_eval_transfer(rc: RunConfig):
    """Decode generated samples; bit accuracy and p-values."""
    from .codec import CodecCheckpoint
    from .transfer import evaluate_transferability

    p = rc.params
    _need(rc, "generator")
    gen = _load_generator(rc, p["generator"])
    codec = _load_codec(rc)
    fp = _fingerprint(rc, fallback=_generator_fingerprint(gen))
    if p.get("use_joint_decoder"):
        if gen.fp_decoder is None:
            raise InvalidArgument("--use-joint-decoder needs a joint-baseline generator")
        codec = CodecCheckpoint(codec.encoder, gen.fp_decoder, codec.config)
    rep = evaluate_transferability(gen, codec, fp, num_samples=p["num_samples"], seed=rc.seed,
                                   threshold=p["threshold"])
    out = _out_dir(rc)
    _print(f"{'model':<24}{'Bit acc':>10}{'p-value':>12}")
    row = rep.table_row().replace("bit acc ", "").split("  p-value ")
    _print(f"{Path(p['generator']).stem:<24}{row[0]:>10}{row[1]:>12}")
    return _finish(rc, out, rep.to_dict(per_image=p.get("per_image", False)))


def _registry(rc: RunConfig) -> Registry:
    _need(rc, "registry")
    path = Path(rc.params["registry"])
    if not path.exists():
        raise InvalidArgument(f"registry {path} does not exist")
    _hash_input(rc, path)
    return Registry(path, threshold=rc.params["threshold"])


def _named_sources(rc: RunConfig, specs, resolution, num_samples, seed) -> dict:
    """``name=path`` (or bare path, named by its stem) -> images."""
    out = {}
    for s in specs:
        name, _, path = s.rpartition("=")
        name = name or Path(path).stem
        out[name] = _images(rc, path, resolution, num_samples, seed)
    return out


def cmd_detect(rc: RunConfig):
    """Real-vs-generated detection against a registry."""
    from .transfer import detection_experiment

    p = rc.params
    _need(rc, "real", "generated")
    codec = _load_codec(rc)
    reg = _registry(rc)
    r = codec.config.resolution
    real = _images(rc, p["real"], r)
    gens = _named_sources(rc, p["generated"], r, p["num_samples"], rc.seed)
    res = detection_experiment(real, gens, codec, reg, threshold=p["threshold"])
    out = _out_dir(rc)
    _print(f"{'real':>8}{'fake':>8}{'Detection acc':>16}")
    _print(f"{res['num_real']:>8}{res['num_fake']:>8}{res['accuracy']:>16.3f}")
    return _finish(rc, out, res)


def cmd_attribute(rc: RunConfig):
    """Attribute images to registered models."""
    from .transfer import attribution_experiment

    p = rc.params
    _need(rc, "images")
    codec = _load_codec(rc)
    reg = _registry(rc)
    srcs = _named_sources(rc, p["images"], codec.config.resolution, p["num_samples"], rc.seed)
    res = attribution_experiment(srcs, codec, reg, threshold=p["threshold"])
    out = _out_dir(rc)
    for name, s in res["per_source"].items():
        label = name if s["registered"] else f"{name} (unregistered)"
        _print(f"{label:<32}{s['num_images']:>8}{s['accuracy']:>10.3f}")
    _print(f"{'Attribution acc':<32}{'':>8}{res['attribution_accuracy']:>10.3f}")
    return _finish(rc, out, res)


def _grid(rc: RunConfig, kind: str, resolution: int):
    from .perturb import default_grid

    g = rc.params.get("grid")
    return [float(x) for x in g] if g else default_grid(kind, resolution)


def _sweep_out(rc: RunConfig, sweep):
    from .perturb import emit_plots, working_range

    out = _out_dir(rc)
    plots = emit_plots(sweep, out / f"sweep_{sweep.kind}", threshold=rc.params["threshold"])
    wr = working_range(sweep, rc.params["threshold"])
    for m, a in zip(sweep.grid, sweep.accuracy):
        _print(f"{sweep.kind} {m:g}: bit acc {a:.3f}")
    _print(f"working range: {'empty' if wr is None else f'[{wr[0]:g}, {wr[1]:g}]'}")
    return _finish(rc, out, dict(sweep.to_dict(), working_range=wr), plots=[str(x) for x in plots])


def cmd_bench_image(rc: RunConfig):
    """Accuracy under image perturbations of increasing strength."""
    from .perturb import IMAGE_KINDS, sweep_image

    p = rc.params
    _need(rc, "images", "kind")
    if p["kind"] not in IMAGE_KINDS:
        raise InvalidArgument(f"--kind must be one of {IMAGE_KINDS}")
    codec = _load_codec(rc)
    r = codec.config.resolution
    images = _images(rc, p["images"], r, p["num_samples"], rc.seed)
    ref = _images(rc, p["reference"], r) if p.get("reference") else None
    fallback = None
    if Path(p["images"]).is_file():
        fallback = _generator_fingerprint(_load_generator(rc, p["images"]))
    fp = _fingerprint(rc, fallback=fallback)
    sweep = sweep_image(images, codec, fp, p["kind"], _grid(rc, p["kind"], r), reference_images=ref, seed=rc.seed)
    return _sweep_out(rc, sweep)


def cmd_bench_model(rc: RunConfig):
    """Accuracy under generator weight perturbations."""
    from .perturb import MODEL_KINDS, sweep_model

    p = rc.params
    _need(rc, "generator", "kind")
    if p["kind"] not in MODEL_KINDS:
        raise InvalidArgument(f"--kind must be one of {MODEL_KINDS}")
    codec = _load_codec(rc)
    gen = _load_generator(rc, p["generator"])
    fp = _fingerprint(rc, fallback=_generator_fingerprint(gen))
    qref = _images(rc, p["quality_reference"], codec.config.resolution) if p.get("quality_reference") else None
    sweep = sweep_model(gen, codec, fp, p["kind"], _grid(rc, p["kind"], codec.config.resolution),
                        num_samples=p["num_samples"], seed=rc.seed, quality_reference=qref, draws=p.get("draws"))
    return _sweep_out(rc, sweep)


def cmd_attack_ats(rc: RunConfig):
    """Artificial-training-sets steganalysis attack with a shadow codec."""
    from .ats import ats_attack, train_shadow_codec
    from .codec import CodecConfig, load
    from .data import ingest_folder

    p = rc.params
    _need(rc, "positive", "negative")
    if p.get("shadow"):
        _hash_input(rc, p["shadow"])
        shadow = load(p["shadow"])
        r = shadow.config.resolution
    elif p.get("shadow_data"):
        r = p.get("resolution")
        if not r:
            raise InvalidArgument("--shadow-data needs --resolution")
        ds = ingest_folder(p["shadow_data"], r, limit=p.get("limit"))
        shadow, _ = train_shadow_codec(ds.images, CodecConfig(resolution=r, epochs=p["shadow_epochs"]), rc.seed)
    else:
        raise InvalidArgument("attack-ats needs --shadow or --shadow-data")
    pos = _images(rc, p["positive"], r)
    neg = _images(rc, p["negative"], r)
    images = np.concatenate([pos, neg])
    labels = np.r_[np.ones(len(pos), int), np.zeros(len(neg), int)]
    out = _out_dir(rc)
    if p.get("shadow_data"):
        shadow.save(out / "shadow.ckpt")
    rep = ats_attack(images, labels, shadow, seed=rc.seed, svm_path=out / "svm.joblib", features=p["features"])
    _print(f"ATS accuracy {rep.accuracy:.3f} on {rep.num_positive}+{rep.num_negative} images")
    return _finish(rc, out, rep.to_dict())


def cmd_lsb_control(rc: RunConfig):
    """Least-significant-bit embedding control: embed a folder or decode generator samples."""
    from .data import ImageDataset, ingest_folder, lsb_accuracy, lsb_embed_baseline, to_uint8

    p = rc.params
    _need(rc, "fingerprint")
    fp = _fingerprint(rc)
    out = Path(rc.out)
    metrics = {"fingerprint_hex": fp.to_hex(), "n": fp.n}
    if p.get("data"):
        r = p.get("resolution")
        if not r:
            raise InvalidArgument("--data needs --resolution")
        if out.exists() and any(out.iterdir()) and not rc.overwrite:
            raise OutputExists(f"{out} is not empty; pass --overwrite to replace it")
        ds = ingest_folder(p["data"], r, limit=p.get("limit"))
        m = lsb_embed_baseline(ds, fp, out, overwrite=True)
        acc = lsb_accuracy(m.load_images().images, fp)
        metrics["still_image_roundtrip"] = float(acc.mean())
        _print(f"LSB still-image roundtrip {acc.mean():.4f} over {len(acc)} images")
    elif p.get("generator"):
        images = _images(rc, p["generator"], None, p["num_samples"], rc.seed)
        out = _out_dir(rc)
        acc = lsb_accuracy(to_uint8(images), fp)
        metrics["generated_accuracy"] = float(acc.mean())
        metrics["num_samples"] = len(acc)
        _print(f"LSB decode on {len(acc)} generated images: bit acc {acc.mean():.4f}")
    else:
        raise InvalidArgument("lsb-control needs --data (embed) or --generator (decode samples)")
    out.mkdir(parents=True, exist_ok=True)
    return _finish(rc, out, metrics)


def cmd_registry_add(rc: RunConfig):
    """Register a model id with its fingerprint."""
    p = rc.params
    _need(rc, "registry", "model_id", "fingerprint")
    reg = Registry(p["registry"], threshold=p["threshold"])
    fp = _fingerprint(rc)
    e = reg.register(p["model_id"], fp, codec_id=p.get("codec_id") or "")
    _print(f"registered {e.model_id}: {fp.to_hex()}")
    if rc.out:
        _finish(rc, _out_dir(rc), {"model_id": e.model_id, "fingerprint_hex": fp.to_hex(), "n": fp.n,
                                   "registry_size": len(reg)})
    return {"model_id": e.model_id}


def cmd_registry_list(rc: RunConfig):
    """List registry entries."""
    reg = _registry(rc)
    rows = [{"model_id": e.model_id, "fingerprint_hex": e.fingerprint.to_hex(), "n": e.fingerprint.n,
             "codec_id": e.codec_id, "created_at": e.created_at} for e in reg]
    for r in rows:
        _print(f"{r['model_id']:<24}{r['fingerprint_hex']}  n={r['n']}  codec={r['codec_id'][:12]}")
    if rc.out:
        _finish(rc, _out_dir(rc), {"entries": rows})
    return {"entries": rows}


# -- parser --------------------------------------------------------------------

_COMMON_DEFAULTS = {"threshold": DEFAULT_THRESHOLD, "num_samples": 1000}

# subcommand -> (handler, defaults, flag definitions)
Flag = tuple  # (name, kwargs)


def _f(name, **kw) -> Flag:
    return name, kw


_MODEL_FLAGS = [_f("--codec"), _f("--fingerprint", help="hex:<hex>, seed:<int> or a JSON file"),
                _f("--fingerprint-len", type=int)]
_GAN_FLAGS = [_f("--data"), _f("--resolution", type=int), _f("--limit", type=int), _f("--iterations", type=int),
              _f("--batch-size", type=int), _f("--latent-dim", type=int), _f("--width", type=int),
              _f("--lr-g", type=float), _f("--lr-d", type=float), _f("--checkpoint-every", type=int),
              _f("--model-id")]

COMMANDS: dict[str, tuple[Callable, dict, list]] = {
    "train-codec": (cmd_train_codec, {}, [
        _f("--data"), _f("--limit", type=int), _f("--resolution", type=int), _f("--channels", type=int),
        _f("--fingerprint-len", type=int), _f("--epochs", type=int), _f("--batch-size", type=int),
        _f("--learning-rate", type=float), _f("--lambda-max", type=float), _f("--lambda-ramp-iters", type=int),
        _f("--width", type=int)]),
    "embed-dataset": (cmd_embed_dataset, {}, _MODEL_FLAGS + [_f("--data"), _f("--limit", type=int)]),
    "verify-dataset": (cmd_verify_dataset, {}, _MODEL_FLAGS + [_f("--dataset")]),
    "fidelity-report": (cmd_fidelity_report, {"num_diff": 16, "magnify": 10.0}, [
        _f("--original"), _f("--fingerprinted"), _f("--num-diff", type=int), _f("--magnify", type=float)]),
    "train-gan": (cmd_train_gan, {}, _GAN_FLAGS),
    "train-joint-baseline": (cmd_train_joint_baseline, {"eta": 1.0, "decoder_mode": "fresh"}, _GAN_FLAGS + _MODEL_FLAGS + [
        _f("--eta", type=float),
        _f("--decoder-mode", choices=["fresh", "warm", "frozen"],
           help="fresh: re-initialised and trained jointly; warm: start from the codec decoder; "
                "frozen: codec decoder, never updated")]),
    "eval-transfer": (cmd_eval_transfer, {}, _MODEL_FLAGS + [
        _f("--generator"), _f("--num-samples", type=int), _f("--per-image", action="store_true"),
        _f("--use-joint-decoder", action="store_true")]),
    "detect": (cmd_detect, {}, [_f("--codec"), _f("--registry"), _f("--real"),
                                _f("--generated", nargs="+", help="name=path; path is a folder or generator"),
                                _f("--num-samples", type=int), _f("--limit", type=int)]),
    "attribute": (cmd_attribute, {}, [_f("--codec"), _f("--registry"),
                                      _f("--images", nargs="+", help="name=path; name is the true model id"),
                                      _f("--num-samples", type=int), _f("--limit", type=int)]),
    "bench-image": (cmd_bench_image, {"num_samples": 500}, _MODEL_FLAGS + [
        _f("--images", help="folder or generator checkpoint"), _f("--reference"), _f("--kind"),
        _f("--grid", nargs="+"), _f("--num-samples", type=int), _f("--limit", type=int)]),
    "bench-model": (cmd_bench_model, {"num_samples": 500}, _MODEL_FLAGS + [
        _f("--generator"), _f("--quality-reference"), _f("--kind"), _f("--grid", nargs="+"),
        _f("--num-samples", type=int), _f("--draws", type=int, help="independent weight perturbations per magnitude"),
        _f("--limit", type=int)]),
    "attack-ats": (cmd_attack_ats, {"shadow_epochs": 30, "features": "spam_opponent"}, [
        _f("--features", help="feature set: spam_opponent, residual_hist or spam_gray_2nd"),
        _f("--positive"), _f("--negative"), _f("--shadow"), _f("--shadow-data"), _f("--resolution", type=int),
        _f("--shadow-epochs", type=int), _f("--limit", type=int)]),
    "lsb-control": (cmd_lsb_control, {}, [
        _f("--fingerprint"), _f("--fingerprint-len", type=int), _f("--data"), _f("--resolution", type=int),
        _f("--generator"), _f("--num-samples", type=int), _f("--limit", type=int)]),
    "registry add": (cmd_registry_add, {}, [
        _f("--registry"), _f("--model-id"), _f("--fingerprint"), _f("--fingerprint-len", type=int),
        _f("--codec-id")]),
    "registry list": (cmd_registry_list, {}, [_f("--registry")]),
}


def _add_common(p: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file of parameters (flags win over it)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory for artifacts and report.json")
    p.add_argument("--overwrite", action="store_true", default=S)
    p.add_argument("--threshold", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpforge", description="Artificial fingerprints for generative models.")
    parser.add_argument("--version", action="version", version=f"fpforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="SUBCOMMAND")
    reg_parser = None
    for name, (_, _, flags) in COMMANDS.items():
        if name.startswith("registry "):
            if reg_parser is None:
                reg_parser = sub.add_parser("registry", help="manage the fingerprint registry")
                reg_sub = reg_parser.add_subparsers(dest="registry_command", parser_class=_Parser)
            sp = reg_sub.add_parser(name.split()[1])
        else:
            sp = sub.add_parser(name, help=(COMMANDS[name][0].__doc__ or "").strip().splitlines()[0])
        _add_common(sp)
        for flag, kw in flags:
            sp.add_argument(flag, default=argparse.SUPPRESS, **kw)
    return parser


def resolve(command: str, given: dict) -> RunConfig:
    """Merge defaults < config file < flags into a RunConfig."""
    _, defaults, _ = COMMANDS[command]
    params = dict(_COMMON_DEFAULTS, **defaults)
    cfg_file = given.pop("config", None)
    if cfg_file:
        try:
            loaded = json.loads(Path(cfg_file).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidArgument(f"cannot read config {cfg_file}: {e}") from e
        if not isinstance(loaded, dict):
            raise InvalidArgument("config file must hold a JSON object")
        params.update({k.replace("-", "_"): v for k, v in loaded.items()})
    params.update(given)
    seed = int(params.pop("seed", 0))
    overwrite = bool(params.pop("overwrite", False))
    out = params.pop("out", None) or str(Path("fpforge-runs") / command.replace(" ", "-"))
    return RunConfig(command=command, params=params, seed=seed, out=out, overwrite=overwrite)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = build_parser().parse_args(argv)
        if ns.command is None or (ns.command == "registry" and ns.registry_command is None):
            raise UsageError(build_parser().format_usage())
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help / --version
        return EXIT_OK if not e.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = ns.command if ns.command != "registry" else f"registry {ns.registry_command}"
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "registry_command", "verbose")}
    try:
        rc = resolve(command, given)
        COMMANDS[command][0](rc)
    except (InvalidArgument, ConflictError, CollisionError, OutputExists, IntegrityError, CorruptCheckpoint,
            FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FpforgeError as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - the exit code is the contract
        log.debug("unhandled", exc_info=True)
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
