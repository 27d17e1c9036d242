"""Acceptance criteria, one test each, each printing a PASS/FAIL line.

Criteria that need trained models read the JSON reports written by
``scripts/run_desk_experiments.py`` into ``results/desk``; a missing report
fails its criterion.  The others run live.
"""
import json
import math
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from fpforge import codec as C
from fpforge import data as D
from fpforge import perturb as P
from fpforge.errors import CollisionError, IntegrityError
from fpforge.fingerprint import Fingerprint, Registry, match_pvalue, sample_fingerprint

RESULTS = Path(__file__).resolve().parents[1] / "results" / "desk"
FIXTURES = Path(__file__).parent / "fixtures" / "full_scale_sweeps.json"


def record(num, title, ok, detail):
    line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def metrics(name):
    path = RESULTS / f"{name}.json"
    if not path.exists():
        pytest.fail(f"{path} missing; run scripts/run_desk_experiments.py")
    return json.loads(path.read_text())


def num(x):
    return float(x)


# -- 1 ----------------------------------------------------------------------------


def test_criterion_01_binomial_matcher():
    mpmath.mp.dps = 50

    def oracle(k, n):
        return mpmath.fsum(mpmath.binomial(n, i) for i in range(k, n + 1)) / mpmath.mpf(2) ** n

    p75 = match_pvalue(75, 100)
    ok_ref = abs(p75 - 2.80e-7) <= 0.02 * 2.80e-7
    worst = 0.0
    for n in range(1, 129):
        for k in range(0, n + 1):
            ref = oracle(k, n)
            worst = max(worst, float(abs(mpmath.mpf(match_pvalue(k, n)) - ref) / ref))
    t0 = time.perf_counter()
    for n in range(1, 129):
        for k in range(0, n + 1):
            match_pvalue(k, n)
    elapsed = time.perf_counter() - t0
    ok = ok_ref and worst <= 1e-12 and elapsed < 1.0
    record(1, "binomial matcher", ok,
           f"p(75,100)={p75:.4g} (target 2.80e-7 +-2%), max rel err {worst:.2g} over n<=128 (<=1e-12), "
           f"all {sum(range(2, 130))} pairs in {elapsed:.3f}s (<1s)")


# -- 2 ----------------------------------------------------------------------------


def test_criterion_02_codec_training():
    r = metrics("codec64")
    m, cfg = r["metrics"], r["config"]
    default = C.CodecConfig(resolution=64).to_dict()
    same_defaults = all(cfg[k] == default[k] for k in default if k not in ("seed",))
    acc, gate = num(m["final_heldout_acc"]), m["gate_epoch"]
    ok = (cfg["resolution"] == 64 and m["num_images"] >= 10000 and same_defaults and acc >= 0.95
          and gate is not None and gate <= 5)
    record(2, "codec training 64x64", ok,
           f"{m['num_images']} images, default config={same_defaults}, held-out bit acc {acc:.4f} (>=0.95), "
           f"gate epoch {gate} (<=5)")


# -- 3 ----------------------------------------------------------------------------


def test_criterion_03_fidelity():
    r = metrics("fidelity")["metrics"]
    psnr = num(r["fidelity"]["mean_psnr"])
    diffs = sorted((RESULTS / "fidelity_diffs").glob("diff_*.png"))
    t = metrics("transfer")["metrics"]
    fp_models = [k for k in t if k.startswith("fp")]
    stable = bool(fp_models) and all(t[k]["training_finite"] for k in fp_models)
    ok = psnr >= 30 and len(diffs) > 0 and stable
    record(3, "fidelity", ok,
           f"mean PSNR {psnr:.2f} dB (>=30) over {r['fidelity']['num_pairs']} images, {len(diffs)} 10x difference "
           f"images, GANs on fingerprinted data finished without divergence: {stable} ({len(fp_models)} runs)")


# -- 4 ----------------------------------------------------------------------------


def test_criterion_04_transferability():
    t = metrics("transfer")["metrics"]
    fp1, clean = t["fp1"], t["clean"]
    acc, p = fp1["mean_accuracy"], fp1["pvalue_at_mean"]
    ok = (fp1["num_samples"] >= 1000 and acc >= 0.90 and p < 1e-15
          and abs(clean["mean_accuracy"] - 0.5) <= 0.03)
    others = ", ".join(f"{k} {v['mean_accuracy']:.3f}" for k, v in t.items() if k not in ("fp1", "clean"))
    record(4, "transferability", ok,
           f"fp1 mean bit acc {acc:.4f} (>=0.90) over {fp1['num_samples']} samples, p at mean {p:.2g} (<1e-15); "
           f"clean-data control {clean['mean_accuracy']:.4f} (0.50+-0.03); other models: {others}")


# -- 5 ----------------------------------------------------------------------------


def test_criterion_05_lsb_control():
    m = metrics("lsb")["metrics"]
    g, s = m["generated_accuracy"], m["still_image_roundtrip"]
    ok = 0.45 <= g <= 0.60 and s == 1.0
    record(5, "LSB negative control", ok,
           f"generated LSB decode {g:.4f} in [0.45, 0.60] over {m['num_samples']} samples, still-image roundtrip {s}")


# -- 6 ----------------------------------------------------------------------------


def test_criterion_06_detection_attribution():
    r = metrics("detection")
    det, att = r["metrics"]["detection"], r["metrics"]["attribution"]
    registered = [s for s in att["per_source"].values() if s["registered"]]
    enough = det["num_real"] >= 1000 and len(registered) == 4 and all(s["num_images"] >= 1000 for s in registered)
    ok = (enough and det["accuracy"] >= 0.99 and att["attribution_accuracy"] >= 0.99
          and att["unknown_rate_unregistered"] >= 0.99)
    record(6, "detection and attribution", ok,
           f"detection acc {det['accuracy']:.4f}, attribution acc {att['attribution_accuracy']:.4f}, "
           f"unregistered -> unknown {att['unknown_rate_unregistered']:.4f} (all >=0.99); "
           f"{det['num_real']} real, 4x{registered[0]['num_images'] if registered else 0} generated")


# -- 7 ----------------------------------------------------------------------------


def _nonincreasing(acc, ci):
    return all(acc[i + 1] <= acc[i] + ci[i] + ci[i + 1] for i in range(len(acc) - 1))


def test_criterion_07_robustness():
    problems = []
    # live: identity perturbations on an arbitrary codec leave bits untouched, bit for bit
    cfg = C.CodecConfig(fingerprint_len=32, width=8)
    codec = C.CodecCheckpoint(*C.build_codec(cfg), cfg)
    x = np.random.default_rng(0).random((16, 32, 32, 3)).astype(np.float32)
    for kind, mag in (("gaussian_noise", 0.0), ("gaussian_blur", 0), ("gaussian_blur", 1), ("center_crop", 32)):
        if not np.array_equal(codec.decode_bits(P.perturb_image(x, P.PerturbationSpec(kind, mag))),
                              codec.decode_bits(x)):
            problems.append(f"identity {kind}")
    # desk sweeps
    s = metrics("sweeps")["metrics"]
    pooled = {s[k]["seeds"].get("pooled_over_models", 1) for k in P.IMAGE_KINDS + P.MODEL_KINDS}
    if not all(s["zero_magnitude_identical"].values()):
        problems.append(f"desk identity {s['zero_magnitude_identical']}")
    for kind in P.IMAGE_KINDS + P.MODEL_KINDS:
        sw = s[kind]
        acc, ci = list(sw["accuracy"]), list(sw["accuracy_ci"])
        if kind in P.DESCENDING_KINDS:
            acc, ci = acc[::-1], ci[::-1]
        if not _nonincreasing(acc, ci):
            problems.append(f"{kind} not monotone")
        if kind in P.IMAGE_KINDS:
            ref, rci = sw["reference"], sw["reference_ci"]
            if not all(r + rc + c >= a for r, rc, a, c in zip(ref, rci, sw["accuracy"], sw["accuracy_ci"])):
                problems.append(f"{kind} reference below generated")
    # stored full-scale-shaped fixtures
    fx = json.loads(FIXTURES.read_text())
    got = {}
    for kind, d in fx["sweeps"].items():
        sr = P.SweepResult(kind, d["grid"], d["accuracy"], [0.0] * len(d["grid"]), [], [], "", 0, 0)
        wr = P.working_range(sr, fx["threshold"])
        got[kind] = wr
        if wr is None or not np.allclose(wr, d["expected"], rtol=0, atol=1e-9):
            problems.append(f"fixture {kind}: {wr} != {d['expected']}")
    ranges = ", ".join(f"{k} [{v[0]:g}, {v[1]:g}]" for k, v in got.items() if v)
    record(7, "robustness properties", not problems,
           ("all hold" if not problems else "; ".join(problems)) + f"; desk curves pooled over {min(pooled)} models; fixture working ranges: {ranges}")


# -- 8 ----------------------------------------------------------------------------


def test_criterion_08_joint_baseline():
    r = metrics("joint")
    m = r["metrics"]
    acc, qj, qc = m["fingerprint_accuracy"], m["quality_proxy_joint"], m["quality_proxy_clean"]
    ok = r["config"]["eta"] == 1.0 and acc >= 0.85 and qj < qc
    extra = "; ".join(f"{k}: acc {v['fingerprint_accuracy']:.3f}, proxy {v['quality_proxy_joint']:.2f} dB, "
                      f"decoder on real photos {v['decoder_accuracy_on_real_images']:.3f}"
                      for k, v in m.get("variants", {}).items())
    record(8, "joint baseline", ok,
           f"eta=1.0 ({m.get('decoder_mode')} decoder), fingerprint acc {acc:.4f} (>=0.85), quality proxy joint "
           f"{qj:.2f}+-{m.get('quality_proxy_joint_ci95', 0):.2f} dB vs clean {qc:.2f}+-"
           f"{m.get('quality_proxy_clean_ci95', 0):.2f} dB (need joint < clean); same decoder on real photos "
           f"{m.get('decoder_accuracy_on_real_images', float('nan')):.3f}; variants: {extra}")


# -- 9 ----------------------------------------------------------------------------


def test_criterion_09_secrecy():
    m = metrics("ats")["metrics"]
    a, c = m["attack"], m["same_codec_control"]
    ok = (a["num_positive"] == a["num_negative"] == 250 and 0.45 <= a["accuracy"] <= 0.55
          and c["accuracy"] >= 0.8)
    others = "; ".join(f"{k} {v['attack_accuracy']:.3f}/{v['control_accuracy']:.3f}"
                       for k, v in m.get("feature_sensitivity", {}).items())
    record(9, "secrecy (ATS)", ok,
           f"attack acc {a['accuracy']:.3f} in [0.45, 0.55] on {a['num_positive']}+{a['num_negative']}, "
           f"same-codec control {c['accuracy']:.3f} (>=0.8); attack/control by feature set: {others}")


# -- 10 ---------------------------------------------------------------------------


def _fd_rel_errors(f, x, coords=10, h=1e-6):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    flat, errs = x.detach().flatten(), []
    for i in np.random.default_rng(0).choice(flat.numel(), coords, replace=False):
        e = torch.zeros_like(flat)
        e[i] = h
        with torch.no_grad():
            fd = (float(f((flat + e).view_as(x))) - float(f((flat - e).view_as(x)))) / (2 * h)
        an = float(g.flatten()[i])
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return errs


def test_criterion_10_property_suites(tmp_path):
    t0 = time.perf_counter()
    checks = {}
    # gradients of both loss terms and of the full objective through a codec, float64
    g = torch.Generator().manual_seed(0)
    target = torch.randint(0, 2, (4, 16), generator=g).double()
    probs = torch.rand(4, 16, generator=g, dtype=torch.float64) * 0.9 + 0.05
    cover = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    cfg = C.CodecConfig(fingerprint_len=16, width=4)
    enc, dec = (m.double() for m in C.build_codec(cfg))
    fp = target[:2]
    errs = (_fd_rel_errors(lambda p: C.bce_fingerprint_loss(p, target), probs)
            + _fd_rel_errors(lambda s: C.image_mse_loss(s, cover), cover + 0.01)
            + _fd_rel_errors(lambda x: C.bce_fingerprint_loss(dec(enc(x, fp)), fp)
                             + 10 * C.image_mse_loss(enc(x, fp), x), cover))
    checks["gradients"] = max(errs) <= 1e-3
    # fingerprint serialization
    rng = np.random.default_rng(1)
    rt = True
    for n in list(range(1, 70)) + [100, 128, 257]:
        f = Fingerprint(rng.integers(0, 2, n))
        rt &= Fingerprint.from_hex(f.to_hex(), n) == f and Fingerprint.from_dict(f.to_dict()) == f
    checks["serialization"] = bool(rt)
    # registry collision rejection
    reg = Registry(tmp_path / "reg.jsonl")
    a = sample_fingerprint(100, 0)
    reg.register("a", a, "c")
    near = a.bits.copy()
    near[:25] ^= 1  # exactly 75 agreeing bits: at the threshold, so it collides
    try:
        reg.register("b", Fingerprint(near), "c")
        checks["collision"] = False
    except CollisionError:
        checks["collision"] = True
    # manifest hash integrity
    ds = D.ImageDataset(rng.integers(0, 256, (4, 8, 8, 3), dtype=np.uint8), [f"{i}.png" for i in range(4)])
    m = D.write_clean_dataset(ds, tmp_path / "ds")
    m.check_integrity()
    (tmp_path / "ds" / "2.png").write_bytes((tmp_path / "ds" / "1.png").read_bytes())
    try:
        m.check_integrity()
        checks["manifest"] = False
    except IntegrityError as e:
        checks["manifest"] = e.path == "2.png"
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 600
    record(10, "property suites", ok,
           ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items())
           + f"; max FD rel err {max(errs):.1e} (<=1e-3); {elapsed:.1f}s without training")
