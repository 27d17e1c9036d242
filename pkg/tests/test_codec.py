import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fpforge import codec as C
from fpforge.errors import CorruptCheckpoint, InvalidArgument
from fpforge.fingerprint import sample_fingerprint


def tiny(resolution=32, n=12, width=4, seed=0):
    cfg = C.CodecConfig(resolution=resolution, fingerprint_len=n, width=width, seed=seed)
    enc, dec = C.build_codec(cfg)
    return C.CodecCheckpoint(enc, dec, cfg)


@pytest.mark.parametrize("res", [32, 64, 128])
def test_shapes_scale_with_resolution(res):
    ck = tiny(res, n=20)
    x = torch.rand(2, 3, res, res)
    fp = torch.randint(0, 2, (2, 20)).float()
    stego = ck.encoder(x, fp)
    assert stego.shape == x.shape
    assert ck.decoder(stego).shape == (2, 20)
    assert len(ck.encoder.downs) == int(math.log2(res)) - 3


@pytest.mark.parametrize("bad", [16, 48, 100])
def test_resolution_must_be_power_of_two(bad):
    with pytest.raises(InvalidArgument):
        C.CodecConfig(resolution=bad)


def test_seeded_init_is_reproducible():
    assert tiny(seed=3).codec_id == tiny(seed=3).codec_id
    assert tiny(seed=3).codec_id != tiny(seed=4).codec_id


def test_embed_decode_api_shapes_and_range():
    ck = tiny()
    fp = sample_fingerprint(12, 0)
    imgs = np.random.default_rng(0).random((3, 32, 32, 3))
    stego = ck.embed(imgs, fp)
    assert stego.shape == imgs.shape and stego.min() >= 0 and stego.max() <= 1
    single = ck.embed(imgs[0], fp)
    assert single.shape == (32, 32, 3)
    np.testing.assert_allclose(single, stego[0], atol=1e-6)
    probs = ck.decode_probs(stego)
    assert probs.shape == (3, 12) and ((probs > 0) & (probs < 1)).all()
    d = ck.decode(stego[0])
    np.testing.assert_array_equal(d.bits, (d.probs >= 0.5).astype(np.uint8))
    with pytest.raises(InvalidArgument):
        ck.embed(np.zeros((1, 64, 64, 3)), fp)
    with pytest.raises(InvalidArgument):
        ck.embed(imgs, sample_fingerprint(13, 0))


def test_uint8_input_is_rescaled():
    ck = tiny()
    u8 = np.random.default_rng(1).integers(0, 256, (2, 32, 32, 3), dtype=np.uint8)
    np.testing.assert_allclose(ck.decode_probs(u8), ck.decode_probs(u8 / 255.0), atol=1e-6)


# -- losses: hand-computed references -----------------------------------------


def bce_reference(p, t, eps=1e-7):
    total = 0.0
    for pi, ti in zip(p, t):
        pi = min(max(pi, eps), 1 - eps)
        total += -(ti * math.log(pi) + (1 - ti) * math.log(1 - pi))
    return total / len(p)


@pytest.mark.parametrize("probs,target,expected", [
    ([1.0, 0.0, 1.0], [1, 0, 1], -math.log(1 - 1e-7)),  # perfect up to the clip
    ([0.5] * 4, [1, 0, 0, 1], math.log(2)),
    ([0.0, 1.0], [1, 0], -math.log(1e-7)),  # ~16.118, clipped instead of inf
])
def test_bce_examples(probs, target, expected):
    got = float(C.bce_fingerprint_loss(torch.tensor(probs, dtype=torch.float64), target))
    assert got == pytest.approx(expected, rel=1e-9)
    assert got == pytest.approx(bce_reference(probs, target), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_bce_matches_reference(pairs):
    p, t = zip(*pairs)
    got = float(C.bce_fingerprint_loss(torch.tensor(p, dtype=torch.float64), list(t)))
    assert got == pytest.approx(bce_reference(p, t), rel=1e-9, abs=1e-12)


def test_mse_examples_and_shape_check():
    a = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    assert float(C.image_mse_loss(a, a)) == 0.0
    assert float(C.image_mse_loss(a + 0.1, a)) == pytest.approx(0.01)
    with pytest.raises(InvalidArgument):
        C.image_mse_loss(a, a[:1])
    with pytest.raises(InvalidArgument):
        C.bce_fingerprint_loss(torch.rand(3), [1, 0])


# -- finite differences ----------------------------------------------------------


def _fd_check(f, x: torch.Tensor, n_coords=12, h=1e-6, rtol=1e-3, seed=0):
    """Central differences on random coordinates against autograd, float64."""
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    rng = np.random.default_rng(seed)
    flat = x.detach().flatten()
    for i in rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False):
        e = torch.zeros_like(flat)
        e[i] = h
        with torch.no_grad():
            fd = (float(f((flat + e).view_as(x))) - float(f((flat - e).view_as(x)))) / (2 * h)
        an = float(g.flatten()[i])
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an), 1e-8), (i, fd, an)


def test_bce_gradient_finite_difference():
    t = torch.randint(0, 2, (4, 10), generator=torch.Generator().manual_seed(0)).double()
    p = torch.rand(4, 10, generator=torch.Generator().manual_seed(1), dtype=torch.float64) * 0.9 + 0.05
    _fd_check(lambda q: C.bce_fingerprint_loss(q, t), p)


def test_mse_gradient_finite_difference():
    cover = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    _fd_check(lambda s: C.image_mse_loss(s, cover), cover + 0.05 * torch.randn_like(cover))


def test_total_loss_gradient_through_codec():
    ck = tiny(n=8)
    enc, dec = ck.encoder.double(), ck.decoder.double()
    g = torch.Generator().manual_seed(0)
    cover = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    fp = torch.randint(0, 2, (2, 8), generator=g).double()

    def loss(x):
        stego = enc(x, fp)
        return C.bce_fingerprint_loss(dec(stego), fp) + 10.0 * C.image_mse_loss(stego, x)

    _fd_check(loss, cover, n_coords=16)
    torch.autograd.gradcheck(lambda x: dec(enc(x, fp[:1])), (cover[:1, :, :, :].clone().requires_grad_(True),),
                             eps=1e-6, atol=1e-7, rtol=1e-3, fast_mode=True)


# -- lambda schedule ---------------------------------------------------------------


def test_lambda_schedule():
    assert C.lambda_at(500, None, 10, 3000) == 0.0
    assert C.lambda_at(100, 100, 10, 3000) == 0.0
    assert C.lambda_at(1600, 100, 10, 3000) == pytest.approx(5.0)
    assert C.lambda_at(3100, 100, 10, 3000) == pytest.approx(10.0)
    assert C.lambda_at(10**6, 100, 10, 3000) == pytest.approx(10.0)
    assert C.lambda_at(101, 100, 10, 0) == 10.0
    vals = [C.lambda_at(i, 0, 10, 3000) for i in range(0, 4000, 37)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


# -- persistence ------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    base = tiny()
    ck = C.CodecCheckpoint(base.encoder, base.decoder, base.config, tags={"role": "victim"})
    path = tmp_path / "c.ckpt"
    C.save(ck, path)
    back = C.load(path)
    assert back.codec_id == ck.codec_id and back.tags == {"role": "victim"}
    imgs = np.random.default_rng(0).random((2, 32, 32, 3))
    fp = sample_fingerprint(12, 5)
    np.testing.assert_array_equal(back.embed(imgs, fp), ck.embed(imgs, fp))
    np.testing.assert_array_equal(back.decode_probs(imgs), ck.decode_probs(imgs))


def test_tampered_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "c.ckpt"
    tiny().save(path)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        C.load(path)


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "c.ckpt"
    tiny().save(path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CorruptCheckpoint):
        C.load(path)


# -- training ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_images():
    return np.random.default_rng(0).integers(0, 256, (48, 32, 32, 3), dtype=np.uint8)


def _toy_cfg(**kw):
    base = dict(resolution=32, fingerprint_len=8, width=4, epochs=2, batch_size=8, eval_every=2,
                holdout_size=8, lambda_ramp_iters=4)
    return C.CodecConfig(**dict(base, **kw))


@pytest.mark.slow
def test_training_is_deterministic(toy_images):
    a, la = C.train_codec(toy_images, _toy_cfg(seed=1))
    b, lb = C.train_codec(toy_images, _toy_cfg(seed=1))
    assert a.codec_id == b.codec_id
    assert la.bce_loss == lb.bce_loss
    c, _ = C.train_codec(toy_images, _toy_cfg(seed=2))
    assert c.codec_id != a.codec_id


@pytest.mark.slow
def test_training_log_and_gate_bookkeeping(toy_images):
    # gate at 0.01 is reached at the first check, so lambda must ramp afterwards
    ck, log = C.train_codec(toy_images, _toy_cfg(accuracy_gate=0.01))
    assert log.gate_iteration == 2 and log.gate_epoch == 1
    assert log.lam[: log.gate_iteration] == [0.0] * log.gate_iteration
    assert log.lam[-1] == pytest.approx(10.0)
    assert len(log.heldout_acc_per_epoch) == 2
    assert 0 <= log.final_heldout_acc <= 1


@pytest.mark.slow
def test_unreached_gate_warns_and_keeps_lambda_zero(toy_images):
    with pytest.warns(UserWarning, match="gate"):
        _, log = C.train_codec(toy_images, _toy_cfg(epochs=1, accuracy_gate=0.999))
    assert log.status == "gate_not_reached" and set(log.lam) == {0.0}


def test_training_rejects_wrong_image_size(toy_images):
    with pytest.raises(InvalidArgument):
        C.train_codec(toy_images, _toy_cfg(resolution=64))
