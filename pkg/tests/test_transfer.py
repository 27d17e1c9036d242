from types import SimpleNamespace

import numpy as np
import pytest
import torch

from fpforge import transfer as T
from fpforge.codec import Decoder
from fpforge.data import ImageDataset, write_clean_dataset
from fpforge.errors import CorruptCheckpoint, InvalidArgument, TrainingDiverged
from fpforge.fingerprint import Fingerprint, Registry, match_pvalue, required_matches, sample_fingerprint


def tiny_cfg(**kw):
    base = dict(latent_dim=8, resolution=8, width=4, iterations=6, batch_size=4, seed=0)
    return T.GeneratorConfig(**dict(base, **kw))


@pytest.fixture(scope="module")
def toy_data():
    return np.random.default_rng(0).integers(0, 256, (16, 8, 8, 3), dtype=np.uint8)


@pytest.mark.parametrize("res", [8, 32, 64])
def test_gan_shapes(res):
    g, d = T.build_gan(tiny_cfg(resolution=res))
    z = torch.randn(3, 8)
    x = g(z)
    assert x.shape == (3, 3, res, res)
    assert d(x).shape == (3,)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        tiny_cfg(resolution=12)
    with pytest.raises(InvalidArgument):
        tiny_cfg(loss="wasserstein")


def test_training_deterministic_and_fingerprint_free(toy_data):
    a = T.train_generator(toy_data, tiny_cfg(), model_id="m")
    b = T.train_generator(toy_data, tiny_cfg(), model_id="m")
    assert a.content_id == b.content_id
    assert a.content_id != T.train_generator(toy_data, tiny_cfg(seed=1), model_id="m").content_id
    assert a.history["decoder_in_graph"] is False
    assert a.history["objective_terms"] == ["discriminator_nonsaturating", "generator_nonsaturating"]
    assert a.fp_decoder is None


def test_manifest_source_is_recorded(tmp_path, toy_data):
    m = write_clean_dataset(ImageDataset(toy_data, [f"{i}.png" for i in range(16)]), tmp_path / "ds")
    ck = T.train_generator(m, tiny_cfg())
    assert ck.manifest_ref["manifest_sha256"] == m.content_hash()


def test_wrong_resolution_rejected(toy_data):
    with pytest.raises(InvalidArgument):
        T.train_generator(toy_data, tiny_cfg(resolution=16))


def test_divergence_is_reported(toy_data, monkeypatch, tmp_path):
    calls = {"n": 0}
    real_step = T._adv_step

    def flaky(*a, **k):
        calls["n"] += 1
        out = real_step(*a, **k)
        return (float("nan"),) + out[1:] if calls["n"] == 5 else out

    monkeypatch.setattr(T, "_adv_step", flaky)
    with pytest.raises(TrainingDiverged) as e:
        T.train_generator(toy_data, tiny_cfg(checkpoint_every=2), out_path=tmp_path / "g.ckpt")
    assert e.value.checkpoint_path is not None and e.value.checkpoint_path.exists()


def test_save_load_and_sampling(tmp_path, toy_data):
    ck = T.train_generator(toy_data, tiny_cfg(), model_id="m1")
    ck.save(tmp_path / "g.ckpt")
    back = T.GeneratorCheckpoint.load(tmp_path / "g.ckpt")
    assert back.content_id == ck.content_id and back.model_id == "m1"
    s1, s2 = T.sample(ck, 5, seed=3), T.sample(back, 5, seed=3)
    np.testing.assert_array_equal(s1, s2)
    assert s1.shape == (5, 8, 8, 3) and s1.min() >= 0 and s1.max() <= 1
    assert not np.array_equal(s1, T.sample(ck, 5, seed=4))
    with pytest.raises(InvalidArgument):
        T.sample(ck, 0)
    raw = bytearray((tmp_path / "g.ckpt").read_bytes())
    raw[-1] ^= 1
    (tmp_path / "g.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        T.GeneratorCheckpoint.load(tmp_path / "g.ckpt")


def test_latents_are_standard_normal():
    ck = T.GeneratorCheckpoint(*T.build_gan(tiny_cfg(latent_dim=64)), tiny_cfg(latent_dim=64))
    z = T.latents(ck, 4000, seed=0)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_joint_baseline_with_zero_eta_is_plain_training(toy_data):
    dec = Decoder(8, 3, 10, 4)
    fp = sample_fingerprint(10, 0)
    plain = T.train_generator(toy_data, tiny_cfg())
    joint = T.train_joint_baseline(toy_data, fp, dec, tiny_cfg(), eta=0.0)
    for (k, a), b in zip(plain.generator.state_dict().items(), joint.generator.state_dict().values()):
        assert torch.equal(a, b), k


def test_joint_baseline_adds_term_and_keeps_decoder(toy_data, tmp_path):
    dec = Decoder(8, 3, 10, 4)
    before = {k: v.clone() for k, v in dec.state_dict().items()}
    fp = sample_fingerprint(10, 0)
    ck = T.train_joint_baseline(toy_data, fp, dec, tiny_cfg(iterations=50), eta=1.0, out_path=tmp_path / "j.ckpt")
    assert ck.history["objective_terms"][-1] == "eta_bce_fingerprint"
    assert len(ck.history["extra_loss"]) == 1
    for k, v in dec.state_dict().items():
        assert torch.equal(v, before[k])  # the caller's decoder is never modified
    back = T.GeneratorCheckpoint.load(tmp_path / "j.ckpt")
    assert back.fp_decoder is not None and back.content_id == ck.content_id
    assert ck.history["decoder_mode"] == "fresh"


def test_joint_baseline_decoder_init(toy_data):
    dec = Decoder(8, 3, 10, 4)
    fp = sample_fingerprint(10, 0)
    cfg = tiny_cfg(iterations=0)
    fresh = T.train_joint_baseline(toy_data, fp, dec, cfg, eta=1.0).fp_decoder
    warm = T.train_joint_baseline(toy_data, fp, dec, cfg, eta=1.0, decoder_mode="warm").fp_decoder
    w0 = dec.dense[-1].weight
    assert torch.equal(warm.dense[-1].weight, w0)
    assert not torch.equal(fresh.dense[-1].weight, w0)
    again = T.train_joint_baseline(toy_data, fp, dec, cfg, eta=1.0).fp_decoder
    assert torch.equal(again.dense[-1].weight, fresh.dense[-1].weight)  # seeded
    with pytest.raises(InvalidArgument):
        T.train_joint_baseline(toy_data, fp, dec, cfg, decoder_mode="thawed")


def test_joint_baseline_frozen_decoder_never_moves_but_steers_g(toy_data):
    dec = Decoder(8, 3, 10, 4)
    fp = sample_fingerprint(10, 0)
    ck = T.train_joint_baseline(toy_data, fp, dec, tiny_cfg(iterations=50), eta=1.0, decoder_mode="frozen")
    for k, v in dec.state_dict().items():
        assert torch.equal(ck.fp_decoder.state_dict()[k], v)
    plain = T.train_generator(toy_data, tiny_cfg(iterations=50))
    changed = [not torch.equal(a, b) for a, b in zip(plain.generator.parameters(), ck.generator.parameters())]
    assert any(changed)  # the fingerprint term reaches G through the fixed decoder


# -- evaluation ---------------------------------------------------------------------


def test_transfer_report_is_consistent_with_matcher():
    fp = sample_fingerprint(100, 1)
    rng = np.random.default_rng(0)
    flips = rng.random((200, 100)) < 0.1
    bits = np.where(flips, 1 - fp.bits, fp.bits)
    rep = T.transfer_report(bits, fp)
    k = (bits == fp.bits).sum(1)
    assert rep.per_image_matched == k.tolist()
    assert rep.per_image_pvalue == [match_pvalue(int(x), 100) for x in k]
    assert rep.mean_accuracy == pytest.approx(k.mean() / 100)
    assert rep.pvalue_at_mean == match_pvalue(int(round(k.mean())), 100)
    assert rep.verified_fraction == pytest.approx((k >= required_matches(0.75, 100)).mean())
    assert rep.passed
    assert rep.table_row().startswith("bit acc 0.90  p-value <1e-")
    assert "per_image_pvalue" not in rep.to_dict()


def test_transfer_report_for_chance_bits():
    fp = sample_fingerprint(100, 1)
    bits = np.random.default_rng(1).integers(0, 2, (1000, 100))
    rep = T.transfer_report(bits, fp)
    assert abs(rep.mean_accuracy - 0.5) < 0.01 and not rep.passed
    assert rep.table_row().endswith(f"{rep.pvalue_at_mean:.2f}")


def test_nearest_train_psnr():
    train = np.random.default_rng(0).random((20, 8, 8, 3))
    assert T.nearest_train_psnr(train[:5], train) == float("inf")
    noisy = np.clip(train[:5] + 0.01, 0, 1)
    far = np.clip(train[:5] + 0.2, 0, 1)
    assert T.nearest_train_psnr(noisy, train) > T.nearest_train_psnr(far, train)


class BitsInPixels:
    """Stub codec: an image's first n pixel values are its decoded bits."""

    def __init__(self, n):
        self.config = SimpleNamespace(fingerprint_len=n)

    def decode_bits(self, images):
        return (np.asarray(images).reshape(len(images), -1)[:, : self.config.fingerprint_len] >= 0.5).astype(np.uint8)


def images_carrying(fp: Fingerprint, count, flip_rate, seed):
    rng = np.random.default_rng(seed)
    bits = np.where(rng.random((count, fp.n)) < flip_rate, 1 - fp.bits, fp.bits)
    out = np.zeros((count, 8, 8, 3))
    out.reshape(count, -1)[:, : fp.n] = bits
    return out


@pytest.fixture
def world():
    n = 100
    reg = Registry()
    fps = {f"m{i}": sample_fingerprint(n, 10 + i) for i in range(4)}
    for k, v in fps.items():
        reg.register(k, v, "c")
    gens = {k: images_carrying(v, 300, 0.05, i) for i, (k, v) in enumerate(fps.items())}
    real = np.random.default_rng(9).random((500, 8, 8, 3))
    return BitsInPixels(n), reg, fps, gens, real


def test_detection_experiment(world):
    codec, reg, _, gens, real = world
    res = T.detection_experiment(real, gens, codec, reg)
    assert res["accuracy"] == 1.0
    assert res["confusion"] == {"tp": 1200, "fn": 0, "tn": 500, "fp": 0}
    assert res["expected_false_positives"] < 1e-3


def test_attribution_experiment(world):
    codec, reg, _, gens, _ = world
    stranger = images_carrying(sample_fingerprint(100, 999), 300, 0.05, 5)
    res = T.attribution_experiment(dict(gens, stranger=stranger), codec, reg)
    assert res["attribution_accuracy"] == 1.0
    assert res["unknown_rate_unregistered"] == 1.0
    assert res["per_source"]["stranger"]["predictions"] == {"unknown": 300}


def test_attribution_degrades_with_noise(world):
    codec, reg, fps, _, _ = world
    noisy = {"m0": images_carrying(fps["m0"], 400, 0.4, 1)}  # ~60% agreement: below threshold
    assert T.attribution_experiment(noisy, codec, reg)["attribution_accuracy"] < 0.1
