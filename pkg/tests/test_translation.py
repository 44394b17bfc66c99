import math

import numpy as np
import pytest
import torch

from herbage.errors import DataError
from herbage.translation import (
    CUTConfig,
    PatchBatch,
    adversarial_loss,
    apply_translation,
    build_cut_model,
    load_cut_checkpoint,
    patch_contrastive_loss,
    sample_patch_pairs,
    save_cut_checkpoint,
    total_cut_loss,
    train_cut,
)


def small_config(**kw):
    defaults = dict(generator_blocks=2, ngf=8, ndf=8, proj_dim=16, n_patches=16,
                    train_resolution=16)
    defaults.update(kw)
    return CUTConfig(**defaults)


def rand_image(rng, size=16):
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def test_config_validation():
    with pytest.raises(DataError):
        CUTConfig(tau=0.0)
    with pytest.raises(DataError):
        CUTConfig(lambda_u=-0.1)
    with pytest.raises(DataError):
        CUTConfig(n_patches=1)


def test_feature_tap_defaults_to_middle_block():
    assert CUTConfig(generator_blocks=2).tap == 1
    assert CUTConfig(generator_blocks=5).tap == 3
    assert CUTConfig(generator_blocks=4, feature_tap=4).tap == 4


def test_identity_init_is_exact():
    model = build_cut_model(small_config(), seed=0)
    model.init_identity()
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    with torch.no_grad():
        out = model.generator(x)
    assert torch.equal(out, x)


def test_adversarial_loss_scalar_oracle():
    real = [0.9, 0.8]
    fake = [0.3, 0.1]
    expected = (math.log(0.9) + math.log(0.8)) / 2 + (
        (1 - math.log(0.3)) + (1 - math.log(0.1))
    ) / 2
    assert adversarial_loss(real, fake) == pytest.approx(expected, abs=1e-12)


def test_adversarial_loss_rejects_out_of_domain():
    for real, fake in ([[0.5], [0.0]], [[1.0], [0.5]], [[-0.1], [0.5]], [[], [0.5]]):
        with pytest.raises(DataError):
            adversarial_loss(real, fake)


def test_patch_loss_uniform_similarity_is_ln_p():
    for p_count in (2, 16, 64):
        v = torch.zeros(p_count, 8, dtype=torch.float64)
        v[:, 0] = 1.0  # identical unit vectors: all similarities equal
        loss = patch_contrastive_loss(PatchBatch(p=v, p_prime=v.clone()), tau=0.07)
        assert float(loss) == pytest.approx(math.log(p_count), abs=1e-9)


def test_patch_loss_hand_built_two_pair_oracle():
    tau = 0.07
    p = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    p_prime = torch.tensor(
        [[math.cos(0.3), math.sin(0.3)], [math.sin(0.2), math.cos(0.2)]],
        dtype=torch.float64,
    )
    # scalar oracle: softmax cross-entropy per row, positives on the diagonal
    expected = 0.0
    for i in range(2):
        sims = [float(p_prime[i] @ p[k]) / tau for k in range(2)]
        denom = sum(math.exp(s) for s in sims)
        expected += -math.log(math.exp(sims[i]) / denom)
    expected /= 2
    loss = patch_contrastive_loss(PatchBatch(p=p, p_prime=p_prime), tau=tau)
    assert float(loss) == pytest.approx(expected, abs=1e-12)


def test_patch_loss_prefers_matched_pairs():
    rng = np.random.default_rng(0)
    v = torch.tensor(rng.normal(size=(8, 16)))
    v = torch.nn.functional.normalize(v, dim=-1)
    matched = patch_contrastive_loss(PatchBatch(p=v, p_prime=v.clone()), tau=0.07)
    shuffled = patch_contrastive_loss(PatchBatch(p=v, p_prime=v.roll(1, dims=0)), tau=0.07)
    assert float(matched) < float(shuffled)


def test_patch_batch_validate_rejects_unnormalized():
    v = torch.ones(4, 8)
    with pytest.raises(DataError, match="unit-norm"):
        PatchBatch(p=v, p_prime=v).validate()


def test_sample_patch_pairs_shapes_and_norms(rng):
    cfg = small_config()
    model = build_cut_model(cfg, seed=1)
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    y = torch.rand(1, 3, 16, 16) * 2 - 1
    batch = sample_patch_pairs(x, y, model, rng)
    assert batch.p.shape == (cfg.n_patches, cfg.proj_dim)
    assert batch.p_prime.shape == (cfg.n_patches, cfg.proj_dim)
    batch.validate()


def test_sample_patch_pairs_deterministic_per_rng_state():
    cfg = small_config()
    model = build_cut_model(cfg, seed=1)
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    y = torch.rand(1, 3, 16, 16) * 2 - 1
    a = sample_patch_pairs(x, y, model, np.random.default_rng(7))
    b = sample_patch_pairs(x, y, model, np.random.default_rng(7))
    assert torch.equal(a.p, b.p) and torch.equal(a.p_prime, b.p_prime)


def test_sample_patch_pairs_rejects_too_many_patches():
    model = build_cut_model(small_config(n_patches=1000), seed=0)
    x = torch.rand(1, 3, 16, 16)
    with pytest.raises(DataError, match="patches"):
        sample_patch_pairs(x, x, model, np.random.default_rng(0))


def test_total_cut_loss_parts_resum():
    cfg = small_config()
    model = build_cut_model(cfg, seed=2)
    x_l = torch.rand(1, 3, 16, 16) * 2 - 1
    x_u = torch.rand(1, 3, 16, 16) * 2 - 1
    loss_g, loss_d, parts = total_cut_loss(model, x_l, x_u, np.random.default_rng(0))
    resum = parts["g_adv"] + cfg.lambda_u * parts["patch_u"] + cfg.lambda_l * parts["patch_l"]
    assert float(loss_g.detach()) == pytest.approx(resum, abs=1e-6)
    assert float(loss_d.detach()) == pytest.approx(parts["d"], abs=1e-6)
    assert all(math.isfinite(v) for v in parts.values())


def test_identity_generator_gives_low_patch_loss():
    # With an exact-identity generator the two feature sets coincide, so the
    # matched-pair similarities are maximal and the loss is near its floor.
    cfg = small_config()
    model = build_cut_model(cfg, seed=3)
    model.init_identity()
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    fake = model.generator(x)
    batch = sample_patch_pairs(x, fake, model, np.random.default_rng(0))
    assert torch.allclose(batch.p, batch.p_prime)


def test_train_cut_runs_and_checkpoints(tmp_path, rng):
    cfg = small_config()
    model = build_cut_model(cfg, seed=0)
    ground = [rand_image(rng) for _ in range(3)]
    drone = [rand_image(rng) for _ in range(3)]
    ckpt = tmp_path / "cut.pt"
    hist_path = tmp_path / "history.json"
    history = train_cut(model, ground, drone, 5, rng, checkpoint_path=ckpt,
                        history_path=hist_path)
    assert len(history) == 5
    assert model.step == 5
    assert [h["step"] for h in history] == [1, 2, 3, 4, 5]
    assert ckpt.exists() and hist_path.exists()

    loaded = load_cut_checkpoint(ckpt)
    assert loaded.step == 5
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    with torch.no_grad():
        assert torch.allclose(loaded.generator(x), model.generator(x))


def test_train_cut_rejects_empty_sets(rng):
    model = build_cut_model(small_config(), seed=0)
    with pytest.raises(DataError):
        train_cut(model, [], [rand_image(rng)], 1, rng)


def test_checkpoint_kind_mismatch(tmp_path):
    torch.save({"kind": "other"}, tmp_path / "x.pt")
    with pytest.raises(DataError):
        load_cut_checkpoint(tmp_path / "x.pt")
    with pytest.raises(DataError):
        load_cut_checkpoint(tmp_path / "missing.pt")


def test_apply_translation_shapes_and_determinism(rng):
    model = build_cut_model(small_config(), seed=4)
    crops = [rand_image(rng, 32) for _ in range(3)]
    out1 = apply_translation(model, crops)
    out2 = apply_translation(model, crops)
    assert len(out1) == 3
    for a, b, src in zip(out1, out2, crops):
        assert a.shape == src.shape and a.dtype == np.uint8
        assert np.array_equal(a, b)


def test_apply_translation_identity_round_trip(rng):
    model = build_cut_model(small_config(), seed=5)
    model.init_identity()
    crops = [rand_image(rng, 32)]
    out = apply_translation(model, crops)[0]
    # identity in [-1, 1] space maps uint8 back to itself exactly
    assert np.array_equal(out, crops[0])
