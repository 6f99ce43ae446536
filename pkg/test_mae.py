"""
Tests for tokenization, masking, the masked autoencoder and checkpoints
"""

import numpy as np
import pytest

from conftest import acquisition_times
from highfm.datapipe.scenes import tile_scene
from highfm.datapipe.synth import SynthConfig, synth_generate
from highfm.errors import CheckpointError, ConfigError, ContractError, ShapeError
from highfm.harness.optim import Adam, AdamConfig
from highfm.mae import (
    MaskPlan,
    ModelConfig,
    PretrainBatch,
    create_mae_model,
    detokenize,
    draw_plans,
    encoder_parameter_count,
    encoder_state,
    load_checkpoint,
    make_pretrain_batch,
    patchify,
    pretrain_step,
    random_mask,
    recon_loss,
    save_checkpoint,
    tokenize,
    unpatchify,
)
from highfm.mae.checkpoint import decode_checkpoint, encode_checkpoint
from highfm.mae.mae_model import visible_count
from highfm.numerics.tensor import Tensor, no_grad


def _batch_inputs(cfg, batch=2, seed=0):
    gen = np.random.default_rng(seed)
    patches = gen.normal(size=(batch, cfg.timesteps, cfg.bands, cfg.image_size, cfg.image_size))
    timestamps = [acquisition_times(cfg.timesteps, offset_s=3600 * b) for b in range(batch)]
    return patches, timestamps


def _synthetic_patches(n, timesteps, seed=0):
    """Smooth synthetic tiles (first 3 bands, 8x8), one same-hour acquisition per timestep."""
    scenes = synth_generate(SynthConfig(seed=seed, n_scenes=timesteps, height=32, width=32))
    per_step = [[t.data[0, :3] for t in tile_scene(scene, tile_size=8)] for scene in scenes]
    patches = np.stack([np.stack(steps) for steps in zip(*per_step)])[:n]
    return patches, [[s.timestamp for s in scenes] for _ in range(len(patches))]


# ---------------------------------------------------------------------------
# Configuration and tokenization
# ---------------------------------------------------------------------------


def test_default_encoder_has_about_ninety_million_parameters():
    count = encoder_parameter_count()
    assert 85e6 <= count <= 95e6
    assert count == 85_192_704


def test_parameter_count_matches_allocated_model(toy_cfg):
    model = create_mae_model(toy_cfg)
    assert model.encoder.num_parameters() == encoder_parameter_count(toy_cfg)


@pytest.mark.parametrize(
    "overrides",
    [
        {"image_size": 10},
        {"embed_dim": 18, "heads": 2},
        {"heads": 3},
        {"mask_ratio": 0.0},
        {"mask_ratio": 1.0},
        {"timesteps": 2},
        {"spectral_groups": 2},
        {"depth": 0},
    ],
)
def test_model_config_rejects(overrides):
    with pytest.raises(ConfigError):
        ModelConfig.toy(**overrides)


def test_token_geometry():
    cfg = ModelConfig()
    assert cfg.grid == (8, 8)
    assert cfg.token_dim == 176
    assert cfg.n_tokens == 64
    assert ModelConfig(timesteps=3).n_tokens == 192


def test_patchify_default_geometry():
    tokens = patchify(np.zeros((11, 32, 32)), 4)
    assert tokens.shape == (64, 176)


def test_patchify_constant_image():
    tokens = patchify(np.full((3, 8, 8), 2.5), 4)
    assert np.all(tokens == 2.5)


def test_unpatchify_places_token_in_its_cell():
    tokens = np.zeros((64, 16))
    tokens[2 * 8 + 3] = 1.0
    image = unpatchify(tokens, 4)[0]
    rows, cols = np.nonzero(image)
    assert set(rows) == {8, 9, 10, 11}
    assert set(cols) == {12, 13, 14, 15}


def test_unpatchify_inverts_patchify(rng):
    x = rng.normal(size=(2, 3, 11, 32, 32))
    np.testing.assert_array_equal(unpatchify(patchify(x, 4), 4), x)


def test_patchify_works_on_tensors(rng):
    x = rng.normal(size=(3, 8, 8))
    np.testing.assert_allclose(patchify(Tensor(x), 4).data, patchify(x, 4), rtol=1e-6)


def test_unpatchify_errors():
    with pytest.raises(ShapeError):
        unpatchify(np.zeros((63, 16)), 4)
    with pytest.raises(ShapeError):
        unpatchify(np.zeros((64, 15)), 4)


def test_tokenize_orders_timestep_group_cell():
    cfg = ModelConfig.toy(timesteps=3, bands=4, spectral_groups=2)
    patches = np.zeros((1, 3, 4, 8, 8))
    patches[0, 2, 2:] = 1.0  # last timestep, second band group
    tokens = tokenize(patches, cfg)
    assert tokens.shape == (1, 3 * 2 * 4, 2 * 16)
    lit = np.nonzero(tokens[0].sum(axis=1))[0]
    np.testing.assert_array_equal(lit, [20, 21, 22, 23])
    np.testing.assert_array_equal(detokenize(tokens, cfg), patches)


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


def test_visible_counts():
    assert visible_count(64, 0.75) == 16
    assert visible_count(192, 0.75) == 48
    assert visible_count(10, 0.75) == 3


def test_masking_invariants_over_random_draws():
    gen = np.random.default_rng(123)
    for _ in range(1000):
        n = int(gen.integers(1, 300))
        ratio = float(gen.uniform(0.01, 0.99))
        plan = random_mask(n, ratio, gen)
        assert plan.n_visible == int(np.ceil(round((1 - ratio) * n, 9)))
        np.testing.assert_array_equal(plan.shuffle[plan.restore], np.arange(n))
        assert len(plan.keep_ids) + len(plan.masked_ids) == n
        assert not set(plan.keep_ids.tolist()) & set(plan.masked_ids.tolist())
        assert plan.mask.sum() == n - plan.n_visible


def test_random_mask_is_seeded():
    a = random_mask(64, 0.75, np.random.default_rng(5))
    b = random_mask(64, 0.75, np.random.default_rng(5))
    c = random_mask(64, 0.75, np.random.default_rng(6))
    np.testing.assert_array_equal(a.shuffle, b.shuffle)
    assert not np.array_equal(a.shuffle, c.shuffle)


def test_consistent_mask_keeps_same_cells_each_timestep(rng):
    plan = random_mask(48, 0.75, rng, timesteps=3, consistent=True)
    cells = [sorted(k % 16 for k in plan.keep_ids if k // 16 == t) for t in range(3)]
    assert cells[0] == cells[1] == cells[2]
    assert plan.n_visible == 12


def test_mask_plan_validation():
    with pytest.raises(ContractError):
        MaskPlan(4, 2, np.array([0, 1, 1, 3]))
    with pytest.raises(ContractError):
        MaskPlan(4, 0, np.arange(4))


def test_pretrain_batch_checks_multi_timestep_times():
    cfg = ModelConfig.toy(timesteps=3)
    patches, _ = _batch_inputs(cfg, batch=1)
    plans = draw_plans(cfg, 1, np.random.default_rng(0))
    spread = [acquisition_times(1, 0)[0], acquisition_times(1, 1800)[0], acquisition_times(1, 4000)[0]]
    with pytest.raises(ContractError):
        PretrainBatch(patches, [spread], plans)
    with pytest.raises(ContractError):
        PretrainBatch(patches, [list(reversed(acquisition_times(3)))], plans)


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("timesteps", [1, 3])
def test_encode_decode_shapes(timesteps):
    cfg = ModelConfig.toy(timesteps=timesteps, image_size=16)
    model = create_mae_model(cfg)
    patches, timestamps = _batch_inputs(cfg)
    batch = make_pretrain_batch(patches, timestamps, cfg, np.random.default_rng(0))
    latent = model.encode(batch)
    assert latent.shape == (2, 1 + visible_count(16 * timesteps, 0.75), 16)
    pred = model.decode(latent, batch.plans, batch.timestamps)
    assert pred.shape == (2, 16 * timesteps, 3 * 16)


def test_encoder_ignores_masked_pixels(toy_cfg):
    """Perturbing masked-token pixels leaves the encoder output bit-identical"""
    model = create_mae_model(toy_cfg)
    patches, timestamps = _batch_inputs(toy_cfg)
    plans = draw_plans(toy_cfg, 2, np.random.default_rng(1))
    tokens = tokenize(patches, toy_cfg)
    for b, plan in enumerate(plans):
        tokens[b, plan.masked_ids] += 100.0
    perturbed = detokenize(tokens, toy_cfg)
    with no_grad():
        a = model.encoder(patches, timestamps, plans)
        b = model.encoder(perturbed, timestamps, plans)
    np.testing.assert_array_equal(a.data, b.data)


def test_decoder_rejects_inconsistent_plans(toy_cfg):
    model = create_mae_model(toy_cfg)
    patches, timestamps = _batch_inputs(toy_cfg)
    batch = make_pretrain_batch(patches, timestamps, toy_cfg, np.random.default_rng(0))
    latent = model.encode(batch)
    with pytest.raises(ContractError):
        model.decode(latent, [MaskPlan.full(4), MaskPlan.full(4)], timestamps)


def test_reordered_plan_gives_same_reconstruction(toy_cfg, float64):
    """Reordering keep/masked ids within a plan does not change predictions at restored positions"""
    model = create_mae_model(toy_cfg)
    patches, timestamps = _batch_inputs(toy_cfg, batch=1)
    plan = random_mask(toy_cfg.n_tokens, 0.5, np.random.default_rng(3))
    keep, masked = plan.keep_ids, plan.masked_ids
    other = MaskPlan(plan.n_tokens, plan.n_visible, np.concatenate([keep[::-1], masked[::-1]]))
    with no_grad():
        a = model.decode(model.encoder(patches, timestamps, [plan]), [plan], timestamps)
        b = model.decode(model.encoder(patches, timestamps, [other]), [other], timestamps)
    np.testing.assert_allclose(a.data, b.data, atol=1e-10)


def test_recon_loss_examples(rng):
    target = rng.normal(size=(2, 4, 6))
    plans = [random_mask(4, 0.5, rng) for _ in range(2)]
    assert recon_loss(Tensor(target), target, plans, norm_pix=False).item() == pytest.approx(0.0, abs=1e-6)
    assert recon_loss(Tensor(target + 1.0), target, plans, norm_pix=False).item() == pytest.approx(1.0, rel=1e-5)


def test_recon_loss_matches_flat_loop(rng, float64):
    pred, target = rng.normal(size=(3, 8, 5)), rng.normal(size=(3, 8, 5))
    plans = [random_mask(8, 0.6, rng) for _ in range(3)]
    total, count = 0.0, 0
    for b, plan in enumerate(plans):
        for i in plan.masked_ids:
            for j in range(5):
                total += (pred[b, i, j] - target[b, i, j]) ** 2
            count += 1
    expected = total / (count * 5)
    assert recon_loss(Tensor(pred), target, plans, norm_pix=False).item() == pytest.approx(expected, rel=1e-12)


def test_recon_loss_norm_pix_standardizes_targets(float64):
    target = np.array([[[1.0, 3.0], [10.0, 30.0]]])
    plans = [MaskPlan(2, 1, np.array([0, 1]))]
    standardized = np.array([[[-1.0, 1.0], [-1.0, 1.0]]])
    loss = recon_loss(Tensor(standardized), target, plans, norm_pix=True)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_recon_loss_needs_a_masked_token(rng):
    target = rng.normal(size=(1, 4, 3))
    with pytest.raises(ContractError):
        recon_loss(Tensor(target), target, [MaskPlan.full(4)], norm_pix=False)


def test_pretrain_step_needs_training_mode(toy_cfg):
    model = create_mae_model(toy_cfg)
    patches, timestamps = _batch_inputs(toy_cfg)
    batch = make_pretrain_batch(patches, timestamps, toy_cfg, np.random.default_rng(0))
    model.eval()
    with pytest.raises(ContractError):
        pretrain_step(batch, model, Adam(model))


def test_pretrain_steps_are_deterministic(toy_cfg):
    def run():
        model = create_mae_model(toy_cfg, seed=4)
        optimizer = Adam(model, AdamConfig(lr=1e-3))
        gen = np.random.default_rng(4)
        losses = []
        for _ in range(3):
            patches, timestamps = _batch_inputs(toy_cfg, seed=int(gen.integers(1000)))
            losses.append(pretrain_step(make_pretrain_batch(patches, timestamps, toy_cfg, gen), model, optimizer))
        return losses

    assert run() == run()


@pytest.mark.slow
@pytest.mark.parametrize("timesteps", [1, 3])
def test_pretraining_halves_reconstruction_loss(timesteps):
    cfg = ModelConfig.toy(timesteps=timesteps)
    patches, timestamps = _synthetic_patches(16, timesteps)
    model = create_mae_model(cfg, seed=0)
    optimizer = Adam(model, AdamConfig(lr=1e-3))
    gen = np.random.default_rng(0)
    losses = [pretrain_step(make_pretrain_batch(patches, timestamps, cfg, gen), model, optimizer) for _ in range(200)]
    assert losses[-1] < 0.5 * losses[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_bytes_are_stable(toy_cfg):
    state = create_mae_model(toy_cfg).state_dict()
    blob = encode_checkpoint(state, {"model": toy_cfg.model_dump()})
    decoded, meta = decode_checkpoint(blob)
    assert encode_checkpoint(decoded, meta) == blob
    assert ModelConfig(**meta["model"]) == toy_cfg


def test_checkpoint_reload_reproduces_outputs(toy_cfg, tmp_path):
    model = create_mae_model(toy_cfg, seed=1)
    path = save_checkpoint(tmp_path / "mae.ckpt", model.state_dict(), {"kind": "mae"})
    state, meta = load_checkpoint(path)
    assert meta == {"kind": "mae"}
    clone = create_mae_model(toy_cfg, seed=2)
    clone.load_state_dict(state)
    patches, timestamps = _batch_inputs(toy_cfg)
    with no_grad():
        np.testing.assert_array_equal(model.encoder(patches, timestamps).data, clone.encoder(patches, timestamps).data)


def test_encoder_state_strips_prefix(toy_cfg):
    state = create_mae_model(toy_cfg).state_dict()
    enc = encoder_state(state)
    assert "cls_token" in enc
    assert not any(name.startswith("decoder.") or name.startswith("mask_token") for name in enc)


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda blob: b"XXXXXXXX" + blob[8:],
        lambda blob: blob[:10],
        lambda blob: blob[:-4],
        lambda blob: blob[:12] + b"{" + blob[13:],
        lambda blob: blob[:-11] + bytes([blob[-11] ^ 0x01]) + blob[-10:],
        lambda blob: blob[:-1] + bytes([blob[-1] ^ 0xFF]),
    ],
    ids=["magic", "header", "trailer", "manifest", "payload-bit", "digest"],
)
def test_corrupted_checkpoint(corrupt):
    blob = encode_checkpoint({"w": np.ones((2, 3), dtype=np.float32)}, {"kind": "mae"})
    with pytest.raises(CheckpointError):
        decode_checkpoint(corrupt(blob))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_payload_corruption_is_not_loaded_as_weights():
    blob = bytearray(encode_checkpoint({"w": np.ones(6, dtype=np.float32)}, {"kind": "mae"}))
    blob[-11] ^= 0x10
    with pytest.raises(CheckpointError, match="digest"):
        decode_checkpoint(bytes(blob))
