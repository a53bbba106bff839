import json

import numpy as np
import pytest
import torch

from raingen.data import ToyRainParams, load_paired_dataset, make_toy_rain_dataset
from raingen.generation import (AugmentSpec, SweepSpec, augment_dataset, compose_rain_layer,
                                disentangle_sweep, draw_latents, encode, generate, interpolate,
                                montage, replay_manifest_entry, sample_rain, synthesize_rainy, write_augmented)
from raingen.networks import ArchConfig, Generator, RNet

CFG = ArchConfig(patch_size=32, latent_dim=8, rnet_base=4, gen_base=4, max_width=16)


@pytest.fixture(scope="module")
def theta():
    torch.manual_seed(0)
    g = Generator(CFG)
    # non-trivial positive output so composition tests see rain
    with torch.no_grad():
        for p in g.parameters():
            p.add_(0.05 * torch.rand_like(p))
    return g


@pytest.fixture(scope="module")
def pool():
    return make_toy_rain_dataset(ToyRainParams(n_pairs=4, image_size=40, seed=2))


def test_sample_same_seed_identical(theta):
    a, za = sample_rain(5, 3, theta)
    b, zb = sample_rain(5, 3, theta)
    assert np.array_equal(a, b) and np.array_equal(za, zb)
    assert a.shape == (5, 3, 32, 32)


def test_sample_zero(theta):
    r, z = sample_rain(0, 3, theta)
    assert r.shape == (0, 3, 32, 32) and z.shape == (0, 8)


def test_latent_stream_partitioned_by_index():
    whole = draw_latents(10, 4, seed=5)
    tail = draw_latents(4, 4, seed=5, offset=6)
    assert np.array_equal(whole[6:], tail)


def test_latent_moments():
    z = draw_latents(100_000, 4, seed=11)
    assert np.all(np.abs(z.mean(0)) < 0.02)
    assert np.all(np.abs(z.var(0) - 1) < 0.05)


def test_generate_batching_invariant(theta):
    z = draw_latents(7, 8, seed=1)
    full = generate(theta, z)
    assert np.array_equal(full[2:5], generate(theta, z[2:5]))
    batched = generate(theta, z, batch_size=3)
    np.testing.assert_allclose(full, batched, rtol=0, atol=1e-6)


def test_synthesize_cases():
    b = np.random.default_rng(0).uniform(size=(4, 4, 3))
    o, mask = synthesize_rainy(b, np.zeros_like(b))
    assert np.array_equal(o, b) and not mask.any()
    r = np.random.default_rng(1).uniform(size=(4, 4, 3))
    o, _ = synthesize_rainy(np.zeros_like(r), r, clamp=False)
    assert np.array_equal(o, r)
    o, mask = synthesize_rainy(np.full((1, 1), 0.9), np.full((1, 1), 0.5))
    assert o[0, 0] == 1.0 and mask[0, 0]


def test_synthesize_shape_mismatch():
    with pytest.raises(ValueError):
        synthesize_rainy(np.zeros((2, 2)), np.zeros((2, 3)))


def test_composition_exact_off_clamp():
    rng = np.random.default_rng(2)
    b, r = rng.uniform(size=(16, 16, 3)), rng.uniform(0, 0.6, size=(16, 16, 3))
    o, mask = synthesize_rainy(b, r, clamp=False)
    assert np.array_equal(o - b, (b + r) - b)
    o, mask = synthesize_rainy(b, r, clamp=True)
    assert mask.any() and not mask.all()
    assert np.array_equal((o - b)[~mask], ((b + r) - b)[~mask])


def test_sweep_endpoints_and_monotone(theta):
    patches, z = disentangle_sweep(SweepSpec(dim=3, count=2), theta)
    assert z[0, 3] == -3.0 and z[1, 3] == 3.0 and patches.shape[0] == 2
    _, z = disentangle_sweep(SweepSpec(dim=3), theta)
    assert len(z) == 9 and np.all(np.diff(z[:, 3]) > 0)
    others = np.delete(z, 3, axis=1)
    assert np.all(others == others[0])


def test_sweep_ignored_dim_gives_identical_outputs():
    torch.manual_seed(1)
    g = Generator(CFG)
    with torch.no_grad():
        g.fc.weight[:, 5] = 0.0
    patches, _ = disentangle_sweep(SweepSpec(dim=5, count=5), g)
    assert all(np.array_equal(patches[0], p) for p in patches[1:])


@pytest.mark.parametrize("kw", [dict(dim=8), dict(dim=-1), dict(dim=0, lo=1, hi=1), dict(dim=0, count=1),
                                dict(dim=0, base_z=np.zeros(3))])
def test_sweep_validation(theta, kw):
    with pytest.raises(ValueError):
        disentangle_sweep(SweepSpec(**kw), theta)


def test_interpolation_endpoints_bit_exact(theta):
    za, zb = draw_latents(2, 8, seed=4)
    frames, z = interpolate(za, zb, 6, theta)
    assert np.array_equal(frames[0], generate(theta, za)[0])
    assert np.array_equal(frames[-1], generate(theta, zb)[0])
    frames, _ = interpolate(za, za, 4, theta)
    assert all(np.array_equal(frames[0], f) for f in frames)


def test_interpolation_errors(theta):
    with pytest.raises(ValueError):
        interpolate(np.zeros(8), np.zeros(7), 3, theta)
    with pytest.raises(ValueError):
        interpolate(np.zeros(8), np.zeros(8), 1, theta)


def test_encode_contract():
    torch.manual_seed(2)
    rnet = RNet(CFG)
    o = np.random.default_rng(0).uniform(size=(3, 32, 32)).astype(np.float32)
    a, b = encode(o, rnet), encode(o.copy(), rnet)
    assert a.shape == (8,) and np.array_equal(a, b)
    assert encode(np.stack([o, o]), rnet).shape == (2, 8)


@pytest.mark.parametrize("size", [(32, 32), (40, 40), (70, 45), (20, 50)])
def test_tile_layer_shape_and_range(theta, size):
    layer, z = compose_rain_layer(theta, *size, seed=0)
    assert layer.shape == (*size, 3)
    assert np.all(np.isfinite(layer)) and layer.min() >= 0


def test_tile_single_patch_is_exact(theta):
    layer, z = compose_rain_layer(theta, 32, 32, seed=0)
    assert len(z) == 1
    np.testing.assert_allclose(layer, generate(theta, z)[0].transpose(1, 2, 0), rtol=0, atol=1e-7)


def test_tile_constant_patches_stay_constant():
    g = Generator(CFG)
    with torch.no_grad():
        for p in g.parameters():
            p.zero_()
        g.blocks[-2].bias.fill_(0.25)
    layer, _ = compose_rain_layer(g, 90, 70, seed=1)
    np.testing.assert_allclose(layer, 0.25, atol=1e-12)


def test_resize_policy(theta):
    layer, z = compose_rain_layer(theta, 64, 48, seed=0, policy="resize")
    assert layer.shape == (64, 48, 3) and len(z) == 1
    with pytest.raises(ValueError):
        compose_rain_layer(theta, 64, 48, seed=0, policy="warp")


def test_augment_zero_is_identity(theta, pool):
    out, manifest, layers = augment_dataset(AugmentSpec(pool, 0), theta)
    assert out is pool and manifest == [] and layers == []


def test_augment_counts_and_replay(theta, pool):
    out, manifest, _ = augment_dataset(AugmentSpec(pool, 5, seed=3), theta)
    assert len(out) == len(pool) + 5 and len(manifest) == 5
    for rec in manifest:
        assert rec["source_id"] in pool.ids
        o, x, _ = replay_manifest_entry(rec, pool, theta)
        k = out.ids.index(rec["id"])
        assert np.array_equal(o, out.rainy[k]) and np.array_equal(x, out.clean[k])
        assert o.min() >= 0 and o.max() <= 1


def test_augment_errors(theta, pool):
    with pytest.raises(ValueError):
        AugmentSpec(pool, -1)
    with pytest.raises(ValueError):
        augment_dataset(AugmentSpec(pool.subset([]), 2), theta)


def test_write_augmented(theta, pool, tmp_path):
    out, manifest, layers = augment_dataset(AugmentSpec(pool, 3, seed=1, policy="resize"), theta)
    write_augmented(tmp_path, out, manifest, layers)
    lines = [json.loads(s) for s in (tmp_path / "manifest.jsonl").read_text().splitlines()]
    assert [r["id"] for r in lines] == out.ids
    fakes = [r for r in lines if r["kind"] == "fake"]
    assert [r["id"] for r in fakes] == [r["id"] for r in manifest]
    assert all(r["policy"] == "resize" for r in fakes)
    assert len(list(tmp_path.glob("rainlayer-*.png"))) == 3
    for layout in ("rain100", "manifest"):
        back = load_paired_dataset(tmp_path, layout=layout)
        assert sorted(back.ids) == sorted(out.ids) and not back.rejects


def test_montage_layout():
    patches = np.zeros((5, 3, 4, 4))
    grid = montage(patches, ncol=2, pad=1)
    assert grid.shape == (3 * 5 + 1, 2 * 5 + 1, 3)
    assert grid[1:5, 1:5].max() == 0 and grid[0, 0, 0] == 1
