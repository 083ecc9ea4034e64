import numpy as np
import pytest
import torch

from grainseg.core import ProbabilityMap
from grainseg.errors import CheckpointError, ContractViolation
from grainseg.model import (
    PromptBundle,
    SegmenterConfig,
    binarize,
    build_segmenter,
    granularity_bin,
    load_checkpoint,
    save_checkpoint,
)

from .conftest import make_image


def make_bundle(h, w, granularity=None, seed=0):
    rng = np.random.default_rng(seed)
    disk = (rng.uniform(size=(h, w, 2)) > 0.9).astype(np.float64)
    prev = rng.uniform(size=(h, w))
    return PromptBundle(disk_map=disk, prev_mask=prev, granularity=granularity)


def test_config_validation():
    with pytest.raises(ContractViolation):
        SegmenterConfig(patch_size=8, image_size=100)
    with pytest.raises(ContractViolation):
        SegmenterConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ContractViolation):
        SegmenterConfig(patch_size=6, image_size=96)


def test_granularity_bin_rule():
    assert granularity_bin(0.0, 11) == 0
    assert granularity_bin(0.04, 11) == 0
    assert granularity_bin(0.05, 11) == 1  # round-half-up
    assert granularity_bin(1.0, 11) == 10
    assert granularity_bin(1.7, 11) == 10  # clamped


def test_forward_shape_range_determinism(tiny_model):
    image = make_image(32, 32, seed=1)
    bundle = make_bundle(32, 32, granularity=0.3)
    out1 = tiny_model.predict(image, bundle)
    out2 = tiny_model.predict(image, bundle)
    assert out1.pixels.shape == (32, 32)
    assert out1.pixels.min() >= 0.0 and out1.pixels.max() <= 1.0
    assert np.array_equal(out1.pixels, out2.pixels)


def test_forward_shape_mismatch(tiny_model):
    image = make_image(32, 32)
    bundle = make_bundle(40, 40)
    with pytest.raises(ContractViolation):
        tiny_model.predict(image, bundle)


def test_granularity_prompt_isolation(tiny_model):
    """With no granularity prompt the embedding table must not matter."""
    image = make_image(32, 32, seed=2)
    bundle = make_bundle(32, 32, granularity=None, seed=3)
    before = tiny_model.predict(image, bundle).pixels
    with torch.no_grad():
        tiny_model.granularity_table.weight.add_(5.0)
    after = tiny_model.predict(image, bundle).pixels
    assert np.array_equal(before, after)

    with_prompt = PromptBundle(bundle.disk_map, bundle.prev_mask, granularity=0.5)
    assert not np.array_equal(tiny_model.predict(image, with_prompt).pixels, before)


def test_granularity_changes_output(tiny_model):
    image = make_image(32, 32, seed=4)
    base = make_bundle(32, 32, seed=5)
    low = PromptBundle(base.disk_map, base.prev_mask, granularity=0.0)
    high = PromptBundle(base.disk_map, base.prev_mask, granularity=1.0)
    assert not np.array_equal(
        tiny_model.predict(image, low).pixels, tiny_model.predict(image, high).pixels
    )


def test_off_grid_input_is_padded(tiny_model):
    image = make_image(35, 43, seed=6)
    bundle = make_bundle(35, 43, seed=7)
    out = tiny_model.predict(image, bundle)
    assert out.pixels.shape == (35, 43)


class TestBinarize:
    def test_all_above(self):
        out = binarize(ProbabilityMap(np.full((4, 4), 0.6)), 0.5)
        assert out.pixels.all()

    def test_all_below(self):
        out = binarize(ProbabilityMap(np.full((4, 4), 0.4)), 0.5)
        assert not out.pixels.any()

    def test_mixed_per_pixel(self):
        rng = np.random.default_rng(0)
        probs = rng.uniform(size=(6, 6))
        out = binarize(ProbabilityMap(probs), 0.5)
        assert np.array_equal(out.pixels, probs >= 0.5)

    def test_threshold_bounds(self):
        with pytest.raises(ContractViolation):
            binarize(ProbabilityMap(np.zeros((4, 4))), 0.0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_model, tmp_path, tiny_config):
        image = make_image(32, 32, seed=8)
        bundle = make_bundle(32, 32, granularity=0.7, seed=9)
        before = tiny_model.predict(image, bundle).pixels
        path = tmp_path / "model.pt"
        save_checkpoint(tiny_model, path)
        loaded = load_checkpoint(path, expected_config=tiny_config)
        after = loaded.predict(image, bundle).pixels
        assert np.array_equal(before, after)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.pt")

    def test_config_mismatch(self, tiny_model, tmp_path):
        path = tmp_path / "model.pt"
        save_checkpoint(tiny_model, path)
        other = SegmenterConfig(patch_size=8, embed_dim=64, depth=2, num_heads=2, image_size=32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_config=other)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_segmenter_payload(self, tmp_path):
        path = tmp_path / "other.pt"
        torch.save({"something": 1}, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_build_is_seed_deterministic(tiny_config):
    a = build_segmenter(tiny_config, seed=5)
    b = build_segmenter(tiny_config, seed=5)
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)
