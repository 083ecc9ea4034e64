import numpy as np
import pytest

from grainseg.core import BinaryMask, Image, MaskRole
from grainseg.model import SegmenterConfig, build_segmenter


def make_image(h=32, w=32, seed=0, image_id="img"):
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(0, 1, size=(h, w, 3)), id=image_id)


def rect_mask(h, w, r0, r1, c0, c1, role=MaskRole.PREDICTION):
    px = np.zeros((h, w), dtype=bool)
    px[r0:r1, c0:c1] = True
    return BinaryMask(px, role=role)


@pytest.fixture
def tiny_config():
    return SegmenterConfig(patch_size=8, embed_dim=32, depth=2, num_heads=2, image_size=32)


@pytest.fixture
def tiny_model(tiny_config):
    return build_segmenter(tiny_config, seed=11)
