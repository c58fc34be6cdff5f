import numpy as np
import pytest
import torch
import torch.nn as nn

from dewrinkle.inpaintnet import InpaintGenerator
from dewrinkle.maskgen import dilate
from dewrinkle.pipeline import PipelineOptions, predict_wrinkle_mask, remove_wrinkles
from dewrinkle.segnet import NestedUNet
from dewrinkle.toy import make_toy_samples


class ConstSeg(nn.Module):
    downsampling_factor = 1

    def __init__(self, logit: float):
        super().__init__()
        self.logit = nn.Parameter(torch.tensor(logit))

    def forward(self, x):
        return self.logit.expand(x.shape[0], 1, *x.shape[-2:])


class OracleSeg(nn.Module):
    """Flags pixels darker than a threshold, mimicking a perfect toy segmenter."""

    downsampling_factor = 1

    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(200.0))

    def forward(self, x):
        return self.scale * (0.45 - x.mean(dim=1, keepdim=True))


@pytest.fixture(scope="module")
def gen():
    torch.manual_seed(0)
    return InpaintGenerator(ngf=4, n_blocks=1).eval()


@pytest.fixture(scope="module")
def image():
    return make_toy_samples(n=1, seed=4)[0].sample.image


def test_empty_prediction_is_identity(gen, image):
    out, mask = remove_wrinkles(image, ConstSeg(-50.0), gen, PipelineOptions(seg_input_size=None))
    assert not mask.any()
    assert np.array_equal(out, image)


def test_override_ignores_segmenter(gen, image):
    m = np.zeros(image.shape[:2], dtype=np.uint8)
    m[10:20, 10:40] = 1
    opts = PipelineOptions(mask_override=m)
    a, ma = remove_wrinkles(image, ConstSeg(-50.0), gen, opts)
    b, mb = remove_wrinkles(image, ConstSeg(50.0), gen, opts)
    c, _ = remove_wrinkles(image, None, gen, opts)
    assert np.array_equal(a, b) and np.array_equal(a, c)
    assert np.array_equal(ma, m) and np.array_equal(mb, m)


def test_changes_confined_to_dilated_prediction(gen):
    toy = make_toy_samples(n=1, seed=6)[0]
    opts = PipelineOptions(seg_input_size=None, dilate_px=2)
    out, mask = remove_wrinkles(toy.sample.image, OracleSeg(), gen, opts)
    assert mask.any()
    raw = predict_wrinkle_mask(toy.sample.image, OracleSeg(), PipelineOptions(seg_input_size=None, dilate_px=0))
    assert np.array_equal(mask, dilate(raw, 2))
    assert np.array_equal(out[mask == 0], toy.sample.image[mask == 0])


def test_undetected_wrinkles_remain(gen):
    toy = make_toy_samples(n=1, seed=8)[0]
    m_w = toy.sample.wrinkle_mask
    partial = m_w.copy()
    partial[:, 32:] = 0
    out, _ = remove_wrinkles(toy.sample.image, None, gen, PipelineOptions(mask_override=partial))
    missed = (m_w == 1) & (partial == 0)
    assert missed.any()
    assert np.array_equal(out[missed], toy.sample.image[missed])
    assert np.all(out[missed] < toy.clean[missed])


def test_large_input_keeps_size():
    torch.manual_seed(0)
    seg = NestedUNet(base_channels=4, encoder_depth=3)
    gen = InpaintGenerator(ngf=4, n_blocks=1)
    x = np.random.default_rng(1).random((1024, 1024, 3)).astype(np.float32)
    out, mask = remove_wrinkles(x, seg, gen, PipelineOptions(seg_input_size=64, threshold=0.3))
    assert out.shape == x.shape and mask.shape == x.shape[:2]
    assert np.array_equal(out[mask == 0], x[mask == 0])


def test_override_shape_checked(gen, image):
    with pytest.raises(ValueError):
        remove_wrinkles(image, None, gen, PipelineOptions(mask_override=np.zeros((8, 8))))


def test_missing_segmenter(gen, image):
    with pytest.raises(ValueError, match="segmentation"):
        remove_wrinkles(image, None, gen)
