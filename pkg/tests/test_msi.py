import math

import numpy as np
import pytest
import torch

from kdmsi.errors import ConfigError
from kdmsi.models import build_score_net
from kdmsi.msi import (
    ScaleSet,
    load_probability_png,
    multiscale_inference,
    multiscale_sigmoid_inference,
    pseudo_label,
    save_probability_png,
    scaled_size,
    sweep_threshold,
)


def sigmoid(x):
    return 1 / (1 + math.exp(-x))


class ConstantStub:
    """Score map at input resolution, constant per input height."""

    output_stride = 1

    def __init__(self, by_height):
        self.by_height = by_height
        self.calls = []

    def __call__(self, pre, post):
        h, w = pre.shape[-2:]
        self.calls.append((h, w))
        value = self.by_height(h) if callable(self.by_height) else self.by_height
        return torch.full((pre.shape[0], 1, h, w), float(value), dtype=pre.dtype)


def pair(h=8, w=8, n=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, h, w, generator=g), torch.rand(n, 3, h, w, generator=g)


SCALE_VALUE = {4: 1.0, 8: 2.0, 12: 3.0, 16: 4.0}


def test_scaled_size():
    assert scaled_size(64, 64, 0.5, 16) == (32, 32)
    assert scaled_size(64, 64, 1.5, 16) == (96, 96)
    assert scaled_size(64, 48, 0.3, 16) == (32, 16)
    assert scaled_size(10, 10, 0.5) == (5, 5)


def test_scale_set_validation():
    with pytest.raises(ConfigError):
        ScaleSet(())
    with pytest.raises(ConfigError):
        ScaleSet((1.0, -0.5))
    assert ScaleSet().n_views == 8


def test_mi_constant_positive_and_negative():
    pre, post = pair()
    assert torch.equal(multiscale_inference(ConstantStub(0.7), pre, post), torch.ones(1, 1, 8, 8))
    assert torch.count_nonzero(multiscale_inference(ConstantStub(-1.0), pre, post)) == 0


def test_mi_scale_indexed_sum():
    pre, post = pair()
    stub = ConstantStub(SCALE_VALUE.get)
    out = multiscale_inference(stub, pre, post)
    assert torch.equal(out, torch.ones(1, 1, 8, 8))
    assert [h for h, _ in stub.calls] == [4, 4, 8, 8, 12, 12, 16, 16]
    # hand loop over the eight evaluations
    total = 0.0
    for h, _ in stub.calls:
        total += SCALE_VALUE[h]
    assert total == 20.0


def test_msi_constant_zero():
    pre, post = pair()
    out = multiscale_sigmoid_inference(ConstantStub(0.0), pre, post)
    assert torch.equal(out, torch.full((1, 1, 8, 8), 0.5))


def test_msi_single_scale_reduces_to_sigmoid():
    net = build_score_net(0).eval()
    pre, post = pair(64, 64, n=2)
    out = multiscale_sigmoid_inference(net, pre, post, ScaleSet((1.0,), flip=False), stride=16)
    with torch.no_grad():
        g = net(pre, post)
    direct = torch.sigmoid(torch.nn.functional.interpolate(g, size=(64, 64), mode="bilinear", align_corners=False))
    # the stub-free reduction: a map already at input size is passed through untouched
    stub_out = multiscale_sigmoid_inference(lambda a, b: torch.full((1, 1, 8, 8), 0.3), *pair(), ScaleSet((1.0,), flip=False))
    assert torch.equal(stub_out, torch.sigmoid(torch.full((1, 1, 8, 8), 0.3)))
    assert out.shape == direct.shape
    with torch.no_grad():
        expected = torch.nn.functional.interpolate(torch.sigmoid(g), size=(64, 64), mode="bilinear", align_corners=False)
    assert torch.equal(out, expected)


def test_msi_scale_indexed_average():
    values = {4: -2.0, 8: 0.0, 12: 2.0, 16: 4.0}
    pre, post = pair()
    out = multiscale_sigmoid_inference(ConstantStub(values.get), pre, post)
    expected = sum(sigmoid(v) for v in values.values()) / 4
    assert expected == pytest.approx(0.6205, abs=1e-4)
    torch.testing.assert_close(out, torch.full((1, 1, 8, 8), expected), rtol=0, atol=1e-7)


def test_msi_range_and_bounds():
    net = build_score_net(4).eval()
    pre, post = pair(64, 64, n=3, seed=2)
    scales = ScaleSet()
    out = multiscale_sigmoid_inference(net, pre, post, scales)
    assert ((out > 0) & (out < 1)).all()
    # collect every per-view probability at input size
    views = []
    with torch.no_grad():
        for s in scales.scales:
            size = scaled_size(64, 64, s, 16)
            a = torch.nn.functional.interpolate(pre, size=size, mode="bilinear", align_corners=False) if size != (64, 64) else pre
            b = torch.nn.functional.interpolate(post, size=size, mode="bilinear", align_corners=False) if size != (64, 64) else post
            for flipped in (False, True):
                g = net(a.flip(-1), b.flip(-1)) if flipped else net(a, b)
                p = torch.sigmoid(g)
                p = p.flip(-1) if flipped else p
                views.append(torch.nn.functional.interpolate(p, size=(64, 64), mode="bilinear", align_corners=False))
    stack = torch.stack(views)
    assert (out >= stack.min(0).values - 1e-7).all()
    assert (out <= stack.max(0).values + 1e-7).all()
    torch.testing.assert_close(out, stack.mean(0), rtol=0, atol=1e-6)


def test_mi_range():
    net = build_score_net(4).eval()
    out = multiscale_inference(net, *pair(64, 64, n=2))
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("axis", ["width", "height"])
def test_msi_flip_equivariance(axis):
    net = build_score_net(9).eval()
    scales = ScaleSet(flip_axis=axis)
    dim = -1 if axis == "width" else -2
    for seed in range(5):
        pre, post = pair(64, 64, seed=seed)
        a = multiscale_sigmoid_inference(net, pre.flip(dim), post.flip(dim), scales)
        b = multiscale_sigmoid_inference(net, pre, post, scales).flip(dim)
        torch.testing.assert_close(a, b, rtol=0, atol=1e-5)


def two_scale_stub():
    """Scale 1 strongly favours the left half, scale 2 mildly favours the right half."""

    def net(pre, post):
        h, w = pre.shape[-2:]
        g = torch.empty(pre.shape[0], 1, h, w)
        left, right = (10.0, 0.0) if h == 8 else (-3.0, 2.0)
        g[..., : w // 2] = left
        g[..., w // 2:] = right
        return g

    return net


def test_mi_and_msi_disagree_on_dominated_scales():
    net = two_scale_stub()
    pre, post = pair()
    scales = ScaleSet((1.0, 2.0), flip=False)
    mi = multiscale_inference(net, pre, post, scales)[0, 0]
    msi = multiscale_sigmoid_inference(net, pre, post, scales)[0, 0]
    assert mi[:, :4].mean() > mi[:, 4:].mean()
    assert msi[:, 4:].mean() > msi[:, :4].mean()
    assert not torch.equal(pseudo_label(mi, 0.3), pseudo_label(msi, 0.3))


def test_pseudo_label_rule():
    assert pseudo_label(np.array([0.7]), 0.3)[0] == 1
    assert pseudo_label(np.array([0.3]), 0.3)[0] == 0
    m = np.random.default_rng(0).random((8, 8))
    labels = pseudo_label(m, 0.3)
    for i in range(8):
        for j in range(8):
            # argmax over [threshold, p] with ties to the first (background) channel
            stack = [0.3, m[i, j]]
            assert labels[i, j] == (1 if stack[1] > stack[0] else 0)
    with pytest.raises(ConfigError):
        pseudo_label(m, 1.0)


def test_pseudo_label_torch():
    out = pseudo_label(torch.tensor([0.2, 0.5]), 0.3)
    assert out.dtype == torch.uint8 and out.tolist() == [0, 1]


def test_sweep_threshold():
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[:2] = 1
    prob = np.where(gt == 1, 0.65, 0.45)
    best, scores = sweep_threshold([prob], [gt])
    assert best == 0.5
    assert scores[0.5] == 1.0 and scores[0.6] == 1.0
    assert scores[0.4] == 0.5


def test_probability_png_roundtrip(tmp_path):
    m = np.random.default_rng(0).random((16, 16))
    save_probability_png(m, tmp_path / "m.png")
    back = load_probability_png(tmp_path / "m.png")
    assert np.abs(back - m).max() <= 0.5 / 65535 + 1e-12
    from PIL import Image

    assert np.asarray(Image.open(tmp_path / "m.png")).dtype == np.uint16
