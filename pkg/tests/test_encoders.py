import numpy as np
import pytest
import torch

from oracles import bilinear_direct
from paintmatch.encoders import (
    PATCH_SIZE,
    SEMANTIC_DIM,
    SEMANTIC_INPUT_SIDE,
    SPATIAL_DIM,
    BackboneUnavailable,
    Dinov2Backbone,
    ProceduralBackbone,
    SpatialUNet,
    bilinear_matrix,
    encode_semantic,
    encode_spatial,
    image_to_tensor,
    resize_feature_map,
)
from paintmatch.segmentation import unify_line_colors
from paintmatch.synthetic import Character, Pose, render


def _drawing(size=64, seed=0):
    line, _ = render(Character.random(np.random.default_rng(seed)), Pose(), size)
    return line


def test_grid_side_is_37():
    assert SEMANTIC_INPUT_SIDE // PATCH_SIZE == 37


@pytest.fixture(scope="module")
def tiny_dinov2(tmp_path_factory):
    transformers = pytest.importorskip("transformers")
    cfg = transformers.Dinov2Config(hidden_size=32, num_hidden_layers=1, num_attention_heads=2,
                                    intermediate_size=64, patch_size=14, image_size=56)
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("dinov2")
    transformers.Dinov2Model(cfg).save_pretrained(path)
    return path


def test_dinov2_grid_shape_and_determinism(tiny_dinov2):
    bb = Dinov2Backbone(tiny_dinov2)
    img = _drawing(80)
    g1, g2 = encode_semantic(img, bb), encode_semantic(img.copy(), bb)
    assert g1.shape == (37, 37, 32)
    np.testing.assert_array_equal(g1, g2)


@pytest.mark.parametrize("weights", [None, "/nonexistent/weights"])
def test_missing_weights_raise_backbone_unavailable(weights):
    with pytest.raises(BackboneUnavailable, match="backbone unavailable"):
        Dinov2Backbone(weights)


def test_corrupt_weights_raise_backbone_unavailable(tmp_path):
    (tmp_path / "config.json").write_text("{not json")
    with pytest.raises(BackboneUnavailable, match="backbone unavailable"):
        Dinov2Backbone(tmp_path)


def test_procedural_backbone_shape_and_determinism(backbone):
    img = _drawing()
    g = encode_semantic(img, backbone)
    assert g.shape == (37, 37, SEMANTIC_DIM) and g.dtype == np.float32
    np.testing.assert_array_equal(g, encode_semantic(img.copy(), ProceduralBackbone()))
    # Mono may change the grid; only shape is promised
    assert encode_semantic(unify_line_colors(img), backbone).shape == g.shape


@pytest.mark.parametrize("hw", [(16, 16), (40, 24), (37, 53)])
def test_unet_keeps_spatial_dims(hw):
    net = SpatialUNet()
    img = np.full((*hw, 3), 255, np.uint8)
    img[hw[0] // 2] = 0
    out = encode_spatial(img, net)
    assert out.shape == (*hw, SPATIAL_DIM) == (*hw, 128)


def test_unet_rejects_tiny_input():
    net = SpatialUNet()
    with pytest.raises(ValueError):
        encode_spatial(np.zeros((8, 30, 3), np.uint8), net)


def test_image_to_tensor_range():
    x = image_to_tensor(np.array([[[0, 255, 127]]], np.uint8))
    assert x.shape == (1, 3, 1, 1)
    assert x.flatten()[0] == -1 and x.flatten()[1] == 1


def test_unet_finite_difference_gradient():
    torch.manual_seed(3)
    net = SpatialUNet().double()
    x = image_to_tensor(_drawing(16, seed=2)).double()
    rng = np.random.default_rng(0)
    probe = torch.from_numpy(rng.standard_normal((16, 16, 128)))

    def f():
        return (encode_spatial(x, net) * probe).sum()

    params = [net.encoders[0][0].weight, net.decoders[-1][3].weight, net.head.weight, net.upsamplers[0].bias]
    for p in params:
        net.zero_grad()
        f().backward()
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        analytic = p.grad[idx].item()
        h = 1e-6
        with torch.no_grad():
            p[idx] += h
            up = f().item()
            p[idx] -= 2 * h
            down = f().item()
            p[idx] += h
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-8), (analytic, numeric)


def test_resize_identity_and_constant():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((5, 7, 3)).astype(np.float32)
    assert resize_feature_map(f, (5, 7)) is f
    const = np.full((4, 4, 2), 1.5, np.float32)
    np.testing.assert_allclose(resize_feature_map(const, (13, 9)), 1.5, atol=1e-6)


@pytest.mark.parametrize("src,dst", [((2, 2), (4, 4)), ((37, 37), (50, 64)), ((6, 5), (3, 2))])
def test_resize_matches_direct_bilinear(src, dst):
    f = np.random.default_rng(1).standard_normal((*src, 3))
    np.testing.assert_allclose(resize_feature_map(f, dst), bilinear_direct(f, *dst), atol=1e-6)


def test_resize_2x2_to_4x4_hand_values():
    f = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    out = resize_feature_map(f, (4, 4))[..., 0]
    # half-pixel centers: source coordinates -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)
    np.testing.assert_allclose(out[:, 0], [0.0, 0.5, 1.5, 2.0], atol=1e-12)


def test_bilinear_matrix_reproduces_resize():
    f = np.random.default_rng(2).standard_normal((9, 11, 1))
    wy, wx = bilinear_matrix(9, 20), bilinear_matrix(11, 7)
    np.testing.assert_allclose(wy @ f[..., 0] @ wx.T, resize_feature_map(f, (20, 7))[..., 0], atol=1e-10)
    np.testing.assert_allclose(wy.sum(axis=1), 1.0)


def test_resize_is_linear():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 6, 6, 2))
    lhs = resize_feature_map(2 * a - b, (11, 4))
    rhs = 2 * resize_feature_map(a, (11, 4)) - resize_feature_map(b, (11, 4))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
