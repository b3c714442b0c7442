import json

import numpy as np
import pytest
import torch

from geofake.explain import (
    AttentionStackError, CamContext, ExplainError, attention_context, attention_rollout, discard_lowest,
    explain_batch, explain_image, fuse_heads, grad_attention_rollout, grad_cam, minmax, overlay,
    rollout_products,
)
from geofake.models import ModelSpec, build, predict_proba


def test_grad_cam_hand_case():
    ctx = CamContext([[[1.0, 2.0], [3.0, 4.0]]], np.full((1, 2, 2), 0.5))
    assert ctx.channel_weights == pytest.approx([0.5])
    np.testing.assert_allclose(ctx.raw_map(), [[0.5, 1.0], [1.5, 2.0]], atol=1e-12)
    np.testing.assert_allclose(ctx.saliency().grid, [[0, 1 / 3], [2 / 3, 1]], atol=1e-6)


def test_grad_cam_zero_gradient_and_scale_invariance(rng):
    a = rng.random((4, 5, 5))
    assert not CamContext(a, np.zeros_like(a)).saliency().grid.any()
    g = rng.normal(size=a.shape)
    base = CamContext(a, g).saliency().grid
    np.testing.assert_allclose(CamContext(a, 7.5 * g).saliency().grid, base, atol=1e-12)
    assert (CamContext(a, g).raw_map() >= 0).all()


def test_grad_cam_shape_mismatch():
    with pytest.raises(ValueError):
        CamContext(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))


@pytest.mark.parametrize("layer", ["layer4", "layer3"])
def test_grad_cam_weights_match_finite_differences(layer):
    model = build(ModelSpec(family="cnn", seed=5)).double().eval()
    x = torch.randn(3, 224, 224, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    ctx, logits = _cam(model, x, layer)
    hw = ctx.activations.shape[1] * ctx.activations.shape[2]
    module = dict(model.backbone.named_modules())[layer]
    eps = 1e-5
    for k in range(ctx.activations.shape[0]):
        def score(delta):
            def bump(_m, _i, out):
                out = out.clone()
                out[:, k] += delta
                return out
            handle = module.register_forward_hook(bump)
            try:
                with torch.no_grad():
                    return model(x[None])[0, ctx.target_class].item()
            finally:
                handle.remove()
        fd = (score(eps) - score(-eps)) / (2 * eps * hw)
        assert ctx.channel_weights[k] == pytest.approx(fd, rel=1e-3, abs=1e-9)


def _cam(model, x, layer):
    from geofake.explain import cam_context
    return cam_context(model, x, None, layer)


def test_grad_cam_on_model_is_normalized():
    model = build(ModelSpec(family="cnn", seed=1))
    smap = grad_cam(model, torch.randn(3, 224, 224))
    assert smap.grid.shape == (224, 224)
    assert smap.grid.min() >= 0 and smap.grid.max() <= 1
    with pytest.raises(ExplainError):
        grad_cam(build(ModelSpec(family="vit")), torch.randn(3, 224, 224))


def _stack(*layers):
    return np.asarray(layers, dtype=np.float64)[:, None]  # L x 1 head x T x T


def test_rollout_identity_gives_zero_map():
    smap = attention_rollout(_stack(np.eye(3)), discard_ratio=0.0)
    assert not smap.grid.any()


def test_rollout_uniform_cls_is_constant():
    a = np.array([[0, 0.5, 0.5], [0, 1, 0], [0, 0, 1]])
    hats, _ = rollout_products([a])
    np.testing.assert_allclose(hats[0][0], [0.5, 0.25, 0.25], atol=1e-12)
    assert not attention_rollout(_stack(a), discard_ratio=0.0).grid.any()


def test_rollout_two_layer_hand_case():
    l1 = [[0, 0.5, 0.5], [0, 1, 0], [0, 0, 1]]
    l2 = [[0, 1, 0], [0, 1, 0], [0, 0, 1]]
    smap = attention_rollout(_stack(l1, l2), discard_ratio=0.0)
    _, products = rollout_products([np.asarray(l1, float), np.asarray(l2, float)])
    np.testing.assert_allclose(products[-1][0], [0.25, 0.625, 0.125], atol=1e-9)
    np.testing.assert_allclose(smap.raw.ravel(), [0.625, 0.125], atol=1e-9)
    np.testing.assert_allclose(smap.grid.ravel(), [1.0, 0.0], atol=1e-9)


def _random_stack(rng, layers=4, heads=3, tokens=10):
    return rng.dirichlet(np.ones(tokens), size=(layers, heads, tokens))


def test_rollout_matrices_are_row_stochastic(rng):
    for _ in range(100):
        attn = _random_stack(rng, layers=int(rng.integers(1, 5)), tokens=int(rng.integers(2, 12)))
        ratio = float(rng.uniform(0, 0.9))
        fusion = str(rng.choice(["mean", "max", "min"]))
        hats, products = rollout_products([fuse_heads(l, fusion) for l in attn], ratio)
        for m in hats + products:
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-6)
            assert (m >= 0).all()


def test_discard_spares_cls_column(rng):
    fused = rng.random((5, 5))
    out = discard_lowest(fused, 0.6)
    np.testing.assert_array_equal(out[:, 0], fused[:, 0])
    assert (out[:, 1:] == 0).sum() == int(np.floor(0.6 * 25))


def test_grad_rollout_unit_gradients_equal_plain_rollout(rng):
    attn = _random_stack(rng, tokens=17)
    plain = attention_rollout(attn, discard_ratio=0.0, fusion="mean")
    weighted = grad_attention_rollout(attn, np.ones_like(attn))
    np.testing.assert_allclose(weighted.raw, plain.raw, atol=1e-9)
    np.testing.assert_allclose(weighted.grid, plain.grid, atol=1e-9)


def test_grad_rollout_clamps_negative_heads(rng):
    heads = rng.dirichlet(np.ones(5), size=(1, 2, 5))
    neg = grad_attention_rollout(heads, np.stack([np.ones((5, 5)), -np.ones((5, 5))])[None])
    zero = grad_attention_rollout(heads, np.stack([np.ones((5, 5)), np.zeros((5, 5))])[None])
    np.testing.assert_allclose(neg.raw, zero.raw, atol=1e-12)
    a_hat = 0.5 * (0.5 * heads[0, 0] + np.eye(5))
    a_hat /= a_hat.sum(1, keepdims=True)
    np.testing.assert_allclose(neg.raw.ravel(), a_hat[0, 1:], atol=1e-12)


def test_rollout_input_checks(rng):
    with pytest.raises(AttentionStackError):
        attention_rollout(rng.random((1, 1, 3, 3)))
    with pytest.raises(AttentionStackError):
        attention_rollout(np.ones((3, 3)) / 3)
    with pytest.raises(ExplainError):
        grad_attention_rollout(_random_stack(rng), None)
    with pytest.raises(ValueError):
        attention_rollout(_random_stack(rng), discard_ratio=1.0)


def test_rollout_on_vit():
    model = build(ModelSpec(family="vit", seed=2))
    x = torch.randn(3, 224, 224, generator=torch.Generator().manual_seed(0))
    attn, grads, logits, cls = attention_context(model, x)
    assert attn.shape == grads.shape == (len(model.backbone.blocks), model.backbone.blocks[0].attn.num_heads, 785, 785)
    for method in ("rollout", "grad_rollout"):
        smap, z = explain_image(model, x, method)
        assert smap.grid.shape == (28, 28)
        assert smap.upsampled().shape == (224, 224)
        torch.testing.assert_close(z, logits)


def test_minmax_constant():
    assert not minmax(np.full((3, 3), 2.5)).any()
    np.testing.assert_allclose(minmax([1.0, 3.0]), [0.0, 1.0])


def test_overlay_alpha_extremes(rng):
    image = rng.random((8, 8, 3))
    grid = rng.random((4, 4))
    np.testing.assert_allclose(overlay(image, grid, alpha=0.0), image, atol=1e-12)
    pure = overlay(image, grid, alpha=1.0)
    np.testing.assert_allclose(pure, overlay(np.zeros_like(image), grid, alpha=1.0), atol=1e-12)
    with pytest.raises(ValueError):
        overlay(image, grid, alpha=1.5)


def test_explain_batch_gallery(tmp_path, small_fixture):
    _, manifest = small_fixture
    model = build(ModelSpec(family="cnn", seed=0))
    index = explain_batch(model, manifest, "gradcam", tmp_path, n_correct=100, n_wrong=100, split=None)
    on_disk = json.loads((tmp_path / "index.json").read_text())
    assert on_disk == index
    assert sum(index["emitted"].values()) == len(manifest.records)
    assert len(index["notes"]) == 2
    for s in index["samples"]:
        assert (tmp_path / s["overlay"]).is_file()
        probs = predict_proba(np.asarray(s["logits"]))
        assert s["confidence"] == pytest.approx(probs[s["pred"]], abs=1e-9)
        assert (s["pred"] == s["label"]) == s["overlay"].startswith("correct/")
    with pytest.raises(ExplainError):
        explain_batch(model, manifest, "rollout", tmp_path)
