import numpy as np
import pytest
import torch

from pcqa.feedback import (
    DRCONV_IN,
    DRCONV_OUT,
    FeedbackConfig,
    FeedbackModule,
    FilterGenerator,
    MaskPredictor,
    RegionPlan,
    drconv,
    enhance_attention,
    hard_argmax,
)


def drconv_oracle(s, filters, mask):
    """Convolve with every filter group, then gather per pixel by the mask.

    Cross-correlation with zero padding, pad (k-1)//2 before and k//2 after
    (matching torch's "same" padding).
    """
    b, cin, hp, wp = s.shape
    _, n, cout, _, k, _ = filters.shape
    pb, pa = (k - 1) // 2, k // 2
    padded = np.pad(s, ((0, 0), (0, 0), (pb, pa), (pb, pa)))
    out = np.zeros((b, n, cout, hp, wp))
    for bi in range(b):
        for t in range(n):
            for o in range(cout):
                for y in range(hp):
                    for x in range(wp):
                        patch = padded[bi, :, y:y + k, x:x + k]
                        out[bi, t, o, y, x] = (patch * filters[bi, t, o]).sum()
    gathered = np.zeros((b, cout, hp, wp))
    for bi in range(b):
        for y in range(hp):
            for x in range(wp):
                gathered[bi, :, y, x] = out[bi, mask[bi, y, x], :, y, x]
    return gathered


def random_plan(rng, b, n, k, hp, wp, sep=0.0):
    filters = torch.tensor(rng.normal(size=(b, n, DRCONV_OUT, DRCONV_IN, k, k)))
    logits = torch.tensor(rng.normal(size=(b, n, hp, wp)))
    if sep:
        logits = logits * sep
    return RegionPlan(mask=hard_argmax(logits), logits=logits, filters=filters)


def test_enhance_attention_identity_and_zero_masks():
    a_s = torch.rand(2, 3, 4, 6)
    ones = torch.ones(2, 16, 24)
    torch.testing.assert_close(enhance_attention(a_s, ones), a_s)
    zeros = torch.zeros(2, 16, 24)
    torch.testing.assert_close(enhance_attention(a_s, zeros), torch.zeros_like(a_s))


def test_enhance_attention_fractional_area_average():
    a_s = torch.ones(1, 1, 1, 1)
    occ = torch.zeros(1, 4, 4)
    occ[0, :2, :] = 1.0  # half occupied
    torch.testing.assert_close(enhance_attention(a_s, occ), torch.full((1, 1, 1, 1), 0.5))


def test_enhance_attention_full_scale_shape():
    a_s = torch.rand(1, 12, 28, 42)
    out = enhance_attention(a_s, torch.ones(1, 448, 672))
    assert out.shape == (1, 12, 28, 42)


def test_enhance_attention_shape_mismatch():
    with pytest.raises(ValueError, match="evenly"):
        enhance_attention(torch.rand(1, 2, 5, 7), torch.rand(1, 16, 24))


def test_hard_argmax_tie_break_lowest_index():
    logits = torch.zeros(1, 4, 2, 2)
    assert (hard_argmax(logits) == 0).all()
    logits[0, 2] = 1.0
    logits[0, 3] = 1.0
    assert (hard_argmax(logits) == 2).all()


def test_mask_predictor_shapes_and_tie_break():
    cfg = FeedbackConfig(heads=3, regions=5)
    mp = MaskPredictor(cfg)
    mask, logits = mp(torch.ones(1, 3, 4, 6), (16, 24))
    assert logits.shape == (1, 5, 16, 24)
    assert mask.shape == (1, 16, 24)
    # all-equal logits resolve to the lowest region index everywhere
    with torch.no_grad():
        mp.conv.weight.zero_()
        mp.conv.bias.fill_(0.7)
    mask, _ = mp(torch.randn(2, 3, 4, 6), (16, 24))
    assert (mask == 0).all()


def test_mask_predictor_dominant_channel():
    cfg = FeedbackConfig(heads=2, regions=4)
    mp = MaskPredictor(cfg)
    with torch.no_grad():
        mp.conv.weight.zero_()
        mp.conv.bias.zero_()
        mp.conv.bias[3] = 5.0
    mask, _ = mp(torch.rand(2, 2, 4, 6), (8, 12))
    assert (mask == 3).all()


def test_mask_values_within_region_count():
    cfg = FeedbackConfig(heads=2, regions=8)
    mp = MaskPredictor(cfg)
    mask, _ = mp(torch.randn(1, 2, 4, 6), (16, 24))
    assert mask.min() >= 0 and mask.max() <= 7


def test_filter_generator_shapes():
    cfg = FeedbackConfig(heads=12, regions=8, kernel_size=3)
    fg = FilterGenerator(cfg)
    enhanced = torch.rand(2, 12, 28, 42)
    pooled = torch.nn.functional.adaptive_avg_pool2d(enhanced, (3, 3))
    assert pooled.shape == (2, 12, 3, 3)
    hidden = fg.conv1(pooled)
    assert hidden.shape == (2, 64, 3, 3)        # n^2 channels
    raw = fg.conv2(hidden)
    assert raw.shape == (2, 512, 3, 3)          # 64n channels
    filters = fg(enhanced)
    assert filters.shape == (2, 8, 16, 4, 3, 3)


def test_filter_generator_constant_input_constant_pool():
    cfg = FeedbackConfig(heads=2, regions=2, kernel_size=3)
    fg = FilterGenerator(cfg)
    enhanced = torch.ones(1, 2, 8, 12) * torch.tensor([0.3, 0.7]).view(1, 2, 1, 1)
    pooled = torch.nn.functional.adaptive_avg_pool2d(enhanced, (3, 3))
    torch.testing.assert_close(pooled[0, 0], torch.full((3, 3), 0.3))
    torch.testing.assert_close(pooled[0, 1], torch.full((3, 3), 0.7))


def test_drconv_single_region_is_plain_convolution():
    rng = np.random.default_rng(0)
    s = torch.tensor(rng.normal(size=(1, 4, 6, 6)))
    plan = random_plan(rng, 1, 1, 3, 6, 6)
    out = drconv(s, plan)
    ref = torch.nn.functional.conv2d(s, plan.filters[0, 0], padding="same")
    torch.testing.assert_close(out, ref)


def test_drconv_constant_mask_selects_one_group():
    rng = np.random.default_rng(1)
    s = torch.tensor(rng.normal(size=(1, 4, 5, 5)))
    plan = random_plan(rng, 1, 3, 3, 5, 5)
    plan.mask.fill_(2)
    out = drconv(s, plan)
    ref = torch.nn.functional.conv2d(s, plan.filters[0, 2], padding="same")
    torch.testing.assert_close(out, ref)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_drconv_matches_gather_oracle(k):
    rng = np.random.default_rng(k)
    b, n, hp, wp = 2, 3, 6, 6
    s = torch.tensor(rng.normal(size=(b, 4, hp, wp)))
    plan = random_plan(rng, b, n, k, hp, wp)
    out = drconv(s, plan).numpy()
    expected = drconv_oracle(s.numpy(), plan.filters.numpy(), plan.mask.numpy())
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_drconv_mask_out_of_range_errors():
    rng = np.random.default_rng(2)
    s = torch.tensor(rng.normal(size=(1, 4, 4, 4)))
    plan = random_plan(rng, 1, 2, 3, 4, 4)
    plan.mask.fill_(5)
    with pytest.raises(ValueError, match="region count"):
        drconv(s, plan)


def test_drconv_locality():
    """Perturbing a pixel outside the k x k neighborhood leaves output unchanged."""
    rng = np.random.default_rng(3)
    s = torch.tensor(rng.normal(size=(1, 4, 8, 8)))
    plan = random_plan(rng, 1, 2, 3, 8, 8)
    out = drconv(s, plan)
    s2 = s.clone()
    s2[0, :, 7, 7] += 10.0
    out2 = drconv(s2, plan)
    torch.testing.assert_close(out[0, :, :5, :5], out2[0, :, :5, :5])
    assert not torch.allclose(out[0, :, 7, 7], out2[0, :, 7, 7])


def test_drconv_forward_independent_of_temperature():
    """Forward is always the hard gather, whatever the backward temperature."""
    rng = np.random.default_rng(4)
    s = torch.tensor(rng.normal(size=(1, 4, 5, 5)))
    plan = random_plan(rng, 1, 3, 3, 5, 5)
    a = drconv(s, plan, temperature=1.0)
    b = drconv(s, plan, temperature=1e-4)
    torch.testing.assert_close(a, b)


def test_drconv_backward_flows_to_logits_and_all_filters():
    rng = np.random.default_rng(5)
    s = torch.tensor(rng.normal(size=(1, 4, 4, 4)))
    filters = torch.tensor(rng.normal(size=(1, 2, DRCONV_OUT, DRCONV_IN, 3, 3)),
                           requires_grad=True)
    logits = torch.tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    plan = RegionPlan(mask=hard_argmax(logits.detach()), logits=logits, filters=filters)
    drconv(s, plan).sum().backward()
    assert logits.grad is not None and logits.grad.abs().sum() > 0
    # both groups receive gradient through the softmax weights
    assert filters.grad[0, 0].abs().sum() > 0
    assert filters.grad[0, 1].abs().sum() > 0


def test_filter_generation_drconv_gradient_check():
    """Autograd vs central differences through filter generation into drconv.

    k=1, n=2, 4x4 grid; logits are well separated and the backward
    temperature is small, so the soft path coincides with the hard forward.
    """
    torch.manual_seed(0)
    cfg = FeedbackConfig(heads=2, regions=2, kernel_size=1, st_temperature=1e-3)
    module = FeedbackModule(cfg).double()
    rng = np.random.default_rng(0)
    s = torch.tensor(rng.normal(size=(1, 4, 4, 4)))
    theta = torch.tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    weights = torch.tensor(rng.normal(size=(1, 16, 4, 4)))

    def loss_of(t):
        mask, logits = module.mask_predictor(t, (4, 4))
        filters = module.filter_generator(t)
        plan = RegionPlan(mask=mask, logits=logits, filters=filters)
        return (drconv(s, plan, cfg.st_temperature) * weights).sum()

    loss = loss_of(theta)
    loss.backward()
    h = 1e-6
    checked = 0
    for c in range(2):
        for i in range(4):
            for j in range(4):
                tp = theta.detach().clone()
                tm = theta.detach().clone()
                tp[0, c, i, j] += h
                tm[0, c, i, j] -= h
                fd = (loss_of(tp) - loss_of(tm)).item() / (2 * h)
                ad = theta.grad[0, c, i, j].item()
                assert abs(fd - ad) <= 1e-3 * max(abs(fd), abs(ad), 1e-6)
                checked += 1
    assert checked == 32


def test_feedback_module_end_to_end_shapes():
    cfg = FeedbackConfig(heads=2, regions=4, kernel_size=3)
    module = FeedbackModule(cfg)
    s = torch.randn(2, 4, 32, 48)
    a_s = torch.randn(2, 2, 8, 12)
    s_o = torch.ones(2, 32, 48)
    out, plan = module(s, a_s, s_o)
    assert out.shape == (2, 16, 32, 48)
    assert plan.mask.shape == (2, 32, 48)
    assert plan.filters.shape == (2, 4, 16, 4, 3, 3)
