import numpy as np
import pytest
import torch

from dualmodseg import forward_dual, inject_fused, mae_enhance, mae_weights, mmf_fuse, param_count
from dualmodseg.network import (
    BranchNet,
    ConvBlock,
    DualBranchNet,
    FusionLayer,
    ModalityAttention,
    ShapeError,
)


def small_model(**kw):
    args = dict(num_classes=2, base_channels=4, num_stages=2, dropout_rate=0.5)
    args.update(kw)
    torch.manual_seed(0)
    return DualBranchNet(**args)


class TestMmfFuse:
    def test_shape_contract(self):
        layer = FusionLayer(16)
        f_a, f_b = torch.randn(16, 8, 8, 8), torch.randn(16, 8, 8, 8)
        out = mmf_fuse(f_a, f_b, layer)
        assert out.shape == (16, 8, 8, 8)
        assert (out > 0).all() and (out < 1).all()

    def test_zero_params_give_half(self):
        layer = FusionLayer(4)
        with torch.no_grad():
            for p in layer.parameters():
                p.zero_()
        out = mmf_fuse(torch.randn(4, 4, 4, 4), torch.randn(4, 4, 4, 4), layer)
        assert torch.allclose(out, torch.full_like(out, 0.5))

    def test_swapped_inputs_with_swapped_kernel_halves(self):
        torch.manual_seed(1)
        layer = FusionLayer(4)
        swapped = FusionLayer(4)
        with torch.no_grad():
            w = layer.conv1.weight
            swapped.conv1.weight.copy_(torch.cat([w[:, 4:], w[:, :4]], dim=1))
            swapped.conv1.bias.copy_(layer.conv1.bias)
            swapped.conv2.weight.copy_(layer.conv2.weight)
            swapped.conv2.bias.copy_(layer.conv2.bias)
        f_a, f_b = torch.randn(4, 6, 6, 6), torch.randn(4, 6, 6, 6)
        out = mmf_fuse(f_a, f_b, layer)
        out_swapped = mmf_fuse(f_b, f_a, swapped)
        assert torch.allclose(out, out_swapped, atol=1e-6)

    def test_shape_mismatch(self):
        layer = FusionLayer(4)
        with pytest.raises(ShapeError):
            mmf_fuse(torch.randn(4, 4, 4, 4), torch.randn(4, 4, 4, 2), layer)


class TestInjectFused:
    def test_additive_identities(self):
        f = torch.randn(4, 4, 4, 4)
        zero = torch.zeros_like(f)
        assert torch.equal(inject_fused(f, zero), f)
        assert torch.equal(inject_fused(zero, f), f)

    def test_linearity(self):
        f, g = torch.randn(3, 2, 2, 2), torch.randn(3, 2, 2, 2)
        f2, g2 = torch.randn(3, 2, 2, 2), torch.randn(3, 2, 2, 2)
        lhs = inject_fused(f, g) + inject_fused(f2, g2)
        rhs = inject_fused(f + f2, g + g2)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            inject_fused(torch.randn(2, 2, 2, 2), torch.randn(2, 2, 2, 4))


class TestMaeWeights:
    def test_mirrored_parameters_give_half(self):
        torch.manual_seed(2)
        mae = ModalityAttention(4)
        mae.branch_b.load_state_dict(mae.branch_a.state_dict())
        f = torch.randn(4, 4, 4, 4)
        w_a, w_b = mae_weights(f, f.clone(), mae)
        assert torch.allclose(w_a, torch.full_like(w_a, 0.5), atol=1e-6)
        assert torch.allclose(w_b, torch.full_like(w_b, 0.5), atol=1e-6)

    def test_sum_to_one_random_inputs(self):
        torch.manual_seed(3)
        mae = ModalityAttention(4)
        for _ in range(100):
            f_a, f_b = torch.randn(4, 4, 4, 4), torch.randn(4, 4, 4, 4)
            w_a, w_b = mae_weights(f_a, f_b, mae)
            assert torch.allclose(w_a + w_b, torch.ones_like(w_a), atol=1e-6)
            assert (w_a > 0).all() and (w_a < 1).all()
            assert (w_b > 0).all() and (w_b < 1).all()

    def test_logit_shift_invariance(self):
        torch.manual_seed(4)
        mae = ModalityAttention(4)
        f_a, f_b = torch.randn(4, 4, 4, 4), torch.randn(4, 4, 4, 4)
        before = mae_weights(f_a, f_b, mae)
        with torch.no_grad():
            mae.branch_a["fc"].bias += 3.7  # same constant on both modality logits
            mae.branch_b["fc"].bias += 3.7
        after = mae_weights(f_a, f_b, mae)
        assert torch.allclose(before[0], after[0], atol=1e-5)
        assert torch.allclose(before[1], after[1], atol=1e-5)

    def test_shape_mismatch(self):
        mae = ModalityAttention(4)
        with pytest.raises(ShapeError):
            mae_weights(torch.randn(4, 4, 4, 4), torch.randn(4, 2, 2, 2), mae)
        with pytest.raises(ShapeError):
            mae_weights(torch.randn(8, 4, 4, 4), torch.randn(8, 4, 4, 4), mae)


class TestMaeEnhance:
    def test_neutral_weights(self):
        f = torch.randn(4, 3, 3, 3)
        out = mae_enhance(f, torch.full((4,), 0.5))
        assert torch.allclose(out, f, atol=1e-7)

    def test_per_channel_scaling(self):
        f = torch.randn(3, 2, 2, 2)
        w = torch.tensor([1.0, 0.5, 0.5])
        out = mae_enhance(f, w)
        assert torch.allclose(out[0], 2.0 * f[0])
        assert torch.allclose(out[1], f[1])
        assert torch.allclose(out[2], f[2])

    def test_zero_input(self):
        out = mae_enhance(torch.zeros(4, 2, 2, 2), torch.rand(4))
        assert torch.equal(out, torch.zeros(4, 2, 2, 2))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            mae_enhance(torch.randn(4, 2, 2, 2), torch.rand(3))


class TestForwardDual:
    def test_simplex_contract(self):
        model = small_model()
        x = torch.randn(1, 16, 16, 16)
        prob_a, prob_b = forward_dual(model, x, torch.randn(1, 16, 16, 16))
        for prob in (prob_a, prob_b):
            assert prob.shape == (2, 16, 16, 16)
            assert torch.allclose(prob.sum(dim=0), torch.ones(16, 16, 16), atol=1e-6)
            assert (prob >= 0).all()

    def test_flags_off_equals_independent_branches(self):
        model = small_model(mmf_enabled=False, mae_enabled=False)
        solo_a = BranchNet(num_classes=2, base_channels=4, num_stages=2)
        solo_b = BranchNet(num_classes=2, base_channels=4, num_stages=2)
        solo_a.load_state_dict(model.branch_a.state_dict())
        solo_b.load_state_dict(model.branch_b.state_dict())
        x_a, x_b = torch.randn(1, 1, 8, 8, 8), torch.randn(1, 1, 8, 8, 8)
        model.eval(), solo_a.eval(), solo_b.eval()
        with torch.no_grad():
            dual_a, dual_b = model(x_a, x_b)
            ind_a, ind_b = solo_a(x_a), solo_b(x_b)
        assert (dual_a - ind_a).abs().max() <= 1e-6
        assert (dual_b - ind_b).abs().max() <= 1e-6

    def test_eval_mode_deterministic(self):
        model = small_model()
        x_a, x_b = torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8)
        p1 = forward_dual(model, x_a, x_b, train_mode=False)
        p2 = forward_dual(model, x_a, x_b, train_mode=False)
        assert torch.equal(p1[0], p2[0]) and torch.equal(p1[1], p2[1])

    def test_train_mode_dropout_is_seeded(self):
        model = small_model()
        x_a, x_b = torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8)
        torch.manual_seed(42)
        p1 = forward_dual(model, x_a, x_b, train_mode=True)
        torch.manual_seed(42)
        p2 = forward_dual(model, x_a, x_b, train_mode=True)
        assert torch.equal(p1[0], p2[0])

    def test_indivisible_extent_errors(self):
        model = small_model(num_stages=3)  # needs divisibility by 4
        with pytest.raises(ShapeError):
            forward_dual(model, torch.randn(1, 6, 8, 8), torch.randn(1, 6, 8, 8))

    def test_modality_shape_mismatch_errors(self):
        model = small_model()
        with pytest.raises(ShapeError):
            forward_dual(model, torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 4))

    def test_default_channel_progression(self):
        model = DualBranchNet()
        assert model.branch_a.widths == [16, 32, 64, 128]


def conv3_params(c_in, c_out, k=3):
    return c_out * c_in * k ** 3 + c_out


def block_params(c_in, c_out):
    # two convs plus two affine instance norms
    return conv3_params(c_in, c_out) + conv3_params(c_out, c_out) + 4 * c_out


def analytic_count(base, stages, classes=2, mmf=True, mae=True):
    widths = [base * 2 ** s for s in range(stages)]
    enc = block_params(1, widths[0]) + sum(
        block_params(widths[s - 1], widths[s]) for s in range(1, stages)
    )
    dec = sum(block_params(widths[s + 1] + widths[s], widths[s]) for s in range(stages - 1))
    head = classes * widths[0] + classes
    total = 2 * (enc + dec + head)
    if mmf:
        total += sum(conv3_params(2 * w, w) + conv3_params(w, w) for w in widths)
    if mae:
        c = widths[-1]
        per_branch = conv3_params(c, c, 3) + conv3_params(c, c, 5) + (c * c + c)
        total += 2 * per_branch
    return total


class TestParamCount:
    def test_single_conv_28(self):
        assert param_count(torch.nn.Conv3d(1, 1, 3)) == 28

    def test_matches_analytic_count(self):
        for base in (4, 8):
            model = small_model(base_channels=base)
            assert param_count(model) == analytic_count(base, 2)

    def test_mmf_toggle_difference_is_fusion_total(self):
        on = small_model(mmf_enabled=True)
        off = small_model(mmf_enabled=False)
        fusion_total = sum(conv3_params(2 * w, w) + conv3_params(w, w) for w in (4, 8))
        assert param_count(on) - param_count(off) == fusion_total

    def test_each_flag_strictly_decreases(self):
        full = small_model()
        assert param_count(small_model(mmf_enabled=False)) < param_count(full)
        assert param_count(small_model(mae_enabled=False)) < param_count(full)

    def test_doubling_width_roughly_quadruples(self):
        ratio = param_count(small_model(base_channels=8)) / param_count(small_model(base_channels=4))
        assert 3.0 < ratio < 4.2


class TestConvBlock:
    def test_strided_halves_spatial(self):
        block = ConvBlock(2, 4, stride=2)
        out = block(torch.randn(1, 2, 8, 8, 8))
        assert out.shape == (1, 4, 4, 4, 4)
