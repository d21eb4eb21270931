import numpy as np
import pytest
import torch

from salunet.model import (
    AttentionBlock,
    Architecture,
    Checkpoint,
    ModelSpec,
    attention_io,
    build_model,
    count_parameters,
)
from salunet.trainer import dice_loss

MINI = dict(input_side=32, encoder_filters=(2, 2, 2, 2, 2))


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def unet_param_formula(f):
    n = 0
    cin = 1
    for c in f:
        n += conv_params(cin, c, 3) + conv_params(c, c, 3)
        cin = c
    for i in range(4):
        n += conv_params(f[i + 1], f[i], 3)                              # up-conv
        n += conv_params(2 * f[i], f[i], 3) + conv_params(f[i], f[i], 3)  # decoder
    return n + conv_params(f[0], 1, 1)


def attention_param_formula(f, att):
    return sum(
        conv_params(1, att, 1) + conv_params(k, att, 1) + conv_params(att, att, 3) + conv_params(att, 1, 1)
        for k in f[:4]
    )


class TestShapes:
    def test_shape_table_256(self):
        table = attention_io(ModelSpec(Architecture.UNET_SA, 256))
        assert [t.output_shape for t in table] == [(128, 128, 32), (64, 64, 32), (32, 32, 64), (16, 16, 64)]
        assert table[3].feature_in_shape == (32, 32, 64)
        assert [t.attention_map_shape for t in table] == [(128, 128, 1), (64, 64, 1), (32, 32, 1), (16, 16, 1)]

    def test_runtime_shapes_match_table_256(self):
        spec = ModelSpec(Architecture.UNET_SA, 256)
        model = build_model(spec).eval()
        seen = {}

        def hook(block):
            def fn(mod, inputs, output):
                feats, _ = inputs
                seen[block.level] = (tuple(feats.shape), tuple(output.shape))
            return fn

        for block in model.attention:
            block.register_forward_hook(hook(block))
        with torch.no_grad():
            out = model(torch.rand(1, 1, 256, 256), torch.rand(1, 1, 256, 256))
        assert out.shape == (1, 1, 256, 256)
        for io in attention_io(spec):
            fin, fout = seen[io.level]
            h, w, c = io.feature_in_shape
            assert fin == (1, c, h, w)
            h, w, c = io.output_shape
            assert fout == (1, c, h, w)

    def test_unet_output_shape_and_range(self):
        model = build_model(ModelSpec(Architecture.UNET, 256)).eval()
        with torch.no_grad():
            out = model(torch.rand(1, 1, 256, 256))
        assert out.shape == (1, 1, 256, 256)
        assert 0 <= out.min() and out.max() <= 1

    def test_batch_of_four(self):
        model = build_model(ModelSpec(Architecture.UNET_SA, 64)).eval()
        with torch.no_grad():
            out = model(torch.rand(4, 1, 64, 64), torch.rand(4, 1, 64, 64))
        assert out.shape == (4, 1, 64, 64)

    def test_zero_saliency_runs(self):
        model = build_model(ModelSpec(Architecture.UNET_SA, 64)).eval()
        with torch.no_grad():
            out = model(torch.rand(2, 1, 64, 64), torch.zeros(2, 1, 64, 64))
        assert out.shape == (2, 1, 64, 64)

    def test_outputs_in_unit_interval(self):
        gen = torch.Generator().manual_seed(0)
        for arch in Architecture:
            model = build_model(ModelSpec(arch, 32, (4, 4, 8, 8, 8), 16)).eval()
            with torch.no_grad():
                for _ in range(50):
                    x = torch.randn(2, 1, 32, 32, generator=gen) * 3
                    s = torch.rand(2, 1, 32, 32, generator=gen)
                    out = model(x, s)
                    assert out.min() >= 0 and out.max() <= 1

    def test_attention_in_unit_interval(self):
        block = AttentionBlock(2, 8, 16)
        _, att = block(torch.randn(3, 8, 16, 16) * 10, torch.rand(3, 1, 32, 32), return_attention=True)
        assert att.shape == (3, 1, 8, 8)
        assert att.min() >= 0 and att.max() <= 1


class TestContract:
    def test_sa_requires_saliency(self):
        model = build_model(ModelSpec(Architecture.UNET_SA, **MINI))
        with pytest.raises(ValueError, match="saliency"):
            model(torch.rand(1, 1, 32, 32))

    def test_unet_ignores_saliency(self):
        model = build_model(ModelSpec(Architecture.UNET, **MINI)).eval()
        x = torch.rand(1, 1, 32, 32)
        with torch.no_grad():
            assert torch.equal(model(x), model(x, torch.rand(1, 1, 32, 32)))

    def test_wrong_input_side(self):
        model = build_model(ModelSpec(Architecture.UNET, **MINI))
        with pytest.raises(ValueError, match="32x32"):
            model(torch.rand(1, 1, 48, 48))

    @pytest.mark.parametrize("kw", [
        {"input_side": 40}, {"input_side": 8}, {"encoder_filters": (2, 2, 2, 2)},
        {"encoder_filters": (0, 2, 2, 2, 2)}, {"variant": "segnet"},
    ])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            ModelSpec(**kw)

    def test_same_seed_same_weights(self):
        a = build_model(ModelSpec(Architecture.UNET_SA, 64, init_seed=3)).state_dict()
        b = build_model(ModelSpec(Architecture.UNET_SA, 64, init_seed=3)).state_dict()
        c = build_model(ModelSpec(Architecture.UNET_SA, 64, init_seed=4)).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert not all(torch.equal(a[k], c[k]) for k in a)

    def test_xavier_normal_scale(self):
        model = build_model(ModelSpec(Architecture.UNET, 64))
        w = model.encoders[3][2].weight.detach()  # 64 -> 64, 3x3
        fan = 64 * 9
        assert w.std().item() == pytest.approx(np.sqrt(2.0 / (fan + fan)), rel=0.05)
        assert not model.encoders[3][2].bias.any()


class TestParameterCounts:
    def test_counts_are_regression_stable(self):
        f = (32, 32, 64, 64, 128)
        unet = count_parameters(build_model(ModelSpec(Architecture.UNET, 256)))
        sa = count_parameters(build_model(ModelSpec(Architecture.UNET_SA, 256)))
        assert unet == unet_param_formula(f) == 794113
        assert sa - unet == attention_param_formula(f, 128) == 616964
        assert sa == 1411077

    def test_counts_independent_of_input_side(self):
        a = count_parameters(build_model(ModelSpec(Architecture.UNET_SA, 64)))
        b = count_parameters(build_model(ModelSpec(Architecture.UNET_SA, 256)))
        assert a == b


class TestAttentionIdentities:
    def _forced(self, bias):
        block = AttentionBlock(3, 6, 16).double()
        with torch.no_grad():
            block.to_map.weight.zero_()
            block.to_map.bias.fill_(bias)
        return block

    def test_all_ones_gives_pooled_features(self):
        block = self._forced(1e3)
        feats = torch.randn(2, 6, 16, 16, dtype=torch.float64)
        out, att = block(feats, torch.rand(2, 1, 64, 64, dtype=torch.float64), return_attention=True)
        assert torch.all(att == 1.0)
        pooled = torch.nn.functional.max_pool2d(feats, 2)
        assert torch.max(torch.abs(out - pooled)).item() <= 1e-12
        assert torch.equal(out, pooled)

    def test_all_zeros_annihilates(self):
        block = self._forced(-1e3)
        out = block(torch.randn(2, 6, 16, 16, dtype=torch.float64), torch.rand(2, 1, 64, 64, dtype=torch.float64))
        assert torch.count_nonzero(out) == 0

    def test_forced_ones_network_matches_plain_unet(self):
        """With every attention map pinned to 1 the SA network computes the plain U-Net."""
        spec_sa = ModelSpec(Architecture.UNET_SA, 32, (3, 3, 4, 4, 5), 8, init_seed=1)
        sa = build_model(spec_sa).double().eval()
        plain = build_model(ModelSpec(Architecture.UNET, 32, (3, 3, 4, 4, 5), init_seed=9)).double().eval()
        sa_state = sa.state_dict()
        plain.load_state_dict({k: sa_state[k] for k in plain.state_dict()})
        with torch.no_grad():
            for block in sa.attention:
                block.to_map.weight.zero_()
                block.to_map.bias.fill_(1e3)
            x = torch.rand(2, 1, 32, 32, dtype=torch.float64)
            assert torch.equal(sa(x, torch.rand_like(x)), plain(x))


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_dice_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    for _ in range(10):
        pred = torch.rand(2, 1, 4, 4, dtype=torch.float64, generator=gen).requires_grad_()
        truth = (torch.rand(2, 1, 4, 4, dtype=torch.float64, generator=gen) > 0.5).double()
        dice_loss(pred, truth, 1.0).backward()
        analytic = pred.grad.numpy().ravel()
        base = pred.detach().numpy().ravel()
        h = 1e-6
        numeric = np.empty_like(base)
        for i in range(base.size):
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            f_up = dice_loss(torch.from_numpy(up).view_as(pred), truth, 1.0).item()
            f_dn = dice_loss(torch.from_numpy(dn).view_as(pred), truth, 1.0).item()
            numeric[i] = (f_up - f_dn) / (2 * h)
        assert _rel_err(analytic, numeric) < 1e-5


def end_to_end_gradient_check(fraction=0.01, seed=0):
    """Relative error between autograd and central differences on a weight sample."""
    spec = ModelSpec(Architecture.UNET_SA, **MINI, init_seed=seed)
    model = build_model(spec).double()
    gen = torch.Generator().manual_seed(seed)
    # zero biases leave ReLU inputs exactly on the kink wherever upstream units
    # are dead; move to a generic point so both derivatives are defined
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    x = torch.rand(2, 1, 32, 32, dtype=torch.float64, generator=gen)
    s = torch.rand(2, 1, 32, 32, dtype=torch.float64, generator=gen)
    y = (torch.rand(2, 1, 32, 32, dtype=torch.float64, generator=gen) > 0.7).double()

    loss = dice_loss(model(x, s), y, 1.0)
    model.zero_grad()
    loss.backward()
    params = [p for p in model.parameters()]
    flat_index = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    n_sample = max(1, int(round(fraction * len(flat_index))))
    picks = rng.choice(len(flat_index), size=n_sample, replace=False)

    # many attention weights have gradients near 1e-9, so the step must keep
    # roundoff (about 1e-16 / h) well below that
    h = 1e-5
    analytic, numeric = [], []
    with torch.no_grad():
        for k in picks:
            pi, j = flat_index[k]
            p = params[pi].view(-1)
            analytic.append(params[pi].grad.view(-1)[j].item())
            orig = p[j].item()
            p[j] = orig + h
            f_up = dice_loss(model(x, s), y, 1.0).item()
            p[j] = orig - h
            f_dn = dice_loss(model(x, s), y, 1.0).item()
            p[j] = orig
            numeric.append((f_up - f_dn) / (2 * h))
    return _rel_err(np.array(analytic), np.array(numeric)), n_sample


def test_end_to_end_gradient_small_sample():
    # the full 1% sample runs in the acceptance suite
    err, n = end_to_end_gradient_check(fraction=0.001, seed=1)
    assert n > 500
    assert err < 1e-3


def test_all_parameters_receive_finite_gradients():
    model = build_model(ModelSpec(Architecture.UNET_SA, **MINI))
    x = torch.rand(4, 1, 32, 32)
    loss = dice_loss(model(x, torch.rand_like(x)), (torch.rand_like(x) > 0.5).float())
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        spec = ModelSpec(Architecture.UNET_SA, 32, (4, 4, 8, 8, 8), 16, init_seed=7)
        model = build_model(spec).eval()
        ckpt = Checkpoint.from_model(model, {"fold": 2})
        ckpt.save(tmp_path / "m.ckpt")
        loaded = Checkpoint.load(tmp_path / "m.ckpt")
        assert loaded.spec == spec and loaded.metadata == {"fold": 2}
        x, s = torch.rand(3, 1, 32, 32), torch.rand(3, 1, 32, 32)
        with torch.no_grad():
            assert torch.equal(model(x, s), loaded.build()(x, s))

    def test_rejects_unknown_format(self, tmp_path):
        torch.save({"format": 99}, tmp_path / "bad.ckpt")
        with pytest.raises(ValueError, match="format"):
            Checkpoint.load(tmp_path / "bad.ckpt")
