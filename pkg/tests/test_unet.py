import math

import pytest
import torch

from sar2opt.diffusion import ShapeError, make_linear_schedule
from sar2opt.losses import BlurSpec, training_loss
from sar2opt.training import TrainState, adamw_step
from sar2opt.unet import ConditionalUNet, ConditionEmbedder, ModelConfig, time_embedding

from conftest import seeded

TINY = ModelConfig(base_channels=8, channel_mults=(1, 2), blocks_per_level=1, time_dim=16)


class TestTimeEmbedding:
    def test_range(self):
        for t in (1, 17, 999, 100000):
            e = time_embedding(t, 32)
            assert float(e.abs().max()) <= 1.0

    def test_t_zero(self):
        e = time_embedding(0, 8)
        assert torch.equal(e[:4], torch.zeros(4))
        assert torch.equal(e[4:], torch.ones(4))

    def test_dim4_t1_oracle(self):
        e = time_embedding(1, 4)
        want = [math.sin(1), math.sin(1e-2), math.cos(1), math.cos(1e-2)]
        assert e.tolist() == pytest.approx(want, abs=1e-6)
        assert e.tolist() == pytest.approx([0.84147, 0.01000, 0.54030, 0.99995], abs=1e-5)

    def test_batched(self):
        t = torch.tensor([1, 5, 9])
        e = time_embedding(t, 16)
        assert e.shape == (3, 16)
        for i, ti in enumerate(t.tolist()):
            assert torch.allclose(e[i], time_embedding(ti, 16), atol=1e-7)

    @pytest.mark.parametrize("dim", [3, 7, 1, 0])
    def test_odd_dim_rejected(self, dim):
        with pytest.raises(ValueError):
            time_embedding(1, dim)


class TestConditionEmbedder:
    def test_lifts_to_three_channels(self):
        emb = ConditionEmbedder(sar_channels=1)
        out = emb(torch.randn(1, 64, 64, generator=seeded(0)))
        assert out.shape == (3, 64, 64)
        out_b = emb(torch.randn(2, 1, 64, 64, generator=seeded(0)))
        assert out_b.shape == (2, 3, 64, 64)

    def test_constant_input_gives_w_sum_plus_bias(self):
        emb = ConditionEmbedder(sar_channels=2)
        c = 0.37
        out = emb(torch.full((2, 5, 5), c))
        w = emb.conv.weight.detach().sum(dim=(1, 2, 3))
        b = emb.conv.bias.detach()
        want = c * w + b
        for ch in range(3):
            assert torch.allclose(out[ch], torch.full((5, 5), float(want[ch])), atol=1e-6)

    def test_permutation_equivariance(self):
        emb = ConditionEmbedder(sar_channels=1)
        x = torch.randn(1, 6, 6, generator=seeded(1))
        perm = torch.randperm(36, generator=seeded(2))
        out_perm = emb(x.reshape(1, -1)[:, perm].reshape(1, 6, 6))
        perm_out = emb(x).reshape(3, -1)[:, perm].reshape(3, 6, 6)
        assert torch.allclose(out_perm, perm_out, atol=1e-6)

    def test_channel_mismatch(self):
        emb = ConditionEmbedder(sar_channels=1)
        with pytest.raises(ShapeError):
            emb(torch.randn(2, 8, 8))


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.base_channels == 32
        assert cfg.channel_mults == (1, 2, 2)
        assert cfg.blocks_per_level == 1
        assert cfg.time_dim == 128
        assert cfg.spatial_divisor == 4

    def test_dict_round_trip(self):
        cfg = ModelConfig(base_channels=16, channel_mults=(1, 2, 4), attention=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "kwargs",
        [dict(base_channels=0), dict(channel_mults=()), dict(blocks_per_level=0),
         dict(time_dim=7), dict(sar_channels=0)],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_parameter_count_pure_function_of_config(self):
        torch.manual_seed(0)
        a = ConditionalUNet(TINY)
        torch.manual_seed(99)
        b = ConditionalUNet(TINY)
        assert a.parameter_count() == b.parameter_count()
        assert a.parameter_count() == sum(p.numel() for p in a.parameters())


class TestForward:
    def test_shape_contract_32x32(self):
        torch.manual_seed(0)
        m = ConditionalUNet(ModelConfig(base_channels=8, channel_mults=(1, 2, 2), time_dim=16))
        xt = torch.randn(2, 3, 32, 32, generator=seeded(3))
        fm = torch.randn(2, 3, 32, 32, generator=seeded(4))
        out = m(xt, 5, fm)
        assert out.shape == xt.shape
        assert bool(torch.isfinite(out).all())

    def test_unbatched_matches_batch_of_one(self):
        torch.manual_seed(0)
        m = ConditionalUNet(TINY)
        xt = torch.randn(3, 16, 16, generator=seeded(5))
        fm = torch.randn(3, 16, 16, generator=seeded(6))
        single = m(xt, 3, fm)
        batched = m(xt.unsqueeze(0), 3, fm.unsqueeze(0))[0]
        assert single.shape == (3, 16, 16)
        assert torch.equal(single, batched)

    def test_purity(self):
        torch.manual_seed(0)
        m = ConditionalUNet(TINY)
        xt = torch.randn(1, 3, 16, 16, generator=seeded(7))
        fm = torch.randn(1, 3, 16, 16, generator=seeded(8))
        assert torch.equal(m(xt, 9, fm), m(xt, 9, fm))

    def test_indivisible_size_names_divisor(self):
        torch.manual_seed(0)
        m = ConditionalUNet(ModelConfig(base_channels=8, channel_mults=(1, 2, 2), time_dim=16))
        with pytest.raises(ShapeError, match="divisible by 4"):
            m(torch.zeros(1, 3, 18, 18), 1, torch.zeros(1, 3, 18, 18))

    def test_condition_shape_must_match(self):
        torch.manual_seed(0)
        m = ConditionalUNet(TINY)
        with pytest.raises(ShapeError):
            m(torch.zeros(1, 3, 16, 16), 1, torch.zeros(1, 3, 16, 8))

    def test_residual_blocks_start_as_identity(self):
        torch.manual_seed(1)
        m = ConditionalUNet(TINY)
        for name, p in m.named_parameters():
            if ".conv2." in name:
                assert float(p.detach().abs().max()) == 0.0, name
        block = m.down_blocks[0][0]
        x = torch.randn(1, 8, 16, 16, generator=seeded(9))
        temb = torch.randn(1, 16, generator=seeded(10))
        assert torch.equal(block(x, temb), x)

    def test_predict_noise_wires_condition_embedding(self):
        torch.manual_seed(0)
        m = ConditionalUNet(TINY)
        xt = torch.randn(2, 3, 16, 16, generator=seeded(11))
        sar = torch.randn(2, 1, 16, 16, generator=seeded(12))
        direct = m(xt, torch.tensor([1, 2]), m.embed_condition(sar))
        assert torch.equal(m.predict_noise(xt, torch.tensor([1, 2]), sar), direct)

    def test_attention_variant_runs(self):
        torch.manual_seed(0)
        m = ConditionalUNet(ModelConfig(base_channels=8, channel_mults=(1, 2), time_dim=16,
                                        attention=True))
        out = m(torch.randn(1, 3, 16, 16), 4, torch.randn(1, 3, 16, 16))
        assert out.shape == (1, 3, 16, 16)

    def test_state_dict_round_trip_is_bitwise(self):
        torch.manual_seed(0)
        m1 = ConditionalUNet(TINY)
        torch.manual_seed(5)
        m2 = ConditionalUNet(TINY)
        m2.load_state_dict(m1.state_dict())
        xt = torch.randn(1, 3, 16, 16, generator=seeded(13))
        fm = torch.randn(1, 3, 16, 16, generator=seeded(14))
        assert torch.equal(m1(xt, 6, fm), m2(xt, 6, fm))


class TestGradientFlow:
    def test_every_parameter_gets_gradient_after_one_step(self):
        torch.manual_seed(2)
        m = ConditionalUNet(TINY)
        sc = make_linear_schedule(50)
        gen = seeded(15)
        spec = BlurSpec(kernel_size=5, sigma=1.5)

        def step():
            x0 = torch.randn(2, 3, 16, 16, generator=gen)
            sar = torch.randn(2, 1, 16, 16, generator=gen)
            t = torch.randint(1, 51, (2,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            bd = training_loss(m, x0, sar, t, eps, sc, spec, 1.0)
            m.zero_grad(set_to_none=True)
            bd.total.backward()

        # The zero-initialized convs block upstream gradients at exact init,
        # so take one optimizer step first, then check the gradient counts.
        step()
        params = dict(m.named_parameters())
        state = TrainState(
            step=0,
            params={k: p.data for k, p in params.items()},
            m1={k: torch.zeros_like(p) for k, p in params.items()},
            m2={k: torch.zeros_like(p) for k, p in params.items()},
        )
        adamw_step(state, {k: p.grad for k, p in params.items()}, lr=1e-3)
        step()
        for name, p in m.named_parameters():
            assert p.grad is not None, f"{name} got no gradient"
            assert int((p.grad != 0).sum()) > 0, f"{name} gradient is identically zero"
