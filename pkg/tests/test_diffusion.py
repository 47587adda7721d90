import numpy as np
import pytest
import torch

from fdcheck import max_rel_error
from lidarwm.diffusion import (
    AdaGroupNorm,
    ConditionEncoder,
    NoiseSchedule,
    WorldModel,
    WorldModelConfig,
    WorldModelTrainConfig,
    add_noise,
    ddim_sample,
    diffusion_loss,
    planner_loss,
    predict_noise,
    sinusoidal_embedding,
    train_world_model,
)

torch.manual_seed(0)


def tiny_config(**kw):
    args = dict(
        latent_channels=4, feature_channels=8, cond_dim=8, tau_p=2, tau_f=2,
        n_blocks=1, window=3, d_state=2, agn_groups=4, planner_hidden=8,
    )
    args.update(kw)
    return WorldModelConfig(**args)


def tiny_model(seed=0, **kw):
    torch.manual_seed(seed)
    return WorldModel(tiny_config(**kw))


def tiny_inputs(model, B=2, h=4, w=4, seed=1):
    torch.manual_seed(seed)
    cfg = model.cfg
    z_p = torch.randn(B, cfg.tau_p, h, w, cfg.latent_channels)
    z_f = torch.randn(B, cfg.tau_f, h, w, cfg.latent_channels)
    a_p = torch.randn(B, cfg.tau_p, 3) * 0.1
    a_f = torch.randn(B, cfg.tau_f, 3) * 0.1
    return z_p, z_f, a_p, a_f


class TestNoiseSchedule:
    def test_cosine_properties(self):
        sched = NoiseSchedule(1000, "cosine")
        ab = sched.alpha_bar.numpy()
        assert ab[0] == pytest.approx(1.0, abs=1e-6)
        assert ab[-1] < 1e-3
        assert np.all(np.diff(ab) < 0)
        assert np.all(ab > 0) and np.all(ab <= 1)

    def test_snr_monotone_decreasing(self):
        sched = NoiseSchedule(100)
        ab = sched.alpha_bar.numpy()[1:]
        snr = ab / (1 - ab)
        assert np.all(np.diff(snr) < 0)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            NoiseSchedule(0)
        with pytest.raises(ValueError):
            NoiseSchedule(10, "exotic")


class TestAddNoise:
    def test_alpha_one_returns_signal(self):
        sched = NoiseSchedule(10)
        sched.alpha_bar[5] = 1.0
        z = torch.randn(2, 1, 2, 2, 3)
        out = add_noise(z, 5, torch.randn_like(z), sched)
        torch.testing.assert_close(out, z)

    def test_alpha_zero_returns_noise(self):
        sched = NoiseSchedule(10)
        sched.alpha_bar[5] = 0.0
        z = torch.randn(2, 1, 2, 2, 3)
        eps = torch.randn_like(z)
        torch.testing.assert_close(add_noise(z, 5, eps, sched), eps)

    def test_variance_monte_carlo(self):
        sched = NoiseSchedule(10)
        sched.alpha_bar[5] = 0.5
        gen = torch.Generator().manual_seed(3)
        n = 10_000
        z = torch.randn(n, 1, 1, 2, 2, generator=gen) * np.sqrt(2.0)
        eps = torch.randn(n, 1, 1, 2, 2, generator=gen)
        out = add_noise(z, torch.full((n,), 5), eps, sched)
        expected = 0.5 * 2.0 + 0.5
        assert out.var().item() == pytest.approx(expected, rel=0.05)

    def test_step_out_of_range(self):
        sched = NoiseSchedule(10)
        z = torch.randn(1, 1, 2, 2, 2)
        with pytest.raises(ValueError):
            add_noise(z, 0, torch.randn_like(z), sched)
        with pytest.raises(ValueError):
            add_noise(z, 11, torch.randn_like(z), sched)


class TestConditionEncoder:
    def test_deterministic(self):
        torch.manual_seed(2)
        enc = ConditionEncoder(16, tau_p=2, tau_f=3)
        a_p, a_f = torch.randn(2, 2, 3), torch.randn(2, 3, 3)
        t = torch.tensor([5, 9])
        assert torch.equal(enc(a_p, a_f, t), enc(a_p, a_f, t))

    def test_layout_changes_condition(self):
        torch.manual_seed(3)
        enc = ConditionEncoder(16, tau_p=2, tau_f=2)
        a_p, a_f = torch.randn(1, 2, 3), torch.randn(1, 2, 3)
        t = torch.tensor([4])
        layout = torch.randint(0, 3, (1, 16, 16))
        c_without = enc(a_p, a_f, t)
        c_with = enc(a_p, a_f, t, layout)
        assert (c_with - c_without).norm() > 0

    def test_zero_ego_zero_bias_contributes_nothing(self):
        torch.manual_seed(4)
        enc = ConditionEncoder(16, tau_p=2, tau_f=2)
        with torch.no_grad():
            enc.past_ego.bias.zero_()
            enc.future_ego.bias.zero_()
        t = torch.tensor([0])
        c = enc(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), t)
        step_only = enc.step_mlp(sinusoidal_embedding(t, 16))
        torch.testing.assert_close(c, step_only)


class TestAgnModulate:
    def test_zero_heads_give_plain_group_norm(self):
        torch.manual_seed(5)
        agn = AdaGroupNorm(8, cond_dim=4, groups=4)
        with torch.no_grad():
            agn.gamma.weight.zero_(); agn.gamma.bias.zero_()
            agn.beta.weight.zero_(); agn.beta.bias.zero_()
        f = torch.randn(2, 3, 2, 2, 8)
        c = torch.randn(2, 4)
        out = agn(f, c)
        expected = torch.nn.functional.group_norm(
            f.permute(0, 4, 1, 2, 3), 4, eps=1e-6
        ).permute(0, 2, 3, 4, 1)
        torch.testing.assert_close(out, expected)

    def test_group_statistics(self):
        torch.manual_seed(6)
        agn = AdaGroupNorm(8, cond_dim=4, groups=2)
        with torch.no_grad():
            agn.gamma.weight.zero_(); agn.beta.weight.zero_()
        f = torch.randn(1, 4, 4, 4, 8) * 3 + 1
        out = agn(f, torch.randn(1, 4))
        grouped = out.permute(0, 4, 1, 2, 3).reshape(1, 2, -1)
        assert grouped.mean(-1).abs().max() < 1e-5
        assert (grouped.var(-1, unbiased=False) - 1).abs().max() < 1e-4

    def test_indivisible_groups_rejected(self):
        with pytest.raises(ValueError):
            AdaGroupNorm(6, cond_dim=4, groups=4)

    def test_gradients_through_heads(self):
        torch.manual_seed(7)
        agn = AdaGroupNorm(4, cond_dim=3, groups=2).double()
        f = torch.randn(1, 2, 2, 2, 4, dtype=torch.float64)
        c = torch.randn(1, 3, dtype=torch.float64)
        params = list(agn.parameters())

        def loss_fn():
            return agn(f, c).square().mean()

        assert max_rel_error(loss_fn, params) < 1e-4


class TestPredictNoise:
    def test_output_shape(self):
        model = tiny_model()
        z_p, z_f, a_p, a_f = tiny_inputs(model)
        t = torch.tensor([3, 7])
        cond = model.cond_encoder(a_p, a_f, t)
        eps_hat, pooled = predict_noise(model, z_f, z_p, t, cond)
        assert eps_hat.shape == z_f.shape
        assert pooled.shape == (2, model.cfg.feature_channels)

    def test_deterministic(self):
        model = tiny_model()
        z_p, z_f, a_p, a_f = tiny_inputs(model)
        t = torch.tensor([3, 7])
        cond = model.cond_encoder(a_p, a_f, t)
        out1, _ = model(z_f, z_p, t, cond)
        out2, _ = model(z_f, z_p, t, cond)
        assert torch.equal(out1, out2)

    def test_history_not_mutated(self):
        model = tiny_model()
        z_p, z_f, a_p, a_f = tiny_inputs(model)
        z_p_copy = z_p.clone()
        t = torch.tensor([3, 7])
        model(z_f, z_p, t, model.cond_encoder(a_p, a_f, t))
        assert torch.equal(z_p, z_p_copy)

    def test_condition_changes_output(self):
        model = tiny_model()
        z_p, z_f, a_p, a_f = tiny_inputs(model)
        t = torch.tensor([3, 7])
        out1, _ = model(z_f, z_p, t, model.cond_encoder(a_p, a_f, t))
        out2, _ = model(z_f, z_p, t, model.cond_encoder(a_p, a_f + 1.0, t))
        assert (out1 - out2).norm() > 0

    def test_shape_mismatch_rejected(self):
        model = tiny_model()
        z_p, z_f, a_p, a_f = tiny_inputs(model)
        with pytest.raises(ValueError):
            model(z_f[:, :, :2], z_p, torch.tensor([1, 1]), None)

    def test_loss_equals_hand_mse(self):
        eps = torch.tensor([1.0, 3.0])
        eps_hat = torch.tensor([2.0, 5.0])
        # ((1-2)^2 + (3-5)^2) / 2 = 2.5
        assert diffusion_loss(eps, eps_hat).item() == pytest.approx(2.5)


class TestSample:
    def test_single_step_closed_form(self):
        model = tiny_model().eval()
        sched = NoiseSchedule(100)
        z_p, _, a_p, a_f = tiny_inputs(model)

        def cond_fn(t):
            return model.cond_encoder(a_p, a_f, t)

        gen = torch.Generator().manual_seed(11)
        with torch.no_grad():
            out = ddim_sample(model, sched, z_p, cond_fn, sample_steps=1,
                              generator=gen)
            gen2 = torch.Generator().manual_seed(11)
            x_T = torch.randn(out.shape, generator=gen2)
            t = torch.full((2,), 100, dtype=torch.long)
            eps_hat, _ = model(x_T, z_p, t, cond_fn(t))
            ab = sched.alpha_bar[100]
            expected = (x_T - torch.sqrt(1 - ab) * eps_hat) / torch.sqrt(ab)
        torch.testing.assert_close(out, expected)

    def test_fixed_seed_reproducible(self):
        model = tiny_model().eval()
        sched = NoiseSchedule(50)
        z_p, _, a_p, a_f = tiny_inputs(model)

        def cond_fn(t):
            return model.cond_encoder(a_p, a_f, t)

        with torch.no_grad():
            a = ddim_sample(model, sched, z_p, cond_fn, 5,
                            torch.Generator().manual_seed(3))
            b = ddim_sample(model, sched, z_p, cond_fn, 5,
                            torch.Generator().manual_seed(3))
        assert torch.equal(a, b)

    def test_partial_denoise_beats_pure_noise(self):
        # resuming from a lightly noised latent must land closer than from
        # scratch, even for an untrained model
        model = tiny_model().eval()
        sched = NoiseSchedule(1000)
        z_p, z_f, a_p, a_f = tiny_inputs(model)

        def cond_fn(t):
            return model.cond_encoder(a_p, a_f, t)

        gen = torch.Generator().manual_seed(4)
        with torch.no_grad():
            t_small = 50
            z_noised = add_noise(z_f, t_small, torch.randn(z_f.shape, generator=gen), sched)
            partial = ddim_sample(model, sched, z_p, cond_fn, 5,
                                  x_init=z_noised, t_start=t_small)
            scratch = ddim_sample(model, sched, z_p, cond_fn, 5, generator=gen)
        mae_partial = (partial - z_f).abs().mean().item()
        mae_scratch = (scratch - z_f).abs().mean().item()
        assert mae_partial < mae_scratch


class TestPlanner:
    def test_loss_zero_at_truth(self):
        a = torch.randn(2, 3, 3)
        assert planner_loss(a, a).item() == 0.0

    def test_plan_interface_reads_history_only(self):
        model = tiny_model()
        z_p, _, a_p, _ = tiny_inputs(model)
        out = model.plan(z_p, a_p)
        assert out.shape == (2, model.cfg.tau_f, 3)

    def test_gradient_flows_into_world_model(self):
        model = tiny_model()
        z_p, z_f, a_p, a_f = tiny_inputs(model)
        t = torch.tensor([3, 7])
        cond = model.cond_encoder(a_p, a_f, t)
        _, pooled = model(z_f, z_p, t, cond)
        loss = planner_loss(a_f, model.planner(a_p, pooled))
        loss.backward()
        backbone_grads = [
            p.grad.abs().sum() for p in model.separator.parameters()
            if p.grad is not None
        ]
        assert sum(backbone_grads) > 0

    def test_disabled_planner_raises(self):
        model = tiny_model(planner_enabled=False)
        z_p, _, a_p, _ = tiny_inputs(model)
        with pytest.raises(RuntimeError, match="planner"):
            model.plan(z_p, a_p)


def make_windows(model, n=6, h=4, w=4, seed=0):
    rng = np.random.default_rng(seed)
    tau = model.cfg.tau_p + model.cfg.tau_f
    return {
        "z": rng.normal(size=(n, tau, h, w, model.cfg.latent_channels)).astype(np.float32),
        "ego": (rng.normal(size=(n, tau, 3)) * 0.1).astype(np.float32),
    }


class TestTraining:
    def test_zero_steps_leaves_params(self):
        model = tiny_model()
        sched = NoiseSchedule(20)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train_world_model(make_windows(model), model, sched,
                          WorldModelTrainConfig(steps=0))
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_loss_decreases_on_frozen_batch(self):
        model = tiny_model(seed=5)
        sched = NoiseSchedule(20)
        windows = make_windows(model, n=2)
        cfg = WorldModelTrainConfig(steps=60, batch_size=2, lr=2e-3, seed=0)
        history = train_world_model(windows, model, sched, cfg)
        assert np.mean(history["total"][-10:]) < np.mean(history["total"][:10])

    def test_window_shape_validated(self):
        model = tiny_model()
        windows = make_windows(model)
        windows["z"] = windows["z"][:, :3]
        with pytest.raises(ValueError, match="frames"):
            train_world_model(windows, model, NoiseSchedule(10),
                              WorldModelTrainConfig(steps=1))

    def test_planner_loss_tracked(self):
        model = tiny_model()
        history = train_world_model(make_windows(model), model, NoiseSchedule(10),
                                    WorldModelTrainConfig(steps=3, batch_size=2))
        assert all(v > 0 for v in history["planner"])


class TestAblationFlags:
    @pytest.mark.parametrize("flags", [
        dict(enable_de=False),
        dict(enable_se=False),
        dict(enable_ddm=False, enable_sdm=False),
        dict(enable_aga=False),
        dict(enable_de=False, enable_se=False, enable_ddm=False,
             enable_sdm=False, enable_aga=False),
    ])
    def test_ablated_model_forward_backward(self, flags):
        model = tiny_model(**flags)
        z_p, z_f, a_p, a_f = tiny_inputs(model)
        t = torch.tensor([2, 9])
        cond = model.cond_encoder(a_p, a_f, t)
        eps_hat, _ = model(z_f, z_p, t, cond)
        eps_hat.square().mean().backward()
        assert eps_hat.shape == z_f.shape
