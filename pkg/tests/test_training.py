import numpy as np
import pytest

from certiplan.generators import DiffusionSpec, GeneratorSpec, Weights, gan_generate
from certiplan.training import (CriticSpec, OptimizerState, TrainingConfig, WGANState, adam_step,
                                clip_weights, critic_objective, ddpm_loss, radam_step, train_ddpm,
                                train_wgan, wgan_step)


def _w(*arrays):
    return Weights([(np.asarray(arrays[0], dtype=float).reshape(1, -1), np.zeros(1))])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(clip=-1.0)
    with pytest.raises(ValueError):
        TrainingConfig(optimizer="sgd")
    assert TrainingConfig().lr == 0.0005


def _toy_ddpm_spec():
    return DiffusionSpec(horizon=3, state_dim=2, cond_len=1, T=6, hidden=[8])


def test_ddpm_perfect_predictor_has_zero_loss():
    spec = _toy_ddpm_spec()
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(16, 3, 2))
    loss, grads = ddpm_loss(spec, None, x0, rng.normal(size=(16, 1, 2)), rng,
                            predictor=lambda xt, tau, eps: eps)
    assert loss == 0.0 and grads is None


def test_ddpm_zero_predictor_estimates_dimension():
    spec = _toy_ddpm_spec()
    rng = np.random.default_rng(1)
    losses = [ddpm_loss(spec, None, rng.normal(size=(1, 3, 2)), np.zeros((1, 1, 2)), rng,
                        predictor=lambda xt, tau, eps: np.zeros_like(eps))[0] for _ in range(10_000)]
    mean = np.mean(losses)
    se = np.std(losses, ddof=1) / np.sqrt(len(losses))
    assert abs(mean - 6.0) < 3 * se


def test_ddpm_shape_errors():
    spec = _toy_ddpm_spec()
    w = spec.init_weights(np.random.default_rng(0))
    with pytest.raises(ValueError):
        ddpm_loss(spec, w, np.zeros((4, 2, 2)), np.zeros((4, 1, 2)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        ddpm_loss(spec, w, np.zeros((0, 3, 2)), np.zeros((0, 1, 2)), np.random.default_rng(0))


def test_ddpm_gradients_match_finite_differences():
    spec = DiffusionSpec(horizon=2, state_dim=1, cond_len=1, T=4, hidden=[4], activation="tanh")
    w = spec.init_weights(np.random.default_rng(2))
    w = Weights([(a, np.random.default_rng(3).normal(0, 0.1, b.shape)) for a, b in w.layers])
    x0 = np.random.default_rng(4).normal(size=(8, 2, 1))
    y = np.random.default_rng(5).normal(size=(8, 1, 1))

    def loss_at(weights):
        return ddpm_loss(spec, weights, x0, y, np.random.default_rng(9))

    _, grads = loss_at(w)
    ana, num = [], []
    for li, (W, b) in enumerate(w.layers):
        for arr_i, arr in enumerate((W, b)):
            for idx in np.ndindex(arr.shape):
                def shifted(d):
                    layers = [(a.copy(), c.copy()) for a, c in w.layers]
                    layers[li][arr_i][idx] += d
                    return loss_at(Weights(layers))[0]
                num.append((shifted(1e-6) - shifted(-1e-6)) / 2e-6)
                ana.append(grads.layers[li][arr_i][idx])
    ana, num = np.array(ana), np.array(num)
    assert np.linalg.norm(ana - num) / np.linalg.norm(num) < 1e-4


def test_ddpm_toy_training_halves_loss():
    rng = np.random.default_rng(0)
    xs = (2.0 + 0.1 * rng.standard_normal(1000)).reshape(-1, 1, 1)
    spec = DiffusionSpec(horizon=1, state_dim=1, cond_len=0, T=6, hidden=[16, 16])
    _, hist = train_ddpm(spec, xs, None, TrainingConfig(lr=5e-3, iterations=500, optimizer="adam"))
    assert np.mean(hist[-50:]) < 0.5 * np.mean(hist[:20])


def test_training_reproducible():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(50, 2, 1))
    ys = rng.normal(size=(50, 1, 1))
    spec = DiffusionSpec(horizon=2, state_dim=1, cond_len=1, T=3, hidden=[8])
    cfg = TrainingConfig(iterations=20, batch_size=8, seed=3)
    a, ha = train_ddpm(spec, xs, ys, cfg)
    b, hb = train_ddpm(spec, xs, ys, cfg)
    assert ha == hb
    assert all(np.array_equal(p, q) for (p, _), (q, _) in zip(a.layers, b.layers))
    g = GeneratorSpec(horizon=2, state_dim=1, cond_len=1, latent_dim=2, hidden=[8])
    cfg = TrainingConfig(iterations=5, batch_size=8, seed=3)
    ga, _, ha = train_wgan(g, xs, ys, cfg, critic=CriticSpec(3, [8]))
    gb, _, hb = train_wgan(g, xs, ys, cfg, critic=CriticSpec(3, [8]))
    assert ha == hb
    assert all(np.array_equal(p, q) for (p, _), (q, _) in zip(ga.layers, gb.layers))


def test_adam_first_step_bounded_by_lr():
    cfg = TrainingConfig(lr=0.01, optimizer="adam")
    w = _w([1.0, -2.0, 3.0])
    g = _w([1e-3, -50.0, 0.7])
    new, st = adam_step(w, g, OptimizerState.zeros_like(w), cfg)
    delta = new.layers[0][0] - w.layers[0][0]
    assert np.all(np.abs(delta) <= cfg.lr + 1e-9)
    assert np.all(np.sign(delta) == -np.sign(g.layers[0][0]))
    assert st.t == 1


def test_zero_gradient_zero_update_and_decay():
    cfg = TrainingConfig(lr=0.01, optimizer="adam")
    w = _w([1.0, 2.0])
    st = OptimizerState(3, [np.full((1, 2), 0.0), np.zeros(1)], [np.full((1, 2), 0.0), np.zeros(1)])
    new, _ = adam_step(w, _w([0.0, 0.0]), st, cfg)
    assert np.array_equal(new.layers[0][0], w.layers[0][0])
    st = OptimizerState(3, [np.full((1, 2), 0.5), np.zeros(1)], [np.full((1, 2), 0.2), np.zeros(1)])
    _, st2 = adam_step(w, _w([0.0, 0.0]), st, cfg)
    assert np.allclose(st2.m[0], 0.9 * 0.5) and np.allclose(st2.v[0], 0.999 * 0.2)


@pytest.mark.parametrize("step,opt,steps", [(adam_step, "adam", 500), (radam_step, "radam", 1000)])
def test_quadratic_bowl(step, opt, steps):
    # the rectified variant warms up slowly, so it gets a longer budget
    cfg = TrainingConfig(lr=0.05, optimizer=opt)
    w = _w([5.0])
    st = OptimizerState.zeros_like(w)
    for _ in range(steps):
        grad = Weights([(2 * w.layers[0][0], np.zeros(1))])
        w, st = step(w, grad, st, cfg)
    assert abs(w.layers[0][0][0, 0]) < 0.01


def test_radam_early_steps_are_momentum_sgd():
    cfg = TrainingConfig(lr=0.1, optimizer="radam")
    w = _w([1.0])
    g = _w([0.3])
    new, _ = radam_step(w, g, OptimizerState.zeros_like(w), cfg)
    # rho_1 <= 4: bias-corrected momentum is the gradient itself
    assert new.layers[0][0][0, 0] == pytest.approx(1.0 - 0.1 * 0.3)


def test_optimizer_state_mismatch():
    w = _w([1.0, 2.0])
    with pytest.raises(ValueError):
        adam_step(w, w, OptimizerState.zeros_like(_w([1.0])), TrainingConfig())


def test_clipping_after_critic_step():
    rng = np.random.default_rng(0)
    g = GeneratorSpec(horizon=2, state_dim=1, cond_len=1, latent_dim=2, hidden=[8])
    c = CriticSpec(3)
    cfg = TrainingConfig(critic_steps=1, clip=0.01)
    cw = c.init_weights(rng)  # deliberately unclipped
    st = WGANState(g.init_weights(rng), cw, None, None)
    st.gen_opt = OptimizerState.zeros_like(st.gen)
    st.critic_opt = OptimizerState.zeros_like(st.critic)
    st, info = wgan_step(g, c, st, rng.normal(size=(16, 2, 1)), rng.normal(size=(16, 1, 1)), cfg, rng)
    for W, b in st.critic.layers:
        assert np.all(np.abs(W) <= 0.01) and np.all(np.abs(b) <= 0.01)
    assert np.isfinite(info["wdist"])


def test_critic_objective_definition():
    c = CriticSpec(2, hidden=[])
    cw = Weights([(np.array([[1.0, -1.0]]), np.array([0.5]))])
    real = np.array([[3.0, 1.0], [2.0, 2.0]])
    fake = np.array([[0.0, 1.0]])
    assert critic_objective(c, cw, real, fake) == pytest.approx((2.5 + 0.5) / 2 - (-0.5))


def test_clip_weights():
    w = Weights([(np.array([[0.5, -0.002]]), np.array([-3.0]))])
    c = clip_weights(w, 0.01)
    assert c.layers[0][0].tolist() == [[0.01, -0.002]] and c.layers[0][1].tolist() == [-0.01]


def test_wgan_critic_size_checked():
    rng = np.random.default_rng(0)
    g = GeneratorSpec(horizon=2, state_dim=1, cond_len=1, latent_dim=2, hidden=[8])
    c = CriticSpec(2)
    st = WGANState(g.init_weights(rng), c.init_weights(rng), None, None)
    st.gen_opt = OptimizerState.zeros_like(st.gen)
    st.critic_opt = OptimizerState.zeros_like(st.critic)
    with pytest.raises(ValueError):
        wgan_step(g, c, st, np.zeros((4, 2, 1)), np.zeros((4, 1, 1)), TrainingConfig(), rng)


def test_wgan_toy_mean():
    rng = np.random.default_rng(0)
    xs = (3.0 + 0.5 * rng.standard_normal(2000)).reshape(-1, 1, 1)
    g = GeneratorSpec(horizon=1, state_dim=1, cond_len=0, latent_dim=1, hidden=[16, 16])
    gw, _, _ = train_wgan(g, xs, None, TrainingConfig(iterations=2000, seed=0),
                          critic=CriticSpec(1, [32, 32]))
    s = gan_generate(g, gw, np.random.default_rng(1).standard_normal((10_000, 1)))
    assert abs(s.mean() - 3.0) < 0.2
