"""Desk-scale training: DDPM noise regression and a weight-clipped WGAN.

All gradients come from :func:`certiplan.graph.backward` over the network
graphs; the optimizers work on flat lists of parameter arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .generators import (DiffusionSpec, GeneratorSpec, Normalizer, Weights, _act_graph,
                         init_mlp, mlp_forward, mlp_shapes)
from .graph import Graph, backward

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    lr: float = 0.0005
    batch_size: int = 64
    iterations: int = 2000
    optimizer: str = "radam"   # adam | radam
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 0.01         # WGAN critic weight bound
    critic_steps: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.clip <= 0:
            raise ValueError("clip bound must be positive")
        if self.optimizer not in ("adam", "radam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.iterations < 0 or self.critic_steps < 1:
            raise ValueError("batch_size and critic_steps must be >= 1, iterations >= 0")


@dataclass
class CriticSpec:
    in_dim: int
    hidden: list[int] = field(default_factory=lambda: [64, 64, 64])
    activation: str = "leaky_relu"

    def layer_shapes(self):
        return mlp_shapes(self.in_dim, self.hidden, 1)

    def init_weights(self, rng) -> Weights:
        return init_mlp(self.in_dim, self.hidden, 1, rng)


# ---------------------------------------------------------------------------
# optimizers


def _params(weights: Weights) -> list[np.ndarray]:
    out = []
    for w, b in weights.layers:
        out += [w, b]
    return out


def _unflatten(arrays) -> Weights:
    return Weights([(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)])


@dataclass
class OptimizerState:
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, weights: Weights) -> "OptimizerState":
        ps = _params(weights)
        return cls(0, [np.zeros_like(p) for p in ps], [np.zeros_like(p) for p in ps])


def _moments(grads, state, config):
    b1, b2 = config.beta1, config.beta2
    t = state.t + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    return t, m, v


def adam_step(weights: Weights, grads: Weights, state: OptimizerState, config: TrainingConfig):
    """Adam with bias correction; returns ``(new_weights, new_state)``."""
    g = _params(grads)
    if len(g) != len(state.m) or any(a.shape != b.shape for a, b in zip(g, state.m)):
        raise ValueError("optimizer state does not match the weights")
    t, m, v = _moments(g, state, config)
    c1 = 1 - config.beta1 ** t
    c2 = 1 - config.beta2 ** t
    new = [p - config.lr * (mi / c1) / (np.sqrt(vi / c2) + config.eps)
           for p, mi, vi in zip(_params(weights), m, v)]
    return _unflatten(new), OptimizerState(t, m, v)


def radam_step(weights: Weights, grads: Weights, state: OptimizerState, config: TrainingConfig):
    """Rectified Adam; momentum SGD while the variance estimate is unreliable."""
    g = _params(grads)
    if len(g) != len(state.m) or any(a.shape != b.shape for a, b in zip(g, state.m)):
        raise ValueError("optimizer state does not match the weights")
    t, m, v = _moments(g, state, config)
    b2 = config.beta2
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
    c1 = 1 - config.beta1 ** t
    new = []
    if rho_t > 4.0:
        r = np.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        c2 = 1 - b2 ** t
        for p, mi, vi in zip(_params(weights), m, v):
            new.append(p - config.lr * r * (mi / c1) / (np.sqrt(vi / c2) + config.eps))
    else:
        for p, mi in zip(_params(weights), m):
            new.append(p - config.lr * mi / c1)
    return _unflatten(new), OptimizerState(t, m, v)


def optimizer_step(weights, grads, state, config):
    step = adam_step if config.optimizer == "adam" else radam_step
    return step(weights, grads, state, config)


# ---------------------------------------------------------------------------
# network graphs with parameter gradients


def _net(weights: Weights, in_dim: int, activation: str, squash: bool = False):
    g = Graph()
    h = g.input("in", in_dim)
    ids = []
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        h = g.affine(h, w, b)
        ids.append(h)
        if i < last:
            h = _act_graph(g, activation, h)
    if squash:
        h = g.tanh(h)
    g.output = h
    return g, ids


def net_value_and_grads(weights: Weights, x, activation: str, seed_fn, squash: bool = False):
    """Forward ``x`` through the MLP, then backpropagate ``seed_fn(output)``.

    Returns ``(output, param_grads, input_grad)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    g, ids = _net(weights, x.shape[1], activation, squash)
    out = g.evaluate({"in": x})
    seed = seed_fn(out)
    tape = backward(g, {"in": x}, seed=seed, wrt_params=True)
    grads = Weights([tape.params[i] if i in tape.params else
                     (np.zeros_like(w), np.zeros_like(b))
                     for i, (w, b) in zip(ids, weights.layers)])
    return out, grads, tape.inputs["in"]


# ---------------------------------------------------------------------------
# diffusion


def _normalise(norm: Normalizer, traj):
    """``(B, rows, n)`` world coordinates to flat normalised ``(B, rows*n)``."""
    traj = np.asarray(traj, dtype=float)
    rows = traj.shape[1]
    off, sc = norm.tiled(rows)
    return (traj.reshape(traj.shape[0], -1) - off) / sc


def ddpm_loss(spec: DiffusionSpec, weights: Weights, x0, y, rng, predictor=None):
    """Denoising loss ``mean_b ||eps - eps_theta(x_tau, tau, y)||^2``.

    ``x0`` is ``(B, H, n)`` and ``y`` ``(B, h, n)`` in world coordinates.
    ``predictor(x_tau, tau, eps)`` replaces the network when given (gradients
    are then ``None``).  Returns ``(loss, grads)``.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 3 or x0.shape[1:] != (spec.horizon, spec.state_dim) or x0.shape[0] == 0:
        raise ValueError(f"x0 must be (B, {spec.horizon}, {spec.state_dim})")
    B = x0.shape[0]
    xn = _normalise(spec.norm, x0)
    if spec.cond_dim:
        y = np.asarray(y, dtype=float).reshape(B, spec.cond_len, spec.state_dim)
        yn = _normalise(spec.norm, y)
    else:
        yn = np.zeros((B, 0))
    ab = spec.alpha_bar
    tau = rng.integers(1, spec.T + 1, size=B)
    eps = rng.standard_normal(xn.shape)
    a = ab[tau][:, None]
    xt = np.sqrt(a) * xn + np.sqrt(1.0 - a) * eps
    if predictor is not None:
        pred = predictor(xt, tau, eps)
        return float(np.mean(np.sum((eps - pred) ** 2, axis=1))), None
    inp = np.concatenate([xt, (tau / spec.T)[:, None], yn], axis=1)
    pred, grads, _ = net_value_and_grads(
        weights, inp, spec.activation, lambda out: -2.0 * (eps - out) / B)
    loss = float(np.mean(np.sum((eps - pred) ** 2, axis=1)))
    return loss, grads


def train_ddpm(spec: DiffusionSpec, xs, ys, config: TrainingConfig, weights: Weights | None = None,
               callback=None):
    """Fit the noise predictor; returns ``(weights, loss_history)``."""
    rng = np.random.default_rng(config.seed)
    weights = weights.copy() if weights is not None else spec.init_weights(rng)
    state = OptimizerState.zeros_like(weights)
    xs = np.asarray(xs, dtype=float)
    ys = None if ys is None else np.asarray(ys, dtype=float)
    history = []
    for it in range(config.iterations):
        idx = rng.integers(0, xs.shape[0], size=config.batch_size)
        loss, grads = ddpm_loss(spec, weights, xs[idx], None if ys is None else ys[idx], rng)
        weights, state = optimizer_step(weights, grads, state, config)
        history.append(loss)
        if callback is not None:
            callback(it, loss, weights)
    return weights, history


# ---------------------------------------------------------------------------
# WGAN


def clip_weights(weights: Weights, c: float) -> Weights:
    return Weights([(np.clip(w, -c, c), np.clip(b, -c, c)) for w, b in weights.layers])


def critic_objective(critic: CriticSpec, cw: Weights, real, fake) -> float:
    """``mean C(real) - mean C(fake)`` on flat critic inputs."""
    return float(np.mean(mlp_forward(cw, real, critic.activation))
                 - np.mean(mlp_forward(cw, fake, critic.activation)))


def _gen_norm_out(spec: GeneratorSpec, gw: Weights, z, yn, seed_fn=None):
    inp = np.concatenate([z, yn], axis=1)
    if seed_fn is None:
        h = mlp_forward(gw, inp, spec.activation)
        return np.tanh(h) if spec.squash else h
    return net_value_and_grads(gw, inp, spec.activation, seed_fn, squash=spec.squash)


@dataclass
class WGANState:
    gen: Weights
    critic: Weights
    gen_opt: OptimizerState
    critic_opt: OptimizerState


def wgan_step(spec: GeneratorSpec, critic: CriticSpec, st: WGANState, real_x, real_y,
              config: TrainingConfig, rng) -> tuple[WGANState, dict]:
    """``critic_steps`` clipped critic updates, then one generator update.

    Both networks see the condition: the critic scores the normalised full
    trajectory ``concat(y, x)``.
    """
    real_x = np.asarray(real_x, dtype=float)
    B = real_x.shape[0]
    if real_x.shape[1:] != (spec.horizon, spec.state_dim):
        raise ValueError("real batch does not match the generator spec")
    xn = _normalise(spec.norm, real_x)
    yn = (_normalise(spec.norm, np.asarray(real_y, dtype=float).reshape(B, spec.cond_len, spec.state_dim))
          if spec.cond_dim else np.zeros((B, 0)))
    if critic.in_dim != yn.shape[1] + xn.shape[1]:
        raise ValueError("critic input size does not match (h + H) * n")
    real = np.concatenate([yn, xn], axis=1)
    cw, copt = st.critic, st.critic_opt
    for _ in range(config.critic_steps):
        z = rng.standard_normal((B, spec.latent_dim))
        fake = np.concatenate([yn, _gen_norm_out(spec, st.gen, z, yn)], axis=1)
        # minimise -(mean C(real) - mean C(fake))
        _, gr, _ = net_value_and_grads(cw, real, critic.activation, lambda o: np.full_like(o, -1.0 / B))
        _, gf, _ = net_value_and_grads(cw, fake, critic.activation, lambda o: np.full_like(o, 1.0 / B))
        g = Weights([(a[0] + b[0], a[1] + b[1]) for a, b in zip(gr.layers, gf.layers)])
        cw, copt = optimizer_step(cw, g, copt, config)
        cw = clip_weights(cw, config.clip)
    wdist = critic_objective(critic, cw, real, fake)
    # generator: minimise -mean C(concat(y, G(z, y)))
    z = rng.standard_normal((B, spec.latent_dim))
    gout = _gen_norm_out(spec, st.gen, z, yn)
    _, _, dfake = net_value_and_grads(cw, np.concatenate([yn, gout], axis=1), critic.activation,
                                      lambda o: np.full_like(o, -1.0 / B))
    dx = dfake[:, yn.shape[1]:]
    _, gg, _ = _gen_norm_out(spec, st.gen, z, yn, seed_fn=lambda o: dx)
    gw, gopt = optimizer_step(st.gen, gg, st.gen_opt, config)
    return WGANState(gw, cw, gopt, copt), {"wdist": wdist}


def train_wgan(spec: GeneratorSpec, xs, ys, config: TrainingConfig, critic: CriticSpec | None = None,
               callback=None):
    """Returns ``(generator_weights, critic_weights, history)``."""
    rng = np.random.default_rng(config.seed)
    critic = critic or CriticSpec((spec.cond_len + spec.horizon) * spec.state_dim)
    st = WGANState(spec.init_weights(rng), clip_weights(critic.init_weights(rng), config.clip),
                   None, None)
    st.gen_opt = OptimizerState.zeros_like(st.gen)
    st.critic_opt = OptimizerState.zeros_like(st.critic)
    xs = np.asarray(xs, dtype=float)
    ys = None if ys is None else np.asarray(ys, dtype=float)
    history = []
    for it in range(config.iterations):
        idx = rng.integers(0, xs.shape[0], size=config.batch_size)
        st, info = wgan_step(spec, critic, st, xs[idx], None if ys is None else ys[idx], config, rng)
        history.append(info["wdist"])
        if callback is not None:
            callback(it, info, st)
    return st.gen, st.critic, history
