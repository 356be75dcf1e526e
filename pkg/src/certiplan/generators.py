"""Conditional trajectory generators built as computation graphs.

Two families:

* a feed-forward GAN generator ``G(z, y)``,
* a deterministic DDIM sampler whose denoising network is unrolled over all
  diffusion steps.

Both compile to a :class:`~certiplan.graph.Graph` with inputs ``z`` (latent)
and ``y`` (condition prefix, flattened) and output the target trajectory of
shape ``(H, n)``.  A plain numpy evaluation path is kept alongside each graph
builder; the two are tested against each other.

Networks work in a normalised coordinate frame: conditions are mapped with
``(y - offset) / scale`` on the way in and outputs with ``offset + scale * out``
on the way out, where ``offset``/``scale`` are per state dimension.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import Graph, compose
from .stl import Formula, lower_to_graph

ACTIVATIONS = ("relu", "leaky_relu", "tanh")
LEAKY_SLOPE = 0.2


def _act_np(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_graph(g: Graph, name, x):
    if name == "relu":
        return g.relu(x)
    if name == "leaky_relu":
        return g.leaky_relu(x, LEAKY_SLOPE)
    if name == "tanh":
        return g.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Normalizer:
    """Per-state-dimension affine map between world and network coordinates."""

    offset: list[float]
    scale: list[float]

    @classmethod
    def identity(cls, n: int) -> "Normalizer":
        return cls([0.0] * n, [1.0] * n)

    @classmethod
    def from_bounds(cls, lower, upper) -> "Normalizer":
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        return cls(list(0.5 * (lo + hi)), list(0.5 * (hi - lo)))

    def tiled(self, rows: int):
        return np.tile(self.offset, rows), np.tile(self.scale, rows)


@dataclass
class Weights:
    """Per-layer ``(W, b)`` pairs of a feed-forward network."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def copy(self) -> "Weights":
        return Weights([(w.copy(), b.copy()) for w, b in self.layers])

    def to_list(self):
        return [{"W": w.tolist(), "b": b.tolist()} for w, b in self.layers]

    @classmethod
    def from_list(cls, raw) -> "Weights":
        return cls([(np.asarray(r["W"], dtype=float), np.asarray(r["b"], dtype=float)) for r in raw])

    def flat(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out


def mlp_shapes(in_dim: int, hidden, out_dim: int):
    dims = [in_dim, *hidden, out_dim]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def init_mlp(in_dim: int, hidden, out_dim: int, rng, gain: float = 1.0) -> Weights:
    layers = []
    for rows, cols in mlp_shapes(in_dim, hidden, out_dim):
        w = rng.normal(0.0, gain * np.sqrt(2.0 / cols), size=(rows, cols))
        layers.append((w, np.zeros(rows)))
    return Weights(layers)


def mlp_forward(weights: Weights, x: np.ndarray, activation: str) -> np.ndarray:
    h = x
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        h = h @ w.T + b
        if i < last:
            h = _act_np(activation, h)
    return h


def mlp_graph(g: Graph, x: int, weights: Weights, activation: str) -> int:
    h = x
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        h = g.affine(h, w, b)
        if i < last:
            h = _act_graph(g, activation, h)
    return h


def _check_weights(weights: Weights, shapes):
    got = [w.shape for w, _ in weights.layers]
    if got != list(shapes) or any(b.shape != (w.shape[0],) for w, b in weights.layers):
        raise ValueError(f"weights do not match spec: expected {list(shapes)}, got {got}")


# ---------------------------------------------------------------------------
# GAN generator


@dataclass
class GeneratorSpec:
    horizon: int                      # H, target steps
    state_dim: int                    # n
    cond_len: int = 1                 # h, prefix steps
    latent_dim: int | None = None     # k, defaults to H
    hidden: list[int] = field(default_factory=lambda: [64, 64, 64])
    activation: str = "relu"
    squash: bool = False              # tanh on the normalised output
    norm: Normalizer | None = None

    def __post_init__(self):
        if self.latent_dim is None:
            self.latent_dim = self.horizon
        if self.norm is None:
            self.norm = Normalizer.identity(self.state_dim)
        elif isinstance(self.norm, dict):
            self.norm = Normalizer(**self.norm)
        if self.latent_dim < 1 or self.horizon < 1 or self.cond_len < 0:
            raise ValueError("latent_dim and horizon must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def cond_dim(self) -> int:
        return self.cond_len * self.state_dim

    @property
    def out_dim(self) -> int:
        return self.horizon * self.state_dim

    def layer_shapes(self):
        return mlp_shapes(self.latent_dim + self.cond_dim, self.hidden, self.out_dim)

    def init_weights(self, rng) -> Weights:
        return init_mlp(self.latent_dim + self.cond_dim, self.hidden, self.out_dim, rng)


def _norm_cond(norm: Normalizer, y, rows):
    off, sc = norm.tiled(rows)
    return (np.asarray(y, dtype=float) - off) / sc


def gan_generate(spec: GeneratorSpec, weights: Weights, z, y=None) -> np.ndarray:
    """Target trajectory ``(H, n)`` (or a batch ``(B, H, n)``) for latent ``z``."""
    _check_weights(weights, spec.layer_shapes())
    z = np.asarray(z, dtype=float)
    batched = z.ndim == 2
    z2 = np.atleast_2d(z)
    if z2.shape[1] != spec.latent_dim:
        raise ValueError(f"latent has {z2.shape[1]} dims, spec expects {spec.latent_dim}")
    y2 = np.zeros((z2.shape[0], 0)) if spec.cond_dim == 0 else np.atleast_2d(np.asarray(y, dtype=float).reshape(-1, spec.cond_dim))
    if y2.shape[1] != spec.cond_dim:
        raise ValueError(f"condition has {y2.shape[1]} entries, spec expects {spec.cond_dim}")
    y2 = np.broadcast_to(_norm_cond(spec.norm, y2, spec.cond_len), (z2.shape[0], spec.cond_dim))
    h = mlp_forward(weights, np.concatenate([z2, y2], axis=1), spec.activation)
    if spec.squash:
        h = np.tanh(h)
    off, sc = spec.norm.tiled(spec.horizon)
    x = (off + sc * h).reshape(-1, spec.horizon, spec.state_dim)
    return x if batched else x[0]


def _cond_input(g: Graph, norm: Normalizer, cond_len: int, n: int) -> int:
    y = g.input("y", (cond_len, n))
    off, sc = norm.tiled(cond_len)
    return g.affine(y, np.diag(1.0 / sc), -off / sc)


def _denorm_output(g: Graph, h: int, norm: Normalizer, horizon: int, n: int) -> int:
    off, sc = norm.tiled(horizon)
    out = g.affine(h, np.diag(sc), off)
    return g.reshape(out, (horizon, n))


def gan_graph(spec: GeneratorSpec, weights: Weights) -> Graph:
    _check_weights(weights, spec.layer_shapes())
    g = Graph()
    z = g.input("z", spec.latent_dim)
    parts = [z]
    if spec.cond_dim:
        parts.append(_cond_input(g, spec.norm, spec.cond_len, spec.state_dim))
    h = mlp_graph(g, g.concat(parts), weights, spec.activation)
    if spec.squash:
        h = g.tanh(h)
    g.output = _denorm_output(g, h, spec.norm, spec.horizon, spec.state_dim)
    return g


# ---------------------------------------------------------------------------
# diffusion


def beta_schedule(T: int, beta1: float = 1e-4, betaT: float = 0.5) -> np.ndarray:
    """Quadratic noise schedule: square of the linear interpolation between
    ``sqrt(beta1)`` and ``sqrt(betaT)``, so the endpoints are exact."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < beta1 <= betaT < 1:
        raise ValueError("need 0 < beta1 <= betaT < 1")
    tau = np.arange(1, T + 1)
    b = (np.sqrt(beta1) * (T - tau) / (T - 1) + np.sqrt(betaT) * (tau - 1) / (T - 1)) ** 2
    b[0], b[-1] = beta1, betaT
    return b


def alpha_bar(betas) -> np.ndarray:
    """Cumulative products with ``alpha_bar[0] = 1``; entry ``tau`` is
    ``prod_{i <= tau} (1 - beta_i)``."""
    return np.concatenate([[1.0], np.cumprod(1.0 - np.asarray(betas, dtype=float))])


@dataclass
class DiffusionSpec:
    horizon: int
    state_dim: int
    cond_len: int = 1
    T: int = 6
    betas: list[float] | None = None
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    norm: Normalizer | None = None
    # "standard" is the usual DDIM update; "compact" drops the sqrt(alpha_bar[tau-1])
    # factor on the predicted-noise correction, as the update is sometimes printed
    update: str = "standard"

    def __post_init__(self):
        if self.betas is None:
            self.betas = list(beta_schedule(self.T)) if self.T >= 2 else [1e-4]
        self.betas = [float(b) for b in self.betas]
        if len(self.betas) != self.T or self.T < 1:
            raise ValueError("need one beta per diffusion step")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")
        if self.norm is None:
            self.norm = Normalizer.identity(self.state_dim)
        elif isinstance(self.norm, dict):
            self.norm = Normalizer(**self.norm)
        if self.update not in ("standard", "compact"):
            raise ValueError("update must be 'standard' or 'compact'")

    @property
    def latent_dim(self) -> int:
        return self.horizon * self.state_dim

    @property
    def cond_dim(self) -> int:
        return self.cond_len * self.state_dim

    @property
    def out_dim(self) -> int:
        return self.horizon * self.state_dim

    @property
    def alpha_bar(self) -> np.ndarray:
        return alpha_bar(self.betas)

    def layer_shapes(self):
        return mlp_shapes(self.out_dim + 1 + self.cond_dim, self.hidden, self.out_dim)

    def init_weights(self, rng) -> Weights:
        return init_mlp(self.out_dim + 1 + self.cond_dim, self.hidden, self.out_dim, rng)

    def step_coefficients(self, tau: int) -> tuple[float, float]:
        """``(cx, ce)`` with ``x[tau-1] = cx * x[tau] + ce * eps(x[tau], tau)``."""
        ab = self.alpha_bar
        cx = 1.0 / np.sqrt(1.0 - self.betas[tau - 1])
        tilde = np.sqrt(1.0 - ab[tau]) / np.sqrt(ab[tau])
        if self.update == "standard":
            tilde *= np.sqrt(ab[tau - 1])
        ce = np.sqrt(1.0 - ab[tau - 1]) - tilde
        return float(cx), float(ce)


def eps_predict(spec: DiffusionSpec, weights: Weights, x, tau, y_norm) -> np.ndarray:
    """Noise prediction on normalised inputs; ``x`` is ``(B, H*n)``, ``tau`` ``(B,)``."""
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(tau, dtype=float).reshape(-1, 1) / spec.T, (x.shape[0], 1))
    parts = [x, t]
    if spec.cond_dim:
        parts.append(np.broadcast_to(np.atleast_2d(y_norm), (x.shape[0], spec.cond_dim)))
    return mlp_forward(weights, np.concatenate(parts, axis=1), spec.activation)


def ddim_generate(spec: DiffusionSpec, weights: Weights, z, y=None) -> np.ndarray:
    """Deterministic reverse chain from ``x^T = z`` to ``x^0``; returns ``(H, n)``."""
    _check_weights(weights, spec.layer_shapes())
    z = np.asarray(z, dtype=float)
    batched = z.ndim == 2
    x = np.atleast_2d(z)
    if x.shape[1] != spec.latent_dim:
        raise ValueError(f"latent has {x.shape[1]} dims, spec expects {spec.latent_dim}")
    yn = None
    if spec.cond_dim:
        yn = _norm_cond(spec.norm, np.asarray(y, dtype=float).reshape(-1, spec.cond_dim), spec.cond_len)
    for tau in range(spec.T, 0, -1):
        cx, ce = spec.step_coefficients(tau)
        e = eps_predict(spec, weights, x, np.full(x.shape[0], tau), yn)
        x = cx * x + ce * e
    off, sc = spec.norm.tiled(spec.horizon)
    out = (off + sc * x).reshape(-1, spec.horizon, spec.state_dim)
    return out if batched else out[0]


def ddim_graph(spec: DiffusionSpec, weights: Weights) -> Graph:
    """The whole unrolled reverse chain as one graph."""
    _check_weights(weights, spec.layer_shapes())
    g = Graph()
    x = g.input("z", spec.latent_dim)
    yn = _cond_input(g, spec.norm, spec.cond_len, spec.state_dim) if spec.cond_dim else None
    for tau in range(spec.T, 0, -1):
        parts = [x, g.constant([tau / spec.T])]
        if yn is not None:
            parts.append(yn)
        e = mlp_graph(g, g.concat(parts), weights, spec.activation)
        cx, ce = spec.step_coefficients(tau)
        x = g.add(g.scalar_mul(x, cx), g.scalar_mul(e, ce))
    g.output = _denorm_output(g, x, spec.norm, spec.horizon, spec.state_dim)
    return g


# ---------------------------------------------------------------------------
# condition prefix and reward graph


def concat_condition(y, target) -> np.ndarray:
    """Full trajectory: the condition prefix rows followed by the generated rows."""
    y = np.asarray(y, dtype=float)
    target = np.asarray(target, dtype=float)
    n = target.shape[-1]
    if y.ndim == 0 or y.shape[-1] != n and y.size % n:
        raise ValueError("condition and trajectory state dims differ")
    if target.ndim == 3:
        # a shared prefix (h, n) or one prefix per batch row (B, h, n)
        if y.ndim < 3:
            y = np.broadcast_to(y.reshape(1, -1, n), (target.shape[0], y.size // n, n))
        return np.concatenate([y, target], axis=1)
    return np.concatenate([y.reshape(-1, n), target], axis=0)


def condition_graph(cond_len: int, horizon: int, n: int) -> Graph:
    """Graph with inputs ``x`` (target) and ``y`` (prefix) returning the full trajectory."""
    g = Graph()
    x = g.input("x", (horizon, n))
    if cond_len:
        y = g.input("y", (cond_len, n))
        g.output = g.concat([y, x])
    else:
        g.output = g.reshape(x, (horizon, n))
    return g


def reward_graph(generator: Graph, formula: Formula, cond_len: int, horizon: int, n: int,
                 relu_form: bool = False) -> Graph:
    """Robustness of ``formula`` on ``concat(y, G(z, y))`` as a graph over ``z`` and ``y``."""
    full = compose(generator, condition_graph(cond_len, horizon, n), input_name="x")
    rob = lower_to_graph(formula, cond_len + horizon, n, relu_form=relu_form, input_name="traj")
    return compose(full, rob)


# ---------------------------------------------------------------------------
# weight files


@dataclass
class Model:
    """A generator spec together with its weights."""

    kind: str  # "gan" | "ddim"
    spec: GeneratorSpec | DiffusionSpec
    weights: Weights
    meta: dict = field(default_factory=dict)

    def graph(self) -> Graph:
        return gan_graph(self.spec, self.weights) if self.kind == "gan" else ddim_graph(self.spec, self.weights)

    def generate(self, z, y=None) -> np.ndarray:
        if self.kind == "gan":
            return gan_generate(self.spec, self.weights, z, y)
        return ddim_generate(self.spec, self.weights, z, y)

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def to_dict(self) -> dict:
        spec = asdict(self.spec)
        return {"format": "certiplan.weights", "version": 1, "model": self.kind,
                "spec": spec, "layers": self.weights.to_list(), "meta": self.meta}

    @classmethod
    def from_dict(cls, d) -> "Model":
        if d.get("format") != "certiplan.weights":
            raise ValueError("not a certiplan weights document")
        if d.get("version") != 1:
            raise ValueError(f"unsupported weights version {d.get('version')}")
        kind = d["model"]
        spec_cls = {"gan": GeneratorSpec, "ddim": DiffusionSpec}[kind]
        spec = spec_cls(**d["spec"])
        weights = Weights.from_list(d["layers"])
        _check_weights(weights, spec.layer_shapes())
        return cls(kind, spec, weights, d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Model":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()
