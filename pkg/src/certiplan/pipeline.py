"""Task-level glue: default architectures, training entry point, reward graphs.

Besides the four planning environments there is one synthetic task,
``toy1d``: a one-dimensional identity generator with the requirement
``s > 0`` on a single generated state and no condition prefix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .generators import DiffusionSpec, GeneratorSpec, Model, Normalizer, Weights, reward_graph
from .graph import Graph
from .stl import Atomic, Component, Formula
from .tasks import ENVIRONMENTS, Environment, TrajectoryDataset, build_spec, builtin_environment
from .training import TrainingConfig, train_ddpm, train_wgan

TASKS = ENVIRONMENTS + ("toy1d",)
MODEL_KINDS = ("gan", "ddim")


def variant_of(kind: str) -> str:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    return "gan" if kind == "gan" else "diff"


@dataclass
class Task:
    name: str
    env: Environment | None
    state_dim: int
    cond_len: int

    def horizon(self, kind: str) -> int:
        if self.env is None:
            return 1
        return self.env.horizon(variant_of(kind))

    def formula(self, kind: str) -> Formula:
        if self.env is None:
            return Atomic(Component(0))
        return build_spec(self.env, variant_of(kind))

    def default_condition(self) -> np.ndarray | None:
        if self.env is None or self.cond_len == 0:
            return None
        return np.asarray(self.env.canonical_start, dtype=float).reshape(self.cond_len, -1)


def get_task(name: str) -> Task:
    if name == "toy1d":
        return Task("toy1d", None, 1, 0)
    env = builtin_environment(name)
    return Task(env.name, env, env.state_dim, env.cond_len)


def default_spec(task: Task, kind: str, latent_cap: int = 24):
    """Desk-scale architectures: 3x64 ReLU GAN with k = min(H, 24), or a T = 6
    DDIM with a 2x64 noise predictor.  Both work in coordinates scaled to the
    workspace box."""
    H = task.horizon(kind)
    norm = (Normalizer.from_bounds(*task.env.bounds) if task.env is not None
            else Normalizer.identity(task.state_dim))
    if kind == "gan":
        return GeneratorSpec(H, task.state_dim, task.cond_len, latent_dim=min(H * task.state_dim, latent_cap),
                             hidden=[64, 64, 64], activation="relu", squash=True, norm=norm)
    return DiffusionSpec(H, task.state_dim, task.cond_len, T=6, hidden=[64, 64], norm=norm)


def identity_model() -> Model:
    """The toy generator ``G(z) = z`` on one dimension."""
    spec = GeneratorSpec(horizon=1, state_dim=1, cond_len=0, latent_dim=1, hidden=[])
    return Model("gan", spec, Weights([(np.eye(1), np.zeros(1))]), {"task": "toy1d"})


def train_model(task: Task, kind: str, data: TrajectoryDataset, config: TrainingConfig) -> Model:
    spec = default_spec(task, kind)
    if data.xs.shape[1:] != (spec.horizon, spec.state_dim):
        raise ValueError(f"dataset targets have shape {data.xs.shape[1:]}, model expects "
                         f"{(spec.horizon, spec.state_dim)}")
    ys = data.ys if task.cond_len else None
    if kind == "gan":
        w, _, hist = train_wgan(spec, data.xs, ys, config)
    else:
        w, hist = train_ddpm(spec, data.xs, ys, config)
    meta = {"task": task.name, "training": asdict(config),
            "final_loss": float(np.mean(hist[-50:])) if hist else None}
    return Model(kind, spec, w, meta)


def model_reward(model: Model, task: Task, formula: Formula | None = None) -> tuple[Graph, Formula]:
    phi = formula if formula is not None else task.formula(model.kind)
    s = model.spec
    return reward_graph(model.graph(), phi, s.cond_len, s.horizon, s.state_dim), phi
