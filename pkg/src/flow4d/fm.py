"""Rectified flow: straight-path flow matching, time samplers and Euler integration."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import fileio
from .diffnet import DTYPE, Adam, DimensionError, ModulatedMlpSpec, ParamStore, forward_mlp, init_mlp

log = logging.getLogger(__name__)


class IntegrationError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at Euler step {step}")
        self.step = step


@dataclass(frozen=True)
class TimeSampler:
    kind: str = "uniform"
    a: float = 0.1
    b: float = 2.0

    def __post_init__(self):
        if self.kind not in ("uniform", "beta"):
            raise ValueError(f"unknown time sampler {self.kind!r}")
        if self.a <= 0 or self.b <= 0:
            raise ValueError("beta parameters must be positive")

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "uniform":
            return rng.random(size)
        return rng.beta(self.a, self.b, size)

    @property
    def mean(self) -> float:
        return 0.5 if self.kind == "uniform" else self.a / (self.a + self.b)


@dataclass
class PathSample:
    t: float
    z0: np.ndarray
    z1: np.ndarray
    zt: np.ndarray
    target: np.ndarray


def make_path_sample(z0, z1, t: float) -> PathSample:
    z0, z1 = np.asarray(z0, np.float64), np.asarray(z1, np.float64)
    if z0.shape != z1.shape:
        raise DimensionError(f"z0 {z0.shape} and z1 {z1.shape} differ")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return PathSample(t, z0, z1, (1.0 - t) * z0 + t * z1, z1 - z0)


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1]; frequencies spread geometrically over [1, 100] rad."""
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, float(np.log(100.0)), half, dtype=DTYPE))
    emb = torch.cat([torch.sin(t * freqs), torch.cos(t * freqs)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, t], dim=1)
    return emb


@dataclass
class FlowConfig:
    hidden: tuple[int, ...] = (256, 256, 256)
    time_dim: int = 16
    extra_dim: int = 0
    activation: str = "silu"
    steps: int = 100
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3


class FlowModel:
    """Time-conditioned vector field v_t(z) over a d-dimensional latent."""

    def __init__(self, latent_dim: int, config: FlowConfig | None = None, params: ParamStore | None = None,
                 seed: int = 0, prefix: str = "flow."):
        self.latent_dim = latent_dim
        self.config = config or FlowConfig()
        self.prefix = prefix
        self.spec = ModulatedMlpSpec(latent_dim, self.config.hidden, latent_dim,
                                     self.config.time_dim + self.config.extra_dim, self.config.activation)
        if params is None:
            params = ParamStore()
        if f"{prefix}l0.w" not in params:
            init_mlp(self.spec, np.random.default_rng(seed), params, prefix)
        self.params = params

    def velocity(self, z, t, extra=None) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=DTYPE)
        single = z.ndim == 1
        z = z[None] if single else z
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        if t.numel() == 1 and len(z) > 1:
            t = t.expand(len(z))
        cond = time_embedding(t, self.config.time_dim)
        if self.config.extra_dim:
            if extra is None:
                raise DimensionError("model expects extra conditioning")
            extra = torch.as_tensor(extra, dtype=DTYPE).reshape(len(z), -1)
            cond = torch.cat([cond, extra], dim=1)
        v = forward_mlp(self.spec, self.params, z, cond, self.prefix)
        return v[0] if single else v

    def meta(self) -> dict[str, np.ndarray]:
        c = self.config
        return {
            f"meta.{self.prefix}latent_dim": np.array(float(self.latent_dim)),
            f"meta.{self.prefix}spec": np.array(self.spec.to_meta(), dtype=np.float64),
            f"meta.{self.prefix}train": np.array([c.time_dim, c.extra_dim, c.steps], dtype=np.float64),
        }

    @classmethod
    def from_entries(cls, e: dict, params: ParamStore, prefix: str = "flow.") -> "FlowModel":
        spec = ModulatedMlpSpec.from_meta(e[f"meta.{prefix}spec"])
        time_dim, extra_dim, steps = (int(v) for v in e[f"meta.{prefix}train"])
        cfg = FlowConfig(hidden=spec.hidden_dims, time_dim=time_dim, extra_dim=extra_dim,
                         activation=spec.activation, steps=steps)
        return cls(int(e[f"meta.{prefix}latent_dim"]), cfg, params, prefix=prefix)

    def save(self, path, extra_entries: dict | None = None) -> None:
        entries = {"meta.kind.lrf": np.array(1.0), **self.meta(), **self.params.state_dict()}
        fileio.write_checkpoint(path, {**entries, **(extra_entries or {})})

    @classmethod
    def load(cls, path) -> "FlowModel":
        e = fileio.read_checkpoint(path)
        if "meta.kind.lrf" not in e:
            raise fileio.FormatError(f"{path}: not a rectified-flow checkpoint")
        params = ParamStore.from_arrays({n: v for n, v in e.items() if n.startswith("flow.")})
        return cls.from_entries(e, params)


def fm_loss(model: FlowModel, z0, z1, t, extra=None) -> torch.Tensor:
    """Batch mean of ||v_t((1-t) z0 + t z1) - (z1 - z0)||^2."""
    z0 = torch.as_tensor(z0, dtype=DTYPE)
    z1 = torch.as_tensor(z1, dtype=DTYPE)
    if z0.ndim == 1:
        z0, z1 = z0[None], z1[None]
    if len(z0) == 0:
        raise ValueError("empty batch")
    if z0.shape != z1.shape:
        raise DimensionError(f"z0 {tuple(z0.shape)} and z1 {tuple(z1.shape)} differ")
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    if t.numel() == 1:
        t = t.expand(len(z0))
    zt = (1.0 - t)[:, None] * z0 + t[:, None] * z1
    resid = model.velocity(zt, t, extra) - (z1 - z0)
    return (resid ** 2).sum(dim=1).mean()


def integrate_euler(model, z0, steps: int, extra=None) -> np.ndarray:
    """Forward Euler from t=0 to t=1 with ``steps`` equal steps.

    ``model`` is a FlowModel or any callable ``(z, t) -> velocity``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    field = model.velocity if isinstance(model, FlowModel) else None
    z = torch.as_tensor(np.asarray(z0, dtype=np.float64))
    if not torch.isfinite(z).all():
        raise IntegrationError(0)
    dt = 1.0 / steps
    with torch.no_grad():
        for i in range(steps):
            t = i / steps
            v = field(z, t, extra) if field else torch.as_tensor(model(z, t), dtype=DTYPE)
            z = z + dt * v
            if not torch.isfinite(z).all():
                raise IntegrationError(i + 1)
    return z.numpy()


def train_lrf(latents, sampler: TimeSampler | None = None, config: FlowConfig | None = None, seed: int = 0,
              history: list | None = None) -> FlowModel:
    """Fit v_t on standard-normal noise to data couplings along straight paths."""
    sampler = sampler or TimeSampler("uniform")
    config = config or FlowConfig()
    data = np.asarray(latents, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("need a non-empty (n, d) latent dataset")
    model = FlowModel(data.shape[1], config, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    opt = Adam(model.params, lr=config.lr)
    history = [] if history is None else history
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            z1 = data[order[i:i + config.batch_size]]
            z0 = rng.standard_normal(z1.shape)
            t = sampler.sample(rng, len(z1))
            opt.zero_grad()
            loss = fm_loss(model, z0, z1, t)
            model.params.backward(loss)
            opt.step()
            total += loss.item() * len(z1)
        history.append(total / len(data))
        if (epoch + 1) % 50 == 0:
            log.info("lrf epoch %d loss %.5f", epoch + 1, history[-1])
    return model


def sample_lrf_latents(model: FlowModel, n: int, steps: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    z0 = rng.standard_normal((n, model.latent_dim))
    if n == 0:
        return z0
    return integrate_euler(model, z0, steps)


def generate_lrf(model: FlowModel, ae, n: int, steps: int = 100, seed: int = 0, voxel_size: float = 1.0):
    """Decode n flow samples; latents are generated standardized and mapped back before decoding."""
    if n == 0:
        return []
    z = sample_lrf_latents(model, n, steps, seed)
    return ae.decode_labels(ae.destandardize(z), voxel_size)
