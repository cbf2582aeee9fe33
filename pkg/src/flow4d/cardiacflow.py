"""CardiacFlow: one-step 3D+t shape generation from learnable, frame-conditioned initial values.

Each frame tau of a cycle is encoded with a periodic Gaussian kernel over the
M frames, fused with a per-subject embedding into a starting latent z0, and
carried to the frame latent z1 by a rectified flow.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import fileio
from .diffnet import DTYPE, Adam, DimensionError, ModulatedMlpSpec, ParamStore, forward_mlp, init_mlp
from .fm import FlowConfig, FlowModel, TimeSampler, integrate_euler
from .phantom import ShapeSequence

log = logging.getLogger(__name__)

SHRINKAGE = 1e-6
ENCODINGS = ("pgk", "scalar")
INIT_VALUES = ("learned", "noise")


class CardiacFlowError(ValueError):
    pass


def pgk_distance(m, tau, M: int):
    """Circular frame distance |mod(m - tau + M/2, M) - M/2| with a nonnegative mod."""
    if M < 2:
        raise CardiacFlowError(f"period M must be >= 2, got {M}")
    return np.abs(np.mod(np.asarray(m) - np.asarray(tau) + M / 2, M) - M / 2)


@dataclass
class PgkEncoding:
    M: int
    sigma: float
    tau: int
    values: np.ndarray


def pgk_encode(tau: int, M: int, sigma: float) -> PgkEncoding:
    if sigma <= 0:
        raise CardiacFlowError(f"kernel width must be positive, got {sigma}")
    d = pgk_distance(np.arange(1, M + 1), tau, M)
    values = np.exp(-d ** 2 / (2 * sigma ** 2)) / (np.sqrt(2 * np.pi) * sigma)
    return PgkEncoding(M, sigma, tau, values)


def frame_encoding(taus, M: int, sigma: float, kind: str = "pgk") -> np.ndarray:
    """(n, M) kernel encodings, or (n, 1) scalar tau/M for the ablation."""
    taus = np.atleast_1d(np.asarray(taus, dtype=np.int64))
    if np.any(taus < 1):
        raise CardiacFlowError("frame indices must be >= 1")
    if kind == "pgk":
        return np.stack([pgk_encode(int(t), M, sigma).values for t in taus])
    if kind == "scalar":
        return (((taus - 1) % M + 1) / M)[:, None].astype(np.float64)
    raise CardiacFlowError(f"unknown frame encoding {kind!r}")


def embedding_prior(embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Empirical Gaussian (mean, unbiased covariance + shrinkage*I) of the embedding table."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) < 2:
        raise CardiacFlowError("embedding prior needs at least 2 embeddings")
    cov = np.cov(e, rowvar=False, ddof=1).reshape(e.shape[1], e.shape[1])
    return e.mean(axis=0), cov + SHRINKAGE * np.eye(e.shape[1])


def sample_gaussian(mean, cov, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    root = v * np.sqrt(np.clip(w, 0.0, None))
    eps = rng.standard_normal(len(mean) if n is None else (n, len(mean)))
    return mean + eps @ root.T


@dataclass
class CardiacFlowConfig:
    M: int = 20
    sigma: float = 1.5
    embed_dim: int = 16
    fusion_hidden: tuple[int, ...] = (64, 64)
    flow: FlowConfig = field(default_factory=lambda: FlowConfig(hidden=(256, 256, 256), epochs=600))
    time_sampler: TimeSampler = field(default_factory=lambda: TimeSampler("beta", 0.1, 2.0))
    frame_encoding: str = "pgk"
    init_value: str = "learned"
    flow_frame_cond: bool = False
    train_embeddings: bool = True
    embed_init_std: float = 0.1

    def __post_init__(self):
        if self.frame_encoding not in ENCODINGS:
            raise CardiacFlowError(f"frame encoding must be one of {ENCODINGS}")
        if self.init_value not in INIT_VALUES:
            raise CardiacFlowError(f"initial value must be one of {INIT_VALUES}")

    @property
    def encoding_dim(self) -> int:
        return self.M if self.frame_encoding == "pgk" else 1


class CardiacFlowModel:
    def __init__(self, latent_dim: int, n_subjects: int, config: CardiacFlowConfig,
                 params: ParamStore | None = None, seed: int = 0):
        self.latent_dim = latent_dim
        self.config = config
        c = config
        flow_cfg = FlowConfig(**{**c.flow.__dict__, "extra_dim": c.encoding_dim if c.flow_frame_cond else 0})
        self.fusion_spec = ModulatedMlpSpec(c.embed_dim + c.encoding_dim, c.fusion_hidden, latent_dim, 1,
                                            flow_cfg.activation)
        fresh = params is None
        params = ParamStore() if fresh else params
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
        if fresh:
            init_mlp(self.fusion_spec, rng, params, "fuse.")
            params.add("emb.table", rng.normal(0.0, c.embed_init_std, (n_subjects, c.embed_dim)))
        self.params = params
        self.flow = FlowModel(latent_dim, flow_cfg, params, seed=int(rng.integers(2 ** 31)))
        self.prior: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def embeddings(self) -> torch.Tensor:
        return self.params["emb.table"]

    def encode_frames(self, taus) -> torch.Tensor:
        c = self.config
        return torch.as_tensor(frame_encoding(taus, c.M, c.sigma, c.frame_encoding))

    def initial_value(self, eps, taus) -> torch.Tensor:
        """z0 = f(eps, K(tau)); ``eps`` (n, k) or (k,), ``taus`` scalar or (n,)."""
        eps = eps if torch.is_tensor(eps) else torch.as_tensor(np.array(eps, dtype=np.float64))
        single = eps.ndim == 1
        eps = eps[None] if single else eps
        if eps.shape[1] != self.config.embed_dim:
            raise DimensionError(f"embedding has dim {eps.shape[1]}, expected {self.config.embed_dim}")
        enc = self.encode_frames(taus)
        if len(enc) != len(eps):
            enc = enc.expand(len(eps), -1) if len(enc) == 1 else enc
            eps = eps.expand(len(enc), -1) if len(eps) == 1 else eps
        x = torch.cat([eps, enc], dim=1)
        z0 = forward_mlp(self.fusion_spec, self.params, x, torch.zeros(len(x), 1, dtype=DTYPE), "fuse.")
        return z0[0] if single and z0.shape[0] == 1 else z0

    def velocity(self, z, t, taus=None) -> torch.Tensor:
        extra = self.encode_frames(taus) if self.config.flow_frame_cond else None
        return self.flow.velocity(z, t, extra)

    def fit_prior(self) -> None:
        if self.config.init_value == "noise":
            k = self.config.embed_dim
            self.prior = (np.zeros(k), np.eye(k))
        else:
            self.prior = embedding_prior(self.embeddings.detach().numpy())

    def generate_latents(self, seed: int, steps: int = 1, taus=None) -> np.ndarray:
        """Standardized frame latents for one sampled subject; one row per frame."""
        if self.prior is None:
            raise CardiacFlowError("model has no embedding prior; train or load it first")
        taus = np.arange(1, self.config.M + 1) if taus is None else np.asarray(taus)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
        eps = sample_gaussian(*self.prior, rng)
        with torch.no_grad():
            z0 = self.initial_value(np.broadcast_to(eps, (len(taus), len(eps))), taus).numpy()
        extra = self.encode_frames(taus) if self.config.flow_frame_cond else None
        return integrate_euler(self.flow, z0, steps, extra)

    # ------------------------------------------------------------ persistence
    def save(self, path) -> None:
        c = self.config
        if self.prior is None:
            self.fit_prior()
        entries = {
            "meta.kind.cardiacflow": np.array(1.0),
            "meta.cf": np.array([self.latent_dim, c.M, c.sigma, c.embed_dim, c.time_sampler.a, c.time_sampler.b,
                                 c.time_sampler.kind == "beta", ENCODINGS.index(c.frame_encoding),
                                 INIT_VALUES.index(c.init_value), c.flow_frame_cond, c.embed_init_std],
                                dtype=np.float64),
            "meta.fusion_hidden": np.array(c.fusion_hidden, dtype=np.float64),
            **self.flow.meta(),
            "prior.mean": self.prior[0],
            "prior.cov": self.prior[1],
            **self.params.state_dict(),
        }
        fileio.write_checkpoint(path, entries)

    @classmethod
    def load(cls, path) -> "CardiacFlowModel":
        e = fileio.read_checkpoint(path)
        if "meta.kind.cardiacflow" not in e:
            raise fileio.FormatError(f"{path}: not a CardiacFlow checkpoint")
        d, M, sigma, k, a, b, beta, enc, init, ffc, estd = e["meta.cf"]
        flow_spec = ModulatedMlpSpec.from_meta(e["meta.flow.spec"])
        time_dim, _, steps = (int(v) for v in e["meta.flow.train"])
        cfg = CardiacFlowConfig(
            M=int(M), sigma=float(sigma), embed_dim=int(k),
            fusion_hidden=tuple(int(h) for h in e["meta.fusion_hidden"]),
            flow=FlowConfig(hidden=flow_spec.hidden_dims, time_dim=time_dim, activation=flow_spec.activation,
                            steps=steps),
            time_sampler=TimeSampler("beta" if beta else "uniform", float(a), float(b)),
            frame_encoding=ENCODINGS[int(enc)], init_value=INIT_VALUES[int(init)],
            flow_frame_cond=bool(ffc), embed_init_std=float(estd),
        )
        params = ParamStore.from_arrays(
            {n: v for n, v in e.items() if not n.startswith(("meta.", "prior."))})
        model = cls(int(d), len(e["emb.table"]), cfg, params)
        model.prior = (e["prior.mean"], e["prior.cov"])
        return model


def cardiacflow_loss(model: CardiacFlowModel, eps, taus, z1, t) -> torch.Tensor:
    """Batch mean of ||v_t(z_t) - (z1 - z0)||^2 with z0 = f(eps, K(tau)) differentiable."""
    z0 = model.initial_value(eps, taus)
    z1 = torch.as_tensor(z1, dtype=DTYPE)
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1, 1)
    zt = (1.0 - t) * z0 + t * z1
    resid = model.velocity(zt, t.reshape(-1), taus) - (z1 - z0)
    return (resid ** 2).sum(dim=1).mean()


def train_cardiacflow(latents, config: CardiacFlowConfig | None = None, seed: int = 0,
                      history: list | None = None) -> CardiacFlowModel:
    """Train on standardized frame latents of shape (subjects, M, d)."""
    config = config or CardiacFlowConfig()
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 3 or len(z) == 0:
        raise CardiacFlowError("latents must have shape (subjects, M, d)")
    if z.shape[1] != config.M:
        raise CardiacFlowError(f"sequences have {z.shape[1]} frames, expected M={config.M}")
    n_subj, M, d = z.shape
    model = CardiacFlowModel(d, n_subj, config, seed=seed)
    learned = config.init_value == "learned"
    if not (learned and config.train_embeddings):
        model.params.set_trainable("emb.", False)
    opt = Adam(model.params, lr=config.flow.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    bs = config.flow.batch_size
    iters = max(1, int(np.ceil(n_subj * M / bs)))
    history = [] if history is None else history
    for epoch in range(config.flow.epochs):
        total = 0.0
        for _ in range(iters):
            s = rng.integers(n_subj, size=bs)
            taus = rng.integers(1, M + 1, size=bs)
            t = config.time_sampler.sample(rng, bs)
            if learned:
                eps = model.embeddings[torch.as_tensor(s)]
            else:
                eps = rng.standard_normal((bs, config.embed_dim))
            opt.zero_grad()
            loss = cardiacflow_loss(model, eps, taus, z[s, taus - 1], t)
            model.params.backward(loss)
            opt.step()
            total += loss.item()
        history.append(total / iters)
        if (epoch + 1) % 50 == 0:
            log.info("cardiacflow epoch %d loss %.5f", epoch + 1, history[-1])
    model.fit_prior()
    return model


def generate_sequence(model: CardiacFlowModel, ae, seed: int, steps: int = 1, voxel_size: float = 1.0
                      ) -> ShapeSequence:
    z = model.generate_latents(seed, steps)
    return ShapeSequence(ae.decode_labels(ae.destandardize(z), voxel_size))
