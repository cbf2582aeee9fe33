"""Modulated MLPs, parameter storage and the Adam optimizer.

Everything trains through these pieces. Tensors are float64 torch tensors and
gradients come from torch's reverse-mode autograd; the surface here keeps the
named-parameter view the rest of the package (and the checkpoint format)
relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "silu": F.silu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}
ACTIVATION_CODES = {"silu": 0, "tanh": 1, "identity": 2}


class DimensionError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class ParamStore:
    """Named float64 parameters, each with a gradient accumulator of the same shape."""

    def __init__(self) -> None:
        self._params: dict[str, torch.Tensor] = {}
        self.forward_calls = 0

    def add(self, name: str, values) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = torch.tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE, requires_grad=True)
        p.grad = torch.zeros_like(p)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self, prefix: str = "") -> list[torch.Tensor]:
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def num_values(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            else:
                p.grad.zero_()

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad.detach().numpy().copy()

    def backward(self, loss) -> None:
        """Accumulate d(loss)/d(param) into every accumulator.

        Repeated calls without ``zero_grad`` add up. A loss that does not
        depend on any parameter leaves the accumulators untouched.
        """
        if self.forward_calls == 0:
            raise BackwardError("backward called before any forward pass")
        if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
            raise BackwardError("loss must be a scalar tensor")
        if loss.requires_grad:
            loss.backward()
        for p in self._params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for n, p in self._params.items():
            if n.startswith(prefix):
                p.requires_grad_(flag)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.detach().numpy().copy() for n, p in self._params.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for n, v in arrays.items():
            store.add(n, v)
        return store


@dataclass(frozen=True)
class ModulatedMlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    conditioning_dim: int
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        dims = (self.input_dim, self.output_dim, self.conditioning_dim, *self.hidden_dims)
        if min(dims) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    def to_meta(self) -> list[float]:
        return [self.input_dim, self.output_dim, self.conditioning_dim,
                ACTIVATION_CODES[self.activation], *self.hidden_dims]

    @classmethod
    def from_meta(cls, meta) -> "ModulatedMlpSpec":
        meta = [int(v) for v in np.asarray(meta).ravel()]
        act = {v: k for k, v in ACTIVATION_CODES.items()}[meta[3]]
        return cls(meta[0], tuple(meta[4:]), meta[1], meta[2], act)


def init_mlp(spec: ModulatedMlpSpec, rng: np.random.Generator,
             store: ParamStore | None = None, prefix: str = "",
             zero_output: bool = False) -> ParamStore:
    """Create weights with U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and modulation maps start at 0."""
    store = ParamStore() if store is None else store
    n_layers = len(spec.layer_dims)
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if zero_output and i == n_layers - 1:
            w = np.zeros_like(w)
        store.add(f"{prefix}l{i}.w", w)
        store.add(f"{prefix}l{i}.b", np.zeros(fan_out))
        if i < n_layers - 1:
            # rows [0:h] give the scale offset s, rows [h:2h] the shift b
            store.add(f"{prefix}l{i}.mod", np.zeros((2 * fan_out, spec.conditioning_dim)))
    return store


def _as_batch(x, dim: int, what: str) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"{what} has shape {tuple(x.shape)}, expected last dim {dim}")
    return x, single


def forward_mlp(spec: ModulatedMlpSpec, params: ParamStore, x, cond, prefix: str = "") -> torch.Tensor:
    """Run the network on a vector or a batch of row vectors.

    Each hidden layer computes act((W h + c) * (1 + s) + b) with (s, b)
    a linear function of ``cond``.
    """
    x, single = _as_batch(x, spec.input_dim, "input")
    cond, _ = _as_batch(cond, spec.conditioning_dim, "cond")
    if cond.shape[0] != x.shape[0]:
        if cond.shape[0] != 1:
            raise DimensionError(f"batch mismatch: input {x.shape[0]} vs cond {cond.shape[0]}")
        cond = cond.expand(x.shape[0], -1)
    act = ACTIVATIONS[spec.activation]
    h = x
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        h = h @ params[f"{prefix}l{i}.w"].T + params[f"{prefix}l{i}.b"]
        if i < n_layers - 1:
            width = h.shape[1]
            mod = cond @ params[f"{prefix}l{i}.mod"].T
            h = act(h * (1.0 + mod[:, :width]) + mod[:, width:])
    params.forward_calls += 1
    return h[0] if single else h


class ModulatedMlp:
    """A spec bound to a parameter store under a name prefix."""

    def __init__(self, spec: ModulatedMlpSpec, params: ParamStore, prefix: str = ""):
        self.spec = spec
        self.params = params
        self.prefix = prefix

    def __call__(self, x, cond=None) -> torch.Tensor:
        if cond is None:
            n = 1 if torch.as_tensor(x).ndim == 1 else len(x)
            cond = torch.zeros(n, self.spec.conditioning_dim, dtype=DTYPE)
        return forward_mlp(self.spec, self.params, x, cond, self.prefix)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


class Adam:
    """Adaptive-moment updates over the trainable tensors of a ParamStore."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 groups: dict[str, float] | None = None):
        self.params = params
        self.state = OptimizerState(lr, betas[0], betas[1], eps)
        # per-prefix learning rates, e.g. {"emb.": 1e-2}
        groups = groups or {}
        buckets: dict[float, list[torch.Tensor]] = {}
        self._names = {}
        for name, p in params.items():
            if not p.requires_grad:
                continue
            rate = next((r for pre, r in groups.items() if name.startswith(pre)), lr)
            buckets.setdefault(rate, []).append(p)
            self._names[id(p)] = name
        self._opt = torch.optim.Adam(
            [{"params": ps, "lr": r} for r, ps in buckets.items()],
            lr=lr, betas=betas, eps=eps, foreach=False,
        )

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        st = self._opt.state.get(self.params[name], {})
        if not st:
            z = np.zeros(tuple(self.params[name].shape))
            return z, z.copy()
        return st["exp_avg"].numpy().copy(), st["exp_avg_sq"].numpy().copy()

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        for group in self._opt.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NonFiniteGradientError(self._names[id(p)])
        self._opt.step()
        self.state.step += 1
