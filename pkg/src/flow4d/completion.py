"""Label completion: dense 3D labels from rasterized sparse multi-view slices."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import fileio
from .autoenc import (NUM_CLASSES, block_centres, blocks_to_field, linear_upsample_matrix, neighbourhoods, one_hot,
                      to_patches, upsample, voxel_cross_entropy)
from .diffnet import ACTIVATION_CODES, Adam, DimensionError, ModulatedMlp, ModulatedMlpSpec, ParamStore, init_mlp
from .fm import FlowModel, sample_lrf_latents
from .phantom import LabelGrid, ShapeSequence, SliceSimConfig, SliceStack, extract_slices, rasterize_slices

log = logging.getLogger(__name__)

INPUT_CLASSES = NUM_CLASSES + 1   # six labels plus "unknown"


class CompletionError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class MixSpec:
    real_fraction: float = 0.25
    synthetic_fraction: float = 0.75
    resample_each_epoch: bool = True

    def __post_init__(self):
        if min(self.real_fraction, self.synthetic_fraction) < 0:
            raise CompletionError("mix fractions must be nonnegative")
        if abs(self.real_fraction + self.synthetic_fraction - 1.0) > 1e-12:
            raise CompletionError("mix fractions must sum to 1")

    def counts(self, batch_size: int) -> tuple[int, int]:
        real = round_half_up(self.real_fraction * batch_size)
        return real, batch_size - real

    @classmethod
    def parse(cls, text: str) -> "MixSpec":
        real, synth = (float(v) for v in text.split(":"))
        return cls(real, synth)


class LrfSource:
    """Synthetic shapes from a trained rectified flow and the autoencoder it lives in."""

    def __init__(self, flow: FlowModel, ae, steps: int = 100):
        self.flow = flow
        self.ae = ae
        self.steps = steps
        self.calls = 0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        self.calls += 1
        z = sample_lrf_latents(self.flow, n, self.steps, int(rng.integers(2 ** 63)))
        return np.stack([g.labels for g in self.ae.decode_labels(self.ae.destandardize(z))])


@dataclass
class CompletionConfig:
    latent_channels: int = 8
    hidden: int = 128
    patch: int = 4
    block: int = 2
    field_stride: int = 2
    activation: str = "silu"
    epochs: int = 40
    batch_size: int = 8
    samples_per_epoch: int | None = None
    lr: float = 1e-3


class CompletionModel:
    """Block-local encoder-decoder over 7-channel inputs (six labels plus unknown).

    Each block is encoded from the patch class fractions around it. Its decoder
    sees the latents of the 3x3x3 surrounding blocks plus, as a skip path,
    the block's own input features. A learnable per-class gain adds the
    known input labels straight onto the output logits.
    """

    def __init__(self, dims, config: CompletionConfig | None = None, params: ParamStore | None = None,
                 seed: int = 0):
        self.dims = tuple(int(n) for n in dims)
        self.config = c = config or CompletionConfig()
        span = c.patch * c.block
        if any(n % span for n in self.dims) or span % c.field_stride:
            raise DimensionError(f"grid dims {self.dims} not divisible by block size {span} "
                                 f"(patch {c.patch} x block {c.block}) and stride {c.field_stride}")
        self.patch_grid = tuple(n // c.patch for n in self.dims)
        self.block_grid = tuple(n // span for n in self.dims)
        self.n_blocks = int(np.prod(self.block_grid))
        self.cells = span // c.field_stride
        self.coarse = tuple(n // c.field_stride for n in self.dims)
        self._up = [linear_upsample_matrix(n, m) for n, m in zip(self.dims, self.coarse)]
        self._pos = block_centres(self.block_grid)
        h, k = c.hidden, c.latent_channels
        n_in = INPUT_CLASSES * (c.block + 2) ** 3
        self.enc_spec = ModulatedMlpSpec(n_in + 3, (h, h), k, 1, c.activation)
        self.dec_spec = ModulatedMlpSpec(27 * k + n_in + 3, (h, h), NUM_CLASSES * self.cells ** 3, 1,
                                         c.activation)
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore()
            init_mlp(self.enc_spec, rng, params, "enc.")
            init_mlp(self.dec_spec, rng, params, "dec.")
            params.add("dec.field_bias", np.zeros((NUM_CLASSES, *self.coarse)))
            params.add("skip.gain", np.zeros(NUM_CLASSES))
        self.params = params
        self.encoder = ModulatedMlp(self.enc_spec, params, "enc.")
        self.decoder = ModulatedMlp(self.dec_spec, params, "dec.")

    def class_logits(self, sparse: np.ndarray) -> torch.Tensor:
        """(B, C, X, Y, Z) logits for a batch of sparse label grids."""
        sparse = np.asarray(sparse)
        if sparse.shape[1:] != self.dims:
            raise DimensionError(f"input dims {sparse.shape[1:]} do not match model dims {self.dims}")
        b, c = len(sparse), self.config
        onehot = one_hot(sparse, INPUT_CLASSES)                              # (B, X, Y, Z, 7)
        frac = to_patches(onehot, c.patch).mean(dim=2)
        frac = frac.reshape(b, *self.patch_grid, INPUT_CLASSES).permute(0, 4, 1, 2, 3)
        pos = self._pos.expand(b, -1, -1)
        local = neighbourhoods(frac, c.block + 2, c.block)                  # (B, blocks, n_in)
        z = self.encoder(torch.cat([local, pos], dim=2).reshape(b * self.n_blocks, -1))
        z = z.reshape(b, self.n_blocks, -1).permute(0, 2, 1).reshape(b, -1, *self.block_grid)
        x = torch.cat([neighbourhoods(z, 3, 1), local, pos], dim=2)
        out = self.decoder(x.reshape(b * self.n_blocks, -1))
        coarse = blocks_to_field(out, self.block_grid, self.cells, NUM_CLASSES) + self.params["dec.field_bias"]
        logits = upsample(coarse, self._up) if c.field_stride > 1 else coarse
        known = onehot[..., :NUM_CLASSES].permute(0, 4, 1, 2, 3)
        return logits + self.params["skip.gain"].reshape(1, -1, 1, 1, 1) * known

    def complete_labels(self, sparse: np.ndarray, batch: int = 16) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(sparse), batch):
                logits = self.class_logits(sparse[i:i + batch])
                out.append(torch.argmax(logits, dim=1).numpy().astype(np.uint8))
        return np.concatenate(out)

    def save(self, path) -> None:
        c = self.config
        meta = {
            "meta.kind.completion": np.array(1.0),
            "meta.dims": np.array(self.dims, dtype=np.float64),
            "meta.config": np.array([c.latent_channels, c.hidden, c.patch, c.block, c.field_stride,
                                     ACTIVATION_CODES[c.activation]], dtype=np.float64),
        }
        fileio.write_checkpoint(path, {**meta, **self.params.state_dict()})

    @classmethod
    def load(cls, path) -> "CompletionModel":
        e = fileio.read_checkpoint(path)
        if "meta.kind.completion" not in e:
            raise fileio.FormatError(f"{path}: not a completion checkpoint")
        k, h, p, blk, fs, act = (int(v) for v in e["meta.config"])
        act_name = {v: n for n, v in ACTIVATION_CODES.items()}[act]
        cfg = CompletionConfig(latent_channels=k, hidden=h, patch=p, block=blk, field_stride=fs, activation=act_name)
        params = ParamStore.from_arrays({n: v for n, v in e.items() if not n.startswith("meta.")})
        return cls(tuple(int(v) for v in e["meta.dims"]), cfg, params)


def _sparse_labels(sparse) -> np.ndarray:
    if isinstance(sparse, LabelGrid):
        return sparse.labels[None]
    if isinstance(sparse, SliceStack):
        raise CompletionError("rasterize the slice stack first")
    return np.stack([s.labels if isinstance(s, LabelGrid) else s for s in sparse])


def complete(model: CompletionModel, sparse: LabelGrid) -> LabelGrid:
    return LabelGrid(model.complete_labels(_sparse_labels(sparse))[0], sparse.voxel_size)


def complete_sequence(model: CompletionModel, frames, M: int | None = None) -> ShapeSequence:
    """Complete every frame of a 2D+t acquisition (slice stacks or rasterized grids)."""
    frames = list(frames)
    if M is not None and len(frames) != M:
        raise CompletionError(f"got {len(frames)} frames, expected M={M}")
    grids = [rasterize_slices(f, model.dims) if isinstance(f, SliceStack) else f for f in frames]
    labels = model.complete_labels(_sparse_labels(grids))
    return ShapeSequence([LabelGrid(l, g.voxel_size) for l, g in zip(labels, grids)])


def corrupt(labels: np.ndarray, slicesim: SliceSimConfig, rng: np.random.Generator) -> np.ndarray:
    grid = LabelGrid(labels)
    return rasterize_slices(extract_slices(grid, slicesim, rng), grid.dims).labels


def train_completion(real, mix: MixSpec | None = None, slicesim: SliceSimConfig | None = None,
                     config: CompletionConfig | None = None, seed: int = 0, source: LrfSource | None = None,
                     history: list | None = None) -> CompletionModel:
    mix = mix or MixSpec()
    slicesim = slicesim or SliceSimConfig()
    config = config or CompletionConfig()
    real = np.stack([g.labels if isinstance(g, LabelGrid) else g for g in real])
    if len(real) == 0:
        raise CompletionError("empty real training set")
    if mix.synthetic_fraction > 0 and source is None:
        raise CompletionError("synthetic fraction > 0 requires a trained rectified flow")
    n_real, n_syn = mix.counts(config.batch_size)
    model = CompletionModel(real.shape[1:], config, seed=seed)
    opt = Adam(model.params, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    per_epoch = config.samples_per_epoch or len(real)
    n_batches = max(1, int(np.ceil(per_epoch / config.batch_size)))
    pool = None
    if n_syn and not mix.resample_each_epoch:
        pool = source.sample(n_syn * n_batches, rng)
    history = [] if history is None else history
    order, cursor = rng.permutation(len(real)), 0
    for epoch in range(config.epochs):
        total = 0.0
        for bi in range(n_batches):
            idx = []
            for _ in range(n_real):
                if cursor == len(order):
                    order, cursor = rng.permutation(len(real)), 0
                idx.append(order[cursor])
                cursor += 1
            parts = [real[idx]] if idx else []
            if n_syn:
                parts.append(pool[bi * n_syn:(bi + 1) * n_syn] if pool is not None else source.sample(n_syn, rng))
            target = np.concatenate(parts)
            sparse = np.stack([corrupt(x, slicesim, rng) for x in target])
            opt.zero_grad()
            loss = voxel_cross_entropy(model.class_logits(sparse), torch.as_tensor(target, dtype=torch.long))
            model.params.backward(loss)
            opt.step()
            total += loss.item()
        history.append(total / n_batches)
        log.info("completion epoch %d loss %.5f", epoch + 1, history[-1])
    return model
