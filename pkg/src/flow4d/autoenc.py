"""Shape autoencoder: label grid -> flat latent -> per-voxel class probabilities.

The encoder sees per-patch class fractions. The decoder predicts a coarse
per-class logit field (stride ``field_stride``) that is trilinearly
upsampled to voxel resolution, so class boundaries fall between coarse
samples wherever the smooth fields cross.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import fileio
from .diffnet import ACTIVATION_CODES, DTYPE, Adam, DimensionError, ModulatedMlp, ModulatedMlpSpec, ParamStore, init_mlp
from .phantom import LabelGrid

log = logging.getLogger(__name__)

NUM_CLASSES = 6


def to_patches(x: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, nx, ny, nz, C) -> (B, P, patch**3, C) with patches in x-major order."""
    b, nx, ny, nz, c = x.shape
    x = x.reshape(b, nx // patch, patch, ny // patch, patch, nz // patch, patch, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, -1, patch ** 3, c)


def from_patches(x: torch.Tensor, dims, patch: int) -> torch.Tensor:
    """Inverse of to_patches."""
    b, _, _, c = x.shape
    px, py, pz = (n // patch for n in dims)
    x = x.reshape(b, px, py, pz, patch, patch, patch, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, *dims, c)


def linear_upsample_matrix(n_fine: int, n_coarse: int) -> torch.Tensor:
    """(n_fine, n_coarse) linear interpolation weights, cell-centred (align_corners=False)."""
    pos = (np.arange(n_fine) + 0.5) * n_coarse / n_fine - 0.5
    pos = np.clip(pos, 0.0, n_coarse - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_coarse - 1)
    frac = pos - lo
    m = np.zeros((n_fine, n_coarse))
    np.add.at(m, (np.arange(n_fine), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_fine), hi), frac)
    return torch.as_tensor(m, dtype=DTYPE)


def upsample(x: torch.Tensor, mats) -> torch.Tensor:
    """Separable trilinear upsampling of (B, C, X, Y, Z) by three interpolation matrices."""
    ux, uy, uz = mats
    x = x @ uz.T
    x = (x.transpose(-1, -2) @ uy.T).transpose(-1, -2)
    b, c, nx, ny, nz = x.shape
    x = (ux @ x.reshape(b, c, nx, ny * nz)).reshape(b, c, -1, ny, nz)
    return x


def one_hot(labels, num_classes: int) -> torch.Tensor:
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return F.one_hot(lab, num_classes).to(DTYPE)


def stack_labels(grids) -> np.ndarray:
    return np.stack([g.labels if isinstance(g, LabelGrid) else g for g in grids])


@dataclass
class AeConfig:
    latent_channels: int = 4
    hidden: int = 128
    patch: int = 4
    block: int = 2
    field_stride: int = 2
    activation: str = "silu"
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3


def neighbourhoods(x: torch.Tensor, size: int, step: int) -> torch.Tensor:
    """(B, C, X, Y, Z) zero-padded by one cell -> (B, cells, C * size**3) sliding windows."""
    x = F.pad(x, (1, 1, 1, 1, 1, 1))
    for dim in (2, 3, 4):
        x = x.unfold(dim, size, step)
    b, c, nx, ny, nz = x.shape[:5]
    return x.permute(0, 2, 3, 4, 1, 5, 6, 7).reshape(b, nx * ny * nz, -1)


def block_centres(block_grid) -> torch.Tensor:
    """(blocks, 3) block centres scaled to [-1, 1], x-major order."""
    axes = [(np.arange(n) + 0.5) / n * 2 - 1 for n in block_grid]
    return torch.as_tensor(np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3), dtype=DTYPE)


def blocks_to_field(out: torch.Tensor, block_grid, cells: int, channels: int) -> torch.Tensor:
    """(B * blocks, channels * cells**3) per-block outputs -> (B, channels, X, Y, Z) field."""
    bx, by, bz = block_grid
    out = out.reshape(-1, bx, by, bz, channels, cells, cells, cells).permute(0, 4, 1, 5, 2, 6, 3, 7)
    return out.reshape(len(out), channels, bx * cells, by * cells, bz * cells)


class AutoencoderModel:
    """Block-local shape autoencoder with a flat latent of ``blocks * latent_channels`` values.

    The grid is tiled into blocks of ``block * patch`` voxels. One MLP, shared
    by every block, maps the patch class fractions around a block to that
    block's latent channels; a second shared MLP maps the latents of the
    3x3x3 surrounding blocks to the block's coarse logits. A per-location
    bias field carries the mean shape.
    """

    def __init__(self, dims, config: AeConfig, params: ParamStore | None = None, seed: int = 0):
        self.dims = tuple(int(n) for n in dims)
        self.config = c = config
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
        C, h, k = NUM_CLASSES, c.hidden, c.latent_channels
        self.enc_spec = ModulatedMlpSpec(C * (c.block + 2) ** 3 + 3, (h, h), k, 1, c.activation)
        self.dec_spec = ModulatedMlpSpec(27 * k + 3, (h, h), C * self.cells ** 3, 1, c.activation)
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamStore()
            init_mlp(self.enc_spec, rng, params, "enc.")
            init_mlp(self.dec_spec, rng, params, "dec.")
            params.add("dec.field_bias", np.zeros((C, *self.coarse)))
        self.params = params
        self.encoder = ModulatedMlp(self.enc_spec, params, "enc.")
        self.decoder = ModulatedMlp(self.dec_spec, params, "dec.")
        self.latent_mean = np.zeros(self.latent_dim)
        self.latent_std = np.ones(self.latent_dim)
        # training-set mean of the patch fractions, subtracted before encoding
        self.feature_mean = np.zeros((C, *self.patch_grid))

    @property
    def latent_dim(self) -> int:
        return self.n_blocks * self.config.latent_channels

    def _check(self, labels: np.ndarray) -> None:
        if labels.shape[1:] != self.dims:
            raise DimensionError(f"grid dims {labels.shape[1:]} do not match model dims {self.dims}")

    def patch_fractions(self, labels: np.ndarray, chunk: int = 64) -> torch.Tensor:
        """(B, C, px, py, pz) class fraction of every patch."""
        self._check(labels)
        p = self.config.patch
        parts = []
        for i in range(0, len(labels), chunk):
            x = to_patches(one_hot(labels[i:i + chunk], NUM_CLASSES), p).mean(dim=2)
            parts.append(x.reshape(len(x), *self.patch_grid, NUM_CLASSES).permute(0, 4, 1, 2, 3))
        return torch.cat(parts)

    def features(self, labels: np.ndarray) -> torch.Tensor:
        """Centred patch fractions: the encoder input."""
        return self.patch_fractions(labels) - torch.as_tensor(self.feature_mean)

    def encoder_inputs(self, feats: torch.Tensor) -> torch.Tensor:
        c = self.config
        x = neighbourhoods(feats, c.block + 2, c.block)
        return torch.cat([x, self._pos.expand(len(x), -1, -1)], dim=2)

    def encode_features(self, feats: torch.Tensor) -> torch.Tensor:
        x = self.encoder_inputs(feats)
        b = len(x)
        z = self.encoder(x.reshape(b * self.n_blocks, -1)).reshape(b, self.n_blocks, -1)
        # flat layout: channel-major, blocks in x-major order
        return z.permute(0, 2, 1).reshape(b, -1)

    def encode_tensor(self, labels: np.ndarray) -> torch.Tensor:
        return self.encode_features(self.features(labels))

    def class_logits(self, z) -> torch.Tensor:
        """Logits with classes first: (B, C, nx, ny, nz)."""
        z = torch.as_tensor(z, dtype=DTYPE)
        if z.ndim == 1:
            z = z[None]
        if z.shape[1] != self.latent_dim:
            raise DimensionError(f"latent has dim {z.shape[1]}, expected {self.latent_dim}")
        b, k, n = len(z), self.config.latent_channels, self.cells
        x = neighbourhoods(z.reshape(b, k, *self.block_grid), 3, 1)
        x = torch.cat([x, self._pos.expand(b, -1, -1)], dim=2)
        out = self.decoder(x.reshape(b * self.n_blocks, -1))
        coarse = blocks_to_field(out, self.block_grid, n, NUM_CLASSES) + self.params["dec.field_bias"]
        if self.config.field_stride == 1:
            return coarse
        return upsample(coarse, self._up)

    def logits(self, z) -> torch.Tensor:
        """Logits with classes last: (B, nx, ny, nz, C)."""
        return self.class_logits(z).permute(0, 2, 3, 4, 1)

    def encode(self, grids, batch: int = 64) -> np.ndarray:
        """Latent vector(s); a single LabelGrid gives shape (d,), a list gives (n, d)."""
        single = isinstance(grids, LabelGrid)
        labels = stack_labels([grids] if single else grids)
        with torch.no_grad():
            z = np.concatenate([self.encode_tensor(labels[i:i + batch]).numpy()
                                for i in range(0, len(labels), batch)])
        return z[0] if single else z

    def decode(self, z, voxel_size: float = 1.0):
        """(probabilities, argmax grids) for a latent or batch of latents."""
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ValueError("latent contains non-finite values")
        single = z.ndim == 1
        with torch.no_grad():
            probs = torch.softmax(self.logits(z), dim=-1).numpy()
        grids = [LabelGrid(np.argmax(p, axis=-1).astype(np.uint8), voxel_size) for p in probs]
        return (probs[0], grids[0]) if single else (probs, grids)

    def decode_labels(self, z, voxel_size: float = 1.0, batch: int = 32) -> list[LabelGrid]:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if not np.all(np.isfinite(z)):
            raise ValueError("latent contains non-finite values")
        out = []
        with torch.no_grad():
            for i in range(0, len(z), batch):
                lab = torch.argmax(self.class_logits(z[i:i + batch]), dim=1).numpy().astype(np.uint8)
                out += [LabelGrid(x, voxel_size) for x in lab]
        return out

    def standardize(self, z) -> np.ndarray:
        return (np.asarray(z) - self.latent_mean) / self.latent_std

    def destandardize(self, z) -> np.ndarray:
        return np.asarray(z) * self.latent_std + self.latent_mean

    # ------------------------------------------------------------ persistence
    def save(self, path) -> None:
        c = self.config
        meta = {
            "meta.kind.autoencoder": np.array(1.0),
            "meta.dims": np.array(self.dims, dtype=np.float64),
            "meta.config": np.array([c.latent_channels, c.hidden, c.patch, c.block, c.field_stride,
                                     ACTIVATION_CODES[c.activation]], dtype=np.float64),
            "stats.latent_mean": self.latent_mean,
            "stats.latent_std": self.latent_std,
            "stats.feature_mean": self.feature_mean,
        }
        fileio.write_checkpoint(path, {**meta, **self.params.state_dict()})

    @classmethod
    def load(cls, path) -> "AutoencoderModel":
        e = fileio.read_checkpoint(path)
        if "meta.kind.autoencoder" not in e:
            raise fileio.FormatError(f"{path}: not an autoencoder checkpoint")
        k, h, p, blk, fs, act = (int(v) for v in e["meta.config"])
        act_name = {v: n for n, v in ACTIVATION_CODES.items()}[act]
        cfg = AeConfig(latent_channels=k, hidden=h, patch=p, block=blk, field_stride=fs, activation=act_name)
        params = ParamStore.from_arrays({n: v for n, v in e.items() if not n.startswith(("meta.", "stats."))})
        model = cls(tuple(int(v) for v in e["meta.dims"]), cfg, params)
        model.latent_mean = e["stats.latent_mean"]
        model.latent_std = e["stats.latent_std"]
        model.feature_mean = e["stats.feature_mean"]
        return model


def voxel_cross_entropy(class_logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean per-voxel cross-entropy; logits (B, C, ...) against integer labels (B, ...)."""
    return F.cross_entropy(class_logits, torch.as_tensor(np.asarray(targets), dtype=torch.long))


def reconstruction_loss(model: AutoencoderModel, labels: np.ndarray) -> torch.Tensor:
    """Mean per-voxel cross-entropy of decode(encode(x)) against x."""
    return voxel_cross_entropy(model.class_logits(model.encode_tensor(labels)), labels)


def train_autoencoder(grids, config: AeConfig | None = None, seed: int = 0, history: list | None = None
                      ) -> AutoencoderModel:
    config = config or AeConfig()
    if len(grids) == 0:
        raise ValueError("cannot train an autoencoder on an empty dataset")
    labels = stack_labels(grids)
    voxel_size = grids[0].voxel_size if isinstance(grids[0], LabelGrid) else 1.0
    model = AutoencoderModel(labels.shape[1:], config, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    opt = Adam(model.params, lr=config.lr)
    history = [] if history is None else history
    model.feature_mean = model.patch_fractions(labels).mean(dim=0).numpy()
    feats = model.features(labels)
    # start the decoder at the mean shape: output bias = log class frequency per coarse cell
    fs = config.field_stride
    freq = sum(one_hot(labels[i:i + 64], NUM_CLASSES).sum(dim=0) for i in range(0, len(labels), 64))
    freq = (freq / len(labels)).permute(3, 0, 1, 2)
    cx, cy, cz = model.coarse
    freq = freq.reshape(NUM_CLASSES, cx, fs, cy, fs, cz, fs).mean(dim=(2, 4, 6))
    with torch.no_grad():
        model.params["dec.field_bias"].copy_(torch.log(freq.clamp_min(1e-3)))
    targets = torch.as_tensor(labels, dtype=torch.long)
    for epoch in range(config.epochs):
        order = torch.as_tensor(rng.permutation(len(labels)))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            opt.zero_grad()
            loss = voxel_cross_entropy(model.class_logits(model.encode_features(feats[idx])), targets[idx])
            model.params.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(labels))
        log.info("ae epoch %d loss %.5f", epoch + 1, history[-1])
    z = model.encode([LabelGrid(x, voxel_size) for x in labels])
    model.latent_mean = z.mean(axis=0)
    model.latent_std = np.maximum(z.std(axis=0), 1e-8)
    return model
