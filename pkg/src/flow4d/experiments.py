"""Phantom benchmarks shared by the CLI and the acceptance suite.

Dataset builders, the corrupted-slice completion protocol, generation
scoring and the CardiacFlow ablation grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autoenc import AeConfig, AutoencoderModel, train_autoencoder
from .cardiacflow import CardiacFlowConfig, CardiacFlowModel, generate_sequence, train_cardiacflow
from .completion import CompletionConfig, CompletionModel, LrfSource, MixSpec, corrupt, train_completion
from .fm import FlowConfig, TimeSampler, train_lrf
from .metrics import (UndefinedMetricError, cycle_dsc, hd95, mean_foreground_dsc, paired_ttest, vfid,
                      volume_curve)
from .phantom import (DEFAULT_DIMS, FOREGROUND, LabelGrid, ShapeSequence, SliceSimConfig, generate_subject,
                      render_frame, render_sequence)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ datasets
def phantom_sequences(subject_ids, M: int, dims=DEFAULT_DIMS) -> list[ShapeSequence]:
    return [render_sequence(generate_subject(int(s), dims), M) for s in subject_ids]


def phantom_frames(subject_ids, M: int, dims=DEFAULT_DIMS, frames=None) -> list[LabelGrid]:
    """Frames of each subject; ``frames`` defaults to the whole cycle."""
    frames = range(1, M + 1) if frames is None else frames
    out = []
    for s in subject_ids:
        subj = generate_subject(int(s), dims)
        out += [render_frame(subj, int(t), M) for t in frames]
    return out


def sequence_latents(ae: AutoencoderModel, seqs) -> np.ndarray:
    """Standardized latents, shape (subjects, M, d)."""
    return np.stack([ae.standardize(ae.encode(list(s.frames))) for s in seqs])


def frame_latents(ae: AutoencoderModel, grids) -> np.ndarray:
    return ae.standardize(ae.encode(list(grids)))


# ---------------------------------------------------------------- completion
def case_hd95(pred: LabelGrid, ref: LabelGrid) -> float:
    """Mean foreground-class HD95 of one case.

    A class present on one side only gets the grid diagonal, the largest
    distance the grid admits; a class absent on both sides is skipped.
    """
    diag = float(np.linalg.norm(np.array(ref.dims) - 1)) * ref.voxel_size
    vals = []
    for c in FOREGROUND:
        try:
            vals.append(hd95(pred, ref, c))
        except UndefinedMetricError:
            if (pred.labels == c).any() or (ref.labels == c).any():
                vals.append(diag)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class CompletionTestSet:
    targets: np.ndarray      # (cases, X, Y, Z)
    sparse: np.ndarray       # (cases, draws, X, Y, Z)

    @property
    def cases(self) -> int:
        return len(self.targets)


def completion_test_set(subject_ids, M: int, dims=DEFAULT_DIMS, draws: int = 10,
                        slicesim: SliceSimConfig | None = None, seed: int = 0) -> CompletionTestSet:
    """One frame per held-out subject, cycling through the phases; ``draws`` corruptions each."""
    slicesim = slicesim or SliceSimConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    targets, sparse = [], []
    for i, s in enumerate(subject_ids):
        g = render_frame(generate_subject(int(s), dims), 1 + (i * 7) % M, M)
        targets.append(g.labels)
        sparse.append(np.stack([corrupt(g.labels, slicesim, rng) for _ in range(draws)]))
    return CompletionTestSet(np.stack(targets), np.stack(sparse))


def evaluate_completion(model: CompletionModel, test: CompletionTestSet) -> dict[str, np.ndarray]:
    """Per-case HD95 and DSC, each averaged over the corruption draws."""
    h, d = np.zeros(test.cases), np.zeros(test.cases)
    for i in range(test.cases):
        ref = LabelGrid(test.targets[i])
        preds = model.complete_labels(test.sparse[i])
        h[i] = np.mean([case_hd95(LabelGrid(p), ref) for p in preds])
        d[i] = np.mean([mean_foreground_dsc(LabelGrid(p), ref) for p in preds])
    return {"hd95": h, "dsc": d}


@dataclass
class AugmentationSetup:
    pool_subjects: tuple[int, ...] = tuple(range(16))
    test_subjects: tuple[int, ...] = tuple(range(5000, 5048))
    M: int = 20
    dims: tuple[int, int, int] = DEFAULT_DIMS
    draws: int = 10
    lambda_max: float = 2.0
    ae: AeConfig = field(default_factory=lambda: AeConfig(epochs=40, batch_size=8))
    lrf: FlowConfig = field(default_factory=lambda: FlowConfig(epochs=300))
    lrf_steps: int = 100
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    seeds: tuple[int, ...] = (0, 1, 2)


def augmentation_benefit(setup: AugmentationSetup, progress=None) -> dict:
    """Completion trained on the real pool alone vs a real/synthetic mix, paired on the same test cases.

    The autoencoder and rectified flow only ever see the real pool.
    """
    say = progress or (lambda msg: log.info(msg))
    slicesim = SliceSimConfig(lambda_max=setup.lambda_max)
    real = phantom_frames(setup.pool_subjects, setup.M, setup.dims)
    say(f"pool: {len(real)} real frames")
    ae = train_autoencoder(real, setup.ae, seed=0)
    flow = train_lrf(frame_latents(ae, real), TimeSampler("uniform"), setup.lrf, seed=0)
    source = LrfSource(flow, ae, setup.lrf_steps)
    test = completion_test_set(setup.test_subjects, setup.M, setup.dims, setup.draws, slicesim)
    result = {"real_only": [], "mixed": []}
    for seed in setup.seeds:
        for key, mix in (("real_only", MixSpec(1.0, 0.0)), ("mixed", MixSpec(0.25, 0.75))):
            model = train_completion(real, mix, slicesim, setup.completion, seed=seed,
                                     source=source if mix.synthetic_fraction else None)
            scores = evaluate_completion(model, test)
            result[key].append(scores)
            say(f"seed {seed} {key}: HD95 {scores['hd95'].mean():.4f} DSC {scores['dsc'].mean():.4f}")
    per_case = {k: np.mean([s["hd95"] for s in v], axis=0) for k, v in result.items()}
    t, p = paired_ttest(per_case["mixed"], per_case["real_only"])
    return {
        "hd95_real_only": float(per_case["real_only"].mean()),
        "hd95_mixed": float(per_case["mixed"].mean()),
        "dsc_real_only": float(np.mean([s["dsc"].mean() for s in result["real_only"]])),
        "dsc_mixed": float(np.mean([s["dsc"].mean() for s in result["mixed"]])),
        "t": t, "p": p, "per_seed": result,
    }


# ---------------------------------------------------------------- generation
def generate_sequences(model: CardiacFlowModel, ae: AutoencoderModel, n: int, seed: int, steps: int = 1
                       ) -> list[ShapeSequence]:
    return [generate_sequence(model, ae, seed * 100_003 + i, steps) for i in range(n)]


def score_generation(gen: list[ShapeSequence], ref: list[ShapeSequence]) -> dict[str, float]:
    curves = np.stack([volume_curve(s) for s in gen])
    ref_curves = np.stack([volume_curve(s) for s in ref])
    return {"vfid": vfid(curves, ref_curves), "cycledsc": float(np.mean([cycle_dsc(s) for s in gen]))}


VARIANTS = {
    "full": {},
    "scalar-enc": {"frame_encoding": "scalar"},
    "noise-init": {"init_value": "noise"},
    "uniform-t": {"time_sampler": TimeSampler("uniform")},
}


def variant_config(base: CardiacFlowConfig, variant: str) -> CardiacFlowConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(base, **VARIANTS[variant])


def ablate_cardiacflow(latents: np.ndarray, ae: AutoencoderModel, reference: list[ShapeSequence],
                       base: CardiacFlowConfig, seeds, n_generate: int = 50, steps: int = 1,
                       variants=tuple(VARIANTS), progress=None) -> list[dict]:
    """Rows of (variant, seed, metric, value)."""
    say = progress or (lambda msg: log.info(msg))
    rows = []
    for variant in variants:
        cfg = variant_config(base, variant)
        for seed in seeds:
            model = train_cardiacflow(latents, cfg, seed=seed)
            scores = score_generation(generate_sequences(model, ae, n_generate, seed, steps), reference)
            say(f"{variant} seed {seed}: " + " ".join(f"{k} {v:.4f}" for k, v in scores.items()))
            rows += [{"variant": variant, "seed": seed, "metric": k, "value": v} for k, v in scores.items()]
    return rows


def straightness(model: CardiacFlowModel, n: int = 20, seed: int = 0, long_steps: int = 100) -> float:
    """Mean over frames and samples of |z(T=1) - z(T=long)| / |z(T=long)|."""
    ratios = []
    for i in range(n):
        one = model.generate_latents(seed * 100_003 + i, 1)
        ref = model.generate_latents(seed * 100_003 + i, long_steps)
        ratios.append(np.linalg.norm(one - ref, axis=1) / np.linalg.norm(ref, axis=1))
    return float(np.mean(ratios))
