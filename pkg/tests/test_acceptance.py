"""Acceptance criteria A1-A10 at full scale.

Each test records a PASS/FAIL line (printed in the terminal summary) and then
asserts it. The phantom benchmark and the CardiacFlow runs are shared
module fixtures, so A6, A7 and A8 reuse the same trained models.
"""
import time

import numpy as np
import pytest
import torch

from flow4d import experiments as ex
from flow4d.autoenc import AeConfig, AutoencoderModel, reconstruction_loss, stack_labels, train_autoencoder
from flow4d.autoenc import voxel_cross_entropy
from flow4d.cardiacflow import CardiacFlowConfig, CardiacFlowModel, cardiacflow_loss, pgk_distance, pgk_encode
from flow4d.cli import main as cli
from flow4d.completion import CompletionConfig, CompletionModel
from flow4d.diffnet import ModulatedMlpSpec, forward_mlp, init_mlp
from flow4d.fm import FlowConfig, FlowModel, TimeSampler, fm_loss, sample_lrf_latents, train_lrf
from flow4d.metrics import frechet_distance, hd95, mean_foreground_dsc, paired_ttest, trace_sqrt_product, vfid
from flow4d.metrics import volume_curve
from flow4d.phantom import LabelGrid, SliceSimConfig, extract_slices, rasterize_slices

from acceptance_log import record
from conftest import SMALL_DIMS
from gradcheck import check_gradients
from oracles import brute_force_circular_distance, brute_force_hd95

pytestmark = pytest.mark.acceptance

M = 20
TRAIN_SUBJECTS = range(64)
HELDOUT_SUBJECTS = range(1000, 1016)
AE_CONFIG = AeConfig(epochs=30)
CF_CONFIG = CardiacFlowConfig(M=M)
CF_SEEDS = (0, 1, 2)
N_GENERATE = 50


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# ------------------------------------------------------------------ fixtures
@pytest.fixture(scope="module")
def bench():
    """64 training sequences, the autoencoder fitted to all their frames, and the standardized latents."""
    seqs = ex.phantom_sequences(TRAIN_SUBJECTS, M)
    frames = [g for s in seqs for g in s.frames]
    ae, seconds = timed(train_autoencoder, frames, AE_CONFIG, seed=0)
    return {"seqs": seqs, "ae": ae, "ae_seconds": seconds, "latents": ex.sequence_latents(ae, seqs)}


@pytest.fixture(scope="module")
def cardiac_runs(bench):
    """variant -> list over seeds of (model, scores, seconds)."""
    runs = {}
    for variant in ex.VARIANTS:
        cfg = ex.variant_config(CF_CONFIG, variant)
        runs[variant] = []
        for seed in CF_SEEDS:
            t0 = time.perf_counter()
            model = ex.train_cardiacflow(bench["latents"], cfg, seed=seed)
            gen = ex.generate_sequences(model, bench["ae"], N_GENERATE, seed, steps=1)
            scores = ex.score_generation(gen, bench["seqs"])
            runs[variant].append((model, scores, time.perf_counter() - t0))
    return runs


def mean_score(runs, variant, key):
    return float(np.mean([s[key] for _, s, _ in runs[variant]]))


# ------------------------------------------------------------------------ A1
def _mlp_case(seed):
    rng = np.random.default_rng(seed)
    spec = ModulatedMlpSpec(3, (6, 5), 2, 4, activation="silu")
    store = init_mlp(spec, rng)
    for n, p in store.items():
        if n.endswith((".b", ".mod")):
            p.data.copy_(torch.as_tensor(0.3 * rng.normal(size=tuple(p.shape))))
    x, c, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 4)), rng.normal(size=(4, 2))
    return store, lambda: ((forward_mlp(spec, store, x, c) - torch.as_tensor(y)) ** 2).sum()


def _flow_case(seed):
    rng = np.random.default_rng(seed)
    m = FlowModel(3, FlowConfig(hidden=(16, 16), time_dim=4), seed=seed)
    z0, z1, t = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.random(6)
    return m.params, lambda: fm_loss(m, z0, z1, t)


def _cardiacflow_case(seed):
    rng = np.random.default_rng(seed)
    cfg = CardiacFlowConfig(M=6, embed_dim=3, fusion_hidden=(8, 8), flow=FlowConfig(hidden=(16, 16), time_dim=4))
    m = CardiacFlowModel(4, 5, cfg, seed=seed)
    idx = torch.as_tensor(rng.integers(0, 5, 6))
    taus, z1, t = rng.integers(1, 7, 6), rng.normal(size=(6, 4)), rng.random(6)
    return m.params, lambda: cardiacflow_loss(m, m.embeddings[idx], taus, z1, t)


def _ae_case(seed, grids):
    m = AutoencoderModel(SMALL_DIMS, AeConfig(latent_channels=2, hidden=16), seed=seed)
    labels = stack_labels(grids[seed:seed + 2])
    return m.params, lambda: reconstruction_loss(m, labels)


def _completion_case(seed, grids):
    m = CompletionModel(SMALL_DIMS, CompletionConfig(latent_channels=2, hidden=16), seed=seed)
    cfg = SliceSimConfig(lambda_max=2.0, sax_spacing=4)
    rng = np.random.default_rng(seed)
    sparse = np.stack([rasterize_slices(extract_slices(g, cfg, rng), g.dims).labels for g in grids[:2]])
    target = torch.as_tensor(np.stack([g.labels for g in grids[:2]]), dtype=torch.long)
    return m.params, lambda: voxel_cross_entropy(m.class_logits(sparse), target)


def test_a1_gradients_match_finite_differences(small_grids):
    t0 = time.perf_counter()
    cases = {
        "modulated-mlp": _mlp_case,
        "lrf": _flow_case,
        "cardiacflow": _cardiacflow_case,
        "autoencoder": lambda s: _ae_case(s, small_grids),
        "completion": lambda s: _completion_case(s, small_grids),
    }
    worst = {}
    with torch.random.fork_rng():
        for name, make in cases.items():
            errs = []
            for seed in range(5):
                params, loss = make(seed)
                errs.append(check_gradients(params, loss, h=1e-5, max_entries=8, rng=np.random.default_rng(seed)))
            worst[name] = max(errs)
    seconds = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and seconds < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record("A1", ok, f"max rel err per class: {detail}; 5 seeds each; {seconds:.1f}s")


# ------------------------------------------------------------------------ A2
def test_a2_autoencoder_heldout_fidelity(bench):
    ae = bench["ae"]
    held = ex.phantom_frames(HELDOUT_SUBJECTS, M)
    recon = ae.decode_labels(ae.encode(held))
    score = float(np.mean([mean_foreground_dsc(a, b) for a, b in zip(recon, held)]))
    seconds = bench["ae_seconds"]
    ok = score >= 0.90 and seconds < 1800
    assert record("A2", ok, f"held-out mean foreground DSC {score:.4f} (>= 0.90) on {len(held)} frames "
                            f"of {len(HELDOUT_SUBJECTS)} unseen subjects; training {seconds:.0f}s")


# ------------------------------------------------------------------------ A3
def test_a3_lrf_matches_2d_gaussian():
    t0 = time.perf_counter()
    mean = np.array([2.0, -1.0])
    cov = np.array([[1.0, 0.6], [0.6, 0.8]])
    data = np.random.default_rng(0).multivariate_normal(mean, cov, size=4000)
    model = train_lrf(data, TimeSampler("uniform"), FlowConfig(hidden=(64, 64), epochs=200, batch_size=256), seed=0)
    samples = sample_lrf_latents(model, 2000, steps=100, seed=1)
    mean_err = float(np.abs(samples.mean(axis=0) - mean).max())
    cov_err = float(np.linalg.norm(np.cov(samples, rowvar=False) - cov))
    seconds = time.perf_counter() - t0
    ok = mean_err < 0.1 and cov_err < 0.2 and seconds < 600
    assert record("A3", ok, f"mean err {mean_err:.4f} (< 0.1), cov Frobenius err {cov_err:.4f} (< 0.2), "
                            f"2000 samples at T=100; {seconds:.0f}s")


# ------------------------------------------------------------------------ A4
def test_a4_augmentation_lowers_heldout_hd95():
    setup = ex.AugmentationSetup()
    result, seconds = timed(ex.augmentation_benefit, setup)
    real, mixed = result["hd95_real_only"], result["hd95_mixed"]
    ok = mixed < real and seconds < 7200
    assert record("A4", ok, f"held-out HD95 mixed 25/75 {mixed:.4f} vs real-only {real:.4f} "
                            f"({100 * (real - mixed) / real:+.1f}% reduction); paired t {result['t']:.3f}, "
                            f"p {result['p']:.4f}; {len(setup.test_subjects)} cases x {setup.draws} draws, "
                            f"{len(setup.seeds)} seeds; {seconds / 60:.0f} min")


# ------------------------------------------------------------------------ A5
def test_a5_pgk_exactness():
    t0 = time.perf_counter()
    ok = True
    for M_ in (2, 3, 20, 50):
        frames = np.arange(1, M_ + 1)
        for tau in frames:
            for m in frames:
                ok &= pgk_distance(m, tau, M_) == brute_force_circular_distance(m, tau, M_)
        K = np.stack([pgk_encode(int(t), M_, 1.5).values for t in frames])
        ok &= np.abs(K - K.T).max() <= 1e-12
        ok &= all(np.abs(pgk_encode(int(t) + M_, M_, 1.5).values - K[t - 1]).max() <= 1e-12 for t in frames)
        ok &= all(K[t - 1, t - 1] >= K[t - 1].max() - 1e-12 for t in frames)
        ok &= np.ptp(K.sum(axis=1)) <= 1e-12
    seconds = time.perf_counter() - t0
    ok = bool(ok) and seconds < 1
    assert record("A5", ok, f"distance oracle, symmetry, periodicity, argmax and row sums at M in "
                            f"{{2,3,20,50}}; {seconds:.2f}s")


# ------------------------------------------------------------------------ A6
def test_a6_one_step_cycle_consistency(cardiac_runs):
    full = mean_score(cardiac_runs, "full", "cycledsc")
    scalar = mean_score(cardiac_runs, "scalar-enc", "cycledsc")
    seconds = sum(s for v in ("full", "scalar-enc") for _, _, s in cardiac_runs[v])
    ok = full >= 0.95 and full >= scalar and seconds < 7200
    assert record("A6", ok, f"cycle-DSC at T=1 PGK {full:.4f} (>= 0.95) vs scalar {scalar:.4f}; "
                            f"{N_GENERATE} sequences x {len(CF_SEEDS)} seeds; {seconds / 60:.0f} min")


# ------------------------------------------------------------------------ A7
def test_a7_ablation_directions(cardiac_runs):
    v = {name: mean_score(cardiac_runs, name, "vfid") for name in ex.VARIANTS}
    ok = v["full"] <= v["noise-init"] and v["full"] <= v["uniform-t"]
    assert record("A7", ok, f"vFID at T=1 over {len(CF_SEEDS)} seeds: learned/beta {v['full']:.0f}, "
                            f"noise init {v['noise-init']:.0f}, uniform t {v['uniform-t']:.0f}")


# ------------------------------------------------------------------------ A8
def test_a8_flow_is_nearly_straight(cardiac_runs):
    t0 = time.perf_counter()
    per_seed = [ex.straightness(model, N_GENERATE, seed, 100)
                for (model, _, _), seed in zip(cardiac_runs["full"], CF_SEEDS)]
    seconds = time.perf_counter() - t0
    value = float(np.mean(per_seed))
    ok = value < 0.15 and seconds < 300
    seeds = ", ".join(f"{v:.4f}" for v in per_seed)
    assert record("A8", ok, f"mean relative T=1 vs T=100 latent discrepancy {value:.4f} (< 0.15), "
                            f"per seed [{seeds}]; {seconds:.0f}s")


# ------------------------------------------------------------------------ A9
def test_a9_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    exact = 0
    while exact < 100:
        shape = tuple(rng.integers(2, 13, size=3))
        a = rng.random(shape) < rng.uniform(0.02, 0.6)
        b = rng.random(shape) < rng.uniform(0.02, 0.6)
        if not a.any() or not b.any():
            continue
        got = hd95(LabelGrid(a.astype(np.uint8)), LabelGrid(b.astype(np.uint8)), 1)
        if got != brute_force_hd95(a, b)[0]:
            break
        exact += 1
    curves = np.stack([volume_curve(s) for s in ex.phantom_sequences(range(2000, 2020), M)])
    self_fid = vfid(curves, curves)
    trace = trace_sqrt_product(np.array([[1.0]]), np.array([[4.0]]))
    scalar_fd = frechet_distance(np.zeros(1), np.array([[1.0]]), np.zeros(1), np.array([[4.0]]))
    t, p = paired_ttest([1, 2, 3], [0, 0, 0])
    seconds = time.perf_counter() - t0
    ok = (exact == 100 and self_fid <= 1e-9 and abs(trace - 2.0) <= 1e-9 and abs(scalar_fd - 1.0) <= 1e-9
          and abs(t - 3.4641) < 1e-3 and abs(p - 0.0742) < 1e-3 and seconds < 60)
    assert record("A9", ok, f"hd95 exact on {exact}/100 mask pairs; vfid(A,A) {self_fid:.1e}; "
                            f"scalar FD {scalar_fd:.12f}; t {t:.4f} p {p:.4f}; {seconds:.1f}s")


# ----------------------------------------------------------------------- A10
def test_a10_cli_reruns_are_bit_identical(tmp_path):
    w = tmp_path
    ae_flags = ["--latent-channels", "2", "--hidden", "32", "--epochs", "2"]
    flow_flags = ["--hidden", "32,32", "--epochs", "2"]
    steps = [
        ("phantom", "gen", "--subjects", 3, "--frames", 4, "--dims", "16,16,24", "--out", w / "data"),
        ("phantom", "slices", "--data", w / "data", "--out", w / "slices"),
        ("train", "ae", "--data", w / "data", *ae_flags, "--out", w / "ae.ckpt"),
        ("encode", "--data", w / "data", "--ae", w / "ae.ckpt", "--out", w / "latents.ckpt"),
        ("train", "lrf", "--latents", w / "latents.ckpt", *flow_flags, "--out", w / "lrf.ckpt"),
        ("generate", "lrf", "--model", w / "lrf.ckpt", "--ae", w / "ae.ckpt", "--n", 2, "--steps", 3,
         "--out", w / "gen"),
        ("train", "cardiacflow", "--seqs", w / "data", "--ae", w / "ae.ckpt", *flow_flags, "--out", w / "cf.ckpt"),
        ("generate", "cardiacflow", "--model", w / "cf.ckpt", "--ae", w / "ae.ckpt", "--n", 2, "--out", w / "seqs"),
        ("train", "completion", "--real", w / "data", "--lrf", w / "lrf.ckpt", "--ae", w / "ae.ckpt",
         "--epochs", 1, "--hidden", 16, "--latent-channels", 2, "--lrf-steps", 2, "--out", w / "lc.ckpt"),
        ("complete", "--model", w / "lc.ckpt", "--slices", w / "slices", "--out", w / "done"),
        ("eval", "--pred", w / "done", "--ref", w / "data", "--metrics", "dsc,hd95,cycledsc", "--out", w / "rep.csv"),
        ("ablate", "cardiacflow", "--seqs", w / "data", "--ae", w / "ae.ckpt", *flow_flags, "--seeds", 1,
         "--n", 2, "--out", w / "ablate.csv"),
        ("render", "--input", w / "seqs" / "sequence_00000.f4dseq", "--out", w / "img"),
    ]
    for argv in steps:
        assert cli([str(a) for a in argv]) == 0, argv
    outputs = [argv[argv.index("--out") + 1] for argv in steps]
    compared, mismatched = 0, []
    for out in outputs:
        is_dir = out.suffix == ""
        config = out / "config.json" if is_dir else out.with_name(out.name + ".config.json")
        again = w / "again" / out.name
        assert cli(["rerun", str(config), "--out", str(again)]) == 0, config
        pairs = ([(f, again / f.name) for f in sorted(out.iterdir()) if f.name != "config.json"] if is_dir
                 else [(out, again)])
        for first, second in pairs:
            compared += 1
            if first.read_bytes() != second.read_bytes():
                mismatched.append(str(first.relative_to(w)))
    ok = not mismatched and compared > 0
    assert record("A10", ok, f"{len(steps)} pipelines rerun from their resolved configs; {compared} output files "
                             f"compared, {len(mismatched)} differ {mismatched or ''}".rstrip())
