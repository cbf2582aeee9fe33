"""``flow4d`` command line.

Every artifact-producing command writes its fully resolved settings as JSON
next to its outputs; ``flow4d rerun`` replays such a file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import experiments, fileio
from .autoenc import AeConfig, AutoencoderModel, train_autoencoder
from .cardiacflow import CardiacFlowConfig, CardiacFlowModel, generate_sequence, train_cardiacflow
from .completion import CompletionConfig, CompletionModel, LrfSource, MixSpec, complete_sequence, train_completion
from .fm import FlowConfig, FlowModel, TimeSampler, generate_lrf, train_lrf
from .metrics import MetricError, cycle_dsc, dsc, hd95, UndefinedMetricError, vfid, volume_curve
from .phantom import (FOREGROUND, LabelGrid, PhantomError, ShapeSequence, SliceSimConfig, extract_slices,
                      generate_subject, rasterize_slices, render_sequence)
from .render import render

log = logging.getLogger("flow4d")

CONFIG_NAME = "config.json"
CLASS_NAMES = {1: "LV", 2: "LVM", 3: "RV", 4: "LA", 5: "RA"}


class CliError(Exception):
    pass


# ------------------------------------------------------------------ helpers
def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; expected X,Y,Z")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; expected X,Y,Z")
    return dims


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def _config_path(out: Path) -> Path:
    """Directories hold config.json; file outputs get a sibling <name>.config.json."""
    return out / CONFIG_NAME if out.suffix == "" else out.with_name(out.name + ".config.json")


def _write_config(args: argparse.Namespace) -> None:
    out = Path(args.out)
    skip = {"func", "threads", "verbose"}
    settings = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k not in skip}
    path = _config_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(settings, indent=2, sort_keys=True) + "\n")


def _prepare_out(args, is_dir: bool) -> Path:
    out = Path(args.out)
    (out if is_dir else out.parent).mkdir(parents=True, exist_ok=True)
    return out


def _data_files(path, suffixes=(".f4dseq", ".f4dgrid")) -> list[Path]:
    path = Path(path)
    if not path.exists():
        raise CliError(f"no such file or directory: {path}")
    if path.is_file():
        return [path]
    files = sorted(p for p in path.iterdir() if p.suffix in suffixes)
    if not files:
        raise CliError(f"no {'/'.join(suffixes)} files in {path}")
    return files


def _load_item(path: Path):
    return fileio.read_sequence(path) if path.suffix == ".f4dseq" else fileio.read_grid(path)


def _load_sequences(path) -> list[ShapeSequence]:
    items = [_load_item(p) for p in _data_files(path, (".f4dseq",))]
    return items


def _load_frames(path) -> list[LabelGrid]:
    frames = []
    for p in _data_files(path):
        item = _load_item(p)
        frames += list(item.frames) if isinstance(item, ShapeSequence) else [item]
    return frames


def _check_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {p}")
    return p


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


# ----------------------------------------------------------------- commands
def cmd_phantom_gen(args) -> None:
    out = _prepare_out(args, True)
    for i in range(args.subjects):
        sid = args.seed + i
        seq = render_sequence(generate_subject(sid, args.dims), args.frames, voxel_size=args.voxel_size)
        fileio.write_sequence(out / f"subject_{sid:05d}.f4dseq", seq)
    log.info("wrote %d sequences to %s", args.subjects, out)


def cmd_phantom_slices(args) -> None:
    out = _prepare_out(args, True)
    cfg = SliceSimConfig(lam=args.lam, lambda_max=args.lambda_max, sax_spacing=args.sax_spacing)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 9]))
    for p in _data_files(args.data):
        item = _load_item(p)
        frames = item.frames if isinstance(item, ShapeSequence) else [item]
        sparse = [rasterize_slices(extract_slices(g, cfg, rng), g.dims, g.voxel_size) for g in frames]
        if isinstance(item, ShapeSequence):
            fileio.write_sequence(out / p.name, ShapeSequence(sparse))
        else:
            fileio.write_grid(out / p.name, sparse[0])


def cmd_train_ae(args) -> None:
    frames = _load_frames(args.data)
    if args.frame_stride > 1:
        frames = frames[::args.frame_stride]
    out = _prepare_out(args, False)
    channels = args.latent_channels
    if args.latent_dim is not None:
        probe = AutoencoderModel(frames[0].dims, AeConfig(latent_channels=1, patch=args.patch, block=args.block,
                                                          field_stride=args.field_stride, hidden=1))
        if args.latent_dim % probe.n_blocks:
            raise CliError(f"--latent-dim {args.latent_dim} is not a multiple of the {probe.n_blocks} latent blocks")
        channels = args.latent_dim // probe.n_blocks
    cfg = AeConfig(latent_channels=channels, hidden=args.hidden, patch=args.patch, block=args.block,
                   field_stride=args.field_stride, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
    model = train_autoencoder(frames, cfg, seed=args.seed)
    model.save(out)


def _flow_config(args, **extra) -> FlowConfig:
    return FlowConfig(hidden=_ints(args.hidden), epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      steps=args.steps, **extra)


def _sampler(args) -> TimeSampler:
    return TimeSampler(args.sampler, args.beta_a, args.beta_b)


def cmd_train_lrf(args) -> None:
    if args.latents:
        entries = fileio.read_checkpoint(_check_file(args.latents))
        if "latents" not in entries:
            raise CliError(f"{args.latents}: no 'latents' entry")
        z = entries["latents"]
    else:
        if not (args.data and args.ae):
            raise CliError("train lrf needs --latents FILE or both --data DIR and --ae CKPT")
        ae = AutoencoderModel.load(_check_file(args.ae))
        z = experiments.frame_latents(ae, _load_frames(args.data))
    out = _prepare_out(args, False)
    model = train_lrf(z, _sampler(args), _flow_config(args), seed=args.seed)
    model.save(out)


def cmd_encode(args) -> None:
    ae = AutoencoderModel.load(_check_file(args.ae))
    z = experiments.frame_latents(ae, _load_frames(args.data))
    out = _prepare_out(args, False)
    fileio.write_checkpoint(out, {"latents": z})


def _cardiacflow_config(args, M: int) -> CardiacFlowConfig:
    return CardiacFlowConfig(
        M=M, sigma=args.sigma, embed_dim=args.embed_dim, fusion_hidden=_ints(args.fusion_hidden),
        flow=_flow_config(args), time_sampler=TimeSampler(args.time_sampler, args.beta_a, args.beta_b),
        frame_encoding=args.frame_encoding, init_value=args.init_value)


def _sequence_latents(args):
    seqs = _load_sequences(args.seqs)
    ae = AutoencoderModel.load(_check_file(args.ae))
    Ms = {s.M for s in seqs}
    if len(Ms) != 1:
        raise CliError(f"sequences have differing frame counts {sorted(Ms)}")
    for s in seqs:
        if s.frames[0].dims != ae.dims:
            raise CliError(f"sequence dims {s.frames[0].dims} do not match autoencoder dims {ae.dims}")
    return seqs, ae, experiments.sequence_latents(ae, seqs)


def cmd_train_cardiacflow(args) -> None:
    seqs, ae, z = _sequence_latents(args)
    out = _prepare_out(args, False)
    model = train_cardiacflow(z, _cardiacflow_config(args, seqs[0].M), seed=args.seed)
    model.save(out)


def cmd_train_completion(args) -> None:
    real = _load_frames(args.real)
    mix = MixSpec.parse(args.mix)
    source = None
    if mix.synthetic_fraction > 0:
        if not (args.lrf and args.ae):
            raise CliError("a synthetic fraction > 0 needs --lrf and --ae")
        source = LrfSource(FlowModel.load(_check_file(args.lrf)), AutoencoderModel.load(_check_file(args.ae)),
                           args.lrf_steps)
    out = _prepare_out(args, False)
    cfg = CompletionConfig(latent_channels=args.latent_channels, hidden=args.hidden, epochs=args.epochs,
                           batch_size=args.batch_size, samples_per_epoch=args.samples_per_epoch, lr=args.lr)
    model = train_completion(real, mix, SliceSimConfig(lambda_max=args.lambda_max), cfg, seed=args.seed,
                             source=source)
    model.save(out)


def cmd_generate_lrf(args) -> None:
    model = FlowModel.load(_check_file(args.model))
    ae = AutoencoderModel.load(_check_file(args.ae))
    out = _prepare_out(args, True)
    for i, g in enumerate(generate_lrf(model, ae, args.n, args.steps, args.seed)):
        fileio.write_grid(out / f"sample_{i:05d}.f4dgrid", g)


def cmd_generate_cardiacflow(args) -> None:
    model = CardiacFlowModel.load(_check_file(args.model))
    ae = AutoencoderModel.load(_check_file(args.ae))
    out = _prepare_out(args, True)
    for i in range(args.n):
        seq = generate_sequence(model, ae, args.seed * 100_003 + i, args.steps)
        fileio.write_sequence(out / f"sequence_{i:05d}.f4dseq", seq)


def cmd_complete(args) -> None:
    model = CompletionModel.load(_check_file(args.model))
    out = _prepare_out(args, True)
    for p in _data_files(args.slices):
        item = _load_item(p)
        frames = item.frames if isinstance(item, ShapeSequence) else [item]
        for g in frames:
            if g.dims != model.dims:
                raise CliError(f"{p.name}: grid dims {g.dims} do not match model dims {model.dims}")
        done = complete_sequence(model, frames)
        if isinstance(item, ShapeSequence):
            fileio.write_sequence(out / p.name, done)
        else:
            fileio.write_grid(out / p.name, done[1])


def cmd_eval(args) -> None:
    metrics = [m for m in args.metrics.split(",") if m]
    unknown = set(metrics) - {"dsc", "hd95", "cycledsc", "vfid"}
    if unknown:
        raise CliError(f"unknown metrics: {','.join(sorted(unknown))}")
    pred_files = _data_files(args.pred)
    ref_files = {p.name: p for p in _data_files(args.ref)}
    rows = []
    pred_seqs, ref_seqs = [], []
    for p in pred_files:
        pred = _load_item(p)
        pframes = pred.frames if isinstance(pred, ShapeSequence) else [pred]
        if isinstance(pred, ShapeSequence):
            pred_seqs.append(pred)
        if "cycledsc" in metrics and isinstance(pred, ShapeSequence):
            rows.append((p.stem, "", "all", "cycledsc", cycle_dsc(pred)))
        if not {"dsc", "hd95"} & set(metrics):
            continue
        if p.name not in ref_files:
            raise CliError(f"no reference for {p.name} in {args.ref}")
        ref = _load_item(ref_files[p.name])
        rframes = ref.frames if isinstance(ref, ShapeSequence) else [ref]
        if len(rframes) != len(pframes):
            raise CliError(f"{p.name}: {len(pframes)} predicted frames vs {len(rframes)} reference frames")
        for k, (a, b) in enumerate(zip(pframes, rframes), start=1):
            if a.dims != b.dims:
                raise CliError(f"{p.name} frame {k}: prediction dims {a.dims} differ from reference dims {b.dims}")
            for c in FOREGROUND:
                if "dsc" in metrics:
                    rows.append((p.stem, k, CLASS_NAMES[c], "dsc", dsc(a, b, c)))
                if "hd95" in metrics:
                    try:
                        value = hd95(a, b, c)
                    except UndefinedMetricError:
                        value = float("nan")
                    rows.append((p.stem, k, CLASS_NAMES[c], "hd95", value))
    if "vfid" in metrics:
        ref_seqs = [s for s in (_load_item(p) for p in ref_files.values()) if isinstance(s, ShapeSequence)]
        if len(pred_seqs) < 2 or len(ref_seqs) < 2:
            raise CliError("vfid needs at least 2 predicted and 2 reference sequences")
        value = vfid(np.stack([volume_curve(s) for s in pred_seqs]), np.stack([volume_curve(s) for s in ref_seqs]))
        rows.append(("ALL", "", "all", "vfid", value))
    out = _prepare_out(args, False)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "frame", "class", "metric", "value"])
        for r in rows:
            w.writerow([*r[:4], repr(float(r[4]))])


def cmd_ablate_cardiacflow(args) -> None:
    seqs, ae, z = _sequence_latents(args)
    out = _prepare_out(args, False)
    base = _cardiacflow_config(args, seqs[0].M)
    ref = _load_sequences(args.ref) if args.ref else seqs
    rows = experiments.ablate_cardiacflow(z, ae, ref, base, seeds=range(args.seeds), n_generate=args.n,
                                          steps=args.gen_steps, variants=args.variants.split(","))
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["variant", "seed", "metric", "value"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(float(r["value"]))})


def cmd_render(args) -> None:
    src = _check_file(args.input)
    out = _prepare_out(args, True)
    render(_load_item(src), out, args.axis, args.index, prefix=src.stem + "_")


def cmd_rerun(args) -> None:
    settings = json.loads(_check_file(args.config).read_text())
    argv = settings.pop("argv_command", None)
    if not argv:
        raise CliError(f"{args.config}: missing argv_command")
    if args.out:
        settings["out"] = args.out
    ns = build_parser().parse_args(argv + ["--out", settings["out"]] + _required_args(argv, settings))
    for k, v in settings.items():
        setattr(ns, k, tuple(v) if isinstance(v, list) and k == "dims" else v)
    ns.threads = args.threads
    ns.argv_command = argv
    _execute(ns)


def _required_args(argv, settings) -> list[str]:
    """Placeholders for required flags so argparse accepts the replay; real values come from settings."""
    parser = build_parser()
    action = _find_subparser(parser, argv)
    extra = []
    for a in action._actions:
        if a.required and a.dest != "out" and a.option_strings:
            extra += [a.option_strings[0], str(settings[a.dest])]
    return extra


def _find_subparser(parser, argv):
    for word in argv:
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        parser = sub.choices[word]
        if not any(isinstance(a, argparse._SubParsersAction) for a in parser._actions):
            break
    return parser


# ------------------------------------------------------------------- parser
def _flow_flags(p, epochs: int, hidden: str = "256,256,256") -> None:
    p.add_argument("--hidden", default=hidden, help="comma-separated hidden widths")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=100, help="Euler steps stored with the model")
    p.add_argument("--beta-a", type=float, default=0.1)
    p.add_argument("--beta-b", type=float, default=2.0)


def _cardiacflow_flags(p) -> None:
    p.add_argument("--seqs", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--fusion-hidden", default="64,64")
    p.add_argument("--frame-encoding", choices=("pgk", "scalar"), default="pgk")
    p.add_argument("--init-value", choices=("learned", "noise"), default="learned")
    p.add_argument("--time-sampler", choices=("beta", "uniform"), default="beta")
    _flow_flags(p, epochs=600)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flow4d", description="Flow-matching cardiac shape toolkit.")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def leaf(subparsers, name, func, help_text, out_help="output path"):
        p = subparsers.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help=out_help)
        p.set_defaults(func=func)
        return p

    ph = sub.add_parser("phantom", help="procedural phantom data").add_subparsers(dest="action", required=True)
    p = leaf(ph, "gen", cmd_phantom_gen, "render phantom 3D+t sequences", "output directory")
    p.add_argument("--subjects", type=int, default=64)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--dims", type=_dims, default=(32, 32, 40))
    p.add_argument("--voxel-size", type=float, default=1.0)
    p = leaf(ph, "slices", cmd_phantom_slices, "simulate and rasterize multi-view slices", "output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--lambda-max", type=float, default=2.0)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="fixed corruption level")
    p.add_argument("--sax-spacing", type=int, default=4)

    tr = sub.add_parser("train", help="train a model").add_subparsers(dest="action", required=True)
    p = leaf(tr, "ae", cmd_train_ae, "shape autoencoder", "checkpoint path")
    p.add_argument("--data", required=True)
    p.add_argument("--latent-channels", type=int, default=4, help="latent values per block")
    p.add_argument("--latent-dim", type=int, default=None,
                   help="total latent size; overrides --latent-channels (must be a multiple of the block count)")
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--block", type=int, default=2, help="block edge in patches")
    p.add_argument("--field-stride", type=int, default=2)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--frame-stride", type=int, default=1, help="keep every k-th frame")
    p = leaf(tr, "lrf", cmd_train_lrf, "latent rectified flow", "checkpoint path")
    p.add_argument("--latents", help="checkpoint file with a 'latents' entry (see `flow4d encode`)")
    p.add_argument("--data", help="phantom directory to encode with --ae")
    p.add_argument("--ae")
    p.add_argument("--sampler", choices=("uniform", "beta"), default="uniform")
    _flow_flags(p, epochs=200)
    p = leaf(tr, "cardiacflow", cmd_train_cardiacflow, "periodic one-step 3D+t generator", "checkpoint path")
    _cardiacflow_flags(p)
    p = leaf(tr, "completion", cmd_train_completion, "sparse-slice label completion", "checkpoint path")
    p.add_argument("--real", required=True)
    p.add_argument("--lrf")
    p.add_argument("--ae")
    p.add_argument("--mix", default="0.25:0.75", help="real:synthetic fractions")
    p.add_argument("--lambda-max", type=float, default=2.0)
    p.add_argument("--lrf-steps", type=int, default=100)
    p.add_argument("--latent-channels", type=int, default=8)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--samples-per-epoch", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)

    p = leaf(sub, "encode", cmd_encode, "standardized autoencoder latents of a phantom directory",
             "latents checkpoint path")
    p.add_argument("--data", required=True)
    p.add_argument("--ae", required=True)

    ge = sub.add_parser("generate", help="sample shapes").add_subparsers(dest="action", required=True)
    p = leaf(ge, "lrf", cmd_generate_lrf, "3D shapes from a latent rectified flow", "output directory")
    p.add_argument("--model", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--steps", type=int, default=100)
    p = leaf(ge, "cardiacflow", cmd_generate_cardiacflow, "3D+t sequences from CardiacFlow", "output directory")
    p.add_argument("--model", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--steps", type=int, default=1)

    p = leaf(sub, "complete", cmd_complete, "complete rasterized sparse slices", "output directory")
    p.add_argument("--model", required=True)
    p.add_argument("--slices", required=True)

    p = leaf(sub, "eval", cmd_eval, "metric report as CSV", "CSV path")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--metrics", default="dsc,hd95")

    ab = sub.add_parser("ablate", help="ablation recipes").add_subparsers(dest="action", required=True)
    p = leaf(ab, "cardiacflow", cmd_ablate_cardiacflow, "CardiacFlow component ablations", "CSV path")
    _cardiacflow_flags(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--n", type=int, default=50, help="generated sequences per model")
    p.add_argument("--gen-steps", type=int, default=1)
    p.add_argument("--ref", help="reference sequences for vFID (default: the training sequences)")
    p.add_argument("--variants", default=",".join(experiments.VARIANTS))

    p = leaf(sub, "render", cmd_render, "PPM images of one plane per frame", "output directory")
    p.add_argument("--input", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, default=None)

    p = sub.add_parser("rerun", help="replay a run from its resolved config file")
    p.add_argument("config")
    p.add_argument("--out", help="override the output path")
    p.set_defaults(func=cmd_rerun)
    return parser


def _execute(args) -> None:
    torch.set_num_threads(max(1, args.threads))
    if args.func is not cmd_rerun:
        _seed_everything(args.seed)
        _write_config(args)
    args.func(args)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    if args.func is not cmd_rerun:
        args.argv_command = [args.command] + ([args.action] if getattr(args, "action", None) else [])
    try:
        _execute(args)
    except (CliError, fileio.FormatError, PhantomError, MetricError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"flow4d: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, fileio.FormatError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
