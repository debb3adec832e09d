"""Command-line entry point: ``flowsynth <subcommand> ...``.

Progress goes to stdout as JSON lines; errors go to stderr. Exit codes:
0 success, 2 usage or config error, 3 data error, 4 numeric failure,
5 config type error. Set ``FLOWSYNTH_WORKERS`` to fan volume-level work
out to a process pool; outputs are ordered by stem either way.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_config
from .errors import DataError, FlowSynthError

PAIR_SUFFIXES = {"source": "_src.nii.gz", "target": "_tgt.nii.gz", "mask": "_mask.nii.gz"}
SYN_SUFFIX = "_syn.nii.gz"


def emit(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), flush=True)


def _workers() -> int:
    raw = os.environ.get("FLOWSYNTH_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise DataError(f"FLOWSYNTH_WORKERS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _map(fn, items):
    """Ordered map, in-process for one worker and a process pool otherwise."""
    items = list(items)
    n = _workers()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None and args.seed != cfg.seed:
        from .config import from_dict

        doc = cfg.to_dict()
        doc["seed"] = args.seed
        cfg = from_dict(doc)
    return cfg


def _stems(directory: Path, suffix: str) -> list[str]:
    if not directory.is_dir():
        raise DataError(f"missing file: directory {directory}")
    return sorted(p.name[: -len(suffix)] for p in directory.glob("*" + suffix))


def _phantom_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- phantom -------------------------------------------------------------------

def _write_phantom(job):
    from .phantom import make_pair
    from .volume import save_mask, save_volume

    out, stem, pseed, size, factor = job
    pair = make_pair(pseed, size, factor)
    save_volume(pair.source, out / (stem + PAIR_SUFFIXES["source"]))
    save_volume(pair.target, out / (stem + PAIR_SUFFIXES["target"]))
    save_mask(pair.mask, out / (stem + PAIR_SUFFIXES["mask"]), pair.source.spacing)
    return stem


def cmd_phantom(args) -> int:
    from .io_utils import atomic_path, write_sidecar

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = (args.size, args.size, args.slices)
    jobs = [(out, f"phantom_{i:03d}", _phantom_seed(args.seed, i), size, args.factor) for i in range(args.count)]
    for stem in _map(_write_phantom, jobs):
        emit("phantom", stem=stem)
    manifest = out / "manifest.csv"
    with atomic_path(manifest) as tmp:
        lines = ["stem,seed,size,factor"]
        lines += [f"{stem},{pseed},{'x'.join(map(str, sz))},{factor}" for _, stem, pseed, sz, factor in jobs]
        tmp.write_text("\n".join(lines) + "\n")
    for _, stem, pseed, _, _ in jobs:
        for suffix in PAIR_SUFFIXES.values():
            write_sidecar(out / (stem + suffix), seed=pseed, global_seed=args.seed, size=list(size),
                          factor=args.factor)
    write_sidecar(manifest, seed=args.seed, count=args.count)
    emit("done", command="phantom", count=args.count, out=str(out))
    return 0


# -- data loading ----------------------------------------------------------------

class _Pair:
    def __init__(self, source, target, mask=None, stem=""):
        self.source, self.target, self.mask, self.stem = source, target, mask, stem


def _prepare(volume, cfg: RunConfig):
    from .volume import crop_or_pad, normalize_intensity

    volume = normalize_intensity(volume, cfg.data.p_high)
    if cfg.data.in_plane:
        volume = crop_or_pad(volume, (cfg.data.in_plane, cfg.data.in_plane))
    return volume


def load_pairs(directory, cfg: RunConfig) -> list[_Pair]:
    from .volume import load_volume

    directory = Path(directory)
    stems = _stems(directory, PAIR_SUFFIXES["source"])
    if not stems:
        raise DataError(f"no *{PAIR_SUFFIXES['source']} files in {directory}")
    pairs = []
    for stem in stems:
        src = _prepare(load_volume(directory / (stem + PAIR_SUFFIXES["source"])), cfg)
        tgt = _prepare(load_volume(directory / (stem + PAIR_SUFFIXES["target"])), cfg)
        pairs.append(_Pair(src, tgt, stem=stem))
    return pairs


# -- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    import dataclasses

    from .checkpoint import Checkpoint, save_checkpoint
    from .io_utils import write_sidecar, write_text_atomic
    from .plotting import plot_loss_curves
    from .training import LossReport, train

    cfg = _load_config(args)
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    if args.model_kind is not None:
        tcfg = dataclasses.replace(tcfg, model_kind=args.model_kind)
    data_dir = args.data or cfg.data.train_dir
    if not data_dir:
        raise DataError("no training data: pass --data or set [data] train_dir")
    val_dir = args.val or cfg.data.val_dir
    pairs = load_pairs(data_dir, cfg)
    val_pairs = load_pairs(val_dir, cfg) if val_dir else None
    emit("train_start", volumes=len(pairs), epochs=tcfg.epochs, model_kind=tcfg.model_kind)

    def on_epoch(epoch, model, disc):
        emit("epoch", epoch=epoch + 1)

    model, reports = train(tcfg, pairs, cfg.model, val_pairs=val_pairs, policy=cfg.augment,
                           max_steps=args.max_steps, on_epoch_end=on_epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    ckpt = Checkpoint.from_model(model, cfg.model, epoch=len(reports), seed=cfg.seed,
                                 model_kind=tcfg.model_kind, config_digest=digest)
    ckpt_digest = save_checkpoint(ckpt, out / "model.ckpt")
    write_sidecar(out / "model.ckpt", seed=cfg.seed, config_digest=digest, checkpoint_digest=ckpt_digest)
    csv = "\n".join([LossReport.CSV_HEADER] + [r.csv_row() for r in reports]) + "\n"
    write_text_atomic(out / "loss.csv", csv)
    write_sidecar(out / "loss.csv", seed=cfg.seed, config_digest=digest, checkpoint_digest=ckpt_digest)
    if reports:
        plot_loss_curves(reports, out / "loss.png")
    from .config import serialize

    write_text_atomic(out / "config.toml", serialize(cfg))
    emit("done", command="train", checkpoint=str(out / "model.ckpt"), digest=ckpt_digest)
    return 0


# -- synthesize --------------------------------------------------------------------

def _synthesize_file(job):
    from .checkpoint import build_model, load_checkpoint
    from .io_utils import write_sidecar
    from .sampling import synthesize_volume
    from .volume import crop_or_pad, load_volume, save_volume

    ckpt_path, src_path, out_path, sampler, cfg = job
    ckpt = load_checkpoint(ckpt_path)
    net = build_model(ckpt)
    source = _prepare(load_volume(src_path), cfg)
    h, w, _ = source.shape
    m = ckpt.net_config.size_multiple
    padded = (-(-h // m) * m, -(-w // m) * m)
    work = crop_or_pad(source, padded) if padded != (h, w) else source
    result = synthesize_volume(net, work, sampler, ckpt.model_kind)
    if padded != (h, w):
        result = crop_or_pad(result, (h, w))
    save_volume(result, out_path)
    write_sidecar(out_path, seed=sampler.seed, config_digest=cfg.digest(), checkpoint_digest=ckpt.digest,
                  ar_enabled=sampler.ar_enabled, steps=sampler.steps, noise_mode=sampler.noise_mode,
                  model_kind=ckpt.model_kind, input=str(src_path))
    return str(out_path)


def cmd_synthesize(args) -> int:
    import dataclasses

    cfg = _load_config(args)
    sampler = cfg.sample
    if args.steps is not None:
        sampler = dataclasses.replace(sampler, steps=args.steps)
    if args.no_ar:
        sampler = dataclasses.replace(sampler, ar_enabled=False)
    src, out = Path(args.input), Path(args.out)
    if src.is_dir():
        stems = _stems(src, PAIR_SUFFIXES["source"])
        if not stems:
            raise DataError(f"no *{PAIR_SUFFIXES['source']} files in {src}")
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(args.ckpt, src / (s + PAIR_SUFFIXES["source"]), out / (s + SYN_SUFFIX), sampler, cfg)
                for s in stems]
    else:
        if not src.is_file():
            raise DataError(f"missing file: {src}")
        jobs = [(args.ckpt, src, out, sampler, cfg)]
    for path in _map(_synthesize_file, jobs):
        emit("synthesized", path=path, ar_enabled=sampler.ar_enabled)
    emit("done", command="synthesize", count=len(jobs))
    return 0


# -- evaluate ------------------------------------------------------------------------

def _evaluate_one(job):
    from .metrics import metrics_report
    from .volume import load_mask, load_volume

    stem, pred_path, ref_path, mask_path, cfg = job
    pred = load_volume(pred_path)
    ref = _prepare(load_volume(ref_path), cfg)
    mask = load_mask(mask_path)
    if cfg.data.in_plane:
        from .volume import Mask, Volume, crop_or_pad

        mask = Mask(crop_or_pad(Volume(mask.voxels.astype(np.float32)), (cfg.data.in_plane,) * 2).voxels > 0.5)
    return metrics_report(pred, ref, mask, subject_id=stem)


def cmd_evaluate(args) -> int:
    from .io_utils import write_sidecar, write_text_atomic
    from .metrics import MetricReport
    from .plotting import plot_metrics

    cfg = _load_config(args)
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    stems = _stems(pred_dir, SYN_SUFFIX)
    if not stems:
        raise DataError(f"no *{SYN_SUFFIX} files in {pred_dir}")
    jobs = [(s, pred_dir / (s + SYN_SUFFIX), ref_dir / (s + PAIR_SUFFIXES["target"]),
             ref_dir / (s + PAIR_SUFFIXES["mask"]), cfg) for s in stems]
    reports = _map(_evaluate_one, jobs)
    out = Path(args.out)
    lines = [MetricReport.CSV_HEADER] + [r.csv_row() for r in reports]
    write_text_atomic(out, "\n".join(lines) + "\n")
    write_sidecar(out, seed=cfg.seed, config_digest=cfg.digest(), subjects=len(reports))
    plot_metrics(reports, out.with_suffix(".png"))
    for r in reports:
        emit("metrics", subject_id=r.subject_id, ssim=r.ssim, fsim=r.fsim, flicker_index=r.flicker_index)
    emit("done", command="evaluate", subjects=len(reports), out=str(out))
    return 0


# -- stats -----------------------------------------------------------------------------

def cmd_stats(args) -> int:
    from .io_utils import atomic_path, write_sidecar
    from .plotting import plot_agreement, plot_effect_sizes
    from .stats import (GROUP_TEST_COLUMNS, agreement_analysis, group_analysis, read_cohort,
                        simulate_cohort, write_cohort)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    if args.simulate:
        table = simulate_cohort(args.simulate, seed)
        write_cohort(table, out / "cohort.csv")
        write_sidecar(out / "cohort.csv", seed=seed, n_subjects=args.simulate)
        table = read_cohort(out / "cohort.csv")
    elif args.input:
        table = read_cohort(args.input)
    else:
        raise DataError("stats needs --input <cohort.csv> or --simulate N")
    results = []
    for itype in ("acquired", "synth"):
        results += group_analysis(table, itype)
    with atomic_path(out / "group_tests.csv") as tmp:
        lines = [",".join(GROUP_TEST_COLUMNS)]
        lines += [f"{r.hemisphere},{r.subfield},{r.image_type},{r.H:.6f},{r.p_fdr:.6g},{r.epsilon_sq:.6f},{r.n}"
                  for r in results]
        tmp.write_text("\n".join(lines) + "\n")
    write_sidecar(out / "group_tests.csv", seed=seed, tests=len(results))
    agreement = agreement_analysis(table)
    with atomic_path(out / "agreement.csv") as tmp:
        agreement.to_csv(tmp, index=False, float_format="%.6g")
    write_sidecar(out / "agreement.csv", seed=seed, rows=len(agreement))
    if results:
        plot_effect_sizes(results, out / "effect_sizes.png")
    if len(agreement):
        plot_agreement(agreement, out / "agreement.png")
    emit("done", command="stats", tests=len(results), significant=sum(r.p_fdr < 0.05 for r in results))
    return 0


# -- augment preview ---------------------------------------------------------------------

def cmd_augment(args) -> int:
    from .artifacts import augment
    from .io_utils import write_sidecar
    from .plotting import plot_augment_preview
    from .volume import load_volume, save_volume

    cfg = _load_config(args)
    src = Path(args.input)
    volume = load_volume(src)
    rng = np.random.default_rng(cfg.seed)
    after = augment(volume, cfg.augment, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = src.name.split(".nii")[0]
    save_volume(volume, out / f"{base}_before.nii.gz")
    save_volume(after, out / f"{base}_after.nii.gz")
    for name in (f"{base}_before.nii.gz", f"{base}_after.nii.gz"):
        write_sidecar(out / name, seed=cfg.seed, config_digest=cfg.digest(), input=str(src))
    plot_augment_preview(volume.voxels, after.voxels, out / f"{base}_preview.png")
    emit("done", command="augment preview", out=str(out))
    return 0


# -- parser ------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowsynth", description="Slice-wise flow-matching contrast synthesis toolkit.")
    p.add_argument("--version", action="version", version=f"flowsynth {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="generate paired phantom volumes")
    ph.add_argument("--count", type=int, required=True)
    ph.add_argument("--size", type=int, default=64, help="in-plane size (square)")
    ph.add_argument("--slices", type=int, default=None, help="slice count (default: 40 for size 64, else size*5/8)")
    ph.add_argument("--factor", type=int, default=2, help="source degradation factor")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train a model on phantom-style triples")
    tr.add_argument("--config")
    tr.add_argument("--data", help="directory of <stem>_src/_tgt.nii.gz")
    tr.add_argument("--val")
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--model-kind", choices=("flow_matching", "unet_mse", "pix2pix"))
    tr.add_argument("--max-steps", type=int)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    sy = sub.add_parser("synthesize", help="synthesize target-contrast volumes")
    sy.add_argument("--ckpt", required=True)
    sy.add_argument("--input", required=True, help="source NIfTI, or a directory of *_src.nii.gz")
    sy.add_argument("--out", required=True, help="output NIfTI, or a directory when --input is one")
    sy.add_argument("--steps", type=int)
    sy.add_argument("--no-ar", action="store_true", help="disable previous-slice conditioning")
    sy.add_argument("--config")
    sy.add_argument("--seed", type=int)
    sy.set_defaults(func=cmd_synthesize)

    ev = sub.add_parser("evaluate", help="SSIM / FSIM / flicker index per subject")
    ev.add_argument("--pred", required=True, help="directory of *_syn.nii.gz")
    ev.add_argument("--ref", required=True, help="directory of *_tgt.nii.gz and *_mask.nii.gz")
    ev.add_argument("--out", required=True, help="metrics CSV path")
    ev.add_argument("--config")
    ev.add_argument("--seed", type=int)
    ev.set_defaults(func=cmd_evaluate)

    st = sub.add_parser("stats", help="agreement and group-difference statistics")
    st.add_argument("--input", help="cohort CSV")
    st.add_argument("--simulate", type=int, help="simulate a cohort of N subjects instead")
    st.add_argument("--seed", type=int)
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_stats)

    au = sub.add_parser("augment", help="artifact augmentation tools")
    au_sub = au.add_subparsers(dest="action", required=True, parser_class=_Parser)
    pv = au_sub.add_parser("preview", help="write before/after volumes and a preview figure")
    pv.add_argument("--input", required=True)
    pv.add_argument("--out", required=True)
    pv.add_argument("--config")
    pv.add_argument("--seed", type=int)
    pv.set_defaults(func=cmd_augment)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "phantom" and args.slices is None:
        args.slices = 40 if args.size == 64 else max(16, args.size * 5 // 8)
    try:
        return args.func(args)
    except FlowSynthError as exc:
        print(f"flowsynth {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


def main(argv=None) -> None:
    sys.exit(run_command(argv))
