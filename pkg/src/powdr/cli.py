"""Command-line entry point: ``powdr <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import _backend
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .denoiser import DenoiserParams
from .maskgen import (VolumeDistribution, check_6_connected, grow_connected_mask,
                      load_distribution, sample_target_volume)
from .metrics import diversity_report, ms_ssim
from .phantom import PhantomSpec, load_dataset, write_phantoms
from .sampler import ContractError, SampleRequest, sample, sidecar_meta, write_samples
from .trainer import ConfigError, NonFiniteError, load_config, train, write_loss_csv
from .volume import FormatError, Volume, read_mask, read_volume, write_volume

log = logging.getLogger("powdr")


class UsageError(Exception):
    """Bad flags or inputs detected before any expensive work (exit code 2)."""


# -- shared helpers ------------------------------------------------------------

def _dataset_and_distribution(data_dir, distribution_path=None, jitter=0.1):
    """Load cases from a phantom directory; lesion volumes come from the
    distribution file if given, else from the manifest."""
    if not os.path.isdir(data_dir):
        raise UsageError(f"data dir {data_dir!r} does not exist")
    if os.path.exists(os.path.join(data_dir, "manifest.json")):
        examples, manifest = load_dataset(data_dir)
        volumes = [c.get("lesion_voxels") for c in manifest["cases"]]
        if any(v is None for v in volumes):
            volumes = None
    else:
        from .trainer import TrainingExample
        examples, volumes = [], None
        i = 0
        while os.path.exists(os.path.join(data_dir, f"case{i}.pvol")):
            examples.append(TrainingExample(read_volume(os.path.join(data_dir, f"case{i}.pvol")),
                                            read_mask(os.path.join(data_dir, f"case{i}_mask.pvol"))))
            i += 1
    if not examples:
        raise UsageError(f"no cases found in {data_dir!r}")
    dist = None
    if distribution_path:
        dist = load_distribution(distribution_path, jitter)
    elif volumes:
        dist = VolumeDistribution(tuple(volumes), jitter)
    return examples, dist


def _progress(every):
    def cb(it, loss):
        if it == 1 or it % every == 0:
            log.info("iter %d loss %.6g", it, loss)
    return cb


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


def _write_pair_csv(path, pairs):
    if not pairs:
        return
    keys = list(pairs[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(pairs)


# -- commands -----------------------------------------------------------------

def cmd_gen_phantoms(args):
    if args.size < 2 or args.size % 2:
        raise UsageError(f"--size must be even (Haar transform needs even dims), got {args.size}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        spec = PhantomSpec(dims=(args.size,) * 3, n_cases=args.count,
                           lesion_volume_range=(args.lesion_min, args.lesion_max),
                           texture_amplitude=args.texture, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = write_phantoms(spec, args.out_dir)
    print(f"wrote {len(manifest['cases'])} cases to {args.out_dir}")
    return 0


def _load_run(path):
    if not os.path.exists(path):
        raise UsageError(f"config file {path!r} does not exist")
    try:
        return load_config(path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    run = _load_run(args.config)
    examples, dist = _dataset_and_distribution(args.data_dir, args.distribution)
    if run.train.conditioning_mode == "random_connected" and dist is None:
        raise UsageError("conditioning_mode = random_connected needs lesion volumes: "
                         "pass --distribution or use a data dir with a manifest")
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.pwdr")
    t0 = time.perf_counter()
    try:
        _, losses = train(examples, run, dist, checkpoint_path=ckpt_path,
                          progress=_progress(args.log_every))
    except NonFiniteError as exc:
        log.error("%s; last good checkpoint kept at %s", exc, ckpt_path)
        return 1
    write_loss_csv(losses, os.path.join(args.out, "loss.csv"))
    print(f"trained {len(losses)} iterations in {time.perf_counter() - t0:.1f}s; "
          f"final loss {losses[-1]:.6g}; checkpoint {ckpt_path}")
    return 0


def _load_ckpt(path):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path!r} does not exist")
    try:
        return load_checkpoint(path)
    except FormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _read_inputs(cond_path, mask_path):
    for p in (cond_path, mask_path):
        if not os.path.exists(p):
            raise UsageError(f"input {p!r} does not exist")
    try:
        cond = read_volume(cond_path)
        mask = read_mask(mask_path)
    except FormatError as exc:
        raise UsageError(str(exc)) from None
    if not isinstance(cond, Volume):
        raise UsageError(f"{cond_path} is a mask file, expected an intensity volume")
    return cond, mask


def cmd_sample(args):
    ckpt = _load_ckpt(args.checkpoint)
    cond, mask = _read_inputs(args.condition, args.mask)
    steps = args.steps if args.steps is not None else int(ckpt.schedule["T"])
    try:
        req = SampleRequest(cond, mask, steps=steps, seed=args.seed, repeats=args.repeats,
                            hard_composite=args.hard_composite, clamp=args.clamp)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        vols = sample(ckpt, req)
    except ContractError as exc:
        raise UsageError(f"contract error: {exc}") from None
    out_dir = os.path.dirname(args.out_prefix)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    paths = write_samples(vols, args.out_prefix, sidecar_meta(args.checkpoint, req))
    print("\n".join(paths))
    return 0


def _metrics_payload(report, out_dir, stem):
    mean_path = os.path.join(out_dir, f"{stem}_mean.pvol")
    std_path = os.path.join(out_dir, f"{stem}_std.pvol")
    write_volume(Volume(report.voxelwise_mean.astype(np.float32)), mean_path)
    write_volume(Volume(report.voxelwise_std.astype(np.float32)), std_path)
    _write_pair_csv(os.path.join(out_dir, f"{stem}_pairs.csv"), report.pairs)
    d = report.summary()
    d["mean_map"] = mean_path
    d["std_map"] = std_path
    d["pairs_csv"] = os.path.join(out_dir, f"{stem}_pairs.csv")
    return d


def cmd_metrics(args):
    if len(args.samples) < 2:
        raise UsageError("metrics needs at least 2 --samples")
    vols = []
    for p in args.samples:
        if not os.path.exists(p):
            raise UsageError(f"sample {p!r} does not exist")
        vols.append(read_volume(p))
    mask = read_mask(args.mask) if args.mask else None
    os.makedirs(args.out, exist_ok=True)
    report = diversity_report(vols, mask, bins=args.bins)
    payload = {"diversity": _metrics_payload(report, args.out, "diversity")}
    if args.reference:
        ref = read_volume(args.reference)
        rows = []
        for p, v in zip(args.samples, vols):
            row = {"sample": p, "ms_ssim_all": ms_ssim(v, ref)}
            if mask is not None:
                row["ms_ssim_inside"] = ms_ssim(v, ref, mask, "inside")
                row["ms_ssim_outside"] = ms_ssim(v, ref, mask, "outside")
            rows.append(row)
        payload["ms_ssim"] = rows
    _write_json(os.path.join(args.out, "metrics.json"), payload)
    print(json.dumps(payload["diversity"], indent=2, sort_keys=True))
    return 0


def cmd_mask_gen(args):
    dims = tuple(args.dims)
    rng = np.random.default_rng(args.seed)
    if args.volume is None and args.distribution is None:
        raise UsageError("mask gen needs --volume or --distribution")
    if args.volume is not None:
        target = args.volume
    else:
        target = sample_target_volume(load_distribution(args.distribution, args.jitter), rng)
    if target < 1 or target > int(np.prod(dims)):
        raise UsageError(f"target volume {target} does not fit a {dims} grid")
    m = grow_connected_mask(dims, target, rng)
    write_volume(m, args.out)
    print(f"{args.out}: {m.count} voxels")
    return 0


def cmd_mask_check(args):
    m = read_mask(args.path)
    ok = check_6_connected(m)
    print(json.dumps({"path": args.path, "voxels": m.count, "six_connected": ok}))
    return 0 if ok else 1


def _experiment_inputs(args):
    run_a = _load_run(args.config_a)
    run_b = _load_run(args.config_b)
    fa, fb = run_a.flat(), run_b.flat()
    diff = sorted(k for k in fa if fa[k] != fb[k] and k != "conditioning_mode")
    if diff:
        raise UsageError(f"configs must differ only in conditioning_mode; also differ in {diff}")
    modes = {run_a.train.conditioning_mode, run_b.train.conditioning_mode}
    if modes != {"fixed_pathology", "random_connected"}:
        raise UsageError("one config must use fixed_pathology and the other random_connected")
    if args.repeats < 2:
        raise UsageError("--repeats must be >= 2")
    return run_a, run_b


def cmd_diversity_experiment(args):
    run_a, run_b = _experiment_inputs(args)
    examples, dist = _dataset_and_distribution(args.data_dir)
    if len(examples) < 2:
        raise UsageError("need at least 2 cases: the last one is held out as the condition")
    train_set, held = examples[:-1], examples[-1]
    if dist is not None:
        dist = VolumeDistribution(dist.samples[:-1], dist.jitter_fraction)
    else:
        dist = VolumeDistribution(tuple(ex.pathology_mask.count for ex in train_set))
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    result = {"strategies": {}, "seed": args.seed, "repeats": args.repeats, "stub": args.stub}
    for run in (run_a, run_b):
        mode = run.train.conditioning_mode
        if args.seed is not None:
            from dataclasses import replace
            run = replace(run, train=replace(run.train, seed=args.seed))
        sub = os.path.join(args.out, mode)
        os.makedirs(sub, exist_ok=True)
        ckpt_path = os.path.join(sub, "checkpoint.pwdr")
        if args.stub:
            ckpt = Checkpoint(run.net, run.schedule_params(), DenoiserParams(run.net))
            save_checkpoint(ckpt, ckpt_path)
        else:
            log.info("training %s", mode)
            _, losses = train(train_set, run, dist, checkpoint_path=ckpt_path,
                              progress=_progress(args.log_every))
            write_loss_csv(losses, os.path.join(sub, "loss.csv"))
        ckpt = load_checkpoint(ckpt_path)
        # zero networks sample exact zeros; compositing keeps the stub outputs non-degenerate
        req = SampleRequest(held.image, held.pathology_mask, steps=run.T,
                            seed=run.train.seed, repeats=args.repeats, hard_composite=args.stub)
        log.info("sampling %s (%d repeats)", mode, args.repeats)
        vols = sample(ckpt, req)
        write_samples(vols, os.path.join(sub, "sample"), sidecar_meta(ckpt_path, req))
        # stub outputs are zero outside the lesion, where cosine is undefined
        report = diversity_report(vols, None if args.stub else held.pathology_mask)
        result["strategies"][mode] = _metrics_payload(report, sub, "diversity")
    a = result["strategies"]["fixed_pathology"]
    b = result["strategies"]["random_connected"]
    result["delta_cosine"] = b["cosine_mean"] - a["cosine_mean"]
    result["delta_kl"] = b["kl_mean"] - a["kl_mean"]
    result["runtime_seconds"] = time.perf_counter() - t0
    _write_json(os.path.join(args.out, "experiment.json"), result)
    print(json.dumps({k: result[k] for k in ("delta_cosine", "delta_kl")}, sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="powdr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantoms", help="write a synthetic phantom dataset")
    g.add_argument("--count", type=int, default=32)
    g.add_argument("--size", type=int, default=16, help="cube edge length (even)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--lesion-min", type=int, default=10)
    g.add_argument("--lesion-max", type=int, default=60)
    g.add_argument("--texture", type=float, default=0.05)
    g.set_defaults(func=cmd_gen_phantoms)

    t = sub.add_parser("train", help="train a conditional wavelet denoiser")
    t.add_argument("--config", required=True)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out", required=True, help="output directory (checkpoint.pwdr, loss.csv)")
    t.add_argument("--distribution", help="lesion volumes, one integer per line")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw conditioned samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--condition", required=True, help="intensity volume holding the pathology")
    s.add_argument("--mask", required=True, help="pathology mask")
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, help="must equal the checkpoint's T (default: T)")
    s.add_argument("--hard-composite", action="store_true")
    s.add_argument("--clamp", action="store_true", help="clamp outputs to [0, 1]")
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("metrics", help="diversity and MS-SSIM report for a set of samples")
    m.add_argument("--samples", nargs="+", required=True)
    m.add_argument("--mask")
    m.add_argument("--reference", help="volume to compare each sample against with MS-SSIM")
    m.add_argument("--bins", type=int, default=50)
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_metrics)

    k = sub.add_parser("mask", help="random connected masks")
    ksub = k.add_subparsers(dest="mask_command", required=True)
    kg = ksub.add_parser("gen", help="grow a random 6-connected mask")
    kg.add_argument("--dims", type=int, nargs=3, default=[16, 16, 16], metavar=("H", "W", "D"))
    kg.add_argument("--volume", type=int, help="exact voxel count")
    kg.add_argument("--distribution", help="reference volumes file (one integer per line)")
    kg.add_argument("--jitter", type=float, default=0.1)
    kg.add_argument("--seed", type=int, default=0)
    kg.add_argument("--out", required=True)
    kg.set_defaults(func=cmd_mask_gen)
    kc = ksub.add_parser("check", help="exit 0 iff the mask is one 6-connected component")
    kc.add_argument("path")
    kc.set_defaults(func=cmd_mask_check)

    d = sub.add_parser("diversity-experiment",
                       help="train both conditioning strategies and compare sample diversity")
    d.add_argument("--data-dir", required=True, help="phantom dir; the last case is held out")
    d.add_argument("--config-a", required=True)
    d.add_argument("--config-b", required=True)
    d.add_argument("--repeats", type=int, default=10)
    d.add_argument("--seed", type=int, help="overrides the configs' seed")
    d.add_argument("--stub", action="store_true", help="skip training; use all-zero networks")
    d.add_argument("--log-every", type=int, default=500)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diversity_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    log.debug("kernel backend: %s", _backend.BACKEND)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"powdr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"powdr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
