"""``pisf`` command-line interface.

Each subcommand is a thin adapter over a library call. Exit status is 0 on
success, 1 for invalid input or configuration and 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import arrayio, metrics, physim, recon2d, sampling, unroll
from .fourier import fft2c

logger = logging.getLogger("pisf")

CONFIG_SECTIONS = {
    "synth": {f.name for f in fields(physim.SynthConfig)},
    "train": {f.name for f in fields(unroll.TrainConfig)},
    "recon": {f.name for f in fields(recon2d.ReconOptions)} - {"jobs"},
    "eval": {"window"},
}
MASK_TYPES = ("cartesian1d", "partial-fourier") + sampling.SCHEMES_2D


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_run_config(path):
    """Read and schema-check a run configuration (sections ``synth``, ``train``, ``recon``, ``eval``)."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: top level must be an object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    for section, body in cfg.items():
        if not isinstance(body, dict):
            raise ValueError(f"{path}: section {section!r} must be an object")
        bad = set(body) - CONFIG_SECTIONS[section]
        if bad:
            raise ValueError(f"{path}: unknown keys in {section!r}: {sorted(bad)}")
    return cfg


def _merge(base, overrides):
    out = dict(base)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _echo(out_dir, command, effective):
    arrayio.write_json(Path(out_dir) / "effective_config.json", {"command": command, "config": effective})


def _echo_file(out_path, command, effective):
    arrayio.write_json(str(out_path) + ".config.json", {"command": command, "config": effective})


def _pair(text):
    parts = [int(p) for p in str(text).lower().split("x")]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) == 2:
        return parts[0], parts[1]
    raise ValueError(f"size must be N or HxW, got {text!r}")


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg):
    flags = {
        "sample_count": args.count,
        "signal_length": args.n,
        "image_rows": args.rows,
        "af": args.af,
        "acs_width": args.acs,
        "snr_range_db": tuple(args.snr) if args.snr else None,
        "magnitude_kinds": tuple(args.source) if args.source else None,
        "corpus_dir": args.corpus,
        "ncoils": args.ncoils,
        "n_magnitudes": args.magnitudes,
        "n_coil_sets": args.coil_sets,
        "train_fraction": args.train_fraction,
        "master_seed": args.seed,
        "jobs": args.jobs,
    }
    effective = _merge(cfg.get("synth", {}), flags)
    config = physim.SynthConfig.from_dict(effective)
    manifest = physim.build_dataset(config, args.out)
    _echo(args.out, "synth", config.to_dict())
    logger.info("dataset: %d train / %d val samples", manifest.n_train, manifest.n_val)


def cmd_train(args, cfg):
    flags = {
        "epochs": args.epochs,
        "batch_size": args.batch,
        "lr": args.lr,
        "lr_decay": args.lr_decay,
        "K": args.K,
        "variant": args.variant,
        "shared": False if args.per_phase else None,
        "normalize": False if args.no_normalize else None,
        "seed": args.seed,
    }
    config = unroll.TrainConfig.from_dict(_merge(cfg.get("train", {}), flags))
    config.validate()
    manifest = arrayio.load_manifest(args.data)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    _echo(args.out, "train", asdict(config))
    model, history = unroll.train(manifest, config, args.out)
    model.save(Path(args.out) / "final", asdict(config))
    logger.info("final validation loss %.6g", history[-1]["val_loss"])


def cmd_mask(args, cfg):
    t = args.type
    if t == "cartesian1d":
        _need(args, "n", "af", "acs")
        mask = sampling.make_cartesian_1d(args.n, args.af, args.acs, args.seed)
    elif t == "partial-fourier":
        _need(args, "n", "fraction")
        mask = sampling.make_partial_fourier_1d(args.n, args.fraction, args.acs or 0)
    else:
        _need(args, "rows", "cols", "af", "acs")
        mask = sampling.make_random_2d(args.rows, args.cols, args.af, args.acs, t, args.seed)
    sampling.save_mask(args.out, mask)
    logger.info("mask: %d of %d points sampled (AF %.4g)", mask.sampled.sum(), mask.sampled.size,
                sampling.achieved_af(mask))


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"--type {args.type} requires " + ", ".join(f"--{m}" for m in missing))


def cmd_phantom(args, cfg):
    h, w = _pair(args.size)
    scene = physim.simulate_scene(args.kind, (h, w), args.coils, args.seed, corpus_dir=args.corpus)
    k = fft2c(scene.X).astype(np.complex64)
    arrayio.write_array(args.out, k)
    if args.image_out:
        arrayio.write_array(args.image_out, recon2d.sos_combine(scene.X).astype(np.float32))
    if args.maps_out:
        physim.save_coil_maps(args.maps_out, scene.S)
    _echo_file(args.out, "phantom", {"kind": args.kind, "size": [h, w], "coils": args.coils, "seed": args.seed})


def _load_volume(kspace_path, mask_path):
    data = arrayio.read_array(kspace_path)
    if not np.iscomplexobj(data) or data.ndim != 3:
        raise ValueError(f"{kspace_path}: expected complex (coils, rows, cols) k-space")
    mask = sampling.load_mask(mask_path) if mask_path else np.ones(data.shape[1:], dtype=bool)
    return recon2d.KspaceVolume.from_full(data, mask)


def cmd_recon(args, cfg):
    spirit = {"on": True, "off": False, "auto": None}[args.spirit] if args.spirit else None
    flags = {
        "variant": args.variant,
        "mask_kind": args.mask_kind,
        "K": args.K,
        "spirit": spirit,
        "trace": True if args.trace else None,
        "axis": args.axis,
        "averaged": True if args.averaged else None,
    }
    effective = _merge(cfg.get("recon", {}), flags)
    opts = recon2d.ReconOptions(**effective, jobs=args.jobs)
    Y = _load_volume(args.kspace, args.mask)
    if args.compress:
        Y, energy = recon2d.compress_coils(Y, args.compress)
        logger.info("coil compression kept %.4f of the energy", energy)
    model = unroll.UnrolledModel.load(args.model)
    ref = arrayio.read_array(args.ref) if args.ref else None
    result = recon2d.reconstruct(Y, model, opts, reference=ref)
    arrayio.write_array(args.out, result.sos.astype(np.float32))
    if args.coil_images:
        arrayio.write_array(args.coil_images, result.coil_images.astype(np.complex64))
    if args.trace:
        result.trace.save(args.trace)
        _echo(args.trace, "recon", result.options)
    _echo_file(args.out, "recon", result.options)
    logger.info("reconstruction: %s", result.options)


def _magnitude(a):
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return recon2d.sos_combine(a) if a.ndim == 3 else np.abs(a)
    return recon2d.sos_combine(a) if a.ndim == 3 else a


def cmd_eval(args, cfg):
    ref = _magnitude(arrayio.read_array(args.ref))
    test = _magnitude(arrayio.read_array(args.recon))
    report = metrics.evaluate(ref, test)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_compress(args, cfg):
    Y = _load_volume(args.kspace, args.mask)
    out, energy = recon2d.compress_coils(Y, args.target)
    arrayio.write_array(args.out, out.data)
    print(json.dumps({"coils_in": Y.ncoils, "coils_out": out.ncoils, "retained_energy": energy}))


def cmd_stats(args, cfg):
    manifest = arrayio.load_manifest(args.data)
    stats = physim.intensity_stats(manifest, args.bins)
    text = json.dumps(stats, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


# ------------------------------------------------------------------ parser


def _default_jobs():
    env = os.environ.get("PISF_JOBS")
    if env is None:
        return 1
    try:
        jobs = int(env)
    except ValueError:
        raise UsageError(f"PISF_JOBS must be a positive integer, got {env!r}") from None
    if jobs < 1:
        raise UsageError(f"PISF_JOBS must be a positive integer, got {env!r}")
    return jobs


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--jobs", type=int, default=None, help="worker cap (default $PISF_JOBS or 1)")
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    p = _Parser(prog="pisf", description="Physics-informed synthetic-data MRI reconstruction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="build a paired 1D training dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--n", type=int, help="signal length")
    s.add_argument("--rows", type=int, help="image rows (default: signal length)")
    s.add_argument("--af", type=float)
    s.add_argument("--acs", type=int)
    s.add_argument("--snr", type=float, nargs=2, metavar=("LOW", "HIGH"))
    s.add_argument("--source", action="append", choices=("corpus-file", "shepp-logan", "procedural-blobs"))
    s.add_argument("--corpus")
    s.add_argument("--ncoils", type=int)
    s.add_argument("--magnitudes", type=int)
    s.add_argument("--coil-sets", type=int)
    s.add_argument("--train-fraction", type=float)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train the unrolled network")
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--K", type=int)
    t.add_argument("--variant", choices=unroll.VARIANTS)
    t.add_argument("--per-phase", action="store_true", help="separate weights for every phase")
    t.add_argument("--no-normalize", action="store_true")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mask", parents=[common], help="write a sampling mask")
    m.add_argument("--type", required=True, choices=MASK_TYPES)
    m.add_argument("--n", type=int)
    m.add_argument("--rows", type=int)
    m.add_argument("--cols", type=int)
    m.add_argument("--af", type=float)
    m.add_argument("--fraction", type=float)
    m.add_argument("--acs", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mask)

    ph = sub.add_parser("phantom", parents=[common], help="write fully sampled multi-coil k-space of a scene")
    ph.add_argument("--kind", default="shepp-logan", choices=("shepp-logan", "procedural-blobs", "corpus-file"))
    ph.add_argument("--size", default="128")
    ph.add_argument("--coils", type=int, default=8)
    ph.add_argument("--corpus")
    ph.add_argument("--out", required=True)
    ph.add_argument("--image-out", help="also write the root-sum-of-squares reference image")
    ph.add_argument("--maps-out", help="also write the coil sensitivity maps")
    ph.set_defaults(func=cmd_phantom)

    r = sub.add_parser("recon", parents=[common], help="reconstruct undersampled multi-coil k-space")
    r.add_argument("--kspace", required=True)
    r.add_argument("--mask")
    r.add_argument("--model", required=True, help="checkpoint directory")
    r.add_argument("--variant", choices=("plain", "advanced"))
    r.add_argument("--spirit", choices=("on", "off", "auto"))
    r.add_argument("--mask-kind", choices=("1d", "2d"))
    r.add_argument("--K", type=int)
    r.add_argument("--axis", type=int)
    r.add_argument("--averaged", action="store_true", help="average row and column passes for 2D masks")
    r.add_argument("--compress", type=int, metavar="COILS")
    r.add_argument("--ref", help="reference image for per-phase PSNR in the trace")
    r.add_argument("--trace", metavar="DIR")
    r.add_argument("--coil-images")
    r.add_argument("--out", required=True, help="root-sum-of-squares output image")
    r.set_defaults(func=cmd_recon)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a reconstruction against a reference")
    e.add_argument("--recon", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compress", parents=[common], help="SVD coil compression")
    c.add_argument("--kspace", required=True)
    c.add_argument("--mask")
    c.add_argument("--target", type=int, default=8)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    st = sub.add_parser("stats", parents=[common], help="intensity histogram of a dataset")
    st.add_argument("--data", required=True)
    st.add_argument("--bins", type=int, default=50)
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        if args.jobs is None:
            args.jobs = _default_jobs()
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_run_config(args.config)
    except UsageError as exc:
        print(f"pisf: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"pisf: error: {exc}", file=sys.stderr)
        return 1
    try:
        args.func(args, cfg)
    except (ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        logger.error("runtime failure: %s", exc, exc_info=logger.isEnabledFor(logging.DEBUG))
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
