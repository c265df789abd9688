"""``stochflash`` command-line front end.

Verbs: simulate, stats, moments, estimate, compare, shoot, plus phantom for a
synthetic test image. Exit status is 0 on success, 1 for invalid input and 2
when a computation fails numerically.
Every verb is a pure function of its config, input files and seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .dynamics import NoiseBank, NumericalFailure, WienerPath, integrate_flow, sample_images, warp_image
from .estimation import DataMoments, EstimationError, EstimationProblem, THREADS_ENV, estimate
from .io import FormatError, read_image, write_grid, write_image, write_raw_image, write_spectral
from .moments import evolve_moments, moment_images
from .similarity import HistogramConfig, l2_distance, mutual_information, normalized_mutual_information

log = logging.getLogger("stochflash")

MANIFEST = "manifest.json"
CHUNK = 25  # samples integrated together; fixed so output never depends on --threads


class ValidationError(ValueError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _ext(fmt: str) -> str:
    return ".pgm" if fmt == "pgm" else ".raw"


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ValidationError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _image(path, cfg: ExperimentConfig | None = None) -> np.ndarray:
    if not path or not os.path.exists(path):
        raise ValidationError(f"image {path!r} not found")
    img = read_image(path)
    if cfg is not None and img.shape != cfg.grid.shape:
        raise ValidationError(f"image {path} is {img.shape}, config grid is {cfg.grid.shape}")
    return img


def _outdir(path) -> str:
    if not path:
        raise ValidationError("--out is required")
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# simulate


def _simulate_chunk(cfg: ExperimentConfig, bank: NoiseBank, v0, I0, indices):
    return sample_images(I0, v0, bank, [cfg.sample_seed(i) for i in indices], cfg.nsteps, cfg.grid,
                         cfg.kernel, cfg.psi_scheme)


def cmd_simulate(args) -> int:
    cfg = _load(args)
    I0 = _image(args.image, cfg)
    out = _outdir(args.out)
    v0 = cfg.load_v0()
    bank = NoiseBank(cfg.noise_fields(), cfg.grid)
    n = cfg.samples
    chunks = [list(range(s, min(s + CHUNK, n))) for s in range(0, n, CHUNK)]
    with ThreadPoolExecutor(max_workers=_threads(args)) as ex:
        results = list(ex.map(lambda idx: _simulate_chunk(cfg, bank, v0, I0, idx), chunks))
    samples, failed = [], 0
    for idx, res in zip(chunks, results):
        for i, (img, status) in zip(idx, res):
            rec = {"index": i, "seed": cfg.sample_seed(i), "status": status}
            if img is not None:
                name = f"sample_{i:04d}{_ext(args.format)}"
                write_image(os.path.join(out, name), img, args.format)
                rec.update(file=name, sha256=sha256(os.path.join(out, name)))
            else:
                failed += 1
            samples.append(rec)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(cfg.to_text())
    _write_json(os.path.join(out, MANIFEST), {
        "config": cfg.to_text(),
        "image": {"path": os.path.abspath(args.image), "sha256": sha256(args.image)},
        "format": args.format,
        "samples": samples,
        "failed": failed,
    })
    print(f"simulated {n - failed} of {n} samples ({failed} excluded)")
    return 0


# ---------------------------------------------------------------------------
# stats


def read_dataset(path) -> tuple[list[np.ndarray], dict]:
    mpath = os.path.join(path, MANIFEST)
    if not os.path.exists(mpath):
        raise ValidationError(f"{path} has no {MANIFEST}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    images = []
    for rec in manifest["samples"]:
        if rec["status"] != "ok":
            continue
        f = os.path.join(path, rec["file"])
        if sha256(f) != rec["sha256"]:
            raise ValidationError(f"checksum mismatch for {f}")
        images.append(read_image(f))
    if not images:
        raise ValidationError(f"{path} contains no usable samples")
    return images, manifest


def sample_moments(images: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValidationError(f"sample images differ in size: {sorted(shapes)}")
    stack = np.asarray(images)
    mu = stack.mean(axis=0)
    return mu, ((stack - mu) ** 2).mean(axis=0)


def cmd_stats(args) -> int:
    if args.data:
        images, _ = read_dataset(args.data)
    else:
        images = [_image(p) for p in args.images]
    if not images:
        raise ValidationError("no input images")
    t0 = [_image(p) for p in (args.t0 or [])]
    mu, var = sample_moments(images)
    if t0:
        I0hat, _ = sample_moments(t0)
        if I0hat.shape != mu.shape:
            raise ValidationError("t=0 images differ in size from the samples")
    out = _outdir(args.out)
    write_raw_image(os.path.join(out, "mean.raw"), mu)
    write_raw_image(os.path.join(out, "var.raw"), var)
    if args.format == "pgm":
        write_image(os.path.join(out, "mean.pgm"), mu, "pgm")
        write_image(os.path.join(out, "var.pgm"), var, "pgm", 0.0, max(float(var.max()), 1e-300))
    if t0:
        write_raw_image(os.path.join(out, "I0hat.raw"), I0hat)
    print(f"n={len(images)} mean range [{mu.min():.6g}, {mu.max():.6g}] max var {var.max():.6g}")
    return 0


# ---------------------------------------------------------------------------
# moments


def cmd_moments(args) -> int:
    cfg = _load(args)
    I0 = _image(args.image, cfg)
    out = _outdir(args.out)
    bank = NoiseBank(cfg.noise_fields(), cfg.grid)
    sol = evolve_moments(cfg.load_v0(), bank, cfg.nsteps, cfg.grid, cfg.kernel)
    im = moment_images(I0, sol.final, cfg.grid)
    write_raw_image(os.path.join(out, "mean_image.raw"), im.mean_image)
    write_raw_image(os.path.join(out, "var_image.raw"), im.var_image)
    if args.format == "pgm":
        write_image(os.path.join(out, "mean_image.pgm"), im.mean_image, "pgm")
        write_image(os.path.join(out, "var_image.pgm"), im.var_image, "pgm", 0.0,
                    max(float(im.var_image.max()), 1e-300))
    write_grid(os.path.join(out, "mean_psi.dgf"), sol.final.mean_psi)
    write_grid(os.path.join(out, "var_psi.dgf"), sol.final.var_psi)
    write_spectral(os.path.join(out, "mean_v.sfv"), sol.final.mean_v, cfg.grid)
    print(f"max var_psi {sol.final.var_psi.max():.6g}, max var_image {im.var_image.max():.6g}")
    return 0


# ---------------------------------------------------------------------------
# estimate


def cmd_estimate(args) -> int:
    cfg = _load(args)
    if not cfg.noise:
        raise ValidationError("config declares no noise fields")
    images, manifest = read_dataset(args.data)
    image_path = args.image or manifest["image"]["path"]
    I0 = _image(image_path, cfg)
    if images[0].shape != cfg.grid.shape:
        raise ValidationError("dataset images do not match the config grid")
    out = _outdir(args.out)
    data = DataMoments.from_samples(images, I0)
    problem = EstimationProblem(data, cfg.grid, [n.mu for n in cfg.noise], cfg.kernel, cfg.load_v0(), cfg.nsteps,
                                cfg.estimate.bins)
    e = cfg.estimate
    res = estimate(problem, [n.tau for n in cfg.noise], [n.lam for n in cfg.noise], e.tau_bounds,
                   e.lambda_bounds, e.lambda_init, e.trials, cfg.seed, e.skip_lambda, e.max_iter, _threads(args))
    res.stage1.write_csv(os.path.join(out, "trace_tau.csv"))
    if res.stage2 is not None:
        res.stage2.write_csv(os.path.join(out, "trace_lambda.csv"))
    try:
        truth = parse_config(manifest["config"]).noise
    except (ConfigError, KeyError):
        truth = None
    lines = ["field,mu_x,mu_y,tau,lambda,low_information,tau_true,lambda_true,tau_relerr,lambda_relerr"]
    for k, n in enumerate(cfg.noise):
        t, l = res.params.taus[k], res.params.lambdas[k]
        row = [n.name, repr(n.mu[0]), repr(n.mu[1]), repr(float(t)), repr(float(l)), str(bool(res.low_information[k]))]
        if truth is not None and k < len(truth) and truth[k].tau is not None:
            tt, lt = truth[k].tau, truth[k].lam
            row += [repr(tt), repr(lt), f"{(t - tt) / tt:.6f}", f"{(l - lt) / lt:.6f}" if lt else ""]
        else:
            row += ["", "", "", ""]
        lines.append(",".join(row))
    with open(os.path.join(out, "params.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    stall = [t.stage for t in (res.stage1, res.stage2) if t is not None and t.stalled]
    print("\n".join(lines))
    if stall:
        print(f"warning: descent stalled at its starting point in stage(s) {', '.join(stall)}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# compare / shoot


def cmd_compare(args) -> int:
    A, B = _image(args.a), _image(args.b)
    if A.shape != B.shape:
        raise ValidationError(f"image sizes differ: {A.shape} vs {B.shape}")
    h = HistogramConfig(args.bins, None if args.auto_range else (0.0, 1.0))
    fn = {"l2": lambda: l2_distance(A, B), "mi": lambda: mutual_information(A, B, h),
          "nmi": lambda: normalized_mutual_information(A, B, h)}[args.measure]
    print(f"{fn():.12g}")
    return 0


def cmd_shoot(args) -> int:
    cfg = _load(args)
    I0 = _image(args.image, cfg)
    out = _outdir(args.out)
    try:
        times = sorted({float(t) for t in args.times.split(",")})
    except ValueError as exc:
        raise ValidationError(f"bad --times {args.times!r}") from exc
    if any(not 0 <= t <= 1 for t in times):
        raise ValidationError("--times must lie in [0, 1]")
    steps = [int(round(t * cfg.nsteps)) for t in times]
    bank = NoiseBank(cfg.noise_fields(), cfg.grid)
    inc = WienerPath(cfg.sample_seed(0), cfg.nsteps, len(bank)).increments
    tr = integrate_flow(cfg.load_v0(), bank, inc, cfg.nsteps, cfg.grid, cfg.kernel, keep=steps,
                        psi_scheme=cfg.psi_scheme)
    for n, psi in zip(steps, tr.psi):
        tag = f"t{n / cfg.nsteps:.3f}"
        write_image(os.path.join(out, f"image_{tag}{_ext(args.format)}"), warp_image(I0, psi, cfg.grid), args.format)
        write_grid(os.path.join(out, f"psi_{tag}.dgf"), psi)
    print(f"wrote {len(steps)} time points to {out}")
    return 0


def cmd_phantom(args) -> int:
    from .fourier import GridSpec
    from .synth import blob_phantom

    if args.size < 8:
        raise ValidationError("--size must be at least 8")
    out = _outdir(args.out)
    img = blob_phantom(GridSpec(args.size, args.size, 2))
    path = os.path.join(out, f"I0{_ext(args.format)}")
    write_image(path, img, args.format)
    print(path)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config's master seed")
    common.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--format", choices=("pgm", "raw"), default="raw", help="image output format")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="stochflash", description="Stochastic FLASH deformations and moment matching.")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", parents=[common], help="sample a population of warped images")
    p.add_argument("--image", required=True, help="initial image I0")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("stats", parents=[common], help="sample mean and variance images")
    p.add_argument("--data", help="dataset directory written by simulate")
    p.add_argument("images", nargs="*", help="explicit image files (instead of --data)")
    p.add_argument("--t0", nargs="*", help="t=0 subject images; their mean is written as I0hat")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("moments", parents=[common], help="solve the moment equations")
    p.add_argument("--image", required=True)
    p.set_defaults(fn=cmd_moments)

    p = sub.add_parser("estimate", parents=[common], help="estimate unknown noise parameters")
    p.add_argument("--data", required=True, help="dataset directory written by simulate")
    p.add_argument("--image", help="initial image (default: the one recorded in the manifest)")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("compare", parents=[common], help="similarity of two images")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--measure", choices=("l2", "mi", "nmi"), default="nmi")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--auto-range", action="store_true", help="bin each image over its own range")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("shoot", parents=[common], help="one stochastic path with intermediate images")
    p.add_argument("--image", required=True)
    p.add_argument("--times", default="0,0.25,0.5,1", help="comma-separated times in [0, 1]")
    p.set_defaults(fn=cmd_shoot)

    p = sub.add_parser("phantom", parents=[common], help="write the synthetic test image I0")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_phantom)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ValidationError, ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalFailure, EstimationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
