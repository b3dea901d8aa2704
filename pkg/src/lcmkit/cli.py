"""Operator-facing command line: the batch interface to the whole pipeline.

One binary, subcommands for data preparation, training, restoration,
evaluation, gradient checking, the model-comparison study and the kernel
benchmark.  Every run directory is content-addressed by the hash of the
effective configuration, which is also echoed into the directory, so reruns
never silently overwrite and are reproducible from the echo alone.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data, degrade, gradcheck, metrics, nets, restore, train
from . import tensor as T
from ._kernels import backend_name, conv_numba, conv_numpy
from .data import CheckpointError
from .restore import DivergenceError, RestoreConfig
from .tensor import ContractError, GeometryError, ShapeError, TensorMap
from .train import NumericsError, TrainConfig

VALIDATION_ERRORS = (ValueError, ShapeError, GeometryError, ContractError,
                     CheckpointError, FileNotFoundError, NotADirectoryError,
                     IsADirectoryError, OSError, KeyError)
NUMERICAL_ERRORS = (NumericsError, DivergenceError)


def _worker_count(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    return max(1, int(os.environ.get("LCMKIT_THREADS", "1")))


def _load_config_file(path, known: dict) -> dict:
    raw = json.loads(Path(path).read_text())
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return raw


def _effective_config(args, keys, config_flag="config") -> dict:
    """Merge flag > config file > default for the listed keys."""
    defaults = {k: d for k, d in keys.items()}
    merged = dict(defaults)
    path = getattr(args, config_flag, None)
    if path:
        merged.update(_load_config_file(path, defaults))
    for k in keys:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            merged[k] = v
    return merged


def _run_dir(base, cfg: dict) -> Path:
    blob = json.dumps(cfg, sort_keys=True).encode()
    digest = hashlib.sha256(blob).hexdigest()[:12]
    out = Path(base) / digest
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective-config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return out


def _parse_shape(text: str):
    parts = [int(p) for p in text.lower().split("x")]
    if len(parts) != 3:
        raise ValueError(f"shape must be CxHxW, got {text!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare_data(args) -> int:
    manifest, skipped = data.build_manifest(args.src, _parse_shape(args.shape))
    manifest.save(args.out)
    print(f"wrote {args.out}: {len(manifest.entries)} entries, {skipped} skipped")
    return 0


TRAIN_KEYS = {
    "manifest": None, "variant": "lcm", "preset": "toy32", "epochs": 100,
    "steps": None, "batch_size": 8, "lr_latent": 1.0, "lr_generator": 1.0,
    "lr_glo": 10.0, "seed": 0, "box": 0.01, "pyramid_levels": None,
    "checkpoint_every": 0, "vector_dim": 64,
}


def _train_config(cfg: dict) -> TrainConfig:
    fields = {k: v for k, v in cfg.items() if k not in ("manifest", "variant")}
    if fields.get("steps") is not None:
        fields["epochs"] = 1
    return TrainConfig(**fields)


def cmd_train(args) -> int:
    cfg = _effective_config(args, TRAIN_KEYS)
    if not cfg["manifest"]:
        raise ValueError("a dataset manifest is required (--manifest or config file)")
    out = _run_dir(args.out, cfg)
    manifest = data.DatasetManifest.load(cfg["manifest"])
    images = np.concatenate([t.data for t in manifest.load_images()], axis=0)
    state = train.train(images, _train_config(cfg), cfg["variant"], out_dir=out,
                        manifest_hash=manifest.hash(),
                        latent_ids=[i for i, _ in manifest.entries])
    final = state.loss_history[-1][2]
    print(f"trained {cfg['variant']} on {images.shape[0]} images: "
          f"final epoch loss {final:.5f}")
    print(f"run dir: {out}")
    return 0


RESTORE_KEYS = {
    "checkpoint": None, "task": "inpaint", "mask": "center:50", "factor": 8,
    "mode": "manifold", "steps": 2000, "lr": None, "latent_penalty": 0.0,
    "seed": 0,
}


def _build_mask(text: str, h: int, w: int, seed: int) -> np.ndarray:
    kind, _, arg = text.partition(":")
    if kind == "center":
        hole = int(arg or 50)
        return degrade.center_mask(h, w, hole, hole)
    if kind == "half":
        return degrade.half_mask(h, w, arg or "right")
    if kind == "random":
        return degrade.random_mask(h, w, float(arg or 0.95), seed)
    if kind == "file":
        return degrade.load_mask_png(arg)
    raise ValueError(f"unknown mask spec {text!r}")


def _build_degradation(cfg: dict, h: int, w: int) -> degrade.DegradationSpec:
    task = cfg["task"]
    if task == "inpaint":
        return degrade.DegradationSpec(
            "inpaint", mask=_build_mask(cfg["mask"], h, w, cfg["seed"]),
            latent_penalty=cfg["latent_penalty"])
    if task == "sr":
        return degrade.DegradationSpec("superres", factor=cfg["factor"],
                                       latent_penalty=cfg["latent_penalty"])
    if task == "color":
        return degrade.DegradationSpec("colorize",
                                       latent_penalty=cfg["latent_penalty"])
    raise ValueError(f"unknown task {task!r} (expected inpaint, sr or color)")


def _evidence_for(img: TensorMap, spec) -> TensorMap:
    degraded_shape = degrade.apply_degradation(img.data, spec).shape
    if img.data.shape == degraded_shape:
        return img
    return TensorMap(degrade.apply_degradation(img.data, spec))


def _restore_one(ck, spec, cfg, y: TensorMap):
    rc = RestoreConfig(steps=cfg["steps"], lr=cfg["lr"], seed=cfg["seed"],
                       latent_penalty=cfg["latent_penalty"])
    mode = cfg["mode"]
    if mode == "manifold":
        if ck.latent_arch is None:
            raise ValueError("checkpoint has no latent architecture; use --mode glo")
        return restore.restore_manifold(ck.generator, ck.latent_arch, ck.noise,
                                        y, spec, rc)
    if mode == "zspace":
        if ck.latent_arch is None:
            raise ValueError("checkpoint has no latent architecture; use --mode glo")
        return restore.restore_zspace(ck.generator, ck.latent_arch, ck.noise,
                                      y, spec, rc)
    if mode == "glo":
        kind = "vector" if ck.generator.vector_dim is not None else "map"
        return restore.restore_glo(ck.generator, y, spec, rc, kind=kind)
    raise ValueError(f"unknown mode {mode!r}")


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "energy"])
        for i, e in enumerate(trace):
            w.writerow([i, f"{e:.10g}"])


def cmd_restore(args) -> int:
    cfg = _effective_config(args, RESTORE_KEYS)
    if not cfg["checkpoint"]:
        raise ValueError("--checkpoint is required")
    ck = data.load_checkpoint(cfg["checkpoint"])
    shape = ck.generator.arch.output_shape
    out = _run_dir(args.out, cfg | {"image": str(args.image)})
    spec = _build_degradation(cfg, shape[1], shape[2])
    if spec.kind == "inpaint":
        degrade.save_mask_png(spec.mask, out / "mask.png")

    image_path = Path(args.image)
    paths = sorted(p for p in image_path.iterdir()
                   if p.suffix == ".png") if image_path.is_dir() else [image_path]
    if not paths:
        raise ValueError(f"no PNG images under {image_path}")

    def job(p):
        img = data.load_image(p, shape)
        y = _evidence_for(img, spec)
        job_cfg = dict(cfg, seed=cfg["seed"])
        res = _restore_one(ck, spec, job_cfg, y)
        data.save_image(res.image, out / f"{p.stem}_restored.png")
        data.save_image(y, out / f"{p.stem}_evidence.png")
        _write_trace(out / f"{p.stem}_trace.csv", res.energy_trace)
        return p.stem, res

    workers = _worker_count(args)
    if workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, paths))
    else:
        results = [job(p) for p in paths]
    for stem, res in results:
        print(f"{stem}: mode={res.mode} best_energy={res.best_energy:.6g} "
              f"known_mse={res.final_known_mse:.6g} ({res.wall_clock:.1f}s)")
    print(f"run dir: {out}")
    return 0


def cmd_eval(args) -> int:
    restored_dir, truth_dir = Path(args.restored), Path(args.truth)
    restored = sorted(restored_dir.glob("*_restored.png"))
    if not restored:
        raise ValueError(f"no *_restored.png files in {restored_dir}")
    mask = degrade.load_mask_png(args.mask) if args.mask else None
    results, truths, specs, ids = [], [], [], []
    for rp in restored:
        stem = rp.name[:-len("_restored.png")]
        tp = truth_dir / f"{stem}.png"
        if not tp.exists():
            raise ValueError(f"missing ground truth for {stem!r}: {tp}")
        truth = data.load_image(tp, _parse_shape(args.shape))
        img = data.load_image(rp, _parse_shape(args.shape))
        if mask is not None:
            spec = degrade.DegradationSpec("inpaint", mask=mask)
        else:
            spec = degrade.DegradationSpec("colorize" if args.task == "color"
                                           else "superres" if args.task == "sr"
                                           else "inpaint",
                                           mask=np.ones(truth.shape[2:],
                                                        dtype=np.float32),
                                           factor=args.factor)
        results.append(img)
        truths.append(truth)
        specs.append(spec)
        ids.append(stem)
    report = metrics.evaluate(results, truths, specs, ids=ids)
    report.write_csv(args.out)
    agg = report.aggregate()
    print(f"wrote {args.out}; mean full-image MSE {agg['mse_full']:.6g}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(tolerance=args.tolerance, instances=args.instances,
                                  seed=args.seed,
                                  inject_sign_flip=args.inject_sign_flip)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status}  {r.name:22s} instances={r.instances} "
              f"max_rel_err={r.max_rel_err:.3e}")
    print("gradcheck", "passed" if ok else "FAILED")
    return 0 if ok else 1


COMPARE_KEYS = {
    "images": 48, "size": 32, "preset": "toy32", "steps": 800, "batch_size": 8,
    "seed": 0, "vector_dims": "64,128,256", "restore_steps": 400,
    "restore_images": 6, "data_seed": 7,
}


def cmd_compare(args) -> int:
    cfg = _effective_config(args, COMPARE_KEYS)
    out = _run_dir(args.out, cfg)
    images = data.synthetic_images(cfg["images"], cfg["size"], seed=cfg["data_seed"])
    dims = [int(d) for d in str(cfg["vector_dims"]).split(",")]

    def tcfg(vdim=64):
        return TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"],
                           preset=cfg["preset"], seed=cfg["seed"], vector_dim=vdim)

    rows = []
    states = {}
    for variant, vdim in [("lcm", None), ("glo_map", None)] + \
            [("glo_vector", d) for d in dims]:
        state = train.train(images, tcfg(vdim or 64), variant)
        label = variant if vdim is None else f"{variant}:{vdim}"
        states[label] = state
        rows.append((label, vdim or "", state.loss_history[-1][2]))
        print(f"{label:16s} final train loss {rows[-1][2]:.5f}")
    with open(out / "compare_train.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "vector_dim", "train_loss"])
        w.writerows(rows)

    # manifold vs z-space restoration, equal budget, same seeds
    lcm = states["lcm"]
    hole = max(2, int(round(cfg["size"] * 50 / 128)))
    spec = degrade.DegradationSpec(
        "inpaint", mask=degrade.center_mask(cfg["size"], cfg["size"], hole, hole))
    rst_rows = []
    for mode in ("manifold", "zspace"):
        known, holes = [], []
        for i in range(cfg["restore_images"]):
            y = TensorMap(degrade.apply_degradation(images[i:i + 1], spec))
            rc = RestoreConfig(steps=cfg["restore_steps"], seed=100 + i)
            if mode == "manifold":
                res = restore.restore_manifold(lcm.generator, lcm.latent_arch,
                                               lcm.noise, y, spec, rc)
            else:
                res = restore.restore_zspace(lcm.generator, lcm.latent_arch,
                                             lcm.noise, y, spec, rc)
            known.append(metrics.mse_region(res.image.data, images[i:i + 1],
                                            spec.mask, "known"))
            holes.append(metrics.mse_region(res.image.data, images[i:i + 1],
                                            spec.mask, "hole"))
        rst_rows.append((mode, float(np.mean(known)), float(np.mean(holes))))
        print(f"restore {mode:9s} known={rst_rows[-1][1]:.6f} hole={rst_rows[-1][2]:.6f}")
    with open(out / "compare_restore.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "mse_known", "mse_hole"])
        w.writerows(rst_rows)
    print(f"run dir: {out}")
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(0)
    shapes = [((8, 8, 8, 8), (24, 8, 3, 3), 1, 1),
              ((8, 24, 16, 16), (32, 24, 3, 3), 2, 1),
              ((8, 16, 32, 32), (16, 16, 3, 3), 1, 1)]
    print(f"active backend: {backend_name()}")
    print(f"{'shape':28s} {'kernel':16s} {'numba ms':>9s} {'numpy ms':>9s} {'speedup':>8s}")
    for xs, ws, stride, pad in shapes:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        g = np.ascontiguousarray(conv_numpy.conv2d_forward(x, w, stride, pad))
        for name, fn_nb, fn_np, fargs in (
                ("forward", conv_numba.conv2d_forward, conv_numpy.conv2d_forward,
                 (x, w, stride, pad)),
                ("backward_dx", conv_numba.conv2d_backward_dx,
                 conv_numpy.conv2d_backward_dx, (g, w, stride, pad, xs[2], xs[3])),
                ("backward_dw", conv_numba.conv2d_backward_dw,
                 conv_numpy.conv2d_backward_dw, (x, g, stride, pad, ws[2], ws[3]))):
            fn_nb(*fargs)   # compile outside the timed region
            t_nb = _time_fn(fn_nb, fargs, args.iters)
            t_np = _time_fn(fn_np, fargs, args.iters)
            print(f"{str(xs):28s} {name:16s} {t_nb * 1e3:9.3f} {t_np * 1e3:9.3f} "
                  f"{t_np / t_nb:8.2f}x")
    return 0


def _time_fn(fn, fargs, iters):
    t0 = time.perf_counter()
    for _ in range(iters):
        fn(*fargs)
    return (time.perf_counter() - t0) / iters


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcmkit",
                                description="latent convolutional image models")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare-data", help="scan a directory into a manifest")
    sp.add_argument("src")
    sp.add_argument("--out", required=True)
    sp.add_argument("--shape", default="3x32x32")
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("train", help="train a generator and its latents")
    sp.add_argument("--config", help="JSON config file; flags override it")
    sp.add_argument("--manifest")
    sp.add_argument("--variant", choices=("lcm", "glo_map", "glo_vector"))
    sp.add_argument("--preset", choices=nets.preset_names())
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr-latent", type=float)
    sp.add_argument("--lr-generator", type=float)
    sp.add_argument("--lr-glo", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--box", type=float)
    sp.add_argument("--pyramid-levels", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--vector-dim", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("restore", help="restore degraded images")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint")
    sp.add_argument("--image", required=True, help="image file or directory")
    sp.add_argument("--task", choices=("inpaint", "sr", "color"))
    sp.add_argument("--mask", help="center:N | half:SIDE | random:FRAC | file:PATH")
    sp.add_argument("--factor", type=int, choices=(2, 4, 8))
    sp.add_argument("--mode", choices=("manifold", "zspace", "glo"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lambda", dest="latent_penalty", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_restore)

    sp = sub.add_parser("eval", help="score restorations against ground truth")
    sp.add_argument("--restored", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--mask", help="mask PNG (0 = missing)")
    sp.add_argument("--task", choices=("inpaint", "sr", "color"), default="inpaint")
    sp.add_argument("--factor", type=int, default=8)
    sp.add_argument("--shape", default="3x32x32")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--tolerance", type=float, default=1e-5)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--inject-sign-flip", action="store_true",
                    help="deliberately corrupt one gradient (self-test)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("compare", help="LCM vs GLO variants vs z-space study")
    sp.add_argument("--config")
    sp.add_argument("--images", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--preset", choices=nets.preset_names())
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--vector-dims")
    sp.add_argument("--restore-steps", type=int)
    sp.add_argument("--restore-images", type=int)
    sp.add_argument("--data-seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("bench", help="numba vs numpy kernel timings")
    sp.add_argument("--iters", type=int, default=20)
    sp.set_defaults(func=cmd_bench)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
