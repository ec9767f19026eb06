"""Command-line front end.

Subcommands: phantom (render synthetic subjects), train (fit the small
noise predictor), sample (unconditional chains), inpaint (conditional
completion of one image), register (deformable alignment of two images),
experiment (the full masking-mode grid), report (summarize a results
directory).

Every command is fully determined by its flags plus referenced config
files; seeds are explicit and echoed into outputs. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .diffusion import (
    SIGMA_MODES,
    AnalyticDenoiser,
    MlpDenoiser,
    TrainConfig,
    make_linear_schedule,
    reverse_step,
    sample_gmm,
    save_loss_trace,
    train,
)
from .grid import Image, read_image, read_mask, write_image, write_mask, write_pgm
from .harness import (
    MODES,
    PARTIAL_MARKER,
    load_experiment_config,
    plan_jobs,
    run_and_report,
)
from .phantom import generate, gmm_from_spec, parse_phantom_spec
from .registration import RegParams, log_jacobian, register, write_field
from .repaint import RepaintConfig, inpaint
from .seeds import derive_seed, rng_from_seed

__all__ = ["main", "build_parser"]


def _fmt(x: float) -> str:
    return repr(float(x))


def _add_common(p: argparse.ArgumentParser, out_default: str = ".") -> None:
    p.add_argument("--seed", type=int, default=0,
                   help="master seed; per-item streams are derived from it")
    p.add_argument("--out", default=out_default,
                   help=f"output directory (default: {out_default})")


def _schedule_flags(p: argparse.ArgumentParser, timesteps_default: int | None = 100):
    p.add_argument("--timesteps", type=int, default=timesteps_default,
                   help="number of diffusion steps")
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)


def _model_source_flags(p: argparse.ArgumentParser):
    p.add_argument("--phantom", help="phantom spec file; uses the exact mixture denoiser")
    p.add_argument("--model", help="trained denoiser checkpoint")
    p.add_argument("--gmm-components", type=int, default=512,
                   help="mixture size for the exact denoiser (with --phantom)")


def _load_denoiser(args):
    """(model, schedule, image shape) from --phantom or --model."""
    if bool(args.phantom) == bool(args.model):
        raise ValueError("exactly one of --phantom or --model is required")
    if args.model:
        model = MlpDenoiser.load(args.model)
        if args.timesteps is not None and args.timesteps != model.timesteps:
            raise ValueError(
                f"--timesteps {args.timesteps} conflicts with checkpoint "
                f"({model.timesteps} steps)"
            )
        sched = make_linear_schedule(args.beta_start, args.beta_end, model.timesteps)
        return model, sched, (model.height, model.width)
    spec = parse_phantom_spec(args.phantom)
    timesteps = args.timesteps if args.timesteps is not None else 100
    sched = make_linear_schedule(args.beta_start, args.beta_end, timesteps)
    gmm = gmm_from_spec(spec, args.gmm_components)
    return AnalyticDenoiser(gmm, sched), sched, (spec.height, spec.width)


def _resolve_jobs(value: int | None) -> int:
    if value is None:
        raw = os.environ.get("REPAINT_LAB_THREADS", "").strip()
        if not raw:
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"REPAINT_LAB_THREADS={raw!r} is not an integer") from None
    if value < 1:
        raise ValueError(f"jobs must be >= 1, got {value}")
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    spec = parse_phantom_spec(args.spec)
    if args.count < 0:
        raise ValueError(f"--count must be >= 0, got {args.count}")
    if args.count == 0:
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = derive_seed(args.seed, "phantom", i)
        sample = generate(spec, rng_from_seed(seed))
        stem = f"sample_{i:03d}"
        write_image(sample.image, out / f"{stem}.f32grid")
        write_pgm(sample.image, out / f"{stem}.pgm")
        for (name, side), mask in sample.atlas.items():
            write_mask(mask, out / f"{stem}_mask_{name}_{side}.f32grid")
        print(f"{stem} seed={seed}")
    return 0


def cmd_train(args) -> int:
    spec = parse_phantom_spec(args.phantom)
    sched = make_linear_schedule(args.beta_start, args.beta_end, args.timesteps)
    gmm = gmm_from_spec(spec, args.gmm_components)
    data_rng = rng_from_seed(derive_seed(args.seed, "train-data"))
    data = [sample_gmm(gmm, data_rng) for _ in range(args.dataset_size)]
    model = MlpDenoiser(
        spec.height, spec.width, hidden=args.hidden, embed=args.embed,
        timesteps=args.timesteps,
        rng=rng_from_seed(derive_seed(args.seed, "train-init")),
    )
    cfg = TrainConfig(
        epochs=args.epochs, base_lr=args.base_lr, lr_min=args.lr_min,
        horizon=args.horizon, batch_size=args.batch_size,
        accumulation=args.accumulation, seed=args.seed,
    )
    result = train(model, data, cfg, sched)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.ckpt")
    save_loss_trace(result.trace, out / "loss_trace.csv")
    first = result.trace[0][2]
    last = result.trace[-1][2]
    print(f"steps={len(result.trace)} first_loss={_fmt(first)} last_loss={_fmt(last)}")
    return 0


def cmd_sample(args) -> int:
    model, sched, shape = _load_denoiser(args)
    if args.count < 0:
        raise ValueError(f"--count must be >= 0, got {args.count}")
    if args.count == 0:
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = derive_seed(args.seed, "sample", i)
        rng = rng_from_seed(seed)
        x = Image(rng.standard_normal(shape))
        for t in range(sched.timesteps, 0, -1):
            x = reverse_step(x, t, model, sched, rng, sigma_mode=args.sigma_mode)
        stem = f"sample_{i:03d}"
        write_image(x, out / f"{stem}.f32grid")
        write_pgm(x, out / f"{stem}.pgm")
        print(f"{stem} seed={seed}")
    return 0


def cmd_inpaint(args) -> int:
    image = read_image(args.image)
    mask = read_mask(args.mask)
    model, sched, shape = _load_denoiser(args)
    if image.shape != shape:
        raise ValueError(f"image is {image.shape} but the model expects {shape}")
    cfg = RepaintConfig(
        jump_length=args.jump_length, resamplings=args.resamplings,
        sigma_mode=args.sigma_mode,
    )
    seed = derive_seed(args.seed, "inpaint")
    result = inpaint(image, mask, model, sched, cfg, rng_from_seed(seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_image(result, out / "inpainted.f32grid")
    write_pgm(result, out / "inpainted.pgm")
    print(f"inpainted seed={seed} known={mask.count} unknown={mask.bits.size - mask.count}")
    return 0


def cmd_register(args) -> int:
    reference = read_image(args.reference)
    moving = read_image(args.moving)
    params = RegParams(
        spacing=args.grid_spacing, max_iterations=args.max_iterations,
        bending_weight=args.bending_weight,
        elasticity_weight=args.elasticity_weight,
    )
    result = register(reference, moving, params)
    logj = log_jacobian(result.field, reference.shape)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_field(result.field, out / "field.bspf")
    write_image(logj.values, out / "logjac.f32grid")
    print(
        f"ssd {_fmt(result.initial_ssd)} -> {_fmt(result.final_ssd)}"
        f" iterations {result.iterations} folds {logj.fold_count}"
    )
    return 0


def cmd_experiment(args) -> int:
    cfg = load_experiment_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    if args.runs is not None:
        cfg = dataclasses.replace(cfg, runs=args.runs)
    if args.timesteps is not None:
        cfg = dataclasses.replace(cfg, timesteps=args.timesteps)
    if args.mode is not None:
        modes = MODES if args.mode == "both" else (args.mode,)
        cfg = dataclasses.replace(cfg, modes=modes)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if args.jump_length is not None or args.resamplings is not None:
        cfg = dataclasses.replace(cfg, repaint=dataclasses.replace(
            cfg.repaint,
            jump_length=args.jump_length if args.jump_length is not None
            else cfg.repaint.jump_length,
            resamplings=args.resamplings if args.resamplings is not None
            else cfg.repaint.resamplings,
        ))
    if args.grid_spacing is not None:
        cfg = dataclasses.replace(
            cfg, registration=dataclasses.replace(
                cfg.registration, spacing=args.grid_spacing
            )
        )
    jobs = _resolve_jobs(args.jobs)
    if args.dry_run:
        for subject, structure, side, mode, runs in plan_jobs(cfg):
            print(f"{subject} {structure} {side} {mode} runs={runs}")
        return 0
    paths = run_and_report(cfg, jobs=jobs)
    print(f"wrote {len(paths)} files to {cfg.out_dir}")
    return 0


def _read_csv_rows(path: Path) -> list[list[str]]:
    with open(path) as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def cmd_report(args) -> int:
    d = Path(args.results)
    runs_path = d / "runs.csv"
    if not runs_path.exists():
        raise FileNotFoundError(f"{runs_path} not found; not a results directory?")
    if (d / PARTIAL_MARKER).exists():
        print("warning: .partial marker present; results may be incomplete",
              file=sys.stderr)

    rows = _read_csv_rows(runs_path)
    header, data = rows[0], rows[1:]
    mse_idx = header.index("mse")
    cells: dict[tuple, list[float]] = {}
    for row in data:
        cells.setdefault(tuple(row[:4]), []).append(float(row[mse_idx]))
    print(f"runs: {len(data)}")
    for key in sorted(cells):
        vals = np.array(cells[key])
        print(f"{' '.join(key)}: n={vals.size} mse_mean={_fmt(vals.mean())}"
              f" mse_max={_fmt(vals.max())}")

    cmp_path = d / "comparison.csv"
    if not cmp_path.exists():
        print("comparison.csv: absent")
        return 0
    cmp_rows = _read_csv_rows(cmp_path)
    for row in cmp_rows[1:]:
        named = ", ".join(
            f"{col}={val}" for col, val in zip(cmp_rows[0][3:], row[3:])
        )
        print(f"{' '.join(row[:3])}: {named}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repaint-lab",
        description="Desk-scale diffusion inpainting and symmetry probing lab.",
    )
    parser.add_argument("--verbose", action="store_true",
                        help="enable informational logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="render synthetic subjects from a spec file")
    p.add_argument("spec", help="phantom spec file")
    p.add_argument("--count", type=int, default=1, help="samples to render")
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the small noise predictor")
    p.add_argument("--phantom", required=True, help="phantom spec file")
    p.add_argument("--gmm-components", type=int, default=512)
    p.add_argument("--dataset-size", type=int, default=256)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--embed", type=int, default=16)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--accumulation", type=int, default=8)
    p.add_argument("--base-lr", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--horizon", type=int, default=None,
                   help="cosine annealing horizon in optimizer steps")
    _schedule_flags(p)
    _add_common(p, out_default="trained")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw unconditional reverse-chain samples")
    _model_source_flags(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--sigma-mode", choices=SIGMA_MODES, default="beta_tilde")
    _schedule_flags(p, timesteps_default=None)
    _add_common(p, out_default="samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("inpaint", help="complete the unknown region of one image")
    p.add_argument("--image", required=True, help=".f32grid image to complete")
    p.add_argument("--mask", required=True,
                   help=".f32grid known-region mask (1 = keep pixel)")
    _model_source_flags(p)
    p.add_argument("--jump-length", type=int, default=1)
    p.add_argument("--resamplings", type=int, default=1)
    p.add_argument("--sigma-mode", choices=SIGMA_MODES, default="beta_tilde")
    _schedule_flags(p, timesteps_default=None)
    _add_common(p, out_default="inpainted")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("register", help="deformable registration of two images")
    p.add_argument("reference", help="fixed image (.f32grid)")
    p.add_argument("moving", help="image to deform (.f32grid)")
    p.add_argument("--grid-spacing", type=float, default=2.5,
                   help="control-point spacing in pixels")
    p.add_argument("--max-iterations", type=int, default=200)
    p.add_argument("--bending-weight", type=float, default=0.0)
    p.add_argument("--elasticity-weight", type=float, default=0.0)
    _add_common(p, out_default="registered")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("experiment", help="run the full masking-mode grid")
    p.add_argument("config", help="experiment config file")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker threads (default: REPAINT_LAB_THREADS or 1)")
    p.add_argument("--dry-run", action="store_true",
                   help="print the job grid and write nothing")
    p.add_argument("--seed", type=int, default=None, help="override master seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--runs", type=int, default=None, help="override runs per cell")
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--jump-length", type=int, default=None)
    p.add_argument("--resamplings", type=int, default=None)
    p.add_argument("--grid-spacing", type=float, default=None)
    p.add_argument("--mode", choices=("baseline", "bilateral", "both"), default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="summarize a results directory")
    p.add_argument("results", help="directory written by the experiment command")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValueError as exc:
        # covers config parse errors and bad parameter combinations
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
