"""Command-line front end: dataset generation, training, registration, and
the two synthetic experiment drivers (model zoo, affine 3x3 grid)."""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import Dataset, PairSampler, gen_blob_digits, gen_tri_circ, load_idx
from .fileio import read_pgm, save_warp, write_pgm
from .lie import compose, warp_image
from .metrics import MetricsReport, dice, inv_consistency_error, jacobian_stats, landmark_mtre
from .losses import lncc
from .models import (
    GRID_COMPOSITIONS,
    GRID_PARAMETERIZATIONS,
    ZOO,
    build_grid_model,
    build_zoo_model,
)
from .params import ParamStore
from .plotting import line_plot, violin_plot
from .tape import DiffTensor, Tape
from .training import TrainConfig, TrainingDiverged, load_run, optimize_on_pair, train

#: per-model zoo training settings, tuned for CPU desk scale; lambda is kept
#: low because bending energy in normalized coordinates grows with the square
#: of resolution, which makes the literature-scale weight crushing at 32x32
ZOO_TRAIN = {
    "rigid": {"batch_size": 16, "lr": 1e-3, "lambda_reg": 0.0},
    "affine": {"batch_size": 16, "lr": 1e-3, "lambda_reg": 0.0},
    "svf": {"batch_size": 8, "lr": 1e-3, "lambda_reg": 1e-2},
    "mlp": {"batch_size": 8, "lr": 3e-3, "lambda_reg": 0.0},
    "tsc_mlp_svf": {"batch_size": 2, "lr": 1e-3, "lambda_reg": 1e-3},
    "nsc_affine2_svf2": {"batch_size": 4, "lr": 1e-3, "lambda_reg": 1e-3},
}

ZOO_EVAL_PAIRS = 16
PANEL_PAIRS = 2
PANEL_SCALE = 4


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    return max(1, int(os.environ.get("ICREG_WORKERS", "1")))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- gen-data --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    count = args.count or 64
    if args.kind == "tri-circ":
        ds = gen_tri_circ(count, args.size, args.seed)
    elif args.kind == "blobs":
        ds = gen_blob_digits(count, args.size, args.seed)
    else:
        if not args.images or not args.labels:
            raise ValueError("gen-data --kind idx needs --images and --labels files")
        ds = load_idx(args.images, args.labels, args.digit)
        if args.count and args.count < len(ds):
            ds = Dataset(ds.images[: args.count],
                         dict(ds.meta, count=args.count,
                              classes=ds.meta["classes"][: args.count]))
    ds.save(out)
    print(f"wrote {len(ds)} images of size {ds.size} to {out}")
    return 0


# --- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    with open(args.config) as f:
        cfg = TrainConfig.from_json_dict(json.load(f))
    if args.dataset:
        cfg.dataset = args.dataset
    train(cfg, _out_dir(args))
    print(f"run complete, artifacts in {args.out}")
    return 0


# --- register --------------------------------------------------------------------


def cmd_register(args) -> int:
    cfg, store, model = load_run(args.run)
    moving = read_pgm(args.moving)
    fixed = read_pgm(args.fixed)
    if args.instance_steps:
        t, _ = optimize_on_pair(
            model, store, moving, fixed,
            args.instance_steps, cfg.lambda_reg, cfg.sigma, cfg.lr,
        )
    else:
        t = model.forward(Tape(), moving, fixed)[0].detach()
    h, w = fixed.shape
    field = t.position_field(h, w).value[0]
    out = _out_dir(args)
    save_warp(out / "warp.icwarp", field)
    warped = warp_image(moving, t).value[0]
    write_pgm(out / "warped.pgm", warped)
    print(f"wrote {out / 'warp.icwarp'} and {out / 'warped.pgm'}")
    return 0


# --- evaluate --------------------------------------------------------------------


def _parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for chunk in text.split(","):
        i, _, j = chunk.partition(":")
        pairs.append((int(i), int(j)))
    return pairs


def _pair_metrics(model, ds, i, j, sigma) -> MetricsReport:
    a, b = ds.images[i], ds.images[j]
    size = ds.size
    t_ab = model.forward(Tape(), a, b)[0].detach()
    t_ba = model.forward(Tape(), b, a)[0].detach()
    warped = warp_image(a, t_ab)
    sim = lncc(warped, DiffTensor(b[None]), sigma).item()
    pct_neg, _ = jacobian_stats(t_ab, size, size)
    ic = inv_consistency_error(t_ab, t_ba, size, size)
    d = dice(warped.value[0] >= 0.5, b >= 0.5)
    mtre = None
    if ds.landmarks is not None:
        mapped = t_ab.apply(DiffTensor(ds.landmarks[j])).value
        if mapped.ndim == 3:
            mapped = mapped[0]
        mtre = landmark_mtre(mapped * size, ds.landmarks[i] * size)
    return MetricsReport(
        run_id=f"{i}:{j}",
        step=0,
        similarity=sim,
        regularizer=0.0,
        loss=-sim,
        pct_neg_jacobian=pct_neg,
        inv_consistency_err=ic,
        dice=d,
        mtre=mtre,
    )


def cmd_evaluate(args) -> int:
    cfg, _, model = load_run(args.run)
    ds = Dataset.load(args.dataset)
    if args.pairs:
        pairs = _parse_pairs(args.pairs)
    else:
        ia, ib = PairSampler(len(ds), args.seed).batch(args.count)
        pairs = list(zip(ia.tolist(), ib.tolist()))
    out = _out_dir(args)
    with open(out / "metrics.csv", "w") as f:
        f.write(MetricsReport.csv_header() + "\n")
        for i, j in pairs:
            f.write(_pair_metrics(model, ds, i, j, cfg.sigma).csv_row() + "\n")
    print(f"evaluated {len(pairs)} pairs into {out / 'metrics.csv'}")
    return 0


# --- zoo -------------------------------------------------------------------------


def _grid_image(size: int, spacing: int = 4) -> np.ndarray:
    img = np.ones((size, size))
    img[::spacing, :] = 0.0
    img[:, ::spacing] = 0.0
    return img


def _upscale(img: np.ndarray) -> np.ndarray:
    return np.kron(img, np.ones((PANEL_SCALE, PANEL_SCALE)))


def _mosaic(rows: list[list[np.ndarray]]) -> np.ndarray:
    gap = 2
    cell_h = max(c.shape[0] for r in rows for c in r)
    cell_w = max(c.shape[1] for r in rows for c in r)
    h = len(rows) * (cell_h + gap) - gap
    w = len(rows[0]) * (cell_w + gap) - gap
    canvas = np.ones((h, w))
    for ri, r in enumerate(rows):
        for ci, c in enumerate(r):
            y, x = ri * (cell_h + gap), ci * (cell_w + gap)
            canvas[y : y + c.shape[0], x : x + c.shape[1]] = c
    return canvas


def _zoo_panels(model, images, i, j) -> list[np.ndarray]:
    size = images.shape[-1]
    a, b = images[i], images[j]
    t_ab = model.forward(Tape(), a, b)[0].detach()
    t_ba = model.forward(Tape(), b, a)[0].detach()
    warped = warp_image(a, t_ab).value[0]
    grid = _grid_image(size)
    warped_grid = warp_image(grid, t_ab).value[0]
    composed_grid = warp_image(grid, compose(t_ab, t_ba)).value[0]
    return [
        _upscale(a),
        _upscale(np.abs(warped - b)),
        _upscale(np.minimum(warped, warped_grid)),
        _upscale(composed_grid),
    ]


def cmd_zoo(args) -> int:
    ds = Dataset.load(args.dataset)
    images = ds.images
    out = _out_dir(args)
    ia, ib = PairSampler(len(images), seed=args.seed + 1234).batch(ZOO_EVAL_PAIRS)
    eval_pairs = list(zip(ia.tolist(), ib.tolist()))
    mse_id = float(np.mean([(images[i] - images[j]) ** 2 for i, j in eval_pairs]))

    rows = []
    panel_rows: dict[int, list] = {k: [] for k in range(min(PANEL_PAIRS, len(eval_pairs)))}
    for name in ZOO:
        knobs = dict(ZOO_TRAIN[name])
        knobs.setdefault("sigma", args.sigma)
        desc = build_zoo_model(name, ParamStore(), seed=args.seed).descriptor()
        cfg = TrainConfig(
            model=desc,
            iterations=args.iterations,
            seed=args.seed,
            metrics_every=max(1, args.iterations // 5),
            run_id=name,
            **knobs,
        )
        _, model, reports = train(cfg, out / "models" / name, images=images)

        mses, ics = [], []
        for i, j in eval_pairs:
            t_ab = model.forward(Tape(), images[i], images[j])[0].detach()
            t_ba = model.forward(Tape(), images[j], images[i])[0].detach()
            mses.append(float(np.mean((warp_image(images[i], t_ab).value[0] - images[j]) ** 2)))
            ics.append(inv_consistency_error(t_ab, t_ba, ds.size, ds.size))
        for k in panel_rows:
            panel_rows[k].append(_zoo_panels(model, images, *eval_pairs[k]))
        rows.append({
            "model": name,
            "final_loss": reports[-1].loss,
            "mse_identity": mse_id,
            "mse_warped": float(np.mean(mses)),
            "mse_reduction_pct": 100.0 * (1.0 - float(np.mean(mses)) / mse_id),
            "ic_err_px": float(np.mean(ics)),
            "pct_neg_jacobian": reports[-1].pct_neg_jacobian,
        })
        print(f"{name}: reduction {rows[-1]['mse_reduction_pct']:.1f}%, "
              f"inverse consistency {rows[-1]['ic_err_px']:.2e} px")

    with open(out / "zoo_metrics.csv", "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (format(v, ".10g") if isinstance(v, float) else v)
                         for k, v in r.items()})
    for k, model_rows in panel_rows.items():
        write_pgm(out / f"panel_pair{k}.pgm", _mosaic(model_rows))
    print(f"zoo artifacts in {out}")
    return 0


# --- affine-grid -----------------------------------------------------------------


def _grid_cell_job(job) -> dict:
    (param, comp, seed, iterations, dataset_dir, out_dir, sigma) = job
    images = Dataset.load(dataset_dir).images
    desc = build_grid_model(param, comp, ParamStore(), seed=seed).descriptor()
    cfg = TrainConfig(
        model=desc,
        lambda_reg=0.0,
        sigma=sigma,
        lr=1e-3,
        batch_size=8,
        iterations=iterations,
        seed=seed,
        metrics_every=1,
        run_id=f"{param}.{comp}.s{seed}",
    )
    rec = {"parameterization": param, "composition": comp, "seed": seed,
           "status": "ok", "error": ""}
    try:
        train(cfg, Path(out_dir) / "cells" / f"{param}_{comp}" / f"seed{seed}", images=images)
    except (TrainingDiverged, FloatingPointError, ValueError) as e:
        rec["status"] = "failed"
        rec["error"] = str(e)
    return rec


def _read_cell_curves(out: Path, param: str, comp: str, seed: int):
    path = out / "cells" / f"{param}_{comp}" / f"seed{seed}" / "metrics.csv"
    steps, sims, ics = [], [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            sims.append(float(row["similarity"]))
            ics.append(float(row["inv_consistency_err"]))
    return np.asarray(steps), np.asarray(sims), np.asarray(ics)


def cmd_affine_grid(args) -> int:
    out = _out_dir(args)
    if args.dataset:
        data_dir = args.dataset
    else:
        data_dir = out / "dataset"
        gen_tri_circ(args.count, 32, args.seed).save(data_dir)

    jobs = [
        (param, comp, args.seed + k, args.iterations, str(data_dir), str(out), args.sigma)
        for param in GRID_PARAMETERIZATIONS
        for comp in GRID_COMPOSITIONS
        for k in range(args.runs)
    ]
    workers = _workers(args)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_grid_cell_job, jobs))
    else:
        records = [_grid_cell_job(j) for j in jobs]

    failures = [r for r in records if r["status"] != "ok"]
    with open(out / "failures.csv", "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=["parameterization", "composition", "seed", "error"])
        wr.writeheader()
        for r in failures:
            wr.writerow({k: r[k] for k in wr.fieldnames})

    summary_rows = []
    median_curves = []
    final_losses = []
    for param in GRID_PARAMETERIZATIONS:
        for comp in GRID_COMPOSITIONS:
            oks = [r for r in records
                   if r["parameterization"] == param and r["composition"] == comp
                   and r["status"] == "ok"]
            sims, ics = [], []
            for r in oks:
                _, sim, ic = _read_cell_curves(out, param, comp, r["seed"])
                sims.append(sim)
                ics.append(ic)
            if sims:
                sims = np.stack(sims)
                ics = np.stack(ics)
                finals = -sims[:, -1]  # loss = -similarity with lambda 0
                lo, med, hi = np.percentile(finals, [25, 50, 75])
                final_ic = float(np.median(ics[:, -1]))
                median_curves.append((np.arange(1, sims.shape[1] + 1), -np.median(sims, axis=0)))
                final_losses.append(finals)
            else:
                lo = med = hi = float("nan")
                final_ic = float("nan")
            summary_rows.append({
                "parameterization": param,
                "composition": comp,
                "median_final_loss": med,
                "iqr_lo": lo,
                "iqr_hi": hi,
                "median_final_ic_px": final_ic,
                "failed_runs": sum(1 for r in failures
                                   if r["parameterization"] == param
                                   and r["composition"] == comp),
            })

    with open(out / "summary.csv", "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(summary_rows[0].keys()))
        wr.writeheader()
        for r in summary_rows:
            wr.writerow({k: (format(v, ".10g") if isinstance(v, float) else v)
                         for k, v in r.items()})
    if median_curves:
        line_plot(out / "loss_curves.pgm", median_curves)
    if final_losses:
        violin_plot(out / "final_losses.pgm", final_losses)
    print(f"{len(records) - len(failures)}/{len(records)} runs converged; "
          f"summary in {out / 'summary.csv'}")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="icreg",
        description="Inverse-consistent registration experiments",
    )
    p.add_argument("--seed", type=int, default=0, help="base seed for anything random")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel jobs for grid runs (default: $ICREG_WORKERS or 1)")
    p.add_argument("--out", default="out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic or converted dataset")
    g.add_argument("--kind", choices=["tri-circ", "blobs", "idx"], required=True)
    g.add_argument("--count", type=int, default=None,
                   help="images to generate (default 64); for idx, truncate to this many")
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--images", help="IDX image file (kind=idx)")
    g.add_argument("--labels", help="IDX label file (kind=idx)")
    g.add_argument("--digit", type=int, default=None, help="keep only this digit (kind=idx)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training job from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset", help="override the config's dataset directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one PGM pair with a trained run")
    r.add_argument("--run", required=True, help="training output directory")
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--instance-steps", type=int, default=0)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="metrics over dataset pairs for a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--count", type=int, default=16, help="random pairs to sample")
    e.add_argument("--pairs", help="explicit pairs i:j,k:l (overrides --count)")
    e.set_defaults(func=cmd_evaluate)

    z = sub.add_parser("zoo", help="train and compare the six model families")
    z.add_argument("--dataset", required=True)
    z.add_argument("--iterations", type=int, default=500)
    z.add_argument("--sigma", type=float, default=5.0)
    z.set_defaults(func=cmd_zoo)

    a = sub.add_parser("affine-grid", help="3x3 parameterization/composition study")
    a.add_argument("--dataset", help="tri-circ dataset directory (generated if omitted)")
    a.add_argument("--count", type=int, default=24, help="images when generating")
    a.add_argument("--iterations", type=int, default=400)
    a.add_argument("--runs", type=int, default=5, help="seeds per cell")
    a.add_argument("--sigma", type=float, default=5.0)
    a.set_defaults(func=cmd_affine_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # deterministic nonzero exit with context
        print(f"icreg {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
