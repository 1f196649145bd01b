"""Adam training of registration models and per-pair instance optimization.

The objective is the negated local correlation of the warped moving image
against the target plus a weighted bending energy of every velocity-grid
step.  One run owns its parameter store; everything downstream of the seed
is deterministic, so reruns reproduce checkpoints and metric rows exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tape as tp
from .data import Dataset, PairSampler
from .lie import Transform, warp_image
from .losses import bending_energy, lncc
from .metrics import MetricsReport, inv_consistency_error, jacobian_stats
from .models import build_model
from .params import ParamStore
from .tape import DiffTensor, Tape

CONFIG_SCHEMA_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the iteration index."""


@dataclass
class TrainConfig:
    model: dict
    dataset: str = ""
    lambda_reg: float = 5.0
    sigma: float = 5.0
    lr: float = 1e-4
    batch_size: int = 8
    iterations: int = 400
    seed: int = 0
    metrics_every: int = 10
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    run_id: str = "train"

    def __post_init__(self):
        if not isinstance(self.model, dict) or "kind" not in self.model:
            raise ValueError("TrainConfig: model must be a model descriptor dict")
        if self.lambda_reg < 0:
            raise ValueError(f"TrainConfig: lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.iterations < 1:
            raise ValueError(f"TrainConfig: iterations must be >= 1, got {self.iterations}")
        if self.lr <= 0 or self.sigma <= 0 or self.batch_size < 1:
            raise ValueError("TrainConfig: lr and sigma must be positive, batch_size >= 1")
        if self.metrics_every < 1:
            raise ValueError(f"TrainConfig: metrics_every must be >= 1, got {self.metrics_every}")

    def to_json_dict(self) -> dict:
        d = {"schema_version": CONFIG_SCHEMA_VERSION}
        for name in (
            "model",
            "dataset",
            "lambda_reg",
            "sigma",
            "lr",
            "batch_size",
            "iterations",
            "seed",
            "metrics_every",
            "checkpoint_every",
            "run_id",
        ):
            d[name] = getattr(self, name)
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "TrainConfig":
        version = d.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"unsupported config schema version {version!r}, expected {CONFIG_SCHEMA_VERSION}"
            )
        kwargs = {k: v for k, v in d.items() if k != "schema_version"}
        return TrainConfig(**kwargs)


def loss_terms(model, leaves, a, b, lambda_reg: float, sigma: float):
    """Objective and its two components for one batch.

    Returns (loss, similarity, regularizer, transform); the regularizer sums
    bending energies over velocity-grid steps only, so purely matrix or
    coordinate-network models contribute zero.
    """
    transform, velocities = model.forward_leaves(leaves, a, b)
    warped = warp_image(a, transform)
    similarity = lncc(warped, b, sigma)
    loss = tp.scalar_mul(similarity, -1.0)
    regularizer = None
    for v in velocities:
        term = bending_energy(v)
        regularizer = term if regularizer is None else regularizer + term
    if regularizer is not None and lambda_reg != 0.0:
        loss = loss + tp.scalar_mul(regularizer, lambda_reg)
    return loss, similarity, regularizer, transform


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of every named gradient, in place."""
    for name, g in grads.items():
        value = store[name]
        if g.shape != value.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != {value.shape} for {name!r}")
        m, v, t = store.adam_state(name)
        t += 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        store.assign(name, value - lr * m_hat / (np.sqrt(v_hat) + eps))
        store.set_adam_state(name, m, v, t)


def _eval_metrics(model, images, it, cfg, sim, reg, loss_val) -> MetricsReport:
    # fixed probe pair (0, 1): architectural properties are what we track,
    # so any pair serves
    a, b = images[0], images[1]
    t_ab = model.forward(Tape(), a, b)[0].detach()
    t_ba = model.forward(Tape(), b, a)[0].detach()
    size = images.shape[-1]
    pct_neg, _ = jacobian_stats(t_ab, size, size)
    ic_err = inv_consistency_error(t_ab, t_ba, size, size)
    return MetricsReport(
        run_id=cfg.run_id,
        step=it,
        similarity=sim,
        regularizer=reg,
        loss=loss_val,
        pct_neg_jacobian=pct_neg,
        inv_consistency_err=ic_err,
    )


def train(cfg: TrainConfig, out_dir, images: np.ndarray | None = None):
    """Run one training job; returns (store, model, reports).

    Writes ``metrics.csv``, ``config.json`` and ``ckpt_final.icckpt`` into
    ``out_dir`` (plus periodic ``ckpt_NNNNNN.icckpt`` when configured).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if images is None:
        if not cfg.dataset:
            raise ValueError("train: config has no dataset path and no images were passed")
        images = Dataset.load(cfg.dataset).images
    images = np.asarray(images, dtype=np.float64)

    store = ParamStore()
    model = build_model(cfg.model, store)
    sampler = PairSampler(len(images), cfg.seed)
    reports: list[MetricsReport] = []

    with open(out / "config.json", "w") as f:
        json.dump(cfg.to_json_dict(), f, indent=1, sort_keys=True)

    with open(out / "metrics.csv", "w") as csv_file:
        csv_file.write(MetricsReport.csv_header() + "\n")
        for it in range(1, cfg.iterations + 1):
            ia, ib = sampler.batch(cfg.batch_size)
            tape = Tape()
            leaves = model.register_leaves(tape)
            a = DiffTensor(images[ia])
            b = DiffTensor(images[ib])
            loss, sim, reg, _ = loss_terms(model, leaves, a, b, cfg.lambda_reg, cfg.sigma)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(f"non-finite loss at iteration {it}")
            grads = tp.backprop(loss)
            adam_step(store, {name: grads.of(leaf) for name, leaf in leaves.items()}, cfg.lr)
            if it == 1 or it == cfg.iterations or it % cfg.metrics_every == 0:
                row = _eval_metrics(
                    model,
                    images,
                    it,
                    cfg,
                    sim.item(),
                    0.0 if reg is None else reg.item(),
                    loss_val,
                )
                reports.append(row)
                csv_file.write(row.csv_row() + "\n")
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                store.save(out / f"ckpt_{it:06d}.icckpt")
    store.save(out / "ckpt_final.icckpt")
    return store, model, reports


def load_run(run_dir) -> tuple[TrainConfig, ParamStore, object]:
    """Rebuild (config, store, model) from a training output directory."""
    run = Path(run_dir)
    with open(run / "config.json") as f:
        cfg = TrainConfig.from_json_dict(json.load(f))
    store = ParamStore()
    model = build_model(cfg.model, store)
    store.load_values(run / "ckpt_final.icckpt")
    return cfg, store, model


def optimize_on_pair(model, store, a, b, steps: int, lambda_reg: float, sigma: float, lr: float):
    """Continue Adam on a single pair; returns (transform, loss history)."""
    a = np.asarray(a, dtype=np.float64)[None] if np.ndim(a) == 2 else np.asarray(a)
    b = np.asarray(b, dtype=np.float64)[None] if np.ndim(b) == 2 else np.asarray(b)
    losses = []
    for it in range(1, steps + 1):
        tape = Tape()
        leaves = model.register_leaves(tape)
        loss, _, _, _ = loss_terms(
            model, leaves, DiffTensor(a), DiffTensor(b), lambda_reg, sigma
        )
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at instance step {it}")
        losses.append(loss_val)
        grads = tp.backprop(loss)
        adam_step(store, {name: grads.of(leaf) for name, leaf in leaves.items()}, lr)
    transform = model.forward(Tape(), DiffTensor(a), DiffTensor(b))[0].detach()
    return transform, losses


def instance_optimize(run_dir, a, b, steps: int = 50) -> Transform:
    """Per-pair refinement: resume the trained checkpoint on one pair.

    The checkpoint stores weights only, so the optimizer moments restart;
    inverse consistency needs no care here because it is a property of the
    architecture, not of the weights.
    """
    cfg, store, model = load_run(run_dir)
    if steps == 0:
        return model.forward(Tape(), a, b)[0].detach()
    transform, _ = optimize_on_pair(model, store, a, b, steps, cfg.lambda_reg, cfg.sigma, cfg.lr)
    return transform
