"""Training loop, evaluation harness and noise-level behavior curves."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import nn
from .checkpoint import Checkpoint, write_checkpoint
from .data import SigmaRegime, add_awgn, corpus_patches, make_training_stream, noise_seed
from .metrics import MetricsReport, format_sigma, psnr, ssim
from .models import ConfigError, Model, ModelConfig, backward, build_model, denoise, forward
from .optim import NonFiniteGradientError, OptState, adam_step

log = logging.getLogger(__name__)

DEFAULT_EVAL_SIGMAS = (10.0, 30.0, 50.0, 70.0)

_CONFIG_KEYS = {
    "model", "sigma", "epochs", "steps_per_epoch", "batch", "lr", "lr_decay",
    "seed", "checkpoint_every", "patch", "stride", "augment", "eval_sigmas",
    "corpus", "eval_manifest", "out_dir", "beta1", "beta2", "adam_eps",
}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sigma: SigmaRegime = field(default_factory=lambda: SigmaRegime.single(30.0))
    epochs: int = 3
    steps_per_epoch: int = 100
    batch: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    patch: int = 64
    stride: int = 32
    augment: bool = True
    eval_sigmas: tuple[float, ...] | None = None
    corpus: str | None = None
    eval_manifest: str | None = None
    out_dir: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        for name in ("epochs", "steps_per_epoch", "batch", "patch", "stride"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if not isinstance(self.checkpoint_every, int) or self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be an integer >= 0, got {self.checkpoint_every!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr!r}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def sigmas_for_eval(self) -> tuple[float, ...]:
        if self.eval_sigmas:
            return tuple(self.eval_sigmas)
        return DEFAULT_EVAL_SIGMAS if self.sigma.blind else (self.sigma.value,)

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``: multiplied by ``lr_decay`` at each third of the epochs."""
        epoch = step // self.steps_per_epoch
        return self.lr * self.lr_decay ** ((3 * epoch) // self.epochs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "sigma": "blind" if self.sigma.blind else self.sigma.value,
            "epochs": self.epochs,
            "steps_per_epoch": self.steps_per_epoch,
            "batch": self.batch,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "patch": self.patch,
            "stride": self.stride,
            "augment": self.augment,
            "eval_sigmas": list(self.eval_sigmas) if self.eval_sigmas else None,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: Path | None = None) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("training config must be a JSON object")
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            kw["model"] = ModelConfig.from_dict(kw.get("model", {}))
            kw["sigma"] = SigmaRegime.parse(kw.get("sigma", 30))
            if kw.get("eval_sigmas") is not None:
                kw["eval_sigmas"] = tuple(float(s) for s in kw["eval_sigmas"])
            for key in ("lr", "lr_decay", "beta1", "beta2", "adam_eps"):
                if key in kw:
                    kw[key] = float(kw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if base_dir is not None:
            for key in ("corpus", "eval_manifest", "out_dir"):
                if kw.get(key) is not None and not Path(kw[key]).is_absolute():
                    kw[key] = str(base_dir / kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_train_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return TrainConfig.from_dict(d, base_dir=path.parent)


@dataclass
class TrainLog:
    steps: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, float, float, float]] = field(default_factory=list)
    wall_time: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((s, repr(loss)) for s, loss in self.steps)
        buf.write("\n")
        w.writerow(["epoch", "sigma", "psnr", "ssim"])
        w.writerows((e, format_sigma(s), repr(p), repr(q)) for e, s, p, q in self.evals)
        return buf.getvalue()


class TrainingDivergedError(RuntimeError):
    """Loss or gradients went non-finite. ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint, log: TrainLog):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


def _metadata(cfg: TrainConfig, step: int) -> dict[str, Any]:
    return {
        "step": step,
        "epoch": step // cfg.steps_per_epoch,
        "sigma_regime": cfg.sigma.label(),
        "seed": cfg.seed,
        "train_config": cfg.to_dict(),
    }


def _bn_snapshot(model: Model) -> list[tuple[np.ndarray, np.ndarray] | None]:
    return [None if l.bn is None else (l.bn.running_mean, l.bn.running_var) for l in model.layers]


def _bn_restore(model: Model, snap) -> None:
    for layer, saved in zip(model.layers, snap):
        if saved is not None:
            layer.bn.running_mean, layer.bn.running_var = saved


def train(
    cfg: TrainConfig,
    corpus: Sequence[np.ndarray],
    *,
    eval_images: Sequence[tuple[str, np.ndarray]] | None = None,
    resume: Checkpoint | None = None,
    until_step: int | None = None,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Train from scratch (or from ``resume``) for ``cfg.total_steps`` steps.

    ``until_step`` stops early at that global step; the learning-rate
    schedule is still laid out over the full run, so stopping, saving and
    resuming reproduces an uninterrupted run bit for bit.
    """
    t0 = time.perf_counter()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        if resume.model.config != cfg.model:
            raise ConfigError("resume checkpoint was trained with a different model config")
        model = resume.model
        opt = resume.optimizer or OptState()
    else:
        model = build_model(cfg.model, seed=cfg.seed)
        opt = OptState()
    params = model.named_parameters()
    if not opt.m:
        step = opt.step
        opt = OptState.zeros_like(params)
        opt.step = step

    patches = corpus_patches(corpus, cfg.patch, cfg.stride)
    stream = make_training_stream(patches, cfg.sigma, batch=cfg.batch, seed=cfg.seed, augment=cfg.augment)
    end = cfg.total_steps if until_step is None else min(until_step, cfg.total_steps)
    trainlog = TrainLog()

    def snapshot() -> Checkpoint:
        return Checkpoint(model, opt, _metadata(cfg, opt.step))

    model.mode = "train"
    for step in range(opt.step, end):
        batch = stream.batch_at(step)
        saved_bn = _bn_snapshot(model)
        try:
            # overflow is caught below as a non-finite loss or gradient
            with np.errstate(over="ignore", invalid="ignore"):
                out, cache = forward(model, batch.noisy, "train")
                loss, grad = nn.mse_loss(out, batch.clean)
                if not np.isfinite(loss):
                    raise NonFiniteGradientError(f"non-finite loss {loss} at step {step + 1}")
                grads = backward(model, grad, cache)
            adam_step(params, grads, opt, cfg.lr_at(step), cfg.beta1, cfg.beta2, cfg.adam_eps)
        except NonFiniteGradientError as exc:
            _bn_restore(model, saved_bn)
            model.mode = "infer"
            good = snapshot()
            if out_path is not None:
                write_checkpoint(good, out_path / "last_good.winckpt")
            trainlog.wall_time = time.perf_counter() - t0
            raise TrainingDivergedError(f"training diverged: {exc}", good, trainlog) from None
        trainlog.steps.append((opt.step, loss))

        if out_path is not None and cfg.checkpoint_every and opt.step % cfg.checkpoint_every == 0:
            model.mode = "infer"
            write_checkpoint(snapshot(), out_path / f"step{opt.step:07d}.winckpt")
            model.mode = "train"
        if opt.step % cfg.steps_per_epoch == 0:
            epoch = opt.step // cfg.steps_per_epoch
            log.info("epoch %d step %d loss %.6g lr %.3g", epoch, opt.step, loss, cfg.lr_at(step))
            if eval_images:
                model.mode = "infer"
                report = evaluate(model, eval_images, cfg.sigmas_for_eval(), seed=cfg.seed)
                for (_, sigma), (p, s) in report.means().items():
                    trainlog.evals.append((epoch, sigma, p, s))
                model.mode = "train"

    model.mode = "infer"
    final = snapshot()
    if out_path is not None:
        write_checkpoint(final, out_path / "final.winckpt")
    trainlog.wall_time = time.perf_counter() - t0
    return final, trainlog


def _threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    try:
        return max(1, int(os.environ.get("WIN_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(
    model: Model | Checkpoint,
    images: Sequence[tuple[str, np.ndarray]],
    sigmas: Sequence[float],
    seed: int = 0,
    method: str | None = None,
    include_noisy: bool = False,
    threads: int | None = None,
) -> MetricsReport:
    """Corrupt each image at each sigma, denoise the full image, score it.

    Noise for (image, sigma) is seeded by :func:`noise_seed`, so every caller
    using the same seed and image name sees the same noisy input. Rows are
    ordered sigma-major, then by the order of ``images``.
    """
    if isinstance(model, Checkpoint):
        model = model.model
    method = method or model.config.variant.value
    for name, img in images:
        if min(img.shape) < 11:
            raise ValueError(f"image {name!r} ({img.shape}) is smaller than the SSIM window")

    def score(job: tuple[float, str, np.ndarray]) -> list[tuple[str, float, str, float, float]]:
        sigma, name, clean = job
        pair = add_awgn(clean, sigma, noise_seed(seed, name, sigma))
        rows = []
        if include_noisy:
            rows.append(("noisy", sigma, name, psnr(clean, pair.noisy), ssim(clean, pair.noisy)))
        restored = np.clip(denoise(model, pair.noisy), 0.0, 1.0)
        rows.append((method, sigma, name, psnr(clean, restored), ssim(clean, restored)))
        return rows

    jobs = [(float(s), name, img) for s in sigmas for name, img in images]
    n = _threads(threads)
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(score, jobs))
    else:
        results = [score(j) for j in jobs]

    report = MetricsReport()
    # all "noisy" rows first, then the model's, each block sigma-major
    for want in (["noisy"] if include_noisy else []) + [method]:
        for sigma in dict.fromkeys(float(s) for s in sigmas):
            for rows in results:
                for r in rows:
                    if r[0] == want and r[1] == sigma:
                        report.add(*r)
    return report


def behavior_curve(report: MetricsReport, method: str | None = None) -> list[tuple[float, float]]:
    """(sigma, mean PSNR) pairs sorted by sigma."""
    rows = [r for r in report.rows if method is None or r.method == method]
    if not rows:
        raise ValueError("behavior_curve needs at least one report row")
    sigmas = sorted({r.sigma for r in rows})
    return [(s, float(np.mean([r.psnr for r in rows if r.sigma == s]))) for s in sigmas]


def curve_to_csv(curve: Sequence[tuple[float, float]]) -> str:
    lines = ["sigma,psnr_db"] + [f"{format_sigma(s)},{p!r}" for s, p in curve]
    return "\n".join(lines) + "\n"
