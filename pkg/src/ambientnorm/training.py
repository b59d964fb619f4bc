"""Objective, optimizer, and the three-stage training loop.

The objective is mean absolute error plus 0.7 times the SSIM deficit.
Training runs in three phases over one step budget: the first trains the
backbone under a growing random-crop curriculum at a constant learning
rate, the second freezes the backbone and trains the residual refiner (or
keeps training the backbone when no refiner is configured), and the third
fine-tunes everything at the lowest rate.  The later stages anneal their
rate with a cosine schedule.  All randomness flows from the config seed, so
two runs with the same config produce byte-identical checkpoints and logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import metrics
from .model import ModelConfig, ModelParams, forward, init_params, refiner_apply, save_checkpoint
from .scenes import SceneTriplet
from .tensor import Tensor


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 300
    batch_size: int = 2
    stage_lrs: tuple[float, float, float] = (1e-4, 5e-5, 2e-5)
    ssim_weight: float = 0.7
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    crops_schedule: tuple[tuple[int, int], ...] | None = None  # (start_step, crop)
    seed: int = 0
    flip_augment: bool = True
    rot_augment: bool = True
    val_fraction: float = 0.1
    # extra learning rate on the scalar injection scales: zero-initialized,
    # they otherwise random-walk near zero for far longer than a desk-scale
    # step budget allows before the guidance pathway can engage
    scale_lr_multiplier: float = 10.0

    def validate(self):
        if self.total_steps < 1:
            raise TrainError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        lrs = self.stage_lrs
        if any(lr <= 0 for lr in lrs):
            raise TrainError("learning rates must be positive")
        if any(later > earlier for earlier, later in zip(lrs, lrs[1:])):
            raise TrainError("stage learning rates must be non-increasing")

    def crops(self) -> tuple[tuple[int, int], ...]:
        if self.crops_schedule is not None:
            return self.crops_schedule
        s = self.total_steps
        return ((0, 32), (s // 3, 48), (2 * s // 3, 64))

    def crop_at(self, step: int) -> int:
        size = self.crops()[0][1]
        for start, crop in self.crops():
            if step >= start:
                size = crop
        return size

    def stage_bounds(self) -> tuple[int, int]:
        # 60% / 20% / 20% split of the step budget
        return int(0.6 * self.total_steps), int(0.8 * self.total_steps)

    def stage_of(self, step: int) -> int:
        b1, b2 = self.stage_bounds()
        if step < b1:
            return 1
        return 2 if step < b2 else 3


def loss(y_hat: Tensor, y_gt: Tensor, ssim_weight: float = 0.7) -> Tensor:
    """Reconstruction objective: L1 plus weighted SSIM deficit (scalar)."""
    if y_hat.shape != y_gt.shape:
        raise T.ShapeError(f"loss shape mismatch: {y_hat.shape} vs {y_gt.shape}")
    l1 = T.reduce_mean(T.absolute(y_hat - y_gt))
    ssim_val = metrics.ssim_tensor(y_hat, y_gt)
    return l1 + ssim_weight * (1.0 - ssim_val)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: ModelParams,
    state: OptimState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    names: list[str] | None = None,
) -> None:
    """Bias-corrected Adam update on ``names`` (default: all); gradients are
    zeroed afterwards.  A NaN gradient aborts naming the parameter."""
    if lr <= 0:
        raise TrainError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name in names if names is not None else params.names():
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad
        if np.isnan(g).any():
            raise TrainError(f"NaN gradient in parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        p.grad = None


def cosine_lr(step: int, stage_base_lr: float, stage_len: int) -> float:
    """Cosine decay from the base rate to zero across the stage."""
    if stage_len <= 0:
        return stage_base_lr
    return 0.5 * stage_base_lr * (1.0 + math.cos(math.pi * step / stage_len))


def lr_at(config: TrainConfig, step: int) -> float:
    b1, b2 = config.stage_bounds()
    stage = config.stage_of(step)
    if stage == 1:
        return config.stage_lrs[0]  # constant in the first stage
    if stage == 2:
        return cosine_lr(step - b1, config.stage_lrs[1], max(1, b2 - b1))
    return cosine_lr(step - b2, config.stage_lrs[2], max(1, config.total_steps - b2))


# ---------------------------------------------------------------------------
# batching and augmentation
# ---------------------------------------------------------------------------


def _augment(image: np.ndarray, gt: np.ndarray, mat: np.ndarray, rng, flips: bool, rots: bool):
    if flips:
        if rng.integers(0, 2):
            image, gt, mat = (np.flip(a, axis=1) for a in (image, gt, mat))
        if rng.integers(0, 2):
            image, gt, mat = (np.flip(a, axis=2) for a in (image, gt, mat))
    if rots:
        k = int(rng.integers(0, 4))
        if k:
            image, gt, mat = (np.rot90(a, k, axes=(1, 2)) for a in (image, gt, mat))
    return np.ascontiguousarray(image), np.ascontiguousarray(gt), np.ascontiguousarray(mat)


def _sample_batch(scenes: list[SceneTriplet], config: TrainConfig, crop: int, rng):
    h, w = scenes[0].input.shape[1:]
    if crop > h or crop > w:
        raise TrainError(f"crop {crop} larger than scene size {h}x{w}")
    images, gts, mats = [], [], []
    for _ in range(config.batch_size):
        scene = scenes[int(rng.integers(0, len(scenes)))]
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        sl = (slice(None), slice(top, top + crop), slice(left, left + crop))
        image, gt, mat = _augment(
            scene.input[sl], scene.gt[sl], scene.material_map[sl], rng, config.flip_augment, config.rot_augment
        )
        images.append(image)
        gts.append(gt)
        mats.append(mat)
    return np.stack(images), np.stack(gts), np.stack(mats)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    mean_psnr: float
    mean_ssim: float
    rows: list[tuple[str, float, float]]


def evaluate(
    params: ModelParams,
    model_config: ModelConfig,
    provider,
    scenes: list[SceneTriplet],
    use_refiner: bool = False,
    ids: list[str] | None = None,
) -> EvalResult:
    """Forward every scene, clip to [0,1], optionally refine, score."""
    if not scenes:
        raise TrainError("evaluate needs a non-empty dataset")
    rows = []
    with T.no_grad():
        for i, scene in enumerate(scenes):
            image = Tensor(scene.input[None])
            prior = provider.encode(scene.material_map[None]) if model_config.guidance_enabled else None
            out = T.clip01(forward(image, prior, params, model_config))
            if use_refiner:
                out = refiner_apply(out, params)
            pred = out.data[0]
            name = ids[i] if ids else f"scene_{i}"
            rows.append((name, metrics.psnr(pred, scene.gt), metrics.ssim(pred, scene.gt)))
    return EvalResult(
        mean_psnr=float(np.mean([r[1] for r in rows])),
        mean_ssim=float(np.mean([r[2] for r in rows])),
        rows=rows,
    )


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

LOG_HEADER = "step\tstage\tlr\ttrain_loss\tval_psnr\tval_ssim"


def train_loop(
    config: TrainConfig,
    model_config: ModelConfig,
    provider,
    train_scenes: list[SceneTriplet],
    val_scenes: list[SceneTriplet],
    out_dir: str | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Run the full schedule; returns trained params and the metrics log.

    When ``out_dir`` is given, writes ``train_log.tsv`` plus per-stage,
    best-validation, and last checkpoints there.
    """
    config.validate()
    model_config.validate()
    if not train_scenes:
        raise TrainError("training dataset is empty")

    params = init_params(model_config, config.seed)
    state = OptimState()
    scale_state = OptimState()  # injection scales run as their own group
    rng = np.random.default_rng([int(config.seed), 0x7247])
    refiner = model_config.refiner_enabled

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    log_rows: list[dict] = []
    log_lines = [LOG_HEADER]
    val_every = max(1, config.total_steps // 10)
    best_psnr = -np.inf
    b1, b2 = config.stage_bounds()
    prev_stage = 1

    for step in range(config.total_steps):
        stage = config.stage_of(step)
        if out and stage != prev_stage:
            save_checkpoint(out / f"ckpt_stage{prev_stage}.cndt", params, model_config)
        prev_stage = stage
        lr = lr_at(config, step)
        crop = config.crop_at(step)

        images, gts, mats = _sample_batch(train_scenes, config, crop, rng)
        image_t, gt_t = Tensor(images), Tensor(gts)
        prior = provider.encode(mats) if model_config.guidance_enabled else None

        if stage == 2 and refiner:
            with T.no_grad():
                base_out = T.clip01(forward(image_t, prior, params, model_config))
            step_loss = loss(refiner_apply(Tensor(base_out.data), params), gt_t, config.ssim_weight)
            names = params.trainable(only_refiner=True)
        else:
            y = forward(image_t, prior, params, model_config)
            if stage == 3 and refiner:
                y = refiner_apply(T.clip01(y), params)
            step_loss = loss(y, gt_t, config.ssim_weight)
            names = params.trainable(include_refiner=(stage == 3 and refiner))

        T.backward(step_loss)
        loss_val = step_loss.item()
        if not np.isfinite(loss_val):
            raise TrainError(f"non-finite training loss at step {step}")
        scale_names = [n for n in names if n.endswith(".inject.scale")]
        plain_names = [n for n in names if not n.endswith(".inject.scale")]
        adam_step(params, state, lr, config.betas, config.eps, plain_names)
        if scale_names:
            adam_step(params, scale_state, lr * config.scale_lr_multiplier, config.betas, config.eps, scale_names)
        T.clear_tape()

        row = {"step": step, "stage": stage, "lr": lr, "train_loss": loss_val}
        val_due = val_scenes and ((step + 1) % val_every == 0 or step + 1 == config.total_steps)
        if val_due:
            result = evaluate(params, model_config, provider, val_scenes, use_refiner=refiner and stage >= 2)
            row["val_psnr"] = result.mean_psnr
            row["val_ssim"] = result.mean_ssim
            if out and result.mean_psnr > best_psnr:
                best_psnr = result.mean_psnr
                save_checkpoint(out / "ckpt_best.cndt", params, model_config)
        log_rows.append(row)
        log_lines.append(
            f"{step}\t{stage}\t{lr:.8g}\t{loss_val:.6f}\t"
            + (f"{row['val_psnr']:.6f}\t{row['val_ssim']:.6f}" if val_due else "\t")
        )

    if out:
        save_checkpoint(out / f"ckpt_stage{prev_stage}.cndt", params, model_config)
        save_checkpoint(out / "ckpt_last.cndt", params, model_config)
        if not val_scenes:
            save_checkpoint(out / "ckpt_best.cndt", params, model_config)
        (out / "train_log.tsv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")

    return params, log_rows


def parse_config_text(text: str) -> tuple[TrainConfig, ModelConfig]:
    """Parse ``key = value`` lines (# comments) into the two config objects.

    Unknown keys raise, so typos fail loudly instead of silently training
    with defaults.
    """
    values: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TrainError(f"bad config line (expected key = value): {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()

    def pop_bool(key: str, default: bool) -> bool:
        raw = values.pop(key, None)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise TrainError(f"bad boolean for {key}: {raw!r}")

    train = TrainConfig(
        total_steps=int(values.pop("total_steps", TrainConfig.total_steps)),
        batch_size=int(values.pop("batch_size", TrainConfig.batch_size)),
        ssim_weight=float(values.pop("ssim_weight", TrainConfig.ssim_weight)),
        eps=float(values.pop("eps", TrainConfig.eps)),
        seed=int(values.pop("seed", TrainConfig.seed)),
        val_fraction=float(values.pop("val_fraction", TrainConfig.val_fraction)),
        flip_augment=pop_bool("flip_augment", True),
        rot_augment=pop_bool("rot_augment", True),
    )
    if "stage_lrs" in values:
        train.stage_lrs = tuple(float(v) for v in values.pop("stage_lrs").split(","))
    if "betas" in values:
        train.betas = tuple(float(v) for v in values.pop("betas").split(","))
    if "crops" in values:
        # e.g. crops = 0:32,100:48,200:64
        pairs = []
        for item in values.pop("crops").split(","):
            start, _, crop = item.partition(":")
            pairs.append((int(start), int(crop)))
        train.crops_schedule = tuple(pairs)

    mdl = ModelConfig(
        stages=int(values.pop("stages", ModelConfig.stages)),
        base_channels=int(values.pop("base_channels", ModelConfig.base_channels)),
        prior_dim=int(values.pop("prior_dim", ModelConfig.prior_dim)),
        prior_seed=int(values.pop("prior_seed", ModelConfig.prior_seed)),
        refiner_enabled=pop_bool("refiner", False),
        guidance_enabled=pop_bool("guidance", True),
        refinement_enabled=pop_bool("refinement", True),
    )
    if values:
        raise TrainError(f"unknown config keys: {sorted(values)}")
    train.validate()
    mdl.validate()
    return train, mdl


def load_config_file(path) -> tuple[TrainConfig, ModelConfig]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def split_dataset(scenes: list[SceneTriplet], val_fraction: float) -> tuple[list[SceneTriplet], list[SceneTriplet]]:
    """Deterministic tail split: the last ceil(fraction * n) scenes validate."""
    if not 0 <= val_fraction < 1:
        raise TrainError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = int(math.ceil(val_fraction * len(scenes))) if val_fraction else 0
    if n_val >= len(scenes):
        n_val = len(scenes) - 1
    return scenes[: len(scenes) - n_val], scenes[len(scenes) - n_val :]
