"""Joint optimization of the perturbation module, generator and critic."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .extractor import IdentityExtractor
from .fpm import FeaturePerturbation
from .frg import FaceReviveGenerator, FrgConfig
from .interference import InterferenceSpec, apply, sample_transform, step_rng
from .losses import (LOSS_TERMS, LossWeights, NonFiniteLossError, PatchDiscriminator, loss_deviate,
                     loss_discriminator, loss_perceptual, loss_pixel, loss_total, lsgan_generator)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_adv", "L_dis", "L_pixel", "L_lpips", "L_deviate", "L_total")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_gen: float = 2e-4
    lr_fpm: float | None = None  # None -> lr_gen / 2
    lr_disc: float | None = None  # None -> lr_gen
    beta1: float = 0.5
    beta2: float = 0.999
    alpha: float = 0.05
    lambda_a: float = 0.2
    lambda_p: float = 0.5
    lambda_l: float = 1.0
    lambda_d: float = 0.15
    disc_period: int = 2
    seed: int = 0
    resolution: int = 64
    d_f: int = 128
    d_h: int | None = None
    stem_channels: int = 16
    channels: tuple[int, int] = (32, 64)
    window: int = 4
    heads: int = 2
    id_hidden: int | None = None
    disc_channels: tuple[int, ...] = (32, 64, 128, 256)
    interference: bool = True
    interference_on_loss_pair: bool = False
    perceptual_normalize: bool = False
    input_residual: bool = True
    lr_decay_start: float = 0.25  # fraction of the run after which all lrs decay linearly to 0; 1 disables

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.disc_channels = tuple(self.disc_channels)
        if self.epochs < 0 or self.batch_size <= 0 or self.disc_period <= 0:
            raise ValueError("epochs >= 0, batch_size > 0 and disc_period > 0 required")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.resolution <= 0 or self.resolution % 4:
            raise ValueError(f"resolution must be a positive multiple of 4, got {self.resolution}")
        if not 0.0 <= self.lr_decay_start <= 1.0:
            raise ValueError(f"lr_decay_start must lie in [0, 1], got {self.lr_decay_start}")
        self.weights  # validates

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_a, self.lambda_p, self.lambda_l, self.lambda_d)

    @property
    def fpm_lr(self) -> float:
        return self.lr_gen / 2 if self.lr_fpm is None else self.lr_fpm

    @property
    def disc_lr(self) -> float:
        return self.lr_gen if self.lr_disc is None else self.lr_disc

    @property
    def frg_config(self) -> FrgConfig:
        return FrgConfig(d_f=self.d_f, stem_channels=self.stem_channels, channels=self.channels,
                         window=self.window, heads=self.heads, id_hidden=self.id_hidden,
                         input_residual=self.input_residual)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


class Protector(torch.nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.fpm = FeaturePerturbation(cfg.d_f, cfg.d_h)
        self.frg = FaceReviveGenerator(cfg.frg_config)
        self.disc = PatchDiscriminator(cfg.disc_channels)


@dataclass
class ProtectorState:
    cfg: TrainConfig
    model: Protector
    opt_gen: torch.optim.Optimizer
    opt_fpm: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    step: int = 0
    last_record: dict | None = None

    @property
    def fpm(self) -> FeaturePerturbation:
        return self.model.fpm

    @property
    def frg(self) -> FaceReviveGenerator:
        return self.model.frg

    @property
    def disc(self) -> PatchDiscriminator:
        return self.model.disc


def init_state(cfg: TrainConfig) -> ProtectorState:
    torch.manual_seed(cfg.seed)
    model = Protector(cfg)
    betas = (cfg.beta1, cfg.beta2)
    return ProtectorState(
        cfg, model,
        torch.optim.Adam(model.frg.parameters(), lr=cfg.lr_gen, betas=betas),
        torch.optim.Adam(model.fpm.parameters(), lr=cfg.fpm_lr, betas=betas),
        torch.optim.Adam(model.disc.parameters(), lr=cfg.disc_lr, betas=betas),
    )


def protect(state: ProtectorState, extractor: IdentityExtractor, images: torch.Tensor,
            alpha: float | None = None) -> torch.Tensor:
    """Protected images I_p = FRG(I_s, src + alpha * delta(src))."""
    alpha = state.cfg.alpha if alpha is None else alpha
    src = extractor(images)
    return state.frg(images, state.fpm(src, alpha))


@torch.no_grad()
def protect_array(state: ProtectorState, extractor: IdentityExtractor, images: np.ndarray,
                  batch_size: int = 32, alpha: float | None = None) -> np.ndarray:
    state.model.eval()
    out = [protect(state, extractor, torch.from_numpy(images[i:i + batch_size]), alpha).numpy()
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else images[:0].copy()


def disc_scheduled(step: int, period: int) -> bool:
    """Critic updates happen on steps with ``step % period == 0`` (step 0 included)."""
    return step % period == 0


def train_step(state: ProtectorState, batch: torch.Tensor, extractor: IdentityExtractor,
               spec: InterferenceSpec, cfg: TrainConfig | None = None,
               perceptual: IdentityExtractor | None = None) -> dict:
    """One joint update. ``perceptual`` is the frozen trunk for the perceptual
    loss; it defaults to the identity extractor itself."""
    cfg = cfg or state.cfg
    perc = perceptual or extractor
    norm = cfg.perceptual_normalize
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if not extractor.frozen:
        raise ValueError("extractor must be frozen before protector training")
    model, step = state.model, state.step
    model.train()
    w = cfg.weights

    with torch.no_grad():
        src = extractor(batch)
        src_feats = perc.trunk_features(batch, norm)
    prot = model.frg(batch, model.fpm(src, cfg.alpha))

    if disc_scheduled(step, cfg.disc_period):
        l_dis = loss_discriminator(model.disc, batch, prot.detach())
        state.opt_disc.zero_grad(set_to_none=True)
        l_dis.backward()
        state.opt_disc.step()
    else:
        with torch.no_grad():
            l_dis = loss_discriminator(model.disc, batch, prot)

    t = sample_transform(spec, step_rng(cfg.seed, step)) if cfg.interference else None
    prot_t = apply(t, prot) if t is not None else prot
    ref = apply(t, batch) if (t is not None and cfg.interference_on_loss_pair) else batch
    loss_pair = prot_t if cfg.interference_on_loss_pair else prot
    if ref is not batch:
        with torch.no_grad():
            src_feats = perc.trunk_features(ref, norm)

    model.disc.requires_grad_(False)
    try:
        parts = {
            "adv": lsgan_generator(model.disc(prot)),
            "pixel": loss_pixel(ref, loss_pair),
            "lpips": loss_perceptual(src_feats, perc.trunk_features(loss_pair, norm)),
            "deviate": loss_deviate(src, extractor(prot_t)),
        }
    finally:
        model.disc.requires_grad_(True)
    record = {"step": step, "L_adv": parts["adv"].item(), "L_dis": l_dis.item(),
              "L_pixel": parts["pixel"].item(), "L_lpips": parts["lpips"].item(),
              "L_deviate": parts["deviate"].item()}
    if not math.isfinite(record["L_dis"]):
        raise NonFiniteLossError("dis", record["L_dis"], {"last": state.last_record})
    try:
        total = loss_total(parts, w)
    except NonFiniteLossError as e:
        e.record = {"current": record, "last": state.last_record}
        raise
    record["L_total"] = total.item()

    state.opt_gen.zero_grad(set_to_none=True)
    state.opt_fpm.zero_grad(set_to_none=True)
    total.backward()
    state.opt_gen.step()
    state.opt_fpm.step()
    state.step += 1
    state.last_record = record
    return record


def lr_factor(step: int, total_steps: int, decay_start: float) -> float:
    """1 until ``decay_start * total_steps``, then linear down to 0 at ``total_steps``."""
    start = decay_start * total_steps
    if step < start or total_steps <= start:
        return 1.0
    return (total_steps - step) / (total_steps - start)


def set_lr(state: ProtectorState, factor: float, cfg: TrainConfig | None = None) -> None:
    cfg = cfg or state.cfg
    for opt, base in ((state.opt_gen, cfg.lr_gen), (state.opt_fpm, cfg.fpm_lr), (state.opt_disc, cfg.disc_lr)):
        for group in opt.param_groups:
            group["lr"] = base * factor


def steps_per_epoch(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)


def save_checkpoint(state: ProtectorState) -> bytes:
    tensors = ckpt.module_tensors("model", state.model)
    meta = {"step": state.step, "config": state.cfg.to_dict()}
    for name in ("opt_gen", "opt_fpm", "opt_disc"):
        m, t = ckpt.optimizer_tensors(name, getattr(state, name))
        meta[name] = m
        tensors.update(t)
    return ckpt.pack("protector", meta, tensors)


def load_checkpoint(blob: bytes) -> ProtectorState:
    meta, tensors = ckpt.unpack(blob, "protector")
    state = init_state(TrainConfig.from_dict(meta["config"]))
    ckpt.load_module(state.model, "model", tensors)
    for name in ("opt_gen", "opt_fpm", "opt_disc"):
        ckpt.load_optimizer(getattr(state, name), name, meta[name], tensors)
    state.step = meta["step"]
    return state


def _format_row(r: dict) -> list[str]:
    return [str(r["step"])] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]]


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < step] if rows else [list(LOG_COLUMNS)]
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def train(images: np.ndarray, cfg: TrainConfig, extractor: IdentityExtractor,
          run_dir: str | Path | None = None, state: ProtectorState | None = None,
          spec: InterferenceSpec | None = None, max_steps: int | None = None,
          checkpoint_every_epoch: bool = True,
          perceptual: IdentityExtractor | None = None) -> ProtectorState:
    """Run (or resume) training over ``images`` (N, 3, R, R).

    The batch order of every epoch depends only on (seed, epoch), and the
    interference draw only on (seed, step), so a run resumed from any
    checkpoint replays the uninterrupted run exactly.
    """
    spec = spec or InterferenceSpec()
    state = state or init_state(cfg)
    if images.shape[-1] != cfg.resolution:
        raise ValueError(f"images are {images.shape[-1]}px, config says {cfg.resolution}")
    x_all = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    spe = steps_per_epoch(len(x_all), cfg.batch_size)
    total_steps = cfg.epochs * spe
    end = total_steps if max_steps is None else min(total_steps, state.step + max_steps)

    writer = fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "losses.csv"
        if state.step == 0 or not log_path.exists():
            with log_path.open("w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(LOG_COLUMNS)
        else:
            _truncate_log(log_path, state.step)
        fh = log_path.open("a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
    try:
        order, order_epoch = None, -1
        while state.step < end:
            epoch, b = divmod(state.step, spe)
            if epoch != order_epoch:
                order, order_epoch = epoch_order(cfg.seed, epoch, len(x_all)), epoch
            idx = torch.from_numpy(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            set_lr(state, lr_factor(state.step, total_steps, cfg.lr_decay_start), cfg)
            rec = train_step(state, x_all[idx], extractor, spec, cfg, perceptual)
            if writer is not None:
                writer.writerow(_format_row(rec))
            if state.step % spe == 0:
                ep = state.step // spe
                log.info("epoch %d/%d step %d deviate %.4f pixel %.5f lpips %.5f", ep, cfg.epochs,
                         state.step, rec["L_deviate"], rec["L_pixel"], rec["L_lpips"])
                if run_dir is not None and checkpoint_every_epoch:
                    fh.flush()
                    (run_dir / f"ckpt_epoch_{ep}.bin").write_bytes(save_checkpoint(state))
    finally:
        if fh is not None:
            fh.close()
    return state
