"""Three-stage training: backbone, then shallow maps on the frozen backbone, then denoisers.

Every mini-batch order and every (t, eps) draw comes from a stream named by
``("train", stage, level, epoch)`` under the training seed, so any stage or
level can be re-run in isolation and reproduces the same numbers.
"""

from __future__ import annotations

import copy
import logging
import math
from typing import Callable

import torch

from .backbone import loss_init
from .config import TrainConfig
from .data import Dataset
from .diffusion import Denoiser, draw_t_eps, loss_diffusion
from .numerics import RngStream, stream_id
from .pipeline import STAGES, Pipeline
from .shallow import ShallowMap, loss_shallow

log = logging.getLogger(__name__)


class TrainingDivergence(ArithmeticError):
    def __init__(self, stage: str, step: int):
        super().__init__(f"{stage}: loss became non-finite at step {step}")
        self.stage = stage
        self.step = step


def _optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=0.9)


def fit(module: torch.nn.Module, n: int, batch_loss: Callable[[torch.Tensor, RngStream], torch.Tensor],
        val_loss: Callable[[], float], cfg: TrainConfig, epochs: int, tag: tuple) -> list[dict]:
    """Generic mini-batch loop with early stopping on validation loss.

    ``batch_loss(idx, rng)`` returns the training loss on rows ``idx``. The
    module is left holding the parameters of the best validation epoch.
    """
    opt = _optimizer([p for p in module.parameters() if p.requires_grad], cfg)
    best, best_state, stale = math.inf, copy.deepcopy(module.state_dict()), 0
    history, step = [], 0
    for epoch in range(epochs):
        rng = RngStream(cfg.seed, stream_id("train", *tag, epoch))
        order = torch.as_tensor(rng.permutation(n))
        module.train()
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = batch_loss(idx, rng)
            if not torch.isfinite(loss):
                raise TrainingDivergence(tag[0], step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            step += 1
        module.eval()
        val = val_loss()
        if not math.isfinite(val):
            raise TrainingDivergence(tag[0], step)
        history.append({"epoch": epoch, "train_loss": total / n, "val_loss": val})
        log.info("%s epoch %d train %.5f val %.5f", tag, epoch, total / n, val)
        if val < best:
            best, best_state, stale = val, copy.deepcopy(module.state_dict()), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    module.load_state_dict(best_state)
    module.eval()
    return history


def train_backbone(pipe: Pipeline, train: Dataset, val: Dataset, cfg: TrainConfig) -> list[dict]:
    model = pipe.backbone
    model.requires_grad_(True)

    def batch_loss(idx, rng):
        prob, _ = model(train.images[idx])
        return loss_init(prob, train.labels[idx])

    @torch.no_grad()
    def val_loss():
        return loss_init(model(val.images)[0], val.labels).item()

    history = fit(model, len(train), batch_loss, val_loss, cfg, cfg.epochs_backbone, ("backbone",))
    model.requires_grad_(False)
    return history


@torch.no_grad()
def _taps(pipe: Pipeline, data: Dataset, chunk: int = 256) -> list[torch.Tensor]:
    pipe.backbone.eval()
    parts = [pipe.backbone.taps(data.images[s:s + chunk]) for s in range(0, len(data), chunk)]
    return [torch.cat([p[k] for p in parts]) for k in range(pipe.K)]


def train_shallow_level(mapper: ShallowMap, k: int, tap_train: torch.Tensor, y_train: torch.Tensor,
                        tap_val: torch.Tensor, y_val: torch.Tensor, cfg: TrainConfig) -> list[dict]:
    def batch_loss(idx, rng):
        return loss_shallow(mapper(tap_train[idx]), y_train[idx])

    @torch.no_grad()
    def val_loss():
        return loss_shallow(mapper(tap_val), y_val).item()

    return fit(mapper, len(y_train), batch_loss, val_loss, cfg, cfg.epochs_shallow, ("shallow", k))


def train_shallow(pipe: Pipeline, train: Dataset, val: Dataset, cfg: TrainConfig) -> list[list[dict]]:
    """Fit each psi_k on its own tap; the backbone only runs forward under no_grad."""
    pipe.backbone.requires_grad_(False)
    taps_tr, taps_va = _taps(pipe, train), _taps(pipe, val)
    return [train_shallow_level(m, k, taps_tr[k], train.labels, taps_va[k], val.labels, cfg)
            for k, m in enumerate(pipe.shallow)]


@torch.no_grad()
def latent_codes(pipe: Pipeline, data: Dataset, chunk: int = 256) -> list[torch.Tensor]:
    parts = [pipe.latent(data.images[s:s + chunk]) for s in range(0, len(data), chunk)]
    return [torch.cat([p[k] for p in parts]) for k in range(pipe.K)]


def train_diffusion_level(model: Denoiser, k: int, pipe: Pipeline, train: Dataset, z_train: torch.Tensor,
                          val: Dataset, z_val: torch.Tensor, cfg: TrainConfig) -> list[dict]:
    schedule = pipe.schedule
    val_rng = RngStream(cfg.seed, stream_id("val", "diffusion", k))
    t_val, eps_val = draw_t_eps(val_rng, len(val), pipe.num_classes, schedule.T, z_val.dtype)

    def batch_loss(idx, rng):
        # BatchNorm needs more than one row in training mode.
        if len(idx) < 2:
            return torch.zeros((), dtype=z_train.dtype, requires_grad=True)
        return loss_diffusion(model, train.images[idx], train.labels[idx], z_train[idx], schedule, rng)

    @torch.no_grad()
    def val_loss():
        return loss_diffusion(model, val.images, val.labels, z_val, schedule, t=t_val, eps=eps_val).item()

    return fit(model, len(train), batch_loss, val_loss, cfg, cfg.epochs_diffusion, ("diffusion", k))


def train_diffusion(pipe: Pipeline, train: Dataset, val: Dataset, cfg: TrainConfig) -> list[list[dict]]:
    pipe.backbone.requires_grad_(False)
    for m in pipe.shallow:
        m.requires_grad_(False)
    z_tr, z_va = latent_codes(pipe, train), latent_codes(pipe, val)
    return [train_diffusion_level(m, k, pipe, train, z_tr[k], val, z_va[k], cfg)
            for k, m in enumerate(pipe.denoisers)]


def train_all(pipe: Pipeline, train: Dataset, val: Dataset,
              on_stage: Callable[[str, Pipeline], None] | None = None) -> Pipeline:
    """Run the stages not yet completed (``pipe.stages_done``) in order.

    ``train`` and ``val`` must already be normalised with ``pipe.norm``.
    """
    cfg = pipe.config.train
    steps = {"backbone": train_backbone, "shallow": train_shallow, "diffusion": train_diffusion}
    for i, stage in enumerate(STAGES):
        if i < pipe.stages_done:
            continue
        log.info("training stage %s", stage)
        pipe.history[stage] = steps[stage](pipe, train, val, cfg)
        pipe.stages_done = i + 1
        if on_stage is not None:
            on_stage(stage, pipe)
    return pipe
