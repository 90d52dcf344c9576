"""Training loop, configuration, checkpointing, and cross-validation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .cloudio import canonicalize, load_ply
from .datapack import FoldPlan, Manifest, crop_sample, kfold_split, make_batch
from .network import ModelConfig, QualityModel
from .objective import loss_dis, loss_rank, loss_reg, total_loss
from .projector import RenderSettings, ViewSet, project_views

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CACHE_ENV = "PCQA_CACHE_DIR"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr_pretrained: float = 2e-5
    lr_rest: float = 2e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    weight_decay: float = 5e-4
    crop_size: int = 224
    render_resolution: int = 512
    point_radius: float = 0.01
    seed: int = 0
    lambda_dis: float = 1.0
    lambda_rank: float = 1.0
    softrank_epsilon: float = 1e-1
    stop_grad_coarse: bool = False
    test_crops: int = 10
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not (0 < self.lr_decay <= 1):
            raise ValueError("lr decay must lie in (0, 1]")
        for name in ("epochs", "batch_size", "crop_size", "render_resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def render_settings(self) -> RenderSettings:
        return RenderSettings(
            resolution=self.render_resolution, point_radius=self.point_radius
        )

    @staticmethod
    def tiny(seed: int = 0) -> "TrainConfig":
        """Desk-scale settings used by tests: 64 px renders, tiny transformer."""
        return TrainConfig(
            epochs=30,
            batch_size=4,
            crop_size=64,
            render_resolution=64,
            point_radius=0.06,
            lr_pretrained=1e-2,
            lr_rest=1e-2,
            seed=seed,
            model=ModelConfig.tiny(64),
        )

    def to_flat_dict(self):
        d = asdict(self)
        model = d.pop("model")
        d.update({f"model.{k}": v for k, v in model.items()})
        return d

    @staticmethod
    def from_flat_dict(d) -> "TrainConfig":
        d = dict(d)
        model = {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith("model.")}
        rest = {k: v for k, v in d.items() if not k.startswith("model.")}
        return TrainConfig(model=ModelConfig(**model), **rest)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_flat_dict(), fh, indent=2, sort_keys=True)

    @staticmethod
    def load(path) -> "TrainConfig":
        with open(path) as fh:
            return TrainConfig.from_flat_dict(json.load(fh))


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_flat_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# Render cache

def cache_dir(explicit=None) -> Path:
    root = explicit or os.environ.get(CACHE_ENV) or ".pcqa_cache"
    return Path(root)


def render_entry(entry, settings: RenderSettings, cache=None) -> ViewSet:
    """Render one manifest entry, memoized on disk keyed by the settings hash."""
    key = hashlib.sha256(json.dumps(settings.to_dict(), sort_keys=True).encode()).hexdigest()[:12]
    cdir = cache_dir(cache) / key
    cdir.mkdir(parents=True, exist_ok=True)
    npz = cdir / f"{entry.sample_id}.npz"
    if npz.exists():
        data = np.load(npz)
        return ViewSet(
            texture=data["texture"], depth=data["depth"],
            occupancy=data["occupancy"], ratios=data["ratios"],
        )
    pc = canonicalize(load_ply(entry.path))
    vs = project_views(pc, settings)
    tmp = npz.with_suffix(".tmp.npz")
    np.savez_compressed(
        tmp, texture=vs.texture, depth=vs.depth, occupancy=vs.occupancy, ratios=vs.ratios
    )
    os.replace(tmp, npz)
    return vs


def load_samples(entries, settings: RenderSettings, cache=None):
    """[(ViewSet, mos)] for a list of manifest entries."""
    return [(render_entry(e, settings, cache), e.mos) for e in entries]


# --------------------------------------------------------------------------
# Checkpointing

def save_checkpoint(path, model, optimizer, epoch, cfg: TrainConfig) -> None:
    """Atomic write (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config_hash": config_hash(cfg),
            "config": cfg.to_flat_dict(),
            "epoch": epoch,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
        },
        tmp,
    )
    os.replace(tmp, path)


def load_checkpoint(path, cfg: TrainConfig | None = None):
    """Load a checkpoint dict; verifies the config hash when cfg is given."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {state.get('version')}")
    if cfg is not None and state["config_hash"] != config_hash(cfg):
        raise ValueError("checkpoint config hash does not match the resume config")
    return state


def model_from_checkpoint(path) -> tuple[QualityModel, TrainConfig]:
    state = load_checkpoint(path)
    cfg = TrainConfig.from_flat_dict(state["config"])
    model = QualityModel(cfg.model)
    model.load_state_dict(state["model"])
    model.eval()
    return model, cfg


# --------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    model: QualityModel
    best_state: dict        # weights at the epoch with minimal training loss
    best_epoch: int
    log: list               # per-epoch dicts


def build_optimizer(model: QualityModel, cfg: TrainConfig):
    """Adam with two parameter groups: pretrained backbone vs everything else."""
    pre = model.pretrained_parameters()
    rest = model.fresh_parameters()
    assert len(pre) + len(rest) == len(list(model.parameters())), (
        "parameter groups must partition the model"
    )
    return torch.optim.Adam(
        [
            {"params": pre, "lr": cfg.lr_pretrained},
            {"params": rest, "lr": cfg.lr_rest},
        ],
        weight_decay=cfg.weight_decay,
    )


def train(cfg: TrainConfig, samples, model: QualityModel | None = None,
          start_epoch: int = 0, optimizer=None) -> TrainResult:
    """Train on [(ViewSet, mos)] samples; selects the minimal-training-loss epoch.

    Deterministic given cfg.seed (up to floating point nonassociativity).
    """
    torch.manual_seed(cfg.seed)
    if model is None:
        model = QualityModel(cfg.model)
    if optimizer is None:
        optimizer = build_optimizer(model, cfg)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay
    )
    for _ in range(start_epoch):
        scheduler.step()

    best_loss = float("inf")
    best_state = None
    best_epoch = -1
    history = []
    mos_all = np.array([m for _, m in samples])
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng(cfg.seed * 100003 + epoch)
        order = rng.permutation(len(samples))
        model.train()
        epoch_loss = 0.0
        preds = np.zeros(len(samples))
        nbatches = 0
        for s0 in range(0, len(samples), cfg.batch_size):
            idx = order[s0:s0 + cfg.batch_size]
            cropped = [
                (crop_sample(samples[i][0], cfg.crop_size, rng), samples[i][1])
                for i in idx
            ]
            batch = make_batch(cropped)
            out = model(batch)
            l_reg = loss_reg(out["q_c"], out["q_f"], batch.mos)
            l_dis = loss_dis(out["f_g"], out["f_l"])
            l_rank = loss_rank(
                out["q_c"], out["q_f"], batch.mos,
                epsilon=cfg.softrank_epsilon,
                stop_grad_coarse=cfg.stop_grad_coarse,
            )
            loss, report = total_loss(
                l_reg, l_dis, l_rank, cfg.lambda_dis, cfg.lambda_rank
            )
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"NaN/inf loss at epoch {epoch}, batch samples {idx.tolist()}: {report}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            preds[idx] = out["q_f"].detach().numpy()
            nbatches += 1
        epoch_loss /= max(nbatches, 1)
        entry = {
            "epoch": epoch,
            "loss": epoch_loss,
            "lr_pretrained": optimizer.param_groups[0]["lr"],
            "lr_rest": optimizer.param_groups[1]["lr"],
        }
        scheduler.step()
        if len(samples) >= 2 and np.ptp(mos_all) > 0 and np.ptp(preds) > 0:
            entry["train_srocc"] = evalkit.srocc(preds, mos_all)
        history.append(entry)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
    return TrainResult(model=model, best_state=best_state, best_epoch=best_epoch, log=history)


def run_fold(cfg: TrainConfig, manifest: Manifest, plan: FoldPlan, fold: int,
             cache=None) -> evalkit.MetricReport:
    train_entries, test_entries = plan.split(manifest, fold)
    settings = cfg.render_settings()
    train_samples = load_samples(train_entries, settings, cache)
    test_samples = load_samples(test_entries, settings, cache)
    result = train(cfg, train_samples)
    result.model.load_state_dict(result.best_state)
    return evalkit.evaluate(
        result.model, test_samples,
        crops=cfg.test_crops, seed=cfg.seed, fold=fold, crop_size=cfg.crop_size,
    )


def run_cv(cfg: TrainConfig, manifest: Manifest, k: int, cache=None):
    """Content-disjoint k-fold cross-validation; returns (reports, average)."""
    plan = kfold_split(manifest, k, cfg.seed)
    reports = [run_fold(cfg, manifest, plan, i, cache) for i in range(k)]
    return reports, evalkit.average_report(reports)
