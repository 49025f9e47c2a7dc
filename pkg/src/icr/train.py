"""Training: standard segmentation network, click refinement network,
and the single-model click-free baseline.

All three share the composite Dice+BCE objective, AdamW with cosine
learning-rate decay, per-iteration augmentation, early stopping on
validation DSC, and best-checkpoint selection. Refinement and baseline
training run the interactive loop inside each iteration and take an
optimizer step after every simulated interaction event.

Runs are bit-reproducible for a fixed master seed: every stochastic
choice draws from a named Philox stream derived from (seed, role, ...).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .augment import AugmentConfig, sample_augmentation, apply_augmentation
from .clicks import ClickSet, encode_clicks, mask_dropout, simulate_click
from .errors import DataError, ModelError
from .metrics import dsc
from .nn.losses import dice_bce_loss
from .nn.optim import AdamW, cosine_lr
from .nn.tensor import Tensor
from .nn.unet import DESK_CHANNELS, DESK_STRIDES, PROB_CLAMP, ResUNet3d, UNetConfig
from .session import (
    SingleStageDriver,
    TwoStageDriver,
    channels_from_preprocessed,
    preprocess_case,
    run_loop,
    stack_refine_input,
)
from .volume import CaseRecord, ProbMap, load_case, load_manifest


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 300
    early_stop_patience: int = 50
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    train_clicks_range: tuple[int, int] = (1, 15)
    val_clicks: int = 10
    mask_dropout_p: float = 0.2
    click_free_prob: float = 0.0
    fold: int = 0
    k_folds: int = 5
    seed: int = 0
    channels: tuple[int, ...] = DESK_CHANNELS
    strides: tuple[int, ...] = DESK_STRIDES
    augment: bool = True

    def __post_init__(self):
        if self.early_stop_patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if not 0.0 <= self.mask_dropout_p <= 1.0 or not 0.0 <= self.click_free_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.train_clicks_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad interaction count range {self.train_clicks_range}")


@dataclass
class TrainLog:
    """Per-epoch records (deterministic fields only) plus wall times,
    which are kept in memory and never persisted so that rerunning a
    seeded command reproduces the log file bit-exactly."""

    records: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_dsc: float = -1.0

    def save_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def kfold_split(entries: list[dict], k: int = 5, fold: int = 0) -> tuple[list[str], list[str]]:
    """Deterministic disjoint split by sorted case order (index mod k)."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if not 0 <= fold < k:
        raise ValueError(f"fold {fold} outside [0, {k})")
    ids = sorted(e["id"] for e in entries)
    if len(ids) < k:
        raise DataError(f"{len(ids)} cases is fewer than {k} folds")
    train = [cid for i, cid in enumerate(ids) if i % k != fold]
    val = [cid for i, cid in enumerate(ids) if i % k == fold]
    return train, val


def load_split(data_root, config: TrainConfig) -> tuple[list[CaseRecord], list[CaseRecord]]:
    """Load and preprocess the train/validation cases of one fold."""
    root = Path(data_root)
    entries = load_manifest(root)
    train_ids, val_ids = kfold_split(entries, config.k_folds, config.fold)
    train = [preprocess_case(load_case(root / cid)) for cid in train_ids]
    val = [preprocess_case(load_case(root / cid)) for cid in val_ids]
    for case in train + val:
        if case.gtv is None:
            raise DataError(f"case {case.case_id} has no ground truth")
    return train, val


def _derive_net_seed(seed: int, role: str) -> int:
    return int(rngmod.stream(seed, role, "net-init").integers(0, 2**62))


class _BestTracker:
    """Early stopping with strict-improvement reset and weight snapshots."""

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best_dsc = -np.inf
        self.best_epoch = -1
        self.best_weights: list[np.ndarray] | None = None
        self.stall = 0

    def update(self, epoch: int, val_dsc: float, params) -> bool:
        """Record the epoch; returns True when training should stop."""
        if val_dsc > self.best_dsc + self.min_delta:
            self.best_dsc = val_dsc
            self.best_epoch = epoch
            self.best_weights = [p.data.copy() for p in params]
            self.stall = 0
        else:
            self.stall += 1
        return self.stall >= self.patience

    def restore(self, params) -> None:
        if self.best_weights is not None:
            for p, w in zip(params, self.best_weights):
                p.data = w.copy()


def _epoch_order(seed: int, role: str, epoch: int, n: int) -> np.ndarray:
    return rngmod.stream(seed, role, "order", epoch).permutation(n)


def _augmented(case: CaseRecord, config: TrainConfig, role: str, epoch: int, idx: int) -> CaseRecord:
    if not config.augment:
        return case
    aug_cfg = AugmentConfig().scaled_for_grid(case.grid)
    rng = rngmod.stream(config.seed, role, "augment", epoch, idx)
    plan = sample_augmentation(aug_cfg, rng)
    return apply_augmentation(plan, case)


def _fit(
    role: str,
    net: ResUNet3d,
    config: TrainConfig,
    train_cases: list[CaseRecord],
    iterate_case,
    validate,
) -> TrainLog:
    if not train_cases:
        raise DataError("training set is empty")
    opt = AdamW(net.parameters(), lr=config.lr0, weight_decay=config.weight_decay)
    log = TrainLog()
    tracker = _BestTracker(config.early_stop_patience)
    params = net.parameters()
    for epoch in range(config.max_epochs):
        t_start = time.perf_counter()
        opt.lr = cosine_lr(epoch, config.max_epochs, config.lr0)
        losses = []
        for idx in _epoch_order(config.seed, role, epoch, len(train_cases)):
            case = _augmented(train_cases[int(idx)], config, role, epoch, int(idx))
            losses.extend(iterate_case(net, opt, case, epoch, int(idx)))
        val_dsc = validate(net, epoch)
        log.records.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else 0.0,
                "val_dsc": float(val_dsc),
                "lr": opt.lr,
            }
        )
        log.wall_times.append(time.perf_counter() - t_start)
        if tracker.update(epoch, val_dsc, params):
            break
    tracker.restore(params)
    log.best_epoch = tracker.best_epoch
    log.best_val_dsc = float(tracker.best_dsc)
    return log


def _step(net: ResUNet3d, opt: AdamW, x: np.ndarray, target: np.ndarray) -> tuple[float, Tensor]:
    """One optimizer step; the reported loss is per-voxel for log scale
    stability (the optimized objective itself sums over voxels)."""
    opt.zero_grad()
    logits = net.forward(x)
    loss = dice_bce_loss(logits, target)
    loss.backward()
    opt.step()
    return float(loss.item()) / target.size, logits


def _prob_from_logits(logits: Tensor) -> np.ndarray:
    prob = expit(logits.data[0]).astype(np.float32)
    return np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)


def train_standard(config: TrainConfig, train_cases, val_cases) -> tuple[ResUNet3d, TrainLog]:
    """Fit the 2-channel initial segmentation network."""
    net = ResUNet3d(
        UNetConfig(2, config.channels, config.strides), seed=_derive_net_seed(config.seed, "standard")
    )

    def iterate_case(net, opt, case, epoch, idx):
        x = channels_from_preprocessed(case)
        target = case.gtv.values.astype(np.float32)[None]
        loss, _ = _step(net, opt, x, target)
        return [loss]

    def validate(net, epoch):
        scores = [
            dsc(ProbMap(c.grid, net.predict_prob(channels_from_preprocessed(c))).threshold(), c.gtv)
            for c in val_cases
        ]
        return float(np.mean(scores))

    log = _fit("standard", net, config, train_cases, iterate_case, validate)
    return net, log


def _interactive_iteration(
    net: ResUNet3d,
    opt: AdamW,
    case: CaseRecord,
    x: np.ndarray,
    prob0: np.ndarray,
    n_events: int,
    config: TrainConfig,
    role: str,
    epoch: int,
    idx: int,
) -> list[float]:
    """Shared refinement-style loop: per-event loss and optimizer step."""
    click_rng = rngmod.stream(config.seed, role, "clicks", epoch, idx)
    drop_rng = rngmod.stream(config.seed, role, "dropout", epoch, idx)
    grid = case.grid
    target = case.gtv.values.astype(np.float32)[None]
    losses = []
    prev = prob0
    clicks = ClickSet()
    for t in range(1, n_events + 1):
        click = simulate_click(ProbMap(grid, prev), case.gtv, click_rng, event_index=t)
        if click is None:
            break
        clicks.append(click)
        guidance = encode_clicks(clicks, grid)
        prev_in = mask_dropout(ProbMap(grid, prev), config.mask_dropout_p, drop_rng, training=True)
        inp = stack_refine_input(x, prev_in.values, guidance.positive, guidance.negative)
        loss, logits = _step(net, opt, inp, target)
        losses.append(loss)
        prev = _prob_from_logits(logits)
    return losses


def train_refinement(
    config: TrainConfig, train_cases, val_cases, standard_net: ResUNet3d
) -> tuple[ResUNet3d, TrainLog]:
    """Fit the 5-channel refinement network on top of a frozen standard net.

    Every training iteration draws the interaction count uniformly from
    train_clicks_range, optimizes after each event, and feeds the
    network's own latest output (with mask dropout) back as input.
    Validation runs the full loop with val_clicks simulated clicks and
    selects the best checkpoint by the endpoint DSC.
    """
    if standard_net is None:
        raise ModelError("refinement training requires a trained standard network")
    if standard_net.config.in_channels != 2:
        raise ModelError("standard network must take 2 channels")
    net = ResUNet3d(
        UNetConfig(5, config.channels, config.strides), seed=_derive_net_seed(config.seed, "refine")
    )

    def iterate_case(net, opt, case, epoch, idx):
        x = channels_from_preprocessed(case)
        prob0 = standard_net.predict_prob(x)
        n_rng = rngmod.stream(config.seed, "refine", "events", epoch, idx)
        lo, hi = config.train_clicks_range
        n_events = int(n_rng.integers(lo, hi + 1))
        return _interactive_iteration(
            net, opt, case, x, prob0, n_events, config, "refine", epoch, idx
        )

    def validate(net, epoch):
        driver = TwoStageDriver(standard_net, net)
        scores = []
        for ci, case in enumerate(val_cases):
            rng = rngmod.stream(config.seed, "refine", "val", epoch, ci)
            events = run_loop(driver, case, config.val_clicks, rng)
            scores.append(events[-1].report.dsc)
        return float(np.mean(scores))

    log = _fit("refine", net, config, train_cases, iterate_case, validate)
    return net, log


def train_deepedit_baseline(config: TrainConfig, train_cases, val_cases) -> tuple[ResUNet3d, TrainLog]:
    """Fit the single 5-channel baseline with click-free iterations.

    With probability click_free_prob an iteration trains on zero clicks
    (0.5-filled previous mask, empty guidance); otherwise it runs the
    interactive loop with the network's own initial prediction.
    """
    net = ResUNet3d(
        UNetConfig(5, config.channels, config.strides), seed=_derive_net_seed(config.seed, "baseline")
    )

    def iterate_case(net, opt, case, epoch, idx):
        x = channels_from_preprocessed(case)
        target = case.gtv.values.astype(np.float32)[None]
        gate_rng = rngmod.stream(config.seed, "baseline", "gate", epoch, idx)
        neutral = np.full(x.shape[1:], 0.5, dtype=np.float32)
        zeros = np.zeros(x.shape[1:], dtype=np.float32)
        if gate_rng.random() < config.click_free_prob:
            inp = stack_refine_input(x, neutral, zeros, zeros)
            loss, _ = _step(net, opt, inp, target)
            return [loss]
        prob0 = net.predict_prob(stack_refine_input(x, neutral, zeros, zeros))
        n_rng = rngmod.stream(config.seed, "baseline", "events", epoch, idx)
        lo, hi = config.train_clicks_range
        n_events = int(n_rng.integers(lo, hi + 1))
        return _interactive_iteration(
            net, opt, case, x, prob0, n_events, config, "baseline", epoch, idx
        )

    def validate(net, epoch):
        driver = SingleStageDriver(net)
        scores = []
        for ci, case in enumerate(val_cases):
            rng = rngmod.stream(config.seed, "baseline", "val", epoch, ci)
            events = run_loop(driver, case, config.val_clicks, rng)
            scores.append(events[-1].report.dsc)
        return float(np.mean(scores))

    log = _fit("baseline", net, config, train_cases, iterate_case, validate)
    return net, log
