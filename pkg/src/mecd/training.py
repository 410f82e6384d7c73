"""Four-term objective, warmup schedule, deterministic loop and gradient check."""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .annotations import PAD
from .errors import ConfigError, EmptyDatasetError, ShapeError
from .model import Batch, ModelConfig, VGCM, VideoTensors, collate

log = logging.getLogger(__name__)

EPS_RANGE = (1e-7, 1e-4)


@dataclass
class LossWeights:
    lambda_C: float = 1.0
    lambda_R: float = 4.0
    lambda_V: float = 0.25
    lambda_S: float = 0.05

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 16e-5
    warmup_epochs: int = 3
    seed: int = 2023
    seeds: tuple = (2023, 2024, 2025)
    batch_size: int = 16
    similarity_gate: str = "noncausal"
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    warm_start_epochs: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")
        if self.similarity_gate not in ("causal", "noncausal"):
            raise ConfigError("similarity_gate must be 'causal' or 'noncausal'")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.weights.validate()


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

TERMS = ("L_C", "L_R", "L_V", "L_S")


def mse(a, b):
    return ((a - b) ** 2).mean(-1)


def pair_losses(out, logits, caption_logits, batch: Batch, gate: str = "noncausal"):
    """Unweighted per-(video, premise) terms, each shaped [B, K]."""
    b, n = batch.visual.shape[:2]
    k = n - 1
    if logits.shape != (b, k, 2):
        raise ShapeError(f"relation logits {tuple(logits.shape)}, expected {(b, k, 2)}")
    target = batch.captions[:, -1]
    if caption_logits.shape[:2] != target.shape:
        raise ShapeError(f"caption logits {tuple(caption_logits.shape)} vs target {tuple(target.shape)}")

    keep = (target != PAD).to(caption_logits.dtype)
    tok_ce = F.cross_entropy(caption_logits.transpose(1, 2), target, reduction="none")
    l_c = (tok_ce * keep).sum(-1) / keep.sum(-1).clamp_min(1.0)
    l_r = F.cross_entropy(logits.reshape(-1, 2), batch.relation.reshape(-1), reduction="none").reshape(b, k)
    l_v = mse(out.F_p_N, out.F_N)
    refined = out.extras.get("O_m_refined", out.O_m)
    l_s = mse(refined, out.O_p.unsqueeze(1))
    active = batch.relation == (1 if gate == "causal" else 0)
    l_s = torch.where(active, l_s, torch.zeros_like(l_s))
    return {
        "L_C": l_c.unsqueeze(1).expand(b, k),
        "L_R": l_r,
        "L_V": l_v.unsqueeze(1).expand(b, k),
        "L_S": l_s,
    }


def compute_loss(out, logits, caption_logits, batch: Batch, weights: LossWeights = LossWeights(),
                 gate: str = "noncausal", select=None):
    """Total loss averaged over (video, premise) pairs and the per-term means.

    ``select`` is an optional bool mask [B, K] restricting the average.
    The gate zeroes L_S where r_k does not match ``gate``; the reported L_S
    already includes the gate, so total == sum of weighted terms.
    """
    terms = pair_losses(out, logits, caption_logits, batch, gate)
    if select is not None:
        terms = {name: t[select] for name, t in terms.items()}
    means = {name: t.mean() for name, t in terms.items()}
    total = (
        weights.lambda_C * means["L_C"]
        + weights.lambda_R * means["L_R"]
        + weights.lambda_V * means["L_V"]
        + weights.lambda_S * means["L_S"]
    )
    return total, means


# ---------------------------------------------------------------------------
# schedule and batching
# ---------------------------------------------------------------------------

def learning_rate_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over the warmup epochs (step midpoints), then constant."""
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.learning_rate * (step + 0.5) / warm
    return cfg.learning_rate


def epoch_batches(videos: Sequence[VideoTensors], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches; each batch holds videos of one event count."""
    by_size: dict[int, list[int]] = {}
    for i, v in enumerate(videos):
        by_size.setdefault(v.n_events, []).append(i)
    batches = []
    for n in sorted(by_size):
        idx = np.asarray(by_size[n])[rng.permutation(len(by_size[n]))]
        batches.extend(idx[s:s + batch_size].tolist() for s in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def fixed_batches(videos: Sequence[VideoTensors], batch_size: int = 64) -> list[Batch]:
    by_size: dict[int, list[VideoTensors]] = {}
    for v in videos:
        by_size.setdefault(v.n_events, []).append(v)
    return [
        collate(group[s:s + batch_size])
        for n in sorted(by_size)
        for group in [by_size[n]]
        for s in range(0, len(group), batch_size)
    ]


@torch.no_grad()
def batch_accuracy(model: VGCM, videos: Sequence[VideoTensors]) -> float:
    """Micro accuracy using batched forwards (monitoring only)."""
    was_training = model.training
    model.eval()
    hits = total = 0
    for batch in fixed_batches(videos):
        _, logits, _ = model(batch)
        pred = (logits[..., 1] > logits[..., 0]).long()
        hits += int((pred == batch.relation).sum())
        total += batch.relation.numel()
    model.train(was_training)
    return hits / total if total else float("nan")


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    total: float
    L_C: float
    L_R: float
    L_V: float
    L_S: float
    holdout_accuracy: float
    learning_rate: float

    def log_line(self) -> str:
        vals = [self.total, self.L_C, self.L_R, self.L_V, self.L_S, self.holdout_accuracy]
        return "\t".join([str(self.epoch)] + [f"{v:.6f}" for v in vals])


def _run_epoch(model, opt, videos, cfg: TrainConfig, epoch: int, step0: int, steps_per_epoch: int,
               weights: LossWeights):
    rng = np.random.default_rng([cfg.seed, epoch])
    sums = dict.fromkeys(("total",) + TERMS, 0.0)
    count = 0
    step = step0
    lr = cfg.learning_rate
    for idx in epoch_batches(videos, cfg.batch_size, rng):
        batch = collate([videos[i] for i in idx])
        lr = learning_rate_at(step, steps_per_epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        out, logits, cap = model(batch)
        total, terms = compute_loss(out, logits, cap, batch, weights, cfg.similarity_gate)
        opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.max_grad_norm:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
        opt.step()
        pairs = batch.relation.numel()
        sums["total"] += float(total.detach()) * pairs
        for name in TERMS:
            sums[name] += float(terms[name].detach()) * pairs
        count += pairs
        step += 1
    return {k: v / count for k, v in sums.items()}, step, lr


def make_optimizer(model, cfg: TrainConfig):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() < 2 or "norm" in name else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-6,
    )


def train_model(
    train: Sequence[VideoTensors],
    model_config: ModelConfig,
    train_config: TrainConfig,
    holdout: Sequence[VideoTensors] | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> tuple[VGCM, list[EpochMetrics]]:
    if not train:
        raise EmptyDatasetError("no training samples")
    train_config.validate()
    torch.manual_seed(train_config.seed)
    model = VGCM(model_config)
    model.train()
    opt = make_optimizer(model, train_config)
    steps_per_epoch = len(epoch_batches(train, train_config.batch_size, np.random.default_rng(0)))
    history: list[EpochMetrics] = []

    if train_config.warm_start_epochs:
        # captioning + reconstruction only, stands in for captioning pretraining
        w = train_config.weights
        warm = LossWeights(lambda_C=w.lambda_C, lambda_R=0.0, lambda_V=w.lambda_V, lambda_S=0.0)
        step = 0
        for e in range(train_config.warm_start_epochs):
            _run_epoch(model, opt, train, train_config, -1 - e, step, steps_per_epoch, warm)

    step = 0
    for epoch in range(1, train_config.epochs + 1):
        means, step, lr = _run_epoch(model, opt, train, train_config, epoch, step, steps_per_epoch,
                                     train_config.weights)
        acc = batch_accuracy(model, holdout) if holdout else float("nan")
        m = EpochMetrics(epoch, means["total"], means["L_C"], means["L_R"], means["L_V"], means["L_S"], acc, lr)
        history.append(m)
        log.info("epoch %d loss %.4f holdout %.4f", epoch, m.total, acc)
        if on_epoch:
            on_epoch(m)
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

def pair_loss(model: VGCM, batch: Batch, k: int, weights: LossWeights, gate: str):
    out, logits, cap = model(batch)
    select = torch.zeros_like(batch.relation, dtype=torch.bool)
    select[:, k - 1] = True
    total, _ = compute_loss(out, logits, cap, batch, weights, gate, select=select)
    return total


GRAD_FLOOR = 1e-7


def gradient_check(model: VGCM, video: VideoTensors, k: int, epsilon: float = 1e-4,
                   n_coords: int = 256, seed: int = 0, weights: LossWeights = LossWeights(),
                   gate: str = "noncausal") -> float:
    """Max relative error between autograd and central differences of the loss.

    Runs on a float64 copy in evaluation mode. Coordinates are drawn from every
    parameter tensor so no module goes unchecked. Gradients below ``GRAD_FLOOR``
    are compared in absolute terms, since central differences cannot resolve
    them beneath roundoff.
    """
    lo, hi = EPS_RANGE
    if not lo <= epsilon <= hi:
        clamped = min(max(epsilon, lo), hi)
        warnings.warn(f"epsilon {epsilon} outside [{lo}, {hi}], using {clamped}", RuntimeWarning, stacklevel=2)
        epsilon = clamped
    model = copy.deepcopy(model).double().eval()
    batch = collate([video]).to(torch.float64)

    model.zero_grad(set_to_none=True)
    pair_loss(model, batch, k, weights, gate).backward()

    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    per_tensor = max(1, math.ceil(n_coords / len(params)))
    worst = 0.0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
            picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for i in picks:
                orig = float(flat[i])
                flat[i] = orig + epsilon
                up = float(pair_loss(model, batch, k, weights, gate))
                flat[i] = orig - epsilon
                down = float(pair_loss(model, batch, k, weights, gate))
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                analytic = float(grad[i])
                denom = max(abs(numeric), abs(analytic), GRAD_FLOOR)
                worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def checked_coordinates(model: VGCM, n_coords: int = 256) -> int:
    params = [p for p in model.parameters() if p.requires_grad]
    per_tensor = max(1, math.ceil(n_coords / len(params)))
    return sum(min(per_tensor, p.numel()) for p in params)
