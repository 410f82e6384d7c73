"""Relation prediction, complete diagrams, metrics, baselines and perturbations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .annotations import RESERVED, MASK, VideoSample, Vocabulary, truncate, words
from .errors import ParamError, ParamWarning, SizeMismatchError
from .model import VGCM, VideoTensors, collate, tensorize

MASK_WORD = RESERVED[MASK]
BASELINES = ("all_causal", "all_noncausal", "random")


# ---------------------------------------------------------------------------
# diagrams
# ---------------------------------------------------------------------------

@dataclass
class CausalDiagram:
    """Edges i -> j for 1 <= i < j <= n, stored as an [n, n] upper-triangular 0/1 matrix."""

    n_events: int
    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64)
        if self.edges.shape != (self.n_events, self.n_events):
            raise SizeMismatchError(f"edge matrix {self.edges.shape} for {self.n_events} events")
        if np.any(np.tril(self.edges)) or not np.isin(self.edges, (0, 1)).all():
            raise ValueError("diagram edges must be 0/1 and strictly forward in time")

    @classmethod
    def empty(cls, n: int) -> "CausalDiagram":
        return cls(n, np.zeros((n, n), dtype=np.int64))

    @classmethod
    def full(cls, n: int) -> "CausalDiagram":
        return cls(n, np.triu(np.ones((n, n), dtype=np.int64), 1))

    def pairs(self) -> np.ndarray:
        """Entries (i, j), i < j, in row-major order."""
        return self.edges[np.triu_indices(self.n_events, 1)]

    def to_json(self) -> list[list[int]]:
        return self.edges.tolist()

    def to_dot(self, name: str = "video") -> str:
        safe = "".join(c if c.isalnum() or c == "_" else "_" for c in name)
        lines = [f"digraph {safe} {{", "  rankdir=LR;"]
        lines += [f"  e{i};" for i in range(1, self.n_events + 1)]
        for i, j in zip(*np.nonzero(self.edges)):
            lines.append(f"  e{i + 1} -> e{j + 1};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _as_diagram(d) -> CausalDiagram:
    if isinstance(d, CausalDiagram):
        return d
    arr = np.asarray(d, dtype=np.int64)
    return CausalDiagram(arr.shape[0], arr)


def shd(pred, gt) -> int:
    """Number of ordered pairs i < j on which the two diagrams disagree."""
    pred, gt = _as_diagram(pred), _as_diagram(gt)
    if pred.n_events != gt.n_events:
        raise SizeMismatchError(f"diagrams over {pred.n_events} and {gt.n_events} events")
    return int(np.sum(pred.pairs() != gt.pairs()))


def accuracy(preds: Sequence[Sequence[int]], gts: Sequence[Sequence[int]]) -> float:
    """Micro-averaged accuracy over every (video, premise) decision."""
    if len(preds) != len(gts):
        raise SizeMismatchError(f"{len(preds)} predictions for {len(gts)} videos")
    hits = total = 0
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise SizeMismatchError(f"video {i}: prediction length {p.size} != {g.size}")
        hits += int(np.sum(p == g))
        total += g.size
    return hits / total if total else float("nan")


# ---------------------------------------------------------------------------
# model predictions
# ---------------------------------------------------------------------------

def _tensors(model: VGCM, sample, vocab: Vocabulary | None) -> VideoTensors:
    if isinstance(sample, VideoTensors):
        return sample
    if vocab is None:
        raise ValueError("a vocabulary is needed to tensorize a VideoSample")
    return tensorize(sample, vocab, model.config.feature_dim, model.config.max_caption_len)


@torch.no_grad()
def relation_logits(model: VGCM, sample, vocab: Vocabulary | None = None) -> torch.Tensor:
    """[N-1, 2] logits; one video per forward so results never depend on batching."""
    was_training = model.training
    model.eval()
    video = _tensors(model, sample, vocab)
    batch = collate([video]).to(next(model.parameters()).dtype)
    _, logits, _ = model(batch)
    model.train(was_training)
    return logits[0]


def decide(logits: torch.Tensor) -> list[int]:
    """Argmax over (non-causal, causal); exact ties go to non-causal."""
    return (logits[..., 1] > logits[..., 0]).long().tolist()


def predict_relations(model: VGCM, sample, vocab: Vocabulary | None = None) -> list[int]:
    return decide(relation_logits(model, sample, vocab))


def build_diagram(model: VGCM, sample: VideoSample, vocab: Vocabulary) -> CausalDiagram:
    """Column j comes from predicting with the video cut after event j."""
    n = sample.n_events
    diagram = CausalDiagram.empty(n)
    for j in range(2, n + 1):
        diagram.edges[: j - 1, j - 1] = predict_relations(model, truncate(sample, j), vocab)
    return diagram


def relation_diagram(sample: VideoSample) -> CausalDiagram:
    """Ground truth known only for the final column."""
    d = CausalDiagram.empty(sample.n_events)
    d.edges[:-1, -1] = sample.relation
    return d


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def baseline_predict(mode: str, sample, p: float = 0.5, seed: int = 0) -> list[int]:
    k = len(sample.relation) if not isinstance(sample, int) else sample
    if mode == "all_causal":
        return [1] * k
    if mode == "all_noncausal":
        return [0] * k
    if mode == "random":
        if not 0 <= p <= 1:
            raise ParamError(f"random baseline needs p in [0, 1], got {p}")
        return (np.random.default_rng(seed).random(k) < p).astype(int).tolist()
    raise ParamError(f"unknown baseline {mode!r}; expected one of {BASELINES}")


def baseline_diagram(mode: str, n: int, p: float = 0.5, seed: int = 0) -> CausalDiagram:
    d = CausalDiagram.empty(n)
    rows, cols = np.triu_indices(n, 1)
    d.edges[rows, cols] = baseline_predict(mode, len(rows), p, seed)
    return d


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def metrics_report(samples: Sequence[VideoSample], preds: Sequence[Sequence[int]],
                   pred_diagrams: Sequence[CausalDiagram] | None = None,
                   gt_diagrams: dict | None = None) -> dict:
    """{accuracy, ave_shd, per_video}. ``ave_shd`` is None without ground-truth diagrams."""
    per_video = []
    shds = []
    for i, (s, p) in enumerate(zip(samples, preds)):
        row = {
            "video_id": s.video_id,
            "relation": list(map(int, s.relation)),
            "predicted": list(map(int, p)),
            "correct": int(np.sum(np.asarray(p) == np.asarray(s.relation))),
        }
        if gt_diagrams is not None and pred_diagrams is not None and s.video_id in gt_diagrams:
            row["shd"] = shd(pred_diagrams[i], gt_diagrams[s.video_id])
            shds.append(row["shd"])
        per_video.append(row)
    return {
        "accuracy": accuracy(preds, [s.relation for s in samples]),
        "ave_shd": float(np.mean(shds)) if shds else None,
        "per_video": per_video,
    }


def evaluate(model: VGCM, samples: Sequence[VideoSample], vocab: Vocabulary,
             gt_diagrams: dict | None = None) -> tuple[dict, list[CausalDiagram]]:
    """Predict every video; full diagrams only when ground truth exists to score them."""
    preds, diagrams = [], []
    for s in samples:
        if gt_diagrams is not None:
            d = build_diagram(model, s, vocab)
            diagrams.append(d)
            preds.append(d.edges[:-1, -1].tolist())
        else:
            preds.append(predict_relations(model, s, vocab))
    report = metrics_report(samples, preds, diagrams if gt_diagrams is not None else None, gt_diagrams)
    return report, diagrams


def baseline_report(mode: str, samples: Sequence[VideoSample], gt_diagrams: dict | None = None,
                    p: float = 0.5, seed: int = 0) -> dict:
    preds, diagrams = [], []
    for i, s in enumerate(samples):
        sub = int(np.random.default_rng([seed, i]).integers(2**31))
        diagrams.append(baseline_diagram(mode, s.n_events, p, sub))
        if gt_diagrams is not None:
            preds.append(diagrams[-1].edges[:-1, -1].tolist())
        else:
            preds.append(baseline_predict(mode, s, p, sub))
    report = metrics_report(samples, preds, diagrams, gt_diagrams)
    report["baseline"] = mode
    return report


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

def _clamp(n: int, limit: int, what: str) -> int:
    if n < 0:
        raise ParamError(f"{what}: count must be >= 0, got {n}")
    if n > limit:
        warnings.warn(f"E_PARAM: {what}: {n} exceeds {limit}, clamped", ParamWarning, stacklevel=3)
        return limit
    return n


def flip_labels(samples: Sequence[VideoSample], ratio: float, seed: int) -> list[VideoSample]:
    if not 0 <= ratio <= 1:
        raise ParamError(f"flip ratio must lie in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(samples), size=int(np.floor(ratio * len(samples))), replace=False)
    out = list(samples)
    for i in sorted(int(c) for c in chosen):
        rel = list(out[i].relation)
        j = int(rng.integers(len(rel)))
        rel[j] = 1 - rel[j]
        out[i] = replace(out[i], relation=rel)
    return out


def _mask_sentence(sentence: str, n: int, rng) -> str:
    toks = words(sentence)
    n = _clamp(n, len(toks), "mask_words")
    for j in rng.choice(len(toks), size=n, replace=False):
        toks[int(j)] = MASK_WORD
    return " ".join(toks)


def mask_words(samples: Sequence[VideoSample], n: int, seed: int) -> list[VideoSample]:
    rng = np.random.default_rng(seed)
    return [replace(s, sentences=[_mask_sentence(t, n, rng) for t in s.sentences]) for s in samples]


def mask_frames(samples: Sequence[VideoSample], n: int, seed: int) -> list[VideoSample]:
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        if s.frames is None:
            raise ValueError(f"{s.video_id}: features not attached")
        frames = []
        for block in s.frames:
            block = block.copy()
            m = _clamp(n, block.shape[0], "mask_frames")
            block[rng.choice(block.shape[0], size=m, replace=False)] = 0
            frames.append(block)
        out.append(replace(s, frames=frames))
    return out


PERTURBATIONS = {"flip_labels": flip_labels, "mask_words": mask_words, "mask_frames": mask_frames}


def perturb_dataset(samples: Sequence[VideoSample], mode: str, param, seed: int = 0) -> list[VideoSample]:
    """Perturbed copy; ``param`` is the flip ratio or the per-event count."""
    if mode not in PERTURBATIONS:
        raise ParamError(f"unknown perturbation {mode!r}; expected one of {sorted(PERTURBATIONS)}")
    if mode != "flip_labels":
        param = int(param)
    return PERTURBATIONS[mode](samples, param, seed)
