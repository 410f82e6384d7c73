"""Synthetic multi-event datasets with planted causal structure.

Every event carries a latent vector: one concept direction (distinct within a
video while concepts last) plus a small jitter. Half the concepts are
"prone": causal premises usually draw a prone concept and non-causal ones an
inert concept, except with probability ``exception_rate``, so content predicts
most relations and the result settles the rest. Frames are a fixed linear read-out of the latent
plus a per-video scene offset and Gaussian noise; captions name the action and
the two objects the latent scores highest on. The result event's
latent is a normalized sum of its direct causes' latents plus noise, so an
event is causal exactly when its latent is present in the result.

Two traps are planted on non-causal premises:

* existence: the premise caption mentions one of the result's objects;
* temporal: the premise sits right before the result, touches it in time and
  shares an extra "habit" component with it in feature space.

Bridge chains ``a -> b -> result`` mix ``a``'s latent into ``b``'s frames
while the result only carries ``b``'s own concept, so ``a`` is causal
(r_a = 1) yet visible only through its resemblance to ``b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .annotations import (
    VideoSample,
    Vocabulary,
    cot_fallback,
    encode_features,
    existence_fallback,
    serialize_dataset,
    vocabulary_texts,
)
from .errors import ConfigError

OBJECTS = (
    "ball cup knife towel door bike rope board bottle brush chair table hose car dog "
    "horse boat kite paddle net shovel ladder tire cake bowl pan sofa window fence tree "
    "snow wall box lamp phone guitar drum hat shoe bag plate glass sink mirror bucket "
    "tent stone log flag ramp bench wave rock saddle pole helmet mat"
).split()
ACTIONS = (
    "grabs drops throws cleans cuts opens closes pushes pulls lifts fills washes paints "
    "carries kicks holds rides climbs builds breaks moves wipes shakes stirs hits fixes "
    "places spins ties folds pours checks"
).split()


@dataclass
class SynthConfig:
    num_videos: int = 1000
    test_videos: int = 200
    events_min: int = 5
    events_max: int = 5
    feature_dim: int = 32
    frames_per_event: int = 8
    vocab_size: int = 64
    causal_rate: float = 0.45
    bridge_rate: float = 0.5
    illusory_rate: float = 0.5
    exception_rate: float = 0.05
    noise_sigma: float = 0.1
    latent_dim: int = 16
    latent_jitter: float = 0.3
    scene_scale: float = 0.5
    gap_frames: int = 2
    seed: int = 2023

    def validate(self) -> None:
        if self.events_min < 3 or self.events_max < self.events_min:
            raise ConfigError("need 3 <= events_min <= events_max")
        if not 0 < self.causal_rate < 1:
            raise ConfigError("causal_rate must lie in (0, 1)")
        for name in ("bridge_rate", "illusory_rate", "exception_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.test_videos <= self.num_videos or self.num_videos < 1:
            raise ConfigError("need 0 <= test_videos <= num_videos and num_videos >= 1")
        if self.feature_dim < 1 or self.frames_per_event < 1:
            raise ConfigError("feature_dim and frames_per_event must be >= 1")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be >= 2")
        if not 8 <= self.vocab_size <= len(OBJECTS) + len(ACTIONS):
            raise ConfigError(f"vocab_size must lie in [8, {len(OBJECTS) + len(ACTIONS)}]")
        for n in range(self.events_min, self.events_max + 1):
            _other_rate(self, n)

    @classmethod
    def from_dict(cls, values: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**values)


def _other_rate(cfg: SynthConfig, n: int) -> float:
    """Direct-cause probability for premises outside the bridge, per video size.

    Chosen so the expected share of causal premises equals ``causal_rate``:
    a bridge contributes two positives and leaves ``n - 3`` free premises.
    """
    premises = n - 1
    free_bridge = n - 3
    target = cfg.causal_rate * premises
    denom = cfg.bridge_rate * free_bridge + (1 - cfg.bridge_rate) * premises
    q = (target - 2 * cfg.bridge_rate) / denom if denom > 0 else 0.0
    if not 0 <= q <= 1:
        raise ConfigError(
            f"causal_rate={cfg.causal_rate} unreachable with bridge_rate={cfg.bridge_rate} at N={n}"
        )
    if q == 1 and cfg.illusory_rate > 0:
        raise ConfigError("illusory events need non-causal premises, but every premise is causal")
    return q


@dataclass
class SynthVideo:
    sample: VideoSample
    features: np.ndarray  # [T, D_v]
    diagram: np.ndarray  # [N, N] upper triangular
    latents: np.ndarray  # [N, latent_dim]
    bridges: list[tuple[int, int]]  # 1-based (a, b)
    illusory: dict[int, str]  # 1-based premise -> "existence" | "temporal"


@dataclass
class SynthDataset:
    config: SynthConfig
    train: list[SynthVideo]
    test: list[SynthVideo]
    readout: np.ndarray  # [D_v, latent_dim]

    def diagrams(self) -> dict[str, list[list[int]]]:
        return {v.sample.video_id: v.diagram.tolist() for v in self.train + self.test}


class _World:
    """Dataset-level constants shared by every video."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        n_obj = cfg.vocab_size // 2
        n_act = cfg.vocab_size - n_obj
        self.objects = OBJECTS[:n_obj]
        self.actions = ACTIONS[:n_act]
        if len(self.objects) < 2 or len(self.actions) < 1:
            raise ConfigError("vocab_size too small")
        L = cfg.latent_dim
        self.readout = rng.standard_normal((cfg.feature_dim, L)) / math.sqrt(L) * 2.0
        self.object_keys = rng.standard_normal((len(self.objects), L))
        self.action_keys = rng.standard_normal((len(self.actions), L))
        # concept c names action c and object c outright
        for c in range(L):
            self.object_keys[c % len(self.objects)] += 4.0 * np.eye(L)[c]
            self.action_keys[c % len(self.actions)] += 4.0 * np.eye(L)[c]
        # half the concepts tend to cause results, the rest tend not to
        order = rng.permutation(L)
        self.prone = np.sort(order[: L // 2])
        self.inert = np.sort(order[L // 2 :])

    def pick_concepts(self, rng, leaning: np.ndarray, exception_rate: float) -> np.ndarray:
        """One concept per event, distinct while the pools last.

        ``leaning[i]`` is True when event i should look causal; with probability
        ``exception_rate`` the opposite pool is used instead.
        """
        pools = {True: list(rng.permutation(self.prone)), False: list(rng.permutation(self.inert))}
        out = np.empty(len(leaning), dtype=np.int64)
        for i, lean in enumerate(leaning):
            want = bool(lean) ^ bool(rng.random() < exception_rate)
            pool = pools[want] or pools[not want]
            if pool:
                out[i] = pool.pop()
            else:
                out[i] = int(rng.integers(0, len(self.prone) + len(self.inert)))
        return out

    def caption(self, z: np.ndarray, shared_object: str | None = None) -> tuple[str, list[str]]:
        act = self.actions[int(np.argmax(self.action_keys @ z))]
        order = np.argsort(-(self.object_keys @ z), kind="stable")
        objs = [self.objects[int(i)] for i in order[:2]]
        if shared_object is not None and shared_object not in objs:
            objs[1] = shared_object
        return f"someone {act} the {objs[0]} near the {objs[1]}", objs


def _generate_video(cfg: SynthConfig, world: _World, index: int) -> SynthVideo:
    rng = np.random.default_rng([cfg.seed, index])
    n = int(rng.integers(cfg.events_min, cfg.events_max + 1))
    premises = n - 1
    L = cfg.latent_dim
    q = _other_rate(cfg, n)

    direct = np.zeros(premises, dtype=bool)
    relation = np.zeros(premises, dtype=np.int64)
    bridges: list[tuple[int, int]] = []
    if rng.random() < cfg.bridge_rate:
        b = int(rng.integers(2, premises + 1))  # 1-based, a = b - 1 >= 1
        bridges.append((b - 1, b))
    in_bridge = {i for pair in bridges for i in pair}
    for k in range(1, premises + 1):
        if k in in_bridge:
            continue
        if rng.random() < q:
            direct[k - 1] = True
    for a, b in bridges:
        direct[b - 1] = True
        relation[a - 1] = 1
    relation[direct] = 1

    leaning = np.append(relation.astype(bool), False)
    for a, _ in bridges:
        leaning[a - 1] = False  # the source looks inert; only the chain reveals it
    concepts = world.pick_concepts(rng, leaning, cfg.exception_rate)
    z = np.eye(L)[concepts] + cfg.latent_jitter * rng.standard_normal((n, L)) / math.sqrt(L)
    own = z.copy()
    for a, b in bridges:
        z[b - 1] = (own[b - 1] + own[a - 1]) / math.sqrt(2.0)
    causes = np.flatnonzero(direct)
    if causes.size:
        # the result carries each cause's own concept, so a bridge source
        # leaves no trace in it beyond what b shows
        z[n - 1] = own[causes].sum(axis=0) / math.sqrt(causes.size)
    z[n - 1] += cfg.noise_sigma * rng.standard_normal(L)

    illusory: dict[int, str] = {}
    for k in range(1, premises + 1):
        if relation[k - 1] == 0 and rng.random() < cfg.illusory_rate:
            illusory[k] = "temporal" if k == premises else "existence"

    result_caption, result_objs = world.caption(z[n - 1])
    sentences = []
    for k in range(1, n):
        shared = result_objs[int(rng.integers(0, 2))] if illusory.get(k) == "existence" else None
        sentences.append(world.caption(z[k - 1], shared)[0])
    sentences.append(result_caption)

    scene = cfg.scene_scale * rng.standard_normal(cfg.feature_dim)
    habit = rng.standard_normal(cfg.feature_dim)
    fpe, gap = cfg.frames_per_event, cfg.gap_frames
    blocks, timestamps, t = [], [], 0
    for k in range(1, n + 1):
        if k > 1:
            touching = k == n and illusory.get(premises) == "temporal"
            g = 0 if touching else gap
            if g:
                blocks.append(scene + cfg.noise_sigma * rng.standard_normal((g, cfg.feature_dim)))
                t += g
        mean = world.readout @ z[k - 1] + scene
        if (k == premises and illusory.get(k) == "temporal") or (k == n and illusory.get(premises) == "temporal"):
            mean = mean + habit
        blocks.append(mean + cfg.noise_sigma * rng.standard_normal((fpe, cfg.feature_dim)))
        timestamps.append((float(t), float(t + fpe)))
        t += fpe
    features = np.concatenate(blocks).astype(np.float32)

    diagram = np.zeros((n, n), dtype=np.int64)
    diagram[:premises, n - 1] = relation
    for a, b in bridges:
        diagram[a - 1, b - 1] = 1

    sample = VideoSample(
        video_id=f"synth_{index:05d}",
        duration=float(t),
        timestamps=timestamps,
        sentences=sentences,
        relation=relation.tolist(),
    )
    sample.existence = [existence_fallback(s) for s in sentences[:-1]]
    sample.cot = [cot_fallback(sample, k) for k in range(1, n)]
    return SynthVideo(sample, features, diagram, z, bridges, illusory)


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    cfg.validate()
    world = _World(cfg)
    videos = [_generate_video(cfg, world, i) for i in range(cfg.num_videos)]
    n_train = cfg.num_videos - cfg.test_videos
    return SynthDataset(cfg, videos[:n_train], videos[n_train:], world.readout)


def write_dataset_dir(data: SynthDataset, root) -> Path:
    """Write annotation files, MECDFEAT features, diagrams and vocabulary."""
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    for split, videos in (("train", data.train), ("test", data.test)):
        (root / f"{split}.json").write_text(
            serialize_dataset(v.sample for v in videos) + "\n", encoding="utf-8"
        )
        for v in videos:
            (root / "features" / f"{v.sample.video_id}.bin").write_bytes(encode_features(v.features))
    (root / "diagrams.json").write_text(json.dumps(data.diagrams()) + "\n", encoding="utf-8")
    Vocabulary.build(vocabulary_texts(v.sample for v in data.train)).save(root / "vocab.txt")
    (root / "synth_config.json").write_text(
        json.dumps(asdict(data.config), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return root
