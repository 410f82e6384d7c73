"""The two-stream masked-event network.

Each event is pooled to a single token (mean frame feature + mean caption
embedding, fused by a linear map). A learned result-query token is appended
to the premise tokens, the sequence runs through a transformer encoder and a
weight-shared transformer decoder, and the decoder output at the query slot is
the predicted result representation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch import nn

from .annotations import (
    MASK,
    MAX_CAPTION_LEN,
    PAD,
    VideoSample,
    Vocabulary,
    auxiliary_text,
)
from .errors import ConfigError, DimensionError, EventIndexError


@dataclass
class ModelConfig:
    d_model: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    vocab_size: int = 8192
    max_caption_len: int = MAX_CAPTION_LEN
    dropout: float = 0.1
    feature_dim: int = 32
    max_events: int = 16
    front_door: bool = True
    counterfactual: bool = True

    def validate(self) -> None:
        if self.d_model % self.attention_heads:
            raise ConfigError("d_model must be divisible by attention_heads")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**values)


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------

@dataclass
class VideoTensors:
    """One video, pre-pooled and tokenized. Event axis is 0-based."""

    video_id: str
    visual: torch.Tensor  # [N, D_v] mean frame feature per event (zeros if no frames)
    captions: torch.Tensor  # [N, L]
    existence: torch.Tensor  # [N-1, L]
    cot: torch.Tensor  # [N-1, L]
    relation: torch.Tensor  # [N-1]

    @property
    def n_events(self) -> int:
        return self.visual.shape[0]


def pool_frames(frames: np.ndarray, feature_dim: int) -> np.ndarray:
    if frames.ndim != 2 or frames.shape[1] != feature_dim:
        raise DimensionError(f"frame matrix has shape {frames.shape}, expected [T, {feature_dim}]")
    if frames.shape[0] == 0:
        return np.zeros(feature_dim, dtype=np.float32)
    return frames.mean(axis=0, dtype=np.float64).astype(np.float32)


def tensorize(sample: VideoSample, vocab: Vocabulary, feature_dim: int,
              max_len: int = MAX_CAPTION_LEN) -> VideoTensors:
    if sample.frames is None:
        raise ValueError(f"{sample.video_id}: features not attached")
    n = sample.n_events
    visual = np.stack([pool_frames(f, feature_dim) for f in sample.frames])
    captions = np.stack([vocab.encode(s, max_len) for s in sample.sentences])
    existence = np.stack([vocab.encode(auxiliary_text(sample, k, "existence"), max_len) for k in range(1, n)])
    cot = np.stack([vocab.encode(auxiliary_text(sample, k, "cot"), max_len) for k in range(1, n)])
    return VideoTensors(
        sample.video_id,
        torch.from_numpy(visual),
        torch.from_numpy(captions),
        torch.from_numpy(existence),
        torch.from_numpy(cot),
        torch.tensor(sample.relation, dtype=torch.long),
    )


@dataclass
class Batch:
    ids: list[str]
    visual: torch.Tensor  # [B, N, D_v]
    captions: torch.Tensor  # [B, N, L]
    existence: torch.Tensor  # [B, N-1, L]
    cot: torch.Tensor  # [B, N-1, L]
    relation: torch.Tensor  # [B, N-1]

    @property
    def n_events(self) -> int:
        return self.visual.shape[1]

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.ids, self.visual.to(dtype), self.captions, self.existence, self.cot, self.relation)


def collate(videos: Sequence[VideoTensors]) -> Batch:
    sizes = {v.n_events for v in videos}
    if len(sizes) != 1:
        raise ValueError(f"a batch must share one event count, got {sorted(sizes)}")
    return Batch(
        [v.video_id for v in videos],
        torch.stack([v.visual for v in videos]),
        torch.stack([v.captions for v in videos]),
        torch.stack([v.existence for v in videos]),
        torch.stack([v.cot for v in videos]),
        torch.stack([v.relation for v in videos]),
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        # a key bias only shifts every score of a query equally, which softmax ignores
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, query, key, value):
        *lead, lq, d = query.shape
        lk = key.shape[-2]
        h = self.heads

        def split(x, n):
            return x.reshape(*lead, n, h, d // h).transpose(-2, -3)

        q, k, v = split(self.q(query), lq), split(self.k(key), lk), split(self.v(value), lk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        out = scores.softmax(-1) @ v
        return self.o(out.transpose(-2, -3).reshape(*lead, lq, d))


class Block(nn.Module):
    """Post-norm transformer layer; cross-attends when ``memory`` is given."""

    def __init__(self, d_model, heads, dropout):
        super().__init__()
        self.attn = Attention(d_model, heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory=None, value=None):
        kv = x if memory is None else memory
        x = self.norm1(x + self.drop(self.attn(x, kv, kv if value is None else value)))
        return self.norm2(x + self.drop(self.ff(x)))


class Stack(nn.Module):
    def __init__(self, n_layers, d_model, heads, dropout):
        super().__init__()
        self.layers = nn.ModuleList(Block(d_model, heads, dropout) for _ in range(n_layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class RelationHead(nn.Module):
    """Cross- and self-attention over the result slot, pooled, plus a cosine feature."""

    def __init__(self, d_model, heads, dropout):
        super().__init__()
        self.cross = Block(d_model, heads, dropout)
        self.self_attn = Block(d_model, heads, dropout)
        self.g_r = nn.Linear(2 * d_model + 1, 2)

    def forward(self, o_masked, o_plain, o_result):
        query = torch.stack([o_masked, o_result], dim=-2)
        memory = torch.stack([o_plain, o_result], dim=-2)
        cross = self.cross(query, memory).mean(-2)
        self_ = self.self_attn(query).mean(-2)
        cos = cosine(o_plain, o_masked).unsqueeze(-1)
        return self.g_r(torch.cat([cross, self_, cos], dim=-1))


def cosine(a, b, eps=1e-12):
    # sqrt(x*x) == x in IEEE arithmetic, so cosine(a, a) is exactly 1
    dot = (a * b).sum(-1)
    den = ((a * a).sum(-1) * (b * b).sum(-1)).sqrt()
    return dot / den.clamp_min(eps)


class CaptionHead(nn.Module):
    """Non-autoregressive: the result slot is broadcast over caption positions."""

    def __init__(self, d_model, vocab_size, max_len):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(max_len, d_model))
        self.hidden = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, vocab_size)
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, o_plain):
        h = o_plain.unsqueeze(-2) + self.pos
        return self.out(F.gelu(self.hidden(h)))


@dataclass
class StreamOutputs:
    """Per-video outputs; the masked axis (K = N-1) follows the batch axis."""

    F_p: torch.Tensor  # [B, N, d]   premises + query slot, unmasked path
    F_m: torch.Tensor  # [B, K, N, d] same per masked premise
    O_p: torch.Tensor  # [B, d]
    O_m: torch.Tensor  # [B, K, d]
    O_N: torch.Tensor  # [B, d]
    F_p_N: torch.Tensor  # [B, d]
    F_N: torch.Tensor  # [B, d]
    emb: torch.Tensor  # [B, N, d] event embeddings
    extras: dict = field(default_factory=dict)


class VGCM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d_model
        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.fuse = nn.Linear(config.feature_dim + d, d)
        self.fuse_norm = nn.LayerNorm(d)
        self.position = nn.Embedding(config.max_events, d)
        self.query = nn.Parameter(torch.zeros(d))
        self.encoder = Stack(config.encoder_layers, d, config.attention_heads, config.dropout)
        self.decoder = Stack(config.decoder_layers, d, config.attention_heads, config.dropout)
        self.relation = RelationHead(d, config.attention_heads, config.dropout)
        self.caption = CaptionHead(d, config.vocab_size, config.max_caption_len)
        self.g_do = nn.Linear(3 * d, d)
        # learned step size for the refinement, starting at zero so untrained
        # correction paths cannot swamp the masked path early on
        self.correction_scale = nn.Parameter(torch.tensor(0.0))
        nn.init.normal_(self.token_embed.weight, std=0.5)
        nn.init.normal_(self.position.weight, std=0.1)
        nn.init.normal_(self.query, std=0.1)

    # -- encoders -----------------------------------------------------------

    def pool_text(self, tokens):
        """Mean embedding over non-PAD tokens; all-PAD gives zeros."""
        keep = (tokens != PAD).to(self.token_embed.weight.dtype).unsqueeze(-1)
        total = (self.token_embed(tokens) * keep).sum(-2)
        return total / keep.sum(-2).clamp_min(1.0)

    def encode_event(self, visual, tokens):
        """visual: [..., D_v] pooled frames; tokens: [..., L]."""
        if visual.shape[-1] != self.config.feature_dim:
            raise DimensionError(f"feature width {visual.shape[-1]} != {self.config.feature_dim}")
        return self.fuse_norm(self.fuse(torch.cat([visual, self.pool_text(tokens)], dim=-1)))

    def masked_embedding(self, like):
        visual = torch.zeros(self.config.feature_dim, dtype=like.dtype)
        tokens = torch.full((self.config.max_caption_len,), MASK, dtype=torch.long)
        return self.encode_event(visual, tokens)

    # -- shared predictor ---------------------------------------------------

    def predict(self, emb):
        """Run events [..., n, d] plus the query slot; returns (F, O) with n + 1 slots."""
        n = emb.shape[-2]
        if n >= self.config.max_events:
            raise ConfigError(f"{n} events exceed max_events={self.config.max_events}")
        x = emb + self.position.weight[:n]
        q = self.query.expand(*emb.shape[:-2], 1, -1)
        feats = self.encoder(torch.cat([x, q], dim=-2))
        return feats, self.decoder(feats)

    def pairwise_predict(self, *events):
        """Predicted result representation from one or two event embeddings."""
        _, out = self.predict(torch.stack(events, dim=-2))
        return out[..., -1, :]

    def decode_single(self, x):
        return self.decoder(x.unsqueeze(-2)).squeeze(-2)

    # -- streams ------------------------------------------------------------

    def streams(self, batch: Batch, mask: bool = True) -> StreamOutputs:
        b, n = batch.visual.shape[:2]
        k = n - 1
        emb = self.encode_event(batch.visual, batch.captions)  # [B, N, d]
        premises = emb[:, :k]
        F_p, O_seq = self.predict(premises)
        masked = premises.unsqueeze(1).expand(b, k, k, -1)
        if mask:
            eye = torch.eye(k, dtype=torch.bool).view(1, k, k, 1)
            masked = torch.where(eye, self.masked_embedding(emb), masked)
        F_m, O_m_seq = self.predict(masked.reshape(b * k, k, -1))
        F_r, O_r_seq = self.predict(emb[:, k:])
        return StreamOutputs(
            F_p=F_p,
            F_m=F_m.reshape(b, k, n, -1),
            O_p=O_seq[:, -1],
            O_m=O_m_seq[:, -1].reshape(b, k, -1),
            O_N=O_r_seq[:, -1],
            F_p_N=F_p[:, -1],
            F_N=F_r[:, 0],
            emb=emb,
        )

    def forward(self, batch: Batch):
        """Streams, corrections, relation logits [B, K, 2] and caption logits [B, L, V]."""
        from .causal import corrections

        out = self.streams(batch)
        refined, extras = corrections(self, batch, out)
        out.extras.update(extras)
        out.extras["O_m_refined"] = refined
        k = out.O_m.shape[1]
        logits = self.relation(refined, out.O_p.unsqueeze(1).expand(-1, k, -1), out.O_N.unsqueeze(1).expand(-1, k, -1))
        return out, logits, self.caption(out.O_p)


# ---------------------------------------------------------------------------
# single-video API
# ---------------------------------------------------------------------------

def _one(video: VideoTensors) -> Batch:
    return collate([video])


def forward_streams(model: VGCM, video: VideoTensors, k: int, mask: bool = True) -> dict:
    """Both paths for premise ``k`` (1-based) of one video.

    With ``mask=False`` the masked path is fed the unmasked events through its
    own call, which is how weight sharing is checked.
    """
    n = video.n_events
    if not 1 <= k <= n - 1:
        raise EventIndexError(f"premise index {k} outside [1, {n - 1}]")
    batch = _one(video)
    emb = model.encode_event(batch.visual, batch.captions)
    premises = emb[:, : n - 1]
    F_p, O_p = model.predict(premises)
    if mask:
        masked = premises.clone()
        masked[:, k - 1] = model.masked_embedding(emb)
    else:
        masked = premises.clone()
    F_m, O_m = model.predict(masked)
    F_r, O_r = model.predict(emb[:, n - 1:])
    return {
        "F_p": F_p[0], "F_m": F_m[0],
        "O_p": O_p[0, -1], "O_m": O_m[0, -1], "O_N": O_r[0, -1],
        "F_p_N": F_p[0, -1], "F_N": F_r[0, 0], "emb": emb[0],
    }


def relation_head(model: VGCM, o_masked, o_plain, o_result):
    d = model.config.d_model
    for t in (o_masked, o_plain, o_result):
        if t.shape[-1] != d:
            raise DimensionError(f"relation head expects width {d}, got {t.shape[-1]}")
    return model.relation(o_masked, o_plain, o_result)


def caption_head(model: VGCM, o_plain):
    return model.caption(o_plain)


def greedy_decode(logits) -> list[list[int]]:
    """Per-position argmax, PAD positions dropped."""
    ids = logits.argmax(-1)
    if ids.dim() == 1:
        ids = ids.unsqueeze(0)
    return [[int(t) for t in row if int(t) != PAD] for row in ids]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: VGCM, path, extra: dict | None = None) -> None:
    # one metadata entry: the writer orders several keys by hash, which breaks byte stability
    meta = {"model_config": asdict(model.config), "extra": extra or {}}
    tensors = {name: p.detach().contiguous().clone() for name, p in model.state_dict().items()}
    save_file(tensors, str(path), metadata={"mecd": json.dumps(meta, sort_keys=True)})


def load_checkpoint(path) -> tuple[VGCM, dict]:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = json.loads((fh.metadata() or {}).get("mecd", "{}"))
    if "model_config" not in meta:
        raise ConfigError(f"{path}: not a checkpoint written by this package")
    config = ModelConfig.from_dict(meta["model_config"])
    model = VGCM(config)
    state = load_file(str(path))
    model.load_state_dict({k: v for k, v in state.items()})
    model.to(next(iter(state.values())).dtype)
    model.eval()
    return model, meta["extra"]


def checkpoint_exists(path) -> bool:
    return Path(path).is_file()
