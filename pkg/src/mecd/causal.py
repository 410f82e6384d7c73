"""Front-door compensation, counterfactual removal and masked-path refinement.

Masking premise k hides two neighbour effects from the masked path:

* compensation ``F_C = P(e_N | e_k) - P(e_N | do(e_k))`` restores what e_{k-1}
  contributed through e_k; ``do(e_k)`` lets e_k interact only with e_{k+1}
  (plus the chain-of-thought text), cutting the link from e_{k-1};
* removal ``F_R = P(e_N | e_{k+1}) - P(e_N | do(e_{k+1}))`` subtracts what
  e_{k+1} only contributes because e_k happened; the do-term scales the
  pairwise prediction by a factual-minus-counterfactual gate where the
  counterfactual e_k^0 keeps only e_k's objects.

All functions accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DimensionError


@dataclass
class CorrectionInputs:
    emb_k: torch.Tensor  # [..., d]
    emb_next: torch.Tensor  # [..., d] e_{k+1}; e_N when k = N-1
    emb_k0: torch.Tensor  # [..., d] existence-only event, zero visual token
    cot_tokens: torch.Tensor  # [..., L]
    has_prev: torch.Tensor  # [...] bool, False when k = 1
    has_next: torch.Tensor  # [...] bool, False when k = N-1

    def check(self, d_model: int) -> None:
        for name in ("emb_k", "emb_next", "emb_k0"):
            width = getattr(self, name).shape[-1]
            if width != d_model:
                raise DimensionError(f"{name} has width {width}, expected {d_model}")


def _single(block, x):
    return block(x.unsqueeze(-2)).squeeze(-2)


def do_event(model, inputs: CorrectionInputs):
    """P(e_N | do(e_k)): attention re-used from the relation head, then g_do."""
    head = model.relation
    cross = head.cross(inputs.emb_k.unsqueeze(-2), inputs.emb_next.unsqueeze(-2)).squeeze(-2)
    self_ = _single(head.self_attn, inputs.emb_k)
    cot = model.pool_text(inputs.cot_tokens)
    return model.g_do(torch.cat([cross, self_, cot], dim=-1))


def front_door_compensation(model, inputs: CorrectionInputs, p_k=None):
    inputs.check(model.config.d_model)
    if p_k is None:
        p_k = model.pairwise_predict(inputs.emb_k)
    f_c = p_k - do_event(model, inputs)
    return torch.where(inputs.has_prev.unsqueeze(-1), f_c, torch.zeros_like(f_c))


def counterfactual_gate(emb_next, emb_k, emb_k0):
    """sigma(<e_{k+1}, e_k>/sqrt d) - sigma(<e_{k+1}, e_k^0>/sqrt d)."""
    scale = math.sqrt(emb_k.shape[-1])
    factual = torch.sigmoid((emb_next * emb_k).sum(-1) / scale)
    counterfactual = torch.sigmoid((emb_next * emb_k0).sum(-1) / scale)
    return factual - counterfactual


def counterfactual_removal(model, inputs: CorrectionInputs, p_next=None):
    inputs.check(model.config.d_model)
    if p_next is None:
        p_next = model.pairwise_predict(inputs.emb_next)
    gate = counterfactual_gate(inputs.emb_next, inputs.emb_k, inputs.emb_k0)
    f_r = p_next - p_next * gate.unsqueeze(-1)
    return torch.where(inputs.has_next.unsqueeze(-1), f_r, torch.zeros_like(f_r))


def refine(model, o_masked, f_c=None, f_r=None):
    """O'_m = O_m + alpha * (Dec(F_R) - Dec(F_C)); a missing term is skipped.

    ``alpha`` is the model's learned ``correction_scale``. The two decoder terms
    are differenced before touching ``o_masked`` so that equal corrections
    cancel exactly.
    """
    if f_c is None and f_r is None:
        return o_masked
    if f_c is None:
        step = model.decode_single(f_r)
    elif f_r is None:
        step = -model.decode_single(f_c)
    else:
        step = model.decode_single(f_r) - model.decode_single(f_c)
    return o_masked + model.correction_scale * step


def correction_inputs(model, batch, emb) -> CorrectionInputs:
    """Inputs for every premise of a batch: tensors shaped [B, K, ...]."""
    b, n = batch.visual.shape[:2]
    k = n - 1
    zeros = torch.zeros(b, k, model.config.feature_dim, dtype=batch.visual.dtype)
    idx = torch.arange(1, k + 1)
    return CorrectionInputs(
        emb_k=emb[:, :k],
        emb_next=emb[:, 1:],
        emb_k0=model.encode_event(zeros, batch.existence),
        cot_tokens=batch.cot,
        has_prev=(idx > 1).expand(b, k),
        has_next=(idx < k).expand(b, k),
    )


def corrections(model, batch, out):
    """Refined masked-path outputs [B, K, d] under the model's correction flags."""
    cfg = model.config
    if not (cfg.front_door or cfg.counterfactual):
        return out.O_m, {}
    inputs = correction_inputs(model, batch, out.emb)
    single = model.pairwise_predict(out.emb)  # [B, N, d]: P(e_N | e_j) for every event j
    extras = {"inputs": inputs}
    f_c = f_r = None
    if cfg.front_door:
        f_c = front_door_compensation(model, inputs, p_k=single[:, :-1])
        extras["F_C"] = f_c
    if cfg.counterfactual:
        f_r = counterfactual_removal(model, inputs, p_next=single[:, 1:])
        extras["F_R"] = f_r
    return refine(model, out.O_m, f_c, f_r), extras
