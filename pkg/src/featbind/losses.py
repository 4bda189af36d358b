"""Stage-1 and stage-2 objectives.

All losses take logits already upsampled to mask resolution (N, C, H, W)
and integer targets (N, H, W). Batch reductions are per-sample first, then
a mean over the batch, because the blend weight differs between samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    l_fb: Tensor
    l_t: Tensor
    l_p: Tensor
    l_ppa: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_fb", "l_t", "l_p", "l_ppa", "total")}


def per_sample_cross_entropy(logits: Tensor, target: Tensor, ignore_id: int = 255) -> Tensor:
    """Mean pixel cross-entropy of each sample over its non-ignored pixels (0 if none)."""
    target = target.long()
    valid = target != ignore_id
    safe = torch.where(valid, target, torch.zeros_like(target))
    nll = F.cross_entropy(logits, safe, reduction="none") * valid
    count = valid.flatten(1).sum(1)
    return nll.flatten(1).sum(1) / count.clamp(min=1)


def masked_cross_entropy(logits: Tensor, target: Tensor, ignore_id: int = 255) -> Tensor:
    if logits.dim() == 3:
        logits, target = logits[None], target[None]
    return per_sample_cross_entropy(logits, target, ignore_id).mean()


def _as_batch_delta(delta, n: int, like: Tensor) -> Tensor:
    d = torch.as_tensor(delta, dtype=like.dtype, device=like.device)
    return d.expand(n) if d.dim() == 0 else d


def loss_stage1(triple, g1: Tensor, g2: Tensor, delta, ignore_id: int = 255) -> LossBreakdown:
    """``l_fb + delta * l_t + (1 - delta) * l_p`` per sample, averaged over the batch.

    ``triple`` is a PredictionTriple at mask resolution; ``delta`` a float or
    one value per sample.
    """
    fb = per_sample_cross_entropy(triple.s_fb, g1, ignore_id)
    t = per_sample_cross_entropy(triple.s_t, g1, ignore_id)
    p = per_sample_cross_entropy(triple.s_p, g2, ignore_id)
    d = _as_batch_delta(delta, fb.shape[0], fb)
    total = (fb + d * t + (1 - d) * p).mean()
    return LossBreakdown(total, fb.mean(), t.mean(), p.mean(), torch.zeros((), dtype=fb.dtype))


def per_sample_ppa(s_p: Tensor, eps: float = 1e-12) -> Tensor:
    return torch.log(eps + F.relu(s_p).flatten(1).sum(1))


def loss_ppa(s_p: Tensor, eps: float = 1e-12) -> Tensor:
    """Log of the summed rectified phantom logits; batched input averages per-sample values."""
    if s_p.dim() == 3:
        s_p = s_p[None]
    return per_sample_ppa(s_p, eps).mean()


def loss_stage2(s_t: Tensor, s_p: Tensor, g1: Tensor, eps: float = 1e-12,
                ignore_id: int = 255) -> LossBreakdown:
    t = per_sample_cross_entropy(s_t, g1, ignore_id)
    ppa = per_sample_ppa(s_p, eps)
    total = (t + ppa).mean()
    zero = torch.zeros((), dtype=t.dtype)
    return LossBreakdown(total, zero, t.mean(), zero, ppa.mean())


def phantom_activation(s_p: Tensor) -> Tensor:
    """Per-sample sum of rectified phantom logits."""
    return F.relu(s_p).flatten(1).sum(1)
