"""Restoration-stage losses: CLIP-aware, difficulty-adaptive perceptual,
contrastive degradation, L1 reconstruction and their weighted total."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .encoders import cosine_similarity
from .errors import ContractError, PipelineOrderError

log = logging.getLogger(__name__)

GAMMA = 0.25
LAMBDA_EASY = 2.0
XI = {3: 1 / 12, 7: 1 / 6, 11: 1 / 3, 15: 1.0}
TAU = 0.07
DPL_EPS = 1e-8
COMPONENTS = ("L_rec", "L_cl", "L_clip", "L_dpl")


@dataclass
class LossWeights:
    cl: float = 0.1
    clip: float = 0.05
    dpl: float = 0.1

    def __post_init__(self):
        if min(self.cl, self.clip, self.dpl) < 0:
            raise ContractError("loss weights must be nonnegative")


@dataclass
class DifficultyState:
    """Per-epoch difficulty reference: average PSNR of the previous-epoch model."""

    epoch: int = 0
    avg_psnr: float = 0.0
    gamma: float = GAMMA
    lambda_easy: float = LAMBDA_EASY
    xi: dict = field(default_factory=lambda: dict(XI))


@dataclass
class NegativeBank:
    """Negatives for a batch.

    ``easy``: the degraded inputs ``[B, 3, H, W]``. ``non_easy``: ``[B, z, 3, H, W]``
    proxy-restored images with cached PSNR ``[B, z]`` against the same ground truth.
    """

    easy: torch.Tensor
    non_easy: torch.Tensor
    psnr: torch.Tensor
    tags: tuple = ()

    @property
    def z(self) -> int:
        return self.non_easy.shape[1]


# ---------------------------------------------------------------------------
# CLIP-aware loss


def clip_from_similarities(sims: torch.Tensor) -> torch.Tensor:
    """``1 - softmax(sims)[excellent]`` for ``sims[..., (e, m, t)]``, averaged."""
    return (1.0 - sims.softmax(dim=-1)[..., 0]).mean()


def clip_aware_loss(i_r: torch.Tensor, prompts, vl_backend) -> torch.Tensor:
    if not prompts.frozen:
        raise PipelineOrderError("CLIP-aware loss requires frozen prompts from the prompt-learning stage")
    text = prompts.text_features(vl_backend)
    emb = vl_backend.encode_image(i_r)
    return clip_from_similarities(cosine_similarity(emb[:, None, :], text[None]))


# ---------------------------------------------------------------------------
# Difficulty-adaptive perceptual loss


def negative_weight(state: DifficultyState, psnr_nq) -> float | torch.Tensor:
    """``1 + gamma`` for hard negatives (model avg PSNR >= negative PSNR), else ``1 - gamma``."""
    if isinstance(psnr_nq, torch.Tensor):
        hard = torch.as_tensor(state.avg_psnr, dtype=psnr_nq.dtype) >= psnr_nq
        return torch.where(hard, 1.0 + state.gamma, 1.0 - state.gamma).to(psnr_nq.dtype)
    return 1.0 + state.gamma if state.avg_psnr >= psnr_nq else 1.0 - state.gamma


def feature_distance(fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
    """Per-sample mean absolute difference of feature maps ``[B, ...]`` -> ``[B]``."""
    return (fa - fb).abs().flatten(1).mean(1)


def dpl_from_distances(num, easy, neg, weights, xi, lambda_easy: float = LAMBDA_EASY, eps: float = DPL_EPS):
    """Combine per-tap distances.

    ``num[i]``, ``easy[i]``: ``[B]``; ``neg[i]``: ``[B, z]``; ``weights``: ``[B, z]``;
    ``xi``: per-tap weights. Returns the batch mean of the per-sample sums.
    """
    total = 0.0
    for i, w_i in enumerate(xi):
        den = lambda_easy * easy[i] + (weights * neg[i]).sum(-1)
        small = den < eps
        if bool(small.any()):
            log.warning("dpl denominator below %.0e at tap %d; adding eps", eps, i)
            den = torch.where(small, den + eps, den)
        total = total + w_i * num[i] / den
    return total.mean()


def dpl_loss(i_r, i_g, bank: NegativeBank, state: DifficultyState, perceptual_backend) -> torch.Tensor:
    if not (i_r.shape == i_g.shape == bank.easy.shape):
        raise ContractError("i_r, i_g and the easy negative must share a shape")
    taps = perceptual_backend.taps
    xi = [state.xi[t] for t in taps]
    f_r = perceptual_backend.encode(i_r)
    b, z = bank.non_easy.shape[:2]
    with torch.no_grad():
        # the clean target is encoded alone, matching the restored pass exactly;
        # the negatives share one batch
        f_g = perceptual_backend.encode(i_g)
        refs = perceptual_backend.encode(torch.cat([bank.easy.to(i_g.dtype), bank.non_easy.flatten(0, 1).to(i_g.dtype)]))
        f_d = [f[:b] for f in refs]
        f_q = [f[b:] for f in refs]
    num = [feature_distance(f_r[i], f_g[i]) for i in range(len(taps))]
    easy = [feature_distance(f_r[i], f_d[i]) for i in range(len(taps))]
    neg = []
    for i in range(len(taps)):
        if z:
            fr = f_r[i].unsqueeze(1).expand(b, z, *f_r[i].shape[1:]).flatten(0, 1)
            neg.append(feature_distance(fr, f_q[i]).view(b, z))
        else:
            neg.append(i_r.new_zeros(b, 0))
    weights = negative_weight(state, bank.psnr.to(i_r.dtype)) if z else i_r.new_zeros(b, 0)
    return dpl_from_distances(num, easy, neg, weights, xi, state.lambda_easy)


# ---------------------------------------------------------------------------
# Contrastive degradation loss


def contrastive_degradation_loss(anchor, positive, negatives, tau: float = TAU) -> torch.Tensor:
    """InfoNCE over cosine similarities.

    ``anchor``/``positive``: ``[D]`` or ``[B, D]``; ``negatives``: ``[n, D]`` or
    ``[B, n, D]`` (or a list of ``[D]`` vectors).
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if isinstance(negatives, (list, tuple)):
        if not negatives:
            raise ContractError("contrastive loss needs at least one negative")
        negatives = torch.stack(list(negatives), dim=-2)
    if negatives.shape[-2] == 0:
        raise ContractError("contrastive loss needs at least one negative")
    pos = cosine_similarity(anchor, positive) / tau
    neg = cosine_similarity(anchor.unsqueeze(-2), negatives) / tau
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return -(logits.log_softmax(dim=-1)[..., 0]).mean()


def batch_contrastive_loss(z_a: torch.Tensor, z_p: torch.Tensor, kinds, tau: float = TAU) -> torch.Tensor:
    """Contrastive loss for a batch of crop pairs.

    Sample ``b``'s negatives are the anchor codes of every sample whose
    degradation kind differs from ``kinds[b]``. Samples with no such
    partner are skipped; returns 0 when no sample has a negative.
    """
    kinds = list(kinds)
    terms = []
    for b, kind in enumerate(kinds):
        others = [j for j, k in enumerate(kinds) if k != kind]
        if not others:
            continue
        terms.append(contrastive_degradation_loss(z_a[b], z_p[b], z_a[others], tau))
    if not terms:
        return z_a.sum() * 0.0
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# Reconstruction and total


def rec_loss(i_r: torch.Tensor, i_g: torch.Tensor) -> torch.Tensor:
    return F.l1_loss(i_r, i_g)


def total_loss(components: dict, weights: LossWeights | None = None):
    """``L_rec + w.cl * L_cl + w.clip * L_clip + w.dpl * L_dpl``; missing components count as 0."""
    w = weights or LossWeights()
    get = components.get
    return get("L_rec", 0.0) + w.cl * get("L_cl", 0.0) + w.clip * get("L_clip", 0.0) + w.dpl * get("L_dpl", 0.0)
