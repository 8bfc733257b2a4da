"""Three-tier quality perceiver learned by prompt tuning against a frozen
vision-language backend.

Tier/prompt ordering throughout is ``(excellent, mediocre, terrible)`` for
prompts and ``(good, medium, bad)`` for images, so the label matrix is the
identity in this ordering.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_archive, save_archive
from .encoders import TOKEN_STD, cosine_similarity, to_nchw
from .errors import ConfigError, ContractError, FrozenError, TrainingError

log = logging.getLogger(__name__)

ANCHOR_WORDS = ("excellent", "mediocre", "terrible")
TIERS = ("good", "medium", "bad")
INIT_MODES = ("fixed", "random", "partial_random")
N_TOKENS = 16


class QualityPromptSet:
    """Three learnable ``[N, D]`` token matrices with a one-way freeze.

    Once frozen, the stored tokens cannot be changed through this object:
    :attr:`tokens` hands out copies and :meth:`load_tokens` raises.
    """

    def __init__(self, tokens: torch.Tensor, init_mode: str, seed: int, anchor_words=ANCHOR_WORDS, trainable: bool = True):
        if tokens.dim() != 3 or tokens.shape[0] != 3:
            raise ContractError(f"prompt tokens must have shape [3, N, D], got {tuple(tokens.shape)}")
        self._tokens = tokens.detach().clone().requires_grad_(trainable)
        self.init_mode = init_mode
        self.seed = seed
        self.anchor_words = tuple(anchor_words)
        self.frozen = False

    @property
    def n_tokens(self) -> int:
        return self._tokens.shape[1]

    @property
    def tokens(self) -> torch.Tensor:
        """``[3, N, D]`` in (excellent, mediocre, terrible) order; a copy once frozen."""
        return self._tokens.detach().clone() if self.frozen else self._tokens

    @property
    def T_e(self):
        return self.tokens[0]

    @property
    def T_m(self):
        return self.tokens[1]

    @property
    def T_t(self):
        return self.tokens[2]

    def parameters(self) -> list[torch.Tensor]:
        if self.frozen or not self._tokens.requires_grad:
            return []
        return [self._tokens]

    def freeze(self) -> "QualityPromptSet":
        self._tokens = self._tokens.detach().clone()
        self.frozen = True
        return self

    def load_tokens(self, tokens: torch.Tensor) -> None:
        if self.frozen:
            raise FrozenError("prompt set is frozen; its tokens cannot be modified")
        with torch.no_grad():
            self._tokens.copy_(tokens)

    def text_features(self, vl_backend) -> torch.Tensor:
        """``[3, D]`` text-encoder outputs for the three prompts."""
        return vl_backend.encode_text_tokens(self.tokens)

    def save(self, path) -> None:
        t = self._tokens.detach()
        save_archive(
            path,
            {"T_e": t[0], "T_m": t[1], "T_t": t[2]},
            {"init_mode": self.init_mode, "N": self.n_tokens, "seed": self.seed,
             "anchor_words": list(self.anchor_words), "frozen": self.frozen},
        )

    @classmethod
    def load(cls, path) -> "QualityPromptSet":
        arrays, meta = load_archive(path)
        tokens = torch.from_numpy(np.stack([arrays["T_e"], arrays["T_m"], arrays["T_t"]]))
        ps = cls(tokens, meta.get("init_mode", "random"), meta.get("seed", 0), meta.get("anchor_words", ANCHOR_WORDS))
        if meta.get("frozen", False):
            ps.freeze()
        return ps


def init_prompts(mode: str, seed: int, vl_backend, n_tokens: int = N_TOKENS, anchor_words=ANCHOR_WORDS) -> QualityPromptSet:
    """Initial prompts.

    ``fixed`` repeats the anchor-word embedding over all slots and is not
    trainable; ``random`` draws every token from N(0, 0.02^2);
    ``partial_random`` is random except the last slot, which holds the
    anchor-word embedding (all slots remain trainable).
    """
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown prompt init mode {mode!r}; expected one of {INIT_MODES}")
    dim = vl_backend.embed_dim
    anchors = torch.stack([vl_backend.token_embedding(w).float() for w in anchor_words])
    if mode == "fixed":
        tokens = anchors[:, None, :].repeat(1, n_tokens, 1)
        return QualityPromptSet(tokens, mode, seed, anchor_words, trainable=False)
    g = torch.Generator().manual_seed(int(seed))
    tokens = torch.randn(3, n_tokens, dim, generator=g) * TOKEN_STD
    if mode == "partial_random":
        tokens[:, -1] = anchors
    return QualityPromptSet(tokens, mode, seed, anchor_words)


# ---------------------------------------------------------------------------
# Losses and classification


def similarity_matrix(images: Sequence[torch.Tensor], prompts: QualityPromptSet, vl_backend) -> torch.Tensor:
    """Cosine similarities ``[B, len(images), 3]`` between each image tier and each prompt."""
    text = prompts.text_features(vl_backend)
    rows = []
    for img in images:
        emb = vl_backend.encode_image(img)
        rows.append(cosine_similarity(emb[:, None, :], text[None, :, :]))
    return torch.stack(rows, dim=1)


def ce_from_similarities(sims: torch.Tensor) -> torch.Tensor:
    """Cross entropy for ``sims[..., 3 images (good, medium, bad), 3 prompts (e, m, t)]``.

    Image ``i`` has true prompt ``i``; the loss averages the three per-image
    terms (and any leading batch dims).
    """
    logp = F.log_softmax(sims, dim=-1)
    return -torch.diagonal(logp, dim1=-2, dim2=-1).mean()


def ce_loss(prompts: QualityPromptSet, triplet, vl_backend) -> torch.Tensor:
    """Prompt-learning loss for a triplet batch ``(bad, medium, good)`` of NCHW tensors."""
    bad, medium, good = triplet
    return ce_from_similarities(similarity_matrix([good, medium, bad], prompts, vl_backend))


@dataclass
class QualityPrediction:
    tier: str
    probabilities: dict

    def __iter__(self):
        return iter((self.tier, self.probabilities))


def classify_from_similarities(sims: torch.Tensor) -> list[QualityPrediction]:
    """``sims``: ``[B, 3]`` in (e, m, t) order."""
    probs = sims.double().softmax(dim=-1)
    out = []
    for row in probs:
        idx = int(torch.argmax(row))
        out.append(QualityPrediction(TIERS[idx], {t: float(p) for t, p in zip(TIERS, row)}))
    return out


def classify_quality(image, prompts: QualityPromptSet, vl_backend):
    """Tier prediction for one ``[H, W, 3]`` image or a NCHW batch."""
    single = not isinstance(image, torch.Tensor) or image.dim() == 3
    x = to_nchw(image) if not isinstance(image, torch.Tensor) or image.dim() == 3 else image
    with torch.no_grad():
        emb = vl_backend.encode_image(x.to(vl_backend.dtype))
        text = prompts.text_features(vl_backend)
        sims = cosine_similarity(emb[:, None, :], text[None])
    preds = classify_from_similarities(sims)
    return preds[0] if single else preds


# ---------------------------------------------------------------------------
# Training


@dataclass
class TripletSet:
    """Aligned ``[K, H, W, 3]`` arrays of bad, medium and good images."""

    bad: np.ndarray
    medium: np.ndarray
    good: np.ndarray

    def __len__(self):
        return len(self.bad)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return tuple(to_nchw(a[idx]) for a in (self.bad, self.medium, self.good))

    def embeddings(self, vl_backend) -> torch.Tensor:
        """``[K, 3, D]`` image embeddings in (good, medium, bad) order."""
        with torch.no_grad():
            return torch.stack(
                [vl_backend.encode_image(to_nchw(a).to(vl_backend.dtype)) for a in (self.good, self.medium, self.bad)],
                dim=1,
            )

    def accuracy(self, prompts: QualityPromptSet, vl_backend) -> float:
        correct = 0
        for tier, arr in zip(TIERS, (self.good, self.medium, self.bad)):
            preds = classify_quality(to_nchw(arr), prompts, vl_backend)
            correct += sum(p.tier == tier for p in preds)
        return correct / (3 * len(self))


def train_prompts(
    triplets: TripletSet,
    vl_backend,
    *,
    init_mode: str = "partial_random",
    iters: int = 100_000,
    lr: float = 4e-5,
    batch_size: int = 32,
    seed: int = 0,
    n_tokens: int = N_TOKENS,
    weight_decay: float = 0.0,
    log_every: int = 0,
    on_step: Callable[[int, float, QualityPromptSet], None] | None = None,
) -> QualityPromptSet:
    """Learn the three prompts with AdamW and return them frozen.

    Raises :class:`TrainingError` on a non-finite loss; the prompt set keeps
    its last finite state (available as ``err.prompts``).
    """
    if len(triplets) == 0:
        raise ContractError("triplet corpus is empty")
    prompts = init_prompts(init_mode, seed, vl_backend, n_tokens)
    params = prompts.parameters()
    if not params or iters <= 0:
        return prompts.freeze()
    opt = torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    bs = min(batch_size, len(triplets))
    # the image encoder is frozen, so image embeddings are computed once
    emb = triplets.embeddings(vl_backend)
    last_good = prompts.tokens.detach().clone()
    for step in range(iters):
        idx = rng.choice(len(triplets), size=bs, replace=False)
        text = prompts.text_features(vl_backend)
        loss = ce_from_similarities(cosine_similarity(emb[idx][:, :, None, :], text[None, None]))
        if not torch.isfinite(loss):
            prompts.load_tokens(last_good)
            err = TrainingError(f"non-finite prompt loss at step {step}")
            err.prompts = prompts.freeze()
            raise err
        opt.zero_grad()
        loss.backward()
        opt.step()
        last_good = prompts.tokens.detach().clone()
        if log_every and step % log_every == 0:
            log.info("prompt step %d  L_ce=%.6f", step, loss.item())
        if on_step is not None:
            on_step(step, loss.item(), prompts)
    return prompts.freeze()


def split_folds(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split of ``range(n)`` into two halves."""
    if n < 2:
        raise ContractError("need at least 2 degraded images for 2-fold cross restoration")
    perm = np.random.default_rng(seed).permutation(n)
    half = math.ceil(n / 2)
    return np.sort(perm[:half]), np.sort(perm[half:])


def gen_medium_images(
    degraded: Sequence[np.ndarray],
    clean: Sequence[np.ndarray],
    proxy_trainer: Callable[[np.ndarray, np.ndarray], Callable[[np.ndarray], np.ndarray]],
    seed: int = 0,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Two-fold cross restoration.

    ``proxy_trainer(degraded_subset, clean_subset)`` returns a restore
    function; the model trained on one fold restores the other. Returns the
    medium images in input order and the fold id (0/1) of each input.
    """
    degraded = np.asarray(degraded)
    clean = np.asarray(clean)
    fold_a, fold_b = split_folds(len(degraded), seed)
    fold_of = np.zeros(len(degraded), dtype=np.int64)
    fold_of[fold_b] = 1
    medium: list = [None] * len(degraded)
    for train_idx, apply_idx in ((fold_a, fold_b), (fold_b, fold_a)):
        restore = proxy_trainer(degraded[train_idx], clean[train_idx])
        out = restore(degraded[apply_idx])
        for i, img in zip(apply_idx, out):
            medium[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
    return medium, fold_of
