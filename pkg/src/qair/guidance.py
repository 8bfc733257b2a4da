"""Degradation codes, semantic priors and the guided restoration network."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, DependencyError
from .restorer import RestorationBranch, RestorerConfig

CODE_DIM = 128
SEMANTIC_DIM = 768


class CFE(nn.Module):
    """Compact feature extraction: four stride-2 convs, GAP, 2-layer MLP, L2 norm."""

    min_size = 32

    def __init__(self, code_dim: int = CODE_DIM, widths=(32, 64, 128, 128)):
        super().__init__()
        layers = []
        cin = 3
        for w in widths:
            layers += [nn.Conv2d(cin, w, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            cin = w
        self.encoder = nn.Sequential(*layers)
        self.mlp = nn.Sequential(nn.Linear(cin, code_dim), nn.LeakyReLU(0.1), nn.Linear(code_dim, code_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if min(x.shape[-2:]) < self.min_size:
            raise ContractError(f"CFE needs patches of at least {self.min_size}x{self.min_size}, got {tuple(x.shape[-2:])}")
        h = self.encoder(x).mean(dim=(2, 3))
        return F.normalize(self.mlp(h), dim=-1)


class PGM(nn.Module):
    """Prompt guidance module for one level.

    ``[f_l, z]`` -> linear -> per-channel ``(scale, shift)``;
    ``Y = scale * LN(x) + shift + x`` broadcast over space.
    """

    def __init__(self, channels: int, semantic_dim: int = SEMANTIC_DIM, code_dim: int = CODE_DIM):
        super().__init__()
        self.channels = channels
        self.head = nn.Linear(semantic_dim + code_dim, 2 * channels)

    def modulation(self, f: torch.Tensor, z: torch.Tensor):
        gamma, beta = self.head(torch.cat([f, z], dim=-1)).chunk(2, dim=-1)
        return gamma, beta

    def forward(self, f: torch.Tensor, z: torch.Tensor, x: torch.Tensor, gamma=None, beta=None) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ContractError(f"PGM built for {self.channels} channels, got features with {x.shape[1]}")
        if gamma is None or beta is None:
            gamma, beta = self.modulation(f, z)
        normed = F.layer_norm(x.permute(0, 2, 3, 1), (self.channels,)).permute(0, 3, 1, 2)
        return gamma[..., None, None] * normed + beta[..., None, None] + x


def extract_semantic(i_d: torch.Tensor, backend) -> list[torch.Tensor]:
    """Four frozen semantic feature vectors ``[B, 768]`` (taps shallow to deep)."""
    if backend is None:
        raise DependencyError("no semantic backend loaded")
    with torch.no_grad():
        feats = backend.encode(i_d)
    return [f.detach() for f in feats]


class GuidedRestorer(nn.Module):
    """Restoration branch + CFE + per-level PGM heads.

    The frozen semantic backend is *not* a submodule; callers pass its
    features (see :func:`extract_semantic`) so that backend weights never
    enter optimizers or checkpoints. With ``guided=False`` the network runs
    without CFE/PGM (identity guidance), which is what the proxy restorer
    used for medium-quality images does.
    """

    def __init__(self, cfg: RestorerConfig | None = None, guided: bool = True):
        super().__init__()
        self.cfg = cfg or RestorerConfig()
        self.guided = guided
        self.branch = RestorationBranch(self.cfg)
        if guided:
            self.cfe = CFE()
            self.pgm = nn.ModuleList([PGM(c) for c in self.cfg.channels])

    def guides(self, semantic, code):
        def make(level):
            gamma, beta = self.pgm[level].modulation(semantic[level], code)
            return lambda x: self.pgm[level](None, None, x, gamma, beta)

        return [make(l) for l in range(4)]

    def forward(self, i_d: torch.Tensor, semantic=None, code=None) -> torch.Tensor:
        if not self.guided:
            return self.branch(i_d)
        b = i_d.shape[0]
        if semantic is None:
            semantic = [i_d.new_zeros(b, SEMANTIC_DIM)] * 4
        if len(semantic) != 4:
            raise ContractError(f"expected 4 semantic feature levels, got {len(semantic)}")
        if code is None:
            code = self.cfe(i_d)
        return self.branch(i_d, self.guides(semantic, code))

    def restore(self, i_d: torch.Tensor, semantic_backend=None) -> torch.Tensor:
        semantic = extract_semantic(i_d, semantic_backend) if (self.guided and semantic_backend is not None) else None
        return self(i_d, semantic)
