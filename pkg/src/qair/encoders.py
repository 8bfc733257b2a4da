"""Frozen feature extractors: vision-language pair, semantic encoder, perceptual net.

Two modes are available for each role. ``toy`` builds a deterministic seeded
network with fixed random projections and smooth pointwise nonlinearities,
matching the interface shapes of the real networks. ``pretrained`` wraps real
networks (CLIP, DINOv2, VGG-16) whose weights must already exist on disk.
"""

from __future__ import annotations

import math
import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DependencyError, NumericDomainError

ROLES = ("vision_language", "semantic", "perceptual")
MODES = ("toy", "pretrained")

SEMANTIC_TAPS = (1, 4, 8, 12)
PERCEPTUAL_TAPS = (3, 7, 11, 15)
TOKEN_STD = 0.02

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def to_nchw(img) -> torch.Tensor:
    """``[H, W, 3]`` array (or ``[B, H, W, 3]``) to a float tensor in NCHW layout."""
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(np.ascontiguousarray(img))
    if img.dim() == 3:
        img = img.unsqueeze(0)
    return img.permute(0, 3, 1, 2).contiguous()


def to_hwc(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_nchw` for a single image."""
    if x.dim() == 4:
        x = x[0]
    return x.detach().permute(1, 2, 0).cpu().numpy()


def resize(x: torch.Tensor, resolution: int) -> torch.Tensor:
    """Differentiable bilinear resize to a square ``resolution``."""
    if x.shape[-2:] == (resolution, resolution):
        return x
    return F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Cosine similarity along the last dimension.

    Raises :class:`NumericDomainError` if either input contains a zero vector.
    """
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na <= eps).any()) or bool((nb <= eps).any()):
        raise NumericDomainError("cosine similarity undefined for zero vectors")
    return (a * b).sum(-1) / (na * nb)


class FrozenBackend(nn.Module):
    """Base class: parameters never require grad and the module stays in eval mode."""

    role: str = ""

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.requires_grad]

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def _randn(g: torch.Generator, *shape, std: float = 1.0) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=g) * std, requires_grad=False)


# ---------------------------------------------------------------------------
# Toy backends


class ToyVisionLanguage(FrozenBackend):
    """Seeded stand-in for a CLIP image/text encoder pair (512-d joint space)."""

    role = "vision_language"
    embed_dim = 512

    def __init__(self, seed: int = 0, input_resolution: int = 64, hidden: int = 256):
        super().__init__()
        self.seed = seed
        self.input_resolution = input_resolution
        g = torch.Generator().manual_seed(int(seed))
        haar = torch.tensor(
            [[[1.0, 1.0], [-1.0, -1.0]], [[1.0, -1.0], [1.0, -1.0]], [[1.0, -1.0], [-1.0, 1.0]]]
        ) / 2.0
        # LH, HL, HH detail filters applied per colour channel
        self.register_buffer("haar", haar[:, None].repeat(3, 1, 1, 1))
        n_in = 2 * 9 + 6
        self.proj1 = _randn(g, n_in, hidden, std=1.0 / math.sqrt(n_in))
        self.bias1 = _randn(g, hidden, std=0.5)
        self.proj2 = _randn(g, hidden, self.embed_dim, std=1.0 / math.sqrt(hidden))
        self.pos = _randn(g, 77, self.embed_dim, std=TOKEN_STD)
        self.txt_w1 = _randn(g, self.embed_dim, self.embed_dim, std=1.0 / (TOKEN_STD * math.sqrt(self.embed_dim)))
        self.txt_w2 = _randn(g, self.embed_dim, self.embed_dim, std=1.0 / math.sqrt(self.embed_dim))
        self.freeze()

    def _detail_log_energy(self, x: torch.Tensor) -> torch.Tensor:
        d = F.conv2d(x, self.haar.to(x.dtype), stride=2, groups=3)
        return (torch.log(d.pow(2) + 1e-5).mean(dim=(2, 3)) + 8.0) / 3.0

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        """NCHW images in [0, 1] -> ``[B, 512]`` embeddings.

        Features are log-energies of Haar detail bands at two scales (robust
        to image content, sensitive to noise/streak/blur statistics) plus
        global colour statistics, passed through a fixed random MLP.
        """
        x = resize(x, self.input_resolution).to(self.dtype) * 2.0 - 1.0
        fine = self._detail_log_energy(x)
        coarse = self._detail_log_energy(F.avg_pool2d(x, 2))
        colour = torch.cat([x.mean(dim=(2, 3)), x.std(dim=(2, 3))], dim=1)
        phi = torch.cat([fine, coarse, colour], dim=1)
        return F.gelu(phi @ self.proj1 + self.bias1) @ self.proj2

    def encode_text_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """``[N, 512]`` (or ``[P, N, 512]``) token embeddings -> ``[512]`` (or ``[P, 512]``)."""
        n = tokens.shape[-2]
        h = torch.tanh((tokens.to(self.dtype) + self.pos[:n]) @ self.txt_w1)
        return h.mean(dim=-2) @ self.txt_w2

    def token_embedding(self, word: str) -> torch.Tensor:
        g = torch.Generator().manual_seed((int(self.seed) * 1_000_003 + zlib.crc32(word.encode())) % (2**63))
        return (torch.randn(self.embed_dim, generator=g) * TOKEN_STD).to(self.dtype)


class ToySemantic(FrozenBackend):
    """Seeded 12-layer token mixer standing in for a ViT-B self-supervised encoder."""

    role = "semantic"
    feature_dim = 768
    depth = 12

    def __init__(self, seed: int = 0, input_resolution: int = 64, patch: int = 8, hidden: int = 192, taps=SEMANTIC_TAPS):
        super().__init__()
        self.input_resolution = input_resolution
        self.patch = patch
        self.hidden = hidden
        self.taps = tuple(taps)
        g = torch.Generator().manual_seed(int(seed) + 7919)
        d = hidden
        n_tokens = (input_resolution // patch) ** 2
        self.patch_w = _randn(g, 3 * patch * patch, d, std=1.0 / math.sqrt(3 * patch * patch))
        self.pos = _randn(g, n_tokens, d, std=0.1)
        self.token_mix = nn.ParameterList([_randn(g, n_tokens, n_tokens, std=1.0 / math.sqrt(n_tokens)) for _ in range(self.depth)])
        self.channel_mix = nn.ParameterList([_randn(g, d, d, std=1.0 / math.sqrt(d)) for _ in range(self.depth)])
        # the mixer runs narrow; pooled taps are lifted to the 768-d interface
        self.out_proj = _randn(g, d, self.feature_dim, std=1.0 / math.sqrt(d))
        self.freeze()

    def forward_layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = resize(x, self.input_resolution).to(self.dtype)
        tokens = F.unfold(x * 2.0 - 1.0, self.patch, stride=self.patch).transpose(1, 2)
        h = tokens @ self.patch_w + self.pos
        outs = []
        for tm, cm in zip(self.token_mix, self.channel_mix):
            h = h + 0.5 * torch.tanh(tm @ h)
            h = h + 0.5 * torch.tanh(F.layer_norm(h, (self.hidden,)) @ cm)
            outs.append(h)
            if len(outs) >= max(self.taps):
                break
        return outs

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """NCHW images -> four ``[B, 768]`` mean-pooled token vectors (shallow to deep)."""
        layers = self.forward_layers(x)
        return [layers[t - 1].mean(dim=1) @ self.out_proj for t in self.taps]


class ToyPerceptual(FrozenBackend):
    """VGG-16-shaped conv stack (first 16 feature modules) with narrow random filters.

    Module indices follow ``torchvision.models.vgg16().features`` so that taps
    3, 7, 11 and 15 land on the same layer types as the real network.
    Max-pooling and ReLU are replaced by average pooling and GELU to keep the
    features smooth for finite-difference checks.
    """

    role = "perceptual"

    def __init__(self, seed: int = 0, input_resolution: int = 64, widths=(16, 32, 64), taps=PERCEPTUAL_TAPS):
        super().__init__()
        self.input_resolution = input_resolution
        self.taps = tuple(taps)
        g = torch.Generator().manual_seed(int(seed) + 104729)
        a, b, c = widths
        plan = [a, a, "P", b, b, "P", c, c, c]
        layers: list[nn.Module] = []
        cin = 3
        for item in plan:
            if item == "P":
                layers.append(nn.AvgPool2d(2))
                continue
            conv = nn.Conv2d(cin, item, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (9 * cin)))
                conv.bias.copy_(torch.randn(item, generator=g) * 0.05)
            layers += [conv, nn.GELU()]
            cin = item
        self.features = nn.Sequential(*layers)
        self.freeze()

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = resize(x, self.input_resolution).to(self.dtype)
        h = (x - 0.45) / 0.25
        outs = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self.taps:
                outs.append(h)
            if i >= max(self.taps):
                break
        return outs


# ---------------------------------------------------------------------------
# Pretrained wrappers


def _require_path(path, role: str) -> Path:
    if not path:
        raise DependencyError(
            f"pretrained {role} backend requested but no weights path configured; "
            f"set backends.{role}.weights to a local file/directory or use mode 'toy'"
        )
    p = Path(path)
    if not p.exists():
        raise DependencyError(
            f"pretrained {role} weights not found at {p}; download them manually "
            f"(no network fetches are attempted) or switch the backend to mode 'toy'"
        )
    return p


def _normalize(x: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x - m) / s


class PretrainedPerceptual(FrozenBackend):
    role = "perceptual"

    def __init__(self, weights: Path, taps=PERCEPTUAL_TAPS, input_resolution: int = 224):
        super().__init__()
        try:
            from torchvision.models import vgg16
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise DependencyError("torchvision is required for the pretrained perceptual backend") from exc
        net = vgg16()
        net.load_state_dict(torch.load(weights, map_location="cpu"))
        for m in net.features:
            if isinstance(m, nn.ReLU):
                m.inplace = False
        self.features = net.features[: max(taps) + 1]
        self.taps = tuple(taps)
        self.input_resolution = input_resolution
        self.freeze()

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = _normalize(resize(x, self.input_resolution).to(self.dtype), _IMAGENET_MEAN, _IMAGENET_STD)
        outs = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self.taps:
                outs.append(h)
        return outs


class PretrainedSemantic(FrozenBackend):
    role = "semantic"
    feature_dim = 768

    def __init__(self, weights: Path, taps=SEMANTIC_TAPS, input_resolution: int = 224):
        super().__init__()
        try:
            from transformers import Dinov2Model
        except ImportError as exc:  # pragma: no cover
            raise DependencyError("transformers is required for the pretrained semantic backend") from exc
        self.net = Dinov2Model.from_pretrained(str(weights), local_files_only=True)
        self.taps = tuple(taps)
        self.input_resolution = input_resolution
        self.freeze()

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = _normalize(resize(x, self.input_resolution).to(self.dtype), _IMAGENET_MEAN, _IMAGENET_STD)
        hidden = self.net(pixel_values=h, output_hidden_states=True).hidden_states
        # hidden[0] is the patch embedding; hidden[i] is the output of block i
        return [hidden[t][:, 1:].mean(dim=1) for t in self.taps]


class PretrainedVisionLanguage(FrozenBackend):
    """CLIP wrapper with a learnable-context text path (SOS + N tokens + EOS)."""

    role = "vision_language"
    embed_dim = 512

    def __init__(self, weights: Path, input_resolution: int = 224):
        super().__init__()
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover
            raise DependencyError("transformers is required for the pretrained vision-language backend") from exc
        self.net = CLIPModel.from_pretrained(str(weights), local_files_only=True)
        self.tokenizer = CLIPTokenizer.from_pretrained(str(weights), local_files_only=True)
        self.input_resolution = input_resolution
        self.embed_dim = self.net.config.projection_dim
        self.freeze()

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        h = _normalize(resize(x, self.input_resolution).to(self.dtype), _CLIP_MEAN, _CLIP_STD)
        vision = self.net.vision_model(pixel_values=h)
        return self.net.visual_projection(vision.pooler_output)

    def _word_id(self, word: str) -> int:
        ids = self.tokenizer(word, add_special_tokens=False)["input_ids"]
        return ids[0]

    def token_embedding(self, word: str) -> torch.Tensor:
        table = self.net.text_model.embeddings.token_embedding.weight
        return table[self._word_id(word)].detach().clone()

    def encode_text_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        text = self.net.text_model
        table = text.embeddings.token_embedding.weight
        p = tokens.shape[0]
        sos = table[self.tokenizer.bos_token_id].expand(p, 1, -1)
        eos = table[self.tokenizer.eos_token_id].expand(p, 1, -1)
        seq = torch.cat([sos, tokens.to(table.dtype), eos], dim=1)
        h = text.embeddings(inputs_embeds=seq)
        n = seq.shape[1]
        mask = torch.full((n, n), float("-inf"), dtype=h.dtype).triu(1).expand(p, 1, n, n)
        h = text.encoder(inputs_embeds=h, attention_mask=mask).last_hidden_state
        h = text.final_layer_norm(h)[:, -1]
        out = self.net.text_projection(h)
        return out[0] if squeeze else out


def load_backend(role: str, mode: str = "toy", seed: int = 0, weights=None, input_resolution: int | None = None):
    """Build a frozen backend for ``role`` in ``mode``.

    Toy backends are deterministic functions of ``seed``. Pretrained backends
    need ``weights`` to point at an existing local file or directory.
    """
    if role not in ROLES:
        raise ConfigError(f"unknown backend role {role!r}; expected one of {ROLES}")
    if mode not in MODES:
        raise ConfigError(f"unknown backend mode {mode!r}; expected one of {MODES}")
    kwargs = {} if input_resolution is None else {"input_resolution": input_resolution}
    if mode == "toy":
        cls = {"vision_language": ToyVisionLanguage, "semantic": ToySemantic, "perceptual": ToyPerceptual}[role]
        return cls(seed=seed, **kwargs)
    path = _require_path(weights, role)
    cls = {"vision_language": PretrainedVisionLanguage, "semantic": PretrainedSemantic, "perceptual": PretrainedPerceptual}[role]
    return cls(path, **kwargs)
