"""Networks: shared structure encoder, per-domain texture encoders, decoder,
segmentation head, patch discriminators, and a frozen feature extractor.

Shape conventions: images are (B, 3, H, W) in [0,1] with H, W divisible by 8
(by 16 where a discriminator is involved). The structure code lives on a
stride-8 grid; the texture code is a flat 8-vector per image.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datagen import DOMAINS, SOURCE, TARGET
from .errors import CheckpointError, ShapeError

STRUCTURE_STRIDE = 8
PATCH_STRIDE = 16
TEXTURE_DIM = 8
EXTRACTOR_VERSION = 1
EXTRACTOR_STRIDES = (1, 2, 4, 8, 16)
_EXTRACTOR_WIDTHS = (16, 24, 32, 48, 64)

GROUP_NAMES = ("E_c", "E_p_s", "E_p_t", "D", "T", "D_seg", "D_img_s", "D_img_t")
GENERATOR_GROUPS = ("E_c", "E_p_s", "E_p_t", "D", "T")
DISCRIMINATOR_GROUPS = ("D_seg", "D_img_s", "D_img_t")


def _check_divisible(x: torch.Tensor, stride: int, what: str) -> None:
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise ShapeError(f"{what}: spatial dims {h}x{w} not divisible by {stride}")


def domain_flag_channels(flag: str, batch: int, size: tuple[int, int], *, dtype, device) -> torch.Tensor:
    """Two constant channels, one-hot over {source, target}, at a given grid size."""
    if flag not in DOMAINS:
        raise ValueError(f"domain flag must be one of {DOMAINS}, got {flag!r}")
    onehot = torch.zeros(batch, 2, *size, dtype=dtype, device=device)
    onehot[:, 0 if flag == SOURCE else 1] = 1.0
    return onehot


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(ch)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(x + h)


class CommonEncoder(nn.Module):
    """Shared across domains; maps an image to the stride-8 structure code."""

    def __init__(self, width: int = 64):
        super().__init__()
        c1, c2 = width // 2, 3 * width // 4
        self.width = width
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 4, stride=2, padding=1), nn.BatchNorm2d(c1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1), nn.BatchNorm2d(c2), nn.ReLU(inplace=True),
            nn.Conv2d(c2, width, 4, stride=2, padding=1), nn.BatchNorm2d(width), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(_ResBlock(width), _ResBlock(width))

    def forward(self, x):
        _check_divisible(x, STRUCTURE_STRIDE, "encode_common")
        return self.blocks(self.stem(x))


class PrivateEncoder(nn.Module):
    """Four strided conv blocks, global average pooling, one linear layer."""

    def __init__(self, z_dim: int = TEXTURE_DIM, width: int = 48):
        super().__init__()
        chans = (width // 3, width // 2, width, width)
        layers: list[nn.Module] = []
        prev = 3
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = ch
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(prev, z_dim)

    def forward(self, x):
        h = self.conv(x)
        pooled = h.mean(dim=(2, 3))
        return self.fc(pooled)


class Decoder(nn.Module):
    """Rebuilds an image from (structure code, texture code, domain flag).

    The texture code is broadcast over the structure grid and concatenated
    together with the two flag channels, then three residual blocks and three
    stride-2 deconvolutions bring the grid back to input resolution. A sigmoid
    bounds the output to [0,1].
    """

    def __init__(self, width: int = 64, z_dim: int = TEXTURE_DIM):
        super().__init__()
        in_ch = width + z_dim + 2
        self.merge = nn.Sequential(nn.Conv2d(in_ch, width, 3, padding=1), nn.BatchNorm2d(width), nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(_ResBlock(width), _ResBlock(width), _ResBlock(width))
        c1, c2 = width // 2, width // 4
        self.up = nn.Sequential(
            nn.ConvTranspose2d(width, c1, 4, stride=2, padding=1), nn.BatchNorm2d(c1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c1, c2, 4, stride=2, padding=1), nn.BatchNorm2d(c2), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c2, c2, 4, stride=2, padding=1), nn.BatchNorm2d(c2), nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(c2, 3, 3, padding=1)

    def forward(self, z_c, z_p, flag: str):
        if z_c.shape[0] != z_p.shape[0]:
            raise ShapeError(f"batch mismatch: z_c {z_c.shape[0]} vs z_p {z_p.shape[0]}")
        b, _, gh, gw = z_c.shape
        z_p_grid = z_p[:, :, None, None].expand(-1, -1, gh, gw)
        flag_grid = domain_flag_channels(flag, b, (gh, gw), dtype=z_c.dtype, device=z_c.device)
        h = self.merge(torch.cat([z_c, z_p_grid, flag_grid], dim=1))
        h = self.up(self.blocks(h))
        return torch.sigmoid(self.out(h))


class Classifier(nn.Module):
    """Per-pixel class scores from the structure code, bilinearly upsampled."""

    def __init__(self, num_classes: int, width: int = 64):
        super().__init__()
        self.head = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, num_classes, 1),
        )
        self.num_classes = num_classes

    def forward(self, z_c, out_size: tuple[int, int]):
        logits = self.head(z_c)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


class SegPatchDiscriminator(nn.Module):
    """Patch scores in (0,1) on a stride-16 grid over a probability map."""

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        chans = (width, width * 2, width * 3, width * 3)
        layers: list[nn.Module] = []
        prev = num_classes
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            prev = ch
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, probs):
        _check_divisible(probs, PATCH_STRIDE, "discriminate_seg")
        return torch.sigmoid(self.net(probs))


class ImagePatchDiscriminator(nn.Module):
    """Raw (unbounded) patch scores at stride 16 for the least-squares game."""

    def __init__(self, width: int = 32):
        super().__init__()
        chans = (width, width * 2, width * 3, width * 3)
        layers: list[nn.Module] = []
        prev = 3
        for ch in chans:
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            prev = ch
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        _check_divisible(x, PATCH_STRIDE, "discriminate_image")
        return self.net(x)


# ---------------------------------------------------------------------------
# frozen feature extractor
# ---------------------------------------------------------------------------


@dataclass
class FeatureStack:
    """Ordered rectified activations at strides (1, 2, 4, 8, 16)."""

    layers: list[torch.Tensor]

    def __post_init__(self):
        if len(self.layers) != len(EXTRACTOR_STRIDES):
            raise ShapeError(f"expected {len(EXTRACTOR_STRIDES)} taps, got {len(self.layers)}")

    def channel_counts(self) -> list[int]:
        return [int(t.shape[1]) for t in self.layers]

    def element_counts(self) -> list[int]:
        """Per-sample activation counts C*H*W for each tap."""
        return [int(t.shape[1] * t.shape[2] * t.shape[3]) for t in self.layers]


def default_weights_dir() -> Path:
    env = os.environ.get("STRUTEX_CACHE")
    base = Path(env) if env else Path.home() / ".cache" / "strutex"
    return base


def _generated_extractor_arrays(version: int = EXTRACTOR_VERSION) -> dict[str, np.ndarray]:
    """Fixed-seed He-scaled conv stacks; identical bytes for a given version."""
    rng = np.random.default_rng([version, 613566757])
    arrays: dict[str, np.ndarray] = {"version": np.array([version], dtype=np.int64)}
    prev = 3
    for i, ch in enumerate(_EXTRACTOR_WIDTHS):
        fan_in = prev * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(ch, prev, 3, 3))
        arrays[f"conv{i}.weight"] = w.astype(np.float32)
        arrays[f"conv{i}.bias"] = np.zeros(ch, dtype=np.float32)
        prev = ch
    return arrays


def ensure_extractor_weights(path: Path | None = None) -> Path:
    """Write the versioned frozen-weight file if absent; return its path."""
    if path is None:
        path = default_weights_dir() / f"extractor_v{EXTRACTOR_VERSION}.npz"
    path = Path(path)
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        with open(tmp, "wb") as fh:
            np.savez(fh, **_generated_extractor_arrays())
        os.replace(tmp, path)
    return path


class FeatureExtractor(nn.Module):
    """Frozen 5-tap rectified conv stack used by the perceptual and texture
    metrics. Weights live in buffers, so the module exposes zero trainable
    parameters; real pretrained weights in the same 5-tap layout can be
    supplied through ``weights``.
    """

    def __init__(self, weights: dict[str, np.ndarray] | None = None):
        super().__init__()
        if weights is None:
            weights = dict(np.load(ensure_extractor_weights()))
        version = int(np.asarray(weights.get("version", [EXTRACTOR_VERSION]))[0])
        if version != EXTRACTOR_VERSION:
            raise CheckpointError(f"extractor weight version {version} != {EXTRACTOR_VERSION}")
        self.n_taps = len(EXTRACTOR_STRIDES)
        for i in range(self.n_taps):
            try:
                w = torch.as_tensor(weights[f"conv{i}.weight"], dtype=torch.float32)
                b = torch.as_tensor(weights[f"conv{i}.bias"], dtype=torch.float32)
            except KeyError as e:
                raise CheckpointError(f"extractor weights missing {e.args[0]!r}") from None
            self.register_buffer(f"w{i}", w)
            self.register_buffer(f"b{i}", b)

    def forward(self, x: torch.Tensor) -> FeatureStack:
        taps = []
        h = x
        for i in range(self.n_taps):
            w = getattr(self, f"w{i}").to(x.dtype)
            b = getattr(self, f"b{i}").to(x.dtype)
            h = F.relu(F.conv2d(h, w, b, stride=1 if i == 0 else 2, padding=1))
            taps.append(h)
        return FeatureStack(taps)


_default_extractor: FeatureExtractor | None = None


def default_extractor() -> FeatureExtractor:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = FeatureExtractor()
    return _default_extractor


def extract_features(x: torch.Tensor, extractor: FeatureExtractor | None = None) -> FeatureStack:
    return (extractor or default_extractor())(x)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


class DISEModel(nn.Module):
    """All eight trainable sub-networks under their checkpoint group names."""

    def __init__(self, num_classes: int, width: int = 64, z_dim: int = TEXTURE_DIM):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.z_dim = z_dim
        self.E_c = CommonEncoder(width)
        self.E_p_s = PrivateEncoder(z_dim)
        self.E_p_t = PrivateEncoder(z_dim)
        self.D = Decoder(width, z_dim)
        self.T = Classifier(num_classes, width)
        self.D_seg = SegPatchDiscriminator(num_classes)
        self.D_img_s = ImagePatchDiscriminator()
        self.D_img_t = ImagePatchDiscriminator()

    # --- the operations -----------------------------------------------

    def encode_common(self, x):
        return self.E_c(x)

    def encode_private(self, x, domain: str):
        if domain == SOURCE:
            return self.E_p_s(x)
        if domain == TARGET:
            return self.E_p_t(x)
        raise ValueError(f"unknown domain {domain!r}")

    def decode(self, z_c, z_p, flag: str):
        return self.D(z_c, z_p, flag)

    def classify(self, z_c, out_size: tuple[int, int]):
        return self.T(z_c, out_size)

    def discriminate_seg(self, probs):
        return self.D_seg(probs)

    def discriminate_image(self, x, domain: str):
        if domain == SOURCE:
            return self.D_img_s(x)
        if domain == TARGET:
            return self.D_img_t(x)
        raise ValueError(f"unknown domain {domain!r}")

    def predict(self, x):
        """Convenience: class probabilities at input resolution."""
        scores = self.classify(self.encode_common(x), x.shape[-2:])
        return torch.softmax(scores, dim=1)

    # --- grouping helpers ----------------------------------------------

    def groups(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in GROUP_NAMES}

    def generator_modules(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in GENERATOR_GROUPS}

    def discriminator_modules(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in DISCRIMINATOR_GROUPS}


def build_model(num_classes: int, width: int = 64, z_dim: int = TEXTURE_DIM, seed: int = 0) -> DISEModel:
    """Construct a DISEModel with seeded parameter initialization."""
    torch.manual_seed(seed)
    return DISEModel(num_classes, width=width, z_dim=z_dim)
