"""Network definitions, initialization and forward evaluation.

Four networks are involved:

* the decomposition U-Net (3 -> 4 channels, split into R and I),
* the enhancement U-Net (R and I concatenated, 4 -> 1 channel),
* the degradation-aware feature CNN, used only while training the decomposer,
* a VGG16 convolutional stack used as a fixed perceptual feature extractor.

Parameters live in a :class:`WeightStore`, a flat name -> float32 tensor
mapping plus string metadata. ``meta["arch_hash"]`` identifies the
architecture a store belongs to.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import IncompatibleCheckpointError, PaddingError, ShapeError, WeightLoadError

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2

DEFAULT_LADDER = (32, 64, 128, 256, 128, 64, 32)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# torchvision's VGG16 "features" layout; "M" is a 2x2 max-pool.
VGG16_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                512, 512, 512, "M", 512, 512, 512, "M")


def _hash(kind: str, payload: dict) -> str:
    blob = json.dumps({"kind": kind, **payload}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 4
    channel_ladder: Tuple[int, ...] = DEFAULT_LADDER
    kernel_size: int = 3
    skip_connections: bool = True
    kind: str = "decomposer"

    def __post_init__(self):
        ladder = tuple(self.channel_ladder)
        object.__setattr__(self, "channel_ladder", ladder)
        n = len(ladder)
        if n % 2 == 0 or n < 1:
            raise ValueError(f"channel ladder must have odd length, got {ladder}")
        mid = n // 2
        if ladder != ladder[::-1] or ladder[mid] != max(ladder):
            raise ValueError(f"channel ladder must be palindromic around its maximum: {ladder}")

    @property
    def stages(self) -> int:
        return (len(self.channel_ladder) - 1) // 2

    @property
    def multiple(self) -> int:
        return 2**self.stages

    def arch_hash(self) -> str:
        return _hash(self.kind, asdict(self))

    @classmethod
    def decomposer(cls, ladder=DEFAULT_LADDER):
        return cls(3, 4, tuple(ladder), kind="decomposer")

    @classmethod
    def enhancer(cls, ladder=DEFAULT_LADDER):
        return cls(4, 1, tuple(ladder), kind="enhancer")


@dataclass(frozen=True)
class DAConfig:
    in_channels: int = 3
    channels: int = 64
    blocks: int = 4
    kernel_size: int = 3
    kind: str = "da_cnn"

    def arch_hash(self) -> str:
        return _hash(self.kind, asdict(self))

    @property
    def receptive_field(self) -> int:
        return 1 + self.blocks * (self.kernel_size - 1)


@dataclass(frozen=True)
class VGGConfig:
    # number of leading layers of the conv stack to keep (31 = through the last pool)
    layer: int = 31
    kind: str = "vgg16"

    def arch_hash(self) -> str:
        # the truncation point does not change which parameters exist
        return _hash(self.kind, {})


NetConfig = Union[UNetConfig, DAConfig, VGGConfig]


@dataclass
class WeightStore:
    entries: Dict[str, torch.Tensor]
    meta: Dict[str, str] = field(default_factory=dict)

    def clone(self) -> "WeightStore":
        return WeightStore(
            {k: v.detach().clone() for k, v in self.entries.items()}, dict(self.meta)
        )

    def equal(self, other: "WeightStore") -> bool:
        if list(self.entries) != list(other.entries) or self.meta != other.meta:
            return False
        return all(
            self.entries[k].dtype == other.entries[k].dtype
            and torch.equal(self.entries[k], other.entries[k])
            for k in self.entries
        )

    def numel(self) -> int:
        return sum(v.numel() for v in self.entries.values())

    @property
    def arch_hash(self) -> str:
        return self.meta.get("arch_hash", "")


# ---------------------------------------------------------------------------
# modules


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _act(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


class UNet(nn.Module):
    """Encoder/decoder with stride-2 downsampling and nearest-neighbour upsampling.

    Each scale holds two 3x3 convolutions; the encoder's first conv at a new
    scale is the strided one. Decoder stages upsample, convolve, concatenate
    the matching encoder feature map and apply two more convolutions. The
    head is a plain conv (no activation); callers apply the sigmoid.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        k = config.kernel_size
        widths = config.channel_ladder[: config.stages + 1]
        self.inc = nn.ModuleList([_conv(config.in_channels, widths[0], k), _conv(widths[0], widths[0], k)])
        self.down = nn.ModuleList(
            nn.ModuleList([_conv(widths[i], widths[i + 1], k, stride=2), _conv(widths[i + 1], widths[i + 1], k)])
            for i in range(config.stages)
        )
        self.up = nn.ModuleList()
        for i in reversed(range(config.stages)):
            cat = 2 * widths[i] if config.skip_connections else widths[i]
            self.up.append(
                nn.ModuleList([_conv(widths[i + 1], widths[i], k), _conv(cat, widths[i], k), _conv(widths[i], widths[i], k)])
            )
        self.head = _conv(widths[0], config.out_channels, k)

    def forward(self, x):
        m = self.config.multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise PaddingError(
                f"spatial size {tuple(x.shape[-2:])} is not a multiple of {m}; pad first"
            )
        for conv in self.inc:
            x = _act(conv(x))
        skips = []
        for strided, conv in self.down:
            skips.append(x)
            x = _act(conv(_act(strided(x))))
        for (upconv, conv1, conv2), skip in zip(self.up, reversed(skips)):
            x = _act(upconv(F.interpolate(x, scale_factor=2, mode="nearest")))
            if self.config.skip_connections:
                x = torch.cat([x, skip], dim=1)
            x = _act(conv2(_act(conv1(x))))
        return self.head(x)


class DecompositionNet(UNet):
    def forward(self, s):
        out = super().forward(s)
        return torch.sigmoid(out[:, :3]), torch.sigmoid(out[:, 3:4])


class EnhancementNet(UNet):
    def forward(self, r, i):
        if r.shape[-2:] != i.shape[-2:]:
            raise ShapeError(f"reflectance {tuple(r.shape)} and illumination {tuple(i.shape)} differ spatially")
        return torch.sigmoid(super().forward(torch.cat([r, i], dim=1)))


class DACNN(nn.Module):
    """Stacked 3x3 conv blocks at full resolution (no pooling)."""

    def __init__(self, config: DAConfig = DAConfig()):
        super().__init__()
        self.config = config
        chans = [config.in_channels] + [config.channels] * config.blocks
        self.blocks = nn.ModuleList(
            _conv(chans[i], chans[i + 1], config.kernel_size) for i in range(config.blocks)
        )

    def forward(self, r):
        x = r
        for conv in self.blocks:
            x = _act(conv(x))
        return x


class VGG16Features(nn.Module):
    """VGG16 conv stack laid out exactly like torchvision's ``features``.

    Parameter names are therefore ``features.<index>.weight|bias``; see
    ``docs/vgg16_weights.md`` for the mapping from other naming schemes.
    """

    def __init__(self, config: VGGConfig = VGGConfig()):
        super().__init__()
        self.config = config
        layers, cin = [], 3
        for v in VGG16_LAYOUT:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(cin, v, 3, padding=1), nn.ReLU(inplace=False)]
                cin = v
        self.features = nn.Sequential(*layers)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, img):
        x = (img - self.mean.to(img.dtype)) / self.std.to(img.dtype)
        for layer in self.features[: self.config.layer]:
            x = layer(x)
        return x


_MODULES = {
    "decomposer": DecompositionNet,
    "enhancer": EnhancementNet,
    "da_cnn": DACNN,
    "vgg16": VGG16Features,
}


def build_module(config: NetConfig) -> nn.Module:
    if isinstance(config, UNetConfig):
        return _MODULES[config.kind](config)
    if isinstance(config, DAConfig):
        return DACNN(config)
    if isinstance(config, VGGConfig):
        return VGG16Features(config)
    raise TypeError(f"unknown network config {config!r}")


def config_to_meta(config: NetConfig) -> Dict[str, str]:
    return {
        "arch": config.kind,
        "arch_hash": config.arch_hash(),
        "config": json.dumps(asdict(config), sort_keys=True),
    }


def config_from_meta(meta: Dict[str, str]) -> NetConfig:
    kind = meta.get("arch")
    raw = json.loads(meta.get("config", "{}"))
    if kind in ("decomposer", "enhancer"):
        raw["channel_ladder"] = tuple(raw["channel_ladder"])
        return UNetConfig(**raw)
    if kind == "da_cnn":
        return DAConfig(**raw)
    if kind == "vgg16":
        return VGGConfig(**raw)
    raise IncompatibleCheckpointError(f"checkpoint does not describe a known network (arch={kind!r})")


def require_compatible(store: WeightStore, config: NetConfig) -> None:
    if store.arch_hash != config.arch_hash():
        raise IncompatibleCheckpointError(
            f"checkpoint built for {store.meta.get('arch', '?')} "
            f"(hash {store.arch_hash or 'missing'}) cannot be used as {config.kind} "
            f"(hash {config.arch_hash()})"
        )


def store_from_module(module: nn.Module, config: NetConfig, **meta) -> WeightStore:
    entries = {k: v.detach().to(torch.float32).clone().contiguous() for k, v in module.state_dict().items()}
    m = config_to_meta(config)
    m.update({k: str(v) for k, v in meta.items()})
    return WeightStore(entries, m)


def module_from_store(store: WeightStore, config: NetConfig = None) -> nn.Module:
    """Instantiate the network a store belongs to and load its parameters."""
    if config is None:
        config = config_from_meta(store.meta)
    else:
        require_compatible(store, config)
    module = build_module(config)
    expected = module.state_dict()
    missing = set(expected) - set(store.entries)
    extra = set(store.entries) - set(expected)
    if missing or extra:
        raise IncompatibleCheckpointError(
            f"parameter names differ: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
        )
    for k, v in expected.items():
        if tuple(store.entries[k].shape) != tuple(v.shape):
            raise IncompatibleCheckpointError(
                f"{k}: checkpoint shape {tuple(store.entries[k].shape)} != {tuple(v.shape)}"
            )
    module.load_state_dict(store.entries)
    module.eval()
    return module


def init_weights(config: NetConfig, seed: int) -> WeightStore:
    """He (fan-in) normal initialization for conv kernels, zero biases."""
    module = build_module(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.copy_(torch.randn(p.shape, generator=gen) * np.sqrt(2.0 / fan_in))
    return store_from_module(module, config, seed=seed, pretrained="false" if config.kind == "vgg16" else "")


# ---------------------------------------------------------------------------
# numpy-level forward passes


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) array -> (1, C, H, W) tensor."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) tensor -> (H, W, C) float64 array."""
    return t.detach()[0].permute(1, 2, 0).to(torch.float64).cpu().numpy()


def _forward(store, config, *inputs):
    module = module_from_store(store, config)
    with torch.no_grad():
        return module(*inputs)


def decompose(weights: WeightStore, S: np.ndarray):
    """Split an ``(H, W, 3)`` image into reflectance ``(H, W, 3)`` and illumination ``(H, W, 1)``.

    H and W must be multiples of 8 (see :func:`pad_to_multiple`).
    """
    S = np.asarray(S)
    if S.ndim != 3 or S.shape[2] != 3:
        raise ShapeError(f"decompose expects H x W x 3, got {S.shape}")
    R, I = _forward(weights, config_from_meta(weights.meta) if weights.meta.get("arch") == "decomposer"
                    else UNetConfig.decomposer(), to_tensor(S))
    return to_numpy(R), to_numpy(I)


def enhance(weights: WeightStore, R: np.ndarray, I: np.ndarray) -> np.ndarray:
    R, I = np.asarray(R), np.asarray(I)
    if I.ndim == 2:
        I = I[..., None]
    if R.shape[:2] != I.shape[:2]:
        raise ShapeError(f"reflectance {R.shape} and illumination {I.shape} differ spatially")
    config = config_from_meta(weights.meta) if weights.meta.get("arch") == "enhancer" else UNetConfig.enhancer()
    return to_numpy(_forward(weights, config, to_tensor(R), to_tensor(I)))


def da_features(weights: WeightStore, R: np.ndarray) -> np.ndarray:
    R = np.asarray(R)
    if R.ndim != 3 or R.shape[2] != 3:
        raise ShapeError(f"da_features expects H x W x 3, got {R.shape}")
    config = config_from_meta(weights.meta) if weights.meta.get("arch") == "da_cnn" else DAConfig()
    return to_numpy(_forward(weights, config, to_tensor(R)))


def vgg16_features(weights: WeightStore, img: np.ndarray, layer: int = 31) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"vgg16_features expects H x W x 3, got {img.shape}")
    return to_numpy(_forward(weights, VGGConfig(layer=layer), to_tensor(img)))


# ---------------------------------------------------------------------------
# pretrained VGG16 weights

# Caffe / Keras style block names -> torchvision feature indices.
VGG16_NAME_MAP = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14,
    "conv4_1": 17, "conv4_2": 19, "conv4_3": 21,
    "conv5_1": 24, "conv5_2": 26, "conv5_3": 28,
}


def _canonical_vgg_name(name: str):
    name = name.replace("/", ".").replace(":0", "")
    if name.startswith("features."):
        return name
    for prefix in ("vgg16.", "model.", "module."):
        if name.startswith(prefix):
            return _canonical_vgg_name(name[len(prefix):])
    for block, idx in VGG16_NAME_MAP.items():
        keras = block.replace("conv", "block").replace("_", "_conv")  # conv1_1 -> block1_conv1
        for stem in (block, keras):
            if name.startswith(stem + "."):
                suffix = name[len(stem) + 1:]
                suffix = {"kernel": "weight", "w": "weight", "b": "bias"}.get(suffix, suffix)
                return f"features.{idx}.{suffix}"
    return None


def load_vgg16_weights(path) -> WeightStore:
    """Read pretrained VGG16 conv weights from ``.npz``, torch ``.pth`` or a checkpoint archive.

    Classifier tensors are ignored. Kernels stored as (kh, kw, in, out), the
    Keras layout, are transposed. Raises :class:`WeightLoadError` when any
    conv tensor is missing or mis-shaped.
    """
    from .checkpoint import load_checkpoint, is_checkpoint

    path = str(path)
    try:
        if is_checkpoint(path):
            raw = dict(load_checkpoint(path).entries)
        elif path.endswith(".npz"):
            with np.load(path) as z:
                raw = {k: torch.from_numpy(z[k]) for k in z.files}
        else:
            raw = torch.load(path, map_location="cpu", weights_only=True)
            if isinstance(raw, dict) and "state_dict" in raw:
                raw = raw["state_dict"]
    except (OSError, ValueError, RuntimeError) as exc:
        raise WeightLoadError(f"cannot read VGG16 weights from {path}: {exc}") from exc

    template = VGG16Features().state_dict()
    entries = {}
    for name, value in raw.items():
        canon = _canonical_vgg_name(name)
        if canon in template:
            t = torch.as_tensor(value).to(torch.float32)
            want = template[canon].shape
            if t.ndim == 4 and t.shape != want and t.permute(3, 2, 0, 1).shape == want:
                t = t.permute(3, 2, 0, 1)
            if t.shape != want:
                raise WeightLoadError(f"{name}: shape {tuple(t.shape)} != expected {tuple(want)}")
            entries[canon] = t.contiguous()
    missing = [k for k in template if k not in entries]
    if missing:
        raise WeightLoadError(f"VGG16 weights in {path} lack {len(missing)} tensors, e.g. {missing[:3]}")
    meta = config_to_meta(VGGConfig())
    meta["pretrained"] = "true"
    meta["source"] = path
    return WeightStore({k: entries[k] for k in template}, meta)


def vgg16_store(path=None, seed: int = 0) -> WeightStore:
    """Pretrained weights when ``path`` is given, otherwise a seeded random stack."""
    if path:
        return load_vgg16_weights(path)
    log.warning("no pretrained VGG16 weights supplied; perceptual loss uses random features (seed %d)", seed)
    return init_weights(VGGConfig(), seed)


# ---------------------------------------------------------------------------
# padding


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int


def pad_to_multiple(img: np.ndarray, m: int = 8):
    """Reflect-pad bottom/right so H and W become multiples of ``m``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    img = np.asarray(img)
    h, w = img.shape[:2]
    ph, pw = (-h) % m, (-w) % m
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
    if ph or pw:
        # numpy cannot reflect a length-1 axis
        mode = "reflect" if min(h if ph else 2, w if pw else 2) > 1 else "symmetric"
        img = np.pad(img, widths, mode=mode)
    return img, CropRecord(h, w)


def crop_back(img: np.ndarray, record: CropRecord) -> np.ndarray:
    return np.asarray(img)[: record.height, : record.width]
