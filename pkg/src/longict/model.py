"""Fully convolutional DenseNet backbone with interchangeable heads.

Five dense-block + transition-down stages, a bottleneck dense block, and five
transition-up + dense-block stages with skip concatenation. Heads: restoration
(1 channel through a sigmoid), segmentation (4-class logits), classification
(2 logits from the globally pooled bottleneck through a single linear layer;
this variant has no upsampling path at all).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

N_TRANSITIONS = 5
DOWNSAMPLE_FACTOR = 2 ** N_TRANSITIONS

HEAD_RESTORATION = "restoration"
HEAD_SEGMENTATION = "segmentation"
HEAD_CLASSIFICATION = "classification"
HEAD_CHANNELS = {HEAD_RESTORATION: 1, HEAD_SEGMENTATION: 4, HEAD_CLASSIFICATION: 2}

CHECKPOINT_VERSION = 1

ENCODER_PREFIXES = ("stem.", "down_blocks.", "trans_downs.", "bottleneck.")


@dataclass
class ModelConfig:
    in_channels: int = 2
    growth_rate: int = 12
    layers_per_block: int = 4
    initial_features: int = 48
    head: str = HEAD_RESTORATION
    dropout: float = 0.2

    def __post_init__(self):
        if self.in_channels not in (1, 2):
            raise ValueError(f"in_channels must be 1 (static) or 2 (longitudinal), got {self.in_channels}")
        if self.head not in HEAD_CHANNELS:
            raise ValueError(f"head must be one of {sorted(HEAD_CHANNELS)}, got {self.head!r}")
        if min(self.growth_rate, self.layers_per_block, self.initial_features) < 1:
            raise ValueError("growth_rate, layers_per_block and initial_features must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def out_channels(self) -> int:
        return HEAD_CHANNELS[self.head]

    def trunk_signature(self) -> tuple:
        return (self.in_channels, self.growth_rate, self.layers_per_block, self.initial_features)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class DenseLayer(nn.Sequential):
    def __init__(self, in_ch: int, growth: int, dropout: float):
        super().__init__(
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(in_ch, growth, kernel_size=3, padding=1, bias=True),
            nn.Dropout2d(dropout),
        )


class DenseBlock(nn.Module):
    """Stack of dense layers; returns either new features only or input + new."""

    def __init__(self, in_ch: int, growth: int, n_layers: int, dropout: float, concat_input: bool):
        super().__init__()
        self.concat_input = concat_input
        self.layers = nn.ModuleList(
            [DenseLayer(in_ch + i * growth, growth, dropout) for i in range(n_layers)]
        )

    def forward(self, x):
        features = [x]
        new = []
        for layer in self.layers:
            out = layer(torch.cat(features, dim=1))
            features.append(out)
            new.append(out)
        new_cat = torch.cat(new, dim=1)
        if self.concat_input:
            return torch.cat([x, new_cat], dim=1)
        return new_cat


class TransitionDown(nn.Sequential):
    def __init__(self, channels: int, dropout: float):
        super().__init__(
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size=1, bias=True),
            nn.Dropout2d(dropout),
            nn.MaxPool2d(2),
        )


class TransitionUp(nn.ConvTranspose2d):
    def __init__(self, channels: int):
        super().__init__(channels, channels, kernel_size=3, stride=2, padding=1, output_padding=1)


class FcDenseNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        g, k, f0 = config.growth_rate, config.layers_per_block, config.initial_features
        block_growth = k * g

        self.stem = nn.Conv2d(config.in_channels, f0, kernel_size=3, padding=1, bias=True)
        self.down_blocks = nn.ModuleList()
        self.trans_downs = nn.ModuleList()
        ch = f0
        skip_channels = []
        for _ in range(N_TRANSITIONS):
            self.down_blocks.append(DenseBlock(ch, g, k, config.dropout, concat_input=True))
            ch += block_growth
            skip_channels.append(ch)
            self.trans_downs.append(TransitionDown(ch, config.dropout))
        self.bottleneck = DenseBlock(ch, g, k, config.dropout, concat_input=False)
        self.bottleneck_channels = ch + block_growth  # pooled classification input

        if config.head == HEAD_CLASSIFICATION:
            self.head = nn.Linear(self.bottleneck_channels, config.out_channels)
        else:
            self.trans_ups = nn.ModuleList()
            self.up_blocks = nn.ModuleList()
            ch = block_growth
            for stage in range(N_TRANSITIONS):
                self.trans_ups.append(TransitionUp(ch))
                in_ch = ch + skip_channels[N_TRANSITIONS - 1 - stage]
                last = stage == N_TRANSITIONS - 1
                self.up_blocks.append(DenseBlock(in_ch, g, k, config.dropout, concat_input=last))
                ch = in_ch + block_growth if last else block_growth
            self.head = nn.Conv2d(ch, config.out_channels, kernel_size=1, bias=True)

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected input of shape (N, {self.config.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if x.shape[2] % DOWNSAMPLE_FACTOR or x.shape[3] % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"spatial dims must be divisible by {DOWNSAMPLE_FACTOR}, got {tuple(x.shape[2:])}"
            )

    def encode(self, x):
        self._check_input(x)
        out = self.stem(x)
        skips = []
        for block, td in zip(self.down_blocks, self.trans_downs):
            out = block(out)
            skips.append(out)
            out = td(out)
        new = self.bottleneck(out)
        bottleneck = torch.cat([out, new], dim=1)
        return bottleneck, new, skips

    def forward(self, x, return_bottleneck: bool = False):
        bottleneck, new, skips = self.encode(x)
        if self.config.head == HEAD_CLASSIFICATION:
            pooled = bottleneck.mean(dim=(2, 3))
            out = self.head(pooled)
        else:
            out = new
            for stage, (tu, block) in enumerate(zip(self.trans_ups, self.up_blocks)):
                out = tu(out)
                out = torch.cat([out, skips[N_TRANSITIONS - 1 - stage]], dim=1)
                out = block(out)
            out = self.head(out)
            if self.config.head == HEAD_RESTORATION:
                out = torch.sigmoid(out)
        if return_bottleneck:
            return out, bottleneck
        return out


def _he_init(module: nn.Module, gen: torch.Generator) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
                if isinstance(m, nn.ConvTranspose2d):
                    fan_in = m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3]
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.Linear):
                m.weight.normal_(0.0, (2.0 / m.weight.shape[1]) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_network(config: ModelConfig, seed: int = 0) -> FcDenseNet:
    """Construct the network with deterministic He-style initialization."""
    net = FcDenseNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    _he_init(net, gen)
    return net


# ---------------------------------------------------------------------------
# Checkpoints and weight transfer
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: ModelConfig
    metadata: dict = field(default_factory=dict)


def network_state(net: FcDenseNet) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().copy() for name, t in net.state_dict().items()}


def checkpoint_from_network(net: FcDenseNet, metadata: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(tensors=network_state(net), config=net.config, metadata=dict(metadata or {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write `<base>.ckpt.npz` (named tensors) + `<base>.ckpt.json` (metadata sidecar)."""
    p = Path(path)
    if not p.name.endswith(".ckpt.npz"):
        raise ValueError(f"checkpoint path must end with '.ckpt.npz', got {p}")
    p.parent.mkdir(parents=True, exist_ok=True)
    np.savez(p, **ckpt.tensors)
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_json(),
        "metadata": ckpt.metadata,
    }
    p.with_name(p.name[: -len(".npz")] + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    sidecar_path = p.with_name(p.name[: -len(".npz")] + ".json")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    version = sidecar.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    with np.load(p) as npz:
        tensors = {k: npz[k] for k in npz.files}
    return Checkpoint(
        tensors=tensors,
        config=ModelConfig.from_json(sidecar["config"]),
        metadata=sidecar.get("metadata", {}),
    )


def load_into_network(ckpt: Checkpoint, net: FcDenseNet) -> None:
    """Restore a full state dict (shapes must match exactly)."""
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()}
    net.load_state_dict(state)


MODE_FULL_TRUNK = "full_trunk"
MODE_ENCODER_ONLY = "encoder_only"


@dataclass
class TransferReport:
    mode: str
    copied: list[str]
    initialized: list[str]


def transfer_weights(source: Checkpoint, target: FcDenseNet, mode: str) -> TransferReport:
    """Copy pretrained weights into ``target``.

    full_trunk copies everything except the head's final projection
    (segmentation finetune); encoder_only copies the down path and the
    bottleneck (classification finetune). Parameters not copied keep their
    fresh initialization.
    """
    if mode not in (MODE_FULL_TRUNK, MODE_ENCODER_ONLY):
        raise ValueError(f"mode must be '{MODE_FULL_TRUNK}' or '{MODE_ENCODER_ONLY}', got {mode!r}")
    if source.config.in_channels != target.config.in_channels:
        raise ValueError(
            f"in_channels mismatch: checkpoint has {source.config.in_channels}, "
            f"target network has {target.config.in_channels} "
            "(static and longitudinal variants are not interchangeable)"
        )
    if source.config.trunk_signature() != target.config.trunk_signature():
        raise ValueError(
            f"trunk hyperparameters differ: {source.config.trunk_signature()} vs "
            f"{target.config.trunk_signature()}"
        )

    if mode == MODE_FULL_TRUNK:
        def eligible(name: str) -> bool:
            return not name.startswith("head.")
    else:
        def eligible(name: str) -> bool:
            return name.startswith(ENCODER_PREFIXES)

    state = target.state_dict()
    copied = set()
    for name, value in source.tensors.items():
        if not eligible(name) or name not in state:
            continue
        tensor = torch.from_numpy(value.copy())
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise ValueError(
                f"shape mismatch for {name}: {tuple(tensor.shape)} vs {tuple(state[name].shape)}"
            )
        state[name] = tensor
        copied.add(name)
    target.load_state_dict(state)
    initialized = [n for n in state if n not in copied]
    return TransferReport(mode=mode, copied=sorted(copied), initialized=sorted(initialized))
