"""Residual U-Net backbone, combined cross-entropy + Dice loss, and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import InvalidArgumentError, ProbMap

PROB_FLOOR = 1e-7
DICE_EPS = 1e-6


class ConfigError(ValueError):
    pass


class IntegrityError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 5
    root_features: int = 16
    classes: int = 2
    dropout_rate: float = 0.25
    input_size: int = 128
    in_channels: int = 3

    def validate(self):
        if self.depth < 1 or self.root_features < 1 or self.classes < 2:
            raise ConfigError(f"invalid backbone config {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.input_size % 2 ** (self.depth - 1):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2^(depth-1) = {2 ** (self.depth - 1)}")
        return self


class ResidualBlock(nn.Module):
    """conv3x3 -> relu -> conv3x3, plus shortcut (1x1 projection if widths differ), -> relu."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))) + self.shortcut(x))


class ResUNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.root_features
        widths = [f * 2 ** level for level in range(cfg.depth)]
        self.encoders = nn.ModuleList(
            ResidualBlock(cfg.in_channels if i == 0 else widths[i - 1], widths[i]) for i in range(cfg.depth))
        self.upconvs = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in range(cfg.depth - 1))
        self.decoders = nn.ModuleList(ResidualBlock(2 * widths[i], widths[i]) for i in range(cfg.depth - 1))
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.head = nn.Conv2d(widths[0], cfg.classes, 1)

    def set_dropout(self, rate):
        self.dropout.p = float(rate)

    def logits(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            x = self.dropout(enc(x))
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for i in reversed(range(len(self.decoders))):
            x = torch.cat([self.upconvs[i](x), skips[i]], dim=1)
            x = self.dropout(self.decoders[i](x))
        return self.head(x)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def build_backbone(cfg: BackboneConfig, seed=0):
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ResUNet(cfg)


def combined_loss(pred, target, ce_weight=0.5, dice_weight=0.5, foreground_class=1):
    """``ce_weight * CE + dice_weight * (1 - softDice)`` for (N, C, H, W) probabilities.

    CE is the mean over pixels of ``-sum_c t_c log p_c``; soft Dice uses the foreground
    channel summed over the whole batch. Targets may be soft.
    """
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    ce = -(target * torch.log(pred.clamp_min(PROB_FLOOR))).sum(dim=1).mean()
    p_fg = pred[:, foreground_class]
    t_fg = target[:, foreground_class]
    dice = (2.0 * (p_fg * t_fg).sum() + DICE_EPS) / (p_fg.sum() + t_fg.sum() + DICE_EPS)
    return ce_weight * ce + dice_weight * (1.0 - dice)


def images_to_tensor(images, dtype=torch.float32):
    arr = np.stack([np.asarray(im.values, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


def as_predictor(net, batch_size=16):
    """Wrap a network as ``f(list[RasterImage]) -> list[ProbMap]`` (eval mode, no grad).

    Callables that are not ``nn.Module`` are returned unchanged.
    """
    if not isinstance(net, nn.Module):
        return net

    def predict(images):
        was_training = net.training
        net.eval()
        out = []
        dtype = next(net.parameters()).dtype
        try:
            with torch.no_grad():
                for s in range(0, len(images), batch_size):
                    probs = net(images_to_tensor(images[s:s + batch_size], dtype))
                    out.extend(ProbMap(p) for p in probs.permute(0, 2, 3, 1).float().numpy())
        finally:
            net.train(was_training)
        return out

    return predict


@dataclass
class ModelCheckpoint:
    parameters: dict
    config: BackboneConfig
    lineage: dict = field(default_factory=dict)
    training_meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, net, lineage=None, training_meta=None):
        state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        return cls(state, net.cfg, dict(lineage or {}), dict(training_meta or {}))

    def to_model(self):
        net = ResUNet(self.config)
        net.load_state_dict(self.parameters)
        return net

    @property
    def name(self):
        lv, idx = self.lineage.get("level_index"), self.lineage.get("submodel_index")
        return "M0" if lv == 0 else f"M{lv}.{idx}"


def copy_model(src: ModelCheckpoint, lineage=None):
    """Parameter-identical copy of ``src`` with new lineage (parent = ``src``)."""
    if not isinstance(src.parameters, dict) or not src.parameters:
        raise IntegrityError("source checkpoint has no parameters")
    new = dict(lineage or {})
    new.setdefault("parent", src.name)
    return ModelCheckpoint(
        {k: v.clone() for k, v in src.parameters.items()}, src.config, new, {})


def save_checkpoint(ckpt: ModelCheckpoint, path):
    """Write ``path`` (weights blob) and ``path + '.json'`` (config, lineage, meta, sha256)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(ckpt.parameters, buf)
    blob = buf.getvalue()
    path.write_bytes(blob)
    meta = {
        "config": asdict(ckpt.config),
        "lineage": ckpt.lineage,
        "training_meta": ckpt.training_meta,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_checkpoint(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
        meta = json.loads(Path(str(path) + ".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != meta.get("sha256"):
        raise IntegrityError(f"checkpoint {path} failed its checksum")
    try:
        params = torch.load(io.BytesIO(blob), weights_only=True)
        cfg = BackboneConfig(**meta["config"])
    except Exception as exc:
        raise IntegrityError(f"checkpoint {path} is corrupt: {exc}") from exc
    return ModelCheckpoint(params, cfg, meta.get("lineage", {}), meta.get("training_meta", {}))


def parameters_equal(a: ModelCheckpoint, b: ModelCheckpoint):
    return a.parameters.keys() == b.parameters.keys() and all(
        torch.equal(a.parameters[k], b.parameters[k]) for k in a.parameters)
