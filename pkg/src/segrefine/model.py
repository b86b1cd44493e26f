"""End-to-end segmentation network: four-stage backbone, a pluggable
context head over the concatenated stages, an FPN-style decoder, and a
training-only embedding head.
"""

from __future__ import annotations

import struct

import numpy as np

from .baselines import DappmHead, PpmHead
from .config import ConfigError, ModelConfig
from .layers import BatchNorm2d, Conv2d, ConvBnRelu, Module, bilinear_upsample
from .refine import FeaturePyramid, FeatureRefineHead
from .tensor import ContractError, FormatError, Tensor, load_array, save_array


class Backbone(Module):
    """Stem at stride 4 plus three downsampling stages (conv3x3+BN+ReLU)."""

    def __init__(self, channels, rng=None):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stem_a = ConvBnRelu(3, c1, stride=2, rng=rng)
        self.stem_b = ConvBnRelu(c1, c1, stride=2, rng=rng)
        self.stage2_down = ConvBnRelu(c1, c2, stride=2, rng=rng)
        self.stage2 = ConvBnRelu(c2, c2, rng=rng)
        self.stage3_down = ConvBnRelu(c2, c3, stride=2, rng=rng)
        self.stage3 = ConvBnRelu(c3, c3, rng=rng)
        self.stage4_down = ConvBnRelu(c3, c4, stride=2, rng=rng)
        self.stage4 = ConvBnRelu(c4, c4, rng=rng)

    def forward(self, image: Tensor) -> FeaturePyramid:
        n, c, h, w = image.shape
        if c != 3 or h < 32 or w < 32:
            raise ContractError(f"backbone expects Nx3xHxW with H,W >= 32, got {image.shape}")
        f1 = self.stem_b(self.stem_a(image))
        f2 = self.stage2(self.stage2_down(f1))
        f3 = self.stage3(self.stage3_down(f2))
        f4 = self.stage4(self.stage4_down(f3))
        return FeaturePyramid(f1, f2, f3, f4)


class FpnDecoder(Module):
    """Lateral 1x1 convs, top-down addition, 3x3 smoothing, classifier."""

    def __init__(self, channels, width, num_classes, rng=None):
        super().__init__()
        c1, c2, c3, _ = channels
        self.width = width
        self.lateral3 = Conv2d(c3, width, 1, rng=rng)
        self.lateral2 = Conv2d(c2, width, 1, rng=rng)
        self.lateral1 = Conv2d(c1, width, 1, rng=rng)
        self.smooth3 = ConvBnRelu(width, width, rng=rng)
        self.smooth2 = ConvBnRelu(width, width, rng=rng)
        self.smooth1 = ConvBnRelu(width, width, rng=rng)
        self.classifier = Conv2d(width, num_classes, 1, rng=rng)

    def forward(self, p: FeaturePyramid, context: Tensor, out_h, out_w):
        """Returns (full-resolution logits, stride-4 decoder features)."""
        p3 = self.smooth3(self.lateral3(p.f3) + bilinear_upsample(context, *p.f3.shape[2:]))
        p2 = self.smooth2(self.lateral2(p.f2) + bilinear_upsample(p3, *p.f2.shape[2:]))
        p1 = self.smooth1(self.lateral1(p.f1) + bilinear_upsample(p2, *p.f1.shape[2:]))
        logits = bilinear_upsample(self.classifier(p1), out_h, out_w)
        return logits, p1


def build_context_head(cfg: ModelConfig, rng=None):
    if cfg.context_head == "frm":
        return FeatureRefineHead(
            cfg.channels, cfg.decoder_channels, ffn_expansion=cfg.ffn_expansion, rng=rng
        )
    if cfg.context_head == "ppm":
        return PpmHead(cfg.channels, cfg.decoder_channels, bins=cfg.ppm_bins, rng=rng)
    if cfg.context_head == "dappm":
        return DappmHead(cfg.channels, cfg.decoder_channels, scales=cfg.dappm_scales, rng=rng)
    raise ConfigError(f"unknown context head {cfg.context_head!r}")


class SegModel(Module):
    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.backbone = Backbone(cfg.channels, rng=rng)
        self.context_head = build_context_head(cfg, rng=rng)
        self.decoder = FpnDecoder(cfg.channels, cfg.decoder_channels, cfg.num_classes, rng=rng)
        self.embedding_head = Conv2d(cfg.decoder_channels, cfg.embed_dim, 1, rng=rng)

    def forward(self, image: Tensor, train_mode=None):
        """Returns {"logits": ...} and, in training mode, {"embeddings": ...}.

        The embedding head never executes at inference time.
        """
        if train_mode is None:
            train_mode = self.training
        pyramid = self.backbone(image)
        context = self.context_head(pyramid)
        logits, feats = self.decoder(pyramid, context, image.shape[2], image.shape[3])
        out = {"logits": logits}
        if train_mode:
            out["embeddings"] = self.embedding_head(feats)
        return out


# ---------------------------------------------------------------------------
# Checkpoints: a key=value config header followed by named FRMT tensors.

_CKPT_MAGIC = b"SRCP"


def _state_arrays(model: SegModel):
    items = [(name, p.data) for name, p in model.named_parameters()]
    for path, child in model.named_children():
        if isinstance(child, BatchNorm2d):
            items.append((path + ".running_mean", child.running_mean))
            items.append((path + ".running_var", child.running_var))
    return items


def save_checkpoint(path, model: SegModel, extra=None):
    cfg = model.cfg
    header = {
        "channels": ",".join(str(c) for c in cfg.channels),
        "decoder_channels": cfg.decoder_channels,
        "num_classes": cfg.num_classes,
        "context_head": cfg.context_head,
        "ffn_expansion": cfg.ffn_expansion,
        "ppm_bins": ",".join(str(b) for b in cfg.ppm_bins),
        "dappm_scales": ",".join(str(s) for s in cfg.dappm_scales),
        "embed_dim": cfg.embed_dim,
    }
    header.update(extra or {})
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        for name, arr in _state_arrays(model):
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            save_array(f, arr)


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<I", f.read(4))
        text = f.read(length).decode("utf-8")
    header = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            header[k] = v
    return header


def model_config_from_header(header):
    return ModelConfig(
        channels=tuple(int(c) for c in header["channels"].split(",")),
        decoder_channels=int(header["decoder_channels"]),
        num_classes=int(header["num_classes"]),
        context_head=header["context_head"],
        ffn_expansion=int(header["ffn_expansion"]),
        ppm_bins=tuple(int(b) for b in header["ppm_bins"].split(",")),
        dappm_scales=tuple(int(s) for s in header["dappm_scales"].split(",")),
        embed_dim=int(header["embed_dim"]),
    )


def load_checkpoint(path):
    """Rebuild the model from the header and load every named tensor."""
    header = read_checkpoint_header(path)
    model = SegModel(model_config_from_header(header))
    expected = dict(_state_arrays(model))
    targets = {name: p for name, p in model.named_parameters()}
    buffers = {}
    for bpath, child in model.named_children():
        if isinstance(child, BatchNorm2d):
            buffers[bpath + ".running_mean"] = (child, "running_mean")
            buffers[bpath + ".running_var"] = (child, "running_var")
    with open(path, "rb") as f:
        f.read(4)
        (length,) = struct.unpack("<I", f.read(4))
        f.read(length)
        loaded = set()
        while True:
            raw = f.read(4)
            if not raw:
                break
            (nlen,) = struct.unpack("<I", raw)
            name = f.read(nlen).decode("utf-8")
            arr = load_array(f, name=name)
            if name not in expected:
                raise FormatError(f"{path}: unexpected tensor {name!r}")
            if arr.shape != expected[name].shape:
                raise FormatError(
                    f"{path}: shape mismatch for {name}: {arr.shape} vs {expected[name].shape}"
                )
            if name in targets:
                targets[name].data = arr
            else:
                child, attr = buffers[name]
                setattr(child, attr, arr)
            loaded.add(name)
    missing = set(expected) - loaded
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:3]}...")
    return model, header
