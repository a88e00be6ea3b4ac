"""Encoder-decoder surrogate that maps design conditions to a density field.

Input: 3 channels at 32x32 (design-area mask, x-loads, y-loads) plus a scalar
volume fraction per sample. The encoder compresses to a 4x4 feature map
through three conv/pool stages; the volume fraction is injected as an extra
constant 4x4 channel; the decoder expands back to 32x32, reinforcing the
design conditions at every resolution through spatially-adaptive
denormalization fed by the mask stack (volfrac * mask, x-loads, y-loads).

Variants:
  proposed        batch norm in the encoder + SPADE residual decoder blocks
  proposed-no-bn  SPADE residual decoder blocks only
  yu-baseline     no batch norm, plain conv residual decoder blocks (the mask
                  stack is unused; conditions enter only through the encoder)
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import (
    BatchNorm2d,
    Conv2d,
    MaxPool2,
    PlainResBlock,
    ReLU,
    Sigmoid,
    SpadeResBlock,
    UpsampleNearest2,
    downsample_stride,
    load_checkpoint,
    save_checkpoint,
)
from .nn.layers import LayerShapeError
from .simp import DesignSpec

VARIANTS = ("proposed", "proposed-no-bn", "yu-baseline")


@dataclass(frozen=True)
class ArchitectureConfig:
    variant: str = "proposed"
    encoder_widths: tuple = (32, 64, 128)
    decoder_widths: tuple = (128, 64, 32)
    spade_hidden: int = 64
    grid: int = 32
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise LayerShapeError(f"unknown variant {self.variant!r}, expected {VARIANTS}")

    @property
    def has_bn(self) -> bool:
        return self.variant == "proposed"

    @property
    def has_spade(self) -> bool:
        return self.variant in ("proposed", "proposed-no-bn")

    def canonical_json(self) -> str:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        d.pop("seed")  # weights differ, architecture does not
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        d["encoder_widths"] = tuple(d.get("encoder_widths", (32, 64, 128)))
        d["decoder_widths"] = tuple(d.get("decoder_widths", (128, 64, 32)))
        return cls(**d)


class _EncoderStage:
    def __init__(self, cin, cout, use_bn, rng):
        self.conv = Conv2d(cin, cout, 3, pad=1, rng=rng)
        self.bn = BatchNorm2d(cout) if use_bn else None
        self.relu = ReLU()
        self.pool = MaxPool2()

    def forward(self, x, train):
        x = self.conv.forward(x, train=train)
        if self.bn is not None:
            x = self.bn.forward(x, train=train)
        return self.pool.forward(self.relu.forward(x, train=train), train=train)

    def backward(self, dout):
        d = self.relu.backward(self.pool.backward(dout))
        if self.bn is not None:
            d = self.bn.backward(d)
        return self.conv.backward(d)

    def named_params(self, prefix):
        yield from self.conv.named_params(prefix + "conv.")
        if self.bn is not None:
            yield from self.bn.named_params(prefix + "bn.")

    def named_states(self, prefix):
        if self.bn is not None:
            yield from self.bn.named_states(prefix + "bn.")


class TopoNet:
    """The full surrogate network; a static graph of the layers above."""

    def __init__(self, config: ArchitectureConfig):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0FFEE]))
        c = config

        self.encoder = []
        cin = c.in_channels
        for cout in c.encoder_widths:
            self.encoder.append(_EncoderStage(cin, cout, c.has_bn, rng))
            cin = cout

        bottleneck = c.encoder_widths[-1] + 1  # + volume-fraction plane
        widths = [bottleneck, *c.decoder_widths, c.decoder_widths[-1]]
        self.decoder = []
        for i in range(len(widths) - 1):
            if c.has_spade:
                self.decoder.append(SpadeResBlock(widths[i], widths[i + 1],
                                                  label_channels=c.in_channels,
                                                  hidden=c.spade_hidden, rng=rng))
            else:
                self.decoder.append(PlainResBlock(widths[i], widths[i + 1], rng=rng))
        self.upsamples = [UpsampleNearest2() for _ in range(len(self.decoder) - 1)]
        self.head = Conv2d(c.decoder_widths[-1], 1, 3, pad=1, rng=rng)
        self.sigmoid = Sigmoid()

    # -- parameter plumbing ------------------------------------------------

    def named_params(self):
        for i, stage in enumerate(self.encoder):
            yield from stage.named_params(f"encoder.s{i}.")
        for i, block in enumerate(self.decoder):
            yield from block.named_params(f"decoder.b{i}.")
        yield from self.head.named_params("head.")

    def named_states(self):
        for i, stage in enumerate(self.encoder):
            yield from stage.named_states(f"encoder.s{i}.")
        for i, block in enumerate(self.decoder):
            if hasattr(block, "named_states"):
                yield from block.named_states(f"decoder.b{i}.")

    # -- forward graph -------------------------------------------------------

    def encode(self, x: np.ndarray, train=True) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise LayerShapeError(f"expected (N,{self.config.in_channels},H,W), got {x.shape}")
        for stage in self.encoder:
            x = stage.forward(x, train)
        return x

    @staticmethod
    def inject_volfrac(feat: np.ndarray, volfrac: np.ndarray) -> np.ndarray:
        """Append one constant plane per sample, as the last channel."""
        volfrac = np.asarray(volfrac, dtype=feat.dtype).reshape(-1)
        if volfrac.shape[0] != feat.shape[0]:
            raise LayerShapeError(
                f"{volfrac.shape[0]} volume fractions for batch of {feat.shape[0]}")
        plane = np.broadcast_to(volfrac[:, None, None, None],
                                (feat.shape[0], 1, feat.shape[2], feat.shape[3]))
        return np.concatenate([feat, plane.astype(feat.dtype)], axis=1)

    @staticmethod
    def mask_stack(x: np.ndarray, volfrac: np.ndarray) -> np.ndarray:
        """Condition stack for the decoder: (volfrac * mask, fx, fy)."""
        volfrac = np.asarray(volfrac, dtype=x.dtype).reshape(-1, 1, 1)
        return np.concatenate([(x[:, 0] * volfrac)[:, None], x[:, 1:]], axis=1)

    def decode(self, feat: np.ndarray, mask_stack: np.ndarray, train=True) -> np.ndarray:
        self._stack_cache = []
        h = feat
        for i, block in enumerate(self.decoder):
            factor = mask_stack.shape[-1] // h.shape[-1]
            stack = downsample_stride(mask_stack, factor) if factor > 1 else mask_stack
            self._stack_cache.append(stack)
            h = block.forward(h, stack, train=train)
            if i < len(self.upsamples):
                h = self.upsamples[i].forward(h, train=train)
        return self.sigmoid.forward(self.head.forward(h, train=train), train=train)

    def forward(self, x: np.ndarray, volfrac: np.ndarray, train=True) -> np.ndarray:
        feat = self.encode(x, train=train)
        feat = self.inject_volfrac(feat, volfrac)
        return self.decode(feat, self.mask_stack(x, volfrac), train=train)

    def backward(self, dout: np.ndarray) -> None:
        d = self.head.backward(self.sigmoid.backward(dout))
        for i in range(len(self.decoder) - 1, -1, -1):
            if i < len(self.upsamples):
                d = self.upsamples[i].backward(d)
            d, _ = self.decoder[i].backward(d)
        d = d[:, :-1]  # drop the injected volume-fraction plane
        for stage in reversed(self.encoder):
            d = stage.backward(d)

    # -- persistence ---------------------------------------------------------

    def blobs(self) -> dict:
        out = {name: p.data for name, p in self.named_params()}
        out.update({"state." + name: arr for name, arr in self.named_states()})
        return out

    def save(self, path, meta: dict | None = None) -> None:
        arch_json = self.config.canonical_json()
        save_checkpoint(path, arch_json, self.blobs())
        sidecar = {"architecture": json.loads(arch_json), "seed": self.config.seed}
        sidecar.update(meta or {})
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> tuple["TopoNet", dict]:
        sidecar_path = Path(str(path) + ".json")
        from .nn.checkpoint import CheckpointError
        if not sidecar_path.exists():
            raise CheckpointError(f"missing architecture sidecar {sidecar_path}")
        sidecar = json.loads(sidecar_path.read_text())
        arch = dict(sidecar["architecture"])
        arch["seed"] = sidecar.get("seed", 0)
        config = ArchitectureConfig.from_dict(arch)
        model = cls(config)
        _, blobs = load_checkpoint(path, expected_arch_json=config.canonical_json())
        params = dict(model.named_params())
        states = dict(model.named_states())
        for name, arr in blobs.items():
            if name.startswith("state."):
                target = states[name[len("state."):]]
                target[...] = arr
            else:
                params[name].data = arr.copy()
                params[name].grad = np.zeros_like(params[name].data)
        return model, sidecar


def spec_to_input(spec: DesignSpec):
    """(1,3,32,32) input tensor and (1,) volfrac vector for one DesignSpec."""
    x = np.stack([spec.mask.astype(np.float32),
                  spec.fx.astype(np.float32),
                  spec.fy.astype(np.float32)])[None]
    return x, np.array([spec.volfrac], dtype=np.float32)


def batch_to_input(samples):
    """Input tensors plus (N,1,32,32) label batch from dataset samples."""
    x = np.stack([np.stack([s.spec.mask, s.spec.fx, s.spec.fy]).astype(np.float32)
                  for s in samples])
    volfrac = np.array([s.spec.volfrac for s in samples], dtype=np.float32)
    labels = np.stack([s.label for s in samples]).astype(np.float32)[:, None]
    return x, volfrac, labels


def predict(model: TopoNet, spec: DesignSpec):
    """Single eval-mode forward pass; returns (density field, elapsed seconds)."""
    x, volfrac = spec_to_input(spec)
    t0 = time.perf_counter()
    out = model.forward(x, volfrac, train=False)
    elapsed = time.perf_counter() - t0
    return out[0, 0].astype(np.float64), elapsed
