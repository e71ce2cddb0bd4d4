"""The three-stage normal-estimation model and its losses.

Stage one interpolates the sparse two-channel event map into a dense single
channel (encoder, residual stack, decoder, sigmoid).  Stage two fuses the
five per-pixel maps (r, g, b, normalized, event) by a point-wise convolution
whose sigmoid gates the original maps multiplicatively.  Stage three is a
dense-block classifier that pools to a single unit normal per sample.

Ablation variants drop stages: `no_ei` feeds the raw event map straight to
fusion, `no_ofm` skips the gating, `no_event` runs on the four RGB-derived
maps alone.  All stages train jointly on L_total = L_e + L_n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    Tensor,
    cat,
    downsample2x,
    upsample2x,
)

ABLATIONS = ("full", "no_ei", "no_ofm", "no_event")


class NetError(ValueError):
    """Raised for invalid configurations or degenerate network outputs."""


@dataclass(frozen=True)
class NetConfig:
    """Model and training hyperparameters; see `desk()` and `paper()`."""

    m: int = 16
    base_channels: int = 16
    sne_growth: int = 12
    k_aug: int = 1
    batch_size: int = 256
    epochs: int = 30
    lr: float = 0.001
    scale: str = "desk"

    def __post_init__(self):
        if self.m not in (16, 32):
            raise NetError(f"observation map resolution {self.m} unsupported")
        if self.k_aug < 1:
            raise NetError("augmentation count must be at least 1")
        if self.batch_size < 2:
            raise NetError("batch size must be at least 2")
        if self.scale not in ("desk", "paper"):
            raise NetError(f"unknown scale {self.scale!r}")

    @staticmethod
    def desk(**overrides) -> "NetConfig":
        return NetConfig(**{**dict(m=16, base_channels=16, sne_growth=12,
                                   batch_size=256, epochs=30, scale="desk"),
                            **overrides})

    @staticmethod
    def paper(**overrides) -> "NetConfig":
        return NetConfig(**{**dict(m=32, base_channels=32, sne_growth=24,
                                   batch_size=2048, epochs=20, scale="paper"),
                            **overrides})


class ResidualBlock(Module):
    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)

    def __call__(self, x):
        return self.bn(self.conv(x)).relu() + x


class DownBlock(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 5, stride=2, padding=2, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def __call__(self, x):
        return self.bn(self.conv(x)).leaky_relu(0.01)


class UpBlock(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def __call__(self, x):
        return self.bn(self.conv(upsample2x(x))).leaky_relu(0.01)


class EINet(Module):
    """Event-map interpolation: 2-channel sparse in, 1-channel dense out."""

    def __init__(self, m: int, base_channels: int, rng, dtype=np.float32):
        super().__init__()
        if m % 4 != 0:
            raise NetError("resolution incompatible with two down blocks")
        c = base_channels
        self.head_conv = Conv2d(2, c, 3, padding=1, rng=rng, dtype=dtype)
        self.head_bn = BatchNorm2d(c, dtype=dtype)
        self.down1 = DownBlock(c, 2 * c, rng, dtype)
        self.down2 = DownBlock(2 * c, 4 * c, rng, dtype)
        self.residual = [ResidualBlock(4 * c, rng, dtype) for _ in range(16)]
        self.up1 = UpBlock(4 * c, 2 * c, rng, dtype)
        self.up2 = UpBlock(2 * c, c, rng, dtype)
        self.pred_conv = Conv2d(c, 1, 3, padding=1, rng=rng, dtype=dtype)

    def __call__(self, o_e2: Tensor) -> Tensor:
        x = self.head_bn(self.head_conv(o_e2)).relu()
        x = self.down2(self.down1(x))
        for block in self.residual:
            x = block(x)
        x = self.up2(self.up1(x))
        return self.pred_conv(x).sigmoid()


class OFM(Module):
    """Point-wise fusion: sigmoid of the mixed maps gates the originals."""

    def __init__(self, channels: int, rng, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.conv = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)

    def __call__(self, o: Tensor) -> Tensor:
        if o.data.shape[1] != self.channels:
            raise NetError(
                f"fusion expects {self.channels} observation channels, got {o.data.shape[1]}"
            )
        return self.conv(o).sigmoid() * o


class DenseBlock(Module):
    """Four conv-ReLU layers, each appending `growth` channels."""

    def __init__(self, c_in, growth, rng, dtype, layers=4):
        super().__init__()
        self.convs = [
            Conv2d(c_in + i * growth, growth, 3, padding=1, rng=rng, dtype=dtype)
            for i in range(layers)
        ]
        self.out_channels = c_in + layers * growth

    def __call__(self, x):
        for conv in self.convs:
            x = cat([x, conv(x).relu()], axis=1)
        return x


class TransitionBlock(Module):
    """Channel compression then spatial halving, with BN before the ReLU."""

    def __init__(self, c_in, rng, dtype):
        super().__init__()
        self.out_channels = c_in // 2
        self.conv = Conv2d(c_in, self.out_channels, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(self.out_channels, dtype=dtype)

    def __call__(self, x):
        return downsample2x(self.bn(self.conv(x)).relu())


class SNENet(Module):
    """Dense-block tower pooling to one unit normal per sample."""

    def __init__(self, in_channels: int, growth: int, rng, dtype=np.float32):
        super().__init__()
        self.db1 = DenseBlock(in_channels, growth, rng, dtype)
        self.tb1 = TransitionBlock(self.db1.out_channels, rng, dtype)
        self.db2 = DenseBlock(self.tb1.out_channels, growth, rng, dtype)
        self.tb2 = TransitionBlock(self.db2.out_channels, rng, dtype)
        self.head = Linear(self.tb2.out_channels, 3, rng=rng, dtype=dtype)

    def __call__(self, o: Tensor) -> Tensor:
        x = self.tb2(self.db2(self.tb1(self.db1(o))))
        x = x.mean(axis=(2, 3))
        v = self.head(x)
        raw_norms = np.sqrt((v.data**2).sum(axis=1))
        if np.any(raw_norms < 1e-12):
            raise NetError("degenerate normal prediction")
        norm = v.square().sum(axis=1, keepdims=True).sqrt()
        return v / (norm + 1e-12)


class EFPSModel(Module):
    """The full pipeline at a chosen ablation level."""

    def __init__(self, config: NetConfig, ablation: str = "full", seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        if ablation not in ABLATIONS:
            raise NetError(f"unknown ablation {ablation!r}")
        rng = np.random.default_rng(seed)
        self.config = config
        self.ablation = ablation
        self.einet = None
        self.ofm = None
        stack_channels = 4 if ablation == "no_event" else 5
        if ablation in ("full", "no_ofm"):
            self.einet = EINet(config.m, config.base_channels, rng, dtype)
        if ablation != "no_ofm":
            self.ofm = OFM(stack_channels, rng, dtype)
        self.snenet = SNENet(stack_channels, config.sne_growth, rng, dtype)

    def __call__(self, stack4: Tensor, o_e2: Tensor | None = None,
                 o_e_raw: Tensor | None = None):
        """Return (n_hat (N,3), o_e_hat (N,1,m,m) or None)."""
        o_e_hat = None
        if self.ablation == "no_event":
            stack = stack4
        elif self.ablation == "no_ei":
            if o_e_raw is None:
                raise NetError("raw event map required for no_ei ablation")
            stack = cat([stack4, o_e_raw], axis=1)
        else:
            if o_e2 is None:
                raise NetError("two-channel event map required")
            o_e_hat = self.einet(o_e2)
            stack = cat([stack4, o_e_hat], axis=1)
        fused = stack if self.ofm is None else self.ofm(stack)
        return self.snenet(fused), o_e_hat


# -- losses ----------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def scale_invariant_loss(o_hat, o_n) -> Tensor:
    """Population variance of the residual map: shift-invariant map distance."""
    o_hat = _as_tensor(o_hat)
    o_n = _as_tensor(o_n)
    if o_hat.data.shape != o_n.data.shape:
        raise NetError(
            f"residual shapes differ: {o_hat.data.shape} vs {o_n.data.shape}"
        )
    if o_hat.data.size == 0:
        raise NetError("empty observation map pair")
    r = o_hat - o_n
    return r.square().mean() - r.mean().square()


def batched_scale_invariant_loss(o_hat: Tensor, o_n: Tensor) -> Tensor:
    """Mean per-sample scale-invariant loss over a (N, ...) batch."""
    axes = tuple(range(1, o_hat.data.ndim))
    r = o_hat - o_n
    return (r.square().mean(axis=axes) - r.mean(axis=axes).square()).mean()


def mae_loss(n_true, n_pred) -> Tensor:
    """Angle between two unit vectors, clamped for gradient stability."""
    a = _as_tensor(n_true)
    b = _as_tensor(n_pred)
    for v in (a, b):
        if abs(float(np.linalg.norm(v.data)) - 1.0) > 1e-4:
            raise NetError("normal not unit length")
    dot = (a * b).sum().clip(-1.0 + 1e-7, 1.0 - 1e-7)
    return dot.acos()


def batched_mae_loss(n_true: Tensor, n_pred: Tensor) -> Tensor:
    """Mean angular distance over an (N, 3) batch of unit vectors."""
    dots = (n_true * n_pred).sum(axis=1).clip(-1.0 + 1e-7, 1.0 - 1e-7)
    return dots.acos().mean()


def total_loss(l_e, l_n):
    """Unit-weight sum of the event and normal losses."""
    return l_e + l_n


def angular_error_degrees(n_true: np.ndarray, n_pred: np.ndarray) -> np.ndarray:
    """Elementwise angle in degrees between rows of two (N, 3) arrays."""
    dots = np.clip(np.sum(n_true * n_pred, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))
