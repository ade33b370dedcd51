"""Model architecture configuration and the two paper-scale presets."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

VARIANTS = ("baseline", "attention", "meta", "attention_meta")


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by every model variant.

    The trunk is a 7x7 A-masked input conv followed by ``n_layers`` 3x3
    B-masked convs grouped into conv-ReLU-conv residual blocks, with 1x1 skip
    projections gathered into a penultimate layer before the output head.
    """

    height: int = 26
    width: int = 26
    channels: int = 1
    value_levels: int = 2
    n_layers: int = 12
    planes: int = 24
    penultimate_planes: int = 32
    support_size: int = 1
    attention: bool = False
    attn_channels: int = 16
    query_layer: int = 0  # 0 -> n_layers // 2
    patch_grid: int = 0  # 0 -> derived from patch_kernels
    meta: bool = False
    global_dim: int = 32
    support_planes: int = 32
    # patch encoder: ((kernel, stride), ...) valid-padded conv layers
    patch_kernels: tuple = ((5, 2), (5, 2))
    identity_channels: bool = True

    def __post_init__(self):
        for name in ("height", "width", "channels", "value_levels", "support_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig: {name} must be >= 1")
        if self.value_levels < 2:
            raise ValueError("ModelConfig: value_levels must be >= 2")
        if self.n_layers < 2 or self.n_layers % 2 != 0:
            raise ValueError("ModelConfig: n_layers must be even and >= 2")
        if self.query_layer == 0:
            self.query_layer = self.n_layers // 2
        if not 1 <= self.query_layer <= self.n_layers:
            raise ValueError("ModelConfig: query_layer out of [1, n_layers]")
        if self.attention:
            if self.attn_channels < 1:
                raise ValueError("ModelConfig: attention requires attn_channels >= 1")
            k = self.derive_patch_grid()
            if self.patch_grid == 0:
                self.patch_grid = k
            elif self.patch_grid != k:
                raise ValueError(
                    f"ModelConfig: patch_grid {self.patch_grid} inconsistent with "
                    f"patch encoder output {k}"
                )

    @property
    def bernoulli(self) -> bool:
        return self.value_levels == 2

    @property
    def conditional(self) -> bool:
        # pure meta models are unconditional; everything else sees f(s)
        return self.attention or not self.meta

    @property
    def n_blocks(self) -> int:
        return self.n_layers // 2

    @property
    def n_encoder_stages(self) -> int:
        n, stages = max(self.height, self.width), 0
        while n > 1:
            n = -(-n // 2)
            stages += 1
        return stages

    def derive_patch_grid(self) -> int:
        kh, kw = self.height, self.width
        for k, s in self.patch_kernels:
            if k > kh or k > kw:
                raise ValueError(
                    f"ModelConfig: patch kernel {k} exceeds {kh}x{kw} input"
                )
            kh = (kh - k) // s + 1
            kw = (kw - k) // s + 1
        if kh != kw:
            raise ValueError(f"ModelConfig: non-square patch grid {kh}x{kw}")
        return kh

    def patch_receptive(self) -> tuple:
        """(receptive field extent, stride, center offset) of one patch unit."""
        rf, stride = 1, 1
        for k, s in self.patch_kernels:
            rf += (k - 1) * stride
            stride *= s
        return rf, stride, (rf - 1) // 2

    @property
    def variant(self) -> str:
        if self.attention and self.meta:
            return "attention_meta"
        if self.attention:
            return "attention"
        if self.meta:
            return "meta"
        return "baseline"

    def to_dict(self) -> dict:
        return asdict(self)


def apply_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    cfg.attention = variant in ("attention", "attention_meta")
    cfg.meta = variant in ("meta", "attention_meta")
    # re-validate attention-derived fields
    cfg.__post_init__()
    return cfg


def omniglot_config(shots: int = 4, variant: str = "baseline") -> ModelConfig:
    """26x26 binarized images, 12 trunk layers of 24 planes (small net)."""
    cfg = ModelConfig(
        height=26,
        width=26,
        channels=1,
        value_levels=2,
        n_layers=12,
        planes=24,
        penultimate_planes=32,
        support_size=shots,
        attn_channels=16,
        global_dim=32,
        support_planes=32,
    )
    return apply_variant(cfg, variant)


def flip_config(shots: int = 1, variant: str = "baseline") -> ModelConfig:
    """24x24 grayscale (256 levels), 16 trunk layers of 128 planes."""
    cfg = ModelConfig(
        height=24,
        width=24,
        channels=1,
        value_levels=256,
        n_layers=16,
        planes=128,
        penultimate_planes=256,
        support_size=shots,
        attn_channels=64,
        global_dim=128,
        support_planes=64,
        patch_kernels=((3, 2), (3, 1)),
    )
    return apply_variant(cfg, variant)


def flip_desk_config(shots: int = 1, variant: str = "baseline") -> ModelConfig:
    """Reduced-width flip model for CPU-budget diagnostics on 24x24 images."""
    cfg = ModelConfig(
        height=24,
        width=24,
        channels=1,
        value_levels=256,
        n_layers=8,
        planes=48,
        penultimate_planes=64,
        support_size=shots,
        attn_channels=24,
        global_dim=48,
        support_planes=32,
        patch_kernels=((3, 2), (3, 1)),
    )
    return apply_variant(cfg, variant)


def tiny_config(variant: str = "baseline", height: int = 2, width: int = 2,
                channels: int = 1, value_levels: int = 2, shots: int = 2,
                n_layers: int = 2, planes: int = 4) -> ModelConfig:
    """Minimal configuration for exhaustive-enumeration and gradient tests."""
    cfg = ModelConfig(
        height=height,
        width=width,
        channels=channels,
        value_levels=value_levels,
        n_layers=n_layers,
        planes=planes,
        penultimate_planes=planes,
        support_size=shots,
        attn_channels=3,
        global_dim=5,
        support_planes=4,
        patch_kernels=((2, 1), (1, 1)) if min(height, width) < 13
        else ((5, 2), (5, 2)),
    )
    return apply_variant(cfg, variant)
