"""Conversion generator and patch discriminator, built from declarative specs.

Generator layout (frozen convention for this artifact):

    2D input conv (5x15, GLU)
    -> two 2D downsample blocks (5x5, stride 2x2, IN, GLU)
    -> flatten to 1D, 1x1 conv, IN
    -> n residual 1D blocks (k3, IN, GLU)
    -> 1x1 conv back to the 2D width, [adaptive norm or IN]
    -> two upsample blocks: conv x4 channels, pixel shuffle r=2,
       [adaptive norm or IN], GLU
    -> 2D output conv (5x15) to one channel

The adaptive-norm sites additionally receive the source spectrogram. With
``adanorm_position='none'`` every site falls back to plain instance norm and
the network reduces to the underlying baseline layout (see data/ golden file).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import AdaptiveNorm, AdaptiveNormConfig, Conv1d, Conv2d, instance_norm

POSITIONS = ("none", "1d_to_2d", "upsampling", "both")


@dataclass
class GeneratorSpec:
    input_bins: int = 80
    base_channels: int = 32  # desk scale; paper scale is 128
    n_residual_blocks: int = 6
    adanorm: AdaptiveNormConfig = field(
        default_factory=lambda: AdaptiveNormConfig(depth=3, hidden_channels=32)
    )
    adanorm_position: str = "both"
    fallback_instance_norm: bool = True

    def __post_init__(self):
        if self.input_bins % 4 != 0:
            raise ValueError("input_bins must be divisible by 4")
        if self.base_channels < 2 or self.base_channels % 2 != 0:
            raise ValueError("base_channels must be even and >= 2")
        if self.n_residual_blocks < 0:
            raise ValueError("n_residual_blocks must be >= 0")
        if self.adanorm_position not in POSITIONS:
            raise ValueError(f"adanorm_position must be one of {POSITIONS}")

    @classmethod
    def paper_scale(cls, **overrides) -> "GeneratorSpec":
        kw = dict(
            base_channels=128,
            adanorm=AdaptiveNormConfig(depth=3, hidden_channels=128),
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d["adanorm"] = AdaptiveNormConfig(**d["adanorm"])
        return cls(**d)


@dataclass
class DiscriminatorSpec:
    base_channels: int = 32
    n_downsample: int = 3
    second_last_freq_kernel_doubled: bool = True
    # Global IN couples every patch to the whole input; the receptive-field
    # locality probe needs this off.
    use_instance_norm: bool = True

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.n_downsample < 1:
            raise ValueError("n_downsample must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorSpec":
        return cls(**d)


class Generator:
    """Shape-preserving spectrogram-to-spectrogram mapping."""

    def __init__(self, spec: GeneratorSpec, seed: int):
        self.spec = spec
        self.dtype = ad.default_dtype()
        rng = np.random.default_rng(seed)
        b = spec.base_channels
        q = spec.input_bins
        self.flat_channels = 2 * b * (q // 4)

        self.in_conv = Conv2d(rng, 1, 2 * b, (5, 15))
        self.down1 = Conv2d(rng, b, 4 * b, (5, 5), stride=(2, 2))
        self.down2 = Conv2d(rng, 2 * b, 4 * b, (5, 5), stride=(2, 2))
        self.to_1d = Conv1d(rng, self.flat_channels, 2 * b, 1)
        self.res = []
        for _ in range(spec.n_residual_blocks):
            self.res.append(
                (Conv1d(rng, 2 * b, 4 * b, 3), Conv1d(rng, 2 * b, 2 * b, 3))
            )
        self.to_2d = Conv1d(rng, 2 * b, self.flat_channels, 1)
        self.up1 = Conv2d(rng, 2 * b, 8 * b, (5, 5))
        self.up2 = Conv2d(rng, b, 4 * b, (5, 5))
        self.out_conv = Conv2d(rng, b // 2, 1, (5, 15))

        pos = spec.adanorm_position
        self.norm_1d = None
        self.norm_up1 = None
        self.norm_up2 = None
        if pos in ("1d_to_2d", "both"):
            cfg1 = AdaptiveNormConfig(
                spec.adanorm.depth, spec.adanorm.hidden_channels, spec.adanorm.kernel_size, "1d"
            )
            self.norm_1d = AdaptiveNorm(rng, cfg1, self.flat_channels, q)
        if pos in ("upsampling", "both"):
            cfg2 = AdaptiveNormConfig(
                spec.adanorm.depth, spec.adanorm.hidden_channels, spec.adanorm.kernel_size, "2d"
            )
            self.norm_up1 = AdaptiveNorm(rng, cfg2, 2 * b, q)
            self.norm_up2 = AdaptiveNorm(rng, cfg2, b, q)

    def _site(self, norm: AdaptiveNorm | None, h: Tensor, source: Tensor) -> Tensor:
        if norm is not None:
            return norm(h, source)
        if self.spec.fallback_instance_norm:
            return instance_norm(h)
        return h

    def forward(self, x: Tensor) -> Tensor:
        """(Q, T) -> (Q, T); T must be divisible by 4."""
        q, t = x.shape
        if q != self.spec.input_bins:
            raise ValueError(f"expected {self.spec.input_bins} bins, got {q}")
        if t % 4 != 0:
            raise ValueError(f"frame count {t} not divisible by 4 (pad or crop first)")
        if x.data.dtype != self.dtype:  # inference convenience; training matches already
            x = Tensor(x.data, requires_grad=x.requires_grad, dtype=self.dtype)
        b = self.spec.base_channels

        h = ad.glu(self.in_conv(x.reshape((1, q, t))))
        h = ad.glu(instance_norm(self.down1(h)))
        h = ad.glu(instance_norm(self.down2(h)))
        h = h.reshape((self.flat_channels, t // 4))
        h = instance_norm(self.to_1d(h))
        for c1, c2 in self.res:
            r = ad.glu(instance_norm(c1(h)))
            h = h + instance_norm(c2(r))
        h = self._site(self.norm_1d, self.to_2d(h), x)
        h = h.reshape((2 * b, q // 4, t // 4))
        h = ad.glu(self._site(self.norm_up1, ad.pixel_shuffle_2d(self.up1(h), 2), x))
        h = ad.glu(self._site(self.norm_up2, ad.pixel_shuffle_2d(self.up2(h), 2), x))
        return self.out_conv(h).reshape((q, t))

    __call__ = forward

    def named_params(self):
        blocks = [("in_conv", self.in_conv), ("down1", self.down1), ("down2", self.down2),
                  ("to_1d", self.to_1d)]
        for i, (c1, c2) in enumerate(self.res):
            blocks.append((f"res{i}.c1", c1))
            blocks.append((f"res{i}.c2", c2))
        blocks.append(("to_2d", self.to_2d))
        for label, norm in [("norm_1d", self.norm_1d), ("norm_up1", self.norm_up1),
                            ("norm_up2", self.norm_up2)]:
            if norm is not None:
                blocks.append((label, norm))
        blocks += [("up1", self.up1), ("up2", self.up2), ("out_conv", self.out_conv)]
        for prefix, block in blocks:
            for name, p in block.params():
                yield f"{prefix}.{name}", p


def generator_layer_list(spec: GeneratorSpec) -> list[str]:
    """Human-readable layer descriptors; used for golden-layout comparison."""
    b = spec.base_channels
    q = spec.input_bins
    flat = 2 * b * (q // 4)
    pos = spec.adanorm_position

    def site(where: str) -> str:
        active = pos == "both" or pos == where
        if active:
            return (
                f"adaptive_norm depth={spec.adanorm.depth}"
                f" hidden={spec.adanorm.hidden_channels} k={spec.adanorm.kernel_size}"
            )
        return "instance_norm" if spec.fallback_instance_norm else "identity"

    lines = [
        f"in_conv conv2d 1->{2 * b} k5x15 s1x1",
        "in_act glu",
        f"down1 conv2d {b}->{4 * b} k5x5 s2x2",
        "down1_norm instance_norm",
        "down1_act glu",
        f"down2 conv2d {2 * b}->{4 * b} k5x5 s2x2",
        "down2_norm instance_norm",
        "down2_act glu",
        f"to_1d conv1d {flat}->{2 * b} k1 s1",
        "to_1d_norm instance_norm",
    ]
    for i in range(spec.n_residual_blocks):
        lines += [
            f"res{i}.c1 conv1d {2 * b}->{4 * b} k3 s1",
            f"res{i}.n1 instance_norm",
            f"res{i}.a1 glu",
            f"res{i}.c2 conv1d {2 * b}->{2 * b} k3 s1",
            f"res{i}.n2 instance_norm",
            f"res{i}.skip add",
        ]
    lines += [
        f"to_2d conv1d {2 * b}->{flat} k1 s1",
        f"to_2d_norm {site('1d_to_2d')}",
        f"up1 conv2d {2 * b}->{8 * b} k5x5 s1x1",
        "up1_shuffle pixel_shuffle r2",
        f"up1_norm {site('upsampling')}",
        "up1_act glu",
        f"up2 conv2d {b}->{4 * b} k5x5 s1x1",
        "up2_shuffle pixel_shuffle r2",
        f"up2_norm {site('upsampling')}",
        "up2_act glu",
        f"out_conv conv2d {b // 2}->1 k5x15 s1x1",
    ]
    return lines


def build_generator(spec: GeneratorSpec, seed: int) -> Generator:
    return Generator(spec, seed)


def generator_forward(g: Generator, mel_data: np.ndarray) -> np.ndarray:
    """Inference-only forward over a plain (Q, T) array."""
    with ad.no_grad():
        return g.forward(Tensor(mel_data)).data


class Discriminator:
    """Patch discriminator: a conv stack ending in a 1-channel spatial map."""

    def __init__(self, spec: DiscriminatorSpec, seed: int):
        self.spec = spec
        self.dtype = ad.default_dtype()
        rng = np.random.default_rng(seed)
        d = spec.base_channels
        self.in_conv = Conv2d(rng, 1, 2 * d, (3, 3))
        self.downs = []
        ch = d
        for _ in range(spec.n_downsample):
            self.downs.append(Conv2d(rng, ch, 4 * ch, (3, 3), stride=(2, 2)))
            ch *= 2
        k_pre = (6, 3) if spec.second_last_freq_kernel_doubled else (3, 3)
        self.pre_conv = Conv2d(rng, ch, 2 * ch, k_pre)
        self.out_conv = Conv2d(rng, ch, 1, (3, 3))

    def forward(self, m: Tensor) -> Tensor:
        """(Q, T) -> (1, Q', T') patch map; no global pooling."""
        if m.ndim != 2:
            raise ValueError("discriminator expects a (Q, T) input")
        if m.data.dtype != self.dtype:
            m = Tensor(m.data, requires_grad=m.requires_grad, dtype=self.dtype)
        norm = instance_norm if self.spec.use_instance_norm else (lambda h: h)
        h = ad.glu(self.in_conv(m.reshape((1,) + m.shape)))
        for conv in self.downs:
            h = ad.glu(norm(conv(h)))
        h = ad.glu(norm(self.pre_conv(h)))
        return self.out_conv(h)

    __call__ = forward

    def named_params(self):
        blocks = [("in_conv", self.in_conv)]
        blocks += [(f"down{i}", c) for i, c in enumerate(self.downs)]
        blocks += [("pre_conv", self.pre_conv), ("out_conv", self.out_conv)]
        for prefix, block in blocks:
            for name, p in block.params():
                yield f"{prefix}.{name}", p

    def layer_geometry(self) -> list[tuple[tuple[int, int], tuple[int, int], tuple[int, int]]]:
        """Per conv layer: (kernel, stride, pad_lo) along (freq, time)."""
        geo = [((3, 3), (1, 1), (1, 1))]
        for _ in self.downs:
            geo.append(((3, 3), (2, 2), (1, 1)))
        kq = 6 if self.spec.second_last_freq_kernel_doubled else 3
        geo.append(((kq, 3), (1, 1), ((kq - 1) // 2, 1)))
        geo.append(((3, 3), (1, 1), (1, 1)))
        return geo


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> Discriminator:
    return Discriminator(spec, seed)


def discriminator_forward(d: Discriminator, mel_data: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return d.forward(Tensor(mel_data)).data


def patch_field(d: Discriminator, patch_q: int, patch_t: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Unclipped input interval [lo, hi] a patch cell depends on, per axis."""
    box = [(patch_q, patch_q), (patch_t, patch_t)]
    for (kq, kt), (sq, st), (pq, pt) in reversed(d.layer_geometry()):
        for axis, (k, s, p) in enumerate([(kq, sq, pq), (kt, st, pt)]):
            lo, hi = box[axis]
            box[axis] = (lo * s - p, hi * s - p + k - 1)
    return box[0], box[1]


def receptive_field_size(d: Discriminator) -> tuple[int, int]:
    """Closed-form receptive field: 1 + sum (k_l - 1) * prod(earlier strides)."""
    size = [1, 1]
    jump = [1, 1]
    for (kq, kt), (sq, st), _ in d.layer_geometry():
        size[0] += (kq - 1) * jump[0]
        size[1] += (kt - 1) * jump[1]
        jump[0] *= sq
        jump[1] *= st
    return size[0], size[1]


def save_generator_spec(spec: GeneratorSpec, path) -> None:
    """Documented key=value text format (see README)."""
    lines = [
        f"input_bins={spec.input_bins}",
        f"base_channels={spec.base_channels}",
        f"n_residual_blocks={spec.n_residual_blocks}",
        f"adanorm_depth={spec.adanorm.depth}",
        f"adanorm_hidden={spec.adanorm.hidden_channels}",
        f"adanorm_kernel={spec.adanorm.kernel_size}",
        f"adanorm_position={spec.adanorm_position}",
        f"fallback_instance_norm={'true' if spec.fallback_instance_norm else 'false'}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_generator_spec(path) -> GeneratorSpec:
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    return GeneratorSpec(
        input_bins=int(kv["input_bins"]),
        base_channels=int(kv["base_channels"]),
        n_residual_blocks=int(kv["n_residual_blocks"]),
        adanorm=AdaptiveNormConfig(
            depth=int(kv["adanorm_depth"]),
            hidden_channels=int(kv["adanorm_hidden"]),
            kernel_size=int(kv["adanorm_kernel"]),
        ),
        adanorm_position=kv["adanorm_position"],
        fallback_instance_norm=kv["fallback_instance_norm"] == "true",
    )
