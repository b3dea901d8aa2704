"""Architecture descriptors and forward passes.

Two network families: the per-image latent ConvNet (a stack of unpadded
convolutions whose parameters are the image's latent code, box-constrained
to [-B, B]) and the shared hourglass generator (strided-conv encoder,
upsample-conv decoder, two skip connections, batch-norm and LeakyReLU after
every convolution, sigmoid output).  A third latent family covers the
baseline with free latents: either a raw map matching the generator input
or a vector fed through a learned linear head.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ParamBlock, ShapeError, Tape, TensorMap

LATENT_BOX = 0.01
LEAK = 0.2


@dataclass(frozen=True)
class LayerSpec:
    kind: str                    # "conv" | "upconv"
    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1              # conv stride, or upsample scale for upconv
    padding: int = 0
    act: bool = True
    norm: bool = False
    skip_from: Optional[int] = None   # concat that layer's output to this input

    def param_count(self) -> int:
        n = self.kernel * self.kernel * self.c_in * self.c_out + self.c_out
        if self.norm:
            n += 2 * self.c_out
        return n


@dataclass(frozen=True)
class ArchSpec:
    """Validated layer chain with declared input and output shapes (C, H, W)."""

    layers: tuple
    input_shape: tuple
    output_shape: tuple

    def __post_init__(self):
        got = self.propagate()
        if got != tuple(self.output_shape):
            raise ShapeError(
                f"declared output {self.output_shape} but layers produce {got}")

    def propagate(self) -> tuple:
        """Symbolically chain layer shapes; raises on any inconsistency."""
        produced = []
        c, h, w = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.skip_from is not None:
                if not 0 <= layer.skip_from < i:
                    raise ShapeError(f"layer {i} skips from invalid index {layer.skip_from}")
                sc, sh, sw = produced[layer.skip_from]
                if (sh, sw) != (h, w):
                    raise ShapeError(
                        f"layer {i} skip source is {sh}x{sw} but input is {h}x{w}")
                c += sc
            if layer.c_in != c:
                raise ShapeError(f"layer {i} declares c_in={layer.c_in} but receives {c}")
            if layer.kind == "conv":
                h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            elif layer.kind == "upconv":
                h, w = h * layer.stride, w * layer.stride
            else:
                raise ShapeError(f"unknown layer kind {layer.kind!r}")
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i} produces empty {h}x{w} output")
            c = layer.c_out
            produced.append((c, h, w))
        return (c, h, w)

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        layers = tuple(LayerSpec(**ld) for ld in d["layers"])
        return cls(layers, tuple(d["input_shape"]), tuple(d["output_shape"]))


@dataclass
class LatentCodec:
    """One image's latent ConvNet: parameters phi inside the box, shared noise input."""

    arch: ArchSpec
    phi: list                    # flat [w0, b0, w1, b1, ...]
    noise_ref: str = "s"

    @property
    def param_count(self) -> int:
        return sum(p.value.size for p in self.phi)

    def max_abs(self) -> float:
        return max(float(np.abs(p.value.data).max()) for p in self.phi)


@dataclass
class GeneratorModel:
    """Shared generator: per-layer parameter dicts plus norm running stats.

    ``vector_dim`` is set for the vector-latent baseline, in which case
    ``head_w``/``head_b`` map the latent vector onto the generator's input
    map shape.
    """

    arch: ArchSpec
    params: list                 # per layer: {"w", "b"} (+ {"gain", "shift"} if norm)
    norm_stats: list             # per layer: NormStats or None
    vector_dim: Optional[int] = None
    head_w: Optional[ParamBlock] = None
    head_b: Optional[ParamBlock] = None

    @property
    def theta(self) -> list:
        """All generator parameters in declaration order."""
        blocks = []
        if self.vector_dim is not None:
            blocks += [self.head_w, self.head_b]
        for p in self.params:
            blocks.append(p["w"])
            blocks.append(p["b"])
            if "gain" in p:
                blocks += [p["gain"], p["shift"]]
        return blocks

    def set_frozen(self, flag: bool) -> None:
        for b in self.theta:
            b.frozen = flag


@dataclass
class GloLatent:
    """Free latent for the direct-optimization baseline."""

    kind: str                    # "map" | "vector"
    value: ParamBlock


# ---------------------------------------------------------------------------
# initialization


def init_noise(shape, seed: int) -> TensorMap:
    """Fixed network input: i.i.d. uniform on [-1, 1], shape (C, H, W)."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    data = rng.uniform(-1.0, 1.0, size=(1, c, h, w)).astype(T.default_dtype())
    return TensorMap(data)


def init_latent_codec(arch: ArchSpec, seed: int, name: str = "phi",
                      box: float = LATENT_BOX) -> LatentCodec:
    """Fresh latent net with phi entries uniform over the [-box, box] box."""
    rng = np.random.default_rng(seed)
    dt = T.default_dtype()
    phi = []
    for i, layer in enumerate(arch.layers):
        wshape = (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
        w = rng.uniform(-box, box, size=wshape).astype(dt)
        b = rng.uniform(-box, box, size=(layer.c_out,)).astype(dt)
        phi.append(ParamBlock(f"{name}.{i}.w", w, bound=box))
        phi.append(ParamBlock(f"{name}.{i}.b", b, bound=box))
    return LatentCodec(arch=arch, phi=phi)


def init_generator(arch: ArchSpec, seed: int,
                   vector_dim: Optional[int] = None) -> GeneratorModel:
    """Generator parameters: uniform +-sqrt(1/fan_in), identity norm affine."""
    rng = np.random.default_rng(seed)
    dt = T.default_dtype()
    params, stats = [], []
    for i, layer in enumerate(arch.layers):
        fan_in = layer.c_in * layer.kernel * layer.kernel
        bound = float(np.sqrt(1.0 / fan_in))
        wshape = (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
        entry = {
            "w": ParamBlock(f"g.{i}.w", rng.uniform(-bound, bound, wshape).astype(dt)),
            "b": ParamBlock(f"g.{i}.b", rng.uniform(-bound, bound, layer.c_out).astype(dt)),
        }
        if layer.norm:
            entry["gain"] = ParamBlock(f"g.{i}.gain", np.ones(layer.c_out, dtype=dt))
            entry["shift"] = ParamBlock(f"g.{i}.shift", np.zeros(layer.c_out, dtype=dt))
            stats.append(T.NormStats.create(layer.c_out, dtype=dt))
        else:
            stats.append(None)
        params.append(entry)
    model = GeneratorModel(arch=arch, params=params, norm_stats=stats)
    if vector_dim is not None:
        c, h, w = arch.input_shape
        k = c * h * w
        bound = float(np.sqrt(1.0 / vector_dim))
        model.vector_dim = vector_dim
        model.head_w = ParamBlock("g.head.w",
                                  rng.uniform(-bound, bound, (k, vector_dim)).astype(dt))
        model.head_b = ParamBlock("g.head.b", np.zeros(k, dtype=dt))
    return model


def init_glo_latent(generator_arch: ArchSpec, seed: int, kind: str = "map",
                    dim: Optional[int] = None, name: str = "z") -> GloLatent:
    """Free latent, standard normal init; map kind matches the generator input."""
    rng = np.random.default_rng(seed)
    dt = T.default_dtype()
    if kind == "map":
        c, h, w = generator_arch.input_shape
        value = rng.standard_normal((1, c, h, w)).astype(dt)
    elif kind == "vector":
        if dim is None:
            raise ValueError("vector latent needs a dimension")
        value = rng.standard_normal((1, dim)).astype(dt)
    else:
        raise ValueError(f"unknown latent kind {kind!r}")
    return GloLatent(kind=kind, value=ParamBlock(name, value))


# ---------------------------------------------------------------------------
# forward passes


def forward_latent(codec: LatentCodec, noise: TensorMap,
                   tape: Optional[Tape] = None) -> TensorMap:
    """Run the latent ConvNet on the shared noise, producing the latent map z."""
    c, h, w = codec.arch.input_shape
    if noise.shape[1:] != (c, h, w):
        raise ShapeError(f"noise shape {noise.shape} != arch input {(c, h, w)}")
    x = noise
    for i, layer in enumerate(codec.arch.layers):
        x = T.conv2d(x, codec.phi[2 * i], codec.phi[2 * i + 1],
                     stride=layer.stride, padding=layer.padding, tape=tape)
        if layer.act:
            x = T.leaky_relu(x, LEAK, tape=tape)
    return x


def forward_generator(model: GeneratorModel, z: TensorMap, mode: str = "eval",
                      tape: Optional[Tape] = None) -> TensorMap:
    """Map latent z to an image in [0, 1]; skips concatenate encoder maps in."""
    c, h, w = model.arch.input_shape
    if model.vector_dim is not None and z.data.ndim == 2:
        if z.shape[1] != model.vector_dim:
            raise ShapeError(f"latent vector has {z.shape[1]} dims, expected {model.vector_dim}")
        z = T.linear(z, model.head_w, model.head_b, tape=tape)
        z = T.reshape(z, (z.shape[0], c, h, w), tape=tape)
    if z.shape[1:] != (c, h, w):
        raise ShapeError(f"latent shape {z.shape} != arch input {(c, h, w)}")
    x = z
    produced = []
    for i, layer in enumerate(model.arch.layers):
        if layer.skip_from is not None:
            x = T.concat_channels(x, produced[layer.skip_from], tape=tape)
        p = model.params[i]
        if layer.kind == "conv":
            x = T.conv2d(x, p["w"], p["b"], stride=layer.stride,
                         padding=layer.padding, tape=tape)
        else:
            x = T.upsample_conv(x, p["w"], p["b"], scale=layer.stride, tape=tape)
        if layer.norm:
            x = T.channel_norm(x, p["gain"], p["shift"], model.norm_stats[i],
                               mode=mode, tape=tape)
        if layer.act:
            x = T.leaky_relu(x, LEAK, tape=tape)
        produced.append(x)
    return T.sigmoid(x, tape=tape)


# ---------------------------------------------------------------------------
# presets


def _latent_arch(noise_shape, channels, z_channels):
    c_in = noise_shape[0]
    layers = []
    widths = list(channels) + [z_channels]
    h = noise_shape[1]
    for i, c_out in enumerate(widths):
        last = i == len(widths) - 1
        layers.append(LayerSpec("conv", c_in, c_out, kernel=3, stride=1,
                                padding=0, act=not last))
        c_in = c_out
        h -= 2
    return ArchSpec(tuple(layers), tuple(noise_shape), (z_channels, h, h))


def _toy32_generator():
    L = LayerSpec
    layers = (
        L("conv", 8, 24, stride=1, padding=1, norm=True),          # 8x8
        L("conv", 24, 32, stride=2, padding=1, norm=True),         # 4x4
        L("conv", 32, 48, stride=2, padding=1, norm=True),         # 2x2
        L("upconv", 48, 32, stride=2, norm=True),                  # 4x4
        L("upconv", 64, 24, stride=2, norm=True, skip_from=1),     # 8x8
        L("upconv", 48, 16, stride=2, norm=True, skip_from=0),     # 16x16
        L("upconv", 16, 16, stride=2, norm=True),                  # 32x32
        L("conv", 16, 3, stride=1, padding=1, act=False),          # 32x32
    )
    return ArchSpec(layers, (8, 8, 8), (3, 32, 32))


def _toy16_generator():
    L = LayerSpec
    layers = (
        L("conv", 8, 16, stride=1, padding=1, norm=True),          # 4x4
        L("conv", 16, 24, stride=2, padding=1, norm=True),         # 2x2
        L("conv", 24, 32, stride=2, padding=1, norm=True),         # 1x1
        L("upconv", 32, 24, stride=2, norm=True),                  # 2x2
        L("upconv", 48, 16, stride=2, norm=True, skip_from=1),     # 4x4
        L("upconv", 32, 12, stride=2, norm=True, skip_from=0),     # 8x8
        L("upconv", 12, 12, stride=2, norm=True),                  # 16x16
        L("conv", 12, 3, stride=1, padding=1, act=False),          # 16x16
    )
    return ArchSpec(layers, (8, 4, 4), (3, 16, 16))


_PRESETS = {
    # 16x16x4 noise -> 4 unpadded convs -> z 8x8x8 -> hourglass 8->2->32
    "toy32": lambda: (_latent_arch((4, 16, 16), (8, 16, 16), 8), _toy32_generator()),
    # 8x8x4 noise -> 2 unpadded convs -> z 4x4x8 -> hourglass 4->1->16
    "toy16": lambda: (_latent_arch((4, 8, 8), (8,), 8), _toy16_generator()),
}


def toy_arch_templates(preset: str):
    """Return (latent ArchSpec, generator ArchSpec) for a named toy preset."""
    try:
        make = _PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}, have {sorted(_PRESETS)}") from None
    return make()


def preset_names():
    return sorted(_PRESETS)
