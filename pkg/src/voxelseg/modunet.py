"""Modular U-Net: ConvBlock / Downsample / Upsample pairs arranged in an
encoder-decoder U with skip concatenations, built from a declarative spec.

The 2D variant segments independent slices, 2.5D consumes five adjacent
slices as input channels of a 2D network, and 3D convolves volumes.
Channel widths follow ``2**level * f0``; every Downsample halves and every
Upsample doubles all spatial extents, so output spatial shape equals input
spatial shape and the channel count equals the number of classes.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass, replace

import numpy as np

from . import layers as ly
from .layers import Mode, make_rng


class Variant(enum.Enum):
    TWO_D = "2d"
    TWO_HALF_D = "2.5d"
    THREE_D = "3d"


class Norm(enum.Enum):
    BATCH = "batch"
    LAYER = "layer"
    NONE = "none"


class Sampling(enum.Enum):
    LEARNABLE = "learnable"
    RIGID = "rigid"


SERIAL_MAGIC = b"MODUNET1"


@dataclass(frozen=True)
class ModUNetSpec:
    """Architecture configuration; a model is built deterministically from it."""

    variant: Variant
    u_depth: int = 3
    f0: int = 16
    num_classes: int = 3
    dropout_rate: float = 0.1
    noise_std: float = 0.03
    norm: Norm = Norm.BATCH
    residual: bool = True
    separable: bool = False
    sampling: Sampling = Sampling.LEARNABLE
    kernel: int = 3
    batchnorm_momentum: float = 0.5

    def __post_init__(self):
        if self.u_depth < 1:
            raise ValueError("u_depth must be >= 1")
        if self.f0 < 1:
            raise ValueError("f0 must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be odd and positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.kernel < 2:  # kernel 1 cannot cover a stride-2 resampling window
            if self.sampling is Sampling.LEARNABLE:
                raise ValueError("learnable sampling needs kernel >= stride (use kernel 3)")

    @property
    def spatial_rank(self):
        return 3 if self.variant is Variant.THREE_D else 2

    @property
    def in_channels(self):
        return 5 if self.variant is Variant.TWO_HALF_D else 1

    @property
    def kernel_shape(self):
        return (self.kernel,) * self.spatial_rank

    @property
    def recommended_crop(self):
        """Training crop shape; the trailing 5 of the 2.5D entry is the
        z slice window consumed as input channels."""
        return {
            Variant.TWO_D: (160, 160),
            Variant.TWO_HALF_D: (160, 160, 5),
            Variant.THREE_D: (32, 32, 32),
        }[self.variant]

    def channels_after_block(self, level):
        return (2 ** level) * self.f0


def default_spec(variant):
    """Default hyperparameters: u_depth 3, f0 16, 10% dropout, noise std 0.03,
    batch norm with momentum 0.5, residual on, dense convs, learnable sampling,
    kernel 3."""
    if isinstance(variant, str):
        variant = Variant(variant)
    return ModUNetSpec(variant=variant)


def spec_to_dict(spec):
    return {
        "variant": spec.variant.value,
        "u_depth": spec.u_depth,
        "f0": spec.f0,
        "num_classes": spec.num_classes,
        "dropout_rate": spec.dropout_rate,
        "noise_std": spec.noise_std,
        "norm": spec.norm.value,
        "residual": int(spec.residual),
        "separable": int(spec.separable),
        "sampling": spec.sampling.value,
        "kernel": spec.kernel,
        "batchnorm_momentum": spec.batchnorm_momentum,
    }


def spec_from_dict(d):
    d = dict(d)
    return ModUNetSpec(
        variant=Variant(str(d["variant"])),
        u_depth=int(d.get("u_depth", 3)),
        f0=int(d.get("f0", 16)),
        num_classes=int(d.get("num_classes", 3)),
        dropout_rate=float(d.get("dropout_rate", 0.1)),
        noise_std=float(d.get("noise_std", 0.03)),
        norm=Norm(str(d.get("norm", "batch"))),
        residual=bool(int(d.get("residual", 1))),
        separable=bool(int(d.get("separable", 0))),
        sampling=Sampling(str(d.get("sampling", "learnable"))),
        kernel=int(d.get("kernel", 3)),
        batchnorm_momentum=float(d.get("batchnorm_momentum", 0.5)),
    )


# ---------------------------------------------------------------------------
# blocks


class ConvBlock(ly.Layer):
    """Two k×k convolutions with pre-activation normalization, an optional
    residual 1×1 convolution added before the final activation, and dropout
    at the end.  Spatial extents are preserved; channels go c_in -> c_out.

    Convolutions feeding a norm layer carry no bias (the normalization would
    cancel it); only the main path is normalized.
    """

    def __init__(self, rng, spec, c_in, c_out, dtype):
        super().__init__()
        k = spec.kernel_shape
        normed = spec.norm is not Norm.NONE
        self.conv1 = ly.Conv(rng, k, c_in, c_out, separable=spec.separable,
                             bias=not normed, dtype=dtype)
        self.norm1 = self._make_norm(spec, c_out, dtype)
        self.relu1 = ly.ReLU()
        self.conv2 = ly.Conv(rng, k, c_out, c_out, separable=spec.separable,
                             bias=not normed, dtype=dtype)
        self.norm2 = self._make_norm(spec, c_out, dtype)
        self.res = ly.Conv(rng, (1,) * spec.spatial_rank, c_in, c_out,
                           dtype=dtype) if spec.residual else None
        self.relu2 = ly.ReLU()
        self.drop = ly.Dropout(spec.dropout_rate)
        self.children = [("conv1", self.conv1)]
        if self.norm1 is not None:
            self.children.append(("norm1", self.norm1))
        self.children.append(("conv2", self.conv2))
        if self.norm2 is not None:
            self.children.append(("norm2", self.norm2))
        if self.res is not None:
            self.children.append(("res", self.res))

    @staticmethod
    def _make_norm(spec, channels, dtype):
        if spec.norm is Norm.BATCH:
            return ly.BatchNorm(channels, spec.batchnorm_momentum, dtype=dtype)
        if spec.norm is Norm.LAYER:
            return ly.LayerNorm(channels, dtype=dtype)
        return None

    def forward(self, x, mode=Mode.INFER, rng=None):
        h = self.conv1.forward(x, mode, rng)
        if self.norm1 is not None:
            h = self.norm1.forward(h, mode, rng)
        h = self.relu1.forward(h, mode, rng)
        h = self.conv2.forward(h, mode, rng)
        if self.norm2 is not None:
            h = self.norm2.forward(h, mode, rng)
        if self.res is not None:
            h = h + self.res.forward(x, mode, rng)
        h = self.relu2.forward(h, mode, rng)
        return self.drop.forward(h, mode, rng)

    def backward(self, dy):
        d = self.drop.backward(dy)
        d = self.relu2.backward(d)
        dx_res = self.res.backward(d) if self.res is not None else 0.0
        if self.norm2 is not None:
            d = self.norm2.backward(d)
        d = self.conv2.backward(d)
        d = self.relu1.backward(d)
        if self.norm1 is not None:
            d = self.norm1.backward(d)
        dx = self.conv1.backward(d)
        return dx + dx_res


def _make_downsample(rng, spec, channels, dtype):
    if spec.sampling is Sampling.LEARNABLE:
        return ly.Conv(rng, spec.kernel_shape, channels, channels, stride=2, dtype=dtype)
    return ly.MaxPool(2)


def _make_upsample(rng, spec, channels, dtype):
    if spec.sampling is Sampling.LEARNABLE:
        return ly.TransposedConv(rng, spec.kernel_shape, channels, channels, stride=2,
                                 dtype=dtype)
    return ly.NearestUpsample(2)


# ---------------------------------------------------------------------------
# model


class Model:
    """A built network: encoder pairs, bottleneck, decoder pairs with skip
    concatenations, and a 1×1 softmax head.

    INFER-mode forwards are read-only and safe to run concurrently; TRAIN
    mode mutates running statistics and caches and needs exclusive access.
    """

    def __init__(self, spec, dtype, noise, enc, downs, bottleneck, ups, decs, concats, head):
        self.spec = spec
        self.dtype = dtype
        self.noise = noise
        self.enc = enc
        self.downs = downs
        self.bottleneck = bottleneck
        self.ups = ups          # index by level, applied from deepest to shallowest
        self.decs = decs
        self.concats = concats
        self.head = head
        self.softmax = ly.SoftmaxChannels()
        # Canonical (name, layer) walk; fixes parameter, state, and
        # serialization order.
        self._named = []
        for l in range(spec.u_depth):
            self._named.append((f"enc{l}", enc[l]))
            self._named.append((f"down{l}", downs[l]))
        self._named.append(("bottleneck", bottleneck))
        for l in reversed(range(spec.u_depth)):
            self._named.append((f"up{l}", ups[l]))
            self._named.append((f"dec{l}", decs[l]))
        self._named.append(("head", head))

    # -- shape checks ------------------------------------------------------

    def _check_input(self, x):
        rank = self.spec.spatial_rank
        if x.ndim != rank + 2:
            raise ValueError(
                f"{self.spec.variant.value} input must have shape "
                f"(batch, {rank} spatial axes, channels), got {x.shape}"
            )
        if x.shape[-1] != self.spec.in_channels:
            raise ValueError(
                f"{self.spec.variant.value} input needs {self.spec.in_channels} "
                f"channels, got {x.shape[-1]}"
            )
        div = 2 ** self.spec.u_depth
        for n in x.shape[1:-1]:
            if n % div:
                raise ValueError(
                    f"spatial extent {n} not divisible by 2^u_depth = {div}; "
                    "pad or tile the input (see volume_io.tiled_predict)"
                )

    # -- forward / backward -------------------------------------------------

    def forward(self, x, mode=Mode.INFER, rng=None):
        """Per-voxel class probabilities with the input's spatial shape."""
        self._check_input(x)
        if mode is Mode.TRAIN and rng is None and (
                self.spec.noise_std > 0 or self.spec.dropout_rate > 0):
            raise ValueError("TRAIN-mode forward needs an rng for noise/dropout")
        h = self.noise.forward(x, mode, rng)
        skips = []
        for l in range(self.spec.u_depth):
            s = self.enc[l].forward(h, mode, rng)
            skips.append(s)
            h = self.downs[l].forward(s, mode, rng)
        h = self.bottleneck.forward(h, mode, rng)
        for l in reversed(range(self.spec.u_depth)):
            u = self.ups[l].forward(h, mode, rng)
            c = self.concats[l].forward(skips[l], u, mode, rng)
            h = self.decs[l].forward(c, mode, rng)
        logits = self.head.forward(h, mode, rng)
        return self.softmax.forward(logits, mode, rng)

    def backward(self, dprobs):
        """Propagates dL/d(probabilities) back to the input; after this the
        per-parameter gradients are available via gradients()."""
        d = self.softmax.backward(dprobs)
        d = self.head.backward(d)
        dskips = [None] * self.spec.u_depth
        for l in range(self.spec.u_depth):
            dc = self.decs[l].backward(d)
            ds, du = self.concats[l].backward(dc)
            dskips[l] = ds
            d = self.ups[l].backward(du)
        d = self.bottleneck.backward(d)
        for l in reversed(range(self.spec.u_depth)):
            d = self.downs[l].backward(d)
            d = d + dskips[l]
            d = self.enc[l].backward(d)
        return self.noise.backward(d)

    # -- parameter access ----------------------------------------------------

    def parameters(self):
        out = {}
        for name, layer in self._named:
            for pname, arr in ly.named_params(layer, f"{name}."):
                out[pname] = arr
        return out

    def gradients(self):
        out = {}
        for name, layer in self._named:
            for pname, arr in ly.named_grads(layer, f"{name}."):
                out[pname] = arr
        return out

    def state_arrays(self):
        """Running statistics (not learnable), in canonical order."""
        out = {}

        def walk(layer, prefix):
            for sname, arr in getattr(layer, "state", {}).items():
                out[f"{prefix}{sname}"] = arr
            for cname, child in layer.children:
                walk(child, f"{prefix}{cname}.")

        for name, layer in self._named:
            walk(layer, f"{name}.")
        return out

    def param_count(self):
        return sum(a.size for a in self.parameters().values())


def build(spec, rng, dtype=np.float32):
    """Deterministically initialize a Model from its spec and a seeded rng."""
    noise = ly.GaussianNoise(spec.noise_std)
    enc, downs = [], []
    c_in = spec.in_channels
    for l in range(spec.u_depth):
        c_out = spec.channels_after_block(l)
        enc.append(ConvBlock(rng, spec, c_in, c_out, dtype))
        downs.append(_make_downsample(rng, spec, c_out, dtype))
        c_in = c_out
    c_bottom = spec.channels_after_block(spec.u_depth)
    bottleneck = ConvBlock(rng, spec, c_in, c_bottom, dtype)
    ups = [None] * spec.u_depth
    decs = [None] * spec.u_depth
    concats = [ly.ConcatChannels() for _ in range(spec.u_depth)]
    c_up = c_bottom
    for l in reversed(range(spec.u_depth)):
        ups[l] = _make_upsample(rng, spec, c_up, dtype)
        c_skip = spec.channels_after_block(l)
        decs[l] = ConvBlock(rng, spec, c_skip + c_up, c_skip, dtype)
        c_up = c_skip
    head = ly.Conv(rng, (1,) * spec.spatial_rank, spec.f0, spec.num_classes, dtype=dtype)
    return Model(spec, dtype, noise, enc, downs, bottleneck, ups, decs, concats, head)


def param_count(spec):
    """Number of learnable scalars of a model built from `spec`
    (running statistics excluded)."""
    return build(spec, make_rng(0), dtype=np.float32).param_count()


def predict_labels(probs):
    """Argmax class id per voxel; ties resolve to the lowest class id."""
    return np.argmax(probs, axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# serialization
#
# Layout: magic "MODUNET1", a UTF-8 key=value header terminated by a blank
# line, little-endian float32 blobs for every parameter then every running
# statistic in the canonical model walk order, and an 8-byte BLAKE2b
# checksum of everything before it.


def serialize(model):
    buf = io.BytesIO()
    buf.write(SERIAL_MAGIC)
    buf.write(b"\n")
    for k, v in spec_to_dict(model.spec).items():
        buf.write(f"{k}={v}\n".encode())
    buf.write(b"\n")
    for _, arr in model.parameters().items():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for _, arr in model.state_arrays().items():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return payload + digest


def deserialize(data):
    if len(data) < len(SERIAL_MAGIC) + 9 or not data.startswith(SERIAL_MAGIC):
        raise ValueError("not a MODUNET1 model stream (bad magic or version)")
    payload, digest = data[:-8], data[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != digest:
        raise ValueError("model stream checksum mismatch (corrupted or truncated)")
    header_end = payload.index(b"\n\n", len(SERIAL_MAGIC))
    header = payload[len(SERIAL_MAGIC) + 1:header_end].decode()
    fields = {}
    for line in header.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            fields[k.strip()] = v.strip()
    spec = spec_from_dict(fields)
    model = build(spec, make_rng(0), dtype=np.float32)
    blob = payload[header_end + 2:]
    offset = 0
    for arr in list(model.parameters().values()) + list(model.state_arrays().values()):
        nbytes = arr.size * 4
        if offset + nbytes > len(blob):
            raise ValueError("model stream truncated inside parameter blobs")
        arr[...] = np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise ValueError("model stream has trailing bytes after parameter blobs")
    return model


def ablation_specs(base):
    """The nine single-change variants plus the reference, keyed by row name."""
    return {
        "reference": base,
        "no_dropout": replace(base, dropout_rate=0.0),
        "no_noise": replace(base, noise_std=0.0),
        "no_residual": replace(base, residual=False),
        "no_batchnorm": replace(base, norm=Norm.NONE),
        "separable_convs": replace(base, separable=True),
        "rigid_sampling": replace(base, sampling=Sampling.RIGID),
        "layernorm": replace(base, norm=Norm.LAYER),
        "u_depth_2": replace(base, u_depth=2),
        "u_depth_4": replace(base, u_depth=4),
    }
