"""Encoders, decoder, projectors and classifier of the cascaded two-stream model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffnum import checkpoint, ops
from .diffnum.tensor import DimensionError, Tensor, as_tensor
from .spectrum import compute_spectrum

VARIANTS = ("full", "tt_recon", "no_recon", "single_time_stream", "base_model", "tfr_only")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    channels: int
    length: int
    filters: int = 16
    tfr_kernel: int = 25
    tfr_padding: int = 12
    tf_kernel: int = 49
    tf_padding: int = 24
    fuse_kernel: int = 3
    pool: int = 4
    leaky_slope: float = 0.01
    proj_hidden: int = 256
    proj_out: int = 128
    cls_hidden: int = 30
    n_classes: int = 2

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ConfigurationError(
                f"hemisphere kernels need an even channel count, got {self.channels}"
            )
        if self.length < self.pool:
            raise ConfigurationError(f"segment length {self.length} shorter than pool {self.pool}")

    @property
    def stream_width(self) -> int:
        return (self.length - self.pool) // self.pool + 1

    @property
    def stream_dim(self) -> int:
        return self.filters * self.stream_width

    def classifier_in(self, variant: str) -> int:
        if variant in ("full", "tt_recon", "no_recon"):
            return 2 * self.stream_dim
        if variant in ("single_time_stream", "base_model"):
            return self.stream_dim
        if variant == "tfr_only":
            return self.channels * self.length
        raise ConfigurationError(f"unknown variant {variant!r}")


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Holds named parameter tensors and non-trainable buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v for k, v in self.buffers.items()}

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


class TfrEncoderDecoder(Module):
    """Depthwise 1-D conv encoder and a time-axis linear decoder shared by all channels."""

    def __init__(self, geo: Geometry, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.geo = geo
        c, t, k = geo.channels, geo.length, geo.tfr_kernel
        self.params = {
            "conv_w": _uniform(rng, (c, k), k, dtype),
            "conv_b": _zeros((c,), dtype),
            "dec_w": _uniform(rng, (t, t), t, dtype),
            "dec_b": _zeros((t,), dtype),
        }

    def encode(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-2] != self.geo.channels:
            raise DimensionError(
                f"TFR encoder has {self.geo.channels} channel kernels, input has {x.shape[-2]}"
            )
        p = self.params
        return ops.conv1d_depthwise(x, p["conv_w"], p["conv_b"], 1, self.geo.tfr_padding)

    def decode(self, r: Tensor) -> Tensor:
        if r.shape[-1] != self.geo.length:
            raise DimensionError(f"decoder expects length {self.geo.length}, got {r.shape[-1]}")
        return ops.linear(r, self.params["dec_w"], self.params["dec_b"])


class StreamEncoder(Module):
    """tf conv -> {global, hemisphere} spatial convs -> concat -> fuse -> LeakyReLU -> avg pool."""

    def __init__(self, geo: Geometry, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.geo = geo
        f, c, half = geo.filters, geo.channels, geo.channels // 2
        self.params = {
            "tf_w": _uniform(rng, (f, 1, 1, geo.tf_kernel), geo.tf_kernel, dtype),
            "tf_b": _zeros((f,), dtype),
            "glb_w": _uniform(rng, (f, f, c, 1), f * c, dtype),
            "glb_b": _zeros((f,), dtype),
            "hem_w": _uniform(rng, (f, f, half, 1), f * half, dtype),
            "hem_b": _zeros((f,), dtype),
            "fuse_w": _uniform(rng, (f, f, geo.fuse_kernel, 1), f * geo.fuse_kernel, dtype),
            "fuse_b": _zeros((f,), dtype),
        }

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        n, c, t = x.shape
        if c != self.geo.channels:
            raise DimensionError(f"stream encoder built for {self.geo.channels} channels, got {c}")
        p = self.params
        half = c // 2
        h1 = ops.conv2d(
            ops.reshape(x, (n, 1, c, t)), p["tf_w"], p["tf_b"], (1, 1), (0, self.geo.tf_padding)
        )
        h_glb = ops.conv2d(h1, p["glb_w"], p["glb_b"], (1, 1), (0, 0))
        h_hem = ops.conv2d(h1, p["hem_w"], p["hem_b"], (half, 1), (0, 0))
        h2 = ops.concat([h_glb, h_hem], axis=2)
        h_fu = ops.conv2d(h2, p["fuse_w"], p["fuse_b"], (1, 1), (0, 0))
        act = ops.leaky_relu(h_fu, self.geo.leaky_slope)
        return ops.avg_pool2d(act, (1, self.geo.pool), (1, self.geo.pool))


class Projector(Module):
    def __init__(self, geo: Geometry, d_in: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        hid, out = geo.proj_hidden, geo.proj_out
        self.params = {
            "fc1_w": _uniform(rng, (d_in, hid), d_in, dtype),
            "fc1_b": _zeros((hid,), dtype),
            "bn_gamma": Tensor(np.ones(hid, dtype=dtype), requires_grad=True),
            "bn_beta": _zeros((hid,), dtype),
            "fc2_w": _uniform(rng, (hid, out), hid, dtype),
            "fc2_b": _zeros((out,), dtype),
        }
        self.buffers = {
            "bn_running_mean": np.zeros(hid, dtype=dtype),
            "bn_running_var": np.ones(hid, dtype=dtype),
        }
        self.training = True

    def __call__(self, h: Tensor) -> Tensor:
        p = self.params
        if h.ndim != 2:
            h = ops.flatten(h, 1)
        a = ops.linear(h, p["fc1_w"], p["fc1_b"])
        a = ops.batch_norm(
            a,
            p["bn_gamma"],
            p["bn_beta"],
            self.buffers["bn_running_mean"],
            self.buffers["bn_running_var"],
            self.training,
        )
        return ops.linear(ops.relu(a), p["fc2_w"], p["fc2_b"])


class Classifier(Module):
    def __init__(self, geo: Geometry, d_in: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        hid, k = geo.cls_hidden, geo.n_classes
        self.d_in = d_in
        self.params = {
            "fc1_w": _uniform(rng, (d_in, hid), d_in, dtype),
            "fc1_b": _zeros((hid,), dtype),
            "fc2_w": _uniform(rng, (hid, hid), hid, dtype),
            "fc2_b": _zeros((hid,), dtype),
            "fc3_w": _uniform(rng, (hid, k), hid, dtype),
            "fc3_b": _zeros((k,), dtype),
        }

    def __call__(self, h: Tensor) -> Tensor:
        if h.ndim != 2 or h.shape[1] != self.d_in:
            raise DimensionError(f"classifier expects N x {self.d_in}, got {h.shape}")
        p = self.params
        a = ops.relu(ops.linear(h, p["fc1_w"], p["fc1_b"]))
        a = ops.relu(ops.linear(a, p["fc2_w"], p["fc2_b"]))
        return ops.linear(a, p["fc3_w"], p["fc3_b"])


class ModelBundle:
    """Every learnable group of the architecture for one variant."""

    COMPONENTS = ("tfr", "enc_t", "enc_f", "proj_t", "proj_f", "classifier")

    def __init__(self, geo: Geometry, variant: str = "full", seed: int = 0, dtype=np.float32):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.geo = geo
        self.variant = variant
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.tfr = TfrEncoderDecoder(geo, rng, dtype)
        self.enc_t = StreamEncoder(geo, rng, dtype)
        self.enc_f = StreamEncoder(geo, rng, dtype)
        self.proj_t = Projector(geo, geo.stream_dim, rng, dtype)
        self.proj_f = Projector(geo, geo.stream_dim, rng, dtype)
        self.classifier = Classifier(geo, geo.classifier_in(variant), rng, dtype)

    # -- parameter bookkeeping ---------------------------------------------------

    def modules(self) -> dict[str, Module]:
        return {name: getattr(self, name) for name in self.COMPONENTS}

    def parameters(self, components=None) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in components or self.COMPONENTS:
            out.update(getattr(self, name).named_parameters(name))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.COMPONENTS:
            out.update(getattr(self, name).named_buffers(name))
        return out

    def n_parameters(self) -> int:
        return sum(m.n_parameters() for m in self.modules().values())

    def set_training(self, training: bool) -> None:
        self.proj_t.training = training
        self.proj_f.training = training

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, safe to keep as a snapshot."""
        arrays = {k: v.data.copy() for k, v in self.parameters().items()}
        arrays.update({k: np.array(v, copy=True) for k, v in self.buffers().items()})
        return arrays

    def save(self, path) -> None:
        meta = {"geometry": asdict(self.geo), "variant": self.variant, "format": "model-bundle"}
        checkpoint.save(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path, geo: Geometry | None = None, dtype=np.float32) -> "ModelBundle":
        arrays, meta = checkpoint.load(path)
        stored = Geometry(**meta["geometry"])
        if geo is not None and geo != stored:
            raise ConfigurationError(f"checkpoint geometry {stored} != requested {geo}")
        bundle = cls(stored, meta["variant"], seed=0, dtype=dtype)
        bundle.load_arrays(arrays)
        return bundle

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        bufs = self.buffers()
        for name, arr in arrays.items():
            target = params[name].data if name in params else bufs.get(name)
            if target is None:
                raise ConfigurationError(f"checkpoint entry {name!r} has no counterpart")
            if target.shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {target.shape}")
            target[...] = arr

    # -- forward paths -------------------------------------------------------------

    def encode_tfr(self, x_t) -> Tensor:
        return self.tfr.encode(as_tensor(x_t, self.dtype))

    def decode_tfr(self, r_t: Tensor) -> Tensor:
        return self.tfr.decode(r_t)

    def encode_stream(self, x, which: str) -> Tensor:
        if which == "time":
            return self.enc_t(as_tensor(x, self.dtype))
        if which == "frequency":
            return self.enc_f(as_tensor(x, self.dtype))
        raise ValueError(f"stream must be 'time' or 'frequency', got {which!r}")

    def project(self, h: Tensor, which: str) -> Tensor:
        proj = {"time": self.proj_t, "frequency": self.proj_f}[which]
        return proj(ops.flatten(h, 1))

    def classify(self, h_cat: Tensor) -> Tensor:
        return self.classifier(h_cat)

    def representation(self, x_t, x_f=None) -> Tensor:
        """Classifier input for this bundle's variant (``N x D``)."""
        x_t = as_tensor(x_t, self.dtype)
        v = self.variant
        if v == "base_model":
            return ops.flatten(self.enc_t(x_t), 1)
        r_t = self.tfr.encode(x_t)
        if v == "tfr_only":
            return ops.flatten(r_t, 1)
        h_t = ops.flatten(self.enc_t(r_t), 1)
        if v == "single_time_stream":
            return h_t
        if x_f is None:
            x_f = compute_spectrum(x_t.data)
        h_f = ops.flatten(self.enc_f(as_tensor(x_f, self.dtype)), 1)
        return ops.concat([h_t, h_f], axis=1)

    def forward_prediction(self, x_t, x_f=None) -> Tensor:
        return self.classifier(self.representation(x_t, x_f))
