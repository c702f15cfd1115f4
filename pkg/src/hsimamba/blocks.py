"""Network layers from input patch to class logits.

Patches enter as (n, B, B, d). Tokens are kept channels-last as
(n, P, P, K, M) with P = B - kH + 1 and K = d - kS + 1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .routes import Route, n_branches, route_scan
from .ssm import S6Params, init_s6

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ArchConfig:
    n_classes: int
    patch_size: int
    pca_dim: int
    embed_dim: int = 32
    depth: int = 1
    state_size: int = 16
    expansion: int = 2
    route: Route = Route.PARALLEL_SPECTRAL_SPATIAL
    conv_channels: int = 32
    kernel: tuple[int, int, int] = (3, 5, 5)
    head_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "route", Route.parse(self.route))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.patch_size < self.kernel[1] or self.pca_dim < self.kernel[0]:
            raise ValueError(
                f"patch {self.patch_size}x{self.patch_size}x{self.pca_dim} too small for kernel {self.kernel}")

    @property
    def token_size(self) -> int:
        return self.patch_size - self.kernel[1] + 1

    @property
    def token_bands(self) -> int:
        return self.pca_dim - self.kernel[0] + 1

    @property
    def inner_dim(self) -> int:
        return self.expansion * self.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["route"] = self.route.slug
        d["kernel"] = list(self.kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), True)


# ----------------------------------------------------------------- layers

@dataclass
class Conv3dLayer:
    weight: Tensor   # (C_out, C_in, kS, kH, kW)
    bias: Tensor     # (C_out,)

    @classmethod
    def init(cls, c_in, c_out, kernel, rng) -> "Conv3dLayer":
        fan_in = c_in * int(np.prod(kernel))
        return cls(_uniform(rng, fan_in, (c_out, c_in) + tuple(kernel)), _uniform(rng, fan_in, (c_out,)))

    def parameters(self, prefix=""):
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


@dataclass
class Linear:
    weight: Tensor   # (out, in)
    bias: Tensor     # (out,)

    @classmethod
    def init(cls, d_in, d_out, rng) -> "Linear":
        return cls(_uniform(rng, d_in, (d_out, d_in)), _uniform(rng, d_in, (d_out,)))

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self, prefix=""):
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


@dataclass
class LayerNorm:
    scale: Tensor    # (P, P, K, 1)
    shift: Tensor

    @classmethod
    def init(cls, P, K) -> "LayerNorm":
        return cls(Tensor(np.ones((P, P, K, 1)), True), Tensor(np.zeros((P, P, K, 1)), True))

    def parameters(self, prefix=""):
        return {prefix + "scale": self.scale, prefix + "shift": self.shift}


def conv3d_forward(x, layer: Conv3dLayer) -> Tensor:
    """Valid cross-correlation plus bias. Accepts (C_in, S, H, W) or a batch of them."""
    x = ad.as_tensor(x)
    if x.ndim == 4:
        return _conv_single(x, layer)
    return ad.conv3d(x, layer.weight, layer.bias)


def _conv_single(x: Tensor, layer: Conv3dLayer) -> Tensor:
    y = ad.conv3d(ad.reshape(x, (1,) + x.shape), layer.weight, layer.bias)
    return ad.reshape(y, y.shape[1:])


def pointwise_conv(x, layer: Conv3dLayer) -> Tensor:
    """1x1x1 conv on channels-last tokens, computed as a channel-mixing linear map."""
    c_out, c_in = layer.weight.shape[:2]
    if layer.weight.shape[2:] != (1, 1, 1):
        raise ValueError(f"pointwise conv needs a 1x1x1 kernel, got {layer.weight.shape[2:]}")
    return ad.linear(x, ad.reshape(layer.weight, (c_out, c_in)), layer.bias)


def layer_norm(x, scale, shift) -> Tensor:
    """Normalize each channel over the (P, P, K) token axes, then scale and shift.

    The variance is floored at LN_EPS rather than offset by it, so constant
    tokens map to zero and standardized tokens pass through unchanged.
    """
    x = ad.as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"layer_norm expects (n, P, P, K, C) tokens, got {x.shape}")
    return ad.add(ad.mul(ad.normalize(x, (1, 2, 3), LN_EPS, floor=True), scale), shift)


silu = ad.silu


# ------------------------------------------------------------------ SSTG

@dataclass
class SstgParams:
    conv: Conv3dLayer
    bn_gamma: Tensor
    bn_beta: Tensor
    embed: Linear
    running_mean: np.ndarray = field(repr=False, default=None)
    running_var: np.ndarray = field(repr=False, default=None)

    @classmethod
    def init(cls, arch: ArchConfig, rng) -> "SstgParams":
        c = arch.conv_channels
        return cls(Conv3dLayer.init(1, c, arch.kernel, rng),
                   Tensor(np.ones(c), True), Tensor(np.zeros(c), True),
                   Linear.init(c, arch.embed_dim, rng),
                   np.zeros(c), np.ones(c))

    def parameters(self, prefix=""):
        return {**self.conv.parameters(prefix + "conv."),
                prefix + "bn.gamma": self.bn_gamma, prefix + "bn.beta": self.bn_beta,
                **self.embed.parameters(prefix + "embed.")}

    def buffers(self, prefix=""):
        return {prefix + "bn.running_mean": self.running_mean, prefix + "bn.running_var": self.running_var}


def sstg_forward(patches, params: SstgParams, training: bool = False) -> Tensor:
    """conv -> batch norm -> ReLU -> channel embedding; (n, B, B, d) -> (n, P, P, K, M).

    In training mode batch statistics are used and the running statistics are
    updated in place; otherwise the running statistics are used.
    """
    patches = ad.as_tensor(patches)
    if patches.ndim == 3:
        patches = ad.reshape(patches, (1,) + patches.shape)
    if patches.ndim != 4 or patches.shape[1] != patches.shape[2]:
        raise ValueError(f"expected (n, B, B, d) patches, got {patches.shape}")
    kS, kH, kW = params.conv.weight.shape[2:]
    n, B, _, d = patches.shape
    if B < kH or B < kW or d < kS:
        raise ValueError(f"patch {B}x{B}x{d} too small for kernel {(kS, kH, kW)}")
    # (n, B, B, d) -> (n, 1, d, B, B)
    x = ad.reshape(ad.transpose(patches, (0, 3, 1, 2)), (n, 1, d, B, B))
    y = ad.conv3d(x, params.conv.weight, params.conv.bias)            # n, C, K, P, P
    y = ad.transpose(y, (0, 3, 4, 2, 1))                               # n, P, P, K, C
    if training:
        axes = (0, 1, 2, 3)
        m = y.data.mean(axis=axes)
        v = y.data.var(axis=axes)
        params.running_mean[...] = BN_MOMENTUM * params.running_mean + (1 - BN_MOMENTUM) * m
        params.running_var[...] = BN_MOMENTUM * params.running_var + (1 - BN_MOMENTUM) * v
        yn = ad.normalize(y, axes, BN_EPS)
    else:
        inv = 1.0 / np.sqrt(params.running_var + BN_EPS)
        yn = ad.mul(ad.sub(y, params.running_mean), inv)
    y = ad.relu(ad.add(ad.mul(yn, params.bn_gamma), params.bn_beta))
    return params.embed(y)


# ------------------------------------------------------------------- 3DMB

@dataclass
class BlockParams:
    norm1: LayerNorm
    lin_in_gate: Linear
    lin_in_main: Linear
    pointwise: Conv3dLayer
    s6_sets: list[S6Params]
    norm2: LayerNorm
    lin_out: Linear

    @classmethod
    def init(cls, arch: ArchConfig, rng) -> "BlockParams":
        M, E, P, K = arch.embed_dim, arch.inner_dim, arch.token_size, arch.token_bands
        return cls(
            LayerNorm.init(P, K),
            Linear.init(M, E, rng),
            Linear.init(M, E, rng),
            Conv3dLayer.init(E, E, (1, 1, 1), rng),
            [init_s6(E, arch.state_size, rng) for _ in range(n_branches(arch.route))],
            LayerNorm.init(P, K),
            Linear.init(E, M, rng),
        )

    def parameters(self, prefix=""):
        out = {**self.norm1.parameters(prefix + "norm1."),
               **self.lin_in_gate.parameters(prefix + "lin_in_gate."),
               **self.lin_in_main.parameters(prefix + "lin_in_main."),
               **self.pointwise.parameters(prefix + "pointwise.")}
        for i, s in enumerate(self.s6_sets):
            out.update(s.parameters(f"{prefix}s6.{i}."))
        out.update(self.norm2.parameters(prefix + "norm2."))
        out.update(self.lin_out.parameters(prefix + "lin_out."))
        return out


def mamba_block_forward(tokens, params: BlockParams, route, scan=None) -> Tensor:
    """Gated spectral-spatial Mamba block with residual; output shape = input shape."""
    T = ad.as_tensor(tokens)
    if T.ndim != 5:
        raise ValueError(f"expected (n, P, P, K, M) tokens, got {T.shape}")
    if T.shape[1:4] != params.norm1.scale.shape[:3] or T.shape[4] != params.lin_in_gate.weight.shape[1]:
        raise ValueError(
            f"token shape {T.shape[1:]} does not match block params "
            f"(P, P, K)={params.norm1.scale.shape[:3]}, M={params.lin_in_gate.weight.shape[1]}")
    h = layer_norm(T, params.norm1.scale, params.norm1.shift)
    z = ad.silu(params.lin_in_gate(h))
    F = ad.silu(pointwise_conv(params.lin_in_main(h), params.pointwise))
    Y = route_scan(F, route, params.s6_sets, scan)
    Y = layer_norm(Y, params.norm2.scale, params.norm2.shift)
    return ad.add(params.lin_out(ad.mul(Y, z)), T)


# ------------------------------------------------------------------ model

@dataclass
class HeadParams:
    hidden: Linear
    out: Linear

    @classmethod
    def init(cls, arch: ArchConfig, rng) -> "HeadParams":
        return cls(Linear.init(arch.embed_dim, arch.head_hidden, rng),
                   Linear.init(arch.head_hidden, arch.n_classes, rng))

    def parameters(self, prefix=""):
        return {**self.hidden.parameters(prefix + "hidden."), **self.out.parameters(prefix + "out.")}


def head_forward(features, head: HeadParams) -> Tensor:
    return head.out(ad.silu(head.hidden(features)))


@dataclass
class Model:
    arch: ArchConfig
    sstg: SstgParams
    blocks: list[BlockParams]
    head: HeadParams

    @classmethod
    def init(cls, arch: ArchConfig, rng: np.random.Generator) -> "Model":
        sstg = SstgParams.init(arch, rng)
        blocks = [BlockParams.init(arch, rng) for _ in range(arch.depth)]
        return cls(arch, sstg, blocks, HeadParams.init(arch, rng))

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.sstg.parameters("sstg.")
        for i, b in enumerate(self.blocks):
            out.update(b.parameters(f"blocks.{i}."))
        out.update(self.head.parameters("head."))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return self.sstg.buffers("sstg.")

    def state(self) -> dict[str, np.ndarray]:
        return {**{k: t.data for k, t in self.named_parameters().items()}, **self.buffers()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.named_parameters(), self.buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
        for k, b in bufs.items():
            b[...] = state[k]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


def model_logits(patches, model: Model, training: bool = False, scan=None) -> Tensor:
    tokens = sstg_forward(patches, model.sstg, training)
    for block in model.blocks:
        tokens = mamba_block_forward(tokens, block, model.arch.route, scan)
    pooled = ad.mean(tokens, axis=(1, 2, 3))
    return head_forward(pooled, model.head)


def model_forward(patch, model, n_classes: int | None = None) -> np.ndarray:
    """Class probabilities for one B x B x d patch (or a batch of them), eval mode.

    ``model`` may be a :class:`Model` or anything with a ``to_model()`` method.
    """
    if not isinstance(model, Model):
        model = model.to_model()
    if n_classes is not None and n_classes != model.arch.n_classes:
        raise ValueError(f"class count {n_classes} != model's {model.arch.n_classes}")
    patch = np.asarray(patch, dtype=np.float64)
    single = patch.ndim == 3
    batch = patch[None] if single else patch
    B, d = model.arch.patch_size, model.arch.pca_dim
    if batch.shape[1:] != (B, B, d):
        raise ValueError(f"patch shape {batch.shape[1:]} != model input {(B, B, d)}")
    probs = ad.softmax(model_logits(batch, model, training=False)).data
    return probs[0] if single else probs


def predict_classes(patches: np.ndarray, model: Model, chunk: int = 256) -> np.ndarray:
    """Argmax labels (1-based); ties go to the lowest class index."""
    out = []
    for i in range(0, len(patches), chunk):
        logits = model_logits(patches[i:i + chunk], model, training=False).data
        out.append(np.argmax(logits, axis=1) + 1)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ------------------------------------------------- registered composite ops

def _tiny_arch(**kw) -> ArchConfig:
    base = dict(n_classes=2, patch_size=6, pca_dim=5, embed_dim=2, depth=1, state_size=2,
                expansion=2, route=Route.PARALLEL_SPECTRAL_SPATIAL, conv_channels=3,
                kernel=(3, 5, 5), head_hidden=4)
    base.update(kw)
    return ArchConfig(**base)


def _randomize(tensors: Sequence[Tensor], rng) -> list[np.ndarray]:
    # biases/affines drawn away from their identity init so every path is exercised
    return [t.data + 0.3 * rng.standard_normal(t.shape) for t in tensors]


def _block_op_factory(route):
    arch = _tiny_arch(route=route)
    skeleton = BlockParams.init(arch, np.random.default_rng(0))
    names = list(skeleton.parameters())

    def fn(tokens, *tensors):
        params = BlockParams.init(arch, np.random.default_rng(0))
        for k, t in zip(names, tensors):
            _assign(params, k, t)
        return mamba_block_forward(tokens, params, route)

    def make_inputs(shapes, rng):
        params = BlockParams.init(arch, rng)
        tensors = list(params.parameters().values())
        arrays = _randomize(tensors, rng)
        for i, k in enumerate(names):
            if k.endswith("A_log"):
                arrays[i] = tensors[i].data
            if "dt_bias" in k:
                arrays[i] = rng.uniform(-2.0, 0.0, tensors[i].shape)
        return [rng.standard_normal((2, arch.token_size, arch.token_size, arch.token_bands, arch.embed_dim))] + arrays

    shapes = [(2, arch.token_size, arch.token_size, arch.token_bands, arch.embed_dim)] + \
        [t.shape for t in skeleton.parameters().values()]
    return fn, shapes, make_inputs


def _assign(container, dotted: str, tensor: Tensor) -> None:
    obj = container
    parts = dotted.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, {"s6": "s6_sets"}.get(part, part))
    setattr(obj, parts[-1], tensor)


def _model_op_factory():
    arch = _tiny_arch()
    skeleton = Model.init(arch, np.random.default_rng(0))
    param_names = list(skeleton.named_parameters())

    def fn(patches, *tensors):
        model = Model.init(arch, np.random.default_rng(0))
        # running statistics fixed so the function is the eval-mode network
        model.sstg.running_mean[...] = 0.1
        model.sstg.running_var[...] = 1.5
        by_name = dict(zip(param_names, tensors))
        for k, t in by_name.items():
            _assign_model(model, k, t)
        return model_logits(patches, model, training=False)

    def make_inputs(shapes, rng):
        model = Model.init(arch, rng)
        tensors = list(model.named_parameters().values())
        arrays = _randomize(tensors, rng)
        for i, k in enumerate(param_names):
            if k.endswith("A_log"):
                arrays[i] = tensors[i].data
            if "dt_bias" in k:
                arrays[i] = rng.uniform(-2.0, 0.0, tensors[i].shape)
        return [rng.standard_normal((3, arch.patch_size, arch.patch_size, arch.pca_dim))] + arrays

    shapes = [(3, arch.patch_size, arch.patch_size, arch.pca_dim)] + \
        [t.shape for t in skeleton.named_parameters().values()]
    return fn, shapes, make_inputs


def _assign_model(model: Model, dotted: str, tensor: Tensor) -> None:
    head, rest = dotted.split(".", 1)
    if head == "sstg":
        mapping = {"conv.weight": ("conv", "weight"), "conv.bias": ("conv", "bias"),
                   "bn.gamma": (None, "bn_gamma"), "bn.beta": (None, "bn_beta"),
                   "embed.weight": ("embed", "weight"), "embed.bias": ("embed", "bias")}
        sub, attr = mapping[rest]
        setattr(getattr(model.sstg, sub) if sub else model.sstg, attr, tensor)
    elif head == "blocks":
        idx, rest = rest.split(".", 1)
        _assign(model.blocks[int(idx)], rest, tensor)
    else:
        _assign(model.head, rest, tensor)


for _route in Route:
    ad.register_op(f"mamba_block[{_route.slug}]", *_block_op_factory(_route))
ad.register_op("model", *_model_op_factory())
ad.register_op("layer_norm", lambda x, s, b: layer_norm(x, s, b), [(2, 2, 2, 3, 2), (2, 2, 3, 1), (2, 2, 3, 1)])
ad.register_op("batch_norm_train", lambda x: ad.normalize(x, (0, 1, 2, 3), BN_EPS), [(2, 2, 2, 3, 2)])
