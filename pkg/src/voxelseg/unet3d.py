"""Five-level 3D U-Net: forward pass with cache and exact backward pass."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor_core as tc
from .errors import BadConfig, ShapeMismatch, StaleCache


@dataclasses.dataclass(frozen=True)
class UNetConfig:
    input_spatial: tuple[int, int, int] = (128, 128, 128)
    in_channels: int = 3
    num_classes: int = 4
    base_filters: int = 32
    depth: int = 5
    dropout_schedule: tuple[float, ...] = (0.1, 0.1, 0.2, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise BadConfig("depth must be at least 2")
        if len(self.dropout_schedule) != self.depth:
            raise BadConfig(f"dropout schedule needs {self.depth} rates, got {len(self.dropout_schedule)}")
        div = 2 ** (self.depth - 1)
        if any(n % div for n in self.input_spatial):
            raise BadConfig(f"spatial dims {self.input_spatial} must be divisible by {div}")
        if self.base_filters < 1 or self.in_channels < 1 or self.num_classes < 2:
            raise BadConfig("filters, input channels and classes must be positive (classes >= 2)")

    @property
    def filters(self) -> tuple[int, ...]:
        return tuple(self.base_filters * 2**level for level in range(self.depth))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        d = dict(d)
        d["input_spatial"] = tuple(d["input_spatial"])
        d["dropout_schedule"] = tuple(d["dropout_schedule"])
        return cls(**d)


def param_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter, in canonical order."""
    f = config.filters
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (k, k, k, cin, cout)
        shapes[f"{name}.b"] = (cout,)

    cin = config.in_channels
    for level in range(config.depth - 1):
        conv(f"enc{level}.conv1", cin, f[level])
        conv(f"enc{level}.conv2", f[level], f[level])
        cin = f[level]
    conv("bottleneck.conv1", cin, f[-1])
    conv("bottleneck.conv2", f[-1], f[-1])
    for level in reversed(range(config.depth - 1)):
        shapes[f"dec{level}.up.w"] = (2, 2, 2, f[level], f[level + 1])
        shapes[f"dec{level}.up.b"] = (f[level],)
        conv(f"dec{level}.conv1", 2 * f[level], f[level])
        conv(f"dec{level}.conv2", f[level], f[level])
    conv("head", f[0], config.num_classes, k=1)
    return shapes


def build(config: UNetConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal kernels and zero biases, drawn in canonical order from ``config.seed``."""
    rng = tc.make_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".w"):
            params[name] = tc.he_normal_init(shape, rng, dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


@dataclasses.dataclass
class ForwardCache:
    config: UNetConfig
    input_shape: tuple[int, ...]
    blocks: dict[str, tuple]
    pool_idx: dict[int, np.ndarray]
    up_inputs: dict[int, np.ndarray]
    head_input: np.ndarray
    probs: np.ndarray


def _block_forward(params, name, x, rate, train, rng, blocks):
    z1 = tc.conv3d_forward(x, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"])
    a1 = tc.relu(z1)
    d1, mult = tc.dropout(a1, rate, train, rng)
    z2 = tc.conv3d_forward(d1, params[f"{name}.conv2.w"], params[f"{name}.conv2.b"])
    if train:
        blocks[name] = (x, z1, d1, mult, z2)
    return tc.relu(z2)


def _block_backward(params, name, blocks, da2, grads):
    x, z1, d1, mult, z2 = blocks[name]
    dz2 = tc.relu_backward(z2, da2)
    dd1, grads[f"{name}.conv2.w"], grads[f"{name}.conv2.b"] = tc.conv3d_backward(d1, params[f"{name}.conv2.w"], dz2)
    dz1 = tc.relu_backward(z1, tc.dropout_backward(dd1, mult))
    dx, grads[f"{name}.conv1.w"], grads[f"{name}.conv1.b"] = tc.conv3d_backward(x, params[f"{name}.conv1.w"], dz1)
    return dx


def forward(
    params: dict[str, np.ndarray],
    batch: np.ndarray,
    config: UNetConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache | None]:
    """Class probabilities ``(N, D, H, W, num_classes)``; a cache only in train mode.

    Each level runs conv-relu, dropout, conv-relu. Decoder levels first
    upsample with a transposed conv and concatenate the same-level encoder
    output after the upsampled map.
    """
    if batch.ndim != 5 or batch.shape[1:4] != tuple(config.input_spatial) or batch.shape[-1] != config.in_channels:
        raise ShapeMismatch(
            f"batch {batch.shape} does not match (N, {config.input_spatial}, {config.in_channels})"
        )
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    dtype = params["head.w"].dtype
    rates = config.dropout_schedule
    blocks: dict[str, tuple] = {}
    pool_idx: dict[int, np.ndarray] = {}
    up_inputs: dict[int, np.ndarray] = {}

    h = np.asarray(batch, dtype=dtype)
    skips = []
    for level in range(config.depth - 1):
        s = _block_forward(params, f"enc{level}", h, rates[level], train, rng, blocks)
        skips.append(s)
        h, idx = tc.maxpool3d_forward(s)
        pool_idx[level] = idx
    h = _block_forward(params, "bottleneck", h, rates[-1], train, rng, blocks)
    for level in reversed(range(config.depth - 1)):
        if train:
            up_inputs[level] = h
        u = tc.convtrans3d_forward(h, params[f"dec{level}.up.w"], params[f"dec{level}.up.b"])
        h = _block_forward(params, f"dec{level}", tc.concat_channels(u, skips[level]), rates[level], train, rng, blocks)
    logits = tc.conv3d_forward(h, params["head.w"], params["head.b"])
    probs = tc.check_finite("probs", tc.softmax_channels(logits))
    if not train:
        return probs, None
    return probs, ForwardCache(config, batch.shape, blocks, pool_idx, up_inputs, h, probs)


def backward(params: dict[str, np.ndarray], cache: ForwardCache | None, dprobs: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter, given dloss/dprobs."""
    if cache is None:
        raise StaleCache("backward needs the cache of a train-mode forward pass")
    if dprobs.shape != cache.probs.shape:
        raise StaleCache(f"loss gradient {dprobs.shape} does not belong to cached batch {cache.probs.shape}")
    config = cache.config
    grads: dict[str, np.ndarray] = {}

    dlogits = tc.softmax_backward(cache.probs, dprobs)
    dh, grads["head.w"], grads["head.b"] = tc.conv3d_backward(cache.head_input, params["head.w"], dlogits)
    dskips: dict[int, np.ndarray] = {}
    for level in range(config.depth - 1):
        dc = _block_backward(params, f"dec{level}", cache.blocks, dh, grads)
        n_up = params[f"dec{level}.up.w"].shape[3]
        du, dskips[level] = dc[..., :n_up], dc[..., n_up:]
        dh, grads[f"dec{level}.up.w"], grads[f"dec{level}.up.b"] = tc.convtrans3d_backward(
            cache.up_inputs[level], params[f"dec{level}.up.w"], np.ascontiguousarray(du)
        )
    dh = _block_backward(params, "bottleneck", cache.blocks, dh, grads)
    for level in reversed(range(config.depth - 1)):
        ds = tc.maxpool3d_backward(dh, cache.pool_idx[level]) + dskips[level]
        dh = _block_backward(params, f"enc{level}", cache.blocks, ds, grads)
    return {name: grads[name] for name in params}


def predict_labels(params: dict[str, np.ndarray], batch: np.ndarray, config: UNetConfig) -> np.ndarray:
    probs, _ = forward(params, batch, config, train=False)
    return probs.argmax(axis=-1).astype(np.uint8)
