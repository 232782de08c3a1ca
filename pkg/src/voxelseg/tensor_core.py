"""Forward/backward kernels for the volumetric layers, initialisation and Adam.

Feature maps are channels-last numpy arrays ``(N, D, H, W, C)``. Every op
keeps the dtype of its inputs, so the same code runs in float32 for
training and float64 for gradient checks. Reductions run in a fixed order
(fixed chunking, BLAS GEMMs of fixed shape), so results are bit-identical
across runs on the same machine.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from .errors import BadRate, NonFiniteInput, OddSpatialDim, ShapeMismatch

# bound on the im2col buffer, in elements
_COLS_BUDGET = 1 << 22

CHECK_FINITE = os.environ.get("VOXELSEG_CHECK_FINITE", "") not in ("", "0")


def make_rng(seed: int) -> np.random.Generator:
    """The artifact's generator: numpy PCG64, stable across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name}: non-finite values")
    return arr


# ---------------------------------------------------------------- convolution


def _im2col_chunks(xp: np.ndarray, k: int, out_dhw: tuple[int, int, int]):
    """Yield ``(n, d0, d1, cols)`` with cols shaped ``(rows, k^3 * C)``.

    ``xp`` is the already padded input. Column order is (a, b, c, channel),
    matching a kernel reshaped from ``(k, k, k, C, Cout)``.
    """
    N = xp.shape[0]
    C = xp.shape[-1]
    D, H, W = out_dhw
    per_slice = H * W * k**3 * C
    step = max(1, min(D, _COLS_BUDGET // max(per_slice, 1)))
    for n in range(N):
        for d0 in range(0, D, step):
            d1 = min(D, d0 + step)
            cols = np.empty((d1 - d0, H, W, k, k, k, C), dtype=xp.dtype)
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        cols[:, :, :, a, b, c, :] = xp[n, d0 + a : d1 + a, b : b + H, c : c + W, :]
            yield n, d0, d1, cols.reshape((d1 - d0) * H * W, k**3 * C)


def _check_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> int:
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5-D input and kernel, got {x.shape} and {w.shape}")
    k = w.shape[0]
    if w.shape[:3] != (k, k, k) or k % 2 == 0:
        raise ShapeMismatch(f"conv3d kernel must be odd and cubic, got {w.shape}")
    if w.shape[3] != x.shape[-1]:
        raise ShapeMismatch(f"kernel expects {w.shape[3]} input channels, input has {x.shape[-1]}")
    if b.shape != (w.shape[4],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[4]} filters")
    return k


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 convolution with "same" zero padding.

    ``w`` is ``(k, k, k, Cin, Cout)`` with odd ``k`` (3 for the body, 1 for the head).
    """
    k = _check_conv(x, w, b)
    N, D, H, W, C = x.shape
    Co = w.shape[-1]
    if k == 1:
        y = x.reshape(-1, C) @ w.reshape(C, Co)
        y += b
        return y.reshape(N, D, H, W, Co)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    wm = w.reshape(k**3 * C, Co)
    y = np.empty((N, D, H, W, Co), dtype=np.result_type(x, w))
    for n, d0, d1, cols in _im2col_chunks(xp, k, (D, H, W)):
        out = cols @ wm
        out += b
        y[n, d0:d1] = out.reshape(d1 - d0, H, W, Co)
    return y


def conv3d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(dx, dw, db)`` of :func:`conv3d_forward`."""
    k = w.shape[0]
    N, D, H, W, C = x.shape
    Co = w.shape[-1]
    if dy.shape != (N, D, H, W, Co):
        raise ShapeMismatch(f"dy shape {dy.shape} does not match conv output {(N, D, H, W, Co)}")
    db = dy.reshape(-1, Co).sum(axis=0)
    if k == 1:
        wm = w.reshape(C, Co)
        dw = (x.reshape(-1, C).T @ dy.reshape(-1, Co)).reshape(w.shape)
        dx = (dy.reshape(-1, Co) @ wm.T).reshape(x.shape)
        return dx, dw, db
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    dw = np.zeros((k**3 * C, Co), dtype=np.result_type(x, dy))
    for n, d0, d1, cols in _im2col_chunks(xp, k, (D, H, W)):
        dw += cols.T @ dy[n, d0:d1].reshape(-1, Co)
    # input gradient: correlate dy with the spatially flipped, channel-transposed kernel
    w_t = np.ascontiguousarray(w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
    dx = conv3d_forward(dy, w_t, np.zeros(C, dtype=w.dtype))
    return dx, dw.reshape(w.shape), db


def convtrans3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transposed convolution, kernel 2x2x2 and stride 2, no padding.

    ``w`` is ``(2, 2, 2, Cout, Cin)``. Each input voxel scatters a weighted
    2x2x2 block, so every spatial dimension doubles.
    """
    if x.ndim != 5 or w.ndim != 5 or w.shape[:3] != (2, 2, 2) or w.shape[4] != x.shape[-1]:
        raise ShapeMismatch(f"transposed conv: input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (w.shape[3],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[3]} filters")
    N, D, H, W, C = x.shape
    Co = w.shape[3]
    wm = w.transpose(4, 0, 1, 2, 3).reshape(C, 8 * Co)
    y = (x.reshape(-1, C) @ wm).reshape(N, D, H, W, 2, 2, 2, Co)
    y = y.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(N, 2 * D, 2 * H, 2 * W, Co)
    y += b
    return y


def convtrans3d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    N, D, H, W, C = x.shape
    Co = w.shape[3]
    if dy.shape != (N, 2 * D, 2 * H, 2 * W, Co):
        raise ShapeMismatch(f"dy shape {dy.shape} does not match transposed conv output")
    blocks = dy.reshape(N, D, 2, H, 2, W, 2, Co).transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, 8 * Co)
    wm = w.transpose(4, 0, 1, 2, 3).reshape(C, 8 * Co)
    dx = (blocks @ wm.T).reshape(x.shape)
    dwm = x.reshape(-1, C).T @ blocks
    dw = dwm.reshape(C, 2, 2, 2, Co).transpose(1, 2, 3, 4, 0)
    db = dy.reshape(-1, Co).sum(axis=0)
    return dx, np.ascontiguousarray(dw), db


# ------------------------------------------------------------------- pooling


def maxpool3d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2x2 max pooling with stride 2.

    Returns the pooled map and, per output element, the position (0..7)
    of the winner inside its block. Ties go to the lowest flat index.
    """
    N, D, H, W, C = x.shape
    if D % 2 or H % 2 or W % 2:
        raise OddSpatialDim(f"max pooling needs even spatial dims, got {x.shape[1:4]}")
    blocks = x.reshape(N, D // 2, 2, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    blocks = blocks.reshape(N, D // 2, H // 2, W // 2, C, 8)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.uint8)


def maxpool3d_backward(dy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    N, d, h, w, C = dy.shape
    if idx.shape != dy.shape:
        raise ShapeMismatch(f"argmax indices {idx.shape} do not match dy {dy.shape}")
    blocks = np.zeros((N, d, h, w, C, 8), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = blocks.reshape(N, d, h, w, C, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return dx.reshape(N, 2 * d, 2 * h, 2 * w, C)


def upsample_nearest(x: np.ndarray) -> np.ndarray:
    """Repeat each voxel into a 2x2x2 block."""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


# -------------------------------------------------------- pointwise + misc


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def dropout(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns the output and the multiplier mask used (None in infer mode)."""
    if not 0 <= rate < 1:
        raise BadRate(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mult = keep.astype(x.dtype) * scale
    return x * mult, mult


def dropout_backward(dy: np.ndarray, mult: np.ndarray | None) -> np.ndarray:
    return dy if mult is None else dy * mult


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=-1)


def he_normal_init(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal with stddev sqrt(2 / fan_in), fan_in = prod(shape[:-1])."""
    fan_in = int(np.prod(shape[:-1]))
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------------- Adam


@dataclasses.dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> AdamState:
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One Adam update, in place on ``params`` and ``state``."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {grads[name].shape} vs parameter {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
