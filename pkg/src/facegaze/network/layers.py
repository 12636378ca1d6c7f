"""Differentiable layer primitives operating on float64 numpy arrays.

Activations are shaped (B, C, H, W) for spatial layers and (B, F) for fully
connected ones.  Each layer caches what its backward pass needs; backward
returns the gradient w.r.t. the input and stores parameter gradients in
``self.grads`` keyed like ``self.params``.
"""

from __future__ import annotations

import math

import numpy as np


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = windows.reshape(b, c * k * k, oh * ow)
    return cols, oh, ow


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int, oh: int, ow: int):
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    dxp = np.zeros((b, c, hp, wp))
    d6 = dcols.reshape(b, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += d6[:, :, ki, kj]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


class Conv2D:
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int, stride: int = 1, pad: int = 0):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.params = {
            f"{name}.weight": (out_channels, in_channels, kernel, kernel),
            f"{name}.bias": (out_channels,),
        }
        self.weights: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def out_size(self, h: int, w: int):
        oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
        ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
        return oh, ow

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"{self.name}: expected {self.in_channels} input channels, got {x.shape[1]}")
        w = self.weights[f"{self.name}.weight"]
        b = self.weights[f"{self.name}.bias"]
        cols, oh, ow = _im2col(x, self.kernel, self.stride, self.pad)
        wmat = w.reshape(self.out_channels, -1)
        out = np.matmul(wmat[None], cols)
        out += b[None, :, None]
        self._cache = (x.shape, cols, oh, ow)
        return out.reshape(x.shape[0], self.out_channels, oh, ow)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, cols, oh, ow = self._cache
        b = dout.shape[0]
        dmat = dout.reshape(b, self.out_channels, oh * ow)
        w = self.weights[f"{self.name}.weight"]
        wmat = w.reshape(self.out_channels, -1)
        dw = np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0)
        self.grads[f"{self.name}.weight"] = dw.reshape(w.shape)
        self.grads[f"{self.name}.bias"] = dout.sum(axis=(0, 2, 3))
        dcols = np.matmul(wmat.T[None], dmat)
        return _col2im(dcols, x_shape, self.kernel, self.stride, self.pad, oh, ow)


class MaxPool2D:
    """Max pooling with ceil-mode output size; border windows are clipped."""

    def __init__(self, size: int, stride: int):
        self.size = size
        self.stride = stride
        self.params = {}
        self.weights = {}
        self.grads = {}
        self._cache = None

    def out_size(self, h: int, w: int):
        oh = math.ceil((h - self.size) / self.stride) + 1
        ow = math.ceil((w - self.size) / self.stride) + 1
        return oh, ow

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        k, s = self.size, self.stride
        oh, ow = self.out_size(h, w)
        hp = (oh - 1) * s + k
        wp = (ow - 1) * s + k
        xp = x
        if hp > h or wp > w:
            xp = np.full((b, c, hp, wp), -np.inf)
            xp[:, :, :h, :w] = x
        s0, s1, s2, s3 = xp.strides
        windows = np.lib.stride_tricks.as_strided(
            xp,
            shape=(b, c, oh, ow, k, k),
            strides=(s0, s1, s2 * s, s3 * s, s2, s3),
            writeable=False,
        ).reshape(b, c, oh, ow, k * k)
        arg = windows.argmax(axis=4)
        out = np.take_along_axis(windows, arg[..., None], axis=4)[..., 0]
        self._cache = ((b, c, h, w), (hp, wp), arg, (oh, ow))
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        (b, c, h, w), (hp, wp), arg, (oh, ow) = self._cache
        k, s = self.size, self.stride
        di = arg // k
        dj = arg % k
        rows = np.arange(oh)[None, None, :, None] * s + di
        cols = np.arange(ow)[None, None, None, :] * s + dj
        dxp = np.zeros((b, c, hp, wp))
        bidx = np.arange(b)[:, None, None, None]
        cidx = np.arange(c)[None, :, None, None]
        np.add.at(dxp, (bidx, cidx, rows, cols), dout)
        return dxp[:, :, :h, :w]

    def activation_pattern(self):
        return [self._cache[2]]


class ReLU:
    def __init__(self):
        self.params = {}
        self.weights = {}
        self.grads = {}
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask

    def activation_pattern(self):
        return [self._mask]


class Flatten:
    def __init__(self):
        self.params = {}
        self.weights = {}
        self.grads = {}
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout.reshape(self._shape)


class Linear:
    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            f"{name}.weight": (out_features, in_features),
            f"{name}.bias": (out_features,),
        }
        self.weights = {}
        self.grads = {}
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_features:
            raise ValueError(
                f"{self.name}: expected {self.in_features} features, got {x.shape[1]}")
        self._x = x
        w = self.weights[f"{self.name}.weight"]
        b = self.weights[f"{self.name}.bias"]
        return x @ w.T + b

    def backward(self, dout: np.ndarray) -> np.ndarray:
        w = self.weights[f"{self.name}.weight"]
        self.grads[f"{self.name}.weight"] = dout.T @ self._x
        self.grads[f"{self.name}.bias"] = dout.sum(axis=0)
        return dout @ w


def spatial_weights_forward(u: np.ndarray, layer: "SpatialWeights"):
    """Weight-map modulation: V_c = W (.) U_c for every channel c.

    Accepts (N, H, W) or batched (B, N, H, W); returns (v, wmap) with wmap
    shaped (H, W) or (B, H, W).
    """
    single = u.ndim == 3
    ub = u[None] if single else u
    v, wmap = layer.apply(ub)
    if single:
        return v[0], wmap[0]
    return v, wmap


def spatial_weights_backward(dv: np.ndarray, u: np.ndarray, wmap: np.ndarray):
    """Gradients of the modulation node alone.

    dU_c = W (.) dV_c per channel;  dW = (1/N) * sum_c dV_c (.) U_c, the
    weight-map gradient deliberately averaged over the N feature channels
    (its exact chain-rule value is the plain sum).
    """
    single = dv.ndim == 3
    dvb = dv[None] if single else dv
    ub = u[None] if single else u
    wb = wmap[None] if single else wmap
    if dvb.shape != ub.shape or wb.shape != (dvb.shape[0],) + dvb.shape[2:]:
        raise ValueError(
            f"shape mismatch: dV {dv.shape}, U {u.shape}, W {wmap.shape}")
    n = ub.shape[1]
    du = wb[:, None] * dvb
    dwmap = (dvb * ub).sum(axis=1) / n
    if single:
        return du[0], dwmap[0]
    return du, dwmap


class SpatialWeights:
    """Three 1x1 convolutions + ReLUs producing a single nonnegative weight
    map that multiplies every channel of the incoming activation.

    The weight-map gradient is averaged over the feature channels (1/N);
    all three 1x1-conv parameter gradients inherit that scaling.  The
    gradient passed down to the activation keeps its exact chain-rule
    value so the whole network below remains finite-difference exact.
    """

    def __init__(self, name: str, channels: int, widths: tuple[int, int]):
        self.name = name
        self.channels = channels
        self.widths = widths
        c1, c2 = widths
        self.params = {
            f"{name}1.weight": (c1, channels),
            f"{name}1.bias": (c1,),
            f"{name}2.weight": (c2, c1),
            f"{name}2.bias": (c2,),
            f"{name}3.weight": (1, c2),
            f"{name}3.bias": (1,),
        }
        self.weights = {}
        self.grads = {}
        self.last_weight_map: np.ndarray | None = None
        self._cache = None

    def _branch(self, key: str):
        return self.weights[f"{self.name}{key}"]

    def apply(self, u: np.ndarray):
        """Compute (V, weight map) for a batched activation (B, N, H, W)."""
        if u.shape[1] != self.channels:
            raise ValueError(
                f"{self.name}: expected {self.channels} channels, got {u.shape[1]}")
        b, n, h, w = u.shape
        flat = u.reshape(b, n, h * w)
        w1, b1 = self._branch("1.weight"), self._branch("1.bias")
        w2, b2 = self._branch("2.weight"), self._branch("2.bias")
        w3, b3 = self._branch("3.weight"), self._branch("3.bias")
        z1 = np.matmul(w1[None], flat) + b1[None, :, None]
        a1 = np.maximum(z1, 0.0)
        z2 = np.matmul(w2[None], a1) + b2[None, :, None]
        a2 = np.maximum(z2, 0.0)
        z3 = np.matmul(w3[None], a2) + b3[None, :, None]
        a3 = np.maximum(z3, 0.0)
        wmap = a3.reshape(b, h, w)
        v = u * wmap[:, None]
        self._cache = (u, flat, z1, a1, z2, a2, z3, wmap)
        self.last_weight_map = wmap[-1].copy()
        return v, wmap

    def forward(self, u: np.ndarray) -> np.ndarray:
        v, _ = self.apply(u)
        return v

    def backward(self, dv: np.ndarray) -> np.ndarray:
        u, flat, z1, a1, z2, a2, z3, wmap = self._cache
        b, n, h, w = u.shape
        du_direct = wmap[:, None] * dv
        # exact weight-map gradient; the 1/N lands on the branch parameters
        dwmap_exact = (dv * u).sum(axis=1).reshape(b, 1, h * w)
        w1 = self._branch("1.weight")
        w2 = self._branch("2.weight")
        w3 = self._branch("3.weight")
        dz3 = dwmap_exact * (z3 > 0)
        da2 = np.matmul(w3.T[None], dz3)
        dz2 = da2 * (z2 > 0)
        da1 = np.matmul(w2.T[None], dz2)
        dz1 = da1 * (z1 > 0)
        du_branch = np.matmul(w1.T[None], dz1).reshape(u.shape)
        self.grads[f"{self.name}1.weight"] = np.matmul(dz1, flat.transpose(0, 2, 1)).sum(axis=0) / n
        self.grads[f"{self.name}1.bias"] = dz1.sum(axis=(0, 2)) / n
        self.grads[f"{self.name}2.weight"] = np.matmul(dz2, a1.transpose(0, 2, 1)).sum(axis=0) / n
        self.grads[f"{self.name}2.bias"] = dz2.sum(axis=(0, 2)) / n
        self.grads[f"{self.name}3.weight"] = np.matmul(dz3, a2.transpose(0, 2, 1)).sum(axis=0) / n
        self.grads[f"{self.name}3.bias"] = dz3.sum(axis=(0, 2)) / n
        return du_direct + du_branch

    def activation_pattern(self):
        _, _, z1, _, z2, _, z3, _ = self._cache
        return [z1 > 0, z2 > 0, z3 > 0]
