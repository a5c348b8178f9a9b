"""Differentiable volumetric network primitives.

3D convolution (grouped and transposed), average pooling, interpolation
upsampling, and instance normalization, all operating on 5-axis tensors
``(batch, channel, depth, height, width)``.

Convolution is cross-correlation (no kernel flip). The transposed
convolution and the input-gradient of the forward convolution are the
same linear map, so both directions share one pair of raw helpers and
the adjoint identity ``<conv(x), y> == <x, conv_t(y)>`` holds by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scseg.tensor import ShapeError, Tensor

__all__ = [
    "Conv3dParams",
    "InstanceNormParams",
    "conv3d",
    "conv_transpose3d",
    "avg_pool3d",
    "upsample3d",
    "instance_norm",
]


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or a triple, got {v!r}")
    return t


@dataclass
class Conv3dParams:
    """Weights for one convolution: ``weight (out, in/groups, kd, kh, kw)``.

    The same parameter set drives :func:`conv3d` (mapping ``in -> out``
    channels) and :func:`conv_transpose3d` (the adjoint map ``out -> in``).
    ``bias`` must match the channel count the operation produces:
    ``weight.shape[0]`` for conv3d, ``weight.shape[1] * groups`` for the
    transpose.
    """

    weight: Tensor
    bias: Tensor
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.weight.ndim != 5:
            raise ShapeError(f"conv weight must be rank 5, got {self.weight.shape}")
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        if self.weight.shape[0] % self.groups != 0:
            raise ShapeError(
                f"out channels {self.weight.shape[0]} not divisible by groups {self.groups}")
        if any(s < 1 for s in self.stride):
            raise ValueError(f"stride must be positive, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be non-negative, got {self.padding}")


@dataclass
class InstanceNormParams:
    """Per-channel affine parameters for instance normalization."""

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.gamma.ndim != 1 or self.beta.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ShapeError(
                f"gamma/beta must be equal rank-1 shapes, got {self.gamma.shape} and {self.beta.shape}")


# -- raw numpy kernels ------------------------------------------------------


def _pad_spatial(x: np.ndarray, pad: tuple[int, int, int]) -> np.ndarray:
    if pad == (0, 0, 0):
        return x
    pd, ph, pw = pad
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _windows(xp: np.ndarray, k: tuple, stride: tuple) -> np.ndarray:
    """Strided view (B, C, Do, Ho, Wo, kd, kh, kw) over the padded input."""
    b, c, d, h, w = xp.shape
    kd, kh, kw = k
    sd, sh, sw = stride
    out = ((d - kd) // sd + 1, (h - kh) // sh + 1, (w - kw) // sw + 1)
    st = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (b, c, *out, kd, kh, kw),
        (st[0], st[1], st[2] * sd, st[3] * sh, st[4] * sw, st[2], st[3], st[4]),
        writeable=False,
    )


def _corr3d(x: np.ndarray, w: np.ndarray, stride: tuple, pad: tuple, groups: int) -> np.ndarray:
    """Grouped cross-correlation; x (B,Ci,D,H,W), w (Co,Ci/g,k,k,k) -> (B,Co,...)."""
    xp = _pad_spatial(x, pad)
    cig = x.shape[1] // groups
    cog = w.shape[0] // groups
    outs = []
    for g in range(groups):
        win = _windows(xp[:, g * cig:(g + 1) * cig], w.shape[2:], stride)
        # contract (Ci/g, kd, kh, kw) -> (B, Do, Ho, Wo, Co/g)
        o = np.tensordot(win, w[g * cog:(g + 1) * cog], axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        outs.append(np.moveaxis(o, -1, 1))
    return outs[0] if groups == 1 else np.concatenate(outs, axis=1)


def _corr3d_wgrad(x: np.ndarray, gout: np.ndarray, kshape: tuple, stride: tuple,
                  pad: tuple, groups: int) -> np.ndarray:
    """Gradient of _corr3d w.r.t. its weight."""
    xp = _pad_spatial(x, pad)
    cig = x.shape[1] // groups
    cog = gout.shape[1] // groups
    parts = []
    for g in range(groups):
        win = _windows(xp[:, g * cig:(g + 1) * cig], kshape, stride)
        # contract (B, Do, Ho, Wo) -> (Co/g, Ci/g, kd, kh, kw)
        parts.append(np.tensordot(gout[:, g * cog:(g + 1) * cog], win,
                                  axes=([0, 2, 3, 4], [0, 2, 3, 4])))
    return parts[0] if groups == 1 else np.concatenate(parts, axis=0)


def _dilate(x: np.ndarray, stride: tuple) -> np.ndarray:
    if stride == (1, 1, 1):
        return x
    b, c, d, h, w = x.shape
    sd, sh, sw = stride
    out = np.zeros((b, c, (d - 1) * sd + 1, (h - 1) * sh + 1, (w - 1) * sw + 1), dtype=x.dtype)
    out[:, :, ::sd, ::sh, ::sw] = x
    return out


def _conv_transpose_raw(x: np.ndarray, w: np.ndarray, stride: tuple, pad: tuple,
                        groups: int) -> np.ndarray:
    """Adjoint of _corr3d: x (B,Co,D,H,W), w (Co,Ci/g,k,k,k) -> (B,Ci,...).

    Output spatial extent per axis is (in - 1)*stride - 2*pad + k.
    """
    xd = _dilate(x, stride)
    k = w.shape[2:]
    eff = tuple(ke - 1 - pe for ke, pe in zip(k, pad))
    xd = _pad_spatial(xd, tuple(max(0, e) for e in eff))
    crop = [slice(-e, e or None) if e < 0 else slice(None) for e in eff]
    xd = xd[:, :, crop[0], crop[1], crop[2]]

    cog = w.shape[0] // groups
    wf = w[:, :, ::-1, ::-1, ::-1]
    outs = []
    for g in range(groups):
        win = _windows(xd[:, g * cog:(g + 1) * cog], k, (1, 1, 1))
        # contract (Co/g, kd, kh, kw) -> (B, Do, Ho, Wo, Ci/g)
        o = np.tensordot(win, wf[g * cog:(g + 1) * cog], axes=([1, 5, 6, 7], [0, 2, 3, 4]))
        outs.append(np.moveaxis(o, -1, 1))
    return outs[0] if groups == 1 else np.concatenate(outs, axis=1)


# -- differentiable operations ----------------------------------------------


def _check_conv_geometry(x: Tensor, p: Conv3dParams) -> tuple:
    cin = p.weight.shape[1] * p.groups
    if x.ndim != 5:
        raise ShapeError(f"conv input must be rank 5, got {x.shape}")
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv expects {cin} input channels (weight {p.weight.shape}, groups {p.groups}), "
            f"got {x.shape[1]}")
    if x.shape[1] % p.groups != 0:
        raise ShapeError(f"input channels {x.shape[1]} not divisible by groups {p.groups}")
    out = tuple(
        (x.shape[2 + i] + 2 * p.padding[i] - p.weight.shape[2 + i]) // p.stride[i] + 1
        for i in range(3))
    if any(e < 1 for e in out):
        raise ShapeError(
            f"kernel {p.weight.shape[2:]} larger than padded input {x.shape[2:]} with padding {p.padding}")
    return out


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Grouped 3D cross-correlation with bias."""
    _check_conv_geometry(x, p)
    if p.bias.shape != (p.weight.shape[0],):
        raise ShapeError(f"bias shape {p.bias.shape} must be ({p.weight.shape[0]},)")
    w, b = p.weight, p.bias
    out_data = _corr3d(x.data, w.data, p.stride, p.padding, p.groups)
    out_data += b.data[None, :, None, None, None]

    def backward():
        g = out.grad
        b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if w.requires_grad:
            w._accumulate(_corr3d_wgrad(x.data, g, w.shape[2:], p.stride, p.padding, p.groups))
        if x.requires_grad:
            dx = _conv_transpose_raw(g, w.data, p.stride, p.padding, p.groups)
            x._accumulate(_fit_tail(dx, x.shape))

    out = Tensor._make(out_data, (x, w, b), backward)
    return out


def _fit_tail(arr: np.ndarray, shape: tuple) -> np.ndarray:
    """Zero-pad trailing spatial rows the strided forward never touched."""
    if arr.shape == shape:
        return arr
    grow = [(0, shape[i] - arr.shape[i]) for i in range(5)]
    return np.pad(arr, grow)


def conv_transpose3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Fractionally strided convolution, the adjoint of :func:`conv3d`.

    With ``weight (a, b/groups, k, k, k)`` this maps ``a -> b`` channels;
    output extent per axis is ``(in - 1)*stride - 2*pad + k``.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv_transpose input must be rank 5, got {x.shape}")
    if x.shape[1] != p.weight.shape[0]:
        raise ShapeError(
            f"conv_transpose expects {p.weight.shape[0]} input channels, got {x.shape[1]}")
    cout = p.weight.shape[1] * p.groups
    if p.bias.shape != (cout,):
        raise ShapeError(f"bias shape {p.bias.shape} must be ({cout},)")
    out_sp = tuple(
        (x.shape[2 + i] - 1) * p.stride[i] - 2 * p.padding[i] + p.weight.shape[2 + i]
        for i in range(3))
    if any(e < 1 for e in out_sp):
        raise ShapeError(f"conv_transpose output extent not positive: {out_sp}")
    w, b = p.weight, p.bias
    out_data = _conv_transpose_raw(x.data, w.data, p.stride, p.padding, p.groups)
    out_data += b.data[None, :, None, None, None]

    def backward():
        g = out.grad
        b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if w.requires_grad:
            w._accumulate(_corr3d_wgrad(g, x.data, w.shape[2:], p.stride, p.padding, p.groups))
        if x.requires_grad:
            x._accumulate(_corr3d(g, w.data, p.stride, p.padding, p.groups))

    out = Tensor._make(out_data, (x, w, b), backward)
    return out


def avg_pool3d(x: Tensor, r: int) -> Tensor:
    """Non-overlapping cubic window means; every spatial extent must divide by r."""
    if r < 1:
        raise ValueError(f"pooling rate must be >= 1, got {r}")
    if r == 1:
        return x
    if x.ndim != 5:
        raise ShapeError(f"avg_pool input must be rank 5, got {x.shape}")
    bdim, c, d, h, w = x.shape
    if d % r or h % r or w % r:
        raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by pooling rate {r}")
    blocks = x.data.reshape(bdim, c, d // r, r, h // r, r, w // r, r)
    out_data = blocks.mean(axis=(3, 5, 7))

    def backward():
        g = out.grad * (1.0 / r ** 3)
        g = np.broadcast_to(
            g[:, :, :, None, :, None, :, None],
            (bdim, c, d // r, r, h // r, r, w // r, r))
        x._accumulate(g.reshape(x.shape))

    out = Tensor._make(out_data, (x,), backward)
    return out


def _interp_coeffs(n: int, r: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and blend weights for 1D linear upsampling (align corners off)."""
    pos = (np.arange(n * r, dtype=np.float64) + 0.5) / r - 0.5
    pos = np.maximum(pos, 0.0)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = (pos - i0).astype(dtype)
    return i0, i1, w1


def _lerp_axis(arr: np.ndarray, axis: int, i0, i1, w1) -> np.ndarray:
    shape = [1] * arr.ndim
    shape[axis] = w1.size
    w1b = w1.reshape(shape)
    return arr.take(i0, axis=axis) * (1 - w1b) + arr.take(i1, axis=axis) * w1b


def _lerp_axis_adjoint(g: np.ndarray, axis: int, n: int, i0, i1, w1) -> np.ndarray:
    shape = [1] * g.ndim
    shape[axis] = w1.size
    w1b = w1.reshape(shape)
    out = np.zeros(g.shape[:axis] + (n,) + g.shape[axis + 1:], dtype=g.dtype)
    out_m = np.moveaxis(out, axis, 0)
    np.add.at(out_m, i0, np.moveaxis(g * (1 - w1b), axis, 0))
    np.add.at(out_m, i1, np.moveaxis(g * w1b, axis, 0))
    return out


def upsample3d(x: Tensor, r: int, mode: str = "trilinear") -> Tensor:
    """Scale spatial extents by r; 'nearest' replicates, 'trilinear' interpolates."""
    if r < 1:
        raise ValueError(f"upsample factor must be >= 1, got {r}")
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"unknown upsample mode {mode!r}")
    if x.ndim != 5:
        raise ShapeError(f"upsample input must be rank 5, got {x.shape}")
    if r == 1:
        return x

    if mode == "nearest":
        out_data = x.data.repeat(r, axis=2).repeat(r, axis=3).repeat(r, axis=4)

        def backward():
            b, c, d, h, w = x.shape
            g = out.grad.reshape(b, c, d, r, h, r, w, r)
            x._accumulate(g.sum(axis=(3, 5, 7)))

        out = Tensor._make(out_data, (x,), backward)
        return out

    coeffs = [_interp_coeffs(x.shape[2 + i], r, x.dtype) for i in range(3)]
    out_data = x.data
    for i in range(3):
        out_data = _lerp_axis(out_data, 2 + i, *coeffs[i])

    def backward():
        g = out.grad
        for i in reversed(range(3)):
            g = _lerp_axis_adjoint(g, 2 + i, x.shape[2 + i], *coeffs[i])
        x._accumulate(g)

    out = Tensor._make(out_data, (x,), backward)
    return out


def instance_norm(x: Tensor, p: InstanceNormParams) -> Tensor:
    """Standardize each (batch, channel) slice over its voxels, then affine.

    Uses the biased (population) variance; eps keeps constant slices finite.
    """
    if x.ndim != 5:
        raise ShapeError(f"instance_norm input must be rank 5, got {x.shape}")
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"gamma has {p.gamma.shape[0]} channels, input has {c}")
    gamma, beta = p.gamma, p.beta
    axes = (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    xhat = xc * inv
    gb = gamma.data[None, :, None, None, None]
    out_data = gb * xhat + beta.data[None, :, None, None, None]

    def backward():
        g = out.grad
        beta._accumulate(g.sum(axis=(0, 2, 3, 4)))
        gamma._accumulate((g * xhat).sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            m = x.shape[2] * x.shape[3] * x.shape[4]
            dxhat = g * gb
            dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * inv
            x._accumulate(dx)

    out = Tensor._make(out_data, (x, gamma, beta), backward)
    return out
