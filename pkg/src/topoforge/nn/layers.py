"""Neural-network building blocks on NCHW numpy arrays with hand-written
reverse-mode gradients.

The graph is static: each layer instance appears once per forward pass and
caches what its backward pass needs. ``forward(..., train=...)`` selects
batch-statistics vs running-statistics behavior for the normalization layers.
Arrays keep the caller's dtype (float32 in production, float64 in the
gradient-check suite).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class LayerStateError(RuntimeError):
    """Layer used in a mode its state does not support yet."""


class LayerShapeError(ValueError):
    """Input shapes incompatible with the layer configuration."""


class Param:
    """A learned tensor plus its gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)


class Layer:
    def named_params(self, prefix: str = ""):
        return iter(())

    def named_states(self, prefix: str = ""):
        """Non-learned persistent arrays (running statistics)."""
        return iter(())


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise LayerShapeError(f"kernel {kh}x{kw} too large for input {h}x{w} with pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), (ho, wo)


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += d6[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


class Conv2d(Layer):
    """Cross-correlation with bias; output H = floor((H + 2p - k) / s) + 1."""

    def __init__(self, cin, cout, k, stride=1, pad=0, rng=None, bias_init=0.0):
        if stride < 1 or pad < 0:
            raise LayerShapeError(f"need stride >= 1 and pad >= 0, got {stride}, {pad}")
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        self.w = Param(_kaiming(rng, (cout, cin, k, k), cin * k * k))
        self.b = Param(np.full(cout, bias_init, dtype=np.float32))
        self._cache = None

    def named_params(self, prefix=""):
        yield prefix + "w", self.w
        yield prefix + "b", self.b

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise LayerShapeError(f"expected (N,{self.cin},H,W), got {x.shape}")
        cols, (ho, wo) = im2col(x, self.k, self.k, self.stride, self.pad)
        wmat = self.w.data.reshape(self.cout, -1)
        out = np.matmul(wmat[None], cols) + self.b.data[None, :, None]
        self._cache = (x.shape, cols)
        return out.reshape(x.shape[0], self.cout, ho, wo)

    def backward(self, dout):
        x_shape, cols = self._cache
        n = x_shape[0]
        dflat = dout.reshape(n, self.cout, -1)
        wmat = self.w.data.reshape(self.cout, -1)
        self.w.grad = np.matmul(dflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.w.data.shape)
        self.b.grad = dflat.sum(axis=(0, 2))
        dcols = np.matmul(wmat.T[None], dflat)
        return col2im(dcols, x_shape, self.k, self.k, self.stride, self.pad)


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch mean and (biased) variance and updates the
    running statistics; eval mode uses the running statistics and is therefore
    batch-independent. ``affine=False`` gives the parameter-free normalization
    used inside the spatially-adaptive layers.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, affine=True):
        if eps <= 0:
            raise LayerShapeError("eps must be positive")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        if affine:
            self.gamma = Param(np.ones(channels, dtype=np.float32))
            self.beta = Param(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.batches_seen = np.zeros(1, dtype=np.int64)
        self._cache = None

    def named_params(self, prefix=""):
        if self.affine:
            yield prefix + "gamma", self.gamma
            yield prefix + "beta", self.beta

    def named_states(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var
        yield prefix + "batches_seen", self.batches_seen

    def _scale(self):
        return self.gamma.data if self.affine else 1.0

    def forward(self, x, train=True):
        if x.shape[1] != self.channels:
            raise LayerShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise LayerShapeError("train-mode batch norm needs N*H*W >= 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            self.running_mean += self.momentum * (mean.astype(np.float32) - self.running_mean)
            self.running_var += self.momentum * (var.astype(np.float32) - self.running_var)
            self.batches_seen += 1
            self._cache = ("train", xhat, inv_std, m)
        else:
            if int(self.batches_seen[0]) == 0:
                raise LayerStateError("eval-mode batch norm before any training batch")
            inv_std = 1.0 / np.sqrt(self.running_var.astype(x.dtype) + self.eps)
            xhat = (x - self.running_mean.astype(x.dtype)[None, :, None, None]) \
                * inv_std[None, :, None, None]
            self._cache = ("eval", xhat, inv_std, None)
        if self.affine:
            return self.gamma.data[None, :, None, None] * xhat \
                + self.beta.data[None, :, None, None]
        return xhat

    def backward(self, dout):
        mode, xhat, inv_std, m = self._cache
        if self.affine:
            self.gamma.grad = (dout * xhat).sum(axis=(0, 2, 3))
            self.beta.grad = dout.sum(axis=(0, 2, 3))
        dxhat = dout * (self._scale()[None, :, None, None] if self.affine else 1.0)
        if mode == "eval":
            return dxhat * inv_std[None, :, None, None]
        sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv_std[None, :, None, None] / m * (m * dxhat - sum_d - xhat * sum_dx)


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Sigmoid(Layer):
    """Logistic activation clamped to the open interval (0, 1); float
    saturation would otherwise emit exact 0.0/1.0 for large logits."""

    CLAMP = 1e-7

    def forward(self, x, train=True):
        self._out = np.clip(expit(x), self.CLAMP, 1.0 - self.CLAMP)
        return self._out

    def backward(self, dout):
        return dout * self._out * (1.0 - self._out)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; gradient routes to the first maximum in
    row-major window scan order."""

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise LayerShapeError(f"pooling needs even spatial dims, got {h}x{w}")
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, h // 2, w // 2, 4)
        self._argmax = windows.argmax(axis=-1)
        self._x_shape = x.shape
        return np.take_along_axis(windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, c, h, w = self._x_shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dwin, self._argmax[..., None], dout[..., None], axis=-1)
        return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, h, w)


class UpsampleNearest2(Layer):
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""

    def forward(self, x, train=True):
        self._x_shape = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dout):
        n, c, h, w = self._x_shape
        return dout.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def downsample_stride(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor integer downsampling by plain stride sampling."""
    if factor < 1 or x.shape[-1] % factor or x.shape[-2] % factor:
        raise LayerShapeError(f"cannot downsample {x.shape[-2:]} by {factor}")
    return x[..., ::factor, ::factor]


class Spade(Layer):
    """Spatially-adaptive denormalization.

    The feature map is batch-normalized without learned affine terms, then
    modulated pixelwise: ``gamma(m) * xhat + beta(m)`` where gamma/beta come
    from a shared 3x3 conv + ReLU over the (already resized) mask stack
    followed by one 3x3 conv head each. The gamma head's bias starts at one so
    an untrained layer passes normalized features through unscaled.
    """

    def __init__(self, channels, label_channels=3, hidden=64, rng=None):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.norm = BatchNorm2d(channels, affine=False)
        self.conv_shared = Conv2d(label_channels, hidden, 3, pad=1, rng=rng)
        self.relu = ReLU()
        self.conv_gamma = Conv2d(hidden, channels, 3, pad=1, rng=rng, bias_init=1.0)
        self.conv_beta = Conv2d(hidden, channels, 3, pad=1, rng=rng)
        self._cache = None

    def named_params(self, prefix=""):
        yield from self.conv_shared.named_params(prefix + "shared.")
        yield from self.conv_gamma.named_params(prefix + "gamma_head.")
        yield from self.conv_beta.named_params(prefix + "beta_head.")

    def named_states(self, prefix=""):
        yield from self.norm.named_states(prefix + "norm.")

    def forward(self, h, mask, train=True):
        if mask.shape[0] != h.shape[0] or mask.shape[2:] != h.shape[2:]:
            raise LayerShapeError(
                f"mask stack {mask.shape} does not match features {h.shape}")
        xhat = self.norm.forward(h, train=train)
        act = self.relu.forward(self.conv_shared.forward(mask, train=train), train=train)
        gamma = self.conv_gamma.forward(act, train=train)
        beta = self.conv_beta.forward(act, train=train)
        self._cache = (xhat, gamma)
        return gamma * xhat + beta

    def backward(self, dout):
        xhat, gamma = self._cache
        dxhat = dout * gamma
        dgamma = dout * xhat
        dh = self.norm.backward(dxhat)
        dact = self.conv_gamma.backward(dgamma) + self.conv_beta.backward(dout)
        dmask = self.conv_shared.backward(self.relu.backward(dact))
        return dh, dmask


class SpadeResBlock(Layer):
    """Residual block with spatially-adaptive normalization.

    Main branch: (SPADE -> ReLU -> conv3x3) twice; skip branch: identity when
    channels match, else SPADE -> ReLU -> conv1x1.
    """

    def __init__(self, cin, cout, label_channels=3, hidden=64, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout = cin, cout
        self.spade1 = Spade(cin, label_channels, hidden, rng)
        self.relu1 = ReLU()
        self.conv1 = Conv2d(cin, cout, 3, pad=1, rng=rng)
        self.spade2 = Spade(cout, label_channels, hidden, rng)
        self.relu2 = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, pad=1, rng=rng)
        if cin != cout:
            self.spade_skip = Spade(cin, label_channels, hidden, rng)
            self.relu_skip = ReLU()
            self.conv_skip = Conv2d(cin, cout, 1, pad=0, rng=rng)

    def named_params(self, prefix=""):
        yield from self.spade1.named_params(prefix + "spade1.")
        yield from self.conv1.named_params(prefix + "conv1.")
        yield from self.spade2.named_params(prefix + "spade2.")
        yield from self.conv2.named_params(prefix + "conv2.")
        if self.cin != self.cout:
            yield from self.spade_skip.named_params(prefix + "spade_skip.")
            yield from self.conv_skip.named_params(prefix + "conv_skip.")

    def named_states(self, prefix=""):
        yield from self.spade1.named_states(prefix + "spade1.")
        yield from self.spade2.named_states(prefix + "spade2.")
        if self.cin != self.cout:
            yield from self.spade_skip.named_states(prefix + "spade_skip.")

    def forward(self, h, mask, train=True):
        a = self.conv1.forward(self.relu1.forward(
            self.spade1.forward(h, mask, train=train), train=train), train=train)
        main = self.conv2.forward(self.relu2.forward(
            self.spade2.forward(a, mask, train=train), train=train), train=train)
        if self.cin != self.cout:
            skip = self.conv_skip.forward(self.relu_skip.forward(
                self.spade_skip.forward(h, mask, train=train), train=train), train=train)
        else:
            skip = h
        return main + skip

    def backward(self, dout):
        da = self.relu2.backward(self.conv2.backward(dout))
        dh2, dmask2 = self.spade2.backward(da)
        d1 = self.relu1.backward(self.conv1.backward(dh2))
        dh, dmask1 = self.spade1.backward(d1)
        dmask = dmask1 + dmask2
        if self.cin != self.cout:
            ds = self.relu_skip.backward(self.conv_skip.backward(dout))
            dh_s, dmask_s = self.spade_skip.backward(ds)
            dh = dh + dh_s
            dmask = dmask + dmask_s
        else:
            dh = dh + dout
        return dh, dmask


class PlainResBlock(Layer):
    """The same residual block with every SPADE layer removed (the baseline
    decoder cell): main = conv3x3(relu(conv3x3(relu(h)))), skip = identity or
    conv1x1(relu(h)). Parameter names mirror SpadeResBlock's conv names."""

    def __init__(self, cin, cout, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout = cin, cout
        self.relu1 = ReLU()
        self.conv1 = Conv2d(cin, cout, 3, pad=1, rng=rng)
        self.relu2 = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, pad=1, rng=rng)
        if cin != cout:
            self.relu_skip = ReLU()
            self.conv_skip = Conv2d(cin, cout, 1, pad=0, rng=rng)

    def named_params(self, prefix=""):
        yield from self.conv1.named_params(prefix + "conv1.")
        yield from self.conv2.named_params(prefix + "conv2.")
        if self.cin != self.cout:
            yield from self.conv_skip.named_params(prefix + "conv_skip.")

    def forward(self, h, mask=None, train=True):
        a = self.conv1.forward(self.relu1.forward(h, train=train), train=train)
        main = self.conv2.forward(self.relu2.forward(a, train=train), train=train)
        if self.cin != self.cout:
            skip = self.conv_skip.forward(self.relu_skip.forward(h, train=train), train=train)
        else:
            skip = h
        return main + skip

    def backward(self, dout):
        da = self.relu2.backward(self.conv2.backward(dout))
        dh = self.relu1.backward(self.conv1.backward(da))
        if self.cin != self.cout:
            dh = dh + self.relu_skip.backward(self.conv_skip.backward(dout))
        else:
            dh = dh + dout
        return dh, None


def mae_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error over all entries; returns (loss, dloss/dpred).

    The subgradient at zero difference is zero (np.sign convention).
    """
    if pred.shape != target.shape:
        raise LayerShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.abs(diff).mean())
    return loss, np.sign(diff) / diff.size
