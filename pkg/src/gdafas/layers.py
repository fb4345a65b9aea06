"""Neural network layers and the Adam optimizer.

Layers own their parameters as Tensors and expose them through ``params()``.
Batch normalization carries running statistics as plain state (never taped,
never touched by the optimizer) and distinguishes three forward modes:

* ``train``: normalize with batch moments, update the running averages.
* ``stats``: normalize with batch moments, leave the running averages alone.
  The batch moments stay on the tape, so losses defined on them can push
  gradient back to whatever produced the input.
* ``eval``: normalize with the running averages; input moments are recorded
  untaped for later distribution-shift inspection.
"""

import numpy as np

from . import tensor as T
from .rng import Rng


class Conv2d:
    """2-d convolution with He-normal weight init."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, rng: Rng = None):
        fan_in = in_channels * kernel * kernel
        scale = np.sqrt(2.0 / fan_in)
        w = rng.gaussian(out_channels * fan_in, std=scale)
        self.weight = T.Tensor(
            w.reshape(out_channels, in_channels, kernel, kernel),
            requires_grad=True,
        )
        self.bias = T.Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding)


class Dense:
    """Affine map on [B, in] inputs."""

    def __init__(self, in_features: int, out_features: int, rng: Rng = None):
        scale = np.sqrt(1.0 / in_features)
        w = rng.gaussian(in_features * out_features, std=scale)
        self.weight = T.Tensor(w.reshape(in_features, out_features),
                               requires_grad=True)
        self.bias = T.Tensor(np.zeros(out_features), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)


class BatchNorm2d:
    """Channel normalization over (batch, height, width) with running averages.

    Batch moments use the biased variance (divide by N). Running averages
    start at mean 0 / variance 1 and follow an exponential moving average
    with rate ``momentum``:

        running <- (1 - momentum) * running + momentum * batch

    ``num_updates`` counts train-mode forwards; eval mode before the first
    update is an error because the running averages would still be the
    arbitrary init values.
    """

    def __init__(self, num_channels: int, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.gamma = T.Tensor(np.ones(num_channels), requires_grad=True)
        self.beta = T.Tensor(np.zeros(num_channels), requires_grad=True)
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)
        self.num_updates = 0
        self.eps = eps
        self.momentum = momentum
        self.last_batch_mean = None  # Tensor [C], set by train/stats forward
        self.last_batch_var = None
        self.last_input_mean = None  # ndarray [C], set by eval forward
        self.last_input_var = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, mode: str = "train"):
        if mode not in ("train", "stats", "eval"):
            raise ValueError(f"unknown batchnorm mode: {mode!r}")
        c = x.shape[1]
        if mode == "eval":
            if self.num_updates == 0:
                raise RuntimeError(
                    "batchnorm eval before any running-average update"
                )
            self.last_input_mean = x.data.mean(axis=(0, 2, 3))
            self.last_input_var = x.data.var(axis=(0, 2, 3))
            mean = T.Tensor(self.running_mean.reshape(1, c, 1, 1))
            var = T.Tensor(self.running_var.reshape(1, c, 1, 1))
        else:
            if x.shape[0] * x.shape[2] * x.shape[3] < 2:
                raise ValueError("batch statistics need at least 2 values")
            mean = T.tmean(x, axes=(0, 2, 3), keepdims=True)
            var = T.tmean(T.square(T.sub(x, mean)), axes=(0, 2, 3),
                          keepdims=True)
            self.last_batch_mean = T.reshape(mean, (c,))
            self.last_batch_var = T.reshape(var, (c,))
            if mode == "train":
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean \
                    + m * mean.data.reshape(c)
                self.running_var = (1.0 - m) * self.running_var \
                    + m * var.data.reshape(c)
                self.num_updates += 1
        xhat = T.div(T.sub(x, mean), T.sqrt(T.add(var, self.eps)))
        gamma = T.reshape(self.gamma, (1, c, 1, 1))
        beta = T.reshape(self.beta, (1, c, 1, 1))
        return T.add(T.mul(xhat, gamma), beta)


class InstanceNorm2d:
    """Per-sample, per-channel normalization over the spatial axes."""

    def __init__(self, num_channels: int, eps: float = 1e-5):
        self.gamma = T.Tensor(np.ones(num_channels), requires_grad=True)
        self.beta = T.Tensor(np.zeros(num_channels), requires_grad=True)
        self.eps = eps

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x):
        c = x.shape[1]
        mean = T.tmean(x, axes=(2, 3), keepdims=True)
        var = T.tmean(T.square(T.sub(x, mean)), axes=(2, 3), keepdims=True)
        xhat = T.div(T.sub(x, mean), T.sqrt(T.add(var, self.eps)))
        gamma = T.reshape(self.gamma, (1, c, 1, 1))
        beta = T.reshape(self.beta, (1, c, 1, 1))
        return T.add(T.mul(xhat, gamma), beta)


def collect_params(layers):
    out = []
    for layer in layers:
        out.extend(layer.params())
    return out


def set_requires_grad(params, flag: bool):
    for p in params:
        p.requires_grad = flag


class Adam:
    """Adam with bias correction; silently skips parameters without a grad.

    Frozen parameters (``requires_grad`` False) are excluded up front, so a
    bundle containing frozen networks can hand its full parameter list over.
    """

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / (1.0 - b1**self.t)
            vhat = self.v[i] / (1.0 - b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
