"""Layer objects holding parameters: dense, batch norm and capsule layers."""

from __future__ import annotations

import math

import numpy as np

from deepcaps import autodiff as ad
from deepcaps.autodiff import Tensor
from deepcaps.capsules import flatten_caps, split_votes, squash, vote_conv3d
from deepcaps.conv import conv2d, conv_geometry
from deepcaps.errors import ShapeError
from deepcaps.norm import batchnorm
from deepcaps.routing import PARENTS, route_preactivation


class Module:
    """Minimal parameter container; parameters are discovered in attribute order."""

    training = True

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self):
        yield self
        for val in vars(self).values():
            items = val if isinstance(val, (list, tuple)) else [val]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot_uniform(rng: np.random.Generator, shape, fan_in, fan_out, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum=0.9, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros_param(channels, dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, dtype=np.float32):
        self.weight = glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out, dtype)
        self.bias = zeros_param(fan_out, dtype)

    def forward(self, x):
        return x @ self.weight + self.bias


class Stem(Module):
    """Plain conv -> ReLU -> (BN), then every channel becomes a 1-d capsule."""

    def __init__(self, in_channels, filters, kernel, rng, dtype=np.float32, use_bn=True):
        self.kernel = glorot_uniform(rng, (kernel, kernel, in_channels, filters),
                                     kernel * kernel * in_channels, kernel * kernel * filters, dtype)
        self.bias = zeros_param(filters, dtype)
        self.bn = BatchNorm(filters, dtype) if use_bn else None

    def forward(self, x):
        h = ad.relu(conv2d(x, self.kernel, 1, "same") + self.bias)
        if self.bn is not None:
            h = self.bn(h)
        n, hh, ww, c = h.shape
        return h.reshape(n, hh, ww, c, 1)


class ConvCaps2D(Module):
    """Capsules packed into channels ``[N,H,W,n*d]`` -> conv2d -> (BN) -> capsules -> squash."""

    def __init__(self, in_types, in_dim, out_types, out_dim, kernel, stride, rng,
                 dtype=np.float32, use_bn=False, padding="same"):
        cin, cout = in_types * in_dim, out_types * out_dim
        self.in_types, self.in_dim = in_types, in_dim
        self.out_types, self.out_dim = out_types, out_dim
        self.stride, self.padding = stride, padding
        self.kernel = glorot_uniform(rng, (kernel, kernel, cin, cout),
                                     kernel * kernel * cin, kernel * kernel * cout, dtype)
        self.bn = BatchNorm(cout, dtype) if use_bn else None

    def output_shape(self, h, w):
        k = self.kernel.shape[0]
        (oh, ow), _ = conv_geometry((h, w), (k, k), (self.stride, self.stride), self.padding)
        return oh, ow, self.out_types, self.out_dim

    def preact(self, x: Tensor) -> Tensor:
        n, h, w, t, d = x.shape
        if (t, d) != (self.in_types, self.in_dim):
            raise ShapeError(f"conv capsule layer expects {self.in_types}x{self.in_dim} capsules "
                             f"({self.in_types * self.in_dim} channels), got {t}x{d}")
        y = conv2d(x.reshape(n, h, w, t * d), self.kernel, self.stride, self.padding)
        if self.bn is not None:
            y = self.bn(y)
        _, oh, ow, _ = y.shape
        return y.reshape(n, oh, ow, self.out_types, self.out_dim)

    def forward(self, x):
        return squash(self.preact(x))


class RoutedConvCaps(Module):
    """Votes by 3D convolution over the capsule grid, combined by dynamic routing.

    At each output location the ``n`` child capsule types (each seen through a
    ``k x k`` window) are the children and the ``out_types`` capsules the parents.
    """

    def __init__(self, in_types, in_dim, out_types, out_dim, kernel, stride, rng,
                 dtype=np.float32, iterations=3, coupling_axis=PARENTS, full_grad=False,
                 padding="same"):
        self.in_types, self.in_dim = in_types, in_dim
        self.out_types, self.out_dim = out_types, out_dim
        self.stride, self.padding = stride, padding
        self.iterations = iterations
        self.coupling_axis = coupling_axis
        self.full_grad = full_grad
        cout = out_types * out_dim
        self.kernel = glorot_uniform(rng, (kernel, kernel, in_dim, 1, cout),
                                     kernel * kernel * in_dim, kernel * kernel * cout, dtype)

    def output_shape(self, h, w):
        k = self.kernel.shape[0]
        (oh, ow), _ = conv_geometry((h, w), (k, k), (self.stride, self.stride), self.padding)
        return oh, ow, self.out_types, self.out_dim

    def votes(self, x: Tensor) -> Tensor:
        if x.shape[3:] != (self.in_types, self.in_dim):
            raise ShapeError(f"routed capsule layer expects {self.in_types}x{self.in_dim} capsules, "
                             f"got {x.shape[3]}x{x.shape[4]}")
        v = vote_conv3d(x, self.kernel, self.stride, self.padding)
        return split_votes(v, self.out_types, self.out_dim)

    def preact(self, x: Tensor) -> Tensor:
        v = self.votes(x)  # [N, H', W', n, m, d']
        n, h, w, k, m, d = v.shape
        s = route_preactivation(v.reshape(n * h * w, k, m, d), self.iterations,
                                self.coupling_axis, self.full_grad)
        return s.reshape(n, h, w, m, d)

    def forward(self, x):
        return squash(self.preact(x))


class CapsuleCell(Module):
    """Conv-capsule layers in sequence with one skip connection.

    The output of layer ``skip_from`` is added to the final layer's
    pre-activation, then squashed.
    """

    def __init__(self, layers, skip_from=None):
        self.layers = list(layers)
        if skip_from is not None and not 0 <= skip_from < len(self.layers) - 1:
            raise ShapeError(f"skip_from={skip_from} must index a non-final layer (0..{len(self.layers) - 2})")
        self.skip_from = skip_from

    def forward(self, x):
        h = x
        outs = []
        for layer in self.layers[:-1]:
            h = layer(h)
            outs.append(h)
        pre = self.layers[-1].preact(h)
        if self.skip_from is not None:
            skip = outs[self.skip_from]
            if skip.shape != pre.shape:
                raise ShapeError(f"skip source shape {skip.shape} != cell output shape {pre.shape}")
            pre = pre + skip
        return squash(pre)


class ClassCaps(Module):
    """Fully connected capsule layer routed to ``classes`` parents.

    Without ``types`` each input capsule has its own ``d x d_out`` transform
    per class. With ``types`` (one entry per input source, giving that source's
    capsule types) the transform is shared by all spatial positions of a type.
    """

    def __init__(self, in_caps, in_dim, classes, out_dim, rng, dtype=np.float32, iterations=3,
                 types=None, coupling_axis=PARENTS, full_grad=False):
        self.in_caps, self.in_dim = in_caps, in_dim
        self.classes, self.out_dim = classes, out_dim
        self.iterations = iterations
        self.coupling_axis = coupling_axis
        self.full_grad = full_grad
        self.types = list(types) if types else None
        rows = sum(self.types) if self.types else in_caps
        self.weight = glorot_uniform(rng, (rows, classes, in_dim, out_dim),
                                     in_dim * classes, out_dim * classes, dtype)

    def votes(self, sources) -> Tensor:
        """``[N, K_in, C, d_out]`` from a list of capsule grids or one capsule list ``[N, K, d]``."""
        if self.types is None:
            x = sources if isinstance(sources, Tensor) else ad.concat([flatten_caps(s) for s in sources], 1)
            if x.shape[1:] != (self.in_caps, self.in_dim):
                raise ShapeError(f"class capsules expect {self.in_caps} capsules of dim {self.in_dim}, "
                                 f"got {x.shape[1]} of dim {x.shape[2]}")
            return _batched_transform(x, self.weight)
        if isinstance(sources, Tensor):
            sources = [sources]
        parts, row = [], 0
        for src, t in zip(sources, self.types):
            n, h, w, tt, d = src.shape
            if tt != t or d != self.in_dim:
                raise ShapeError(f"class capsule source expects {t} types of dim {self.in_dim}, got {tt}x{d}")
            w_t = self.weight[row:row + t]
            u = _batched_transform(src.reshape(n, h * w, t, d), w_t)
            parts.append(u.reshape(n, h * w * t, self.classes, self.out_dim))
            row += t
        return parts[0] if len(parts) == 1 else ad.concat(parts, 1)

    def forward(self, sources):
        s = route_preactivation(self.votes(sources), self.iterations, self.coupling_axis, self.full_grad)
        return squash(s)


def _batched_transform(x: Tensor, w: Tensor) -> Tensor:
    """``[N, P..., T, d] x [T, C, d, e] -> [N, P..., T, C, e]`` as one batched matmul over ``T``."""
    t, c, d, e = w.shape
    lead = x.shape[:-2]
    rows = int(np.prod(lead))
    xt = x.reshape(rows, t, d).transpose(1, 0, 2)  # [T, rows, d]
    wt = w.transpose(0, 2, 1, 3).reshape(t, d, c * e)
    u = (xt @ wt).transpose(1, 0, 2)  # [rows, T, C*e]
    return u.reshape(*lead, t, c, e)
