"""Class-independent decoder and instantiation-parameter analysis.

The decoder only ever sees the winning capsule's activity vector. Its single
weight set is shared by every class, so a given coordinate of the activity
vector means the same thing whichever class produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deepcaps import autodiff as ad
from deepcaps.autodiff import Tensor, no_grad
from deepcaps.conv import conv_transpose2d
from deepcaps.errors import EmptyDatasetError, ShapeError
from deepcaps.layers import Linear, Module, glorot_uniform, zeros_param

DEFAULT_SWEEP_RANGE = (-0.075, 0.075)
DEFAULT_SWEEP_STEPS = 11


@dataclass
class Winner:
    """Selected activity vectors: ``values`` ``[N, d]``, class ids and capsule norms."""

    values: Tensor
    class_ids: np.ndarray
    norms: np.ndarray


def mask_winner(class_caps: Tensor, labels=None) -> Winner:
    """Pick one capsule per sample: the labelled class if ``labels`` (one-hot) is given, else the longest.

    Ties in the norm go to the lowest class index.
    """
    n, c, d = class_caps.shape
    norms = np.sqrt((class_caps.data.astype(np.float64) ** 2).sum(-1))
    if labels is not None:
        ids = np.asarray(labels).argmax(axis=1)
    else:
        ids = norms.argmax(axis=1)
    onehot = np.zeros((n, c, 1), dtype=class_caps.dtype)
    onehot[np.arange(n), ids, 0] = 1
    values = (class_caps * onehot).sum(axis=1)
    return Winner(values, ids, norms[np.arange(n), ids])


class FCDecoder(Module):
    """d -> hidden... (ReLU) -> prod(image_shape) with sigmoid output."""

    def __init__(self, in_dim, image_shape, hidden=(512, 1024), rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.image_shape = tuple(image_shape)
        widths = [in_dim, *hidden, int(np.prod(image_shape))]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, v: Tensor) -> Tensor:
        h = v
        for i, layer in enumerate(self.layers):
            h = layer(h)
            h = ad.relu(h) if i < len(self.layers) - 1 else ad.sigmoid(h)
        return h.reshape(v.shape[0], *self.image_shape)


class DeconvDecoder(Module):
    """d -> dense -> ``base x base x channels[0]`` map -> stride-2 transposed convs -> sigmoid image.

    Each entry of ``channels`` after the first is one stride-2 upsampling
    stage; a final stride-1 transposed conv maps to the image channels.
    """

    def __init__(self, in_dim, image_shape, base=4, channels=(64, 32, 16, 8), kernel=3,
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.image_shape = tuple(image_shape)
        h, w, c = self.image_shape
        ups = len(channels)
        if base * 2 ** ups != h or base * 2 ** ups != w:
            raise ShapeError(f"deconv decoder: base {base} x 2^{ups} does not reach image {h}x{w}")
        self.base = base
        self.channels = list(channels)
        self.fc = Linear(in_dim, base * base * channels[0], rng, dtype)
        chans = [*channels, channels[-1]]
        self.kernels = []
        self.biases = []
        for a, b in zip(chans[:-1], chans[1:]):
            self.kernels.append(glorot_uniform(rng, (kernel, kernel, a, b), kernel * kernel * a,
                                               kernel * kernel * b, dtype))
            self.biases.append(zeros_param(b, dtype))
        self.out_kernel = glorot_uniform(rng, (kernel, kernel, chans[-1], c), kernel * kernel * chans[-1],
                                         kernel * kernel * c, dtype)
        self.out_bias = zeros_param(c, dtype)

    def named_parameters(self, prefix=""):
        yield from self.fc.named_parameters(prefix + "fc.")
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}up.{i}.kernel", k
            yield f"{prefix}up.{i}.bias", b
        yield prefix + "out_kernel", self.out_kernel
        yield prefix + "out_bias", self.out_bias

    def forward(self, v: Tensor) -> Tensor:
        n = v.shape[0]
        h = ad.relu(self.fc(v)).reshape(n, self.base, self.base, self.channels[0])
        for k, b in zip(self.kernels, self.biases):
            h = ad.relu(conv_transpose2d(h, k, 2, "same") + b)
        return ad.sigmoid(conv_transpose2d(h, self.out_kernel, 1, "same") + self.out_bias)


def decode(decoder: Module, v) -> Tensor:
    """Reconstruct images from activity vectors ``[N, d]`` (or a single ``[d]``)."""
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=_param_dtype(decoder)))
    single = v.ndim == 1
    if single:
        v = v.reshape(1, -1)
    if v.shape[-1] != decoder.in_dim:
        raise ShapeError(f"decoder expects activity vectors of dim {decoder.in_dim}, got {v.shape[-1]}")
    out = decoder(v)
    return out[0] if single else out


def sweep_values(lo: float, hi: float, steps: int) -> np.ndarray:
    if steps == 1:
        return np.array([(lo + hi) / 2])
    return np.linspace(lo, hi, steps)


def decode_offsets(decoder: Module, v: np.ndarray, dim: int, offsets, replace: bool = False) -> np.ndarray:
    """Decode copies of ``v`` with coordinate ``dim`` shifted by (or set to) each value in ``offsets``."""
    v = np.asarray(v)
    if not 0 <= dim < v.shape[-1]:
        raise IndexError(f"dimension {dim} out of range for activity vector of length {v.shape[-1]}")
    batch = np.repeat(v[None], len(offsets), axis=0).astype(_param_dtype(decoder))
    if replace:
        batch[:, dim] = offsets
    else:
        batch[:, dim] += np.asarray(offsets, dtype=batch.dtype)
    with no_grad():
        return decode(decoder, Tensor(batch)).data


def perturb_sweep(decoder: Module, v, dim: int, lo: float = DEFAULT_SWEEP_RANGE[0],
                  hi: float = DEFAULT_SWEEP_RANGE[1], steps: int = DEFAULT_SWEEP_STEPS,
                  replace: bool = False) -> list:
    """``steps`` reconstructions with ``v[dim]`` moved over evenly spaced values in ``[lo, hi]``.

    Values are offsets added to ``v[dim]``; pass ``replace=True`` to overwrite
    the coordinate instead. ``dim`` is 0-indexed.
    """
    if steps < 2:
        raise ValueError(f"a sweep needs at least 2 steps, got {steps}")
    if lo > hi:
        raise ValueError(f"sweep range is empty: [{lo}, {hi}]")
    return list(decode_offsets(decoder, v, dim, sweep_values(lo, hi, steps), replace))


def variance_rank_vectors(activity: np.ndarray):
    """``[(dim, variance)]`` sorted by descending unbiased variance over the rows of ``activity``."""
    activity = np.asarray(activity, dtype=np.float64)
    if activity.ndim != 2 or activity.shape[0] == 0:
        raise EmptyDatasetError("variance ranking needs a non-empty [samples, dims] array")
    if activity.shape[0] == 1:
        var = np.zeros(activity.shape[1])
    else:
        var = activity.var(axis=0, ddof=1)
    order = np.argsort(-var, kind="stable")
    return [(int(i), float(var[i])) for i in order]


def winning_activity(model, images, batch_size=256) -> np.ndarray:
    """Winning-capsule activity vectors (argmax mask) for every image, ``[N, d]``."""
    out = []
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                caps = model.class_capsules(Tensor(images[i:i + batch_size].astype(model.dtype)))
                out.append(mask_winner(caps).values.data)
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0))


def variance_rank(model, dataset, batch_size=256):
    """Rank instantiation parameters of the winning capsule by variance across ``dataset``."""
    if len(dataset) == 0:
        raise EmptyDatasetError("variance_rank on an empty dataset")
    return variance_rank_vectors(winning_activity(model, dataset.images, batch_size))


def _param_dtype(module):
    params = module.parameters()
    return params[0].dtype if params else np.float32
