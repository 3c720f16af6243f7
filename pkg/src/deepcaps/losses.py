"""Margin loss on class-capsule lengths plus a weighted reconstruction term."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from deepcaps import autodiff as ad
from deepcaps.autodiff import Tensor
from deepcaps.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class MarginParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    recon_weight: float = 0.0005

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ConfigError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")
        if not 0 < self.lambda_down <= 1:
            raise ConfigError(f"lambda_down must lie in (0, 1], got {self.lambda_down}")
        if self.recon_weight < 0:
            raise ConfigError(f"recon_weight must be >= 0, got {self.recon_weight}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    total: Tensor
    margin_term: float
    recon_term: float
    class_norms: np.ndarray


def _check_one_hot(labels: np.ndarray):
    ok = labels.ndim == 2 and np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)
    if not ok:
        raise ValueError("labels must be one-hot rows")


def margin_loss(class_norms: Tensor, labels, params: MarginParams = MarginParams()) -> Tensor:
    """Batch mean of ``sum_c T_c relu(m+ - |v_c|)^2 + lambda (1 - T_c) relu(|v_c| - m-)^2``."""
    labels = np.asarray(labels)
    _check_one_hot(labels)
    if labels.shape != class_norms.shape:
        raise ShapeError(f"labels {labels.shape} and class norms {class_norms.shape} differ")
    t = labels.astype(class_norms.dtype)
    present = ad.relu(params.m_plus - class_norms) ** 2
    absent = ad.relu(class_norms - params.m_minus) ** 2
    per_class = present * t + absent * (params.lambda_down * (1 - t))
    return per_class.sum(axis=1).mean()


def reconstruction_loss(recon: Tensor, target) -> Tensor:
    """Sum of squared pixel differences per sample, averaged over the batch."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction shape {recon.shape} != target shape {target.shape}")
    diff = recon - target.astype(recon.dtype)
    n = recon.shape[0]
    return (diff * diff).reshape(n, -1).sum(axis=1).mean()


def total_loss(class_caps: Tensor, labels, recon: Tensor | None, images,
               params: MarginParams = MarginParams()) -> LossReport:
    norms = ad.norm(class_caps, axis=-1)
    margin = margin_loss(norms, labels, params)
    total = margin
    recon_val = 0.0
    if recon is not None:
        rl = reconstruction_loss(recon, images)
        recon_val = float(rl.data)
        if params.recon_weight:
            total = margin + rl * params.recon_weight
    return LossReport(total, float(margin.data), recon_val, norms.data)
