#!/usr/bin/env python3
"""
Reconstruction and evidence losses with analytic gradients.

- SSIM between a sample and its reconstruction, over one global window or
  non-overlapping windows (1-D chunks, or square patches when the feature
  vector is an image of ``image_shape``)
- mean (1 - SSIM) batch loss
- softmax cross-entropy against one-hot evidence
- the joint evidence-transfer objective ``l_AE + lambda * mean_j H(V_j, Q_j)``
"""

from enum import Enum
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ConfigurationError, CountError, ShapeError
from tensor_net import as_matrix

# ============================================================================
# Defaults
# ============================================================================

SSIM_K1 = 0.01
SSIM_K2 = 0.03
LOG_CLIP = 1e-12
ROW_SUM_TOLERANCE = 1e-9


class SsimMode(str, Enum):
    GLOBAL = "global"
    WINDOWED = "windowed"


class SsimConfig(BaseModel):
    """SSIM stabilizers and windowing. C1/C2 default to (k*L)^2."""
    model_config = ConfigDict(frozen=True)

    dynamic_range: float = Field(1.0, gt=0)
    c1: Optional[float] = Field(None, gt=0)
    c2: Optional[float] = Field(None, gt=0)
    mode: SsimMode = SsimMode.GLOBAL
    window_size: int = 8
    image_shape: Optional[Tuple[int, int]] = None

    @model_validator(mode="after")
    def _fill_stabilizers(self):
        if self.c1 is None:
            object.__setattr__(self, "c1", (SSIM_K1 * self.dynamic_range) ** 2)
        if self.c2 is None:
            object.__setattr__(self, "c2", (SSIM_K2 * self.dynamic_range) ** 2)
        if self.mode is SsimMode.WINDOWED and self.window_size < 2:
            raise ValueError("window_size must be >= 2 in windowed mode")
        return self


class TransferConfig(BaseModel):
    """Weight of the evidence term and the number of evidence sources K."""
    model_config = ConfigDict(populate_by_name=True)

    lam: float = Field(0.1, ge=0, alias="lambda")
    evidence_count: int = Field(1, ge=1)


# ============================================================================
# SSIM
# ============================================================================

@lru_cache(maxsize=32)
def _window_index(dim: int, mode: SsimMode, window_size: int,
                  image_shape: Optional[Tuple[int, int]]) -> np.ndarray:
    """Column indices of each window, shape (n_windows, window_len)."""
    if mode is SsimMode.GLOBAL:
        return np.arange(dim).reshape(1, dim)
    if image_shape is None:
        if dim % window_size:
            raise ShapeError(f"feature width {dim} is not a multiple of window size {window_size}")
        return np.arange(dim).reshape(-1, window_size)
    rows, cols = image_shape
    if rows * cols != dim:
        raise ShapeError(f"image shape {image_shape} does not match feature width {dim}")
    if rows % window_size or cols % window_size:
        raise ShapeError(f"image shape {image_shape} is not tiled by {window_size}x{window_size} windows")
    grid = np.arange(dim).reshape(rows // window_size, window_size, cols // window_size, window_size)
    return grid.transpose(0, 2, 1, 3).reshape(-1, window_size * window_size)


def _windows(cfg: SsimConfig, dim: int) -> np.ndarray:
    return _window_index(dim, cfg.mode, cfg.window_size, cfg.image_shape)


def _ssim_terms(x: np.ndarray, y: np.ndarray, cfg: SsimConfig):
    """Per-sample, per-window SSIM plus the intermediates its gradient needs."""
    idx = _windows(cfg, x.shape[1])
    xw = x[:, idx]
    yw = y[:, idx]
    mx = xw.mean(axis=-1)
    my = yw.mean(axis=-1)
    dx = xw - mx[..., None]
    dy = yw - my[..., None]
    vx = (dx * dx).mean(axis=-1)
    vy = (dy * dy).mean(axis=-1)
    cxy = (dx * dy).mean(axis=-1)
    a1 = 2.0 * mx * my + cfg.c1
    a2 = 2.0 * cxy + cfg.c2
    b1 = mx * mx + my * my + cfg.c1
    b2 = vx + vy + cfg.c2
    s = (a1 * a2) / (b1 * b2)
    return s, idx, (mx, my, dx, dy, a1, a2, b1, b2)


def _col(t: np.ndarray) -> np.ndarray:
    return t[..., None]


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")


def ssim(x: Sequence[float], x_prime: Sequence[float], cfg: Optional[SsimConfig] = None) -> float:
    """SSIM of two equal-length vectors; 1.0 at identity."""
    cfg = cfg or SsimConfig()
    a = np.asarray(x, dtype=np.float64).reshape(1, -1)
    b = np.asarray(x_prime, dtype=np.float64).reshape(1, -1)
    _check_pair(a, b)
    s, _, _ = _ssim_terms(a, b, cfg)
    return float(s.mean())


def ssim_batch(batch_x: np.ndarray, batch_x_prime: np.ndarray,
               cfg: Optional[SsimConfig] = None) -> np.ndarray:
    """Per-sample SSIM for two aligned batches."""
    cfg = cfg or SsimConfig()
    x = as_matrix(batch_x, "batch")
    y = as_matrix(batch_x_prime, "reconstruction")
    _check_pair(x, y)
    s, _, _ = _ssim_terms(x, y, cfg)
    return s.mean(axis=1)


def ssim_loss(batch_x: np.ndarray, batch_x_prime: np.ndarray,
              cfg: Optional[SsimConfig] = None) -> Tuple[float, np.ndarray]:
    """
    Mean (1 - SSIM) over the batch and its gradient w.r.t. the reconstruction.

    Returns:
        (loss, dLoss/dX') with dX' shaped like the batch
    """
    cfg = cfg or SsimConfig()
    x = as_matrix(batch_x, "batch")
    y = as_matrix(batch_x_prime, "reconstruction")
    _check_pair(x, y)
    n = x.shape[0]
    if n == 0:
        raise CountError("ssim_loss called with an empty batch")

    s, idx, (mx, my, dx, dy, a1, a2, b1, b2) = _ssim_terms(x, y, cfg)
    n_windows, win_len = idx.shape
    loss = float(np.mean(1.0 - s.mean(axis=1)))

    # dS/dy_k = (2/L) [ (mx*a2 + a1*dx_k) / (b1*b2) - S * (my/b1 + dy_k/b2) ]
    ds = (2.0 / win_len) * (
        (_col(mx) * _col(a2) + _col(a1) * dx) / _col(b1 * b2)
        - _col(s) * (_col(my / b1) + dy / _col(b2))
    )
    grad = np.zeros_like(y)
    grad[:, idx] = -ds / (n * n_windows)
    return loss, grad


# ============================================================================
# Cross-entropy and the joint objective
# ============================================================================

def check_one_hot(evidence: np.ndarray, name: str = "evidence") -> np.ndarray:
    v = as_matrix(evidence, name)
    if not (np.all((v == 0.0) | (v == 1.0)) and np.all(v.sum(axis=1) == 1.0)):
        raise ShapeError(f"{name} rows must be one-hot")
    return v


def softmax_cross_entropy(evidence: np.ndarray, head_output: np.ndarray,
                          clip: float = LOG_CLIP) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy H(V, Q) and its gradient w.r.t. the head logits.

    Args:
        evidence: One-hot matrix V (N x C)
        head_output: Softmax probabilities Q (N x C)

    Returns:
        (loss, (Q - V) / N)
    """
    v = check_one_hot(evidence)
    q = as_matrix(head_output, "head output")
    if v.shape != q.shape:
        raise ShapeError(f"evidence shape {v.shape} != head output shape {q.shape}")
    n = v.shape[0]
    if n == 0:
        raise CountError("softmax_cross_entropy called with no samples")
    if np.any(np.abs(q.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE):
        raise ShapeError("head output rows must sum to 1")
    loss = float(-np.sum(v * np.log(q + clip)) / n)
    return loss, (q - v) / n


def evidence_transfer_loss(ae_loss: float, ce_losses: List[float], cfg: TransferConfig) -> float:
    """``ae_loss + lambda * mean(ce_losses)``; reduces to ``ae_loss`` at lambda = 0."""
    if cfg.evidence_count < 1 or not ce_losses:
        raise ConfigurationError("evidence transfer needs at least one evidence source")
    if len(ce_losses) != cfg.evidence_count:
        raise ConfigurationError(
            f"got {len(ce_losses)} cross-entropy terms for K={cfg.evidence_count} sources"
        )
    if cfg.lam == 0:
        return ae_loss
    return ae_loss + cfg.lam * (sum(ce_losses) / cfg.evidence_count)
