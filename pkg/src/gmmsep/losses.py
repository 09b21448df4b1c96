"""Training objectives and their targets.

The deep clustering loss is evaluated with the low-rank expansion

    |W^.5 (V V^T - Y Y^T) W^.5|_F^2
        = |V^T W V|_F^2 - 2 |V^T W Y|_F^2 + |Y^T W Y|_F^2

so the ``N x N`` affinity matrices are never built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dsp import MelFilterbank, mel_average


@dataclass(frozen=True)
class AffinityTargets:
    """Soft class-membership targets ``(T*M, C)`` and binary loudness weights ``(T*M,)``.

    Rows are ordered time-major to match embeddings flattened from ``T x M x K``.
    """

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.weights.shape != (self.values.shape[0],):
            raise ValueError("targets must be (N, C) with (N,) weights")


def ideal_binary_masks(source_mags) -> np.ndarray:
    """``F x T x C`` one-hot masks marking the loudest source per bin.

    Ties (including all-zero bins) go to the lowest class index.
    """
    if len(source_mags) == 0:
        raise ValueError("need at least one source")
    mags = np.stack([np.abs(np.asarray(s)) for s in source_mags], axis=-1)
    winner = np.argmax(mags, axis=-1)
    return (winner[..., None] == np.arange(mags.shape[-1])).astype(np.float64)


def loudness_gate(mix_logmel: np.ndarray, threshold_db: float = -40.0) -> np.ndarray:
    """Binary ``M x T`` gate: 1 where a bin is within ``threshold_db`` of the clip max."""
    mix_logmel = np.asarray(mix_logmel, dtype=np.float64)
    return (mix_logmel > mix_logmel.max() + threshold_db).astype(np.float64)


def mel_affinity_targets(ibm: np.ndarray, fb: MelFilterbank, mix_logmel: np.ndarray,
                         threshold_db: float = -40.0) -> AffinityTargets:
    """Project per-class binary masks to mel bands and attach the loudness gate.

    A silent clip (flat log-mel) yields all-zero weights.
    """
    ibm = np.asarray(ibm, dtype=np.float64)
    if ibm.ndim != 3 or ibm.shape[0] != fb.num_bins:
        raise ValueError(f"ibm must be {fb.num_bins} x T x C, got {ibm.shape}")
    F_, T, C = ibm.shape
    if mix_logmel.shape != (fb.mel_bins, T):
        raise ValueError(
            f"mix_logmel must be {(fb.mel_bins, T)}, got {mix_logmel.shape}"
        )
    mel = np.stack([mel_average(ibm[..., c], fb) for c in range(C)], axis=-1)
    mel = np.clip(mel, 0.0, 1.0)
    values = mel.transpose(1, 0, 2).reshape(T * fb.mel_bins, C)
    gate = loudness_gate(mix_logmel, threshold_db)
    if np.ptp(mix_logmel) == 0:
        gate = np.zeros_like(gate)
    weights = gate.T.reshape(-1)
    return AffinityTargets(values, weights)


def dc_loss(V, Y, weights=None, normalize: bool = True) -> torch.Tensor:
    """Weighted deep clustering loss.

    ``V`` is ``(..., N, K)``, ``Y`` is ``(..., N, C)`` and ``weights`` is
    ``(..., N)``; leading batch axes are averaged. With ``normalize`` each
    item is divided by the squared sum of its weights.
    """
    if isinstance(Y, AffinityTargets):
        Y, weights = Y.values, Y.weights
    V = torch.as_tensor(V)
    Y = torch.as_tensor(Y, dtype=V.dtype)
    if V.shape[:-1] != Y.shape[:-1]:
        raise ValueError(f"V {tuple(V.shape)} and Y {tuple(Y.shape)} disagree on N")
    if weights is None:
        w = torch.ones(V.shape[:-1], dtype=V.dtype)
    else:
        w = torch.as_tensor(weights, dtype=V.dtype)
        if w.shape != V.shape[:-1]:
            raise ValueError("weights must match the bin axis")
    Vw = V * w.unsqueeze(-1)
    Yw = Y * w.unsqueeze(-1)
    vv = Vw.transpose(-1, -2) @ V
    vy = Vw.transpose(-1, -2) @ Y
    yy = Yw.transpose(-1, -2) @ Y
    loss = (vv ** 2).sum((-1, -2)) - 2 * (vy ** 2).sum((-1, -2)) + (yy ** 2).sum((-1, -2))
    if normalize:
        total = w.sum(-1)
        loss = torch.where(total > 0, loss / total.clamp_min(1.0) ** 2, torch.zeros_like(loss))
    return loss.mean()


def l1_mask_loss(masks, mix_mag, source_mags) -> torch.Tensor:
    """``sum_c |m_c * x - s_c|`` averaged over time-frequency bins.

    ``masks`` is ``(..., F, T, C)`` (or any bin layout with class last),
    ``mix_mag`` is ``(..., F, T)`` and ``source_mags`` is ``(..., F, T, C)``.
    Leading batch axes are averaged.
    """
    masks = torch.as_tensor(masks)
    x = torch.as_tensor(mix_mag, dtype=masks.dtype)
    if isinstance(source_mags, (list, tuple)):
        s = torch.stack([torch.as_tensor(v, dtype=masks.dtype) for v in source_mags], dim=-1)
    else:
        s = torch.as_tensor(source_mags, dtype=masks.dtype)
    if masks.shape != s.shape or masks.shape[:-1] != x.shape:
        raise ValueError(
            f"shape mismatch: masks {tuple(masks.shape)}, mixture {tuple(x.shape)}, "
            f"sources {tuple(s.shape)}"
        )
    err = (masks * x.unsqueeze(-1) - s).abs().sum(-1)
    return err.mean()


def combined_loss(dc, l1, dc_weight: float = 0.5, l1_weight: float = 0.5) -> torch.Tensor:
    dc = torch.as_tensor(dc)
    l1 = torch.as_tensor(l1)
    if torch.isnan(dc).any() or torch.isnan(l1).any():
        raise FloatingPointError("NaN loss")
    return dc_weight * dc + l1_weight * l1
