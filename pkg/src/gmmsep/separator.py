"""Inference: source separation, query-by-example extraction, embedding inspection.

Every channel of the input is processed independently and each estimate is
resynthesised with the mixture phase. Inputs longer than the model's
training excerpt are cut into half-overlapping chunks whose outputs are
cross-faded with a triangular window.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .classgmm import VARIANCE_FLOOR, fit_single_gaussian, likelihood_mask, posterior_mask
from .dsp import AudioClip, istft
from .losses import loudness_gate
from .system import SeparationModel, featurize, load_checkpoint


def load_model(checkpoint) -> SeparationModel:
    if isinstance(checkpoint, SeparationModel):
        return checkpoint
    model, header = load_checkpoint(checkpoint)
    model.excerpt_duration = header.get("extra", {}).get("excerpt_duration")
    return model


def _check_rate(clip: AudioClip, model: SeparationModel):
    if clip.num_samples == 0:
        raise ValueError("empty input")
    if clip.sample_rate != model.frontend.sample_rate:
        raise ValueError(
            f"input is {clip.sample_rate} Hz but the model expects "
            f"{model.frontend.sample_rate} Hz; resample first"
        )


def _crossfade(x: np.ndarray, chunk: int, process) -> np.ndarray:
    """Apply ``process`` (1-D array -> (C, n) array) over half-overlapping chunks."""
    n = len(x)
    if chunk is None or n <= chunk:
        return process(x)
    hop = chunk // 2
    starts = list(range(0, n - chunk, hop)) + [n - chunk]
    w = 1.0 - np.abs(2.0 * (np.arange(chunk) + 0.5) / chunk - 1.0)
    out = None
    norm = np.zeros(n)
    for s in starts:
        y = process(x[s : s + chunk])
        if out is None:
            out = np.zeros((y.shape[0], n))
        out[:, s : s + chunk] += w * y
        norm[s : s + chunk] += w
    return out / norm


def _chunk_len(model: SeparationModel, chunk_seconds) -> int | None:
    if chunk_seconds is None:
        chunk_seconds = getattr(model, "excerpt_duration", None)
    if not chunk_seconds:
        return None
    return int(round(chunk_seconds * model.frontend.sample_rate))


def separate_masks(signal: np.ndarray, model: SeparationModel):
    """Linear masks ``F x T x C`` and the features of one channel."""
    feats = featurize(signal, model.frontend)
    masks, _ = model.infer(feats)
    return masks, feats


def separate(mixture: AudioClip, checkpoint, chunk_seconds: float | None = None) -> dict[str, AudioClip]:
    """Split ``mixture`` into one clip per class, each with the mixture's channel count."""
    model = load_model(checkpoint)
    _check_rate(mixture, model)

    def one_chunk(x):
        masks, feats = separate_masks(x, model)
        X = feats.spec
        return np.stack([istft(X.with_values(X.values * masks[..., c])).samples[0]
                         for c in range(model.num_classes)])

    chunk = _chunk_len(model, chunk_seconds)
    per_channel = [_crossfade(ch, chunk, one_chunk) for ch in mixture.samples]
    return {name: AudioClip(np.stack([ch[c] for ch in per_channel]), mixture.sample_rate)
            for c, name in enumerate(model.classes)}


def _require_embeddings(model: SeparationModel):
    if model.is_baseline:
        raise ValueError("the baseline model has no embedding space")


def model_variance(model: SeparationModel) -> float:
    """Mean learned class variance: the scale the model's class Gaussians live at."""
    return float(model.gaussian_params().detach().full_variances().mean())


def query_gaussian(query: AudioClip, model: SeparationModel, diagonal: bool = True,
                   gate_db: float | None = -40.0, variance_floor: float | str = "model"):
    """Fit one Gaussian to the embeddings of the query (all frames jointly).

    With ``gate_db`` set only bins louder than that threshold relative to the
    query's peak take part; silent bins carry no information about the query.

    A few seconds of query give a far tighter fit than the spread of the same
    source inside a mixture, so by default the variances are floored at the
    model's learned class variance. Pass a number to use a fixed floor instead.
    """
    _require_embeddings(model)
    _check_rate(query, model)
    if query.num_samples < model.frontend.window_size:
        raise ValueError("query is shorter than one analysis frame")
    if variance_floor == "model":
        floor = max(VARIANCE_FLOOR, model_variance(model))
    else:
        floor = float(variance_floor)
    feats = featurize(query.to_mono().samples[0], model.frontend)
    _, V = model.infer(feats)
    gate = None
    if gate_db is not None:
        gate = loudness_gate(feats.logmel, gate_db).T
        if gate.sum() < 2:
            gate = None
    return fit_single_gaussian(torch.as_tensor(V), diagonal=diagonal, floor=floor, weights=gate)


def query_masks(signal: np.ndarray, gaussian, model: SeparationModel):
    """``(mel mask T x M, linear mask F x T, features)`` of one channel under the query."""
    feats = featurize(signal, model.frontend)
    _, V = model.infer(feats)
    mel = likelihood_mask(torch.as_tensor(V), gaussian).numpy()
    lin = model.lift(torch.as_tensor(mel)[None, :, :, None])[0, :, :, 0].numpy()
    return mel, lin, feats


def query_separate(query: AudioClip, mixture: AudioClip, checkpoint, diagonal: bool = True,
                   gate_db: float | None = -40.0,
                   variance_floor: float | str = "model") -> AudioClip:
    """Extract the part of ``mixture`` that resembles ``query``."""
    model = load_model(checkpoint)
    _check_rate(mixture, model)
    gaussian = query_gaussian(query, model, diagonal, gate_db, variance_floor)
    out = []
    for ch in mixture.samples:
        _, lin, feats = query_masks(ch, gaussian, model)
        out.append(istft(feats.spec.with_values(feats.spec.values * lin)).samples[0])
    return AudioClip(np.stack(out), mixture.sample_rate)


@dataclass
class EmbeddingViews:
    coords: np.ndarray        # N x 2, top two principal components
    labels: np.ndarray        # N, dominant class index
    bins: np.ndarray          # N x 2, (frame, mel bin)
    mean: np.ndarray          # K
    components: np.ndarray    # K x K, rows ordered by decreasing variance
    explained: np.ndarray     # K, variance along each component
    grids: np.ndarray         # K x M x T raw embedding dimensions
    params: dict
    classes: tuple


def pca(X: np.ndarray):
    """``(mean, components, variances)`` from the eigendecomposition of the covariance."""
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    return mean, evecs[:, order].T, np.maximum(evals[order], 0.0)


def embedding_views(mixture: AudioClip, checkpoint) -> EmbeddingViews:
    """PCA view of the gated embeddings and the raw embedding dimensions."""
    model = load_model(checkpoint)
    _require_embeddings(model)
    _check_rate(mixture, model)
    feats = featurize(mixture.to_mono().samples[0], model.frontend)
    _, V = model.infer(feats)
    T, M, K = V.shape
    gate = feats.gate.T.astype(bool)
    if gate.sum() < 2:
        gate = np.ones_like(gate)
    frames, mels = np.nonzero(gate)
    X = V[frames, mels]
    mean, comps, var = pca(X)
    params = model.gaussian_params().detach().to(torch.float64)
    labels = posterior_mask(torch.as_tensor(X), params).argmax(-1).numpy()
    return EmbeddingViews((X - mean) @ comps[:2].T, labels, np.stack([frames, mels], 1),
                          mean, comps, var, V.transpose(2, 1, 0), params.to_dict(),
                          model.classes)


def export_embedding_views(mixture: AudioClip, checkpoint, out_dir) -> EmbeddingViews:
    """Write ``pca.csv``, ``dim_<k>.csv`` grids (M rows x T columns) and ``gaussians.json``."""
    views = embedding_views(mixture, checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pca.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "mel_bin", "pc1", "pc2", "label"])
        for (t, m), (a, b), lab in zip(views.bins, views.coords, views.labels):
            w.writerow([int(t), int(m), f"{a:.6g}", f"{b:.6g}", views.classes[lab]])
    for k, grid in enumerate(views.grids):
        np.savetxt(out / f"dim_{k}.csv", grid, delimiter=",", fmt="%.6g")
    sidecar = dict(views.params, classes=list(views.classes),
                   explained_variance=views.explained.tolist())
    with open(out / "gaussians.json", "w") as f:
        json.dump(sidecar, f, indent=2)
    return views
