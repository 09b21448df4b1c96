"""Gradient training of the masking system.

The GMM model minimises ``dc_weight * DC + l1_weight * L1`` where the deep
clustering term acts on the embeddings and the L1 term on the masked linear
magnitudes. The baseline uses the same loop with the DC weight forced to 0.

Training is deterministic for a fixed seed: parameters are initialised from
``torch.manual_seed(seed)`` and epoch ``e`` shuffles with
``numpy.random.default_rng([seed, e])``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .classgmm import DEFAULT_CLASSES, CovarianceType
from .datagen import MixtureSpec, _StemCache, read_manifest, render_mixture
from .dsp import stft
from .losses import combined_loss, dc_loss, ideal_binary_masks, l1_mask_loss, mel_affinity_targets
from .model import BaselineConfig, EmbeddingNetConfig
from .system import (FrontEnd, SeparationModel, featurize, load_checkpoint, restore_optimizer,
                     save_checkpoint)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "dc", "l1", "combined", "val_combined", "wall_time", "variance")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # front end
    sample_rate: int = 48000
    window_size: int = 2048
    hop_size: int = 512
    mel_bins: int = 300
    normalize_input: bool = True
    # network
    num_layers: int = 4
    hidden_units: int = 300
    embedding_dim: int = 15
    unit_normalize: bool = False
    covariance: str = "sphr-tied"
    baseline: bool = False
    # optimisation
    dc_weight: float = 0.5
    l1_weight: float = 0.5
    batch_size: int = 8
    learning_rate: float = 1e-3
    grad_clip: float = 5.0
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    device: str = "cpu"
    dtype: str = "float32"

    def __post_init__(self):
        if self.dc_weight < 0 or self.l1_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if not math.isclose(self.dc_weight + self.l1_weight, 1.0, abs_tol=1e-9):
            raise ValueError("loss weights must sum to 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        CovarianceType.parse(self.covariance)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def effective_weights(self) -> tuple[float, float]:
        """``(dc, l1)``; the baseline has no embedding so its DC weight is 0."""
        if self.baseline:
            return 0.0, 1.0
        return self.dc_weight, self.l1_weight

    def frontend(self) -> FrontEnd:
        return FrontEnd(self.sample_rate, self.window_size, self.hop_size, mel_bins=self.mel_bins,
                        normalize=self.normalize_input)

    def build_model(self, classes=DEFAULT_CLASSES) -> SeparationModel:
        torch.manual_seed(self.seed)
        fe = self.frontend()
        if self.baseline:
            net = BaselineConfig(self.num_layers, self.hidden_units, self.mel_bins, len(classes))
            model = SeparationModel(fe, net, None, classes)
        else:
            net = EmbeddingNetConfig(self.num_layers, self.hidden_units, self.embedding_dim,
                                     self.mel_bins, self.unit_normalize)
            model = SeparationModel(fe, net, CovarianceType.parse(self.covariance), classes)
        return model.to(getattr(torch, self.dtype))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Reduced configuration for CPU-scale experiments on 16 kHz synthetic audio."""
    base = TrainConfig(sample_rate=16000, window_size=512, hop_size=128, mel_bins=64,
                       num_layers=2, hidden_units=64, embedding_dim=8,
                       batch_size=8, max_epochs=30, patience=10)
    return replace(base, **overrides)


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines (``#`` comments) into typed config values."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key], key)
    return out


def _coerce(value: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ValueError(f"bad value {value!r} for {key} ({typ})") from None
    return value


# --- data ---------------------------------------------------------------------

@dataclass
class Examples:
    """Featurised mixtures stacked along a leading example axis."""

    ids: list[str]
    inputs: torch.Tensor        # N, T, M
    mix_mag: torch.Tensor       # N, F, T
    source_mag: torch.Tensor    # N, F, T, C
    targets: torch.Tensor       # N, T*M, C
    weights: torch.Tensor       # N, T*M
    duration: float = 0.0       # seconds per example

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Examples":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return Examples([self.ids[i] for i in idx.tolist()], self.inputs[idx], self.mix_mag[idx],
                        self.source_mag[idx], self.targets[idx], self.weights[idx],
                        self.duration)


def prepare_examples(specs: list[MixtureSpec], fe: FrontEnd, classes=DEFAULT_CLASSES,
                     dtype=torch.float32) -> Examples:
    if not specs:
        raise ValueError("empty manifest")
    cache = _StemCache(fe.sample_rate)
    rows = []
    for spec in specs:
        if spec.sample_rate != fe.sample_rate:
            raise ValueError(f"{spec.id}: {spec.sample_rate} Hz, model expects {fe.sample_rate}")
        mix, stems = render_mixture(spec, cache)
        feats = featurize(mix, fe)
        mags = [np.abs(stft(stems[c], fe.stft_config).values) for c in classes]
        ibm = ideal_binary_masks(mags)
        targets = mel_affinity_targets(ibm, fe.filterbank, feats.logmel, fe.gate_db)
        rows.append((spec.id, feats.net_input, np.abs(feats.spec.values), np.stack(mags, -1),
                     targets.values, targets.weights))
    if len({spec.duration for spec in specs}) != 1:
        raise ValueError("all mixtures in a manifest must have the same duration")

    def stack(i):
        return torch.as_tensor(np.stack([r[i] for r in rows]), dtype=dtype)

    return Examples([r[0] for r in rows], stack(1), stack(2), stack(3), stack(4), stack(5),
                    specs[0].duration)


# --- optimisation -------------------------------------------------------------

def make_optimizer(model: SeparationModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def compute_losses(model: SeparationModel, batch: Examples, cfg: TrainConfig):
    dc_w, l1_w = cfg.effective_weights
    mel_masks, V = model(batch.inputs)
    l1 = l1_mask_loss(model.lift(mel_masks), batch.mix_mag, batch.source_mag)
    if V is not None and dc_w > 0:
        dc = dc_loss(V.reshape(V.shape[0], -1, V.shape[-1]), batch.targets, batch.weights)
    else:
        dc = torch.zeros((), dtype=l1.dtype)
    return dc, l1, combined_loss(dc, l1, dc_w, l1_w)


def train_step(model: SeparationModel, optimizer: torch.optim.Optimizer, batch: Examples,
               cfg: TrainConfig, dump_dir: Path | None = None) -> dict:
    """One optimizer step on the combined loss; returns the pre-step loss values."""
    model.train()
    optimizer.zero_grad()
    try:
        dc, l1, loss = compute_losses(model, batch, cfg)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite loss")
    except FloatingPointError as e:
        msg = f"{e} on batch {batch.ids}"
        if dump_dir is not None:
            dump = Path(dump_dir) / "nan_batch.npz"
            np.savez(dump, ids=np.array(batch.ids), inputs=batch.inputs.numpy())
            msg += f" (batch dumped to {dump})"
        raise TrainingAborted(msg) from e
    loss.backward()
    dc, l1, loss = dc.detach(), l1.detach(), loss.detach()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return {"dc": dc.item(), "l1": l1.item(), "combined": loss.item()}


def evaluate_loss(model: SeparationModel, data: Examples, cfg: TrainConfig) -> dict:
    model.eval()
    totals = {"dc": 0.0, "l1": 0.0, "combined": 0.0}
    with torch.no_grad():
        for start in range(0, len(data), cfg.batch_size):
            batch = data.subset(range(start, min(start + cfg.batch_size, len(data))))
            dc, l1, loss = compute_losses(model, batch, cfg)
            for k, v in zip(totals, (dc, l1, loss)):
                totals[k] += float(v) * len(batch)
    return {k: v / len(data) for k, v in totals.items()}


def learned_variance(model: SeparationModel) -> float | None:
    """Mean learned variance of the class Gaussians (``None`` for the baseline)."""
    if model.is_baseline:
        return None
    with torch.no_grad():
        return float(model.gaussian_params().variances.mean())


def _write_log(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in LOG_COLUMNS})


def _load_specs(m) -> list[MixtureSpec]:
    if isinstance(m, (str, Path)):
        return read_manifest(m)
    return list(m)


def fit(train_manifest, val_manifest, cfg: TrainConfig, out_dir, resume=None,
        classes=DEFAULT_CLASSES, train_data: Examples | None = None,
        val_data: Examples | None = None) -> Path:
    """Train until ``max_epochs`` or early stopping; returns the best checkpoint path.

    ``out_dir`` receives ``best.npz`` (lowest validation loss), ``last.npz``
    (for resuming) and ``train_log.csv``. Pre-featurised data may be passed
    via ``train_data`` / ``val_data`` to skip rendering.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = getattr(torch, cfg.dtype)
    fe = cfg.frontend()
    if train_data is None:
        train_data = prepare_examples(_load_specs(train_manifest), fe, classes, dtype)
    if val_data is None:
        val_data = prepare_examples(_load_specs(val_manifest), fe, classes, dtype)
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("empty manifest")

    if resume is not None:
        model, header = load_checkpoint(resume)
        model.to(dtype)
        optimizer = make_optimizer(model, cfg)
        restore_optimizer(optimizer, header)
        state = header["extra"]
        start_epoch = state["epoch"] + 1
        best_val, bad_epochs = state["best_val"], state["bad_epochs"]
        history, step = state["history"], header["step"]
    else:
        model = cfg.build_model(classes)
        optimizer = make_optimizer(model, cfg)
        start_epoch, best_val, bad_epochs, history, step = 1, math.inf, 0, [], 0

    best_path, last_path, log_path = out / "best.npz", out / "last.npz", out / "train_log.csv"
    t0 = time.perf_counter() - (history[-1]["wall_time"] if history else 0.0)
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_data))
        sums = {"dc": 0.0, "l1": 0.0, "combined": 0.0}
        for start in range(0, len(order), cfg.batch_size):
            batch = train_data.subset(order[start : start + cfg.batch_size])
            metrics = train_step(model, optimizer, batch, cfg, dump_dir=out)
            step += 1
            for k in sums:
                sums[k] += metrics[k] * len(batch)
        row = {k: v / len(train_data) for k, v in sums.items()}
        row["val_combined"] = evaluate_loss(model, val_data, cfg)["combined"]
        row["epoch"] = epoch
        row["wall_time"] = round(time.perf_counter() - t0, 3)
        row["variance"] = learned_variance(model)
        history.append(row)
        log.info("epoch %d: %s", epoch, row)

        improved = row["val_combined"] < best_val
        if improved:
            best_val, bad_epochs = row["val_combined"], 0
        else:
            bad_epochs += 1
        extra = {"epoch": epoch, "best_val": best_val, "bad_epochs": bad_epochs,
                 "history": history, "train_config": cfg.to_dict(),
                 "excerpt_duration": train_data.duration or None}
        if improved:
            save_checkpoint(best_path, model, step, cfg.seed, extra)
        save_checkpoint(last_path, model, step, cfg.seed, extra, optimizer)
        _write_log(log_path, history)
        if bad_epochs >= cfg.patience:
            log.info("early stop after %d epochs without improvement", bad_epochs)
            break
    if not best_path.exists():
        raise TrainingAborted("no epoch completed")
    return best_path
