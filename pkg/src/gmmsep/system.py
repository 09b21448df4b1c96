"""The end-to-end masking system shared by training and inference.

``FrontEnd`` turns a mono waveform into the network input. ``SeparationModel``
bundles a front end with either the embedding network plus auxiliary GMM
network, or the sigmoid baseline, and produces linear-frequency masks.

Checkpoint format
-----------------
A checkpoint is an uncompressed ``.npz`` archive (loadable with
``allow_pickle=False``) holding:

``header``
    UTF-8 JSON as a ``uint8`` array: ``{"format": "gmmsep-checkpoint",
    "version": 1, "kind", "frontend", "classes", "covariance",
    "net_config", "step", "seed", "extra", "optimizer"}``.
``param/<name>``
    one array per entry of the model's ``state_dict``.
``optim/<index>/<key>``
    optional optimizer state tensors, so training can resume exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np
import torch
import torch.nn as nn

from .classgmm import DEFAULT_CLASSES, AuxNet, CovarianceType, GaussianParams, posterior_mask
from .dsp import (AudioClip, ComplexSpectrogram, MelFilterbank, StftConfig, log_magnitude,
                  mel_average, mel_filterbank, stft, unprojection_matrix)
from .losses import loudness_gate
from .model import BaselineConfig, BaselineNet, EmbeddingNet, EmbeddingNetConfig

FORMAT = "gmmsep-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FrontEnd:
    sample_rate: int = 48000
    window_size: int = 2048
    hop_size: int = 512
    window: str = "sqrt_hann"
    mel_bins: int = 300
    floor_db: float = -80.0
    gate_db: float = -40.0
    normalize: bool = True

    @cached_property
    def stft_config(self) -> StftConfig:
        return StftConfig(self.window_size, self.hop_size, self.window)

    @cached_property
    def filterbank(self) -> MelFilterbank:
        return mel_filterbank(self.sample_rate, self.window_size, self.mel_bins)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Features:
    spec: ComplexSpectrogram
    logmel: np.ndarray      # M x T, dB
    net_input: np.ndarray   # T x M
    gate_db: float = -40.0

    @property
    def gate(self) -> np.ndarray:
        """``M x T`` bins louder than the gate threshold."""
        return loudness_gate(self.logmel, self.gate_db)


def featurize(signal, fe: FrontEnd) -> Features:
    """STFT, log magnitude, mel averaging and input scaling for one channel.

    The network sees ``logmel / (-floor_db / 2) + 1``, which maps the
    normalized dB range ``[floor_db, 0]`` onto ``[-1, 1]``.
    """
    if isinstance(signal, AudioClip):
        if signal.sample_rate != fe.sample_rate:
            raise ValueError(f"expected {fe.sample_rate} Hz audio, got {signal.sample_rate}")
        if signal.channels != 1:
            raise ValueError("featurize expects one channel")
        signal = signal.samples[0]
    spec = stft(np.asarray(signal, dtype=np.float64), fe.stft_config, fe.sample_rate)
    logmag = log_magnitude(spec, fe.floor_db)
    if fe.normalize:
        logmag = logmag - logmag.max()
    logmel = mel_average(logmag, fe.filterbank)
    net_input = (logmel / (-fe.floor_db / 2.0) + 1.0).T
    return Features(spec, logmel, np.ascontiguousarray(net_input), fe.gate_db)


class SeparationModel(nn.Module):
    """Mask estimator: GMM posterior masks over embeddings, or the sigmoid baseline."""

    def __init__(self, frontend: FrontEnd, net_config,
                 covariance: CovarianceType | None = CovarianceType(),
                 classes=DEFAULT_CLASSES):
        super().__init__()
        self.frontend = frontend
        self.classes = tuple(classes)
        C = len(self.classes)
        if isinstance(net_config, BaselineConfig):
            if net_config.num_classes != C:
                raise ValueError("baseline class count does not match classes")
            self.kind = "baseline"
            self.covariance = None
            self.net = BaselineNet(net_config)
            self.aux = None
        else:
            if covariance is None:
                raise ValueError("embedding model needs a covariance type")
            if net_config.mel_bins != frontend.mel_bins:
                raise ValueError("network mel_bins does not match the front end")
            self.kind = "gmm"
            self.covariance = covariance
            self.net = EmbeddingNet(net_config)
            self.aux = AuxNet(C, net_config.embedding_dim, covariance)
        self.net_config = net_config
        lift = torch.as_tensor(unprojection_matrix(frontend.filterbank), dtype=torch.float32)
        self.register_buffer("lift_matrix", lift, persistent=False)

    @property
    def is_baseline(self) -> bool:
        return self.kind == "baseline"

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def gaussian_params(self) -> GaussianParams:
        if self.aux is None:
            raise ValueError("the baseline model has no Gaussian parameters")
        return self.aux.params()

    def forward(self, x: torch.Tensor):
        """``(B, T, M)`` input to ``(mel masks (B, T, M, C), embeddings or None)``."""
        if self.is_baseline:
            return self.net(x), None
        V = self.net(x)
        return posterior_mask(V, self.gaussian_params()), V

    def lift(self, mel_masks: torch.Tensor) -> torch.Tensor:
        """``(B, T, M, C)`` mel masks to ``(B, F, T, C)`` linear masks in [0, 1]."""
        L = self.lift_matrix.to(mel_masks.dtype)
        return torch.einsum("fm,btmc->bftc", L, mel_masks).clamp(0.0, 1.0)

    def infer(self, feats: Features):
        """Inference on one channel: ``(linear masks F x T x C, embeddings T x M x K or None)``."""
        dtype = next(self.parameters()).dtype
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                x = torch.as_tensor(feats.net_input, dtype=dtype).unsqueeze(0)
                mel_masks, V = self(x)
                masks = self.lift(mel_masks)[0]
        finally:
            self.train(was_training)
        return masks.double().numpy(), None if V is None else V[0].double().numpy()

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "frontend": self.frontend.to_dict(),
            "classes": list(self.classes),
            "covariance": None if self.covariance is None else self.covariance.name,
            "net_config": self.net_config.to_dict(),
        }

    @classmethod
    def from_description(cls, d: dict) -> "SeparationModel":
        fe = FrontEnd(**d["frontend"])
        if d["kind"] == "baseline":
            return cls(fe, BaselineConfig(**d["net_config"]), None, d["classes"])
        return cls(fe, EmbeddingNetConfig(**d["net_config"]),
                   CovarianceType.parse(d["covariance"]), d["classes"])


def save_checkpoint(path, model: SeparationModel, step: int = 0, seed: int = 0,
                    extra: dict | None = None, optimizer: torch.optim.Optimizer | None = None) -> None:
    header = dict(format=FORMAT, version=VERSION, step=int(step), seed=int(seed),
                  extra=extra or {}, **model.describe())
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        sd = optimizer.state_dict()
        header["optimizer"] = {"param_groups": sd["param_groups"],
                               "keys": {str(i): sorted(s) for i, s in sd["state"].items()}}
        for i, state in sd["state"].items():
            for key, value in state.items():
                arrays[f"optim/{i}/{key}"] = torch.as_tensor(value).cpu().numpy()
    else:
        header["optimizer"] = None
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Raw ``(header, arrays)`` of a checkpoint file."""
    try:
        with np.load(os.fspath(path), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        header = json.loads(arrays.pop("header").tobytes().decode())
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from e
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    return header, arrays


def load_checkpoint(path, optimizer: torch.optim.Optimizer | None = None):
    """Rebuild the model stored at ``path``; returns ``(model, header)``.

    If ``optimizer`` is given it must wrap the returned model's parameters
    afterwards; use :func:`restore_optimizer` for that.
    """
    header, arrays = read_checkpoint(path)
    try:
        model = SeparationModel.from_description(header)
        params = {k[len("param/"):]: torch.from_numpy(v.copy())
                  for k, v in arrays.items() if k.startswith("param/")}
        dtype = next(iter(params.values())).dtype
        model.to(dtype)
        model.load_state_dict(params)
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"{path}: inconsistent checkpoint ({e})") from e
    header["_arrays"] = {k: v for k, v in arrays.items() if k.startswith("optim/")}
    return model, header


def restore_optimizer(optimizer: torch.optim.Optimizer, header: dict) -> None:
    info = header.get("optimizer")
    if not info:
        return
    arrays = header["_arrays"]
    state = {int(i): {key: torch.from_numpy(arrays[f"optim/{i}/{key}"].copy()) for key in keys}
             for i, keys in info["keys"].items()}
    optimizer.load_state_dict({"state": state, "param_groups": info["param_groups"]})
