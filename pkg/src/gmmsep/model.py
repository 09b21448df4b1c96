"""Recurrent embedding network and the sigmoid mask-inference baseline.

Both networks read a sequence of mel frames ``(batch, T, M)`` through the
same stack of bidirectional LSTMs. The embedding network emits a
``K``-dimensional vector for every time-mel bin; the baseline emits one
sigmoid mask value per class for every time-mel bin.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class EmbeddingNetConfig:
    num_recurrent_layers: int = 4
    hidden_units_per_direction: int = 300
    embedding_dim: int = 15
    mel_bins: int = 300
    unit_normalize: bool = False

    def __post_init__(self):
        for name in ("num_recurrent_layers", "hidden_units_per_direction",
                     "embedding_dim", "mel_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BaselineConfig:
    num_recurrent_layers: int = 4
    hidden_units_per_direction: int = 300
    mel_bins: int = 300
    num_classes: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("baseline needs at least 2 classes")
        for name in ("num_recurrent_layers", "hidden_units_per_direction", "mel_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class _RecurrentStack(nn.Module):
    def __init__(self, mel_bins: int, hidden: int, layers: int, out_per_bin: int):
        super().__init__()
        self.mel_bins = mel_bins
        self.out_per_bin = out_per_bin
        self.lstm = nn.LSTM(mel_bins, hidden, num_layers=layers,
                            batch_first=True, bidirectional=True)
        self.dense = nn.Linear(2 * hidden, mel_bins * out_per_bin)
        for name, p in self.lstm.named_parameters():
            if name.startswith("weight_hh"):
                for gate in p.data.chunk(4, dim=0):
                    nn.init.orthogonal_(gate)
            elif name.startswith("weight_ih"):
                nn.init.xavier_uniform_(p)
            else:
                nn.init.zeros_(p)
        nn.init.xavier_uniform_(self.dense.weight)
        nn.init.zeros_(self.dense.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.mel_bins:
            raise ValueError(f"expected {self.mel_bins} mel bins, got {x.shape[-1]}")
        h, _ = self.lstm(x)
        out = self.dense(h)
        return out.reshape(*x.shape[:-1], self.mel_bins, self.out_per_bin)


class EmbeddingNet(_RecurrentStack):
    """``(B, T, M)`` features to ``(B, T, M, K)`` embeddings (tanh, optionally unit-norm)."""

    def __init__(self, cfg: EmbeddingNetConfig = EmbeddingNetConfig()):
        super().__init__(cfg.mel_bins, cfg.hidden_units_per_direction,
                         cfg.num_recurrent_layers, cfg.embedding_dim)
        self.config = cfg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        v = torch.tanh(super().forward(x))
        if self.config.unit_normalize:
            v = v / v.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        return v


class BaselineNet(_RecurrentStack):
    """``(B, T, M)`` features to ``(B, T, M, C)`` independent sigmoid masks."""

    def __init__(self, cfg: BaselineConfig = BaselineConfig()):
        super().__init__(cfg.mel_bins, cfg.hidden_units_per_direction,
                         cfg.num_recurrent_layers, cfg.num_classes)
        self.config = cfg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(super().forward(x))


def _run(net: nn.Module, logmel) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(logmel, dtype=dtype)
    if x.dim() != 2:
        raise ValueError("expected an M x T feature matrix")
    if x.shape[0] != net.mel_bins:
        raise ValueError(f"expected {net.mel_bins} mel bins, got {x.shape[0]}")
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(x.T.unsqueeze(0))[0]
    finally:
        net.train(was_training)


def embed(logmel, net: EmbeddingNet) -> torch.Tensor:
    """Embeddings ``T x M x K`` for one ``M x T`` feature matrix."""
    return _run(net, logmel)


def baseline_forward(logmel, net: BaselineNet) -> torch.Tensor:
    """Mel-domain masks ``T x M x C`` in (0, 1) for one ``M x T`` feature matrix."""
    return _run(net, logmel)
