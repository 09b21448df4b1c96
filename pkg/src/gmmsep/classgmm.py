"""Class-conditional Gaussian parameters and posterior masks.

An auxiliary network maps each class's one-hot vector to the mean, variance
and prior logit of one Gaussian in the embedding space. The mask for class
``c`` at a bin is the posterior responsibility of that Gaussian for the
bin's embedding, computed in log space.

All functions accept numpy arrays or torch tensors and return tensors, so the
same code serves inference and gradient training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANCE_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_CLASSES = ("vocals", "drums", "bass", "other")

_COVARIANCE_NAMES = {"diag": (True, False), "diag-tied": (True, True),
                     "sphr": (False, False), "sphr-tied": (False, True)}


@dataclass(frozen=True)
class CovarianceType:
    diagonal: bool = False
    tied: bool = True

    @classmethod
    def parse(cls, name: str) -> "CovarianceType":
        try:
            diagonal, tied = _COVARIANCE_NAMES[name]
        except KeyError:
            raise ValueError(
                f"unknown covariance {name!r}, expected one of {sorted(_COVARIANCE_NAMES)}"
            ) from None
        return cls(diagonal, tied)

    @classmethod
    def all(cls) -> list["CovarianceType"]:
        return [cls.parse(n) for n in ("diag", "diag-tied", "sphr", "sphr-tied")]

    @property
    def name(self) -> str:
        return ("diag" if self.diagonal else "sphr") + ("-tied" if self.tied else "")

    @property
    def label(self) -> str:
        """Row label used in ablation reports, e.g. ``DC/GMM - sphr. (tied)``."""
        shape = "diag." if self.diagonal else "sphr."
        return f"DC/GMM - {shape} ({'tied' if self.tied else 'untied'})"

    def raw_width(self, embedding_dim: int) -> int:
        """Per-class output width of the auxiliary network."""
        return embedding_dim + (embedding_dim if self.diagonal else 1) + 1


@dataclass
class GaussianParams:
    """Means ``(C, K)``, variances and priors ``(C,)`` of a class GMM.

    ``variances`` has shape ``(C, K)`` untied diagonal, ``(1, K)`` tied
    diagonal, ``(C, 1)`` untied spherical and ``(1, 1)`` tied spherical; it
    broadcasts against ``means``.
    """

    means: torch.Tensor
    variances: torch.Tensor
    priors: torch.Tensor
    kind: CovarianceType = CovarianceType()

    def __post_init__(self):
        self.means = torch.as_tensor(self.means)
        self.variances = torch.as_tensor(self.variances, dtype=self.means.dtype)
        self.priors = torch.as_tensor(self.priors, dtype=self.means.dtype)
        C, K = self.means.shape
        expected = (1 if self.kind.tied else C, K if self.kind.diagonal else 1)
        if self.variances.dim() == 0:
            self.variances = self.variances.reshape(1, 1)
        if tuple(self.variances.shape) != expected:
            raise ValueError(
                f"{self.kind.name} variances must have shape {expected}, "
                f"got {tuple(self.variances.shape)}"
            )
        if self.priors.shape != (C,):
            raise ValueError(f"priors must have shape ({C},)")

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.means.shape[1]

    def full_variances(self) -> torch.Tensor:
        return self.variances.expand_as(self.means)

    def validate(self, floor: float = VARIANCE_FLOOR) -> None:
        for name in ("means", "variances", "priors"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contain non-finite values")
        if (self.variances < floor * (1 - 1e-6)).any():
            raise ValueError("variances below floor")
        if (self.priors <= 0).any() or abs(float(self.priors.detach().sum()) - 1.0) > 1e-6:
            raise ValueError("priors must be positive and sum to one")

    def detach(self) -> "GaussianParams":
        return GaussianParams(self.means.detach(), self.variances.detach(),
                              self.priors.detach(), self.kind)

    def to(self, dtype) -> "GaussianParams":
        return GaussianParams(self.means.to(dtype), self.variances.to(dtype),
                              self.priors.to(dtype), self.kind)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.name,
            "means": self.means.detach().cpu().tolist(),
            "variances": self.variances.detach().cpu().tolist(),
            "priors": self.priors.detach().cpu().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianParams":
        return cls(torch.tensor(d["means"], dtype=torch.float64),
                   torch.tensor(d["variances"], dtype=torch.float64),
                   torch.tensor(d["priors"], dtype=torch.float64),
                   CovarianceType.parse(d["kind"]))


def save_params(path, params: GaussianParams, classes=None) -> None:
    d = params.to_dict()
    if classes is not None:
        d["classes"] = list(classes)
    with open(path, "w") as f:
        json.dump(d, f, indent=2)


def load_params(path) -> GaussianParams:
    with open(path) as f:
        return GaussianParams.from_dict(json.load(f))


class AuxNet(nn.Module):
    """Maps class one-hot vectors to raw Gaussian parameters.

    The layer is affine, so each class effectively owns a learned row of
    ``K`` means, ``K`` (diagonal) or 1 (spherical) raw variances and a prior
    logit.
    """

    def __init__(self, num_classes: int, embedding_dim: int, kind: CovarianceType):
        super().__init__()
        self.num_classes = num_classes
        self.embedding_dim = embedding_dim
        self.kind = kind
        self.linear = nn.Linear(num_classes, kind.raw_width(embedding_dim))
        nn.init.xavier_uniform_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, onehots: torch.Tensor) -> torch.Tensor:
        return self.linear(onehots)

    def params(self) -> GaussianParams:
        w = self.linear.weight
        eye = torch.eye(self.num_classes, dtype=w.dtype, device=w.device)
        return generate_params(eye, self, self.kind)


def generate_params(class_onehots, aux_net: AuxNet, kind: CovarianceType,
                    floor: float = VARIANCE_FLOOR) -> GaussianParams:
    """Run the auxiliary network and turn its raw outputs into valid parameters.

    Variances are ``softplus(raw) + floor``; tied kinds average the raw
    variance outputs over classes before the softplus. Priors are a softmax
    over the per-class prior logits.
    """
    raw = aux_net(torch.as_tensor(class_onehots, dtype=aux_net.linear.weight.dtype))
    K = aux_net.embedding_dim
    width = kind.raw_width(K)
    if raw.shape[-1] != width:
        raise ValueError(
            f"auxiliary output width {raw.shape[-1]} does not match {kind.name} "
            f"(expected {width} for K={K})"
        )
    means = raw[:, :K]
    raw_var = raw[:, K:-1]
    if kind.tied:
        raw_var = raw_var.mean(dim=0, keepdim=True)
    variances = F.softplus(raw_var) + floor
    priors = torch.softmax(raw[:, -1], dim=0)
    return GaussianParams(means, variances, priors, kind)


def log_gaussian(V, means, variances) -> torch.Tensor:
    """Per-class diagonal Gaussian log densities, shape ``V.shape[:-1] + (C,)``."""
    V = torch.as_tensor(V)
    diff = V.unsqueeze(-2) - means
    var = variances.expand_as(means)
    return -0.5 * ((diff * diff / var).sum(-1) + torch.log(var).sum(-1) + means.shape[-1] * LOG_2PI)


def _check_dims(V, params: GaussianParams):
    if V.shape[-1] != params.embedding_dim:
        raise ValueError(
            f"embedding dim {V.shape[-1]} does not match parameters ({params.embedding_dim})"
        )


def posterior_mask(V, params: GaussianParams) -> torch.Tensor:
    """Posterior class responsibilities for every embedding, last axis = class."""
    V = torch.as_tensor(V, dtype=params.means.dtype)
    _check_dims(V, params)
    logits = log_gaussian(V, params.means, params.variances) + torch.log(params.priors)
    return torch.softmax(logits, dim=-1)


def soft_kmeans_mask(V, means, alpha: float, priors=None) -> torch.Tensor:
    """Softmax over classes of ``-alpha * |v - mu_c|^2 / 2 + log pi_c``.

    Identical to :func:`posterior_mask` for a tied spherical covariance with
    variance ``1 / alpha``.
    """
    means = torch.as_tensor(means)
    V = torch.as_tensor(V, dtype=means.dtype)
    alpha = torch.as_tensor(alpha, dtype=means.dtype)
    if not (alpha > 0).all():
        raise ValueError("alpha must be positive")
    C = means.shape[0]
    if priors is None:
        priors = torch.full((C,), 1.0 / C, dtype=means.dtype)
    priors = torch.as_tensor(priors, dtype=means.dtype)
    d2 = ((V.unsqueeze(-2) - means) ** 2).sum(-1)
    return torch.softmax(-0.5 * alpha * d2 + torch.log(priors), dim=-1)


def fit_single_gaussian(V, diagonal: bool = True, floor: float = VARIANCE_FLOOR,
                        weights=None) -> GaussianParams:
    """Maximum-likelihood single Gaussian over all embeddings in ``V``.

    ``weights`` (same leading shape as ``V``, non-negative) turns the fit into
    a weighted one; a boolean array simply selects the bins that take part.
    """
    V = torch.as_tensor(V)
    X = V.reshape(-1, V.shape[-1])
    if weights is None:
        w = torch.ones(X.shape[0], dtype=X.dtype)
    else:
        w = torch.as_tensor(weights).reshape(-1).to(X.dtype)
        if w.shape[0] != X.shape[0]:
            raise ValueError("weights do not match the embeddings")
        if torch.any(w < 0) or not torch.all(torch.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
    keep = w > 0
    X, w = X[keep], w[keep]
    if X.shape[0] < 2:
        raise ValueError("need at least 2 embeddings to fit a Gaussian")
    w = w / w.sum()
    mean = (w[:, None] * X).sum(0)
    sq = w[:, None] * (X - mean) ** 2
    var = sq.sum(0, keepdim=True) if diagonal else (sq.sum() / X.shape[1]).reshape(1, 1)
    var = var.clamp_min(floor)
    kind = CovarianceType(diagonal=diagonal, tied=True)
    return GaussianParams(mean[None], var, torch.ones(1, dtype=X.dtype), kind)


def likelihood_mask(V, query: GaussianParams) -> torch.Tensor:
    """Density of each embedding under the query Gaussian divided by the maximum.

    Returns an array of shape ``V.shape[:-1]`` in [0, 1] whose maximum is 1.
    """
    if query.num_classes != 1:
        raise ValueError("likelihood_mask expects a single-component Gaussian")
    V = torch.as_tensor(V, dtype=query.means.dtype)
    _check_dims(V, query)
    logp = log_gaussian(V, query.means, query.variances)[..., 0]
    return torch.exp(logp - logp.max())
