"""Covariance-weighted geodesic pose loss on SE(3)."""

from dataclasses import dataclass
import os

import numpy as np
import torch

from . import se3
from .errors import InsufficientDataError, InvalidArgumentError


def default_epsilon(sigma):
    return 1e-6 * max(float(np.trace(sigma)) / 6.0, 1e-12)


@dataclass(frozen=True)
class CovarianceMatrix:
    sigma: np.ndarray
    sigma_inv: np.ndarray
    epsilon: float
    mean_twist: np.ndarray

    @classmethod
    def from_sigma(cls, sigma, epsilon=None, mean_twist=None):
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (6, 6):
            raise InvalidArgumentError(f"covariance must be 6x6, got {sigma.shape}")
        if epsilon is None:
            epsilon = default_epsilon(sigma)
        sigma_inv = np.linalg.inv(sigma + epsilon * np.eye(6))
        sigma_inv = 0.5 * (sigma_inv + sigma_inv.T)
        if mean_twist is None:
            mean_twist = np.zeros(6)
        return cls(sigma, sigma_inv, float(epsilon), np.asarray(mean_twist, dtype=np.float64))

    @classmethod
    def identity(cls):
        return cls(np.eye(6), np.eye(6), 0.0, np.zeros(6))

    def to_text(self):
        """Row-major decimal text: 6 sigma rows, then epsilon, then the mean twist."""
        rows = [" ".join(repr(float(x)) for x in row) for row in self.sigma]
        rows.append(f"epsilon {self.epsilon!r}")
        rows.append("mean " + " ".join(repr(float(x)) for x in self.mean_twist))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        sigma = np.array([[float(x) for x in ln] for ln in lines[:6]])
        epsilon, mean = None, None
        for ln in lines[6:]:
            if ln[0] == "epsilon":
                epsilon = float(ln[1])
            elif ln[0] == "mean":
                mean = np.array([float(x) for x in ln[1:]])
        return cls.from_sigma(sigma, epsilon, mean)

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_text())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


@dataclass(frozen=True)
class LossValue:
    value: float
    residual: np.ndarray


def fit_covariance(twists, epsilon=None):
    """Unbiased sample covariance of ground-truth twists, regularized for inversion."""
    X = np.asarray(twists, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 6:
        raise InvalidArgumentError(f"expected (N, 6) twists, got {X.shape}")
    if X.shape[0] < 2:
        raise InsufficientDataError("covariance needs at least 2 twists")
    # canonical row order makes the float sums independent of input order
    X = X[np.lexsort(X.T[::-1])]
    mean = X.mean(axis=0)
    D = X - mean
    sigma = D.T @ D / (X.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return CovarianceMatrix.from_sigma(sigma, epsilon, mean)


def residual(xi, T_star):
    """Geodesic error twist ln(exp(xi) T*^-1)."""
    return se3.log_map(se3.exp_map(xi) @ se3.inverse(T_star))


def loss(xi, T_star, cov: CovarianceMatrix):
    g = residual(xi, T_star)
    return LossValue(0.5 * float(g @ cov.sigma_inv @ g), g)


def loss_torch(pred, target, sigma_inv):
    """Per-pair loss for batches of twists.

    ``pred`` and ``target`` are (..., 6) twists; the target pose is rebuilt as
    exp(target). Math runs in float64; returns per-pair losses in float64.
    """
    pred = pred.to(torch.float64)
    target = target.to(torch.float64)
    sigma_inv = torch.as_tensor(sigma_inv, dtype=torch.float64, device=pred.device)
    T_est = se3.exp_map_torch(pred)
    T_inv = se3.inverse_torch(se3.exp_map_torch(target))
    g = se3.log_map_torch(T_est @ T_inv)
    return 0.5 * torch.einsum("...i,ij,...j->...", g, sigma_inv, g)
