from dataclasses import dataclass
from typing import Optional

import torch

from depthdiff.errors import ParameterError, ShapeError


@dataclass
class LossReport:
    latent: torch.Tensor
    var: torch.Tensor
    total: torch.Tensor
    n_elements: int

    def as_dict(self):
        return {
            "L_latent": float(self.latent),
            "L_var": float(self.var),
            "L_total": float(self.total),
        }


def _check_pair(eps_hat, eps):
    if eps_hat.shape != eps.shape:
        raise ShapeError(
            f"prediction {tuple(eps_hat.shape)} and target {tuple(eps.shape)} differ in shape"
        )


def _broadcast_weights(w_final: torch.Tensor, err: torch.Tensor) -> torch.Tensor:
    # Spatial (b, h, w) weights apply to every channel of (b, c, h, w) errors
    if w_final.shape == err.shape:
        return w_final
    if w_final.dim() == err.dim() - 1 and err.dim() >= 3:
        expanded = w_final.unsqueeze(-3)
        if expanded.shape[:-3] == err.shape[:-3] and expanded.shape[-2:] == err.shape[-2:]:
            return expanded
    raise ShapeError(
        f"weights {tuple(w_final.shape)} cannot be applied to errors {tuple(err.shape)}"
    )


def latent_loss(eps_hat: torch.Tensor, eps: torch.Tensor, w_final: torch.Tensor):
    """(1/M) * sum_i w_i * (eps_hat_i - eps_i)^2 over all M latent elements."""
    _check_pair(eps_hat, eps)
    err = eps_hat - eps
    return (_broadcast_weights(w_final, err) * err * err).mean()


def variance_loss(
    eps_hat: torch.Tensor, eps: torch.Tensor, valid: Optional[torch.Tensor] = None
):
    """Population variance of the prediction error over the whole batch.

    With a spatial `valid` mask (b, h, w) only the errors at valid latent
    positions count; an all-invalid batch gives 0."""
    _check_pair(eps_hat, eps)
    err = eps_hat - eps
    if valid is None:
        return torch.var(err, correction=0)
    mask = _broadcast_weights(valid.bool(), err).expand_as(err)
    kept = err[mask]
    if kept.numel() == 0:
        return err.sum() * 0.0
    return torch.var(kept, correction=0)


def total_loss(
    eps_hat, eps, w_final, lam: float = 1.0, valid: Optional[torch.Tensor] = None
) -> LossReport:
    """L_latent + lam * L_var. `valid` restricts the variance term to valid
    latent positions; `w_final` is expected to be zero elsewhere."""
    if lam < 0:
        raise ParameterError(f"variance weight must be non-negative, got {lam}")
    latent = latent_loss(eps_hat, eps, w_final)
    var = variance_loss(eps_hat, eps, valid)
    return LossReport(latent, var, latent + lam * var, eps_hat.numel())
