"""Decomposition- and enhancement-stage losses.

Tensors are ``(N, C, H, W)``. Illumination maps have ``C == 1`` and are
broadcast over the three reflectance channels in every product. Every
loss is mean-reduced. Targets that must not be pulled toward the
prediction (``R_high`` in the equal/MSE terms, the high-light DA features,
``I_high`` and ``S_high``) are detached inside the loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import torch
import torch.nn.functional as F

from .errors import ShapeError


@dataclass(frozen=True)
class LossConfig:
    lambda_ij_same: float = 1.0
    lambda_ij_cross: float = 0.001
    smooth_lambda: float = 10.0
    lambda_tv: float = 0.2
    # inner DA weights: lambda_tv * (tv * TV + mse * MSE) + l1 * L1
    da_tv_weight: float = 0.05
    da_mse_weight: float = 1.0
    da_l1_weight: float = 0.1
    decom_rc: float = 1.0
    decom_smooth: float = 0.1
    decom_equal: float = 0.01
    decom_da: float = 1.0
    enh_rc: float = 1.0
    enh_bri: float = 1.0
    enh_per: float = 1.0
    enh_grad: float = 1.0
    # "input": divide by C*H*W of the VGG input image; "feature": mean over feature entries
    perceptual_norm: str = "input"
    # let the DA CNN weights learn from the high branch too (R_high itself stays detached)
    da_high_branch_grad: bool = True

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if isinstance(value, float) and value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")
        if self.perceptual_norm not in ("input", "feature"):
            raise ValueError("perceptual_norm must be 'input' or 'feature'")


def _same_shape(*pairs):
    for a, b in pairs:
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _spatial(a, b):
    if a.shape[-2:] != b.shape[-2:] or a.shape[0] != b.shape[0]:
        raise ShapeError(f"spatial mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def grad_h(x: torch.Tensor) -> torch.Tensor:
    """Forward difference along width; the last column is zero."""
    return F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1))


def grad_v(x: torch.Tensor) -> torch.Tensor:
    """Forward difference along height; the last row is zero."""
    return F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))


def recon_loss_decom(R_low, I_low, S_low, R_high, I_high, S_high, cfg: LossConfig = LossConfig()):
    _same_shape((R_low, S_low), (R_high, S_high), (S_low, S_high), (I_low, I_high))
    _spatial(R_low, I_low)
    total = 0.0
    for i, R in (("low", R_low), ("high", R_high)):
        for j, I, S in (("low", I_low, S_low), ("high", I_high, S_high)):
            weight = cfg.lambda_ij_same if i == j else cfg.lambda_ij_cross
            total = total + weight * (R * I - S).abs().mean()
    return total


def equal_loss(R_low, R_high):
    _same_shape((R_low, R_high))
    return (R_low - R_high.detach()).abs().mean()


def smooth_loss(I_low, R_low, I_high, R_high, cfg: LossConfig = LossConfig()):
    _same_shape((I_low, I_high), (R_low, R_high))
    _spatial(I_low, R_low)
    total = 0.0
    for I, R in ((I_low, R_low), (I_high, R_high)):
        Rm = R.mean(dim=-3, keepdim=True)
        for g in (grad_h, grad_v):
            total = total + (g(I) * torch.exp(-cfg.smooth_lambda * g(Rm).abs())).abs().mean()
    return total


def da_mse_loss(R_low, R_high):
    _same_shape((R_low, R_high))
    return ((R_low - R_high.detach()) ** 2).mean()


def da_tv_loss(F_low):
    return (grad_h(F_low) ** 2).mean() + (grad_v(F_low) ** 2).mean()


def da_l1_loss(F_low, F_high):
    _same_shape((F_low, F_high))
    return (F_low - F_high.detach()).abs().mean()


def da_loss_terms(R_low, R_high, da_net, cfg: LossConfig = LossConfig()) -> Dict[str, torch.Tensor]:
    """Component values of the DA loss.

    ``R_high`` never receives gradient. With ``cfg.da_high_branch_grad`` the
    DA CNN's own weights are differentiated through both branches; without
    it the high-branch features are a constant target, which lets the
    feature scale drift upward during joint training.
    """
    F_low = da_net(R_low)
    if cfg.da_high_branch_grad:
        F_high = da_net(R_high.detach())
        _same_shape((F_low, F_high))
        l1 = (F_low - F_high).abs().mean()
    else:
        with torch.no_grad():
            F_high = da_net(R_high)
        l1 = da_l1_loss(F_low, F_high)
    return {
        "da_tv": da_tv_loss(F_low),
        "da_mse": da_mse_loss(R_low, R_high),
        "da_l1": l1,
    }


def combine_da(terms, cfg: LossConfig = LossConfig()):
    return (
        cfg.lambda_tv * (cfg.da_tv_weight * terms["da_tv"] + cfg.da_mse_weight * terms["da_mse"])
        + cfg.da_l1_weight * terms["da_l1"]
    )


def da_loss(R_low, R_high, da_net, cfg: LossConfig = LossConfig()):
    return combine_da(da_loss_terms(R_low, R_high, da_net, cfg), cfg)


def combine_decom(terms, cfg: LossConfig = LossConfig()):
    return (
        cfg.decom_rc * terms["rc"]
        + cfg.decom_smooth * terms["smooth"]
        + cfg.decom_equal * terms["equal"]
        + cfg.decom_da * terms["da"]
    )


def decom_loss_terms(R_low, I_low, S_low, R_high, I_high, S_high, da_net, cfg: LossConfig = LossConfig()):
    terms = da_loss_terms(R_low, R_high, da_net, cfg)
    terms["da"] = combine_da(terms, cfg)
    terms["rc"] = recon_loss_decom(R_low, I_low, S_low, R_high, I_high, S_high, cfg)
    terms["smooth"] = smooth_loss(I_low, R_low, I_high, R_high, cfg)
    terms["equal"] = equal_loss(R_low, R_high)
    terms["total"] = combine_decom(terms, cfg)
    return terms


def decom_total_loss(R_low, I_low, S_low, R_high, I_high, S_high, da_net, cfg: LossConfig = LossConfig()):
    return decom_loss_terms(R_low, I_low, S_low, R_high, I_high, S_high, da_net, cfg)["total"]


def recon_loss_enh(R_low, I_output, S_high):
    _spatial(R_low, I_output)
    _same_shape((R_low, S_high))
    return (R_low * I_output - S_high.detach()).abs().mean()


def brighten_loss(I_output, I_high):
    _same_shape((I_output, I_high))
    return (I_output - I_high.detach()).abs().mean()


def perceptual_loss(R_low, I_output, S_high, vgg, cfg: LossConfig = LossConfig()):
    """Squared VGG feature distance between the recomposed image and ``S_high``."""
    _spatial(R_low, I_output)
    _same_shape((R_low, S_high))
    h, w = S_high.shape[-2:]
    if min(h, w) < 32:
        raise ShapeError(f"perceptual loss needs at least 32x32 inputs, got {h}x{w}")
    pred = vgg(R_low * I_output)
    with torch.no_grad():
        target = vgg(S_high)
    sq = (pred - target) ** 2
    if cfg.perceptual_norm == "feature":
        return sq.mean()
    c = S_high.shape[-3]
    return sq.sum() / (S_high.shape[0] * c * h * w)


def gradient_loss(R_low, I_output, S_high):
    _spatial(R_low, I_output)
    _same_shape((R_low, S_high))
    prod = R_low * I_output
    S = S_high.detach()
    return (grad_h(prod) - grad_h(S)).abs().mean() + (grad_v(prod) - grad_v(S)).abs().mean()


def combine_enh(terms, cfg: LossConfig = LossConfig()):
    return (
        cfg.enh_rc * terms["rc"]
        + cfg.enh_bri * terms["bri"]
        + cfg.enh_per * terms["per"]
        + cfg.enh_grad * terms["grad"]
    )


def enh_loss_terms(R_low, I_output, I_high, S_high, vgg, cfg: LossConfig = LossConfig()):
    terms = {
        "rc": recon_loss_enh(R_low, I_output, S_high),
        "bri": brighten_loss(I_output, I_high),
        "per": perceptual_loss(R_low, I_output, S_high, vgg, cfg),
        "grad": gradient_loss(R_low, I_output, S_high),
    }
    terms["total"] = combine_enh(terms, cfg)
    return terms


def enh_total_loss(R_low, I_output, I_high, S_high, vgg, cfg: LossConfig = LossConfig()):
    return enh_loss_terms(R_low, I_output, I_high, S_high, vgg, cfg)["total"]
