"""Training objectives: least-squares adversarial terms, cycle-consistency,
identity mapping, and the second adversarial loss on cyclic reconstructions.

All patch-map reductions are arithmetic means over cells, so loss scale is
independent of the patch-map size. Direction terms are summed, not averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    id_cutoff_iters: int = 10000

    def __post_init__(self):
        if self.lambda_cyc < 0 or self.lambda_id < 0 or self.id_cutoff_iters < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    """Per-step scalars; each field sums both conversion directions."""

    iteration: int
    adv_g: float
    adv_d: float
    adv2_g: float
    adv2_d: float
    cyc: float
    id: float
    total_g: float
    total_d: float

    CSV_HEADER = "iteration,adv_g,adv_d,adv2_g,adv2_d,cyc,id,total_g,total_d"

    def csv_row(self) -> str:
        vals = [self.adv_g, self.adv_d, self.adv2_g, self.adv2_d,
                self.cyc, self.id, self.total_g, self.total_d]
        return ",".join([str(self.iteration)] + [repr(float(v)) for v in vals])


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def adv_loss_d(real_patches: Tensor, fake_patches: Tensor) -> Tensor:
    """LSGAN discriminator loss: mean((D(real)-1)^2) + mean(D(fake)^2)."""
    _check_same_shape(real_patches, fake_patches, "adv_loss_d")
    r = real_patches - 1.0
    return (r * r).mean() + (fake_patches * fake_patches).mean()


def adv_loss_g(fake_patches: Tensor) -> Tensor:
    """LSGAN generator loss: mean((D(fake)-1)^2)."""
    f = fake_patches - 1.0
    return (f * f).mean()


def cycle_loss(x: Tensor, x_cyc: Tensor, y: Tensor, y_cyc: Tensor) -> Tensor:
    """Mean absolute reconstruction error of both cycles, summed."""
    _check_same_shape(x, x_cyc, "cycle_loss")
    _check_same_shape(y, y_cyc, "cycle_loss")
    return ad.absolute(x_cyc - x).mean() + ad.absolute(y_cyc - y).mean()


def identity_loss(x: Tensor, g_yx_of_x: Tensor, y: Tensor, g_xy_of_y: Tensor) -> Tensor:
    """Mean absolute error of each generator applied to its own domain, summed."""
    _check_same_shape(x, g_yx_of_x, "identity_loss")
    _check_same_shape(y, g_xy_of_y, "identity_loss")
    return ad.absolute(g_yx_of_x - x).mean() + ad.absolute(g_xy_of_y - y).mean()


def second_adv_losses(x, x_cyc, y, y_cyc, d2_x, d2_y) -> tuple[Tensor, Tensor]:
    """Adversarial terms on the circularly reconstructed features.

    Returns (g_term, d_term). The d_term sees the reconstructions detached,
    so its gradient reaches only the second-stage discriminators.
    """
    g_term = adv_loss_g(d2_x(x_cyc)) + adv_loss_g(d2_y(y_cyc))
    d_term = adv_loss_d(d2_x(x), d2_x(x_cyc.detach())) + adv_loss_d(
        d2_y(y), d2_y(y_cyc.detach())
    )
    return g_term, d_term


def total_losses(adv_g, adv_d, adv2_g, adv2_d, cyc, id_term, w: LossWeights, iteration: int):
    """Weighted totals; the identity term is active only while iteration < cutoff."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    total_g = adv_g + adv2_g + w.lambda_cyc * cyc
    if iteration < w.id_cutoff_iters:
        total_g = total_g + w.lambda_id * id_term
    total_d = adv_d + adv2_d
    return total_g, total_d
