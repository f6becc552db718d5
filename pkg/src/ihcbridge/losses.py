"""Training objectives.

Every loss is a pure function of torch tensors (NCHW for images, any shape
for discriminator scores) and returns a 0-d tensor so it can be used for
back-propagation and for logging alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Union

import torch

E_CHANNEL, D_CHANNEL = 1, 2
RATIO_EPS = 1e-8
SEPARATION_VARIANTS = ("purity_complement", "as_written")

Number = Union[float, torch.Tensor]


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _nonempty(x: torch.Tensor, name: str) -> None:
    if x.numel() == 0:
        raise ValueError(f"{name} is empty")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def lsgan_generator_loss(d_fake_scores) -> torch.Tensor:
    s = _tensor(d_fake_scores)
    _nonempty(s, "d_fake_scores")
    return ((s - 1.0) ** 2).mean()


def lsgan_discriminator_loss(d_real_scores, d_fake_scores) -> torch.Tensor:
    real, fake = _tensor(d_real_scores), _tensor(d_fake_scores)
    _nonempty(real, "d_real_scores")
    _nonempty(fake, "d_fake_scores")
    return 0.5 * ((real - 1.0) ** 2).mean() + 0.5 * (fake ** 2).mean()


def l1_loss(a, b) -> torch.Tensor:
    a, b = _tensor(a), _tensor(b)
    _same_shape(a, b)
    _nonempty(a, "input")
    return (a - b).abs().mean()


def guidance_loss(g_ab_out, f_ab_out) -> torch.Tensor:
    """Mean L1 between the direct translation and its synthetic monoplex target."""
    return l1_loss(g_ab_out, f_ab_out)


def cycle_loss(x, x_reconstructed) -> torch.Tensor:
    return l1_loss(x, x_reconstructed)


def stain_guidance_loss(g_ac_out, pseudo_if) -> torch.Tensor:
    """Mean L1 between synthetic IF and the classical-deconvolution pseudo-IF."""
    return l1_loss(g_ac_out, pseudo_if)


def _check_stain_batch(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected an N x 3 x H x W stain batch, got {tuple(x.shape)}")


def eosin_absence_loss(g_ac_of_b) -> torch.Tensor:
    """Mean |E| of synthetic IF generated from monoplex patches."""
    x = _tensor(g_ac_of_b)
    _check_stain_batch(x)
    _nonempty(x, "g_ac_of_b")
    return x[:, E_CHANNEL].abs().mean()


def supervised_separation_loss(
    g_ac_out,
    mask,
    target_channel: str,
    variant: str = "purity_complement",
) -> torch.Tensor:
    """Stain separation on labelled saturated pixels.

    ``r_c(p) = x_c(p) / max(sum_k |x_k(p)|, eps)`` is the share of pixel
    ``p``'s signal held by the target channel. ``purity_complement``
    averages ``1 - r_c`` over the mask (0 when all labelled signal sits in
    the target channel); ``as_written`` averages ``r_c * x_c``.
    """
    x = _tensor(g_ac_out)
    _check_stain_batch(x)
    m = _tensor(mask).to(torch.bool)
    if m.ndim == 4:
        m = m[:, 0]
    if m.shape != (x.shape[0],) + tuple(x.shape[2:]):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match batch {tuple(x.shape)}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("supervised separation mask is empty")
    ch = {"E": E_CHANNEL, "D": D_CHANNEL}.get(target_channel)
    if ch is None:
        raise ValueError(f"target_channel must be 'E' or 'D', got {target_channel!r}")
    total = x.abs().sum(dim=1).clamp_min(RATIO_EPS)
    ratio = x[:, ch] / total
    if variant == "purity_complement":
        per_pixel = 1.0 - ratio
    elif variant == "as_written":
        per_pixel = ratio * x[:, ch]
    else:
        raise ValueError(f"variant must be one of {SEPARATION_VARIANTS}, got {variant!r}")
    return per_pixel[m].sum() / n


@dataclass
class LossWeights:
    lambda_guidance: float = 10.0
    lambda_cycle: float = 10.0
    lambda_stain_guidance: float = 1.0
    lambda_eosin_absence: float = 1.0
    lambda_sup_e: float = 1.0
    lambda_sup_d: float = 1.0
    lambda_adversarial: float = 1.0
    separation_variant: str = "purity_complement"
    # Sign applied to the supervised terms under the as_written variant.
    as_written_sign: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if name.startswith("lambda_") and not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.separation_variant not in SEPARATION_VARIANTS:
            raise ValueError(f"unknown separation_variant {self.separation_variant!r}")
        if self.as_written_sign not in (1.0, -1.0):
            raise ValueError("as_written_sign must be +1 or -1")

    def roster(self, stage: int) -> Dict[str, float]:
        """Term name -> weight for a training stage."""
        if stage == 1:
            sign = self.as_written_sign if self.separation_variant == "as_written" else 1.0
            return {
                "adversarial": self.lambda_adversarial,
                "cycle": self.lambda_cycle,
                "stain_guidance": self.lambda_stain_guidance,
                "eosin_absence": self.lambda_eosin_absence,
                "sup_e": sign * self.lambda_sup_e,
                "sup_d": sign * self.lambda_sup_d,
            }
        if stage == 2:
            return {"adversarial": self.lambda_adversarial, "guidance": self.lambda_guidance}
        raise ValueError(f"stage must be 1 or 2, got {stage}")


# Terms a stage may legitimately lack (no labelled pixels in the batch).
OPTIONAL_TERMS = {1: {"sup_e", "sup_d"}, 2: set()}


@dataclass
class LossReport:
    terms: Dict[str, float]
    weights: Dict[str, float]
    total: float
    objective: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_record(self, step: int) -> dict:
        rec = {"step": step}
        rec.update(self.terms)
        rec["total"] = self.total
        return rec


def total_generator_loss(terms: Mapping[str, Number], weights: LossWeights, stage: int) -> LossReport:
    """Weighted sum of a stage's terms.

    ``objective`` keeps the autograd graph when the terms are tensors.
    """
    roster = weights.roster(stage)
    unknown = set(terms) - set(roster)
    if unknown:
        raise ValueError(f"unexpected loss terms for stage {stage}: {sorted(unknown)}")
    missing = set(roster) - set(terms) - OPTIONAL_TERMS[stage]
    if missing:
        raise ValueError(f"missing loss terms for stage {stage}: {sorted(missing)}")
    objective: Number = 0.0
    values, used = {}, {}
    for name, weight in roster.items():
        if name not in terms:
            continue
        term = terms[name]
        objective = objective + weight * term
        values[name] = float(term.detach()) if isinstance(term, torch.Tensor) else float(term)
        used[name] = weight
    total = math.fsum(used[k] * values[k] for k in values)
    return LossReport(
        terms=values,
        weights=used,
        total=total,
        objective=objective if isinstance(objective, torch.Tensor) else None,
    )
