"""Composite training objective.

    L = L_f + alpha * sum_i L_modality,i + L_f* + beta * L_sufficiency

where every supervised term is a cross-entropy and the sufficiency term is
KL(softmax(fused logits) || softmax(distilled logits)). Terms can be switched
off individually for the ablation table; a switched-off term is never built.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, UsageError
from .model import ForwardOutput


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"loss weights must be nonnegative, got {self}")


@dataclass(frozen=True)
class AblationFlags:
    """Which components are active: the five columns of the ablation table."""

    fused: bool = True        # L_f
    ib: bool = True           # bottleneck module (and modality masking)
    distilled: bool = True    # L_f*
    sufficiency: bool = True  # L_sufficiency
    modality: bool = True     # L_modality

    def __post_init__(self):
        if not (self.fused or self.distilled or self.sufficiency or self.modality):
            raise ConfigurationError("all loss terms are switched off; nothing to optimize")
        if not self.ib and (self.distilled or self.sufficiency):
            raise ConfigurationError("L_f* and L_sufficiency need the bottleneck module (ib=True)")

    def active(self) -> Tuple[str, ...]:
        names = ("fused", "ib", "distilled", "sufficiency", "modality")
        return tuple(n for n in names if getattr(self, n))


ABLATION_ROWS: Dict[int, AblationFlags] = {
    1: AblationFlags(fused=True, ib=False, distilled=False, sufficiency=False, modality=False),
    2: AblationFlags(fused=False, ib=True, distilled=True, sufficiency=False, modality=True),
    3: AblationFlags(fused=True, ib=True, distilled=True, sufficiency=False, modality=True),
    4: AblationFlags(fused=True, ib=True, distilled=True, sufficiency=True, modality=False),
    5: AblationFlags(fused=True, ib=True, distilled=False, sufficiency=True, modality=True),
    6: AblationFlags(fused=True, ib=True, distilled=True, sufficiency=True, modality=True),
}


def sufficiency_loss(fused_logits: Tensor, distilled_logits: Tensor, stop_fused_grad: bool = False) -> Tensor:
    if fused_logits.shape != distilled_logits.shape:
        raise UsageError(
            f"sufficiency loss needs matching logits, got {fused_logits.shape} and {distilled_logits.shape}"
        )
    p = ad.softmax(fused_logits)
    if stop_fused_grad:
        p = ad.stop_gradient(p)
    return ad.kl_div(p, ad.softmax(distilled_logits))


def total_loss(
    outputs: ForwardOutput,
    labels,
    weights: LossWeights = LossWeights(),
    active: AblationFlags = AblationFlags(),
    stop_fused_grad: bool = False,
) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of the active terms plus an unweighted per-term breakdown.

    The modality term sums over the modalities that were not masked this
    iteration.
    """
    if (active.distilled or active.sufficiency) and outputs.distilled_logits is None:
        raise ConfigurationError("network has no bottleneck module but flags request L_f*/L_sufficiency")
    terms = []
    breakdown = {"fused": 0.0, "modality": 0.0, "distilled": 0.0, "sufficiency": 0.0}

    if active.fused:
        lf = ad.cross_entropy(outputs.fused_logits, labels)
        breakdown["fused"] = lf.item()
        terms.append(lf)
    if active.modality:
        per_mod = [ad.cross_entropy(lg, labels) for lg in outputs.modality_logits if lg is not None]
        if per_mod:
            lm = per_mod[0]
            for t in per_mod[1:]:
                lm = ad.add(lm, t)
            breakdown["modality"] = lm.item()
            terms.append(ad.scale(lm, weights.alpha))
    if active.distilled:
        ld = ad.cross_entropy(outputs.distilled_logits, labels)
        breakdown["distilled"] = ld.item()
        terms.append(ld)
    if active.sufficiency:
        ls = sufficiency_loss(outputs.fused_logits, outputs.distilled_logits, stop_fused_grad)
        breakdown["sufficiency"] = ls.item()
        terms.append(ad.scale(ls, weights.beta))

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    breakdown["total"] = total.item()
    return total, breakdown
