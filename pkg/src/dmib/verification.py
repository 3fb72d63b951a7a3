"""Numerical self-checks: finite-difference gradient sweeps over every
differentiable operation and the composite loss, plus exhaustive checks of the
mutual-information identities on random discrete joints."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import infotheory as it
from .autodiff import RngState, Tensor
from .losses import AblationFlags, LossWeights, total_loss
from .model import DmibNetwork, MaskVector, NetworkConfig, forward

CHAIN_TOL = 1e-10
GAP_FLOOR = -1e-12
KL_ZERO = 1e-12
GAP_ZERO = 1e-10
OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""


@dataclass
class VerificationReport:
    checks: List[Check] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)  # serialized offending instances

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, value: float, tolerance: float, passed: bool, detail: str = "") -> Check:
        c = Check(name, float(value), float(tolerance), bool(passed), detail)
        self.checks.append(c)
        return c

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            extra = f"  ({c.detail})" if c.detail else ""
            lines.append(f"{status}  {c.name}: {c.value:.3e} (tolerance {c.tolerance:.0e}){extra}")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        for f in self.failures:
            lines.append("offending instance:")
            lines.append(f.rstrip())
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gradient sweep


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, Tensor(weights)))


def op_gradient_cases(seed: int) -> Dict[str, Tuple[Callable, List[Tensor], Optional[list]]]:
    """(fn, inputs, probe) per operation; non-scalar outputs are contracted with fixed weights."""
    g = np.random.default_rng(seed)
    r = lambda *s: g.normal(size=s)  # noqa: E731
    w34, w32, w35 = r(3, 4), r(3, 2), r(3, 5)

    relu_x = r(3, 4)
    drop_rng = RngState(seed)

    cases = {
        "matmul": (lambda a, b: _weighted_sum(ad.matmul(a, b), w32), [Tensor(r(3, 4)), Tensor(r(4, 2))], None),
        "add": (lambda a, b: _weighted_sum(ad.add(a, b), w34), [Tensor(r(3, 4)), Tensor(r(1, 4))], None),
        "mul": (lambda a, b: _weighted_sum(ad.mul(a, b), w34), [Tensor(r(3, 4)), Tensor(r(3, 4))], None),
        "scale": (lambda a: _weighted_sum(ad.scale(a, -1.7), w34), [Tensor(r(3, 4))], None),
        "relu": (
            lambda a: _weighted_sum(ad.relu(a), w34),
            [Tensor(relu_x)],
            [np.abs(relu_x) > 10 * 1e-5],
        ),
        "dropout": (
            lambda a: _weighted_sum(ad.dropout(a, 0.5, drop_rng.copy(), True), w34),
            [Tensor(r(3, 4))],
            None,
        ),
        "softmax": (lambda a: _weighted_sum(ad.softmax(a), w35), [Tensor(r(3, 5))], None),
        "log_softmax": (lambda a: _weighted_sum(ad.log_softmax(a), w35), [Tensor(r(3, 5))], None),
        "cross_entropy": (lambda a: ad.cross_entropy(a, [0, 4, 2]), [Tensor(r(3, 5))], None),
        # perturbing raw probabilities would leave the simplex, so KL is probed through softmax
        "kl_div": (
            lambda a, b: ad.kl_div(ad.softmax(a), ad.softmax(b)),
            [Tensor(r(3, 5)), Tensor(r(3, 5))],
            None,
        ),
        "concat": (
            lambda a, b: _weighted_sum(ad.concat([a, b]), w35),
            [Tensor(r(3, 2)), Tensor(r(3, 3))],
            None,
        ),
        "take_columns": (
            lambda a: _weighted_sum(ad.take_columns(a, [0, 0, 1, 1, 2]), w35),
            [Tensor(r(3, 3))],
            None,
        ),
        "sum": (lambda a: ad.sum(a), [Tensor(r(3, 4))], None),
        "mean": (lambda a: ad.mean(a), [Tensor(r(3, 4))], None),
        "softmax_matmul": (
            lambda x, w: _weighted_sum(ad.softmax(ad.matmul(x, w)), w35),
            [Tensor(r(3, 4)), Tensor(r(4, 5))],
            None,
        ),
    }
    return cases


def toy_network(seed: int = 0, dropout: float = 0.5) -> Tuple[DmibNetwork, List[np.ndarray], np.ndarray]:
    """Two modalities, d=8, p=4, C=2, batch of 4; the second backbone is upsampled 4 -> 8."""
    cfg = NetworkConfig(input_dims=[5, 3], n_classes=2, common_dim=8, hidden_dims=[6],
                        feature_dims=[8, 4], bottleneck_dim=4, dropout=dropout)
    net = DmibNetwork(cfg, seed=seed)
    g = np.random.default_rng(seed)
    xs = [g.normal(size=(4, 5)), g.normal(size=(4, 3))]
    y = np.array([0, 1, 1, 0])
    # random biases keep the relu units away from the all-zero regime
    for p in net.parameters().values():
        if p.name.endswith("bias"):
            p.data = g.normal(scale=0.3, size=p.shape)
    return net, xs, y


def composite_loss_error(seed: int = 0, eps: float = 1e-6,
                         mask: Optional[MaskVector] = None) -> float:
    net, xs, y = toy_network(seed)
    params = list(net.parameters().values())
    rng = RngState(seed + 1)
    mask = mask or MaskVector.ones(2)

    def fn(*_):
        out = forward(net, [Tensor(x) for x in xs], rng.copy(), True, mask)
        loss, _ = total_loss(out, y, LossWeights(1.0, 10.0), AblationFlags())
        return loss

    return ad.grad_check(fn, params, eps=eps)


def gradient_sweep(seeds=range(3)) -> Dict[str, float]:
    """Worst relative gradient error per operation over ``seeds``."""
    worst: Dict[str, float] = {}
    for s in seeds:
        for name, (fn, inputs, probe) in op_gradient_cases(s).items():
            err = ad.grad_check(fn, inputs, eps=1e-5, probe=probe)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


# ---------------------------------------------------------------------------
# information identities


def chain_rule_sweep(trials: int, seed: int, n_f: int = 8, n_y: int = 3):
    """Max chain-rule residual over random deterministic-encoder joints.

    Returns (max residual, the worst instance as a DiscreteJoint).
    """
    g = np.random.default_rng(seed)
    worst, worst_joint = -1.0, None
    for _ in range(trials):
        nf = int(g.integers(2, n_f + 1))
        ny = int(g.integers(2, n_y + 1))
        p_f, enc, cond = it.random_encoder_instance(g, nf, ny, int(g.integers(1, nf + 1)))
        res = it.verify_chain_rule(p_f, enc, cond)
        if res > worst:
            worst, worst_joint = res, it.DiscreteJoint.from_encoder(p_f, enc, cond)
    return worst, worst_joint


def sufficiency_sweep(trials: int, seed: int, n_f: int = 8, n_y: int = 3):
    """(min gap, max |gap| among near-zero-KL joints, worst joint) over random encoders."""
    g = np.random.default_rng(seed)
    min_gap, worst_joint = np.inf, None
    zero_kl_gap = 0.0
    for _ in range(trials):
        p_f, enc, cond = it.random_encoder_instance(g, n_f, n_y, int(g.integers(1, n_f + 1)))
        joint = it.DiscreteJoint.from_encoder(p_f, enc, cond)
        kl, gap = it.verify_sufficiency_proposition(joint)
        if gap < min_gap:
            min_gap, worst_joint = gap, joint
        if kl < 1e-9:
            zero_kl_gap = max(zero_kl_gap, abs(gap))
    return min_gap, zero_kl_gap, worst_joint


def run_verification(trials: int = 100, seed: int = 0, grad_seeds=range(3)) -> VerificationReport:
    report = VerificationReport()

    worst, joint = chain_rule_sweep(trials, seed)
    if not report.add("chain_rule.random", worst, CHAIN_TOL, worst < CHAIN_TOL,
                      f"{trials} joints, |F|<=8, |Y|<=3").passed:
        report.failures.append(joint.to_text())

    g = np.random.default_rng(seed + 1)
    p_f, _, cond = it.random_encoder_instance(g, 8, 3)
    ident = it.DeterministicEncoder(np.arange(8), 8)
    const = it.DeterministicEncoder(np.zeros(8, dtype=np.int64), 1)
    for name, enc in (("identity", ident), ("constant", const)):
        res = it.verify_chain_rule(p_f, enc, cond)
        report.add(f"chain_rule.{name}_encoder", res, 1e-12, res < 1e-12)

    min_gap, zero_kl_gap, joint = sufficiency_sweep(trials, seed + 2)
    if not report.add("sufficiency.min_mi_gap", min_gap, GAP_FLOOR, min_gap >= GAP_FLOOR,
                      "I(Y;F) - I(Y;F*) must be >= -1e-12").passed:
        report.failures.append(joint.to_text())
    report.add("sufficiency.zero_kl_gap", zero_kl_gap, 1e-7, zero_kl_gap < 1e-7,
               "max |gap| where KL < 1e-9")

    worst_kl = worst_gap = 0.0
    for k in range(max(1, min(trials, 100))):
        joint = it.equal_posterior_joint(np.random.default_rng(seed + 100 + k))
        kl, gap = it.verify_sufficiency_proposition(joint)
        worst_kl, worst_gap = max(worst_kl, kl), max(worst_gap, abs(gap))
    report.add("sufficiency.equal_posterior_kl", worst_kl, KL_ZERO, worst_kl < KL_ZERO)
    report.add("sufficiency.equal_posterior_gap", worst_gap, GAP_ZERO, worst_gap < GAP_ZERO)

    for name, err in gradient_sweep(grad_seeds).items():
        report.add(f"gradient.{name}", err, OP_TOL, err < OP_TOL)
    err = max(composite_loss_error(s) for s in grad_seeds)
    report.add("gradient.composite_loss", err, COMPOSITE_TOL, err < COMPOSITE_TOL,
               "2 modalities, d=8, p=4, C=2, batch 4")
    return report
