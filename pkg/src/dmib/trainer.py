"""Adam training with a linear learning-rate decay, k-fold cross-validation
with selection by validation AUC, and the six-row ablation runner."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tape, Tensor
from .data import MultimodalDataset, Preprocessor, SplitPlan
from .errors import ConfigurationError, DmibError, TrainingError
from .losses import ABLATION_ROWS, AblationFlags, LossWeights, total_loss
from .metrics import MetricsReport, auc_ovr, evaluate_probs, median_aggregate, aggregate_labels
from .model import DmibNetwork, MaskVector, NetworkConfig, forward, predict_proba, sample_mask

logger = logging.getLogger(__name__)

# learning rate used for desk-scale runs without a pretrained backbone
DESK_LR = 1e-3


@dataclass
class TrainConfig:
    lr: float = 1e-6
    decay: float = 1e-2
    decay_mode: str = "linear"  # or "multiplicative"
    batch_size: int = 8
    epochs: int = 70
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 1.0
    beta: float = 10.0
    seed: int = 0
    common_dim: int = 32
    hidden_dims: List[int] = field(default_factory=lambda: [64, 64, 64])
    feature_dims: Optional[List[int]] = None
    bottleneck_dim: Optional[int] = None
    dropout: float = 0.5
    flags: AblationFlags = field(default_factory=AblationFlags)
    stop_fused_grad: bool = False
    threshold: float = 0.5
    impute: bool = True
    normalize: bool = True

    def __post_init__(self):
        if isinstance(self.flags, dict):
            self.flags = AblationFlags(**self.flags)
        elif isinstance(self.flags, int):
            if self.flags not in ABLATION_ROWS:
                raise ConfigurationError(f"ablation row must be 1-6, got {self.flags}")
            self.flags = ABLATION_ROWS[self.flags]
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.decay_mode not in ("linear", "multiplicative"):
            raise ConfigurationError(f"unknown decay_mode {self.decay_mode!r}")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def network_config(self, input_dims: List[int], n_classes: int) -> NetworkConfig:
        return NetworkConfig(
            input_dims=list(input_dims),
            n_classes=n_classes,
            common_dim=self.common_dim,
            hidden_dims=list(self.hidden_dims),
            feature_dims=None if self.feature_dims is None else list(self.feature_dims),
            bottleneck_dim=self.bottleneck_dim,
            dropout=self.dropout,
            use_ib=self.flags.ib,
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = asdict(self.flags)
        return d


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name} at step {t}")
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(lr0: float, decay: float, epoch: int, total_epochs: int, mode: str = "linear") -> float:
    """lr0 * (1 - decay * epoch), floored at 1% of lr0."""
    if not 0 <= epoch < total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {total_epochs})")
    if mode == "linear":
        factor = 1.0 - decay * epoch
    elif mode == "multiplicative":
        factor = (1.0 - decay) ** epoch
    else:
        raise ConfigurationError(f"unknown decay mode {mode!r}")
    return lr0 * max(factor, 0.01)


# ---------------------------------------------------------------------------
# records


@dataclass
class EpochLog:
    fold: int
    epoch: int
    lr: float
    steps: int
    train: Dict[str, float]
    val: Dict[str, float]
    val_auc: float


@dataclass
class FoldResult:
    fold: int
    epochs: List[EpochLog]
    val_auc: float
    steps: int
    masks_all_ones: int
    masks_total: int
    net: Optional[DmibNetwork] = field(default=None, repr=False)
    prep: Optional[Preprocessor] = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "fold": self.fold,
            "val_auc": self.val_auc,
            "steps": self.steps,
            "masks_all_ones": self.masks_all_ones,
            "masks_total": self.masks_total,
            "epochs": [asdict(e) for e in self.epochs],
        }


@dataclass
class RunRecord:
    config: dict
    seed: int
    plan_digest: str
    folds: List[FoldResult]
    selected_fold: int
    test: MetricsReport
    flags: Tuple[str, ...] = ()

    @property
    def selected(self) -> FoldResult:
        return self.folds[self.selected_fold]

    def as_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "plan_digest": self.plan_digest,
            "flags": list(self.flags),
            "selected_fold": self.selected_fold,
            "val_auc": [f.val_auc for f in self.folds],
            "test": self.test.as_dict(),
            "folds": [f.as_dict() for f in self.folds],
        }


# ---------------------------------------------------------------------------
# training


def _mean_breakdown(rows: List[Dict[str, float]]) -> Dict[str, float]:
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _group_ids(ds: MultimodalDataset, rows: np.ndarray):
    return None if ds.group_ids is None else [ds.group_ids[i] for i in rows]


def evaluate_split(net: DmibNetwork, ds: MultimodalDataset, rows: np.ndarray, config: TrainConfig):
    """Eval-mode loss breakdown and group-aggregated probabilities for ``rows``."""
    inputs = [Tensor(x[rows]) for x in ds.modalities.values()]
    out = forward(net, inputs, training=False)
    _, breakdown = total_loss(out, ds.labels[rows], config.weights, config.flags, config.stop_fused_grad)
    probs = ad.softmax(out.prediction_logits).data
    return breakdown, probs


def _split_auc(probs, labels, groups) -> float:
    if groups is not None:
        _, probs = median_aggregate(probs, groups)
        labels = aggregate_labels(labels, groups)
    return auc_ovr(probs, labels)


def train_fold(ds: MultimodalDataset, plan: SplitPlan, fold: int, config: TrainConfig,
               log: Optional[Callable[[EpochLog], None]] = None) -> FoldResult:
    """Train one model on every fold except ``fold`` and validate on ``fold``.

    Preprocessing statistics are fitted on the training rows only. The run is
    a deterministic function of (dataset, plan, fold, config).
    """
    if plan.k > 1:
        train_rows, val_rows = plan.train_rows(fold), plan.val_rows(fold)
    else:
        # a single fold has no held-out partner; validate on the training rows
        train_rows = val_rows = plan.val_rows(0)
    prep = Preprocessor.fit(ds, train_rows, config.impute, config.normalize)
    data = prep.apply(ds)

    root = RngState(config.seed).derive(f"fold{fold}")
    shuffle_rng, mask_rng, drop_rng = root.derive("shuffle"), root.derive("mask"), root.derive("dropout")
    n_mod = len(data.modalities)
    net = DmibNetwork(
        config.network_config([x.shape[1] for x in data.modalities.values()], max(2, ds.n_classes)),
        seed=root.derive("init").seed,
    )
    params = net.parameters()
    state = AdamState(config.adam_beta1, config.adam_beta2, config.adam_eps)
    masking = config.flags.ib and n_mod >= 2
    xs = list(data.modalities.values())
    val_groups = _group_ids(ds, val_rows)

    epochs, ones, total, steps = [], 0, 0, 0
    for epoch in range(config.epochs):
        lr = lr_schedule(config.lr, config.decay, epoch, config.epochs, config.decay_mode)
        order = train_rows[shuffle_rng.permutation(train_rows.size)]
        seen = []
        for start in range(0, order.size, config.batch_size):
            rows = order[start:start + config.batch_size]
            mask = sample_mask(n_mod, float(mask_rng.uniform())) if masking else MaskVector.ones(n_mod)
            total += 1
            ones += mask.masked is None
            try:
                with Tape() as tape:
                    out = forward(net, [Tensor(x[rows]) for x in xs], drop_rng, True, mask)
                    loss, breakdown = total_loss(
                        out, data.labels[rows], config.weights, config.flags, config.stop_fused_grad
                    )
                net.zero_grad()
                ad.backward(loss, tape)
                adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
            except DmibError as exc:
                raise TrainingError(f"fold {fold}, epoch {epoch}, step {steps}: {exc}") from exc
            steps += 1
            seen.append(breakdown)
        val_breakdown, probs = evaluate_split(net, data, val_rows, config)
        val_auc = _split_auc(probs, data.labels[val_rows], val_groups)
        entry = EpochLog(fold, epoch, lr, len(seen), _mean_breakdown(seen), val_breakdown, val_auc)
        epochs.append(entry)
        if log is not None:
            log(entry)
    return FoldResult(fold, epochs, epochs[-1].val_auc, steps, ones, total, net, prep)


def select_fold(val_aucs: List[float]) -> int:
    """Index of the best validation AUC; ties go to the lowest index."""
    best = 0
    for i, v in enumerate(val_aucs):
        if v > val_aucs[best]:
            best = i
    return best


def evaluate_model(net: DmibNetwork, prep: Preprocessor, ds: MultimodalDataset, rows,
                   threshold: float = 0.5) -> MetricsReport:
    rows = np.asarray(rows, dtype=np.int64)
    data = prep.apply(ds)
    probs = predict_proba(net, [x[rows] for x in data.modalities.values()])
    return evaluate_probs(probs, ds.labels[rows], threshold, _group_ids(ds, rows))


def cross_validate(ds: MultimodalDataset, plan: SplitPlan, config: TrainConfig,
                   log: Optional[Callable[[EpochLog], None]] = None) -> RunRecord:
    folds = [train_fold(ds, plan, k, config, log) for k in range(plan.k)]
    aucs = [f.val_auc for f in folds]
    best = select_fold(aucs)
    chosen = folds[best]
    report = evaluate_model(chosen.net, chosen.prep, ds, plan.test, config.threshold)
    report.per_fold = {"val_auc": aucs}
    return RunRecord(config.as_dict(), config.seed, plan.digest(), folds, best, report, config.flags.active())


def run_ablation(ds: MultimodalDataset, plan: SplitPlan, config: TrainConfig,
                 log: Optional[Callable[[EpochLog], None]] = None) -> List[Tuple[int, RunRecord]]:
    """The six ablation settings with identical data, plan and seed."""
    return [
        (row, cross_validate(ds, plan, replace(config, flags=flags), log))
        for row, flags in ABLATION_ROWS.items()
    ]


_FLAG_COLUMNS = (("fused", "L_f"), ("ib", "IB"), ("distilled", "L_f*"),
                 ("sufficiency", "L_suff"), ("modality", "L_mod"))


def ablation_table(results: List[Tuple[int, RunRecord]]) -> str:
    """Tab-separated comparison table: one row per ablation setting."""
    head = ["row", *(label for _, label in _FLAG_COLUMNS), "auc", "accuracy",
            "sensitivity", "specificity", "f1_macro", "f1_weighted", "plan"]
    lines = ["\t".join(head)]
    for row, rec in results:
        marks = ["x" if name in rec.flags else "-" for name, _ in _FLAG_COLUMNS]
        t = rec.test
        vals = [t.auc, t.accuracy, t.sensitivity, t.specificity, t.f1_macro, t.f1_weighted]
        cells = ["" if v is None else f"{v:.4f}" for v in vals]
        lines.append("\t".join([str(row), *marks, *cells, rec.plan_digest[:16]]))
    return "\n".join(lines) + "\n"
