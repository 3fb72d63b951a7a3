"""Exact information measures over finite alphabets (natural log, nats).

A ``DiscreteJoint`` is a table p(f, f*, y). Everything here is computed by
exhaustive summation, so the identities relating fused features, distilled
features and labels can be checked to near machine precision. Cells with zero
probability contribute nothing to any expectation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, ParameterError, PreconditionError

MAX_ALPHABET = 16
_AXES = {"F": 0, "F*": 1, "Y": 2}


def _xlogy_ratio(p: np.ndarray, num: np.ndarray, den: np.ndarray) -> float:
    """sum p * log(num / den) over cells with p > 0."""
    m = p > 0
    return float(np.sum(p[m] * (np.log(num[m]) - np.log(den[m]))))


def _check_distribution(p: np.ndarray, what: str = "distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0 or not np.isfinite(p).all() or (p < 0).any():
        raise DataError(f"{what} must be finite and nonnegative")
    if abs(p.sum() - 1.0) > 1e-12:
        raise DataError(f"{what} sums to {p.sum()!r}, not 1")
    return p


@dataclass(frozen=True)
class DiscreteJoint:
    """Probability table indexed as ``table[f, f_star, y]``."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        if t.ndim != 3:
            raise DataError(f"joint table must be 3-dimensional, got shape {t.shape}")
        _check_distribution(t, "joint table")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def sizes(self) -> Tuple[int, int, int]:
        return self.table.shape

    def marginal(self, *names: str) -> np.ndarray:
        """Marginal over the named variables, axes kept in F, F*, Y order."""
        keep = sorted(_AXES[n] for n in names)
        drop = tuple(a for a in range(3) if a not in keep)
        return self.table.sum(axis=drop)

    @classmethod
    def from_encoder(cls, p_f, encoder: "DeterministicEncoder", p_y_given_f) -> "DiscreteJoint":
        """Build p(f, f*, y) = p(f) 1[f* = enc(f)] p(y | f)."""
        p_f = _check_distribution(p_f, "p(f)")
        cond = np.asarray(p_y_given_f, dtype=np.float64)
        if cond.ndim != 2 or cond.shape[0] != p_f.size:
            raise PreconditionError(f"p(y|f) must have {p_f.size} rows, got shape {cond.shape}")
        if (cond < 0).any() or np.abs(cond.sum(axis=1) - 1.0).max() > 1e-12:
            raise PreconditionError("rows of p(y|f) must be probability vectors")
        if len(encoder.mapping) != p_f.size:
            raise PreconditionError(f"encoder covers {len(encoder.mapping)} inputs, p(f) has {p_f.size}")
        table = np.zeros((p_f.size, encoder.n_out, cond.shape[1]))
        table[np.arange(p_f.size), encoder.mapping, :] = p_f[:, None] * cond
        return cls(table)

    def to_text(self) -> str:
        lines = ["F F* Y", " ".join(str(s) for s in self.sizes)]
        lines += [repr(float(v)) for v in self.table.reshape(-1)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DiscreteJoint":
        rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if len(rows) < 2 or rows[0].split() != ["F", "F*", "Y"]:
            raise DataError("joint text must start with the header line 'F F* Y'")
        try:
            sizes = tuple(int(s) for s in rows[1].split())
            values = np.array([float(v) for v in rows[2:]])
        except ValueError as exc:
            raise DataError(f"malformed joint text: {exc}") from None
        if len(sizes) != 3 or values.size != int(np.prod(sizes)):
            raise DataError(f"expected {np.prod(sizes)} probabilities for sizes {sizes}, got {values.size}")
        return cls(values.reshape(sizes))


@dataclass(frozen=True)
class DeterministicEncoder:
    """Total map from each f index to exactly one f* index."""

    mapping: np.ndarray
    n_out: int

    def __post_init__(self):
        m = np.asarray(self.mapping)
        if m.ndim == 2:
            # 0/1 assignment matrix: each row must select a single output
            if not np.isin(m, (0, 1)).all() or not (m.sum(axis=1) == 1).all():
                raise PreconditionError("encoder matrix rows must each contain exactly one 1")
            object.__setattr__(self, "n_out", m.shape[1])
            m = m.argmax(axis=1)
        m = m.astype(np.int64)
        if m.ndim != 1 or ((m < 0) | (m >= self.n_out)).any():
            raise PreconditionError(f"encoder images must lie in [0, {self.n_out})")
        object.__setattr__(self, "mapping", m)

    @classmethod
    def from_matrix(cls, matrix) -> "DeterministicEncoder":
        matrix = np.asarray(matrix)
        return cls(matrix, matrix.shape[1] if matrix.ndim == 2 else 0)


def entropy(dist) -> float:
    p = _check_distribution(np.asarray(dist, dtype=np.float64).reshape(-1))
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def mutual_information(joint: DiscreteJoint, vars: Sequence[str] = ("F", "F*")) -> float:
    """I(A; B) for two of the variables 'F', 'F*', 'Y', by direct summation."""
    a, b = vars
    if a == b or a not in _AXES or b not in _AXES:
        raise ParameterError(f"need two distinct variables out of {list(_AXES)}, got {vars!r}")
    pab = joint.marginal(a, b)
    if _AXES[a] > _AXES[b]:
        pab = pab.T
    pa = pab.sum(axis=1)
    pb = pab.sum(axis=0)
    return _xlogy_ratio(pab, pab, np.outer(pa, pb))


def mutual_information_from_entropies(joint: DiscreteJoint, vars: Sequence[str] = ("F", "F*")) -> float:
    """H(A) + H(B) - H(A, B); the independent route for cross-checking."""
    a, b = vars
    return (
        entropy(joint.marginal(a))
        + entropy(joint.marginal(b))
        - entropy(joint.marginal(a, b))
    )


def conditional_mi(joint: DiscreteJoint) -> float:
    """I(F; F* | Y) = sum p(f,f*,y) log[p(f,f*|y) / (p(f|y) p(f*|y))]."""
    t = joint.table
    py = t.sum(axis=(0, 1))
    pfy = t.sum(axis=1)  # (F, Y)
    psy = t.sum(axis=0)  # (F*, Y)
    # p(f,f*|y)/(p(f|y)p(f*|y)) = p(f,f*,y) p(y) / (p(f,y) p(f*,y))
    num = t * py[None, None, :]
    den = pfy[:, None, :] * psy[None, :, :]
    return _xlogy_ratio(t, num, den)


def _encoder_joint(p_f, encoder, p_y_given_f) -> DiscreteJoint:
    if not isinstance(encoder, DeterministicEncoder):
        enc = np.asarray(encoder)
        encoder = (
            DeterministicEncoder.from_matrix(enc)
            if enc.ndim == 2
            else DeterministicEncoder(enc, int(enc.max()) + 1)
        )
    return DiscreteJoint.from_encoder(p_f, encoder, p_y_given_f)


def verify_chain_rule(
    p_f, encoder: Union[DeterministicEncoder, np.ndarray], p_y_given_f
) -> float:
    """|I(F;F*) - I(F;F*|Y) - I(F*;Y)| for f* a deterministic function of f."""
    joint = _encoder_joint(p_f, encoder, p_y_given_f)
    lhs = mutual_information(joint, ("F", "F*"))
    rhs = conditional_mi(joint) + mutual_information(joint, ("F*", "Y"))
    return abs(lhs - rhs)


def verify_sufficiency_proposition(joint: DiscreteJoint) -> Tuple[float, float]:
    """Return (E[KL(p(y|f) || p(y|f*))], I(Y;F) - I(Y;F*)).

    The expectation runs over p(f, f*); posteriors are taken from the joint's
    marginals p(f, y) and p(f*, y).
    """
    t = joint.table
    pf_y = t.sum(axis=1)
    ps_y = t.sum(axis=0)
    pf = pf_y.sum(axis=1)
    ps = ps_y.sum(axis=1)
    pff = t.sum(axis=2)

    kl_term = 0.0
    for f, s in zip(*np.nonzero(pff)):
        post_f = pf_y[f] / pf[f]
        post_s = ps_y[s] / ps[s]
        m = post_f > 0
        kl_term += pff[f, s] * float(np.sum(post_f[m] * (np.log(post_f[m]) - np.log(post_s[m]))))
    gap = mutual_information(joint, ("F", "Y")) - mutual_information(joint, ("F*", "Y"))
    return kl_term, gap


def ib_objective(joint: DiscreteJoint, gamma: float) -> float:
    """Bottleneck Lagrangian I(F;F*|Y) - gamma I(F*;Y); diagnostic only."""
    if gamma < 0:
        raise ParameterError(f"gamma must be nonnegative, got {gamma}")
    return conditional_mi(joint) - gamma * mutual_information(joint, ("F*", "Y"))


# ---------------------------------------------------------------------------
# random instances


def random_distribution(rng: np.random.Generator, k: int) -> np.ndarray:
    p = rng.uniform(size=k)
    return p / p.sum()


def random_encoder_instance(
    rng: np.random.Generator,
    n_f: int = 8,
    n_y: int = 3,
    n_out: Optional[int] = None,
):
    """Random (p(f), encoder, p(y|f)) with alphabet sizes capped at 16."""
    n_out = n_out or n_f
    if max(n_f, n_y, n_out) > MAX_ALPHABET:
        raise ParameterError(f"alphabet sizes are capped at {MAX_ALPHABET}")
    p_f = random_distribution(rng, n_f)
    enc = DeterministicEncoder(rng.integers(0, n_out, size=n_f), n_out)
    cond = rng.uniform(size=(n_f, n_y))
    cond /= cond.sum(axis=1, keepdims=True)
    return p_f, enc, cond


def random_joint(rng: np.random.Generator, sizes=(4, 4, 3)) -> DiscreteJoint:
    if max(sizes) > MAX_ALPHABET:
        raise ParameterError(f"alphabet sizes are capped at {MAX_ALPHABET}")
    t = rng.uniform(size=sizes)
    return DiscreteJoint(t / t.sum())


def equal_posterior_joint(rng: np.random.Generator, n_f: int = 8, n_y: int = 3, n_out: int = 3):
    """Joint where every f mapped to the same f* shares one label posterior.

    This makes p(y|f) = p(y|f*) for every reachable pair, the hypothesis under
    which the KL term vanishes.
    """
    p_f = random_distribution(rng, n_f)
    mapping = np.arange(n_f) % n_out
    rng.shuffle(mapping)
    posts = rng.uniform(size=(n_out, n_y))
    posts /= posts.sum(axis=1, keepdims=True)
    return DiscreteJoint.from_encoder(p_f, DeterministicEncoder(mapping, n_out), posts[mapping])
