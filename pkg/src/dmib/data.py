"""Dataset ingestion, fit-on-train preprocessing, stratified splits,
synthetic data and noise-channel injection.

Tables are delimiter-separated text with a header row and the sample id in the
first column. Empty cells (or NA/NaN) are missing values.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import RngState
from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

_MISSING = {"", "na", "nan", "null", "none"}
CACHE_MAGIC = b"DMIBDATA"
CACHE_VERSION = 1


@dataclass
class MultimodalDataset:
    sample_ids: List[str]
    labels: np.ndarray
    modalities: Dict[str, np.ndarray]
    group_ids: Optional[List[str]] = None
    dropped_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.sample_ids)
        if self.labels.shape != (n,):
            raise DataError(f"{self.labels.shape[0]} labels for {n} samples")
        for name, x in self.modalities.items():
            if x.ndim != 2 or x.shape[0] != n:
                raise DataError(f"modality {name!r} has shape {x.shape}, expected ({n}, k)")
        if self.group_ids is not None and len(self.group_ids) != n:
            raise DataError(f"{len(self.group_ids)} group ids for {n} samples")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def modality_names(self) -> List[str]:
        return list(self.modalities)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def missing(self, name: str) -> np.ndarray:
        return np.isnan(self.modalities[name])

    def inputs(self, rows=None) -> List[np.ndarray]:
        rows = slice(None) if rows is None else rows
        return [x[rows] for x in self.modalities.values()]

    def subset(self, rows) -> "MultimodalDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return MultimodalDataset(
            [self.sample_ids[i] for i in rows],
            self.labels[rows],
            {k: v[rows] for k, v in self.modalities.items()},
            None if self.group_ids is None else [self.group_ids[i] for i in rows],
        )


# ---------------------------------------------------------------------------
# loading


def _delimiter(path: str) -> str:
    return "\t" if str(path).endswith((".tsv", ".tab", ".txt")) else ","


def _read_rows(path: str) -> Tuple[List[str], List[List[str]]]:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=_delimiter(path)))
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], rows[1:]


def read_table(path: str) -> Tuple[List[str], List[str], np.ndarray]:
    """Return (column names, sample ids, float matrix with NaN for missing)."""
    header, rows = _read_rows(path)
    ids, values = [], []
    width = len(header) - 1
    for r, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) - 1 != width:
            raise DataError(f"{path}: row {r} has {len(row) - 1} values, header has {width}")
        ids.append(row[0])
        vec = []
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell.lower() in _MISSING:
                vec.append(math.nan)
                continue
            try:
                vec.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, column {header[c + 1]!r}") from None
        values.append(vec)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate sample ids")
    return header[1:], ids, np.array(values, dtype=np.float64).reshape(len(ids), width)


def read_labels(path: str) -> Tuple[List[str], List[int], Optional[List[str]]]:
    header, rows = _read_rows(path)
    has_group = len(header) >= 3 and header[2].strip().lower() == "group_id"
    ids, labels, groups = [], [], []
    for r, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            labels.append(int(row[1]))
        except (ValueError, IndexError):
            raise DataError(f"{path}: bad label at row {r}") from None
        ids.append(row[0])
        if has_group:
            groups.append(row[2])
    return ids, labels, groups if has_group else None


def load_modalities(paths: Sequence[str], labels_path: str,
                    names: Optional[Sequence[str]] = None) -> MultimodalDataset:
    """Align modality tables with the labels table on their common sample ids.

    Sample order follows the labels file. Ids absent from any table are dropped
    and listed in ``dropped_ids``.
    """
    label_ids, labels, groups = read_labels(labels_path)
    names = list(names) if names else [os.path.splitext(os.path.basename(p))[0] for p in paths]
    if len(names) != len(paths) or len(set(names)) != len(names):
        raise ConfigurationError(f"need one distinct name per modality file, got {names}")
    tables = [read_table(p) for p in paths]
    common = set(label_ids)
    for _, ids, _ in tables:
        common &= set(ids)
    if not common:
        raise DataError("modality tables and labels share no sample ids")
    all_ids = set(label_ids).union(*(set(ids) for _, ids, _ in tables))
    dropped = sorted(all_ids - common)
    if dropped:
        logger.warning("dropping %d sample ids not present in every table", len(dropped))

    keep = [i for i, sid in enumerate(label_ids) if sid in common]
    order = [label_ids[i] for i in keep]
    modalities = {}
    for name, (_, ids, x) in zip(names, tables):
        pos = {sid: k for k, sid in enumerate(ids)}
        modalities[name] = x[[pos[sid] for sid in order]]
    return MultimodalDataset(
        order,
        np.array([labels[i] for i in keep]),
        modalities,
        None if groups is None else [groups[i] for i in keep],
        dropped,
    )


def write_table(path: str, ids: Sequence[str], x: np.ndarray, prefix: str = "x") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=_delimiter(path), lineterminator="\n")
        w.writerow(["sample_id", *(f"{prefix}{j}" for j in range(x.shape[1]))])
        for sid, row in zip(ids, x):
            w.writerow([sid, *("" if math.isnan(v) else repr(float(v)) for v in row)])


def write_labels(path: str, ds: MultimodalDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=_delimiter(path), lineterminator="\n")
        header = ["sample_id", "label"] + (["group_id"] if ds.group_ids is not None else [])
        w.writerow(header)
        for i, sid in enumerate(ds.sample_ids):
            row = [sid, int(ds.labels[i])]
            if ds.group_ids is not None:
                row.append(ds.group_ids[i])
            w.writerow(row)


# ---------------------------------------------------------------------------
# preprocessing


def _fit_rows(ds: MultimodalDataset, train_rows) -> np.ndarray:
    return np.arange(ds.n_samples) if train_rows is None else np.asarray(train_rows, dtype=np.int64)


def fit_means(ds: MultimodalDataset, train_rows=None) -> Dict[str, np.ndarray]:
    rows = _fit_rows(ds, train_rows)
    means = {}
    for name, x in ds.modalities.items():
        sub = x[rows]
        observed = ~np.isnan(sub)
        counts = observed.sum(axis=0)
        if (counts == 0).any():
            col = int(np.flatnonzero(counts == 0)[0])
            raise DataError(f"modality {name!r}: column {col} has no observed training values")
        means[name] = np.where(observed, sub, 0.0).sum(axis=0) / counts
    return means


def apply_means(ds: MultimodalDataset, means: Dict[str, np.ndarray]) -> MultimodalDataset:
    mods = {k: np.where(np.isnan(x), means[k][None, :], x) for k, x in ds.modalities.items()}
    return replace(ds, modalities=mods)


def impute_mean(ds: MultimodalDataset, train_rows=None) -> Tuple[MultimodalDataset, Dict[str, np.ndarray]]:
    """Fill missing cells with the column mean over observed training rows."""
    means = fit_means(ds, train_rows)
    return apply_means(ds, means), means


@dataclass
class ZScoreStats:
    mean: Dict[str, np.ndarray]
    std: Dict[str, np.ndarray]


def fit_zscore(ds: MultimodalDataset, train_rows=None) -> ZScoreStats:
    rows = _fit_rows(ds, train_rows)
    mean, std = {}, {}
    for name, x in ds.modalities.items():
        sub = x[rows]
        if np.isnan(sub).any():
            raise DataError(f"modality {name!r} still has missing values; impute first")
        mean[name] = sub.mean(axis=0)
        std[name] = sub.std(axis=0)
    return ZScoreStats(mean, std)


def apply_zscore(ds: MultimodalDataset, stats: ZScoreStats) -> MultimodalDataset:
    mods = {}
    for name, x in ds.modalities.items():
        sd = stats.std[name]
        # near-constant columns are only centred
        safe = np.where(sd < 1e-12, 1.0, sd)
        mods[name] = (x - stats.mean[name]) / safe
    return replace(ds, modalities=mods)


def normalize_zscore(ds: MultimodalDataset, train_rows=None) -> Tuple[MultimodalDataset, ZScoreStats]:
    stats = fit_zscore(ds, train_rows)
    return apply_zscore(ds, stats), stats


@dataclass
class Preprocessor:
    """Imputation and z-score statistics fitted on one set of training rows."""

    means: Optional[Dict[str, np.ndarray]] = None
    zscore: Optional[ZScoreStats] = None

    @classmethod
    def fit(cls, ds: MultimodalDataset, train_rows=None, impute: bool = True,
            normalize: bool = True) -> "Preprocessor":
        means = fit_means(ds, train_rows) if impute else None
        zs = None
        if normalize:
            filled = apply_means(ds, means) if means is not None else ds
            zs = fit_zscore(filled, train_rows)
        return cls(means, zs)

    def apply(self, ds: MultimodalDataset) -> MultimodalDataset:
        if self.means is not None:
            ds = apply_means(ds, self.means)
        if self.zscore is not None:
            ds = apply_zscore(ds, self.zscore)
        return ds

    def blocks(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, v in (self.means or {}).items():
            out[f"prep.impute.{name}"] = v
        if self.zscore is not None:
            for name in self.zscore.mean:
                out[f"prep.mean.{name}"] = self.zscore.mean[name]
                out[f"prep.std.{name}"] = self.zscore.std[name]
        return out

    @classmethod
    def from_blocks(cls, blocks: Dict[str, np.ndarray]) -> "Preprocessor":
        means, mu, sd = {}, {}, {}
        for key, v in blocks.items():
            kind, _, name = key.partition(".")[2].partition(".")
            {"impute": means, "mean": mu, "std": sd}.get(kind, {})[name] = v
        return cls(means or None, ZScoreStats(mu, sd) if mu else None)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitPlan:
    test: np.ndarray
    folds: List[np.ndarray]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != fold] or [np.array([], dtype=np.int64)]))

    def val_rows(self, fold: int) -> np.ndarray:
        return np.sort(self.folds[fold])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.sort(self.test).astype("<i8").tobytes())
        for f in self.folds:
            h.update(b"|")
            h.update(np.sort(f).astype("<i8").tobytes())
        return h.hexdigest()


def split_stratified(labels, test_frac: float = 0.2, k: int = 5, seed: int = 0,
                     groups: Optional[Sequence[str]] = None) -> SplitPlan:
    """Per-class test reservation, then k stratified folds over the rest.

    With ``groups``, whole groups (patients) are assigned together; each group
    takes the label of its samples, which must agree.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if not 0.0 <= test_frac < 1.0:
        raise ConfigurationError(f"test_frac must lie in [0, 1), got {test_frac}")

    if groups is None:
        unit_members = [np.array([i]) for i in range(labels.size)]
        unit_labels = labels
    else:
        index: Dict[str, List[int]] = {}
        for i, g in enumerate(groups):
            index.setdefault(g, []).append(i)
        unit_members = [np.array(v) for v in index.values()]
        unit_labels = []
        for g, members in zip(index, unit_members):
            ys = set(labels[members].tolist())
            if len(ys) != 1:
                raise DataError(f"group {g!r} mixes labels {sorted(ys)}")
            unit_labels.append(ys.pop())
        unit_labels = np.array(unit_labels, dtype=np.int64)

    rng = RngState(seed).derive("split")
    test_units: List[int] = []
    fold_units: List[List[int]] = [[] for _ in range(k)]
    for c in np.unique(unit_labels):
        members = np.flatnonzero(unit_labels == c)
        if members.size < k + 1:
            raise DataError(f"class {c} has {members.size} samples; need at least {k + 1}")
        members = members[rng.permutation(members.size)]
        n_test = int(round(test_frac * members.size))
        test_units += members[:n_test].tolist()
        # stagger the starting fold per class so fold sizes stay balanced overall
        start = sum(len(f) for f in fold_units) % k
        for j, u in enumerate(members[n_test:]):
            fold_units[(start + j) % k].append(int(u))

    def expand(units):
        if not units:
            return np.array([], dtype=np.int64)
        return np.sort(np.concatenate([unit_members[u] for u in units])).astype(np.int64)

    return SplitPlan(expand(test_units), [expand(f) for f in fold_units], seed)


# ---------------------------------------------------------------------------
# noise channels and synthetic data


@dataclass
class NoiseSpec:
    """Replace a modality by label-independent noise, or append a new noise modality."""

    replace: Optional[str] = None
    append: Optional[str] = None
    generator: str = "int_uniform"  # or "real_uniform"
    lo: float = 0
    hi: float = 100
    width: Optional[int] = None  # only for appended modalities; default 1

    def __post_init__(self):
        if (self.replace is None) == (self.append is None):
            raise ConfigurationError("noise spec needs exactly one of 'replace' or 'append'")
        if self.generator not in ("int_uniform", "real_uniform"):
            raise ConfigurationError(f"unknown noise generator {self.generator!r}")
        if self.hi < self.lo:
            raise ConfigurationError(f"noise range [{self.lo}, {self.hi}] is empty")


def _draw_noise(spec: NoiseSpec, shape, rng: RngState) -> np.ndarray:
    if spec.generator == "int_uniform":
        return rng.integers(int(spec.lo), int(spec.hi), shape).astype(np.float64)
    if spec.lo == spec.hi:
        return np.full(shape, float(spec.lo))
    return rng.uniform(shape, spec.lo, spec.hi)


def inject_noise_channel(ds: MultimodalDataset, spec: NoiseSpec, seed: int) -> MultimodalDataset:
    rng = RngState(seed).derive(f"noise:{spec.replace or spec.append}")
    mods = dict(ds.modalities)
    if spec.replace is not None:
        if spec.replace not in mods:
            raise ConfigurationError(f"unknown modality {spec.replace!r}; have {list(mods)}")
        mods[spec.replace] = _draw_noise(spec, mods[spec.replace].shape, rng)
    else:
        if spec.append in mods:
            raise ConfigurationError(f"modality {spec.append!r} already exists")
        mods[spec.append] = _draw_noise(spec, (ds.n_samples, spec.width or 1), rng)
    return replace(ds, modalities=mods, dropped_ids=list(ds.dropped_ids))


@dataclass
class SynthSpec:
    n_samples: int = 500
    n_modalities: int = 2
    informative: Optional[int] = 0  # None: every modality is pure noise
    n_classes: int = 2
    noise_floor: float = 1.0  # within-class standard deviation of the informative modality
    separation: float = 4.0  # distance between any two class means
    dims: Optional[List[int]] = None  # per-modality widths; default 16 each
    n_repeats: int = 1  # >1 writes group_id with repeated noisy copies per subject

    def __post_init__(self):
        if self.n_samples < 1 or self.n_modalities < 1 or self.n_classes < 2:
            raise ConfigurationError(f"invalid synthetic spec {self}")
        if self.informative is not None and not 0 <= self.informative < self.n_modalities:
            raise ConfigurationError(f"informative index {self.informative} out of range")
        if self.dims is None:
            self.dims = [16] * self.n_modalities
        if len(self.dims) != self.n_modalities or min(self.dims) < 1:
            raise ConfigurationError(f"dims {self.dims} do not match {self.n_modalities} modalities")
        if self.informative is not None and self.dims[self.informative] < self.n_classes:
            raise ConfigurationError("informative modality is too narrow for the class count")
        if self.noise_floor < 0 or self.n_repeats < 1:
            raise ConfigurationError(f"invalid synthetic spec {self}")


def class_means(spec: SynthSpec) -> np.ndarray:
    """Class centres for the informative modality: scaled simplex corners.

    Corners of the standard simplex are pairwise sqrt(2) apart, so scaling by
    separation / sqrt(2) puts every pair of classes ``separation`` apart.
    """
    width = spec.dims[spec.informative]
    means = np.zeros((spec.n_classes, width))
    for c in range(spec.n_classes):
        means[c, c % width] = spec.separation / math.sqrt(2.0)
    return means


def gen_synthetic(spec: SynthSpec = None, seed: int = 0) -> MultimodalDataset:
    """One modality with Gaussian class clusters, the rest label-independent noise.

    With the default spec the two class means are 4 within-class standard
    deviations apart, so the Bayes-optimal AUC is Phi(4 / sqrt 2) ~ 0.998.
    """
    spec = spec or SynthSpec()
    rng = RngState(seed).derive("synthetic")
    n_subjects = spec.n_samples // spec.n_repeats if spec.n_repeats > 1 else spec.n_samples
    base = np.arange(n_subjects) % spec.n_classes
    labels = base[rng.permutation(n_subjects)]
    if spec.n_repeats > 1:
        labels = np.repeat(labels, spec.n_repeats)
    n = labels.size
    ids = [f"s{i:05d}" for i in range(n)]
    groups = [f"g{i // spec.n_repeats:05d}" for i in range(n)] if spec.n_repeats > 1 else None

    modalities = {}
    for m, width in enumerate(spec.dims):
        noise = rng.normal((n, width))
        if m == spec.informative:
            x = class_means(spec)[labels] + spec.noise_floor * noise
        else:
            x = noise
        modalities[f"modality{m}"] = x
    return MultimodalDataset(ids, labels, modalities, groups)


# ---------------------------------------------------------------------------
# binary cache


def dataset_cache_bytes(ds: MultimodalDataset) -> bytes:
    """Versioned little-endian dump: ids, labels, then float64 modality blocks."""
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<III", CACHE_VERSION, ds.n_samples, len(ds.modalities)))
    for sid in ds.sample_ids:
        raw = sid.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
    buf.write(ds.labels.astype("<i8").tobytes())
    for name, x in ds.modalities.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<Q", x.shape[1]))
        buf.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
    return buf.getvalue()


def dataset_from_cache(data: bytes) -> MultimodalDataset:
    if data[:8] != CACHE_MAGIC:
        raise DataError("not a dataset cache file")
    pos = 8
    version, n, n_mod = struct.unpack_from("<III", data, pos)
    pos += 12
    if version != CACHE_VERSION:
        raise DataError(f"unsupported dataset cache version {version}")
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids.append(data[pos:pos + ln].decode())
        pos += ln
    labels = np.frombuffer(data, "<i8", n, pos).astype(np.int64)
    pos += 8 * n
    mods = {}
    for _ in range(n_mod):
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + ln].decode()
        pos += ln
        (w,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        mods[name] = np.frombuffer(data, "<f8", n * w, pos).astype(np.float64).reshape(n, w)
        pos += 8 * n * w
    return MultimodalDataset(ids, labels, mods)
