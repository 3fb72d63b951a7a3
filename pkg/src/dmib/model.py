"""The fusion network: per-modality backbones, masked concatenation, the
bottleneck projections and three sets of classifier heads.

All parameters live in one ordered ``name -> Tensor`` mapping so the optimizer,
gradient checks and checkpoint format share a single view of the model.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .errors import ConfigurationError, DataError

CHECKPOINT_MAGIC = b"DMIBCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    input_dims: List[int]
    n_classes: int = 2
    common_dim: int = 32
    hidden_dims: List[int] = field(default_factory=lambda: [64, 64, 64])
    # per-modality backbone output widths; None means common_dim for every modality
    feature_dims: Optional[List[int]] = None
    bottleneck_dim: Optional[int] = None
    dropout: float = 0.5
    dropout_out: Optional[float] = None
    use_ib: bool = True

    def __post_init__(self):
        n = len(self.input_dims)
        if n < 1:
            raise ConfigurationError("need at least one modality")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.feature_dims is None:
            self.feature_dims = [self.common_dim] * n
        if len(self.feature_dims) != n:
            raise ConfigurationError(f"{len(self.feature_dims)} feature dims for {n} modalities")
        for i, w in enumerate(self.feature_dims):
            if not 1 <= w <= self.common_dim:
                raise ConfigurationError(
                    f"modality {i}: feature dim {w} must lie in [1, common_dim={self.common_dim}]"
                )
        if self.bottleneck_dim is None:
            self.bottleneck_dim = max(1, self.fused_dim // 2)
        if self.use_ib and not 1 <= self.bottleneck_dim < self.fused_dim:
            raise ConfigurationError(
                f"bottleneck width p={self.bottleneck_dim} must satisfy 1 <= p < N={self.fused_dim}"
            )
        if self.dropout_out is None:
            self.dropout_out = self.dropout
        for rate in (self.dropout, self.dropout_out):
            if not 0.0 <= rate < 1.0:
                raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)

    @property
    def fused_dim(self) -> int:
        return self.n_modalities * self.common_dim


# ---------------------------------------------------------------------------
# building blocks


def _glorot(rng: RngState, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -limit, limit)


class Linear:
    def __init__(self, name: str, fan_in: int, fan_out: int, rng: RngState):
        self.weight = Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


class BackboneMlp:
    """Stack of linear layers with relu after each one."""

    def __init__(self, name: str, widths: Sequence[int], rng: RngState):
        self.name = name
        self.widths = list(widths)
        self.layers = [
            Linear(f"{name}.{k}", a, b, rng) for k, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = ad.relu(layer(x))
        return x

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class IbModule:
    """f -> z (width p) -> f* (width N), each step linear + relu + dropout."""

    def __init__(self, fused_dim: int, bottleneck_dim: int, rng: RngState,
                 dropout_in: float = 0.5, dropout_out: float = 0.5):
        if not 1 <= bottleneck_dim < fused_dim:
            raise ConfigurationError(
                f"bottleneck width p={bottleneck_dim} must satisfy 1 <= p < N={fused_dim}"
            )
        self.proj_in = Linear("ib.proj_in", fused_dim, bottleneck_dim, rng)
        self.proj_out = Linear("ib.proj_out", bottleneck_dim, fused_dim, rng)
        self.dropout_in = dropout_in
        self.dropout_out = dropout_out

    @property
    def width(self) -> int:
        return self.proj_in.weight.shape[1]

    def parameters(self) -> List[Tensor]:
        return self.proj_in.parameters() + self.proj_out.parameters()


@dataclass(frozen=True)
class MaskVector:
    m: Tuple[int, ...]

    def __post_init__(self):
        zeros = sum(1 for v in self.m if v == 0)
        if any(v not in (0, 1) for v in self.m) or zeros > 1 or (zeros == 1 and len(self.m) < 2):
            raise ConfigurationError(f"mask must be all ones or have exactly one zero, got {self.m}")

    @classmethod
    def ones(cls, n: int) -> "MaskVector":
        return cls((1,) * n)

    @property
    def masked(self) -> Optional[int]:
        for i, v in enumerate(self.m):
            if v == 0:
                return i
        return None

    def __len__(self) -> int:
        return len(self.m)


def sample_mask(n: int, u: float) -> MaskVector:
    """Mask for one training iteration from a uniform draw ``u``.

    u > 1/2 keeps every modality. Otherwise u in [(i-1)/(2n), i/(2n)) zeroes
    modality i (1-based), so each modality is dropped in 1/(2n) of iterations.
    """
    if n < 2:
        raise ConfigurationError(f"masking needs at least two modalities, got {n}")
    if not 0.0 <= u <= 1.0:
        raise ConfigurationError(f"u must lie in [0, 1], got {u}")
    if u > 0.5:
        return MaskVector.ones(n)
    i = min(int(u * 2 * n), n - 1)
    return MaskVector(tuple(0 if k == i else 1 for k in range(n)))


def upsample_index(width: int, target: int) -> np.ndarray:
    """Column index repeating each of ``width`` columns, truncated to ``target``."""
    if width > target:
        raise ConfigurationError(f"cannot upsample width {width} down to {target}")
    reps = -(-target // width)
    return np.repeat(np.arange(width), reps)[:target]


def equalize_dims(features: Sequence[Tensor], d: int) -> List[Tensor]:
    """Bring every feature to width ``d`` by nearest-neighbour column repetition."""
    out = []
    for f in features:
        w = f.shape[1]
        out.append(f if w == d else ad.take_columns(f, upsample_index(w, d)))
    return out


def fuse_concat(features: Sequence[Tensor], mask: MaskVector) -> Tensor:
    if len(features) != len(mask):
        raise ConfigurationError(f"mask of length {len(mask)} for {len(features)} modalities")
    widths = {f.shape[1] for f in features}
    if len(widths) != 1:
        raise ConfigurationError(f"features must share one width before fusion, got {sorted(widths)}")
    blocks = [
        f if m == 1 else Tensor(np.zeros(f.shape))
        for f, m in zip(features, mask.m)
    ]
    return ad.concat(blocks, axis=1)


def bottleneck_forward(ib: IbModule, f: Tensor, rng: Optional[RngState], training: bool):
    """Return (z, f*) for the fused feature ``f``."""
    z = ad.dropout(ad.relu(ib.proj_in(f)), ib.dropout_in, rng, training)
    f_star = ad.dropout(ad.relu(ib.proj_out(z)), ib.dropout_out, rng, training)
    return z, f_star


@dataclass
class ForwardOutput:
    modality_logits: List[Optional[Tensor]]
    fused_logits: Tensor
    distilled_logits: Optional[Tensor]
    f: Tensor
    f_star: Optional[Tensor]
    z: Optional[Tensor]
    mask: MaskVector

    @property
    def prediction_logits(self) -> Tensor:
        return self.distilled_logits if self.distilled_logits is not None else self.fused_logits


class DmibNetwork:
    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = RngState(seed).derive("init")
        c = config
        self.backbones = [
            BackboneMlp(f"backbone{i}", [dim, *c.hidden_dims, c.feature_dims[i]], rng)
            for i, dim in enumerate(c.input_dims)
        ]
        self.modality_heads = [
            Linear(f"head.modality{i}", c.common_dim, c.n_classes, rng) for i in range(c.n_modalities)
        ]
        self.fused_head = Linear("head.fused", c.fused_dim, c.n_classes, rng)
        self.ib = (
            IbModule(c.fused_dim, c.bottleneck_dim, rng, c.dropout, c.dropout_out) if c.use_ib else None
        )
        self.distilled_head = Linear("head.distilled", c.fused_dim, c.n_classes, rng) if c.use_ib else None

    def parameters(self) -> Dict[str, Tensor]:
        params: List[Tensor] = []
        for b in self.backbones:
            params += b.parameters()
        for h in self.modality_heads:
            params += h.parameters()
        params += self.fused_head.parameters()
        if self.ib is not None:
            params += self.ib.parameters() + self.distilled_head.parameters()
        return {p.name: p for p in params}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def extract_features(net: DmibNetwork, batch: Sequence) -> List[Tensor]:
    if len(batch) != len(net.backbones):
        raise ConfigurationError(f"{len(batch)} inputs for {len(net.backbones)} modalities")
    feats = []
    for i, (backbone, x) in enumerate(zip(net.backbones, batch)):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != backbone.input_dim:
            raise ConfigurationError(
                f"modality {i}: expected width {backbone.input_dim}, got shape {x.shape}"
            )
        feats.append(backbone(x))
    return feats


def forward(
    net: DmibNetwork,
    batch: Sequence,
    rng: Optional[RngState] = None,
    training: bool = False,
    mask: Optional[MaskVector] = None,
) -> ForwardOutput:
    """Full forward pass. ``mask`` defaults to all ones; masked modalities get no head output."""
    c = net.config
    mask = mask or MaskVector.ones(c.n_modalities)
    feats = equalize_dims(extract_features(net, batch), c.common_dim)
    modality_logits = [
        head(fi) if m == 1 else None for head, fi, m in zip(net.modality_heads, feats, mask.m)
    ]
    f = fuse_concat(feats, mask)
    fused_logits = net.fused_head(f)
    z = f_star = distilled = None
    if net.ib is not None:
        z, f_star = bottleneck_forward(net.ib, f, rng, training)
        distilled = net.distilled_head(f_star)
    return ForwardOutput(modality_logits, fused_logits, distilled, f, f_star, z, mask)


def predict_proba(net: DmibNetwork, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Class probabilities in eval mode (no dropout, all modalities present)."""
    out = forward(net, [Tensor(x) for x in inputs], training=False)
    return ad.softmax(out.prediction_logits).data


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   magic "DMIBCKPT" | u32 version | u32 meta_len | meta (utf-8 json) | u32 n_blocks
#   per block: u32 name_len | name | u32 ndim | u64 dims... | float64 values


def _write_block(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(net: DmibNetwork, extra: Optional[Dict[str, np.ndarray]] = None,
                     meta: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = {"network": asdict(net.config), "seed": net.seed, **(meta or {})}
    raw = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    blocks = {name: p.data for name, p in net.parameters().items()}
    blocks.update(extra or {})
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        _write_block(buf, name, np.asarray(arr, dtype=np.float64))
    return buf.getvalue()


def save_checkpoint(path, net: DmibNetwork, extra=None, meta=None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net, extra, meta))


def parse_checkpoint(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    view = memoryview(data)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise DataError("not a model checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise DataError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode())
    pos += meta_len
    (count,) = take("<I")
    blocks = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(view[pos:pos + nlen]).decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(view):
            raise DataError(f"truncated checkpoint block {name!r}")
        blocks[name] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    return meta, blocks


def load_checkpoint(path) -> Tuple[DmibNetwork, dict, Dict[str, np.ndarray]]:
    """Rebuild a network from a checkpoint; returns (net, meta, non-parameter blocks)."""
    with open(path, "rb") as fh:
        meta, blocks = parse_checkpoint(fh.read())
    net = DmibNetwork(NetworkConfig(**meta["network"]), seed=meta.get("seed", 0))
    params = net.parameters()
    for name, p in params.items():
        if name not in blocks:
            raise DataError(f"checkpoint is missing parameter {name!r}")
        if blocks[name].shape != p.shape:
            raise DataError(f"parameter {name!r}: shape {blocks[name].shape} != {p.shape}")
        p.data = blocks.pop(name)
    return net, meta, blocks
