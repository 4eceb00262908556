"""Relational GCN over the urban KG and a small conv net over region imagery."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import nncore as nn
from .errors import InvalidStateError, LoadError, ShapeError
from .urbankg import UrbanKG, is_reverse

COMPOSITIONS = ("sum", "product")
ACTIVATIONS = ("tanh", "relu")


def composition(e_u, r, mode: str = "sum"):
    """Combine a neighbour embedding with a relation embedding. Works on arrays or tensors."""
    if mode not in COMPOSITIONS:
        raise ValueError(f"unknown composition {mode!r}")
    tensors = isinstance(e_u, nn.Tensor) or isinstance(r, nn.Tensor)
    a = e_u if tensors else np.asarray(e_u, dtype=float)
    b = r if tensors else np.asarray(r, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"composition: shape mismatch {a.shape} vs {b.shape}")
    if tensors:
        return nn.add(a, b) if mode == "sum" else nn.mul(a, b)
    return a + b if mode == "sum" else a * b


def glorot(rng: np.random.Generator, shape: tuple, fan: int) -> np.ndarray:
    a = math.sqrt(6.0 / fan)
    return rng.uniform(-a, a, size=shape)


@dataclass(frozen=True)
class SemanticEncoderConfig:
    d: int = 64
    L: int = 2
    composition: str = "sum"
    activation: str = "tanh"
    init: str = "random"  # or "file"
    seed: int = 0
    init_path: str | None = None

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.L not in (1, 2, 3, 4):
            raise ValueError(f"L must be one of 1..4, got {self.L}")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"unknown composition {self.composition!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init not in ("random", "file"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.init == "file" and not self.init_path:
            raise ValueError("file init needs init_path")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticEncoderConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def embedding_bound(d: int) -> float:
    return math.sqrt(6.0 / (2 * d))


def init_embeddings(config: SemanticEncoderConfig, kg: UrbanKG) -> tuple[np.ndarray, np.ndarray]:
    """Initial entity (|E| x d) and relation (|R| x d) embeddings."""
    ents, rels = kg.ids(), list(kg.relation_names)
    if config.init == "file":
        values = nn.load_checkpoint(config.init_path)["values"]
        want = [f"e:{e}" for e in ents] + [f"r:{r}" for r in rels]
        missing = [w for w in want if w not in values]
        if missing:
            raise LoadError(f"{config.init_path}: missing embeddings for {', '.join(missing)}")
        for w in want:
            if values[w].shape != (config.d,):
                raise LoadError(f"{config.init_path}: {w} has shape {values[w].shape}, expected ({config.d},)")
        e0 = np.stack([values[f"e:{e}"] for e in ents]) if ents else np.zeros((0, config.d))
        r0 = np.stack([values[f"r:{r}"] for r in rels]) if rels else np.zeros((0, config.d))
        return e0, r0
    rng = np.random.default_rng([config.seed, 11])
    a = embedding_bound(config.d)
    return rng.uniform(-a, a, size=(len(ents), config.d)), rng.uniform(-a, a, size=(len(rels), config.d))


def save_embeddings(path, entity_ids, entity_emb, relation_names, relation_emb) -> None:
    params = [nn.Parameter(f"e:{e}", v) for e, v in zip(entity_ids, entity_emb)]
    params += [nn.Parameter(f"r:{r}", v) for r, v in zip(relation_names, relation_emb)]
    nn.save_checkpoint(path, params)


class SemanticEncoder:
    """Message passing: e' = act(sum_{(u,r)->v} W_dir(r) phi(e_u, r) + W_self e_v), r' = W_rel r."""

    def __init__(self, kg: UrbanKG, config: SemanticEncoderConfig = SemanticEncoderConfig()):
        if kg.facts and not kg.is_reverse_closed:
            raise InvalidStateError("semantic encoder needs a KG with reverse edges added")
        self.kg = kg
        self.config = config
        self.entity_ids = kg.ids()
        self.relation_names = list(kg.relation_names)
        self.entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        rel_index = {r: i for i, r in enumerate(self.relation_names)}
        d, n = config.d, len(self.entity_ids)

        e0, r0 = init_embeddings(config, kg)
        self.entity_emb = nn.Parameter("sem.entity", e0)
        self.relation_emb = nn.Parameter("sem.relation", r0)
        # per-direction gather indices and scatter matrices (tail <- fact)
        self._dirs = {}
        fan = {}
        for name, want_rev in (("in", False), ("out", True)):
            fs = [f for f in kg.facts if is_reverse(f.relation) == want_rev]
            heads = np.array([self.entity_index[f.head] for f in fs], dtype=np.int64)
            rels = np.array([rel_index[f.relation] for f in fs], dtype=np.int64)
            tails = np.array([self.entity_index[f.tail] for f in fs], dtype=np.int64)
            scatter = sp.csr_matrix((np.ones(len(fs)), (tails, np.arange(len(fs)))), shape=(n, len(fs)))
            self._dirs[name] = (heads, rels, scatter)
            deg = np.bincount(tails, minlength=n).astype(float)
            # degree seen by an average message, so hubs count in proportion to their traffic
            fan[name] = float((deg**2).sum() / deg.sum()) if deg.sum() else 1.0

        # messages are summed, so direction weights start scaled by 1/sqrt(mean messages per receiver)
        # keep pre-activations away from tanh saturation
        rng = np.random.default_rng([config.seed, 12])
        self.layers = []
        for l in range(config.L):
            layer = {k: nn.Parameter(f"sem.l{l}.{k}", glorot(rng, (d, d), 2 * d)) for k in ("W_in", "W_out", "W_self", "W_rel")}
            for name in ("in", "out"):
                layer[f"W_{name}"].data /= math.sqrt(max(1.0, fan[name]))
            self.layers.append(layer)

    def parameters(self) -> list:
        out = [self.entity_emb, self.relation_emb]
        for layer in self.layers:
            out += [layer[k] for k in ("W_in", "W_out", "W_self", "W_rel")]
        return out

    def _act(self, x):
        return nn.tanh(x) if self.config.activation == "tanh" else nn.relu(x)

    def forward(self) -> nn.Tensor:
        """Final-layer embeddings for every entity, rows in sorted-id order."""
        e, r = self.entity_emb, self.relation_emb
        for layer in self.layers:
            pre = nn.matmul(e, nn.transpose(layer["W_self"]))
            for name, key in (("in", "W_in"), ("out", "W_out")):
                heads, rels, scatter = self._dirs[name]
                if heads.size == 0:
                    continue
                msg = composition(nn.index_rows(e, heads), nn.index_rows(r, rels), self.config.composition)
                pre = nn.add(pre, nn.matmul(nn.spmm(scatter, msg), nn.transpose(layer[key])))
            e = self._act(pre)
            r = nn.matmul(r, nn.transpose(layer["W_rel"]))
        return e

    def rows(self, ids) -> np.ndarray:
        return np.array([self.entity_index[i] for i in ids], dtype=np.int64)

    def embed(self, ids=None) -> np.ndarray:
        out = self.forward().data
        return out if ids is None else out[self.rows(ids)]


@dataclass(frozen=True)
class VisualEncoderConfig:
    channels: int = 3
    widths: tuple = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    d_out: int = 64
    seed: int = 0
    input_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.channels < 1 or self.d_out < 1 or self.kernel < 1 or self.stride < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError("visual encoder sizes must be positive")

    def min_size(self) -> int:
        s = 1
        for _ in self.widths:
            s = (s - 1) * self.stride + self.kernel
        return s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VisualEncoderConfig":
        return cls(**{k: (tuple(v) if k == "widths" else v) for k, v in d.items() if k in cls.__dataclass_fields__})


def canonical_order(images: np.ndarray) -> np.ndarray:
    """Index order of a stack of images sorted by their raw float64 bytes."""
    keys = [np.ascontiguousarray(im, dtype=np.float64).tobytes() for im in images]
    return np.array(sorted(range(len(keys)), key=lambda i: (keys[i], i)), dtype=np.int64)


class VisualEncoder:
    """conv(k, stride) + relu per width, spatial mean pool, then a linear map to d_out."""

    def __init__(self, config: VisualEncoderConfig = VisualEncoderConfig()):
        self.config = config
        rng = np.random.default_rng([config.seed, 21])
        self.convs = []
        c_in = config.channels
        k = config.kernel
        for i, w in enumerate(config.widths):
            fan = c_in * k * k
            self.convs.append(
                (
                    nn.Parameter(f"vis.conv{i}.w", rng.uniform(-1, 1, size=(w, c_in, k, k)) * math.sqrt(6.0 / fan)),
                    nn.Parameter(f"vis.conv{i}.b", np.zeros((1, w, 1, 1))),
                )
            )
            c_in = w
        self.fc_w = nn.Parameter("vis.fc.w", glorot(rng, (config.d_out, c_in), c_in + config.d_out))
        self.fc_b = nn.Parameter("vis.fc.b", np.zeros(config.d_out))

    def parameters(self) -> list:
        out = []
        for w, b in self.convs:
            out += [w, b]
        return out + [self.fc_w, self.fc_b]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.id.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def _check(self, images: np.ndarray) -> None:
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.channels:
            raise ShapeError(f"expected (N, {cfg.channels}, H, W) images, got {images.shape}")
        h, w = images.shape[2:]
        if cfg.input_size is not None and (h, w) != (cfg.input_size, cfg.input_size):
            raise ShapeError(f"expected {cfg.input_size}x{cfg.input_size} rasters, got {h}x{w}")
        if min(h, w) < cfg.min_size():
            raise ShapeError(f"rasters must be at least {cfg.min_size()} pixels, got {h}x{w}")

    def forward(self, images) -> nn.Tensor:
        """(N, C, H, W) -> (N, d_out)."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        self._check(x)
        h = nn.Tensor(x)
        for w, b in self.convs:
            h = nn.relu(nn.add(nn.conv2d(h, w, self.config.stride), b))
        pooled = nn.mean_pool_full(h)
        return nn.add(nn.matmul(pooled, nn.transpose(self.fc_w)), self.fc_b)

    def forward_satellite(self, raster) -> nn.Tensor:
        """One raster (C, H, W) -> d_out vector."""
        r = np.asarray(raster)
        if r.ndim != 3:
            raise ShapeError(f"expected a (C, H, W) raster, got {r.shape}")
        return nn.reshape(self.forward(r[None]), (self.config.d_out,))

    def forward_streetview(self, rasters) -> nn.Tensor:
        """Mean of per-image outputs for one region's street views."""
        if len(rasters) == 0:
            raise ValueError("street-view pooling needs at least one image")
        stack = np.stack([np.asarray(r) for r in rasters])
        return nn.reshape(self.forward_views(stack[None]), (self.config.d_out,))

    def forward_views(self, views) -> nn.Tensor:
        """(R, n, C, H, W) -> (R, d_out): per-region mean over canonically ordered views."""
        v = np.asarray(views)
        if v.ndim != 5 or v.shape[1] < 1:
            raise ShapeError(f"expected (R, n, C, H, W) views, got {v.shape}")
        r, n = v.shape[:2]
        ordered = np.stack([v[i][canonical_order(v[i])] for i in range(r)])
        out = self.forward(ordered.reshape((r * n,) + v.shape[2:]))
        return nn.mean_over_set(out, n)

    def embed(self, images, batch: int = 256) -> np.ndarray:
        """Representations without recording; images (R, C, H, W) or views (R, n, C, H, W)."""
        arr = np.asarray(images)
        fwd = self.forward_views if arr.ndim == 5 else self.forward
        chunks = [fwd(arr[i : i + batch]).data for i in range(0, arr.shape[0], batch)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.config.d_out))
