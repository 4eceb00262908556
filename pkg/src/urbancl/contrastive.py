"""Projection heads, the image/KG contrastive objective and the pretraining loop."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore as nn
from .encoders import SemanticEncoder, SemanticEncoderConfig, VisualEncoder, VisualEncoderConfig, glorot
from .errors import DataError, ShapeError
from .urbankg import UrbanKG

MODES = ("satellite", "streetview")


class ProjectionHeads:
    """Separate two-layer maps x -> W2 relu(W1 x) for the KG side and the image side (no biases)."""

    def __init__(self, d: int, seed: int = 0, d_in_kg: int | None = None, d_in_image: int | None = None):
        rng = np.random.default_rng([seed, 31])
        self.d = d
        self.kg_w1 = nn.Parameter("head.kg.W1", glorot(rng, (d, d_in_kg or d), d + (d_in_kg or d)))
        self.kg_w2 = nn.Parameter("head.kg.W2", glorot(rng, (d, d), 2 * d))
        self.img_w1 = nn.Parameter("head.img.W1", glorot(rng, (d, d_in_image or d), d + (d_in_image or d)))
        self.img_w2 = nn.Parameter("head.img.W2", glorot(rng, (d, d), 2 * d))

    def parameters(self) -> list:
        return [self.kg_w1, self.kg_w2, self.img_w1, self.img_w2]

    @staticmethod
    def _apply(x, w1, w2):
        x = nn.as_tensor(x)
        if x.ndim not in (1, 2) or x.shape[-1] != w1.shape[1]:
            raise ShapeError(f"projection expects last dim {w1.shape[1]}, got {x.shape}")
        if x.ndim == 1:
            h = nn.relu(nn.matmul(w1, x))
            return nn.matmul(w2, h)
        h = nn.relu(nn.matmul(x, nn.transpose(w1)))
        return nn.matmul(h, nn.transpose(w2))

    def project_kg(self, e):
        return self._apply(e, self.kg_w1, self.kg_w2)

    def project_image(self, i):
        return self._apply(i, self.img_w1, self.img_w2)


def _diag_of(s: nn.Tensor) -> nn.Tensor:
    # row-wise inner product with the identity picks the diagonal exactly
    return nn.inner_product(s, nn.Tensor(np.eye(s.shape[0])))


def similarity(img, kg, tau: float = 1.0) -> nn.Tensor:
    """S[i, j] = <img_i, kg_j> / tau."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    img, kg = nn.as_tensor(img), nn.as_tensor(kg)
    if img.ndim != 2 or img.shape != kg.shape:
        raise ShapeError(f"paired batches must share shape, got {img.shape} and {kg.shape}")
    s = nn.matmul(img, nn.transpose(kg))
    return s if tau == 1.0 else nn.scale(s, 1.0 / tau)


def directional_terms(img, kg, tau: float = 1.0) -> tuple[nn.Tensor, nn.Tensor]:
    """Per-anchor image->KG and KG->image InfoNCE terms (each of length m)."""
    img = nn.as_tensor(img)
    if img.ndim != 2 or img.shape[0] == 0:
        raise ValueError("contrastive loss needs a batch of at least one pair")
    s = similarity(img, kg, tau)
    pos = _diag_of(s)
    img_to_kg = nn.sub(nn.log_sum_exp(s, axis=1), pos)
    kg_to_img = nn.sub(nn.log_sum_exp(s, axis=0), pos)
    return img_to_kg, kg_to_img


def image_kg_loss(img, kg, tau: float = 1.0) -> nn.Tensor:
    """Mean over anchors of the two directional InfoNCE terms; row i of both inputs is a positive pair."""
    a, b = directional_terms(img, kg, tau)
    return nn.mean(nn.add(a, b))


def image_kg_loss_naive(img: np.ndarray, kg: np.ndarray, tau: float = 1.0) -> float:
    """Direct exp/log evaluation, for reference on well-scaled inputs."""
    s = np.asarray(img, dtype=float) @ np.asarray(kg, dtype=float).T / tau
    e = np.exp(s)
    d = np.diag(e)
    per = -np.log(d / e.sum(axis=1)) - np.log(d / e.sum(axis=0))
    return float(per.mean())


def top1_partners(kg_emb: np.ndarray) -> np.ndarray:
    """For each row, the index of the other row with the highest cosine similarity (lowest index on ties)."""
    x = np.asarray(kg_emb, dtype=float)
    norms = np.linalg.norm(x, axis=1)
    norms[norms == 0] = 1.0
    u = x / norms[:, None]
    c = u @ u.T
    np.fill_diagonal(c, -np.inf)
    return np.argmax(c, axis=1)


def kg_simclr_loss(z, partners, tau: float = 1.0) -> nn.Tensor:
    """Single-modality InfoNCE between each anchor's image and its KG-nearest partner's image.

    ``z`` holds projected image representations (m x d); ``partners[a]`` is the
    positive for anchor a. Each direction ranks the positive against the m-1
    batch images other than the query's own image.
    """
    z = nn.as_tensor(z)
    m = z.shape[0]
    if m < 3:
        raise ValueError("KG-SimCLR needs a batch of at least 3 regions")
    p = np.asarray(partners, dtype=np.int64)
    if p.shape != (m,) or (p == np.arange(m)).any():
        raise ValueError("partners must map each anchor to a different batch row")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    s = nn.matmul(z, nn.transpose(z))
    if tau != 1.0:
        s = nn.scale(s, 1.0 / tau)
    eye = np.eye(m, dtype=bool)
    onehot = np.zeros((m, m))
    onehot[np.arange(m), p] = 1.0
    fwd_pos = nn.inner_product(s, nn.Tensor(onehot))
    fwd = nn.sub(nn.log_sum_exp(s, axis=1, mask=~eye), fwd_pos)
    s_rev = nn.index_rows(s, p)  # row a: similarities of the partner's image
    rev_pos = nn.inner_product(s_rev, nn.Tensor(eye.astype(float)))
    rev = nn.sub(nn.log_sum_exp(s_rev, axis=1, mask=~eye[p]), rev_pos)
    return nn.mean(nn.add(fwd, rev))


@dataclass(frozen=True)
class TrainConfig:
    m: int = 64
    n_iter: int = 300
    lr: float = 0.0003
    seed: int = 0
    tau: float = 1.0
    mode: str = "satellite"
    k: int = 10
    objective: str = "knowcl"  # or "kg-simclr"

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("batch size m must be >= 2")
        if self.n_iter < 0:
            raise ValueError("n_iter must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown imagery mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.objective not in ("knowcl", "kg-simclr"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "kg-simclr" and self.m < 3:
            raise ValueError("KG-SimCLR needs m >= 3")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    semantic: SemanticEncoder
    visual: VisualEncoder
    heads: ProjectionHeads
    losses: list = field(default_factory=list)  # (iteration, loss, wall ms)
    view_subset: np.ndarray | None = None
    optimizer: nn.Adam | None = None

    def parameters(self) -> list:
        return self.semantic.parameters() + self.visual.parameters() + self.heads.parameters()


def select_views(n_regions: int, available: int, k: int, seed: int) -> np.ndarray:
    """A fixed seeded subset of k view indices per region (sorted), shape (R, k)."""
    if k > available:
        raise ValueError(f"k={k} exceeds the {available} street views available")
    rng = np.random.default_rng([seed, 41])
    return np.stack([np.sort(rng.choice(available, size=k, replace=False)) for _ in range(n_regions)])


def region_imagery(satellite, streetview, mode: str, region_ids, views: np.ndarray | None = None) -> np.ndarray:
    """Imagery array aligned with ``region_ids``: (R, C, S, S) or (R, k, C, s, s)."""
    src = satellite if mode == "satellite" else streetview
    if src is None:
        raise DataError(f"no {mode} imagery; first region lacking it: {region_ids[0] if region_ids else '?'}")
    if len(src) != len(region_ids):
        missing = region_ids[len(src)] if len(src) < len(region_ids) else None
        raise DataError(f"{mode} imagery covers {len(src)} regions, expected {len(region_ids)}" + (f"; missing {missing}" if missing else ""))
    if mode == "streetview" and views is not None:
        return np.stack([src[i][views[i]] for i in range(len(src))])
    return np.asarray(src)


class BatchSampler:
    """Batches of m distinct indices; the order is reshuffled at every epoch."""

    def __init__(self, n: int, m: int, rng: np.random.Generator):
        if m > n:
            raise ValueError(f"batch size {m} exceeds the {n} regions available")
        self.n, self.m, self.rng = n, m, rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.m > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos : self._pos + self.m]
        self._pos += self.m
        return out


def frozen_kg_embeddings(kg: UrbanKG, sem_config: SemanticEncoderConfig, region_ids) -> np.ndarray:
    """Region embeddings from the semantic encoder at its seeded initial weights."""
    return SemanticEncoder(kg, sem_config).embed(region_ids)


def train_contrastive(
    kg: UrbanKG,
    region_ids,
    satellite,
    streetview,
    config: TrainConfig = TrainConfig(),
    sem_config: SemanticEncoderConfig = SemanticEncoderConfig(),
    vis_config: VisualEncoderConfig = VisualEncoderConfig(),
    log_every: int = 0,
) -> TrainResult:
    """Pretrain the visual encoder against the KG (or against KG-ranked image pairs for kg-simclr)."""
    region_ids = list(region_ids)
    missing = [r for r in region_ids if r not in kg.entities]
    if missing:
        raise DataError(f"regions absent from the KG: {', '.join(missing[:5])}")
    views = None
    if config.mode == "streetview":
        if streetview is None:
            raise DataError(f"region {region_ids[0]} has no street-view imagery")
        views = select_views(len(region_ids), np.asarray(streetview).shape[1], config.k, config.seed)
    images = region_imagery(satellite, streetview, config.mode, region_ids, views)

    semantic = SemanticEncoder(kg, sem_config)
    visual = VisualEncoder(vis_config)
    heads = ProjectionHeads(sem_config.d, seed=config.seed, d_in_kg=sem_config.d, d_in_image=vis_config.d_out)
    result = TrainResult(semantic, visual, heads, view_subset=views)
    rows = semantic.rows(region_ids)

    if config.objective == "kg-simclr":
        kg_emb = frozen_kg_embeddings(kg, sem_config, region_ids)
        params = visual.parameters() + [heads.img_w1, heads.img_w2]
    else:
        kg_emb = None
        params = result.parameters()
    opt = nn.Adam(params, lr=config.lr) if config.lr > 0 else None
    result.optimizer = opt
    sampler = BatchSampler(len(region_ids), config.m, np.random.default_rng([config.seed, 51]))
    fwd_visual = visual.forward_views if config.mode == "streetview" else visual.forward

    t0 = time.perf_counter()
    for it in range(config.n_iter):
        batch = sampler.next()
        for p in params:
            p.zero_grad()
        with nn.Tape() as tape:
            img = heads.project_image(fwd_visual(images[batch]))
            if kg_emb is None:
                e = nn.index_rows(semantic.forward(), rows[batch])
                loss = image_kg_loss(img, heads.project_kg(e), config.tau)
            else:
                loss = kg_simclr_loss(img, top1_partners(kg_emb[batch]), config.tau)
        if opt is not None:
            nn.backward(tape, loss)
            opt.step()
        result.losses.append((it, loss.item(), (time.perf_counter() - t0) * 1000.0))
        if log_every and (it + 1) % log_every == 0:
            print(f"iter {it + 1}/{config.n_iter} loss {loss.item():.4f}", flush=True)
    return result
