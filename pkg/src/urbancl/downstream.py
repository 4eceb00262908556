"""Regression on frozen region representations: log labels, splits, MLP head, metrics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .errors import ShapeError

LR_GRID = (0.0005, 0.001, 0.005)
DROPOUT_GRID = (0.1, 0.3, 0.5)
HIDDEN = 64


def log_transform(y_raw) -> np.ndarray:
    y = np.asarray(y_raw, dtype=float)
    if np.any(y < 0) or np.any(np.isnan(y)):
        raise ValueError("log transform needs non-negative values")
    return np.log1p(y)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).reshape(-1)
    t = np.asarray(truth, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"prediction/truth length mismatch: {p.size} vs {t.size}")
    if p.size < 2:
        raise ShapeError("metrics need at least 2 values")
    return p, t


def r_squared(pred, truth) -> float:
    p, t = _pair(pred, truth)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for constant truth")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return math.sqrt(float(np.mean((p - t) ** 2)))


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fractions: tuple = (0.6, 0.2, 0.2)


def split_regions(regions, spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    """Seeded shuffle, then prefix split of sizes floor(0.6n), floor(0.2n) and the rest."""
    items = list(regions)
    n = len(items)
    if n < 5:
        raise ValueError(f"need at least 5 regions to split, got {n}")
    order = np.random.default_rng([spec.seed, 61]).permutation(n)
    n_train = math.floor(spec.fractions[0] * n)
    n_valid = math.floor(spec.fractions[1] * n)
    shuffled = [items[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_valid], shuffled[n_train + n_valid :]


class RegressionHead:
    """d -> 64 -> 1 MLP with relu and dropout on the hidden layer; inputs standardised with train stats."""

    def __init__(self, d: int, seed: int, y_mean: float, mu: np.ndarray, sd: np.ndarray, dropout: float = 0.1):
        rng = np.random.default_rng([seed, 71])
        a = math.sqrt(6.0 / (d + HIDDEN))
        self.w1 = nn.Parameter("reg.W1", rng.uniform(-a, a, size=(HIDDEN, d)))
        self.b1 = nn.Parameter("reg.b1", np.zeros(HIDDEN))
        self.w2 = nn.Parameter("reg.W2", np.zeros((1, HIDDEN)))
        self.b2 = nn.Parameter("reg.b2", np.array([y_mean]))
        self.mu, self.sd = mu, sd
        self.dropout = dropout

    def parameters(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mu) / self.sd

    def forward(self, xs: np.ndarray, train: bool = False, rng=None) -> nn.Tensor:
        h = nn.relu(nn.add(nn.matmul(nn.Tensor(xs), nn.transpose(self.w1)), self.b1))
        h = nn.dropout(h, self.dropout, train, rng)
        out = nn.add(nn.matmul(h, nn.transpose(self.w2)), self.b2)
        return nn.reshape(out, (xs.shape[0],))

    def predict(self, x) -> np.ndarray:
        return self.forward(self.standardize(x)).data.copy()

    def snapshot(self) -> list:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snap) -> None:
        for p, v in zip(self.parameters(), snap):
            p.data = v.copy()


@dataclass
class RegressionResult:
    head: RegressionHead
    hp: dict
    valid_rmse: float
    epochs: int
    grid: list  # (lr, dropout, valid_rmse, epochs) per cell


def _fit_one(x_tr, y_tr, x_va, y_va, lr, rate, seed, max_epochs, patience, mu, sd):
    head = RegressionHead(x_tr.shape[1], seed, float(y_tr.mean()), mu, sd, rate)
    opt = nn.Adam(head.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 72])
    xs_tr, xs_va = head.standardize(x_tr), head.standardize(x_va)
    y_tr_t = nn.Tensor(y_tr)
    best, best_snap, best_epoch, wait = math.inf, head.snapshot(), 0, 0
    for epoch in range(1, max_epochs + 1):
        opt.zero_grad()
        with nn.Tape() as tape:
            loss = nn.mse(head.forward(xs_tr, train=True, rng=rng), y_tr_t)
        nn.backward(tape, loss)
        opt.step()
        val = math.sqrt(float(np.mean((head.forward(xs_va).data - y_va) ** 2)))
        if val < best:
            best, best_snap, best_epoch, wait = val, head.snapshot(), epoch, 0
        else:
            wait += 1
            if wait >= patience:
                break
    head.restore(best_snap)
    return head, best, best_epoch


def train_regression(
    x,
    y,
    split: tuple,
    lrs=LR_GRID,
    dropouts=DROPOUT_GRID,
    seed: int = 0,
    max_epochs: int = 2000,
    patience: int = 50,
) -> RegressionResult:
    """Grid search over (lr, dropout) by validation RMSE; ``split`` holds (train, valid) row indices."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    tr, va = (np.asarray(s, dtype=np.int64) for s in split[:2])
    if tr.size == 0 or va.size == 0:
        raise ValueError("train and validation parts must be non-empty")
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ShapeError(f"representations {x.shape} do not match {y.size} labels")
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    cells = []
    best = None
    for lr, rate in itertools.product(sorted(lrs), sorted(dropouts)):
        head, val, ep = _fit_one(x[tr], y[tr], x[va], y[va], lr, rate, seed, max_epochs, patience, mu, sd)
        cells.append((lr, rate, val, ep))
        # strict < keeps the lexicographically first cell on ties
        if best is None or val < best[2]:
            best = (lr, rate, val, ep, head)
    lr, rate, val, ep, head = best
    return RegressionResult(head, {"lr": lr, "dropout": rate}, val, ep, cells)
