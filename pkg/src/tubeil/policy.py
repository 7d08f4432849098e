"""Feed-forward ReLU policy with hand-written backpropagation and ADAM.

Policy file layout (little endian)::

    8 bytes   magic  b"TUBEMLP1"
    uint32    number of layers L
    uint32    L + 1 layer widths
    per layer float64 weights (out x in, row-major) then float64 biases (out)
    float64   input mean, input std   (width 0 each)
    float64   output mean, output std (width L each)

Inputs are standardized with the stored statistics before the first layer
and outputs are de-standardized after the last one.
"""
from __future__ import annotations

import copy
import csv
import struct
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DimensionMismatch

MAGIC = b"TUBEMLP1"


@dataclass
class MlpPolicy:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    in_mean: np.ndarray = None
    in_std: np.ndarray = None
    out_mean: np.ndarray = None
    out_std: np.ndarray = None

    def __post_init__(self):
        if self.in_mean is None:
            self.in_mean = np.zeros(self.sizes[0])
            self.in_std = np.ones(self.sizes[0])
        if self.out_mean is None:
            self.out_mean = np.zeros(self.sizes[-1])
            self.out_std = np.ones(self.sizes[-1])

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "MlpPolicy":
        """Uniform fan-in initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        W, b = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            k = 1.0 / np.sqrt(n_in)
            W.append(rng.uniform(-k, k, size=(n_out, n_in)))
            b.append(rng.uniform(-k, k, size=n_out))
        return cls(W, b)

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> List[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def copy(self) -> "MlpPolicy":
        return copy.deepcopy(self)

    def fit_normalization(self, X, U=None, floor: float = 1e-6) -> None:
        X = np.asarray(X, dtype=float)
        self.in_mean = X.mean(axis=0)
        self.in_std = np.maximum(X.std(axis=0), floor)
        if U is not None:
            U = np.asarray(U, dtype=float)
            self.out_mean = U.mean(axis=0)
            self.out_std = np.maximum(U.std(axis=0), floor)

    def normalize_input(self, X):
        return (X - self.in_mean) / self.in_std

    def normalize_output(self, U):
        return (U - self.out_mean) / self.out_std

    def forward_normalized(self, Z, keep: bool = False):
        acts = [Z]
        h = Z
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise DimensionMismatch(f"policy expects {self.sizes[0]} inputs, got {x.shape[-1]}")
        y = self.forward_normalized(self.normalize_input(x))
        return y * self.out_std + self.out_mean

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> None:
        sizes = self.sizes
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(self.weights)))
            fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
            for W, b in zip(self.weights, self.biases):
                fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
            for v in (self.in_mean, self.in_std, self.out_mean, self.out_std):
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "MlpPolicy":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != MAGIC:
            raise ValueError("not a policy file")
        (L,) = struct.unpack_from("<I", data, 8)
        sizes = struct.unpack_from(f"<{L + 1}I", data, 12)
        pos = 12 + 4 * (L + 1)

        def take(count):
            nonlocal pos
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(float)
            pos += 8 * count
            return arr

        W, b = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            W.append(take(n_in * n_out).reshape(n_out, n_in))
            b.append(take(n_out))
        stats = [take(sizes[0]), take(sizes[0]), take(sizes[-1]), take(sizes[-1])]
        if pos != len(data):
            raise ValueError("trailing bytes in policy file")
        return cls(W, b, *stats)


def mse_loss_and_grad(policy: MlpPolicy, X, U, normalized: bool = False):
    """Mean over the batch of squared action error, plus gradients for
    ``policy.params()`` (same order).  With ``normalized=False`` inputs and
    targets are standardized with the policy's statistics first."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if len(X) == 0:
        raise ValueError("empty batch")
    Z = X if normalized else policy.normalize_input(X)
    T = U if normalized else policy.normalize_output(U)
    out, acts = policy.forward_normalized(Z, keep=True)
    diff = out - T
    B = len(X)
    loss = float(np.sum(diff * diff) / B)
    delta = 2.0 * diff / B
    grads = []
    for i in range(len(policy.weights) - 1, -1, -1):
        a_in = acts[i]
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ a_in)
        if i > 0:
            delta = (delta @ policy.weights[i]) * (acts[i] > 0)
    grads.reverse()
    return loss, grads


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default=None)
    v: list = field(default=None)

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        """In-place bias-corrected ADAM update."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m):
            raise DimensionMismatch("optimizer state does not match parameters")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 64
    validation_fraction: float = 0.0
    patience: Optional[int] = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid training configuration")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")


def split_indices(n: int, fraction: float, seed: int):
    """Deterministic train/validation split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(policy: MlpPolicy, X, U, cfg: TrainConfig, seed: int = 0) -> dict:
    """Minibatch ADAM on the MSE loss; modifies ``policy`` in place.

    With a validation split the parameters with the lowest validation loss
    are restored at the end; ``patience`` stops after that many epochs
    without improvement.
    """
    X = policy.normalize_input(np.asarray(X, dtype=float))
    U = policy.normalize_output(np.asarray(U, dtype=float))
    rng = np.random.default_rng(seed)
    if cfg.validation_fraction > 0:
        tr, va = split_indices(len(X), cfg.validation_fraction, seed)
    else:
        tr, va = np.arange(len(X)), np.arange(0)
    Xt, Ut, Xv, Uv = X[tr], U[tr], X[va], U[va]
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    params = policy.params()
    hist = {"train": [], "val": []}
    best, best_params, since = np.inf, None, 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(Xt))
        total = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss, grads = mse_loss_and_grad(policy, Xt[idx], Ut[idx], normalized=True)
            opt.step(params, grads)
            total += loss * len(idx)
        hist["train"].append(total / max(len(Xt), 1))
        if len(Xv):
            out = policy.forward_normalized(Xv)
            vl = float(np.sum((out - Uv) ** 2) / len(Xv))
            hist["val"].append(vl)
            if vl < best:
                best, best_params, since = vl, [p.copy() for p in params], 0
            else:
                since += 1
                if cfg.patience is not None and since >= cfg.patience:
                    break
    if best_params is not None:
        for p, b in zip(params, best_params):
            p[...] = b
        hist["best_val"] = best
    hist["epochs"] = len(hist["train"])
    return hist


# -- datasets ----------------------------------------------------------------

PROVENANCE = {"demo": 0, "augmented": 1, "fine-tune": 2}


@dataclass
class Dataset:
    """Rows of (input, target action, provenance)."""
    X: np.ndarray
    U: np.ndarray
    prov: np.ndarray

    @classmethod
    def empty(cls, n_in: int, n_out: int) -> "Dataset":
        return cls(np.zeros((0, n_in)), np.zeros((0, n_out)), np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.X)

    def add(self, X, U, provenance: str) -> None:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if X.shape[1] != self.X.shape[1] or U.shape[1] != self.U.shape[1] or len(X) != len(U):
            raise DimensionMismatch("row dimensions do not match the dataset")
        self.X = np.vstack([self.X, X])
        self.U = np.vstack([self.U, U])
        self.prov = np.r_[self.prov, np.full(len(X), PROVENANCE[provenance])]

    def count(self, provenance: str) -> int:
        return int(np.sum(self.prov == PROVENANCE[provenance]))

    def save_csv(self, path) -> None:
        """Columns: provenance code, x0..x{n-1}, u0..u{m-1}."""
        n, m = self.X.shape[1], self.U.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["provenance"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)])
            for p, x, u in zip(self.prov, self.X, self.U):
                w.writerow([int(p)] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        with open(path) as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        n = sum(h.startswith("x") for h in head)
        data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(head))
        return cls(data[:, 1:1 + n], data[:, 1 + n:], data[:, 0].astype(int))
