"""Minimal two-hidden-layer ReLU network trained by mini-batch SGD.

Just enough machinery for a seeded, reproducible nonparametric regression:
standardized inputs, fan-in-scaled uniform initialization, mean-squared-error
loss, and early stopping on a held-out validation set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["MlpHyper", "MlpNet", "TrainingError", "train_mlp"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpHyper:
    hidden: tuple[int, int] = (128, 128)
    learning_rate: float = 0.01
    batch_size: int = 500
    patience: int = 10
    max_epochs: int = 500
    val_share: float = 0.2
    seed: int = 0


@dataclass
class MlpNet:
    weights: list = field(default_factory=list)   # [(W1,b1),(W2,b2),(W3,b3)]
    x_mean: np.ndarray = None
    x_std: np.ndarray = None

    def forward(self, x):
        a = (np.asarray(x, dtype=float) - self.x_mean) / self.x_std
        for W, b in self.weights[:-1]:
            a = np.maximum(a @ W + b, 0.0)
        W, b = self.weights[-1]
        return (a @ W + b).ravel()


def _init_layers(sizes, rng):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append([W, b])
    return layers


def _epoch_sgd(net, x, y, lr, batch, order):
    for start in range(0, x.shape[0], batch):
        idx = order[start:start + batch]
        xb = x[idx]
        yb = y[idx]
        # forward with cached activations
        acts = [xb]
        a = xb
        for W, b in net[:-1]:
            a = np.maximum(a @ W + b, 0.0)
            acts.append(a)
        W3, b3 = net[-1]
        pred = (a @ W3 + b3).ravel()
        # backprop of 0.5 * mean squared error
        delta = (pred - yb)[:, None] / xb.shape[0]
        grads = []
        d = delta
        for li in range(len(net) - 1, -1, -1):
            W, b = net[li]
            gW = acts[li].T @ d
            gb = d.sum(axis=0)
            grads.append((gW, gb))
            if li > 0:
                d = (d @ W.T) * (acts[li] > 0.0)
        for (W, b), (gW, gb) in zip(net, reversed(grads)):
            W -= lr * gW
            b -= lr * gb


def train_mlp(x, y, groups, hyper: MlpHyper) -> tuple[MlpNet, dict]:
    """Train on an 80/20 group (firm) split with early stopping.

    Returns the network with the best-validation weights restored plus a
    training report (epochs run, train/validation MSE path endpoints).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    groups = np.asarray(groups)
    rng = np.random.default_rng(hyper.seed)

    uniq = np.unique(groups)
    perm = rng.permutation(uniq.size)
    n_val = max(1, int(round(hyper.val_share * uniq.size)))
    val_groups = set(uniq[perm[:n_val]].tolist())
    is_val = np.fromiter((g in val_groups for g in groups), count=groups.size, dtype=bool)

    net = MlpNet()
    net.x_mean = x.mean(axis=0)
    net.x_std = x.std(axis=0)
    net.x_std[net.x_std == 0.0] = 1.0
    xs = (x - net.x_mean) / net.x_std
    x_tr, y_tr = xs[~is_val], y[~is_val]
    x_va, y_va = xs[is_val], y[is_val]

    sizes = [x.shape[1], *hyper.hidden, 1]
    layers = _init_layers(sizes, rng)

    def val_mse(ls):
        a = x_va
        for W, b in ls[:-1]:
            a = np.maximum(a @ W + b, 0.0)
        W, b = ls[-1]
        return float(np.mean(((a @ W + b).ravel() - y_va) ** 2))

    best_mse = np.inf
    best = None
    initial = val_mse(layers)
    since_best = 0
    epochs = 0
    for epoch in range(hyper.max_epochs):
        order = rng.permutation(x_tr.shape[0])
        _epoch_sgd(layers, x_tr, y_tr, hyper.learning_rate, hyper.batch_size, order)
        mse = val_mse(layers)
        epochs = epoch + 1
        if not np.isfinite(mse) or mse > 10.0 * max(initial, 1e-12):
            raise TrainingError(f"training diverged at epoch {epochs}: val MSE {mse:.3g}")
        if mse < best_mse - 1e-12:
            best_mse = mse
            best = [[W.copy(), b.copy()] for W, b in layers]
            since_best = 0
        else:
            since_best += 1
            if since_best >= hyper.patience:
                break
    net.weights = best if best is not None else layers
    report = {"epochs": epochs, "val_mse": best_mse, "initial_val_mse": initial,
              "n_train": int((~is_val).sum()), "n_val": int(is_val.sum())}
    return net, report
